#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "recosa/adam.hpp"
#include "recosa/tensor.hpp"
#include "support/finite_diff.hpp"

using namespace recosa;
using testsupport::compare_grads;
using testsupport::fd_gradient;

namespace {

Array random_array(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Array a(s);
    for (long i = 0; i < a.numel(); ++i) a[i] = rng.uniform(lo, hi);
    return a;
}

}  // namespace

TEST_CASE("elementwise analytic values") {
    Tape tape;
    Tensor z = tape.constant(Array::scalar(0.0));
    REQUIRE(sigmoid(z).scalar() == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(tanh(z).scalar() == Catch::Approx(0.0).margin(1e-15));

    Tensor a = tape.constant(Array::from({2}, {1, 2}));
    Tensor b = tape.constant(Array::from({1}, {3}));
    Tensor cat = concat_last({a, b});
    REQUIRE(cat.shape() == Shape{3});
    REQUIRE(cat.value().data == std::vector<double>{1, 2, 3});
}

TEST_CASE("elementwise shape mismatch is a structured error") {
    Tape tape;
    Tensor a = tape.constant(Array(Shape{2, 3}, 1.0));
    Tensor b = tape.constant(Array(Shape{3, 2}, 1.0));
    REQUIRE_THROWS_WITH(add(a, b), Catch::Matchers::ContainsSubstring("[2,3]") &&
                                       Catch::Matchers::ContainsSubstring("[3,2]"));
    REQUIRE_THROWS_AS(mul(a, b), Error);
}

TEST_CASE("matmul analytic values") {
    Tape tape;
    Tensor eye = tape.constant(Array::from({2, 2}, {1, 0, 0, 1}));
    Tensor m = tape.constant(Array::from({2, 2}, {3, 4, 5, 6}));
    REQUIRE(matmul(eye, m).value().data == std::vector<double>{3, 4, 5, 6});

    Tensor r = tape.constant(Array::from({1, 2}, {1, 2}));
    Tensor c = tape.constant(Array::from({2, 1}, {3, 4}));
    REQUIRE(matmul(r, c).scalar() == Catch::Approx(11.0));

    Tensor bad = tape.constant(Array(Shape{3, 2}, 1.0));
    REQUIRE_THROWS_AS(matmul(r, bad), Error);
}

TEST_CASE("matmul gradient matches central differences at 3x3") {
    Rng rng(42);
    Array a = random_array({3, 3}, rng);
    Array b = random_array({3, 3}, rng);

    Tape tape;
    Tensor ta = tape.leaf(a, true);
    Tensor tb = tape.leaf(b, false);
    Tensor loss = sum(matmul(ta, tb));
    tape.backward(loss);
    Array analytic = tape.grad(ta);

    auto eval = [&]() {
        Tape t2;
        return sum(matmul(t2.leaf(a, false), t2.leaf(b, false))).scalar();
    };
    Array fd = fd_gradient(eval, a);
    auto cmp = compare_grads(analytic, fd, 1e-6, 1e-10);
    INFO("worst rel " << cmp.worst_rel);
    REQUIRE(cmp.ok);
}

TEST_CASE("softmax analytic values and stability") {
    Tape tape;
    Tensor flat = tape.constant(Array::from({4}, {0, 0, 0, 0}));
    Array y = softmax(flat, 0).value();
    for (double v : y.data) REQUIRE(v == Catch::Approx(0.25).margin(1e-15));

    Tensor two = tape.constant(Array::from({2}, {0.0, std::log(3.0)}));
    Array y2 = softmax(two, 0).value();
    REQUIRE(y2[0] == Catch::Approx(0.25).margin(1e-12));
    REQUIRE(y2[1] == Catch::Approx(0.75).margin(1e-12));

    Tensor big = tape.constant(Array::from({2}, {1000.0, 1000.0}));
    Array y3 = softmax(big, 0).value();
    REQUIRE(y3[0] == Catch::Approx(0.5).margin(1e-15));
    REQUIRE(y3[1] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
    Rng rng(7);
    for (int it = 0; it < 50; ++it) {
        const int n = 1 + static_cast<int>(rng.next_below(8));
        const int m = 1 + static_cast<int>(rng.next_below(8));
        Array x = random_array({n, m}, rng, -5, 5);
        Tape tape;
        Array y = softmax(tape.constant(x), 1).value();
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < m; ++j) s += y.at(i, j);
            REQUIRE(std::fabs(s - 1.0) < 1e-12);
        }
        Array shifted = x;
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) shifted.at(i, j) += 123.456;
        Array ys = softmax(tape.constant(shifted), 1).value();
        for (long i = 0; i < y.numel(); ++i) REQUIRE(std::fabs(y[i] - ys[i]) < 1e-12);
    }
}

TEST_CASE("masked softmax zeroes masked slots exactly, errors on fully-masked row") {
    const double ninf = -std::numeric_limits<double>::infinity();
    Tape tape;
    Tensor x = tape.constant(Array::from({2, 3}, {1, 2, 3, 4, 5, 6}));
    Array mask = Array::from({2, 3}, {0, ninf, 0, 0, 0, ninf});
    Array y = masked_softmax(x, mask).value();
    REQUIRE(y.at(0, 1) == 0.0);
    REQUIRE(y.at(1, 2) == 0.0);
    REQUIRE(y.at(0, 0) + y.at(0, 2) == Catch::Approx(1.0).margin(1e-12));

    Array all(Shape{1, 2}, ninf);
    Tensor x2 = tape.constant(Array::from({1, 2}, {1, 2}));
    REQUIRE_THROWS_WITH(masked_softmax(x2, all), Catch::Matchers::ContainsSubstring("degenerate"));
}

TEST_CASE("backward analytic values") {
    {
        Tape tape;
        Tensor x = tape.leaf(Array::scalar(3.0), true);
        Tensor loss = mul(x, x);
        tape.backward(loss);
        REQUIRE(tape.grad(x)[0] == Catch::Approx(6.0));
    }
    {
        Tape tape;
        Tensor x = tape.leaf(Array::scalar(0.0), true);
        Tensor loss = sigmoid(x);
        tape.backward(loss);
        REQUIRE(tape.grad(x)[0] == Catch::Approx(0.25));
    }
}

TEST_CASE("backward rejects non-scalar loss; disconnected params get zeros") {
    Tape tape;
    Tensor x = tape.leaf(Array(Shape{2}, 1.0), true);
    Tensor unused = tape.leaf(Array(Shape{3}, 2.0), true);
    Tensor vec = add(x, x);
    REQUIRE_THROWS_AS(tape.backward(vec), Error);

    Tensor loss = sum(vec);
    tape.backward(loss);
    Array gz = tape.grad(unused);
    REQUIRE(gz.shape == Shape{3});
    for (double v : gz.data) REQUIRE(v == 0.0);
}

TEST_CASE("repeated backward yields identical gradients") {
    Rng rng(11);
    Array xv = random_array({4, 4}, rng);
    Tape tape;
    Tensor x = tape.leaf(xv, true);
    Tensor loss = sum(mul(sigmoid(x), tanh(x)));
    tape.backward(loss);
    Array g1 = tape.grad(x);
    tape.backward(loss);
    Array g2 = tape.grad(x);
    REQUIRE(g1.data == g2.data);
}

TEST_CASE("tape replay determinism: same inputs, same outputs") {
    Rng rng(3);
    Array a = random_array({5, 3}, rng);
    Array b = random_array({3, 4}, rng);
    auto run = [&]() {
        Tape t;
        Tensor out = softmax(matmul(t.leaf(a, false), t.leaf(b, false)), 1);
        return out.value().data;
    };
    REQUIRE(run() == run());
}

TEST_CASE("forward op rejects non-finite results") {
    Tape tape;
    Tensor big = tape.constant(Array(Shape{2}, 1e200));
    REQUIRE_THROWS_WITH(mul(big, big), Catch::Matchers::ContainsSubstring("non-finite"));
    Tensor neg = tape.constant(Array(Shape{1}, -1.0));
    REQUIRE_THROWS_AS(log(neg), Error);
}

TEST_CASE("adam zero gradient leaves parameter unchanged") {
    Array p = Array::scalar(1.5);
    AdamState st(p.shape);
    adam_step(p, Array::scalar(0.0), st, AdamHyper{});
    REQUIRE(p[0] == 1.5);
    REQUIRE(st.t == 1);
}

TEST_CASE("adam single step matches hand-evaluated recurrence") {
    // Hand evaluation with g=1, t: 0->1, lr=0.1, b1=0.9, b2=0.999, eps=1e-8:
    // m=0.1, v=0.001, m_hat=1, v_hat=1, delta = -0.1 / (1 + 1e-8).
    AdamHyper hp;
    hp.lr = 0.1;
    Array p = Array::scalar(1.0);
    AdamState st(p.shape);
    adam_step(p, Array::scalar(1.0), st, hp);
    const double expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
    REQUIRE(p[0] == Catch::Approx(expected).margin(1e-15));
    REQUIRE(st.t == 1);
}

TEST_CASE("adam is bitwise deterministic over 100 steps") {
    auto run = [](std::uint64_t seed) {
        Rng rng(seed);
        Array p = random_array({4, 3}, rng);
        AdamState st(p.shape);
        AdamHyper hp;
        hp.lr = 0.01;
        for (int step = 0; step < 100; ++step) {
            Array g(p.shape);
            for (long i = 0; i < p.numel(); ++i) g[i] = 2.0 * p[i] - 1.0;
            adam_step(p, g, st, hp);
        }
        return p.data;
    };
    REQUIRE(run(9) == run(9));
}

TEST_CASE("adam rejects non-finite gradients before mutating state") {
    Array p = Array::scalar(2.0);
    AdamState st(p.shape);
    Array g = Array::scalar(std::numeric_limits<double>::quiet_NaN());
    REQUIRE_THROWS_AS(adam_step(p, g, st, AdamHyper{}), Error);
    REQUIRE(p[0] == 2.0);
    REQUIRE(st.t == 0);
    REQUIRE(st.m[0] == 0.0);
}

TEST_CASE("global norm clipping") {
    std::vector<Array> grads{Array::from({2}, {3, 0}), Array::from({1}, {4})};
    const double norm = clip_global_norm(grads, 1.0);
    REQUIRE(norm == Catch::Approx(5.0));
    REQUIRE(grads[0][0] == Catch::Approx(0.6));
    REQUIRE(grads[1][0] == Catch::Approx(0.8));

    std::vector<Array> small{Array::from({1}, {0.5})};
    clip_global_norm(small, 1.0);
    REQUIRE(small[0][0] == 0.5);
}

TEST_CASE("dropout: identity at rate 0, gradient equals kept mask") {
    Rng rng(5);
    Array xv = random_array({3, 3}, rng);
    Tape tape;
    Tensor x = tape.leaf(xv, true);
    Rng drop_rng(17);
    Tensor same = dropout(x, 0.0, drop_rng);
    REQUIRE(same.node_id() == x.node_id());

    Tensor y = dropout(x, 0.5, drop_rng);
    Tensor loss = sum(y);
    tape.backward(loss);
    Array g = tape.grad(x);
    for (long i = 0; i < g.numel(); ++i) {
        const bool kept = y.value()[i] != 0.0 || xv[i] == 0.0;
        if (kept) {
            REQUIRE(g[i] == Catch::Approx(2.0));
        } else {
            REQUIRE(g[i] == 0.0);
        }
    }
}

// Every differentiable op against the central-difference oracle on random
// shapes (dims <= 8), rel err < 1e-4 at f64 with h = 1e-5.
TEST_CASE("op gradient fuzz vs finite differences") {
    Rng rng(2024);

    auto check = [&](const char* name, std::vector<Array> inputs,
                     const std::function<Tensor(Tape&, std::vector<Tensor>&)>& build) {
        // Loss = random-weighted sum of the op output so every output
        // element influences the scalar.
        Array w;
        {
            Tape t;
            std::vector<Tensor> xs;
            for (auto& a : inputs) xs.push_back(t.leaf(a, false));
            Tensor out = build(t, xs);
            w = random_array(out.shape(), rng, 0.5, 1.5);
        }
        auto eval = [&]() {
            Tape t;
            std::vector<Tensor> xs;
            for (auto& a : inputs) xs.push_back(t.leaf(a, false));
            return weighted_sum(build(t, xs), w).scalar();
        };
        Tape tape;
        std::vector<Tensor> xs;
        for (auto& a : inputs) xs.push_back(tape.leaf(a, true));
        Tensor loss = weighted_sum(build(tape, xs), w);
        tape.backward(loss);
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            Array analytic = tape.grad(xs[i]);
            Array fd = fd_gradient(eval, inputs[i]);
            auto cmp = compare_grads(analytic, fd);
            INFO(name << " input " << i << " worst rel " << cmp.worst_rel);
            REQUIRE(cmp.ok);
        }
    };

    auto dim = [&]() { return 1 + static_cast<int>(rng.next_below(8)); };

    for (int round = 0; round < 3; ++round) {
        const int n = dim(), m = dim(), k = dim();

        check("add", {random_array({n, m}, rng), random_array({n, m}, rng)},
              [](Tape&, std::vector<Tensor>& x) { return add(x[0], x[1]); });
        check("mul", {random_array({n, m}, rng), random_array({n, m}, rng)},
              [](Tape&, std::vector<Tensor>& x) { return mul(x[0], x[1]); });
        check("scale", {random_array({n, m}, rng)},
              [](Tape&, std::vector<Tensor>& x) { return scale(x[0], -1.75); });
        check("sigmoid", {random_array({n, m}, rng, -3, 3)},
              [](Tape&, std::vector<Tensor>& x) { return sigmoid(x[0]); });
        check("tanh", {random_array({n, m}, rng, -3, 3)},
              [](Tape&, std::vector<Tensor>& x) { return tanh(x[0]); });
        // relu sampled away from the kink at 0
        Array rel = random_array({n, m}, rng, 0.1, 2.0);
        for (long i = 0; i < rel.numel(); ++i)
            if (rng.next_unit() < 0.5) rel[i] = -rel[i];
        check("relu", {rel}, [](Tape&, std::vector<Tensor>& x) { return relu(x[0]); });
        check("log", {random_array({n, m}, rng, 0.1, 2.0)},
              [](Tape&, std::vector<Tensor>& x) { return log(x[0]); });
        check("concat_last", {random_array({n, m}, rng), random_array({n, k}, rng)},
              [](Tape&, std::vector<Tensor>& x) { return concat_last({x[0], x[1]}); });
        check("concat_rows", {random_array({n, m}, rng), random_array({k, m}, rng)},
              [](Tape&, std::vector<Tensor>& x) { return concat_rows({x[0], x[1]}); });
        const int r = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n)));
        check("row", {random_array({n, m}, rng)},
              [r](Tape&, std::vector<Tensor>& x) { return row(x[0], r); });
        check("matmul", {random_array({n, k}, rng), random_array({k, m}, rng)},
              [](Tape&, std::vector<Tensor>& x) { return matmul(x[0], x[1]); });
        check("transpose", {random_array({n, m}, rng)},
              [](Tape&, std::vector<Tensor>& x) { return transpose(x[0]); });
        check("bias_add", {random_array({n, m}, rng), random_array({m}, rng)},
              [](Tape&, std::vector<Tensor>& x) { return bias_add(x[0], x[1]); });
        check("softmax", {random_array({n, m}, rng, -2, 2)},
              [](Tape&, std::vector<Tensor>& x) { return softmax(x[0], 1); });
        check("softmax axis0", {random_array({n, m}, rng, -2, 2)},
              [](Tape&, std::vector<Tensor>& x) { return softmax(x[0], 0); });
        Array mask(Shape{n, m}, 0.0);
        for (int i = 0; i < n; ++i) {
            for (int j = 1; j < m; ++j)
                if (rng.next_unit() < 0.3) mask.at(i, j) = -std::numeric_limits<double>::infinity();
        }
        check("masked_softmax", {random_array({n, m}, rng, -2, 2)},
              [&mask](Tape&, std::vector<Tensor>& x) { return masked_softmax(x[0], mask); });
        check("layer_norm",
              {random_array({n, m + 1}, rng), random_array({m + 1}, rng, 0.5, 1.5),
               random_array({m + 1}, rng)},
              [](Tape&, std::vector<Tensor>& x) { return layer_norm(x[0], x[1], x[2]); });
        std::vector<int> ids;
        for (int i = 0; i < k; ++i) ids.push_back(static_cast<int>(rng.next_below(static_cast<std::uint64_t>(n))));
        check("embed_rows", {random_array({n, m}, rng)},
              [&ids](Tape&, std::vector<Tensor>& x) { return embed_rows(x[0], ids); });
        std::vector<int> cols;
        for (int i = 0; i < n; ++i) cols.push_back(static_cast<int>(rng.next_below(static_cast<std::uint64_t>(m))));
        check("pick_cols", {random_array({n, m}, rng)},
              [&cols](Tape&, std::vector<Tensor>& x) { return pick_cols(x[0], cols); });
        Array wsum = random_array({n, m}, rng);
        check("weighted_sum", {random_array({n, m}, rng)},
              [&wsum](Tape&, std::vector<Tensor>& x) { return weighted_sum(x[0], wsum); });
    }
}
