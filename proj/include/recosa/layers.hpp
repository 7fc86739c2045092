#pragma once

// Neural building blocks: LSTM sentence encoder, learned position tables,
// scaled dot-product and multi-head attention, feedforward nets, masks.

#include <cmath>
#include <string>
#include <vector>

#include "recosa/common.hpp"
#include "recosa/tensor.hpp"

namespace recosa {

// Named master copies of every parameter. Each training step binds them to a
// fresh tape as leaves; the optimizer mutates the copies here.
class ParamStore {
public:
    int add(const std::string& name, Array value) {
        names_.push_back(name);
        values_.push_back(std::move(value));
        return static_cast<int>(values_.size()) - 1;
    }

    int count() const { return static_cast<int>(values_.size()); }
    const std::string& name(int idx) const { return names_[static_cast<std::size_t>(idx)]; }

    int find(const std::string& name) const {
        for (int i = 0; i < count(); ++i)
            if (names_[static_cast<std::size_t>(i)] == name) return i;
        return -1;
    }
    Array& value(int idx) { return values_[static_cast<std::size_t>(idx)]; }
    const Array& value(int idx) const { return values_[static_cast<std::size_t>(idx)]; }

private:
    std::vector<std::string> names_;
    std::vector<Array> values_;
};

struct BoundParams {
    Tape* tape = nullptr;
    std::vector<Tensor> bound;
    Tensor operator[](int idx) const { return bound[static_cast<std::size_t>(idx)]; }
};

inline BoundParams bind_params(const ParamStore& ps, Tape& tape, bool requires_grad = true) {
    BoundParams bp;
    bp.tape = &tape;
    for (int i = 0; i < ps.count(); ++i) bp.bound.push_back(tape.leaf(ps.value(i), requires_grad));
    return bp;
}

// Init classes: gate/embedding weights uniform(-0.08, 0.08), projections
// uniform scaled by 1/sqrt(fan_in), biases zero.
inline Array uniform_init(const Shape& shape, Rng& rng, double limit) {
    Array a(shape);
    for (long i = 0; i < a.numel(); ++i) a[i] = rng.uniform(-limit, limit);
    return a;
}

struct Affine {  // y = x W + b
    int w = -1, b = -1;
    Affine() = default;
    Affine(ParamStore& ps, const std::string& name, int in, int out, Rng& rng, double limit)
        : w(ps.add(name + ".w", uniform_init({in, out}, rng, limit))),
          b(ps.add(name + ".b", Array(Shape{out}, 0.0))) {}

    Tensor apply(const BoundParams& bp, Tensor x) const { return bias_add(matmul(x, bp[w]), bp[b]); }
};

inline Affine gate_affine(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    return Affine(ps, name, in, out, rng, 0.08);
}

inline Affine proj_affine(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    return Affine(ps, name, in, out, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

// -------------------------------------------------------------- LSTM encoder

struct LSTMParams {
    Affine wi, wf, wo, wl;  // each [d_h + d_w -> d_h]
    int d_h = 0;
    LSTMParams() = default;
    LSTMParams(ParamStore& ps, const std::string& name, int d_w, int d_hidden, Rng& rng)
        : wi(gate_affine(ps, name + ".i", d_hidden + d_w, d_hidden, rng)),
          wf(gate_affine(ps, name + ".f", d_hidden + d_w, d_hidden, rng)),
          wo(gate_affine(ps, name + ".o", d_hidden + d_w, d_hidden, rng)),
          wl(gate_affine(ps, name + ".l", d_hidden + d_w, d_hidden, rng)),
          d_h(d_hidden) {}
};

// Runs the gate recurrence over [M, d_w] rows, h_0 = c_0 = 0; returns h_M as
// [1, d_h]. Padded tails are handled by the caller passing only real rows.
inline Tensor lstm_encode(const BoundParams& bp, const LSTMParams& p, Tensor words) {
    if (words.shape().size() != 2) fail_runtime("lstm_encode: expected [M, d_w] input");
    const int M = words.shape()[0];
    if (M < 1) fail_runtime("lstm_encode: empty sentence");
    Tape& tape = *bp.tape;
    Tensor h = tape.constant(Array(Shape{1, p.d_h}, 0.0));
    Tensor c = tape.constant(Array(Shape{1, p.d_h}, 0.0));
    for (int k = 0; k < M; ++k) {
        Tensor x = concat_last({h, row(words, k)});
        Tensor i = sigmoid(p.wi.apply(bp, x));
        Tensor f = sigmoid(p.wf.apply(bp, x));
        Tensor o = sigmoid(p.wo.apply(bp, x));
        Tensor l = tanh(p.wl.apply(bp, x));
        c = add(mul(f, c), mul(i, l));
        h = mul(o, tanh(c));
    }
    return h;
}

// ---------------------------------------------------------------- positions

struct PositionTable {
    int table = -1;  // [max_positions, dim]
    int rows = 0;
    PositionTable() = default;
    PositionTable(ParamStore& ps, const std::string& name, int max_positions, int dim, Rng& rng)
        : table(ps.add(name, uniform_init({max_positions, dim}, rng, 0.08))), rows(max_positions) {}

    // Rows for positions 1..n (row i-1 holds position i).
    Tensor first(const BoundParams& bp, int n) const {
        if (n > rows) fail_runtime("position index " + std::to_string(n) + " exceeds table of " +
                                   std::to_string(rows));
        std::vector<int> ids(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) ids[static_cast<std::size_t>(i)] = i;
        return embed_rows(bp[table], ids);
    }
};

struct ContextPositionParams {
    PositionTable table;  // d_p = d_h
    Affine proj;          // [2 d_h -> d]
    ContextPositionParams() = default;
    ContextPositionParams(ParamStore& ps, const std::string& name, int max_positions, int d_h, int d,
                          Rng& rng)
        : table(ps, name + ".table", max_positions, d_h, rng),
          proj(proj_affine(ps, name + ".proj", 2 * d_h, d, rng)) {}
};

// Row i of the output is an affine image of concat(h_i, P_i); position index
// runs 1..N left to right so the post sits at position N.
inline Tensor add_context_positions(const BoundParams& bp, const ContextPositionParams& p,
                                    Tensor sentence_vecs) {
    const int N = sentence_vecs.shape()[0];
    Tensor pos = p.table.first(bp, N);
    return p.proj.apply(bp, concat_last({sentence_vecs, pos}));
}

// ---------------------------------------------------------------- attention

struct AttentionOut {
    Tensor output;   // [n_q, d_v]
    Tensor weights;  // [n_q, n_k], rows sum to 1
};

// softmax(Q K^T / sqrt(d_k) + mask) V; mask is additive (0 / -inf) or null.
inline AttentionOut scaled_dot_attention(Tensor q, Tensor k, Tensor v, const Array* mask = nullptr) {
    if (q.shape()[1] != k.shape()[1]) fail_runtime("attention: query/key width mismatch");
    if (k.shape()[0] != v.shape()[0]) fail_runtime("attention: key/value count mismatch");
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.shape()[1]));
    Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_dk);
    Tensor w = mask ? masked_softmax(scores, *mask) : softmax(scores, 1);
    return {matmul(w, v), w};
}

struct MultiHeadParams {
    struct Head {
        int wq = -1, wk = -1, wv = -1;  // each [d -> d/H]
    };
    std::vector<Head> heads;
    int wo = -1;  // [d -> d] output mix, bias-free
    int H = 0, d = 0;

    MultiHeadParams() = default;
    MultiHeadParams(ParamStore& ps, const std::string& name, int model_d, int n_heads, Rng& rng)
        : H(n_heads), d(model_d) {
        if (n_heads < 1 || model_d % n_heads != 0)
            fail_usage("model dim " + std::to_string(model_d) + " not divisible by " +
                       std::to_string(n_heads) + " heads");
        const int dh = model_d / n_heads;
        const double lim = 1.0 / std::sqrt(static_cast<double>(model_d));
        for (int i = 0; i < n_heads; ++i) {
            Head h;
            const std::string hn = name + ".h" + std::to_string(i);
            h.wq = ps.add(hn + ".wq", uniform_init({model_d, dh}, rng, lim));
            h.wk = ps.add(hn + ".wk", uniform_init({model_d, dh}, rng, lim));
            h.wv = ps.add(hn + ".wv", uniform_init({model_d, dh}, rng, lim));
            heads.push_back(h);
        }
        wo = ps.add(name + ".wo", uniform_init({model_d, model_d}, rng, lim));
    }
};

struct MultiHeadOut {
    Tensor output;                     // [n_q, d]
    std::vector<Tensor> head_weights;  // H tensors of [n_q, n_k]
};

inline MultiHeadOut multi_head(const BoundParams& bp, const MultiHeadParams& p, Tensor q, Tensor k,
                               Tensor v, const Array* mask = nullptr) {
    std::vector<Tensor> mixed;
    MultiHeadOut out;
    for (const auto& head : p.heads) {
        AttentionOut a = scaled_dot_attention(matmul(q, bp[head.wq]), matmul(k, bp[head.wk]),
                                              matmul(v, bp[head.wv]), mask);
        mixed.push_back(a.output);
        out.head_weights.push_back(a.weights);
    }
    out.output = matmul(concat_last(mixed), bp[p.wo]);
    return out;
}

// -------------------------------------------------------------- feedforward

struct FFNParams {
    Affine a1, a2;  // [d -> d_ff], [d_ff -> d]
    bool residual = true;
    FFNParams() = default;
    FFNParams(ParamStore& ps, const std::string& name, int d, int d_ff, Rng& rng, bool with_residual = true)
        : a1(proj_affine(ps, name + ".a1", d, d_ff, rng)),
          a2(proj_affine(ps, name + ".a2", d_ff, d, rng)),
          residual(with_residual) {}
};

inline Tensor feed_forward(const BoundParams& bp, const FFNParams& p, Tensor x) {
    Tensor core = p.a2.apply(bp, relu(p.a1.apply(bp, x)));
    return p.residual ? add(x, core) : core;
}

struct LayerNormParams {
    int gain = -1, bias = -1;
    LayerNormParams() = default;
    LayerNormParams(ParamStore& ps, const std::string& name, int d)
        : gain(ps.add(name + ".gain", Array(Shape{d}, 1.0))),
          bias(ps.add(name + ".bias", Array(Shape{d}, 0.0))) {}

    Tensor apply(const BoundParams& bp, Tensor x) const { return layer_norm(x, bp[gain], bp[bias]); }
};

// -------------------------------------------------------------------- masks

// Entry (t, t') = 0 if t' <= t else -inf: position t sees only prefix t.
inline Array causal_mask(int T) {
    if (T < 1) fail_runtime("causal_mask: T must be positive");
    Array m(Shape{T, T}, 0.0);
    const double ninf = -std::numeric_limits<double>::infinity();
    for (int t = 0; t < T; ++t)
        for (int u = t + 1; u < T; ++u) m.at(t, u) = ninf;
    return m;
}

// [n_q, n_slots] mask hiding slots >= real_count.
inline Array slot_mask(int n_q, int real_count, int n_slots) {
    Array m(Shape{n_q, n_slots}, 0.0);
    const double ninf = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < n_q; ++i)
        for (int j = real_count; j < n_slots; ++j) m.at(i, j) = ninf;
    return m;
}

}  // namespace recosa
