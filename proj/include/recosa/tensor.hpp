#pragma once

// Dense f64 tensors on a recorded computation tape with reverse-mode
// differentiation. Single-threaded per tape; values are checked finite after
// every forward op. No broadcasting except bias_add over the leading axis.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "recosa/common.hpp"

namespace recosa {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline long shape_numel(const Shape& s) {
    long n = 1;
    for (int d : s) n *= d;
    return n;
}

// Plain value: shape + row-major f64 data. Used for tape node payloads,
// parameters, masks and constants.
struct Array {
    Shape shape;
    std::vector<double> data;

    Array() = default;

    explicit Array(Shape s, double fill = 0.0) : shape(std::move(s)) {
        validate_shape();
        data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    }

    static Array scalar(double v) {
        Array a(Shape{1});
        a.data[0] = v;
        return a;
    }

    static Array from(Shape s, std::vector<double> values) {
        Array a;
        a.shape = std::move(s);
        a.validate_shape();
        if (shape_numel(a.shape) != static_cast<long>(values.size())) {
            fail_runtime("tensor: shape " + shape_str(a.shape) + " does not match " +
                         std::to_string(values.size()) + " values");
        }
        a.data = std::move(values);
        return a;
    }

    long numel() const { return static_cast<long>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }

    int rows() const { return shape.size() == 2 ? shape[0] : (shape.empty() ? 0 : shape[0]); }
    int cols() const { return shape.size() == 2 ? shape[1] : 1; }

    double& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }

    double& operator[](long i) { return data[static_cast<std::size_t>(i)]; }
    double operator[](long i) const { return data[static_cast<std::size_t>(i)]; }

private:
    void validate_shape() const {
        if (shape.empty()) fail_runtime("tensor: empty shape");
        for (int d : shape) {
            if (d <= 0) fail_runtime("tensor: non-positive dim in shape " + shape_str(shape));
        }
    }
};

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

inline void ensure_all_finite(const Array& a, const char* where) {
    for (double v : a.data) {
        if (!std::isfinite(v)) {
            fail_runtime(std::string(where) + ": non-finite value produced");
        }
    }
}

class Tape;

// Handle to one node of a tape: identity plus value access.
class Tensor {
public:
    Tensor() = default;
    Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

    bool valid() const { return tape_ != nullptr; }
    int node_id() const { return id_; }
    Tape* tape() const { return tape_; }

    const Shape& shape() const;
    const Array& value() const;
    bool requires_grad() const;
    double scalar() const;

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

enum class Op {
    leaf,
    add,
    mul,
    scale,
    sigmoid,
    tanh_op,
    relu,
    log_op,
    concat_last,
    concat_rows,
    row,
    matmul,
    transpose,
    bias_add,
    softmax,
    layer_norm,
    embed_rows,
    pick_cols,
    weighted_sum,
    dropout,
};

class Tape {
public:
    struct Node {
        Op op = Op::leaf;
        std::vector<int> inputs;
        Array value;
        std::vector<double> aux;  // op-specific saved values
        std::vector<int> iaux;    // op-specific saved indices
        bool requires_grad = false;
    };

    Tensor leaf(Array value, bool requires_grad) {
        ensure_all_finite(value, "leaf");
        Node n;
        n.op = Op::leaf;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    Tensor constant(Array value) { return leaf(std::move(value), false); }

    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    const Array& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
    std::size_t size() const { return nodes_.size(); }

    // Reverse-mode sweep from a scalar loss. May be called repeatedly; each
    // call recomputes gradients from scratch and yields identical values.
    void backward(const Tensor& loss) {
        if (loss.tape() != this) fail_runtime("backward: loss from another tape");
        const Node& ln = node(loss.node_id());
        if (ln.value.numel() != 1) {
            fail_runtime("backward: loss must be scalar, got shape " + shape_str(ln.value.shape));
        }
        grads_.assign(nodes_.size(), Array{});
        grads_[static_cast<std::size_t>(loss.node_id())] = Array(ln.value.shape, 1.0);
        for (int id = loss.node_id(); id >= 0; --id) {
            Array& g = grads_[static_cast<std::size_t>(id)];
            if (g.data.empty()) continue;
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.requires_grad || n.op == Op::leaf) continue;
            backward_node(n, g);
        }
        have_grads_ = true;
    }

    // Gradient of the last backward() loss wrt t; zeros if disconnected.
    Array grad(const Tensor& t) const {
        if (!have_grads_) fail_runtime("grad: backward() has not run");
        const Array& g = grads_[static_cast<std::size_t>(t.node_id())];
        if (g.data.empty()) return Array(node(t.node_id()).value.shape, 0.0);
        return g;
    }

private:
    friend Tensor add(const Tensor&, const Tensor&);
    friend Tensor mul(const Tensor&, const Tensor&);
    friend Tensor scale(const Tensor&, double);
    friend Tensor sigmoid(const Tensor&);
    friend Tensor tanh(const Tensor&);
    friend Tensor relu(const Tensor&);
    friend Tensor log(const Tensor&);
    friend Tensor concat_last(const std::vector<Tensor>&);
    friend Tensor concat_rows(const std::vector<Tensor>&);
    friend Tensor row(const Tensor&, int);
    friend Tensor matmul(const Tensor&, const Tensor&);
    friend Tensor transpose(const Tensor&);
    friend Tensor bias_add(const Tensor&, const Tensor&);
    friend Tensor softmax_impl(const Tensor&, int, const Array*);
    friend Tensor layer_norm(const Tensor&, const Tensor&, const Tensor&, double);
    friend Tensor embed_rows(const Tensor&, const std::vector<int>&);
    friend Tensor pick_cols(const Tensor&, const std::vector<int>&);
    friend Tensor weighted_sum(const Tensor&, const Array&);
    friend Tensor dropout(const Tensor&, double, Rng&);

    Tensor push(Node n) {
        nodes_.push_back(std::move(n));
        return Tensor(this, static_cast<int>(nodes_.size()) - 1);
    }

    Tensor record(Op op, std::vector<int> inputs, Array value,
                  std::vector<double> aux = {}, std::vector<int> iaux = {}) {
        ensure_all_finite(value, op_name(op));
        Node n;
        n.op = op;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        n.aux = std::move(aux);
        n.iaux = std::move(iaux);
        for (int in : n.inputs) {
            if (node(in).requires_grad) n.requires_grad = true;
        }
        return push(std::move(n));
    }

    static const char* op_name(Op op) {
        switch (op) {
            case Op::leaf: return "leaf";
            case Op::add: return "add";
            case Op::mul: return "mul";
            case Op::scale: return "scale";
            case Op::sigmoid: return "sigmoid";
            case Op::tanh_op: return "tanh";
            case Op::relu: return "relu";
            case Op::log_op: return "log";
            case Op::concat_last: return "concat_last";
            case Op::concat_rows: return "concat_rows";
            case Op::row: return "row";
            case Op::matmul: return "matmul";
            case Op::transpose: return "transpose";
            case Op::bias_add: return "bias_add";
            case Op::softmax: return "softmax";
            case Op::layer_norm: return "layer_norm";
            case Op::embed_rows: return "embed_rows";
            case Op::pick_cols: return "pick_cols";
            case Op::weighted_sum: return "weighted_sum";
            case Op::dropout: return "dropout";
        }
        return "?";
    }

    Array& grad_slot(int id, const Shape& shape) {
        Array& g = grads_[static_cast<std::size_t>(id)];
        if (g.data.empty()) g = Array(shape, 0.0);
        return g;
    }

    void accumulate_if_needed(int input_id, const Array& contribution) {
        if (!node(input_id).requires_grad) return;
        Array& g = grad_slot(input_id, contribution.shape);
        for (long i = 0; i < contribution.numel(); ++i) g[i] += contribution[i];
    }

    void backward_node(const Node& n, const Array& g) {
        switch (n.op) {
            case Op::leaf:
                break;
            case Op::add: {
                accumulate_if_needed(n.inputs[0], g);
                accumulate_if_needed(n.inputs[1], g);
                break;
            }
            case Op::mul: {
                const Array& a = value(n.inputs[0]);
                const Array& b = value(n.inputs[1]);
                Array da(a.shape), db(b.shape);
                for (long i = 0; i < a.numel(); ++i) {
                    da[i] = g[i] * b[i];
                    db[i] = g[i] * a[i];
                }
                accumulate_if_needed(n.inputs[0], da);
                accumulate_if_needed(n.inputs[1], db);
                break;
            }
            case Op::scale: {
                const double c = n.aux[0];
                Array dx(n.value.shape);
                for (long i = 0; i < dx.numel(); ++i) dx[i] = g[i] * c;
                accumulate_if_needed(n.inputs[0], dx);
                break;
            }
            case Op::sigmoid: {
                Array dx(n.value.shape);
                for (long i = 0; i < dx.numel(); ++i) {
                    const double y = n.value[i];
                    dx[i] = g[i] * y * (1.0 - y);
                }
                accumulate_if_needed(n.inputs[0], dx);
                break;
            }
            case Op::tanh_op: {
                Array dx(n.value.shape);
                for (long i = 0; i < dx.numel(); ++i) {
                    const double y = n.value[i];
                    dx[i] = g[i] * (1.0 - y * y);
                }
                accumulate_if_needed(n.inputs[0], dx);
                break;
            }
            case Op::relu: {
                const Array& x = value(n.inputs[0]);
                Array dx(x.shape);
                for (long i = 0; i < dx.numel(); ++i) dx[i] = x[i] > 0.0 ? g[i] : 0.0;
                accumulate_if_needed(n.inputs[0], dx);
                break;
            }
            case Op::log_op: {
                const Array& x = value(n.inputs[0]);
                Array dx(x.shape);
                for (long i = 0; i < dx.numel(); ++i) dx[i] = g[i] / x[i];
                accumulate_if_needed(n.inputs[0], dx);
                break;
            }
            case Op::concat_last: {
                const long lanes = n.value.numel() / n.value.shape.back();
                const int out_last = n.value.shape.back();
                int col0 = 0;
                for (int in : n.inputs) {
                    const Array& part = value(in);
                    const int w = part.shape.back();
                    if (node(in).requires_grad) {
                        Array dp(part.shape);
                        for (long lane = 0; lane < lanes; ++lane) {
                            for (int c = 0; c < w; ++c) {
                                dp[lane * w + c] = g[lane * out_last + col0 + c];
                            }
                        }
                        accumulate_if_needed(in, dp);
                    }
                    col0 += w;
                }
                break;
            }
            case Op::concat_rows: {
                const int cols = n.value.shape[1];
                int row0 = 0;
                for (int in : n.inputs) {
                    const Array& part = value(in);
                    const int h = part.shape[0];
                    if (node(in).requires_grad) {
                        Array dp(part.shape);
                        for (long i = 0; i < dp.numel(); ++i) {
                            dp[i] = g[static_cast<long>(row0) * cols + i];
                        }
                        accumulate_if_needed(in, dp);
                    }
                    row0 += h;
                }
                break;
            }
            case Op::row: {
                const Array& x = value(n.inputs[0]);
                const int r = n.iaux[0];
                Array dx(x.shape, 0.0);
                const int cols = x.shape[1];
                for (int c = 0; c < cols; ++c) dx.at(r, c) = g[c];
                accumulate_if_needed(n.inputs[0], dx);
                break;
            }
            case Op::matmul: {
                const Array& a = value(n.inputs[0]);
                const Array& b = value(n.inputs[1]);
                const int m = a.shape[0], k = a.shape[1], p = b.shape[1];
                if (node(n.inputs[0]).requires_grad) {
                    Array da(a.shape, 0.0);
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < p; ++j) {
                            const double gij = g[static_cast<long>(i) * p + j];
                            for (int t = 0; t < k; ++t) da.at(i, t) += gij * b.at(t, j);
                        }
                    accumulate_if_needed(n.inputs[0], da);
                }
                if (node(n.inputs[1]).requires_grad) {
                    Array db(b.shape, 0.0);
                    for (int i = 0; i < m; ++i)
                        for (int t = 0; t < k; ++t) {
                            const double ait = a.at(i, t);
                            for (int j = 0; j < p; ++j) db.at(t, j) += ait * g[static_cast<long>(i) * p + j];
                        }
                    accumulate_if_needed(n.inputs[1], db);
                }
                break;
            }
            case Op::transpose: {
                const Array& x = value(n.inputs[0]);
                Array dx(x.shape);
                const int r = x.shape[0], c = x.shape[1];
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) dx.at(i, j) = g[static_cast<long>(j) * r + i];
                accumulate_if_needed(n.inputs[0], dx);
                break;
            }
            case Op::bias_add: {
                const Array& x = value(n.inputs[0]);
                const int rows = x.shape[0], cols = x.shape[1];
                accumulate_if_needed(n.inputs[0], g);
                if (node(n.inputs[1]).requires_grad) {
                    Array db(Shape{cols}, 0.0);
                    for (int i = 0; i < rows; ++i)
                        for (int j = 0; j < cols; ++j) db[j] += g[static_cast<long>(i) * cols + j];
                    accumulate_if_needed(n.inputs[1], db);
                }
                break;
            }
            case Op::softmax: {
                // dx_i = y_i * (g_i - sum_j g_j y_j) per lane along the axis.
                const int axis = n.iaux[0];
                const Array& y = n.value;
                Array dx(y.shape);
                const int len = y.shape[static_cast<std::size_t>(axis)];
                long inner = 1;
                for (int d = axis + 1; d < y.rank(); ++d) inner *= y.shape[static_cast<std::size_t>(d)];
                const long outer = y.numel() / (inner * len);
                for (long o = 0; o < outer; ++o) {
                    for (long in = 0; in < inner; ++in) {
                        const long base = o * len * inner + in;
                        double dot = 0.0;
                        for (int k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
                        for (int k = 0; k < len; ++k) {
                            const long idx = base + k * inner;
                            dx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                accumulate_if_needed(n.inputs[0], dx);
                break;
            }
            case Op::layer_norm: {
                const Array& x = value(n.inputs[0]);
                const Array& gain = value(n.inputs[1]);
                const int rows = x.shape[0], cols = x.shape[1];
                Array dx(x.shape, 0.0), dgain(gain.shape, 0.0), dbias(gain.shape, 0.0);
                for (int i = 0; i < rows; ++i) {
                    const double mu = n.aux[static_cast<std::size_t>(2 * i)];
                    const double inv_std = n.aux[static_cast<std::size_t>(2 * i + 1)];
                    double mean_q = 0.0, mean_qxh = 0.0;
                    for (int j = 0; j < cols; ++j) {
                        const double xh = (x.at(i, j) - mu) * inv_std;
                        const double q = g[static_cast<long>(i) * cols + j] * gain[j];
                        mean_q += q;
                        mean_qxh += q * xh;
                        dgain[j] += g[static_cast<long>(i) * cols + j] * xh;
                        dbias[j] += g[static_cast<long>(i) * cols + j];
                    }
                    mean_q /= cols;
                    mean_qxh /= cols;
                    for (int j = 0; j < cols; ++j) {
                        const double xh = (x.at(i, j) - mu) * inv_std;
                        const double q = g[static_cast<long>(i) * cols + j] * gain[j];
                        dx.at(i, j) = inv_std * (q - mean_q - xh * mean_qxh);
                    }
                }
                accumulate_if_needed(n.inputs[0], dx);
                accumulate_if_needed(n.inputs[1], dgain);
                accumulate_if_needed(n.inputs[2], dbias);
                break;
            }
            case Op::embed_rows: {
                const Array& table = value(n.inputs[0]);
                if (node(n.inputs[0]).requires_grad) {
                    const int cols = table.shape[1];
                    Array dt(table.shape, 0.0);
                    for (std::size_t r = 0; r < n.iaux.size(); ++r) {
                        const int src = n.iaux[r];
                        for (int c = 0; c < cols; ++c) {
                            dt.at(src, c) += g[static_cast<long>(r) * cols + c];
                        }
                    }
                    accumulate_if_needed(n.inputs[0], dt);
                }
                break;
            }
            case Op::pick_cols: {
                const Array& x = value(n.inputs[0]);
                Array dx(x.shape, 0.0);
                for (std::size_t i = 0; i < n.iaux.size(); ++i) {
                    dx.at(static_cast<int>(i), n.iaux[i]) = g[static_cast<long>(i)];
                }
                accumulate_if_needed(n.inputs[0], dx);
                break;
            }
            case Op::weighted_sum: {
                const Array& x = value(n.inputs[0]);
                Array dx(x.shape);
                for (long i = 0; i < dx.numel(); ++i) dx[i] = g[0] * n.aux[static_cast<std::size_t>(i)];
                accumulate_if_needed(n.inputs[0], dx);
                break;
            }
            case Op::dropout: {
                Array dx(n.value.shape);
                for (long i = 0; i < dx.numel(); ++i) dx[i] = g[i] * n.aux[static_cast<std::size_t>(i)];
                accumulate_if_needed(n.inputs[0], dx);
                break;
            }
        }
    }

    std::vector<Node> nodes_;
    std::vector<Array> grads_;
    bool have_grads_ = false;
};

inline const Shape& Tensor::shape() const { return tape_->node(id_).value.shape; }
inline const Array& Tensor::value() const { return tape_->node(id_).value; }
inline bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }
inline double Tensor::scalar() const {
    const Array& v = value();
    if (v.numel() != 1) fail_runtime("scalar: tensor has shape " + shape_str(v.shape));
    return v.data[0];
}

namespace detail {
inline Tape* common_tape(const Tensor& a, const Tensor& b) {
    if (a.tape() != b.tape()) fail_runtime("op: tensors belong to different tapes");
    return a.tape();
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
    Tape* t = detail::common_tape(a, b);
    if (!same_shape(a.shape(), b.shape())) {
        fail_runtime("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Array out(a.shape());
    const Array& av = a.value();
    const Array& bv = b.value();
    for (long i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
    return t->record(Op::add, {a.node_id(), b.node_id()}, std::move(out));
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    Tape* t = detail::common_tape(a, b);
    if (!same_shape(a.shape(), b.shape())) {
        fail_runtime("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Array out(a.shape());
    const Array& av = a.value();
    const Array& bv = b.value();
    for (long i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
    return t->record(Op::mul, {a.node_id(), b.node_id()}, std::move(out));
}

inline Tensor scale(const Tensor& a, double c) {
    Array out(a.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * c;
    return a.tape()->record(Op::scale, {a.node_id()}, std::move(out), {c});
}

inline Tensor sigmoid(const Tensor& a) {
    Array out(a.shape());
    for (long i = 0; i < out.numel(); ++i) {
        const double x = a.value()[i];
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    return a.tape()->record(Op::sigmoid, {a.node_id()}, std::move(out));
}

inline Tensor tanh(const Tensor& a) {
    Array out(a.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = std::tanh(a.value()[i]);
    return a.tape()->record(Op::tanh_op, {a.node_id()}, std::move(out));
}

inline Tensor relu(const Tensor& a) {
    Array out(a.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = std::max(0.0, a.value()[i]);
    return a.tape()->record(Op::relu, {a.node_id()}, std::move(out));
}

inline Tensor log(const Tensor& a) {
    Array out(a.shape());
    for (long i = 0; i < out.numel(); ++i) {
        const double x = a.value()[i];
        if (x <= 0.0) fail_runtime("log: non-positive input " + std::to_string(x));
        out[i] = std::log(x);
    }
    return a.tape()->record(Op::log_op, {a.node_id()}, std::move(out));
}

// Concatenate along the last axis; all other dims must match.
inline Tensor concat_last(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail_runtime("concat_last: no inputs");
    Tape* t = parts[0].tape();
    Shape lead = parts[0].shape();
    lead.pop_back();
    int total_last = 0;
    std::vector<int> ids;
    for (const Tensor& p : parts) {
        if (p.tape() != t) fail_runtime("concat_last: tensors belong to different tapes");
        Shape pl = p.shape();
        const int last = pl.back();
        pl.pop_back();
        if (pl != lead) {
            fail_runtime("concat_last: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                         shape_str(p.shape()));
        }
        total_last += last;
        ids.push_back(p.node_id());
    }
    Shape out_shape = lead;
    out_shape.push_back(total_last);
    Array out(out_shape);
    const long lanes = out.numel() / total_last;
    int col0 = 0;
    for (const Tensor& p : parts) {
        const int w = p.shape().back();
        const Array& pv = p.value();
        for (long lane = 0; lane < lanes; ++lane) {
            for (int c = 0; c < w; ++c) out[lane * total_last + col0 + c] = pv[lane * w + c];
        }
        col0 += w;
    }
    return t->record(Op::concat_last, std::move(ids), std::move(out));
}

// Concatenate rank-2 tensors along the row axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) fail_runtime("concat_rows: no inputs");
    Tape* t = parts[0].tape();
    const int cols = parts[0].shape().back();
    int rows = 0;
    std::vector<int> ids;
    for (const Tensor& p : parts) {
        if (p.tape() != t) fail_runtime("concat_rows: tensors belong to different tapes");
        if (p.shape().size() != 2 || p.shape()[1] != cols) {
            fail_runtime("concat_rows: shape mismatch " + shape_str(parts[0].shape()) + " vs " +
                         shape_str(p.shape()));
        }
        rows += p.shape()[0];
        ids.push_back(p.node_id());
    }
    Array out(Shape{rows, cols});
    long off = 0;
    for (const Tensor& p : parts) {
        const Array& pv = p.value();
        std::copy(pv.data.begin(), pv.data.end(), out.data.begin() + off);
        off += pv.numel();
    }
    return t->record(Op::concat_rows, std::move(ids), std::move(out));
}

// One row of a rank-2 tensor as a [1, cols] tensor.
inline Tensor row(const Tensor& x, int r) {
    if (x.shape().size() != 2) fail_runtime("row: expected rank-2, got " + shape_str(x.shape()));
    if (r < 0 || r >= x.shape()[0]) fail_runtime("row: index " + std::to_string(r) + " out of range");
    const int cols = x.shape()[1];
    Array out(Shape{1, cols});
    for (int c = 0; c < cols; ++c) out[c] = x.value().at(r, c);
    return x.tape()->record(Op::row, {x.node_id()}, std::move(out), {}, {r});
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    Tape* t = detail::common_tape(a, b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        fail_runtime("matmul: inner-dim mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const int m = a.shape()[0], k = a.shape()[1], p = b.shape()[1];
    Array out(Shape{m, p}, 0.0);
    const Array& av = a.value();
    const Array& bv = b.value();
    for (int i = 0; i < m; ++i) {
        for (int kk = 0; kk < k; ++kk) {
            const double aik = av.at(i, kk);
            if (aik == 0.0) continue;
            const double* brow = &bv.data[static_cast<std::size_t>(kk) * p];
            double* orow = &out.data[static_cast<std::size_t>(i) * p];
            for (int j = 0; j < p; ++j) orow[j] += aik * brow[j];
        }
    }
    return t->record(Op::matmul, {a.node_id(), b.node_id()}, std::move(out));
}

inline Tensor transpose(const Tensor& x) {
    if (x.shape().size() != 2) fail_runtime("transpose: expected rank-2, got " + shape_str(x.shape()));
    const int r = x.shape()[0], c = x.shape()[1];
    Array out(Shape{c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at(j, i) = x.value().at(i, j);
    return x.tape()->record(Op::transpose, {x.node_id()}, std::move(out));
}

// x: [n, m], b: [m]; adds b to every row. The only permitted broadcast.
inline Tensor bias_add(const Tensor& x, const Tensor& b) {
    Tape* t = detail::common_tape(x, b);
    if (x.shape().size() != 2 || b.shape().size() != 1 || b.shape()[0] != x.shape()[1]) {
        fail_runtime("bias_add: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
    }
    const int rows = x.shape()[0], cols = x.shape()[1];
    Array out(x.shape());
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out.at(i, j) = x.value().at(i, j) + b.value()[j];
    return t->record(Op::bias_add, {x.node_id(), b.node_id()}, std::move(out));
}

inline Tensor softmax_impl(const Tensor& x, int axis, const Array* mask) {
    const Shape& s = x.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        fail_runtime("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(s));
    }
    if (mask && !same_shape(mask->shape, s)) {
        fail_runtime("softmax: mask shape " + shape_str(mask->shape) + " does not match " + shape_str(s));
    }
    const int len = s[static_cast<std::size_t>(axis)];
    long inner = 1;
    for (std::size_t d = static_cast<std::size_t>(axis) + 1; d < s.size(); ++d) inner *= s[d];
    const long outer = shape_numel(s) / (inner * len);
    const Array& xv = x.value();
    Array out(s);
    for (long o = 0; o < outer; ++o) {
        for (long in = 0; in < inner; ++in) {
            const long base = o * len * inner + in;
            double m = -std::numeric_limits<double>::infinity();
            for (int k = 0; k < len; ++k) {
                double v = xv[base + k * inner];
                if (mask) v += mask->data[static_cast<std::size_t>(base + k * inner)];
                if (v > m) m = v;
            }
            if (m == -std::numeric_limits<double>::infinity()) {
                fail_runtime("softmax: degenerate attention row (all logits masked)");
            }
            double sum = 0.0;
            for (int k = 0; k < len; ++k) {
                double v = xv[base + k * inner];
                if (mask) v += mask->data[static_cast<std::size_t>(base + k * inner)];
                const double e = std::exp(v - m);  // exp(-inf) == 0 exactly at masked slots
                out[base + k * inner] = e;
                sum += e;
            }
            for (int k = 0; k < len; ++k) out[base + k * inner] /= sum;
        }
    }
    return x.tape()->record(Op::softmax, {x.node_id()}, std::move(out), {}, {axis});
}

inline Tensor softmax(const Tensor& x, int axis) { return softmax_impl(x, axis, nullptr); }

// Additive-mask softmax along the last axis; mask entries are 0 or -inf and
// masked slots come out exactly 0.
inline Tensor masked_softmax(const Tensor& x, const Array& mask) {
    return softmax_impl(x, static_cast<int>(x.shape().size()) - 1, &mask);
}

// x: [n, d] rows normalized to zero mean / unit variance, then gain & bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    Tape* t = detail::common_tape(x, gain);
    detail::common_tape(gain, bias);
    const Shape& s = x.shape();
    if (s.size() != 2 || gain.shape() != Shape{s[1]} || bias.shape() != Shape{s[1]}) {
        fail_runtime("layer_norm: shape mismatch x=" + shape_str(s) + " gain=" + shape_str(gain.shape()));
    }
    const int rows = s[0], cols = s[1];
    Array out(s);
    std::vector<double> aux;
    aux.reserve(static_cast<std::size_t>(2 * rows));
    for (int i = 0; i < rows; ++i) {
        double mu = 0.0;
        for (int j = 0; j < cols; ++j) mu += x.value().at(i, j);
        mu /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = x.value().at(i, j) - mu;
            var += d * d;
        }
        var /= cols;
        const double inv_std = 1.0 / std::sqrt(var + eps);
        aux.push_back(mu);
        aux.push_back(inv_std);
        for (int j = 0; j < cols; ++j) {
            out.at(i, j) = (x.value().at(i, j) - mu) * inv_std * gain.value()[j] + bias.value()[j];
        }
    }
    return t->record(Op::layer_norm, {x.node_id(), gain.node_id(), bias.node_id()}, std::move(out),
                     std::move(aux));
}

// Gather rows of a [V, d] table; used for word/position embedding lookups.
inline Tensor embed_rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.shape().size() != 2) fail_runtime("embed_rows: table must be rank-2");
    if (ids.empty()) fail_runtime("embed_rows: empty id list");
    const int v = table.shape()[0], d = table.shape()[1];
    Array out(Shape{static_cast<int>(ids.size()), d});
    for (std::size_t r = 0; r < ids.size(); ++r) {
        if (ids[r] < 0 || ids[r] >= v) {
            fail_runtime("embed_rows: id " + std::to_string(ids[r]) + " out of range [0," +
                         std::to_string(v) + ")");
        }
        for (int c = 0; c < d; ++c) out.at(static_cast<int>(r), c) = table.value().at(ids[r], c);
    }
    return table.tape()->record(Op::embed_rows, {table.node_id()}, std::move(out), {}, ids);
}

// out[i] = x[i, ids[i]]; used to pull target-token probabilities.
inline Tensor pick_cols(const Tensor& x, const std::vector<int>& ids) {
    if (x.shape().size() != 2 || static_cast<int>(ids.size()) != x.shape()[0]) {
        fail_runtime("pick_cols: need one column index per row");
    }
    Array out(Shape{static_cast<int>(ids.size())});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= x.shape()[1]) {
            fail_runtime("pick_cols: id " + std::to_string(ids[i]) + " out of range");
        }
        out[static_cast<long>(i)] = x.value().at(static_cast<int>(i), ids[i]);
    }
    return x.tape()->record(Op::pick_cols, {x.node_id()}, std::move(out), {}, ids);
}

// Scalar sum of x ⊙ w against constant weights (masked sums, plain sums).
inline Tensor weighted_sum(const Tensor& x, const Array& w) {
    if (!same_shape(x.shape(), w.shape)) {
        fail_runtime("weighted_sum: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape));
    }
    double acc = 0.0;
    for (long i = 0; i < w.numel(); ++i) acc += x.value()[i] * w[i];
    return x.tape()->record(Op::weighted_sum, {x.node_id()}, Array::scalar(acc),
                            std::vector<double>(w.data));
}

inline Tensor sum(const Tensor& x) { return weighted_sum(x, Array(x.shape(), 1.0)); }

// Inverted dropout; identity when rate == 0.
inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) fail_runtime("dropout: rate must be in [0,1)");
    if (rate == 0.0) return x;
    Array out(x.shape());
    std::vector<double> kept(static_cast<std::size_t>(x.value().numel()));
    const double inv_keep = 1.0 / (1.0 - rate);
    for (long i = 0; i < out.numel(); ++i) {
        const double k = rng.next_unit() < rate ? 0.0 : inv_keep;
        kept[static_cast<std::size_t>(i)] = k;
        out[i] = x.value()[i] * k;
    }
    return x.tape()->record(Op::dropout, {x.node_id()}, std::move(out), std::move(kept));
}

}  // namespace recosa
