#pragma once

#include "pamdp/diffcore/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace pamdp {

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives
/// and the node has not been rewound away.
class Var {
public:
    Var() = default;

    Graph* graph() const { return g_; }
    std::size_t id() const { return id_; }
    bool valid() const { return g_ != nullptr; }

    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }

private:
    friend class Graph;
    Var(Graph* g, std::size_t id) : g_(g), id_(id) {}

    Graph* g_ = nullptr;
    std::size_t id_ = 0;
};

enum class Op : std::uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    MulConst,
    Scale,
    AddScalar,
    MatMul,
    Linear,
    Transpose,
    BroadcastRows,
    BroadcastCols,
    BroadcastScalar,
    RowSum,
    ColSum,
    SumAll,
    Relu,
    Tanh,
    Exp,
    Log,
    Reciprocal,
    Softmax,
    LogSoftmax,
    ConcatCols,
    SliceCols,
    PadCols,
    Clamp,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::Leaf: return "leaf";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::MulConst: return "mul_const";
        case Op::Scale: return "scale";
        case Op::AddScalar: return "add_scalar";
        case Op::MatMul: return "matmul";
        case Op::Linear: return "linear";
        case Op::Transpose: return "transpose";
        case Op::BroadcastRows: return "broadcast_rows";
        case Op::BroadcastCols: return "broadcast_cols";
        case Op::BroadcastScalar: return "broadcast_scalar";
        case Op::RowSum: return "row_sum";
        case Op::ColSum: return "col_sum";
        case Op::SumAll: return "sum_all";
        case Op::Relu: return "relu";
        case Op::Tanh: return "tanh";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Reciprocal: return "reciprocal";
        case Op::Softmax: return "softmax";
        case Op::LogSoftmax: return "log_softmax";
        case Op::ConcatCols: return "concat_cols";
        case Op::SliceCols: return "slice_cols";
        case Op::PadCols: return "pad_cols";
        case Op::Clamp: return "clamp";
    }
    return "?";
}

/// Append-only tape of eagerly evaluated tensor operations.
///
/// Every op computes its value when it is recorded. Reverse-mode gradients are
/// themselves recorded as ops, so a gradient can be differentiated again; this
/// is how Hessian-vector products are formed.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var leaf(Tensor value) {
        Node n;
        n.op = Op::Leaf;
        n.value = std::move(value);
        return push(std::move(n));
    }

    std::size_t size() const { return nodes_.size(); }

    /// Drops every node recorded after `mark`. Vars pointing past it dangle.
    void rewind(std::size_t mark) {
        if (mark < nodes_.size()) nodes_.resize(mark);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }

    /// Reverse-mode gradients of a 1x1 `loss` with respect to each of `wrt`.
    /// Nodes unreachable from `loss` receive zero tensors.
    std::vector<Var> gradients(Var loss, std::span<const Var> wrt);

    // Op recording; used by the free functions in pamdp::ad.
    struct Node {
        Op op = Op::Leaf;
        std::array<std::size_t, 3> in{};
        std::uint8_t arity = 0;
        std::size_t a = 0;
        std::size_t b = 0;
        double s0 = 0.0;
        double s1 = 0.0;
        Tensor value;
        Tensor aux;
    };

    Var push(Node n) {
        if (!n.value.all_finite()) {
            throw NonFiniteError(std::string("non-finite value produced by ") + op_name(n.op));
        }
        nodes_.push_back(std::move(n));
        return Var(this, nodes_.size() - 1);
    }

    const Node& node(std::size_t id) const { return nodes_[id]; }
    Var var(std::size_t id) { return Var(this, id); }

private:
    void contribute(std::size_t id, std::vector<std::size_t>& grads, std::vector<char>& needed);

    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return g_->value(id_); }

namespace ad {

namespace detail {

inline Graph& same_graph(Var a, Var b) {
    if (a.graph() != b.graph() || a.graph() == nullptr) {
        throw std::invalid_argument("vars belong to different graphs");
    }
    return *a.graph();
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_string(a) + " vs " +
                         shape_string(b));
    }
}

inline Var unary(Op op, Var x, Tensor value, std::size_t a = 0, std::size_t b = 0, double s0 = 0,
                 double s1 = 0, Tensor aux = {}) {
    Graph::Node n;
    n.op = op;
    n.in[0] = x.id();
    n.arity = 1;
    n.a = a;
    n.b = b;
    n.s0 = s0;
    n.s1 = s1;
    n.value = std::move(value);
    n.aux = std::move(aux);
    return x.graph()->push(std::move(n));
}

inline Var binary(Op op, Var x, Var y, Tensor value) {
    Graph& g = same_graph(x, y);
    Graph::Node n;
    n.op = op;
    n.in[0] = x.id();
    n.in[1] = y.id();
    n.arity = 2;
    n.value = std::move(value);
    return g.push(std::move(n));
}

}  // namespace detail

inline Var add(Var x, Var y) {
    detail::require_same_shape(x.value(), y.value(), "add");
    Tensor out = x.value();
    out.mat() += y.value().mat();
    return detail::binary(Op::Add, x, y, std::move(out));
}

inline Var sub(Var x, Var y) {
    detail::require_same_shape(x.value(), y.value(), "sub");
    Tensor out = x.value();
    out.mat() -= y.value().mat();
    return detail::binary(Op::Sub, x, y, std::move(out));
}

inline Var mul(Var x, Var y) {
    detail::require_same_shape(x.value(), y.value(), "mul");
    Tensor out = x.value();
    out.mat().array() *= y.value().mat().array();
    return detail::binary(Op::Mul, x, y, std::move(out));
}

/// Elementwise product with a tensor that carries no gradient.
inline Var mul_const(Var x, Tensor c) {
    detail::require_same_shape(x.value(), c, "mul_const");
    Tensor out = x.value();
    out.mat().array() *= c.mat().array();
    return detail::unary(Op::MulConst, x, std::move(out), 0, 0, 0, 0, std::move(c));
}

inline Var scale(Var x, double c) {
    Tensor out = x.value();
    out.mat() *= c;
    return detail::unary(Op::Scale, x, std::move(out), 0, 0, c);
}

inline Var neg(Var x) { return scale(x, -1.0); }

inline Var add_scalar(Var x, double c) {
    Tensor out = x.value();
    out.mat().array() += c;
    return detail::unary(Op::AddScalar, x, std::move(out), 0, 0, c);
}

inline Var matmul(Var x, Var y) {
    if (x.cols() != y.rows()) {
        throw ShapeError("matmul: " + shape_string(x.value()) + " * " + shape_string(y.value()));
    }
    Tensor out(x.rows(), y.cols());
    out.mat().noalias() = x.value().mat() * y.value().mat();
    return detail::binary(Op::MatMul, x, y, std::move(out));
}

/// x * w + broadcast(b), with w of shape (in, out) and b of shape (1, out).
inline Var linear(Var x, Var w, Var b) {
    Graph& g = detail::same_graph(x, w);
    detail::same_graph(w, b);
    if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
        throw ShapeError("linear: x " + shape_string(x.value()) + ", w " + shape_string(w.value()) +
                         ", b " + shape_string(b.value()));
    }
    Tensor out(x.rows(), w.cols());
    out.mat().noalias() = x.value().mat() * w.value().mat();
    out.mat().rowwise() += b.value().mat().row(0);
    Graph::Node n;
    n.op = Op::Linear;
    n.in = {x.id(), w.id(), b.id()};
    n.arity = 3;
    n.value = std::move(out);
    return g.push(std::move(n));
}

inline Var transpose(Var x) {
    Tensor out(x.cols(), x.rows());
    out.mat() = x.value().mat().transpose();
    return detail::unary(Op::Transpose, x, std::move(out));
}

/// Repeats a 1xM row `rows` times.
inline Var broadcast_rows(Var x, std::size_t rows) {
    if (x.rows() != 1) throw ShapeError("broadcast_rows expects a 1xM input");
    Tensor out(rows, x.cols());
    out.mat().rowwise() = x.value().mat().row(0);
    return detail::unary(Op::BroadcastRows, x, std::move(out), rows);
}

/// Repeats an Nx1 column `cols` times.
inline Var broadcast_cols(Var x, std::size_t cols) {
    if (x.cols() != 1) throw ShapeError("broadcast_cols expects an Nx1 input");
    Tensor out(x.rows(), cols);
    out.mat().colwise() = x.value().mat().col(0);
    return detail::unary(Op::BroadcastCols, x, std::move(out), cols);
}

inline Var broadcast_scalar(Var x, std::size_t rows, std::size_t cols) {
    Tensor out(rows, cols, x.value().item());
    return detail::unary(Op::BroadcastScalar, x, std::move(out), rows, cols);
}

/// Sum across columns: NxM -> Nx1.
inline Var row_sum(Var x) {
    Tensor out(x.rows(), 1);
    out.mat() = x.value().mat().rowwise().sum();
    return detail::unary(Op::RowSum, x, std::move(out));
}

/// Sum across rows: NxM -> 1xM.
inline Var col_sum(Var x) {
    Tensor out(1, x.cols());
    out.mat() = x.value().mat().colwise().sum();
    return detail::unary(Op::ColSum, x, std::move(out));
}

inline Var sum_all(Var x) {
    return detail::unary(Op::SumAll, x, Tensor::scalar(x.value().mat().sum()));
}

inline Var mean_all(Var x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size()));
}

inline Var relu(Var x) {
    Tensor out = x.value();
    out.mat() = out.mat().cwiseMax(0.0);
    return detail::unary(Op::Relu, x, std::move(out));
}

inline Var tanh(Var x) {
    Tensor out = x.value();
    out.mat() = out.mat().array().tanh().matrix();
    return detail::unary(Op::Tanh, x, std::move(out));
}

inline Var exp(Var x) {
    Tensor out = x.value();
    out.mat() = out.mat().array().exp().matrix();
    return detail::unary(Op::Exp, x, std::move(out));
}

inline Var log(Var x) {
    Tensor out = x.value();
    out.mat() = out.mat().array().log().matrix();
    return detail::unary(Op::Log, x, std::move(out));
}

inline Var reciprocal(Var x) {
    Tensor out = x.value();
    out.mat() = out.mat().array().inverse().matrix();
    return detail::unary(Op::Reciprocal, x, std::move(out));
}

inline Var square(Var x) { return mul(x, x); }

/// Row-wise softmax.
inline Var softmax(Var x) {
    Tensor out = x.value();
    auto m = out.mat();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp().matrix();
        m.row(r) /= m.row(r).sum();
    }
    return detail::unary(Op::Softmax, x, std::move(out));
}

/// Row-wise log-softmax.
inline Var log_softmax(Var x) {
    Tensor out = x.value();
    auto m = out.mat();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double mx = m.row(r).maxCoeff();
        const double lse = mx + std::log((m.row(r).array() - mx).exp().sum());
        m.row(r).array() -= lse;
    }
    return detail::unary(Op::LogSoftmax, x, std::move(out));
}

inline Var concat_cols(Var x, Var y) {
    Graph& g = detail::same_graph(x, y);
    if (x.rows() != y.rows()) throw ShapeError("concat_cols: row count mismatch");
    Tensor out(x.rows(), x.cols() + y.cols());
    out.mat().leftCols(static_cast<Eigen::Index>(x.cols())) = x.value().mat();
    out.mat().rightCols(static_cast<Eigen::Index>(y.cols())) = y.value().mat();
    Graph::Node n;
    n.op = Op::ConcatCols;
    n.in[0] = x.id();
    n.in[1] = y.id();
    n.arity = 2;
    n.value = std::move(out);
    return g.push(std::move(n));
}

inline Var slice_cols(Var x, std::size_t start, std::size_t len) {
    if (start + len > x.cols()) throw ShapeError("slice_cols out of range");
    Tensor out(x.rows(), len);
    out.mat() = x.value().mat().middleCols(static_cast<Eigen::Index>(start),
                                           static_cast<Eigen::Index>(len));
    return detail::unary(Op::SliceCols, x, std::move(out), start, len);
}

/// Zero-pads columns so that x occupies [start, start + cols) of a `total`-wide result.
inline Var pad_cols(Var x, std::size_t start, std::size_t total) {
    if (start + x.cols() > total) throw ShapeError("pad_cols out of range");
    Tensor out(x.rows(), total);
    out.mat().middleCols(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(x.cols())) =
        x.value().mat();
    return detail::unary(Op::PadCols, x, std::move(out), start, total);
}

/// Elementwise clamp; the gradient is zero where the clamp is active.
inline Var clamp(Var x, double lo, double hi) {
    Tensor out = x.value();
    out.mat() = out.mat().cwiseMax(lo).cwiseMin(hi);
    return detail::unary(Op::Clamp, x, std::move(out), 0, 0, lo, hi);
}

inline Var dot(Var x, Var y) { return sum_all(mul(x, y)); }

}  // namespace ad

inline void Graph::contribute(std::size_t id, std::vector<std::size_t>& grads,
                              std::vector<char>& needed) {
    // Copy what we need: recording new ops may reallocate nodes_.
    const Op op = nodes_[id].op;
    const auto in = nodes_[id].in;
    const std::size_t a = nodes_[id].a;
    const std::size_t b = nodes_[id].b;
    const double s0 = nodes_[id].s0;
    const double s1 = nodes_[id].s1;
    Var gout(this, grads[id]);
    Var self(this, id);

    auto accumulate = [&](std::size_t input, Var g) {
        if (grads[input] == std::numeric_limits<std::size_t>::max()) {
            grads[input] = g.id();
        } else {
            grads[input] = ad::add(Var(this, grads[input]), g).id();
        }
    };
    auto wants = [&](std::size_t k) { return needed[in[k]] != 0; };
    auto input = [&](std::size_t k) { return Var(this, in[k]); };

    switch (op) {
        case Op::Leaf: break;
        case Op::Add:
            if (wants(0)) accumulate(in[0], gout);
            if (wants(1)) accumulate(in[1], gout);
            break;
        case Op::Sub:
            if (wants(0)) accumulate(in[0], gout);
            if (wants(1)) accumulate(in[1], ad::neg(gout));
            break;
        case Op::Mul:
            if (wants(0)) accumulate(in[0], ad::mul(gout, input(1)));
            if (wants(1)) accumulate(in[1], ad::mul(gout, input(0)));
            break;
        case Op::MulConst:
            if (wants(0)) accumulate(in[0], ad::mul_const(gout, nodes_[id].aux));
            break;
        case Op::Scale:
            if (wants(0)) accumulate(in[0], ad::scale(gout, s0));
            break;
        case Op::AddScalar:
            if (wants(0)) accumulate(in[0], gout);
            break;
        case Op::MatMul:
            if (wants(0)) accumulate(in[0], ad::matmul(gout, ad::transpose(input(1))));
            if (wants(1)) accumulate(in[1], ad::matmul(ad::transpose(input(0)), gout));
            break;
        case Op::Linear:
            if (wants(0)) accumulate(in[0], ad::matmul(gout, ad::transpose(input(1))));
            if (wants(1)) accumulate(in[1], ad::matmul(ad::transpose(input(0)), gout));
            if (wants(2)) accumulate(in[2], ad::col_sum(gout));
            break;
        case Op::Transpose:
            if (wants(0)) accumulate(in[0], ad::transpose(gout));
            break;
        case Op::BroadcastRows:
            if (wants(0)) accumulate(in[0], ad::col_sum(gout));
            break;
        case Op::BroadcastCols:
            if (wants(0)) accumulate(in[0], ad::row_sum(gout));
            break;
        case Op::BroadcastScalar:
            if (wants(0)) accumulate(in[0], ad::sum_all(gout));
            break;
        case Op::RowSum:
            if (wants(0)) accumulate(in[0], ad::broadcast_cols(gout, nodes_[in[0]].value.cols()));
            break;
        case Op::ColSum:
            if (wants(0)) accumulate(in[0], ad::broadcast_rows(gout, nodes_[in[0]].value.rows()));
            break;
        case Op::SumAll: {
            if (wants(0)) {
                const auto& x = nodes_[in[0]].value;
                accumulate(in[0], ad::broadcast_scalar(gout, x.rows(), x.cols()));
            }
            break;
        }
        case Op::Relu: {
            if (wants(0)) {
                Tensor mask = nodes_[in[0]].value;
                for (double& v : mask.values()) v = v > 0.0 ? 1.0 : 0.0;
                accumulate(in[0], ad::mul_const(gout, std::move(mask)));
            }
            break;
        }
        case Op::Clamp: {
            if (wants(0)) {
                Tensor mask = nodes_[in[0]].value;
                for (double& v : mask.values()) v = (v >= s0 && v <= s1) ? 1.0 : 0.0;
                accumulate(in[0], ad::mul_const(gout, std::move(mask)));
            }
            break;
        }
        case Op::Tanh:
            if (wants(0)) {
                Var deriv = ad::add_scalar(ad::neg(ad::square(self)), 1.0);
                accumulate(in[0], ad::mul(gout, deriv));
            }
            break;
        case Op::Exp:
            if (wants(0)) accumulate(in[0], ad::mul(gout, self));
            break;
        case Op::Log:
            if (wants(0)) accumulate(in[0], ad::mul(gout, ad::reciprocal(input(0))));
            break;
        case Op::Reciprocal:
            if (wants(0)) accumulate(in[0], ad::mul(gout, ad::neg(ad::square(self))));
            break;
        case Op::Softmax:
            if (wants(0)) {
                const std::size_t m = nodes_[id].value.cols();
                Var inner = ad::broadcast_cols(ad::row_sum(ad::mul(gout, self)), m);
                accumulate(in[0], ad::mul(self, ad::sub(gout, inner)));
            }
            break;
        case Op::LogSoftmax:
            if (wants(0)) {
                const std::size_t m = nodes_[id].value.cols();
                Var total = ad::broadcast_cols(ad::row_sum(gout), m);
                accumulate(in[0], ad::sub(gout, ad::mul(ad::exp(self), total)));
            }
            break;
        case Op::ConcatCols: {
            const std::size_t left = nodes_[in[0]].value.cols();
            const std::size_t right = nodes_[in[1]].value.cols();
            if (wants(0)) accumulate(in[0], ad::slice_cols(gout, 0, left));
            if (wants(1)) accumulate(in[1], ad::slice_cols(gout, left, right));
            break;
        }
        case Op::SliceCols:
            if (wants(0)) accumulate(in[0], ad::pad_cols(gout, a, nodes_[in[0]].value.cols()));
            break;
        case Op::PadCols:
            if (wants(0)) accumulate(in[0], ad::slice_cols(gout, a, nodes_[in[0]].value.cols()));
            break;
    }
    (void)b;
}

inline std::vector<Var> Graph::gradients(Var loss, std::span<const Var> wrt) {
    if (loss.graph() != this) throw std::invalid_argument("loss does not belong to this graph");
    if (nodes_[loss.id()].value.size() != 1) {
        throw ShapeError("gradient requires a scalar loss, got " +
                         shape_string(nodes_[loss.id()].value));
    }
    constexpr std::size_t none = std::numeric_limits<std::size_t>::max();
    const std::size_t count = loss.id() + 1;

    // needed[i]: node i lies on a path from some wrt leaf.
    std::vector<char> needed(count, 0);
    for (const Var& w : wrt) {
        if (w.graph() != this) throw std::invalid_argument("wrt var does not belong to this graph");
        if (w.id() < count) needed[w.id()] = 1;
    }
    for (std::size_t i = 0; i < count; ++i) {
        if (needed[i]) continue;
        const Node& n = nodes_[i];
        for (std::size_t k = 0; k < n.arity; ++k) {
            if (needed[n.in[k]]) {
                needed[i] = 1;
                break;
            }
        }
    }

    std::vector<std::size_t> grads(count, none);
    grads[loss.id()] = leaf(Tensor::scalar(1.0)).id();
    if (needed[loss.id()]) {
        for (std::size_t i = count; i-- > 0;) {
            if (grads[i] == none || !needed[i] || nodes_[i].arity == 0) continue;
            contribute(i, grads, needed);
        }
    }

    std::vector<Var> out;
    out.reserve(wrt.size());
    for (const Var& w : wrt) {
        if (w.id() < count && grads[w.id()] != none) {
            out.push_back(Var(this, grads[w.id()]));
        } else {
            const Tensor& v = nodes_[w.id()].value;
            out.push_back(leaf(Tensor(v.rows(), v.cols())));
        }
    }
    return out;
}

/// Concatenates gradient tensors into one flat vector following `leaves` order.
inline Vector flatten(std::span<const Var> vars) {
    std::size_t total = 0;
    for (const Var& v : vars) total += v.value().size();
    Vector out(static_cast<Eigen::Index>(total));
    Eigen::Index pos = 0;
    for (const Var& v : vars) {
        for (double x : v.value().values()) out[pos++] = x;
    }
    return out;
}

inline Vector flat_gradient(Var loss, std::span<const Var> leaves) {
    auto grads = loss.graph()->gradients(loss, leaves);
    return flatten(grads);
}

/// (d^2 scalar / d leaves^2) * v by differentiating <grad, v> a second time.
inline Vector hessian_vector_product(Var scalar, std::span<const Var> leaves, const Vector& v) {
    Graph& g = *scalar.graph();
    std::size_t total = 0;
    for (const Var& l : leaves) total += l.value().size();
    if (static_cast<std::size_t>(v.size()) != total) {
        throw ShapeError("hessian_vector_product: vector length " + std::to_string(v.size()) +
                         " != parameter count " + std::to_string(total));
    }
    auto grads = g.gradients(scalar, leaves);
    Var acc;
    Eigen::Index pos = 0;
    for (std::size_t i = 0; i < leaves.size(); ++i) {
        const Tensor& shape = leaves[i].value();
        Tensor chunk(shape.rows(), shape.cols());
        for (std::size_t k = 0; k < chunk.size(); ++k) chunk[k] = v[pos++];
        Var term = ad::sum_all(ad::mul_const(grads[i], std::move(chunk)));
        acc = acc.valid() ? ad::add(acc, term) : term;
    }
    if (!acc.valid()) return Vector::Zero(0);
    return flat_gradient(acc, leaves);
}

}  // namespace pamdp
