#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dso/rng.hpp"
#include "dso/util.hpp"

namespace dso {

// Dense row-major tensor of doubles; rank 1 or 2 is all this project needs.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> values;

    Tensor() = default;
    Tensor(std::initializer_list<double> vs)
        : shape{vs.size()}, values(vs) {}

    static Tensor zeros(std::vector<std::size_t> s) {
        Tensor t;
        std::size_t n = 1;
        for (auto d : s) n *= d;
        t.shape = std::move(s);
        t.values.assign(n, 0.0);
        return t;
    }

    static Tensor from_vector(std::vector<double> vs) {
        Tensor t;
        t.shape = {vs.size()};
        t.values = std::move(vs);
        return t;
    }

    std::size_t size() const { return values.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? 1 : shape[1]; }

    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }
    double& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    bool all_finite() const {
        for (double v : values)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline Tensor random_normal(std::vector<std::size_t> shape, double stddev,
                            Rng& rng) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.values) v = rng.normal(0.0, stddev);
    return t;
}

namespace detail {

inline double sigmoid(double x) {
    return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                    : std::exp(x) / (1.0 + std::exp(x));
}

inline double softplus(double x) {
    return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

}  // namespace detail

// --- kernels -----------------------------------------------------------
// Shared by the plain forward path and the autodiff graph so both produce
// bit-identical numbers. Accumulation order within each output element is
// fixed; parallelism only splits independent output rows.

// Y[b,o] = sum_l X[b,l] * W[o,l]
inline void k_matmul_nt(const Tensor& x, const Tensor& w, Tensor& y) {
    const std::size_t b_n = x.rows(), k_n = x.cols(), o_n = w.rows();
    if (w.cols() != k_n) throw InputError("matmul_nt: inner dims disagree");
    y = Tensor::zeros({b_n, o_n});
    parallel_for(static_cast<std::int64_t>(b_n), [&](std::int64_t b) {
        const double* xr = &x.values[b * k_n];
        double* yr = &y.values[b * o_n];
        for (std::size_t o = 0; o < o_n; ++o) {
            const double* wr = &w.values[o * k_n];
            double acc = 0.0;
            for (std::size_t l = 0; l < k_n; ++l) acc += xr[l] * wr[l];
            yr[o] = acc;
        }
    });
}

// dX[b,l] += sum_o dY[b,o] * W[o,l]
inline void k_matmul_nt_grad_x(const Tensor& dy, const Tensor& w, Tensor& dx) {
    const std::size_t b_n = dy.rows(), o_n = dy.cols(), k_n = w.cols();
    parallel_for(static_cast<std::int64_t>(b_n), [&](std::int64_t b) {
        const double* dyr = &dy.values[b * o_n];
        double* dxr = &dx.values[b * k_n];
        for (std::size_t o = 0; o < o_n; ++o) {
            const double g = dyr[o];
            const double* wr = &w.values[o * k_n];
            for (std::size_t l = 0; l < k_n; ++l) dxr[l] += g * wr[l];
        }
    });
}

// dW[o,l] += sum_b dY[b,o] * X[b,l]
inline void k_matmul_nt_grad_w(const Tensor& dy, const Tensor& x, Tensor& dw) {
    const std::size_t b_n = dy.rows(), o_n = dy.cols(), k_n = x.cols();
    parallel_for(static_cast<std::int64_t>(o_n), [&](std::int64_t o) {
        double* dwr = &dw.values[o * k_n];
        for (std::size_t b = 0; b < b_n; ++b) {
            const double g = dy.values[b * o_n + o];
            const double* xr = &x.values[b * k_n];
            for (std::size_t l = 0; l < k_n; ++l) dwr[l] += g * xr[l];
        }
    });
}

// --- reverse-mode graph -------------------------------------------------
// Tape of ops over Tensors. Nodes only reference earlier nodes, so creation
// order is a topological order and backward() is a single reverse sweep.

class Graph {
public:
    using NodeId = std::int32_t;

    NodeId input(Tensor v) { return push(Op::kLeaf, -1, -1, std::move(v)); }
    NodeId param(Tensor v) { return push(Op::kLeaf, -1, -1, std::move(v)); }

    NodeId matmul_nt(NodeId x, NodeId w) {
        Tensor y;
        k_matmul_nt(val(x), val(w), y);
        return push(Op::kMatmulNT, x, w, std::move(y));
    }

    NodeId add_rowwise(NodeId y, NodeId bias) {
        const Tensor& a = val(y);
        const Tensor& b = val(bias);
        if (b.size() != a.cols()) throw InputError("add_rowwise: bias dim");
        Tensor out = a;
        for (std::size_t r = 0; r < a.rows(); ++r)
            for (std::size_t c = 0; c < a.cols(); ++c)
                out.values[r * a.cols() + c] += b.values[c];
        return push(Op::kAddRow, y, bias, std::move(out));
    }

    NodeId add(NodeId a, NodeId b) {
        Tensor out = binary_check(a, b);
        for (std::size_t i = 0; i < out.size(); ++i)
            out.values[i] = val(a).values[i] + val(b).values[i];
        return push(Op::kAdd, a, b, std::move(out));
    }

    NodeId sub(NodeId a, NodeId b) {
        Tensor out = binary_check(a, b);
        for (std::size_t i = 0; i < out.size(); ++i)
            out.values[i] = val(a).values[i] - val(b).values[i];
        return push(Op::kSub, a, b, std::move(out));
    }

    NodeId scale(NodeId a, double c) {
        Tensor out = val(a);
        for (auto& v : out.values) v *= c;
        NodeId id = push(Op::kScale, a, -1, std::move(out));
        nodes_[id].c = c;
        return id;
    }

    NodeId silu(NodeId a) {
        const Tensor& x = val(a);
        Tensor out = x;
        Tensor sig = x;
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double s = detail::sigmoid(x.values[i]);
            sig.values[i] = s;
            out.values[i] = x.values[i] * s;
        }
        NodeId id = push(Op::kSilu, a, -1, std::move(out));
        nodes_[id].aux = std::move(sig);
        return id;
    }

    NodeId softplus(NodeId a) {
        const Tensor& x = val(a);
        Tensor out = x;
        for (std::size_t i = 0; i < x.size(); ++i)
            out.values[i] = detail::softplus(x.values[i]);
        return push(Op::kSoftplus, a, -1, std::move(out));
    }

    // [B x D] -> [B], squared L2 norm of each row.
    NodeId row_sq_norm(NodeId a) {
        const Tensor& x = val(a);
        Tensor out = Tensor::zeros({x.rows()});
        for (std::size_t r = 0; r < x.rows(); ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < x.cols(); ++c) {
                const double v = x.at(r, c);
                acc += v * v;
            }
            out.values[r] = acc;
        }
        return push(Op::kRowSqNorm, a, -1, std::move(out));
    }

    NodeId cmul(NodeId a, Tensor weights) {
        const Tensor& x = val(a);
        if (weights.size() != x.size()) throw InputError("cmul: size mismatch");
        Tensor out = x;
        for (std::size_t i = 0; i < out.size(); ++i)
            out.values[i] *= weights.values[i];
        NodeId id = push(Op::kCMul, a, -1, std::move(out));
        nodes_[id].aux = std::move(weights);
        return id;
    }

    NodeId cadd(NodeId a, Tensor offsets) {
        const Tensor& x = val(a);
        if (offsets.size() != x.size()) throw InputError("cadd: size mismatch");
        Tensor out = x;
        for (std::size_t i = 0; i < out.size(); ++i)
            out.values[i] += offsets.values[i];
        return push(Op::kCAdd, a, -1, std::move(out));
    }

    NodeId sum_all(NodeId a) {
        double acc = 0.0;
        for (double v : val(a).values) acc += v;
        Tensor out = Tensor::zeros({1});
        out.values[0] = acc;
        return push(Op::kSumAll, a, -1, std::move(out));
    }

    NodeId mean_all(NodeId a) {
        const std::size_t n = val(a).size();
        if (n == 0) throw InputError("mean_all: empty tensor");
        double acc = 0.0;
        for (double v : val(a).values) acc += v;
        Tensor out = Tensor::zeros({1});
        out.values[0] = acc / static_cast<double>(n);
        return push(Op::kMeanAll, a, -1, std::move(out));
    }

    const Tensor& value(NodeId id) const { return nodes_[id].value; }
    const Tensor& grad(NodeId id) const { return nodes_[id].grad; }

    // Reverse sweep from a scalar loss node. Throws NumericError naming the
    // first non-finite node encountered during the forward pass.
    void backward(NodeId loss) {
        if (val(loss).size() != 1)
            throw InputError("backward: loss must be a scalar");
        if (!std::isfinite(val(loss).values[0])) {
            for (std::size_t i = 0; i < nodes_.size(); ++i)
                if (!nodes_[i].value.all_finite())
                    throw NumericError("non-finite loss; first bad node #" +
                                       std::to_string(i) + " (op " +
                                       op_name(nodes_[i].op) + ")");
            throw NumericError("non-finite loss");
        }
        for (auto& n : nodes_) {
            n.grad = Tensor::zeros(n.value.shape);
        }
        nodes_[loss].grad.values[0] = 1.0;

        for (std::int32_t id = static_cast<std::int32_t>(nodes_.size()) - 1;
             id >= 0; --id) {
            Node& n = nodes_[id];
            const Tensor& g = n.grad;
            switch (n.op) {
                case Op::kLeaf:
                    break;
                case Op::kMatmulNT:
                    k_matmul_nt_grad_x(g, nodes_[n.b].value, nodes_[n.a].grad);
                    k_matmul_nt_grad_w(g, nodes_[n.a].value, nodes_[n.b].grad);
                    break;
                case Op::kAddRow: {
                    Tensor& da = nodes_[n.a].grad;
                    Tensor& db = nodes_[n.b].grad;
                    const std::size_t c_n = n.value.cols();
                    for (std::size_t i = 0; i < g.size(); ++i)
                        da.values[i] += g.values[i];
                    for (std::size_t c = 0; c < c_n; ++c) {
                        double acc = 0.0;
                        for (std::size_t r = 0; r < n.value.rows(); ++r)
                            acc += g.values[r * c_n + c];
                        db.values[c] += acc;
                    }
                    break;
                }
                case Op::kAdd:
                    accum(nodes_[n.a].grad, g, 1.0);
                    accum(nodes_[n.b].grad, g, 1.0);
                    break;
                case Op::kSub:
                    accum(nodes_[n.a].grad, g, 1.0);
                    accum(nodes_[n.b].grad, g, -1.0);
                    break;
                case Op::kScale:
                    accum(nodes_[n.a].grad, g, n.c);
                    break;
                case Op::kSilu: {
                    Tensor& da = nodes_[n.a].grad;
                    const Tensor& x = nodes_[n.a].value;
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        const double s = n.aux.values[i];
                        da.values[i] +=
                            g.values[i] * (s + x.values[i] * s * (1.0 - s));
                    }
                    break;
                }
                case Op::kSoftplus: {
                    Tensor& da = nodes_[n.a].grad;
                    const Tensor& x = nodes_[n.a].value;
                    for (std::size_t i = 0; i < g.size(); ++i)
                        da.values[i] +=
                            g.values[i] * detail::sigmoid(x.values[i]);
                    break;
                }
                case Op::kRowSqNorm: {
                    Tensor& da = nodes_[n.a].grad;
                    const Tensor& x = nodes_[n.a].value;
                    const std::size_t c_n = x.cols();
                    for (std::size_t r = 0; r < x.rows(); ++r)
                        for (std::size_t c = 0; c < c_n; ++c)
                            da.values[r * c_n + c] +=
                                g.values[r] * 2.0 * x.values[r * c_n + c];
                    break;
                }
                case Op::kCMul: {
                    Tensor& da = nodes_[n.a].grad;
                    for (std::size_t i = 0; i < g.size(); ++i)
                        da.values[i] += g.values[i] * n.aux.values[i];
                    break;
                }
                case Op::kCAdd:
                    accum(nodes_[n.a].grad, g, 1.0);
                    break;
                case Op::kSumAll:
                    accum_broadcast(nodes_[n.a].grad, g.values[0]);
                    break;
                case Op::kMeanAll:
                    accum_broadcast(nodes_[n.a].grad,
                                    g.values[0] /
                                        static_cast<double>(nodes_[n.a].value.size()));
                    break;
            }
        }
    }

private:
    enum class Op {
        kLeaf,
        kMatmulNT,
        kAddRow,
        kAdd,
        kSub,
        kScale,
        kSilu,
        kSoftplus,
        kRowSqNorm,
        kCMul,
        kCAdd,
        kSumAll,
        kMeanAll,
    };

    struct Node {
        Op op;
        NodeId a, b;
        double c = 0.0;
        Tensor value;
        Tensor grad;
        Tensor aux;
    };

    static const char* op_name(Op op) {
        switch (op) {
            case Op::kLeaf: return "leaf";
            case Op::kMatmulNT: return "matmul_nt";
            case Op::kAddRow: return "add_rowwise";
            case Op::kAdd: return "add";
            case Op::kSub: return "sub";
            case Op::kScale: return "scale";
            case Op::kSilu: return "silu";
            case Op::kSoftplus: return "softplus";
            case Op::kRowSqNorm: return "row_sq_norm";
            case Op::kCMul: return "cmul";
            case Op::kCAdd: return "cadd";
            case Op::kSumAll: return "sum_all";
            case Op::kMeanAll: return "mean_all";
        }
        return "?";
    }

    const Tensor& val(NodeId id) const { return nodes_[id].value; }

    Tensor binary_check(NodeId a, NodeId b) const {
        if (!val(a).same_shape(val(b)))
            throw InputError("elementwise op: shape mismatch");
        return Tensor::zeros(val(a).shape);
    }

    static void accum(Tensor& dst, const Tensor& src, double c) {
        for (std::size_t i = 0; i < dst.size(); ++i)
            dst.values[i] += c * src.values[i];
    }

    static void accum_broadcast(Tensor& dst, double g) {
        for (auto& v : dst.values) v += g;
    }

    NodeId push(Op op, NodeId a, NodeId b, Tensor v) {
        nodes_.push_back(Node{op, a, b, 0.0, std::move(v), {}, {}});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

}  // namespace dso
