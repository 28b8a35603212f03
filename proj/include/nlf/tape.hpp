// Reverse-mode autodiff over a Wengert list of tensor primitives.
// Nodes are appended in evaluation order, so parents always precede children
// and the recorded program is acyclic by construction.
#pragma once

#include <unordered_map>

#include "nlf/tensor.hpp"

namespace nlf {

enum class Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,        // c0 * a
    AddScalar,    // a + c0
    Matmul,       // a(m,k) * b(k,n)
    Relu,
    LeakyRelu,    // slope c0
    Softplus,     // log(1+exp(c0*x))/c0
    Sigmoid,
    Sin,
    Cos,
    Square,
    Sqrt,
    Abs,
    Clamp,        // min(c1, max(c0, x))
    Acos,
    Recip,
    SoftmaxRows,
    SumAll,
    MeanAll,
    RowSum,       // (m,n) -> (m,1)
    ColSum,       // (m,n) -> (1,n)
    ScaleRows,    // a(m,n) scaled per-row by b(m,1)
    BroadcastRow, // a(1,n) -> (c0,n)
    BroadcastCol, // a(m,1) -> (m,c0)
    ConcatCols,
    ConcatRows,
    SliceCols,    // columns [c0, c1)
    SliceRows,    // rows [c0, c1)
    GatherRows,   // rows picked by aux index list
    NeighborMean, // row i = mean of rows aux.neighbors(i)
    Reshape,
    Conv3d,       // a: {Cin,D,H,W}, b: {Cout,Cin,K,K,K}; c0=stride, c1=pad
    ChannelBias,  // a: {C,...}, b: (1,C)
};

struct TapeNode {
    Op op = Op::Leaf;
    Tensor value;
    int a = -1, b = -1;
    double c0 = 0.0, c1 = 0.0;
    int aux = -1;
    bool requires_grad = false;
};

// Flat adjacency used by NeighborMean.
struct NeighborLists {
    std::vector<int> offsets;  // size rows+1
    std::vector<int> indices;
    int degree(int i) const { return offsets[i + 1] - offsets[i]; }
};

class Tape {
public:
    int input(Tensor v, bool requires_grad = false) {
        if (!v.all_finite()) throw ValidationError("tape: non-finite input");
        return push(Op::Leaf, std::move(v), -1, -1, requires_grad);
    }

    // Named differentiable leaf (parameters, latent codes).
    int param(const std::string& name, Tensor v) {
        int id = input(std::move(v), true);
        names_.emplace(name, id);
        return id;
    }

    const Tensor& value(int id) const { return nodes_[size_t(id)].value; }
    size_t node_count() const { return nodes_.size(); }

    int add(int a, int b) {
        check_same_shape(a, b, "add");
        Tensor out = nodes_[a].value;
        const Tensor& vb = nodes_[b].value;
        for (size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        return push(Op::Add, std::move(out), a, b);
    }

    int sub(int a, int b) {
        check_same_shape(a, b, "sub");
        Tensor out = nodes_[a].value;
        const Tensor& vb = nodes_[b].value;
        for (size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
        return push(Op::Sub, std::move(out), a, b);
    }

    int mul(int a, int b) {
        check_same_shape(a, b, "mul");
        Tensor out = nodes_[a].value;
        const Tensor& vb = nodes_[b].value;
        for (size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
        return push(Op::Mul, std::move(out), a, b);
    }

    int neg(int a) { return unary(Op::Neg, a, [](double x) { return -x; }); }

    int scale(int a, double c) {
        Tensor out = nodes_[a].value;
        for (size_t i = 0; i < out.size(); ++i) out[i] *= c;
        return push(Op::Scale, std::move(out), a, -1, false, c);
    }

    int add_scalar(int a, double c) {
        Tensor out = nodes_[a].value;
        for (size_t i = 0; i < out.size(); ++i) out[i] += c;
        return push(Op::AddScalar, std::move(out), a, -1, false, c);
    }

    int matmul(int a, int b) {
        const Tensor& va = nodes_[a].value;
        const Tensor& vb = nodes_[b].value;
        if (va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows())
            throw ValidationError("tape: matmul dimension mismatch");
        return push(Op::Matmul, nlf::matmul(va, vb), a, b);
    }

    int relu(int a) {
        return unary(Op::Relu, a, [](double x) { return x > 0.0 ? x : 0.0; });
    }

    int leaky_relu(int a, double slope = 0.01) {
        int id = unary(Op::LeakyRelu, a, [slope](double x) { return x > 0.0 ? x : slope * x; });
        nodes_[id].c0 = slope;
        return id;
    }

    int softplus(int a, double beta = 100.0) {
        int id = unary(Op::Softplus, a, [beta](double x) {
            double bx = beta * x;
            if (bx > 30.0) return x;
            if (bx < -30.0) return std::exp(bx) / beta;
            return std::log1p(std::exp(bx)) / beta;
        });
        nodes_[id].c0 = beta;
        return id;
    }

    int sigmoid(int a) {
        return unary(Op::Sigmoid, a, [](double x) {
            return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        });
    }

    int sin(int a) { return unary(Op::Sin, a, [](double x) { return std::sin(x); }); }
    int cos(int a) { return unary(Op::Cos, a, [](double x) { return std::cos(x); }); }
    int square(int a) { return unary(Op::Square, a, [](double x) { return x * x; }); }

    int sqrt_(int a) {
        return unary(Op::Sqrt, a, [](double x) { return std::sqrt(std::max(x, 0.0)); });
    }

    int abs_(int a) { return unary(Op::Abs, a, [](double x) { return std::fabs(x); }); }

    int clamp(int a, double lo, double hi) {
        int id = unary(Op::Clamp, a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); });
        nodes_[id].c0 = lo;
        nodes_[id].c1 = hi;
        return id;
    }

    int acos_(int a) {
        return unary(Op::Acos, a, [](double x) { return std::acos(std::min(1.0, std::max(-1.0, x))); });
    }

    int recip(int a) { return unary(Op::Recip, a, [](double x) { return 1.0 / x; }); }

    int softmax_rows(int a) {
        const Tensor& v = nodes_[a].value;
        Tensor out = v;
        int m = v.rows(), n = v.cols();
        for (int i = 0; i < m; ++i) {
            double mx = -1e300;
            for (int j = 0; j < n; ++j) mx = std::max(mx, v.at(i, j));
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += (out.at(i, j) = std::exp(v.at(i, j) - mx));
            for (int j = 0; j < n; ++j) out.at(i, j) /= s;
        }
        return push(Op::SoftmaxRows, std::move(out), a);
    }

    int sum_all(int a) { return push(Op::SumAll, Tensor::scalar(nodes_[a].value.sum()), a); }

    int mean_all(int a) {
        const Tensor& v = nodes_[a].value;
        return push(Op::MeanAll, Tensor::scalar(v.sum() / double(v.size())), a);
    }

    int row_sum(int a) {
        const Tensor& v = nodes_[a].value;
        Tensor out({v.rows(), 1});
        for (int i = 0; i < v.rows(); ++i) {
            double s = 0.0;
            for (int j = 0; j < v.cols(); ++j) s += v.at(i, j);
            out.at(i, 0) = s;
        }
        return push(Op::RowSum, std::move(out), a);
    }

    int col_sum(int a) {
        const Tensor& v = nodes_[a].value;
        Tensor out({1, v.cols()});
        for (int i = 0; i < v.rows(); ++i)
            for (int j = 0; j < v.cols(); ++j) out.at(0, j) += v.at(i, j);
        return push(Op::ColSum, std::move(out), a);
    }

    int scale_rows(int a, int s) {
        const Tensor& v = nodes_[a].value;
        const Tensor& sv = nodes_[s].value;
        if (sv.rows() != v.rows() || sv.cols() != 1)
            throw ValidationError("tape: scale_rows expects (m,1) scales");
        Tensor out = v;
        for (int i = 0; i < v.rows(); ++i)
            for (int j = 0; j < v.cols(); ++j) out.at(i, j) *= sv.at(i, 0);
        return push(Op::ScaleRows, std::move(out), a, s);
    }

    int broadcast_row(int a, int rows) {
        const Tensor& v = nodes_[a].value;
        if (v.rows() != 1) throw ValidationError("tape: broadcast_row expects (1,n)");
        Tensor out({rows, v.cols()});
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < v.cols(); ++j) out.at(i, j) = v.at(0, j);
        return push(Op::BroadcastRow, std::move(out), a, -1, false, double(rows));
    }

    int broadcast_col(int a, int cols) {
        const Tensor& v = nodes_[a].value;
        if (v.cols() != 1) throw ValidationError("tape: broadcast_col expects (m,1)");
        Tensor out({v.rows(), cols});
        for (int i = 0; i < v.rows(); ++i)
            for (int j = 0; j < cols; ++j) out.at(i, j) = v.at(i, 0);
        return push(Op::BroadcastCol, std::move(out), a, -1, false, double(cols));
    }

    int concat_cols(int a, int b) {
        const Tensor& va = nodes_[a].value;
        const Tensor& vb = nodes_[b].value;
        if (va.rows() != vb.rows()) throw ValidationError("tape: concat_cols row mismatch");
        Tensor out({va.rows(), va.cols() + vb.cols()});
        for (int i = 0; i < va.rows(); ++i) {
            for (int j = 0; j < va.cols(); ++j) out.at(i, j) = va.at(i, j);
            for (int j = 0; j < vb.cols(); ++j) out.at(i, va.cols() + j) = vb.at(i, j);
        }
        return push(Op::ConcatCols, std::move(out), a, b);
    }

    int concat_rows(int a, int b) {
        const Tensor& va = nodes_[a].value;
        const Tensor& vb = nodes_[b].value;
        if (va.cols() != vb.cols()) throw ValidationError("tape: concat_rows col mismatch");
        Tensor out({va.rows() + vb.rows(), va.cols()});
        for (int i = 0; i < va.rows(); ++i)
            for (int j = 0; j < va.cols(); ++j) out.at(i, j) = va.at(i, j);
        for (int i = 0; i < vb.rows(); ++i)
            for (int j = 0; j < vb.cols(); ++j) out.at(va.rows() + i, j) = vb.at(i, j);
        return push(Op::ConcatRows, std::move(out), a, b);
    }

    int slice_cols(int a, int from, int to) {
        const Tensor& v = nodes_[a].value;
        if (from < 0 || to > v.cols() || from >= to)
            throw ValidationError("tape: slice_cols out of range");
        Tensor out({v.rows(), to - from});
        for (int i = 0; i < v.rows(); ++i)
            for (int j = from; j < to; ++j) out.at(i, j - from) = v.at(i, j);
        return push(Op::SliceCols, std::move(out), a, -1, false, double(from), double(to));
    }

    int slice_rows(int a, int from, int to) {
        const Tensor& v = nodes_[a].value;
        if (from < 0 || to > v.rows() || from >= to)
            throw ValidationError("tape: slice_rows out of range");
        Tensor out({to - from, v.cols()});
        for (int i = from; i < to; ++i)
            for (int j = 0; j < v.cols(); ++j) out.at(i - from, j) = v.at(i, j);
        return push(Op::SliceRows, std::move(out), a, -1, false, double(from), double(to));
    }

    int gather_rows(int a, std::vector<int> idx) {
        const Tensor& v = nodes_[a].value;
        Tensor out({int(idx.size()), v.cols()});
        for (size_t r = 0; r < idx.size(); ++r) {
            if (idx[r] < 0 || idx[r] >= v.rows())
                throw ValidationError("tape: gather index out of range");
            for (int j = 0; j < v.cols(); ++j) out.at(int(r), j) = v.at(idx[r], j);
        }
        int ax = int(index_aux_.size());
        index_aux_.push_back(std::move(idx));
        int id = push(Op::GatherRows, std::move(out), a);
        nodes_[id].aux = ax;
        return id;
    }

    int neighbor_mean(int a, const NeighborLists& nb) {
        const Tensor& v = nodes_[a].value;
        if (int(nb.offsets.size()) != v.rows() + 1)
            throw ValidationError("tape: neighbor list size mismatch");
        Tensor out({v.rows(), v.cols()});
        for (int i = 0; i < v.rows(); ++i) {
            int deg = nb.degree(i);
            if (deg == 0) continue;
            for (int p = nb.offsets[i]; p < nb.offsets[i + 1]; ++p)
                for (int j = 0; j < v.cols(); ++j) out.at(i, j) += v.at(nb.indices[p], j);
            for (int j = 0; j < v.cols(); ++j) out.at(i, j) /= double(deg);
        }
        int ax = int(neighbor_aux_.size());
        neighbor_aux_.push_back(nb);
        int id = push(Op::NeighborMean, std::move(out), a);
        nodes_[id].aux = ax;
        return id;
    }

    int reshape(int a, std::vector<int> shape) {
        return push(Op::Reshape, nodes_[a].value.reshaped(std::move(shape)), a);
    }

    int conv3d(int a, int k, int stride, int pad) {
        const Tensor& in = nodes_[a].value;
        const Tensor& ker = nodes_[k].value;
        if (in.rank() != 4 || ker.rank() != 5 || ker.shape()[1] != in.shape()[0])
            throw ValidationError("tape: conv3d shape mismatch");
        Tensor out = conv3d_forward(in, ker, stride, pad);
        return push(Op::Conv3d, std::move(out), a, k, false, double(stride), double(pad));
    }

    int channel_bias(int a, int b) {
        const Tensor& v = nodes_[a].value;
        const Tensor& bias = nodes_[b].value;
        if (int(bias.size()) != v.shape()[0])
            throw ValidationError("tape: channel bias size mismatch");
        Tensor out = v;
        size_t spatial = v.size() / size_t(v.shape()[0]);
        for (int c = 0; c < v.shape()[0]; ++c)
            for (size_t s = 0; s < spatial; ++s) out[size_t(c) * spatial + s] += bias[size_t(c)];
        return push(Op::ChannelBias, std::move(out), a, b);
    }

    // ---- reverse pass ----

    void backward(int loss) {
        if (nodes_[size_t(loss)].value.size() != 1)
            throw ValidationError("tape: backward requires a scalar loss");
        grads_.assign(nodes_.size(), Tensor());
        grads_[size_t(loss)] = Tensor::scalar(1.0);
        for (int id = loss; id >= 0; --id) {
            if (grads_[size_t(id)].empty()) continue;
            step_backward(id);
        }
    }

    // Zero tensor of the node's shape when the node did not receive gradient.
    Tensor grad(int id) const {
        if (grads_.empty() || grads_[size_t(id)].empty())
            return Tensor(nodes_[size_t(id)].value.shape());
        return grads_[size_t(id)];
    }

    std::unordered_map<std::string, Tensor> named_gradients(int loss) {
        backward(loss);
        std::unordered_map<std::string, Tensor> out;
        for (const auto& [name, id] : names_) out.emplace(name, grad(id));
        return out;
    }

    const std::unordered_map<std::string, int>& named_nodes() const { return names_; }

private:
    template <class F>
    int unary(Op op, int a, F f) {
        Tensor out = nodes_[size_t(a)].value;
        for (size_t i = 0; i < out.size(); ++i) out[i] = f(out[i]);
        return push(op, std::move(out), a);
    }

    int push(Op op, Tensor value, int a = -1, int b = -1, bool rg = false, double c0 = 0.0,
             double c1 = 0.0) {
        TapeNode n;
        n.op = op;
        n.value = std::move(value);
        n.a = a;
        n.b = b;
        n.c0 = c0;
        n.c1 = c1;
        n.requires_grad = rg || (a >= 0 && nodes_[size_t(a)].requires_grad) ||
                          (b >= 0 && nodes_[size_t(b)].requires_grad);
        nodes_.push_back(std::move(n));
        return int(nodes_.size()) - 1;
    }

    void check_same_shape(int a, int b, const char* what) const {
        if (!nodes_[size_t(a)].value.same_shape(nodes_[size_t(b)].value))
            throw ValidationError(std::string("tape: ") + what + " shape mismatch");
    }

    Tensor& accum(int id) {
        Tensor& g = grads_[size_t(id)];
        if (g.empty()) g = Tensor(nodes_[size_t(id)].value.shape());
        return g;
    }

    bool wants(int id) const { return id >= 0 && nodes_[size_t(id)].requires_grad; }

    static Tensor conv3d_forward(const Tensor& in, const Tensor& ker, int stride, int pad) {
        const auto& is = in.shape();
        const auto& ks = ker.shape();
        const int ci = is[0], D = is[1], H = is[2], W = is[3];
        const int co = ks[0], K = ks[2];
        const int Do = (D + 2 * pad - K) / stride + 1;
        const int Ho = (H + 2 * pad - K) / stride + 1;
        const int Wo = (W + 2 * pad - K) / stride + 1;
        if (Do <= 0 || Ho <= 0 || Wo <= 0) throw ValidationError("conv3d: output would be empty");
        Tensor out({co, Do, Ho, Wo});
        auto in_at = [&](int c, int z, int y, int x) {
            return in[((size_t(c) * D + z) * H + y) * W + x];
        };
        for (int c = 0; c < co; ++c)
            for (int zo = 0; zo < Do; ++zo)
                for (int yo = 0; yo < Ho; ++yo)
                    for (int xo = 0; xo < Wo; ++xo) {
                        double s = 0.0;
                        for (int c2 = 0; c2 < ci; ++c2)
                            for (int kz = 0; kz < K; ++kz) {
                                int z = zo * stride - pad + kz;
                                if (z < 0 || z >= D) continue;
                                for (int ky = 0; ky < K; ++ky) {
                                    int y = yo * stride - pad + ky;
                                    if (y < 0 || y >= H) continue;
                                    for (int kx = 0; kx < K; ++kx) {
                                        int x = xo * stride - pad + kx;
                                        if (x < 0 || x >= W) continue;
                                        s += in_at(c2, z, y, x) *
                                             ker[(((size_t(c) * ci + c2) * K + kz) * K + ky) * K + kx];
                                    }
                                }
                            }
                        out[((size_t(c) * Do + zo) * Ho + yo) * Wo + xo] = s;
                    }
        return out;
    }

    void step_backward(int id) {
        const TapeNode& n = nodes_[size_t(id)];
        const Tensor& up = grads_[size_t(id)];
        const int a = n.a, b = n.b;
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Add: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                }
                if (wants(b)) {
                    Tensor& g = accum(b);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                }
                break;
            }
            case Op::Sub: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                }
                if (wants(b)) {
                    Tensor& g = accum(b);
                    for (size_t i = 0; i < up.size(); ++i) g[i] -= up[i];
                }
                break;
            }
            case Op::Mul: {
                const Tensor& va = nodes_[size_t(a)].value;
                const Tensor& vb = nodes_[size_t(b)].value;
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += up[i] * vb[i];
                }
                if (wants(b)) {
                    Tensor& g = accum(b);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += up[i] * va[i];
                }
                break;
            }
            case Op::Neg: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] -= up[i];
                }
                break;
            }
            case Op::Scale: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += n.c0 * up[i];
                }
                break;
            }
            case Op::AddScalar: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                }
                break;
            }
            case Op::Matmul: {
                const Tensor& va = nodes_[size_t(a)].value;
                const Tensor& vb = nodes_[size_t(b)].value;
                if (wants(a)) matmul_into(up, false, vb, true, accum(a), true);
                if (wants(b)) matmul_into(va, true, up, false, accum(b), true);
                break;
            }
            case Op::Relu: {
                if (wants(a)) {
                    const Tensor& va = nodes_[size_t(a)].value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i)
                        if (va[i] > 0.0) g[i] += up[i];
                }
                break;
            }
            case Op::LeakyRelu: {
                if (wants(a)) {
                    const Tensor& va = nodes_[size_t(a)].value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i)
                        g[i] += (va[i] > 0.0 ? 1.0 : n.c0) * up[i];
                }
                break;
            }
            case Op::Softplus: {
                if (wants(a)) {
                    const Tensor& va = nodes_[size_t(a)].value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) {
                        double bx = n.c0 * va[i];
                        double s = bx >= 0.0 ? 1.0 / (1.0 + std::exp(-bx))
                                             : std::exp(bx) / (1.0 + std::exp(bx));
                        g[i] += s * up[i];
                    }
                }
                break;
            }
            case Op::Sigmoid: {
                if (wants(a)) {
                    const Tensor& y = n.value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += y[i] * (1.0 - y[i]) * up[i];
                }
                break;
            }
            case Op::Sin: {
                if (wants(a)) {
                    const Tensor& va = nodes_[size_t(a)].value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += std::cos(va[i]) * up[i];
                }
                break;
            }
            case Op::Cos: {
                if (wants(a)) {
                    const Tensor& va = nodes_[size_t(a)].value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] -= std::sin(va[i]) * up[i];
                }
                break;
            }
            case Op::Square: {
                if (wants(a)) {
                    const Tensor& va = nodes_[size_t(a)].value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += 2.0 * va[i] * up[i];
                }
                break;
            }
            case Op::Sqrt: {
                if (wants(a)) {
                    const Tensor& y = n.value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i)
                        if (y[i] > 1e-150) g[i] += 0.5 / y[i] * up[i];
                }
                break;
            }
            case Op::Abs: {
                if (wants(a)) {
                    const Tensor& va = nodes_[size_t(a)].value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) {
                        if (va[i] > 0.0) g[i] += up[i];
                        else if (va[i] < 0.0) g[i] -= up[i];
                    }
                }
                break;
            }
            case Op::Clamp: {
                if (wants(a)) {
                    const Tensor& va = nodes_[size_t(a)].value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i)
                        if (va[i] > n.c0 && va[i] < n.c1) g[i] += up[i];
                }
                break;
            }
            case Op::Acos: {
                if (wants(a)) {
                    const Tensor& va = nodes_[size_t(a)].value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) {
                        double d = 1.0 - va[i] * va[i];
                        if (d > 1e-12) g[i] -= up[i] / std::sqrt(d);
                    }
                }
                break;
            }
            case Op::Recip: {
                if (wants(a)) {
                    const Tensor& va = nodes_[size_t(a)].value;
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] -= up[i] / (va[i] * va[i]);
                }
                break;
            }
            case Op::SoftmaxRows: {
                if (wants(a)) {
                    const Tensor& y = n.value;
                    Tensor& g = accum(a);
                    int m = y.rows(), c = y.cols();
                    for (int i = 0; i < m; ++i) {
                        double dot = 0.0;
                        for (int j = 0; j < c; ++j) dot += up.at(i, j) * y.at(i, j);
                        for (int j = 0; j < c; ++j)
                            g.at(i, j) += (up.at(i, j) - dot) * y.at(i, j);
                    }
                }
                break;
            }
            case Op::SumAll: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < g.size(); ++i) g[i] += up[0];
                }
                break;
            }
            case Op::MeanAll: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    double w = up[0] / double(g.size());
                    for (size_t i = 0; i < g.size(); ++i) g[i] += w;
                }
                break;
            }
            case Op::RowSum: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < g.cols(); ++j) g.at(i, j) += up.at(i, 0);
                }
                break;
            }
            case Op::ColSum: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < g.cols(); ++j) g.at(i, j) += up.at(0, j);
                }
                break;
            }
            case Op::ScaleRows: {
                const Tensor& va = nodes_[size_t(a)].value;
                const Tensor& vs = nodes_[size_t(b)].value;
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < g.cols(); ++j) g.at(i, j) += up.at(i, j) * vs.at(i, 0);
                }
                if (wants(b)) {
                    Tensor& g = accum(b);
                    for (int i = 0; i < va.rows(); ++i) {
                        double s = 0.0;
                        for (int j = 0; j < va.cols(); ++j) s += up.at(i, j) * va.at(i, j);
                        g.at(i, 0) += s;
                    }
                }
                break;
            }
            case Op::BroadcastRow: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (int i = 0; i < up.rows(); ++i)
                        for (int j = 0; j < up.cols(); ++j) g.at(0, j) += up.at(i, j);
                }
                break;
            }
            case Op::BroadcastCol: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (int i = 0; i < up.rows(); ++i)
                        for (int j = 0; j < up.cols(); ++j) g.at(i, 0) += up.at(i, j);
                }
                break;
            }
            case Op::ConcatCols: {
                const Tensor& va = nodes_[size_t(a)].value;
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < g.cols(); ++j) g.at(i, j) += up.at(i, j);
                }
                if (wants(b)) {
                    Tensor& g = accum(b);
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < g.cols(); ++j) g.at(i, j) += up.at(i, va.cols() + j);
                }
                break;
            }
            case Op::ConcatRows: {
                const Tensor& va = nodes_[size_t(a)].value;
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < g.cols(); ++j) g.at(i, j) += up.at(i, j);
                }
                if (wants(b)) {
                    Tensor& g = accum(b);
                    for (int i = 0; i < g.rows(); ++i)
                        for (int j = 0; j < g.cols(); ++j) g.at(i, j) += up.at(va.rows() + i, j);
                }
                break;
            }
            case Op::SliceCols: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    int from = int(n.c0);
                    for (int i = 0; i < up.rows(); ++i)
                        for (int j = 0; j < up.cols(); ++j) g.at(i, from + j) += up.at(i, j);
                }
                break;
            }
            case Op::SliceRows: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    int from = int(n.c0);
                    for (int i = 0; i < up.rows(); ++i)
                        for (int j = 0; j < up.cols(); ++j) g.at(from + i, j) += up.at(i, j);
                }
                break;
            }
            case Op::GatherRows: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    const auto& idx = index_aux_[size_t(n.aux)];
                    for (size_t r = 0; r < idx.size(); ++r)
                        for (int j = 0; j < up.cols(); ++j) g.at(idx[r], j) += up.at(int(r), j);
                }
                break;
            }
            case Op::NeighborMean: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    const auto& nb = neighbor_aux_[size_t(n.aux)];
                    for (int i = 0; i < up.rows(); ++i) {
                        int deg = nb.degree(i);
                        if (deg == 0) continue;
                        double w = 1.0 / double(deg);
                        for (int p = nb.offsets[i]; p < nb.offsets[i + 1]; ++p)
                            for (int j = 0; j < up.cols(); ++j)
                                g.at(nb.indices[p], j) += w * up.at(i, j);
                    }
                }
                break;
            }
            case Op::Reshape: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                }
                break;
            }
            case Op::Conv3d: {
                const Tensor& in = nodes_[size_t(a)].value;
                const Tensor& ker = nodes_[size_t(b)].value;
                conv3d_backward(in, ker, up, int(n.c0), int(n.c1),
                                wants(a) ? &accum(a) : nullptr, wants(b) ? &accum(b) : nullptr);
                break;
            }
            case Op::ChannelBias: {
                if (wants(a)) {
                    Tensor& g = accum(a);
                    for (size_t i = 0; i < up.size(); ++i) g[i] += up[i];
                }
                if (wants(b)) {
                    Tensor& g = accum(b);
                    int C = nodes_[size_t(a)].value.shape()[0];
                    size_t spatial = up.size() / size_t(C);
                    for (int c = 0; c < C; ++c)
                        for (size_t s = 0; s < spatial; ++s) g[size_t(c)] += up[size_t(c) * spatial + s];
                }
                break;
            }
        }
    }

    static void conv3d_backward(const Tensor& in, const Tensor& ker, const Tensor& up, int stride,
                                int pad, Tensor* din, Tensor* dker) {
        const auto& is = in.shape();
        const auto& ks = ker.shape();
        const auto& os = up.shape();
        const int ci = is[0], D = is[1], H = is[2], W = is[3];
        const int co = ks[0], K = ks[2];
        const int Do = os[1], Ho = os[2], Wo = os[3];
        for (int c = 0; c < co; ++c)
            for (int zo = 0; zo < Do; ++zo)
                for (int yo = 0; yo < Ho; ++yo)
                    for (int xo = 0; xo < Wo; ++xo) {
                        double u = up[((size_t(c) * Do + zo) * Ho + yo) * Wo + xo];
                        if (u == 0.0) continue;
                        for (int c2 = 0; c2 < ci; ++c2)
                            for (int kz = 0; kz < K; ++kz) {
                                int z = zo * stride - pad + kz;
                                if (z < 0 || z >= D) continue;
                                for (int ky = 0; ky < K; ++ky) {
                                    int y = yo * stride - pad + ky;
                                    if (y < 0 || y >= H) continue;
                                    for (int kx = 0; kx < K; ++kx) {
                                        int x = xo * stride - pad + kx;
                                        if (x < 0 || x >= W) continue;
                                        size_t ii = ((size_t(c2) * D + z) * H + y) * W + x;
                                        size_t ki =
                                            (((size_t(c) * ci + c2) * K + kz) * K + ky) * K + kx;
                                        if (din) (*din)[ii] += ker[ki] * u;
                                        if (dker) (*dker)[ki] += in[ii] * u;
                                    }
                                }
                            }
                    }
    }

    std::vector<TapeNode> nodes_;
    std::vector<Tensor> grads_;
    std::vector<std::vector<int>> index_aux_;
    std::vector<NeighborLists> neighbor_aux_;
    std::unordered_map<std::string, int> names_;
};

}  // namespace nlf
