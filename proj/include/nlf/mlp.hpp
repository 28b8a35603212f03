// MLP building blocks: parameter storage with Adam state, positional
// encoding, taped/plain forward passes, and a forward-mode tangent pass used
// by the gradient-norm regulariser.
#pragma once

#include <map>

#include "nlf/tape.hpp"

namespace nlf {

enum class Activation { Relu, LeakyRelu, Softplus, None };
enum class OutputHead { Raw, SoftmaxRows, Sigmoid };

struct MlpSpec {
    std::vector<int> layer_widths;  // input, hidden..., output
    Activation activation = Activation::Relu;
    OutputHead head = OutputHead::Raw;
    std::vector<int> skips;         // weight-layer indices whose input gets the
                                    // network input concatenated (scaled 1/sqrt 2)
    double leaky_slope = 0.01;
    double softplus_beta = 100.0;

    int n_layers() const { return int(layer_widths.size()) - 1; }
    bool has_skip(int layer) const {
        for (int s : skips)
            if (s == layer) return true;
        return false;
    }
    int weight_rows(int layer) const {
        return layer_widths[size_t(layer)] + (has_skip(layer) ? layer_widths[0] : 0);
    }
};

// Named tensors plus per-tensor Adam state. Iteration follows insertion
// order so serialized checkpoints are reproducible.
class ParamSet {
public:
    struct Entry {
        Tensor value, m, v;
        long step = 0;
    };

    Tensor& add(const std::string& name, Tensor t) {
        if (entries_.count(name)) throw ValidationError("param already defined: " + name);
        order_.push_back(name);
        Entry e;
        e.m = Tensor(t.shape());
        e.v = Tensor(t.shape());
        e.value = std::move(t);
        return entries_.emplace(name, std::move(e)).first->second.value;
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    const Tensor& value(const std::string& name) const { return entry(name).value; }
    Tensor& value(const std::string& name) { return entry(name).value; }
    Entry& entry(const std::string& name) {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ValidationError("unknown param: " + name);
        return it->second;
    }
    const Entry& entry(const std::string& name) const {
        auto it = entries_.find(name);
        if (it == entries_.end()) throw ValidationError("unknown param: " + name);
        return it->second;
    }

    void remove(const std::string& name) {
        entries_.erase(name);
        order_.erase(std::remove(order_.begin(), order_.end(), name), order_.end());
    }

    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }
    long skipped_updates() const { return skipped_updates_; }

    // One Adam step per named gradient. A non-finite gradient leaves the
    // parameter untouched and is counted instead of propagated.
    void adam_step(const std::unordered_map<std::string, Tensor>& grads, double lr,
                   double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
        for (const auto& name : order_) {
            auto git = grads.find(name);
            if (git == grads.end()) continue;
            const Tensor& g = git->second;
            Entry& e = entries_.at(name);
            if (!g.same_shape(e.value)) throw ValidationError("gradient shape mismatch: " + name);
            if (!g.all_finite()) {
                ++skipped_updates_;
                continue;
            }
            e.step += 1;
            double c1 = 1.0 - std::pow(beta1, double(e.step));
            double c2 = 1.0 - std::pow(beta2, double(e.step));
            for (size_t i = 0; i < g.size(); ++i) {
                double gi = g[i];
                e.m[i] = beta1 * e.m[i] + (1.0 - beta1) * gi;
                e.v[i] = beta2 * e.v[i] + (1.0 - beta2) * gi * gi;
                e.value[i] -= lr * (e.m[i] / c1) / (std::sqrt(e.v[i] / c2) + eps);
            }
        }
    }

    void reset_adam_state() {
        for (auto& [name, e] : entries_) {
            e.m.fill(0.0);
            e.v.fill(0.0);
            e.step = 0;
        }
    }

private:
    std::map<std::string, Entry> entries_;
    std::vector<std::string> order_;
    long skipped_updates_ = 0;
};

inline std::string layer_w(const std::string& prefix, int l) {
    return prefix + "/w" + std::to_string(l);
}
inline std::string layer_b(const std::string& prefix, int l) {
    return prefix + "/b" + std::to_string(l);
}

// He-style init; final layer uses a smaller fan-in scale and zero bias.
inline void init_mlp(ParamSet& ps, const std::string& prefix, const MlpSpec& spec, Rng& rng) {
    for (int l = 0; l < spec.n_layers(); ++l) {
        int rows = spec.weight_rows(l), cols = spec.layer_widths[size_t(l) + 1];
        double std = std::sqrt(2.0 / double(rows));
        ps.add(layer_w(prefix, l), Tensor::random_normal({rows, cols}, rng, 0.0, std));
        ps.add(layer_b(prefix, l), Tensor({1, cols}));
    }
}

// Sphere-like start for the distance field: the network initially outputs
// roughly r - |x|, positive inside a disc of the given radius around the
// origin. First-layer rows other than raw_cols (and all skip rows) start at
// zero so the initial field only sees the raw coordinates.
inline void init_mlp_spherical(ParamSet& ps, const std::string& prefix, const MlpSpec& spec,
                               Rng& rng, const std::vector<int>& raw_cols, double radius = 0.5) {
    auto is_raw = [&](int r) {
        for (int c : raw_cols)
            if (c == r) return true;
        return false;
    };
    for (int l = 0; l < spec.n_layers(); ++l) {
        int rows = spec.weight_rows(l), cols = spec.layer_widths[size_t(l) + 1];
        Tensor w({rows, cols}), b({1, cols});
        if (l == spec.n_layers() - 1) {
            double mean = std::sqrt(kPi) / std::sqrt(double(rows));
            for (size_t i = 0; i < w.size(); ++i) w[i] = rng.normal(-mean, 1e-5);
            b.fill(radius);
        } else {
            double std = std::sqrt(2.0) / std::sqrt(double(cols));
            for (size_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, std);
            if (l == 0) {
                for (int r = 0; r < rows; ++r)
                    if (!is_raw(r))
                        for (int c = 0; c < cols; ++c) w.at(r, c) = 0.0;
            } else if (spec.has_skip(l)) {
                for (int r = spec.layer_widths[size_t(l)]; r < rows; ++r)
                    for (int c = 0; c < cols; ++c) w.at(r, c) = 0.0;
            }
        }
        ps.add(layer_w(prefix, l), std::move(w));
        ps.add(layer_b(prefix, l), std::move(b));
    }
}

// Final layer forced to a fixed output; used to start rigid transforms at
// identity (unit quaternion, zero translation).
inline void init_mlp_constant_head(ParamSet& ps, const std::string& prefix, const MlpSpec& spec,
                                   Rng& rng, const std::vector<double>& head_bias) {
    require(int(head_bias.size()) == spec.layer_widths.back(),
            "constant head size must match output width");
    for (int l = 0; l < spec.n_layers(); ++l) {
        int rows = spec.weight_rows(l), cols = spec.layer_widths[size_t(l) + 1];
        if (l == spec.n_layers() - 1) {
            ps.add(layer_w(prefix, l), Tensor({rows, cols}));
            Tensor b({1, cols});
            for (int c = 0; c < cols; ++c) b.at(0, c) = head_bias[size_t(c)];
            ps.add(layer_b(prefix, l), std::move(b));
        } else {
            double std = std::sqrt(2.0 / double(rows));
            ps.add(layer_w(prefix, l), Tensor::random_normal({rows, cols}, rng, 0.0, std));
            ps.add(layer_b(prefix, l), Tensor({1, cols}));
        }
    }
}

// ---- positional encoding ----
// Per coordinate: [x, sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x), ...],
// frequencies doubling per octave. Width per coordinate: 1 + 2*order.

inline int positional_width(int coords, int order) { return coords * (1 + 2 * order); }

inline Tensor positional_encode(const Tensor& x, int order) {
    int n = x.rows(), d = x.cols();
    Tensor out({n, positional_width(d, order)});
    for (int i = 0; i < n; ++i) {
        int c = 0;
        for (int j = 0; j < d; ++j) {
            double v = x.at(i, j);
            out.at(i, c++) = v;
            double f = kPi;
            for (int o = 0; o < order; ++o, f *= 2.0) {
                out.at(i, c++) = std::sin(f * v);
                out.at(i, c++) = std::cos(f * v);
            }
        }
    }
    return out;
}

struct TapedEncoding {
    int enc = -1;              // encoded value
    std::vector<int> tangents; // encodings of directional derivatives, one per direction
};

// Taped encoding; for each direction node in dirs also builds the tangent of
// the encoding, reusing the forward sin/cos nodes.
inline TapedEncoding positional_encode_dirs(Tape& t, int x, int order,
                                            const std::vector<int>& dirs) {
    int d = t.value(x).cols();
    std::vector<int> parts;
    std::vector<std::vector<int>> tparts(dirs.size());
    for (int j = 0; j < d; ++j) {
        int xc = d == 1 ? x : t.slice_cols(x, j, j + 1);
        parts.push_back(xc);
        std::vector<int> tcs;
        for (int dir : dirs) {
            int tc = d == 1 ? dir : t.slice_cols(dir, j, j + 1);
            tcs.push_back(tc);
            tparts[tcs.size() - 1].push_back(tc);
        }
        double f = kPi;
        for (int o = 0; o < order; ++o, f *= 2.0) {
            int sx = t.scale(xc, f);
            int sn = t.sin(sx), cs = t.cos(sx);
            parts.push_back(sn);
            parts.push_back(cs);
            for (size_t k = 0; k < dirs.size(); ++k) {
                tparts[k].push_back(t.scale(t.mul(cs, tcs[k]), f));
                tparts[k].push_back(t.scale(t.mul(sn, tcs[k]), -f));
            }
        }
    }
    auto cat = [&](const std::vector<int>& v) {
        int acc = v[0];
        for (size_t i = 1; i < v.size(); ++i) acc = t.concat_cols(acc, v[i]);
        return acc;
    };
    TapedEncoding out;
    out.enc = cat(parts);
    for (const auto& tp : tparts) out.tangents.push_back(cat(tp));
    return out;
}

inline TapedEncoding positional_encode(Tape& t, int x, int order, int tx = -1) {
    std::vector<int> dirs;
    if (tx >= 0) dirs.push_back(tx);
    return positional_encode_dirs(t, x, order, dirs);
}

// ---- forward passes ----

struct TapedMlp {
    std::vector<int> w, b;
};

inline TapedMlp push_mlp_params(Tape& t, const ParamSet& ps, const std::string& prefix,
                                const MlpSpec& spec) {
    TapedMlp m;
    for (int l = 0; l < spec.n_layers(); ++l) {
        m.w.push_back(t.param(layer_w(prefix, l), ps.value(layer_w(prefix, l))));
        m.b.push_back(t.param(layer_b(prefix, l), ps.value(layer_b(prefix, l))));
    }
    return m;
}

struct MlpTrace {
    int out = -1;            // after output head
    int raw = -1;            // before output head
    std::vector<int> pre;    // pre-activation per hidden layer
    int input = -1;          // the encoded input node fed to layer 0
};

inline MlpTrace mlp_forward(Tape& t, const MlpSpec& spec, const TapedMlp& m, int x) {
    if (t.value(x).cols() != spec.layer_widths[0])
        throw ValidationError("mlp: input width mismatch");
    MlpTrace tr;
    tr.input = x;
    int h = x;
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    for (int l = 0; l < spec.n_layers(); ++l) {
        if (spec.has_skip(l)) h = t.scale(t.concat_cols(h, x), inv_sqrt2);
        int rows = t.value(h).rows();
        int pre = t.add(t.matmul(h, m.w[size_t(l)]), t.broadcast_row(m.b[size_t(l)], rows));
        if (l == spec.n_layers() - 1) {
            tr.raw = pre;
            break;
        }
        tr.pre.push_back(pre);
        switch (spec.activation) {
            case Activation::Relu: h = t.relu(pre); break;
            case Activation::LeakyRelu: h = t.leaky_relu(pre, spec.leaky_slope); break;
            case Activation::Softplus: h = t.softplus(pre, spec.softplus_beta); break;
            case Activation::None: h = pre; break;
        }
    }
    switch (spec.head) {
        case OutputHead::Raw: tr.out = tr.raw; break;
        case OutputHead::SoftmaxRows: tr.out = t.softmax_rows(tr.raw); break;
        case OutputHead::Sigmoid: tr.out = t.sigmoid(tr.raw); break;
    }
    return tr;
}

// Tangent (directional derivative) of the raw output along the input tangent
// tx, replayed through the recorded pre-activations. Requires a smooth
// activation; the piecewise-linear ones have no usable tangent here.
inline int mlp_jvp(Tape& t, const MlpSpec& spec, const TapedMlp& m, const MlpTrace& tr, int tx) {
    int th = tx;
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    for (int l = 0; l < spec.n_layers(); ++l) {
        if (spec.has_skip(l)) th = t.scale(t.concat_cols(th, tx), inv_sqrt2);
        th = t.matmul(th, m.w[size_t(l)]);
        if (l == spec.n_layers() - 1) break;
        int pre = tr.pre[size_t(l)];
        int dact;
        switch (spec.activation) {
            case Activation::Softplus:
                dact = t.sigmoid(t.scale(pre, spec.softplus_beta));
                break;
            default:
                throw ValidationError("mlp: tangent pass needs a softplus activation");
        }
        th = t.mul(th, dact);
    }
    return th;
}

// Plain forward without a tape, for inference paths.
inline Tensor mlp_forward_plain(const ParamSet& ps, const std::string& prefix, const MlpSpec& spec,
                                const Tensor& x) {
    if (x.cols() != spec.layer_widths[0]) throw ValidationError("mlp: input width mismatch");
    const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
    Tensor h = x;
    for (int l = 0; l < spec.n_layers(); ++l) {
        if (spec.has_skip(l)) {
            Tensor cat({h.rows(), h.cols() + x.cols()});
            for (int i = 0; i < h.rows(); ++i) {
                for (int j = 0; j < h.cols(); ++j) cat.at(i, j) = h.at(i, j) * inv_sqrt2;
                for (int j = 0; j < x.cols(); ++j) cat.at(i, h.cols() + j) = x.at(i, j) * inv_sqrt2;
            }
            h = std::move(cat);
        }
        const Tensor& w = ps.value(layer_w(prefix, l));
        const Tensor& b = ps.value(layer_b(prefix, l));
        Tensor pre(nlf::matmul(h, w));
        for (int i = 0; i < pre.rows(); ++i)
            for (int j = 0; j < pre.cols(); ++j) pre.at(i, j) += b.at(0, j);
        if (l == spec.n_layers() - 1) {
            h = std::move(pre);
            break;
        }
        switch (spec.activation) {
            case Activation::Relu:
                for (size_t i = 0; i < pre.size(); ++i) pre[i] = std::max(0.0, pre[i]);
                break;
            case Activation::LeakyRelu:
                for (size_t i = 0; i < pre.size(); ++i)
                    if (pre[i] < 0.0) pre[i] *= spec.leaky_slope;
                break;
            case Activation::Softplus:
                for (size_t i = 0; i < pre.size(); ++i) {
                    double bx = spec.softplus_beta * pre[i];
                    pre[i] = bx > 30.0 ? pre[i]
                             : bx < -30.0 ? std::exp(bx) / spec.softplus_beta
                                          : std::log1p(std::exp(bx)) / spec.softplus_beta;
                }
                break;
            case Activation::None: break;
        }
        h = std::move(pre);
    }
    switch (spec.head) {
        case OutputHead::Raw: break;
        case OutputHead::SoftmaxRows: {
            for (int i = 0; i < h.rows(); ++i) {
                double mx = -1e300;
                for (int j = 0; j < h.cols(); ++j) mx = std::max(mx, h.at(i, j));
                double s = 0.0;
                for (int j = 0; j < h.cols(); ++j) s += (h.at(i, j) = std::exp(h.at(i, j) - mx));
                for (int j = 0; j < h.cols(); ++j) h.at(i, j) /= s;
            }
            break;
        }
        case OutputHead::Sigmoid:
            for (size_t i = 0; i < h.size(); ++i)
                h[i] = h[i] >= 0.0 ? 1.0 / (1.0 + std::exp(-h[i]))
                                   : std::exp(h[i]) / (1.0 + std::exp(h[i]));
            break;
    }
    return h;
}

}  // namespace nlf
