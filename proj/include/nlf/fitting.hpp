// Reconstruction from observations: 3D-grid encoders that invert clouds to
// latent codes, direct latent refinement against the observation, and
// multi-leaf fitting with a shared anchor code.
#pragma once

#include "nlf/training.hpp"

namespace nlf {

inline const char* kShapeEncoderName = "enc_s";
inline const char* kDeformEncoderName = "enc_d";

struct EncoderConfig {
    int grid_res = 32;
    double delta_grid = 0.1;                  // truncation band of the input grids
    std::vector<int> channels = {8, 16, 32, 64};
    int kernel = 3;

    void validate() const {
        require(!channels.empty(), "encoder needs at least one stage");
        int r = grid_res;
        for (size_t i = 0; i < channels.size(); ++i) {
            require(channels[i] > 0, "channel widths must be positive");
            require(r % 2 == 0, "grid resolution must halve at every stage");
            r /= 2;
        }
        require(r >= 1, "too many stages for this grid resolution");
        require(kernel == 3, "encoder uses 3x3x3 kernels");
        require(delta_grid > 0.0, "truncation width must be positive");
    }
    // flattened feature length after the last stride-2 stage
    int head_width() const {
        int r = grid_res >> int(channels.size());
        return channels.back() * r * r * r;
    }
};

inline void init_grid_encoder(ParamSet& ps, const std::string& prefix, const EncoderConfig& cfg,
                              int out_dim, Rng& rng) {
    cfg.validate();
    int cin = 1;
    for (size_t i = 0; i < cfg.channels.size(); ++i) {
        int cout = cfg.channels[i];
        Tensor w({cout, cin, cfg.kernel, cfg.kernel, cfg.kernel});
        double std = std::sqrt(2.0 / double(cin * cfg.kernel * cfg.kernel * cfg.kernel));
        for (size_t j = 0; j < w.size(); ++j) w[j] = rng.normal(0.0, std);
        ps.add(prefix + "/w" + std::to_string(i), std::move(w));
        ps.add(prefix + "/b" + std::to_string(i), Tensor({1, cout}));
        cin = cout;
    }
    Tensor fw({cfg.head_width(), out_dim});
    double std = std::sqrt(2.0 / double(cfg.head_width()));
    for (size_t j = 0; j < fw.size(); ++j) fw[j] = rng.normal(0.0, std);
    ps.add(prefix + "/fc_w", std::move(fw));
    ps.add(prefix + "/fc_b", Tensor({1, out_dim}));
}

struct TapedEncoder {
    std::vector<int> w, b;
    int fc_w = -1, fc_b = -1;
};

inline TapedEncoder push_encoder_params(Tape& t, const ParamSet& ps, const std::string& prefix,
                                        const EncoderConfig& cfg, bool trainable) {
    TapedEncoder e;
    for (size_t i = 0; i < cfg.channels.size(); ++i) {
        std::string wn = prefix + "/w" + std::to_string(i), bn = prefix + "/b" + std::to_string(i);
        e.w.push_back(trainable ? t.param(wn, ps.value(wn)) : t.input(ps.value(wn)));
        e.b.push_back(trainable ? t.param(bn, ps.value(bn)) : t.input(ps.value(bn)));
    }
    std::string wn = prefix + "/fc_w", bn = prefix + "/fc_b";
    e.fc_w = trainable ? t.param(wn, ps.value(wn)) : t.input(ps.value(wn));
    e.fc_b = trainable ? t.param(bn, ps.value(bn)) : t.input(ps.value(bn));
    return e;
}

inline int encoder_forward(Tape& t, const TapedEncoder& e, const EncoderConfig& cfg, int grid) {
    int h = grid;
    for (size_t i = 0; i < e.w.size(); ++i)
        h = t.leaky_relu(t.channel_bias(t.conv3d(h, e.w[i], 2, 1), e.b[i]), 0.01);
    h = t.reshape(h, {1, cfg.head_width()});
    return t.add(t.matmul(h, e.fc_w), e.fc_b);
}

// Grid values rescaled to [0, 1]; saturated cells sit at 1.
inline Tensor grid_to_tensor(const SdfGrid3D& g) {
    Tensor out({1, g.resolution, g.resolution, g.resolution});
    for (size_t i = 0; i < g.values.size(); ++i) out[i] = g.values[i] / g.delta;
    return out;
}

// ---- encoder training ----

struct EncoderTrainResult {
    Checkpoint checkpoint;
    double train_loss = 0.0;      // mean latent-recovery loss over training pairs
    double heldout_loss = -1.0;   // mean over held-out pairs, -1 when none were held out
    std::vector<std::string> heldout_ids;
    int epochs_run = 0;
};

inline EncoderTrainResult train_inversion_encoders(const Checkpoint& shape_ckpt,
                                                   const Checkpoint& deform_ckpt,
                                                   const DeformDataset& data,
                                                   const TrainConfig& cfg,
                                                   const EncoderConfig& ecfg,
                                                   int holdout_every = 5) {
    cfg.validate();
    ecfg.validate();
    check_checkpoint_kind(shape_ckpt, "shape");
    check_checkpoint_kind(deform_ckpt, "deform");
    require(!data.pairs.empty(), "encoder training needs pairs");

    struct Item {
        Tensor grid, zs, zd;
        std::string id;
    };
    std::vector<Item> items;
    for (size_t i = 0; i < data.pairs.size(); ++i) {
        const DeformPair& p = data.pairs[i];
        std::string zs_key = latent_key_shape(p.base_id), zd_key = latent_key_deform(p.id);
        if (!shape_ckpt.params.has(zs_key) || !deform_ckpt.params.has(zd_key))
            throw ValidationError("pair " + p.id + " has no latent table entry to supervise with");
        Item it;
        it.grid = grid_to_tensor(backproject_to_grid(p.cloud, ecfg.grid_res, ecfg.delta_grid));
        it.zs = shape_ckpt.params.value(zs_key);
        it.zd = deform_ckpt.params.value(zd_key);
        it.id = p.id;
        items.push_back(std::move(it));
    }

    int n_s = int(shape_ckpt.meta_int("latent_dim_shape"));
    int n_d = int(deform_ckpt.meta_int("latent_dim_deform"));
    ParamSet ps;
    Rng rng(cfg.seed + 41);
    init_grid_encoder(ps, kShapeEncoderName, ecfg, n_s, rng);
    init_grid_encoder(ps, kDeformEncoderName, ecfg, n_d, rng);

    std::vector<size_t> train_idx, held_idx;
    for (size_t i = 0; i < items.size(); ++i) {
        if (holdout_every > 0 && items.size() > size_t(holdout_every) &&
            i % size_t(holdout_every) == size_t(holdout_every) - 1)
            held_idx.push_back(i);
        else
            train_idx.push_back(i);
    }

    TrainLoop loop{cfg.lr, cfg.decay_factor, cfg.plateau_rel, cfg.decay_interval, cfg.plateau_window, {}};
    EncoderTrainResult res;
    ParamSet last_good = ps;
    auto pair_loss = [&](Tape& t, const TapedEncoder& es, const TapedEncoder& ed, const Item& it) {
        int g = t.input(it.grid);
        int ls = t.sum_all(t.square(t.sub(encoder_forward(t, es, ecfg, g), t.input(it.zs))));
        int ld = t.sum_all(t.square(t.sub(encoder_forward(t, ed, ecfg, g), t.input(it.zd))));
        return t.add(ls, ld);
    };

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double sum = 0.0;
        bool bad = false;
        for (size_t i : train_idx) {
            Tape t;
            TapedEncoder es = push_encoder_params(t, ps, kShapeEncoderName, ecfg, true);
            TapedEncoder ed = push_encoder_params(t, ps, kDeformEncoderName, ecfg, true);
            int loss = pair_loss(t, es, ed, items[i]);
            double lv = t.value(loss).value();
            if (!is_finite(lv)) {
                bad = true;
                break;
            }
            sum += lv;
            ps.adam_step(t.named_gradients(loss), loop.lr(epoch));
        }
        if (bad) break;
        res.train_loss = sum / double(train_idx.size());
        loop.history.push_back(res.train_loss);
        last_good = ps;
        res.epochs_run = epoch + 1;
        if (loop.plateaued()) break;
    }
    ps = last_good;

    if (!held_idx.empty()) {
        double sum = 0.0;
        for (size_t i : held_idx) {
            Tape t;
            TapedEncoder es = push_encoder_params(t, ps, kShapeEncoderName, ecfg, false);
            TapedEncoder ed = push_encoder_params(t, ps, kDeformEncoderName, ecfg, false);
            sum += t.value(pair_loss(t, es, ed, items[i])).value();
            res.heldout_ids.push_back(items[i].id);
        }
        res.heldout_loss = sum / double(held_idx.size());
    }

    res.checkpoint.params = ps;
    res.checkpoint.set_meta("kind", "encoder");
    res.checkpoint.set_meta_int("enc_grid_res", ecfg.grid_res);
    res.checkpoint.set_meta("delta_grid", format_double(ecfg.delta_grid));
    res.checkpoint.set_meta_int("latent_dim_shape", n_s);
    res.checkpoint.set_meta_int("latent_dim_deform", n_d);
    std::string ch;
    for (int c : ecfg.channels) ch += (ch.empty() ? "" : " ") + std::to_string(c);
    res.checkpoint.set_meta("channels", ch);
    return res;
}

inline EncoderConfig encoder_config_from_checkpoint(const Checkpoint& ckpt) {
    check_checkpoint_kind(ckpt, "encoder");
    EncoderConfig e;
    e.grid_res = int(ckpt.meta_int("enc_grid_res"));
    e.delta_grid = std::stod(ckpt.meta_str("delta_grid"));
    e.channels.clear();
    std::istringstream ss(ckpt.meta_str("channels"));
    int c;
    while (ss >> c) e.channels.push_back(c);
    e.validate();
    return e;
}

// ---- inversion ----

struct InvertResult {
    Tensor z_s, z_d;
    bool low_confidence = false;  // grid carried no structure (fully saturated)
};

inline InvertResult invert_latents(const SdfGrid3D& grid, const Checkpoint& enc_ckpt) {
    EncoderConfig ecfg = encoder_config_from_checkpoint(enc_ckpt);
    if (grid.resolution != ecfg.grid_res)
        throw ValidationError("grid resolution " + std::to_string(grid.resolution) +
                              " does not match encoder resolution " + std::to_string(ecfg.grid_res));
    InvertResult out;
    double lowest = grid.delta;
    for (double v : grid.values) lowest = std::min(lowest, v);
    out.low_confidence = lowest >= grid.delta * (1.0 - 1e-9);

    Tape t;
    TapedEncoder es = push_encoder_params(t, enc_ckpt.params, kShapeEncoderName, ecfg, false);
    TapedEncoder ed = push_encoder_params(t, enc_ckpt.params, kDeformEncoderName, ecfg, false);
    int g = t.input(grid_to_tensor(grid));
    out.z_s = t.value(encoder_forward(t, es, ecfg, g));
    out.z_d = t.value(encoder_forward(t, ed, ecfg, g));
    return out;
}

// ---- refinement ----

struct FitConfig {
    int iterations = 300;
    double lr = 1e-3;
    double decay_factor = 0.5;
    int decay_interval = 50;
    double sigma_b = 10.0;        // prior scale on the shape code
    double sigma_d = 10.0;        // prior scale on the deformation code
    double anchor_weight = 0.1;
    double delta_grid = 0.1;
    bool joint_updates = true;    // false alternates shape/deformation steps
    uint64_t seed = 1;

    void validate() const {
        require(iterations > 0 && lr > 0.0 && decay_factor > 0.0 && decay_interval > 0, "fit schedule must be positive");
        require(sigma_b > 0.0 && sigma_d > 0.0 && anchor_weight >= 0.0, "fit scales must be positive");
    }
};

struct FitResult {
    Tensor z_s, z_d;
    Mesh mesh;                       // deformed mesh of the best iterate
    double residual = 0.0;           // mean two-sided point distance to the observation
    int iterations = 0;
    std::vector<double> best_trace;  // best-so-far total loss, non-increasing
};

inline TapedMlp push_mlp_frozen(Tape& t, const ParamSet& ps, const std::string& prefix,
                                const MlpSpec& spec) {
    TapedMlp m;
    for (int l = 0; l < spec.n_layers(); ++l) {
        m.w.push_back(t.input(ps.value(layer_w(prefix, l))));
        m.b.push_back(t.input(ps.value(layer_b(prefix, l))));
    }
    return m;
}

// Gradient descent on the two latent codes only; decoder weights enter the
// tape as constants. The base mesh is re-extracted every iteration, so the
// shape code steers the fit through the skinning conditioning while the
// geometry tracks its current decoded silhouette.
inline FitResult refine_fit(const Tensor& z_s0, const Tensor& z_d0, const std::vector<Vec3>& cloud,
                            const Checkpoint& shape_ckpt, const Checkpoint& deform_ckpt,
                            const FitConfig& cfg, const Tensor* anchor = nullptr) {
    cfg.validate();
    check_checkpoint_kind(shape_ckpt, "shape");
    check_checkpoint_kind(deform_ckpt, "deform");
    require(!cloud.empty(), "observation cloud is empty");
    TrainConfig scfg_base = config_from_checkpoint(shape_ckpt);
    TrainConfig dcfg_base = config_from_checkpoint(deform_ckpt);
    ShapeDecoderConfig scfg = scfg_base.shape_config();
    DeformConfig dcfg = dcfg_base.deform_config();
    const int mesh_res = scfg_base.grid_res;

    ParamSet ps;
    ps.add("fit/z_s", z_s0);
    ps.add("fit/z_d", z_d0);

    FitResult best;
    double best_loss = std::numeric_limits<double>::infinity();
    int degenerate_resets = 0;
    const MlpSpec skin_spec = dcfg.skinning_mlp(), xf_spec = dcfg.transform_mlp();

    for (int it = 0; it < cfg.iterations; ++it) {
        Mesh mesh;
        try {
            mesh = decoded_mesh(shape_ckpt.params, scfg, ps.value("fit/z_s"), mesh_res);
        } catch (const NumericalError&) {
            if (++degenerate_resets > 5)
                throw NumericalError("fit aborted: shape code kept decoding to a degenerate mask");
            Tensor z = ps.value("fit/z_s");
            for (size_t i = 0; i < z.size(); ++i) z[i] *= 0.5;
            ps.entry("fit/z_s").value = z;
            --it;
            continue;
        }

        Tape t;
        TapedMlp skin_mlp = push_mlp_frozen(t, deform_ckpt.params, kSkinDecoderName, skin_spec);
        TapedMlp xf_mlp = push_mlp_frozen(t, deform_ckpt.params, kTransformDecoderName, xf_spec);
        int control = t.input(deform_ckpt.params.value(kControlPointsName));
        int zs = t.param("fit/z_s", ps.value("fit/z_s"));
        int zd = t.param("fit/z_d", ps.value("fit/z_d"));

        Tensor verts = mesh.vertex_tensor();
        int skin_in = taped_conditioned_input(t, t.input(verts), zs, dcfg.pe_order);
        int weights = mlp_forward(t, skin_spec, skin_mlp, skin_in).out;
        int xf = taped_decode_transforms(t, dcfg, xf_mlp, zd, control);
        int deformed = taped_lbs(t, t.input(verts), weights, xf, control, dcfg.strict_offset_form);

        int l_cham = taped_chamfer_to_points(t, deformed, cloud, true);
        int l_reg = t.add(taped_loss_latent(t, zs, cfg.sigma_b), taped_loss_latent(t, zd, cfg.sigma_d));
        int total = t.add(l_cham, l_reg);
        if (anchor != nullptr && cfg.anchor_weight > 0.0)
            total = t.add(total, t.scale(taped_loss_anchor(t, zs, t.input(*anchor)), cfg.anchor_weight));

        double tv = t.value(total).value();
        if (is_finite(tv) && tv < best_loss) {
            best_loss = tv;
            best.z_s = ps.value("fit/z_s");
            best.z_d = ps.value("fit/z_d");
            best.mesh = mesh;
            best.mesh.set_vertices(t.value(deformed));
            best.residual = metric_chamfer_l2(cloud, best.mesh.vertices);
        }
        best.best_trace.push_back(best_loss);
        best.iterations = it + 1;

        auto grads = t.named_gradients(total);
        if (!cfg.joint_updates) grads.erase(it % 2 == 0 ? "fit/z_d" : "fit/z_s");
        double lr = cfg.lr * std::pow(cfg.decay_factor, double(it / cfg.decay_interval));
        ps.adam_step(grads, lr);
    }
    require(is_finite(best_loss), "fit never produced a finite loss");
    return best;
}

// ---- multi-leaf fitting ----

struct KMeansResult {
    std::vector<int> assign;
    std::vector<std::vector<double>> centers;
    double inertia = 0.0;
};

inline KMeansResult kmeans(const std::vector<std::vector<double>>& xs, int k, int restarts,
                           uint64_t seed) {
    require(k >= 1 && int(xs.size()) >= k, "k-means needs at least k points");
    const int n = int(xs.size()), dim = int(xs[0].size());
    auto dist2 = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (int d = 0; d < dim; ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
        return s;
    };
    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (int r = 0; r < restarts; ++r) {
        Rng rng = Rng(seed).fork(uint64_t(r) + 101);
        // distinct initial centres
        std::vector<int> pick;
        while (int(pick.size()) < k) {
            int c = int(rng.uniform_index(uint64_t(n)));
            if (std::find(pick.begin(), pick.end(), c) == pick.end()) pick.push_back(c);
        }
        std::vector<std::vector<double>> centers;
        for (int c : pick) centers.push_back(xs[size_t(c)]);
        std::vector<int> assign(size_t(n), -1);
        for (int iter = 0; iter < 100; ++iter) {
            bool changed = false;
            for (int i = 0; i < n; ++i) {
                int arg = 0;
                double bd = dist2(xs[size_t(i)], centers[0]);
                for (int c = 1; c < k; ++c) {
                    double d = dist2(xs[size_t(i)], centers[size_t(c)]);
                    if (d < bd) {
                        bd = d;
                        arg = c;
                    }
                }
                if (assign[size_t(i)] != arg) {
                    assign[size_t(i)] = arg;
                    changed = true;
                }
            }
            if (!changed && iter > 0) break;
            for (int c = 0; c < k; ++c) {
                std::vector<double> mu(size_t(dim), 0.0);
                int count = 0;
                for (int i = 0; i < n; ++i)
                    if (assign[size_t(i)] == c) {
                        for (int d = 0; d < dim; ++d) mu[size_t(d)] += xs[size_t(i)][size_t(d)];
                        ++count;
                    }
                if (count == 0) {
                    // revive on the point farthest from its centre
                    int far = 0;
                    double fd = -1.0;
                    for (int i = 0; i < n; ++i) {
                        double d = dist2(xs[size_t(i)], centers[size_t(assign[size_t(i)])]);
                        if (d > fd) {
                            fd = d;
                            far = i;
                        }
                    }
                    centers[size_t(c)] = xs[size_t(far)];
                } else {
                    for (int d = 0; d < dim; ++d) centers[size_t(c)][size_t(d)] = mu[size_t(d)] / count;
                }
            }
        }
        double inertia = 0.0;
        for (int i = 0; i < n; ++i) inertia += dist2(xs[size_t(i)], centers[size_t(assign[size_t(i)])]);
        if (inertia < best.inertia - 1e-15) {
            best.inertia = inertia;
            best.assign = assign;
            best.centers = centers;
        }
    }
    return best;
}

// Anchor code: with >= 3 instances, k-means the inverted shape codes and take
// the largest cluster's member nearest its centroid; otherwise the medoid.
inline Tensor select_anchor_latent(const std::vector<Tensor>& codes, uint64_t seed) {
    require(!codes.empty(), "no instances to anchor");
    const int n = int(codes.size());
    if (n == 1) return codes[0];
    std::vector<std::vector<double>> xs;
    for (const Tensor& z : codes) xs.emplace_back(z.data(), z.data() + z.size());
    auto dist2 = [&](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (size_t d = 0; d < a.size(); ++d) s += (a[d] - b[d]) * (a[d] - b[d]);
        return s;
    };
    if (n < 3) {
        int best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int j = 0; j < n; ++j) s += dist2(xs[size_t(i)], xs[size_t(j)]);
            if (s < bd) {
                bd = s;
                best = i;
            }
        }
        return codes[size_t(best)];
    }
    KMeansResult km = kmeans(xs, 3, 20, seed);
    std::array<int, 3> counts{0, 0, 0};
    for (int a : km.assign) counts[size_t(a)]++;
    int cluster = 0;
    for (int c = 1; c < 3; ++c)
        if (counts[size_t(c)] > counts[size_t(cluster)]) cluster = c;
    int best = -1;
    double bd = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
        if (km.assign[size_t(i)] != cluster) continue;
        double d = dist2(xs[size_t(i)], km.centers[size_t(cluster)]);
        if (d < bd) {
            bd = d;
            best = i;
        }
    }
    return codes[size_t(best)];
}

inline std::vector<FitResult> fit_multi_leaf(const std::vector<std::vector<Vec3>>& instances,
                                             const Checkpoint& shape_ckpt,
                                             const Checkpoint& deform_ckpt,
                                             const Checkpoint& enc_ckpt, const FitConfig& cfg,
                                             bool species_shared = true) {
    require(!instances.empty(), "need at least one instance");
    EncoderConfig ecfg = encoder_config_from_checkpoint(enc_ckpt);
    std::vector<InvertResult> inits;
    for (const auto& cloud : instances)
        inits.push_back(
            invert_latents(backproject_to_grid(cloud, ecfg.grid_res, ecfg.delta_grid), enc_ckpt));

    const Tensor* anchor = nullptr;
    Tensor anchor_store;
    if (species_shared) {
        std::vector<Tensor> codes;
        for (const auto& r : inits) codes.push_back(r.z_s);
        anchor_store = select_anchor_latent(codes, cfg.seed);
        anchor = &anchor_store;
    }
    std::vector<FitResult> out;
    for (size_t i = 0; i < instances.size(); ++i)
        out.push_back(refine_fit(inits[i].z_s, inits[i].z_d, instances[i], shape_ckpt, deform_ckpt,
                                 cfg, anchor));
    return out;
}

}  // namespace nlf
