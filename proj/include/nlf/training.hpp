// Training orchestration: shape-space auto-decoding, two-stage deformation
// training, similar-shape selection, and the procedural dataset generator
// that makes the whole pipeline testable at desk scale.
#pragma once

#include "nlf/checkpoint.hpp"
#include "nlf/deformation.hpp"
#include "nlf/losses.hpp"

namespace nlf {

inline const char* kMapScaleName = "map_scale";  // learnable scale of the latent-mapping loss

struct TrainConfig {
    int epochs = 1000;
    double lr = 1e-3;
    double decay_factor = 0.5;
    int decay_interval = 500;
    int batch = 2048;              // distance samples per shape step
    double delta_tau = 0.01;       // supervision truncation band
    double sigma_s = 10.0;         // shape latent prior scale
    double sigma_d = 10.0;         // deformation latent prior scale
    double latent_init_var = 0.001;
    LossWeights weights;
    int n_s = 32;                  // shape latent length
    int n_d = 32;                  // deformation latent length
    int k_control = 100;
    int hidden = 64;
    int hidden_layers = 4;         // shape decoder depth
    int pe_order = 8;
    int grid_res = 64;             // mask canvas and decode resolution
    int similar_count = 5;         // second-stage neighbourhood size
    double skin_similarity_weight = 0.1;
    int skin_similarity_samples = 256;
    double plateau_rel = 1e-5;     // early stop: relative change threshold
    int plateau_window = 50;       //             over this many epochs
    bool strict_offset_form = false;
    bool optimize_control_points = true;
    uint64_t seed = 1;

    void validate() const {
        require(epochs > 0 && lr > 0.0 && decay_factor > 0.0 && decay_interval > 0, "training schedule must be positive");
        require(batch > 0 && delta_tau > 0.0 && sigma_s > 0.0 && sigma_d > 0.0, "training scales must be positive");
        require(n_s > 0 && n_d > 0 && hidden > 0 && hidden_layers > 0 && pe_order > 0, "model dimensions must be positive");
        require(k_control >= 1 && k_control <= 1000, "control point count out of range");
        require(grid_res >= 8 && similar_count >= 1 && plateau_window >= 2, "training sizes must be positive");
        require(latent_init_var > 0.0, "latent init variance must be positive");
    }

    ShapeDecoderConfig shape_config() const {
        ShapeDecoderConfig c;
        c.latent_dim = n_s;
        c.hidden = hidden;
        c.hidden_layers = hidden_layers;
        c.pe_order = pe_order;
        return c;
    }
    DeformConfig deform_config() const {
        DeformConfig c;
        c.latent_dim = n_d;
        c.shape_latent_dim = n_s;
        c.k_control = k_control;
        c.hidden = hidden;
        c.pe_order = pe_order;
        c.strict_offset_form = strict_offset_form;
        return c;
    }
};

// ---- datasets ----

struct ShapeSample {
    std::string id;
    Mask2D mask;
};

struct ShapeDataset {
    std::vector<ShapeSample> samples;

    void add(std::string id, Mask2D mask) {
        require(!id.empty() && id.find_first_of(" /\n") == std::string::npos, "sample id must be a plain token");
        for (const auto& s : samples)
            if (s.id == id) throw ValidationError("duplicate sample id: " + id);
        samples.push_back({std::move(id), std::move(mask)});
    }
    int find(const std::string& id) const {
        for (size_t i = 0; i < samples.size(); ++i)
            if (samples[i].id == id) return int(i);
        return -1;
    }
};

struct DeformPair {
    std::string id;
    std::string base_id;
    std::vector<Vec3> cloud;     // rigidly pre-aligned observation of the deformed leaf
    std::string truth_kind;      // generator bookkeeping, empty for real data
    double truth_amount = 0.0;
};

struct DeformDataset {
    std::vector<DeformPair> pairs;

    void add(DeformPair p) {
        require(!p.id.empty() && p.id.find_first_of(" /\n") == std::string::npos, "pair id must be a plain token");
        for (const auto& q : pairs)
            if (q.id == p.id) throw ValidationError("duplicate pair id: " + p.id);
        pairs.push_back(std::move(p));
    }
};

// ---- checkpoints and results ----

inline std::string latent_key_shape(const std::string& id) { return "zs/" + id; }
inline std::string latent_key_deform(const std::string& id) { return "zd/" + id; }

inline Tensor random_latent(int dim, double variance, Rng& rng) {
    Tensor z({1, dim});
    double stddev = std::sqrt(variance);
    for (size_t i = 0; i < z.size(); ++i) z[i] = rng.normal(0.0, stddev);
    return z;
}

inline void stamp_model_meta(Checkpoint& ckpt, const TrainConfig& cfg, const std::string& kind) {
    ckpt.set_meta("kind", kind);
    ckpt.set_meta_int("latent_dim_shape", cfg.n_s);
    ckpt.set_meta_int("latent_dim_deform", cfg.n_d);
    ckpt.set_meta_int("k_control", cfg.k_control);
    ckpt.set_meta_int("hidden", cfg.hidden);
    ckpt.set_meta_int("hidden_layers", cfg.hidden_layers);
    ckpt.set_meta_int("pe_order", cfg.pe_order);
    ckpt.set_meta_int("grid_res", cfg.grid_res);
    ckpt.set_meta_int("strict_offset_form", cfg.strict_offset_form ? 1 : 0);
}

// Model dimensions from checkpoint metadata; refuses silently mismatched
// loads (a K=100 file cannot feed a K=500 run).
inline TrainConfig config_from_checkpoint(const Checkpoint& ckpt, TrainConfig base = {}) {
    base.n_s = int(ckpt.meta_int("latent_dim_shape"));
    base.n_d = int(ckpt.meta_int("latent_dim_deform"));
    base.k_control = int(ckpt.meta_int("k_control"));
    base.hidden = int(ckpt.meta_int("hidden"));
    base.hidden_layers = int(ckpt.meta_int("hidden_layers"));
    base.pe_order = int(ckpt.meta_int("pe_order"));
    base.grid_res = int(ckpt.meta_int("grid_res"));
    base.strict_offset_form = ckpt.meta_int("strict_offset_form") != 0;
    return base;
}

inline void check_checkpoint_kind(const Checkpoint& ckpt, const std::string& kind) {
    if (ckpt.meta_str("kind") != kind)
        throw ValidationError("checkpoint kind is '" + ckpt.meta_str("kind") + "', expected '" + kind + "'");
}

inline void check_k_control(const Checkpoint& ckpt, int expected) {
    int k = int(ckpt.meta_int("k_control"));
    if (k != expected)
        throw ValidationError("checkpoint was trained with " + std::to_string(k) +
                              " control points, run expects " + std::to_string(expected));
}

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossReport> epochs;
    bool diverged = false;   // stopped on a non-finite loss; checkpoint is the last good state
    int epochs_run = 0;
};

// Learning-rate schedule plus plateau detection shared by all trainers.
struct TrainLoop {
    double base_lr, decay_factor, plateau_rel;
    int decay_interval, plateau_window;
    std::vector<double> history;

    double lr(int epoch) const {
        return base_lr * std::pow(decay_factor, double(epoch / decay_interval));
    }
    bool plateaued() const {
        if (int(history.size()) <= plateau_window) return false;
        double then = history[history.size() - 1 - size_t(plateau_window)];
        double now = history.back();
        return std::fabs(then - now) <= plateau_rel * std::max(std::fabs(then), 1e-12);
    }
};

// ---- shape space ----

inline TrainResult train_shape_space(const ShapeDataset& data, const TrainConfig& cfg) {
    cfg.validate();
    require(!data.samples.empty(), "shape training needs at least one sample");
    ShapeDecoderConfig scfg = cfg.shape_config();

    std::vector<SdfGrid2D> grids;
    grids.reserve(data.samples.size());
    std::vector<Mask2D> clean;
    for (const auto& s : data.samples) {
        clean.push_back(cleanup_mask(s.mask));
        grids.push_back(jump_flood_sdf(clean.back()));
    }

    ParamSet ps;
    Rng rng(cfg.seed);
    init_shape_decoder(ps, scfg, rng);
    for (const auto& s : data.samples)
        ps.add(latent_key_shape(s.id), random_latent(cfg.n_s, cfg.latent_init_var, rng));

    TrainLoop loop{cfg.lr, cfg.decay_factor, cfg.plateau_rel, cfg.decay_interval, cfg.plateau_window, {}};
    TrainResult res;
    ParamSet last_good = ps;
    const MlpSpec spec = scfg.mlp();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double sum_sdf = 0.0, sum_sil = 0.0, sum_eik = 0.0, sum_lat = 0.0;
        bool bad = false;
        for (size_t si = 0; si < data.samples.size() && !bad; ++si) {
            const Mask2D& mask = clean[si];
            Rng step_rng = Rng(cfg.seed).fork(uint64_t(epoch) * 1000003u + si);
            auto pts = sample_training_points(grids[si], cfg.batch, step_rng.next_u64());
            const int n = int(pts.size());
            Tensor uv({n, 2}), truth({n, 1}), occ({n, 1});
            for (int i = 0; i < n; ++i) {
                uv.at(i, 0) = pts[size_t(i)].u;
                uv.at(i, 1) = pts[size_t(i)].v;
                truth.at(i, 0) = pts[size_t(i)].d;
                int r = std::min(mask.height - 1, std::max(0, int(pts[size_t(i)].v * mask.height)));
                int c = std::min(mask.width - 1, std::max(0, int(pts[size_t(i)].u * mask.width)));
                occ.at(i, 0) = mask.at(r, c) ? 1.0 : 0.0;
            }

            Tape t;
            TapedMlp mlp = push_mlp_params(t, ps, kShapeDecoderName, spec);
            int z = t.param(latent_key_shape(data.samples[si].id), ps.value(latent_key_shape(data.samples[si].id)));
            int slope = t.param(kMaskSlopeName, ps.value(kMaskSlopeName));
            int pc = t.input(center_points(uv));

            Tensor eu({n, 2}), ev({n, 2});
            for (int i = 0; i < n; ++i) {
                eu.at(i, 0) = 1.0;
                ev.at(i, 1) = 1.0;
            }
            TapedShapeDecode dec = taped_decode_sdf(t, scfg, mlp, z, pc, {t.input(eu), t.input(ev)});
            int pred = dec.trace.raw;
            int l_sdf = taped_loss_sdf(t, pred, t.input(truth), cfg.delta_tau);
            int soft = t.sigmoid(t.mul(pred, t.broadcast_row(slope, n)));
            int l_sil = taped_loss_silhouette(t, soft, t.input(occ));
            int ju = taped_decode_jvp(t, scfg, mlp, dec, 0);
            int jv = taped_decode_jvp(t, scfg, mlp, dec, 1);
            int gnorm = t.sqrt_(t.add_scalar(t.add(t.square(ju), t.square(jv)), 1e-12));
            int l_eik = t.mean_all(t.square(t.add_scalar(gnorm, -1.0)));
            int l_lat = taped_loss_latent(t, z, cfg.sigma_s);

            int total = t.add(t.add(t.scale(l_sdf, cfg.weights.sdf), t.scale(l_sil, cfg.weights.sil)),
                              t.add(t.scale(l_eik, cfg.weights.eik), t.scale(l_lat, cfg.weights.lat)));
            double tv = t.value(total).value();
            if (!is_finite(tv)) {
                bad = true;
                break;
            }
            sum_sdf += t.value(l_sdf).value();
            sum_sil += t.value(l_sil).value();
            sum_eik += t.value(l_eik).value();
            sum_lat += t.value(l_lat).value();
            ps.adam_step(t.named_gradients(total), loop.lr(epoch));
        }
        if (bad) {
            res.diverged = true;
            break;
        }
        double inv = 1.0 / double(data.samples.size());
        LossReport rep;
        rep.add("sdf", sum_sdf * inv, cfg.weights.sdf);
        rep.add("silhouette", sum_sil * inv, cfg.weights.sil);
        rep.add("eikonal", sum_eik * inv, cfg.weights.eik);
        rep.add("latent", sum_lat * inv, cfg.weights.lat);
        res.epochs.push_back(rep);
        loop.history.push_back(rep.total);
        last_good = ps;
        res.epochs_run = epoch + 1;
        if (loop.plateaued()) break;
    }

    res.checkpoint.params = last_good;
    stamp_model_meta(res.checkpoint, cfg, "shape");
    std::string ids;
    for (const auto& s : data.samples) ids += (ids.empty() ? "" : " ") + s.id;
    res.checkpoint.set_meta("ids", ids);
    return res;
}

// ---- deformation, stage 1 ----

// Per-pair constants: the decoded base mesh, its skinning-decoder input
// (positional encoding and shape code never change once z_s is frozen), and
// the registration target.
struct PairContext {
    std::string id;
    Mesh mesh;
    NeighborLists nb;
    Tensor verts;
    Tensor skin_cond;
    std::vector<Vec3> base_points;
    std::vector<Vec3> cloud;
};

inline std::vector<PairContext> build_pair_contexts(const DeformDataset& data,
                                                    const Checkpoint& shape_ckpt,
                                                    const TrainConfig& cfg) {
    check_checkpoint_kind(shape_ckpt, "shape");
    ShapeDecoderConfig scfg = cfg.shape_config();
    std::vector<PairContext> out;
    for (const auto& p : data.pairs) {
        if (!shape_ckpt.params.has(latent_key_shape(p.base_id)))
            throw ValidationError("pair " + p.id + " references base '" + p.base_id +
                                  "' absent from the shape checkpoint");
        require(!p.cloud.empty(), "pair " + p.id + " has an empty target cloud");
        PairContext ctx;
        ctx.id = p.id;
        const Tensor& zs = shape_ckpt.params.value(latent_key_shape(p.base_id));
        ctx.mesh = decoded_mesh(shape_ckpt.params, scfg, zs, cfg.grid_res);
        ctx.nb = vertex_neighbors(ctx.mesh);
        ctx.verts = ctx.mesh.vertex_tensor();
        ctx.skin_cond = assemble_conditioned_input(ctx.verts, zs, cfg.pe_order);
        ctx.base_points = ctx.mesh.vertices;
        ctx.cloud = p.cloud;
        out.push_back(std::move(ctx));
    }
    return out;
}

inline TrainResult train_deformation_stage1(const DeformDataset& data, const Checkpoint& shape_ckpt,
                                            const TrainConfig& cfg) {
    cfg.validate();
    require(!data.pairs.empty(), "deformation training needs at least one pair");
    DeformConfig dcfg = cfg.deform_config();
    std::vector<PairContext> ctxs = build_pair_contexts(data, shape_ckpt, cfg);

    ParamSet ps;
    Rng rng(cfg.seed + 17);
    init_deform_decoders(ps, dcfg, rng);
    ps.add(kMapScaleName, Tensor::scalar(1.0));
    for (const auto& p : data.pairs)
        ps.add(latent_key_deform(p.id), random_latent(cfg.n_d, cfg.latent_init_var, rng));

    TrainLoop loop{cfg.lr, cfg.decay_factor, cfg.plateau_rel, cfg.decay_interval, cfg.plateau_window, {}};
    TrainResult res;
    ParamSet last_good = ps;
    const MlpSpec skin_spec = dcfg.skinning_mlp(), xf_spec = dcfg.transform_mlp();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double sum_cham = 0.0, sum_leng = 0.0, sum_lap = 0.0, sum_map = 0.0, sum_lat = 0.0;
        bool bad = false;
        for (size_t pi = 0; pi < ctxs.size() && !bad; ++pi) {
            PairContext& ctx = ctxs[pi];
            Tape t;
            TapedMlp skin_mlp = push_mlp_params(t, ps, kSkinDecoderName, skin_spec);
            TapedMlp xf_mlp = push_mlp_params(t, ps, kTransformDecoderName, xf_spec);
            int control = cfg.optimize_control_points
                              ? t.param(kControlPointsName, ps.value(kControlPointsName))
                              : t.input(ps.value(kControlPointsName));
            int zd = t.param(latent_key_deform(ctx.id), ps.value(latent_key_deform(ctx.id)));
            int phi = t.param(kMapScaleName, ps.value(kMapScaleName));

            int weights = mlp_forward(t, skin_spec, skin_mlp, t.input(ctx.skin_cond)).out;
            int xf = taped_decode_transforms(t, dcfg, xf_mlp, zd, control);
            int deformed = taped_lbs(t, t.input(ctx.verts), weights, xf, control, dcfg.strict_offset_form);

            int l_cham = taped_chamfer_to_points(t, deformed, ctx.cloud, true);
            int l_leng = taped_loss_edge_length(t, ctx.mesh, deformed);
            int l_lap = taped_loss_laplacian(t, ctx.nb, deformed);
            int cham_base = taped_chamfer_to_points(t, deformed, ctx.base_points, true);
            int l_map = taped_loss_map(t, cham_base, zd, phi);
            int l_lat = taped_loss_latent(t, zd, cfg.sigma_d);

            int total = t.add(
                t.add(t.add(t.scale(l_cham, cfg.weights.cham), t.scale(l_leng, cfg.weights.leng)),
                      t.add(t.scale(l_lap, cfg.weights.lap), t.scale(l_map, cfg.weights.map))),
                t.scale(l_lat, cfg.weights.lat));
            double tv = t.value(total).value();
            if (!is_finite(tv)) {
                bad = true;
                break;
            }
            sum_cham += t.value(l_cham).value();
            sum_leng += t.value(l_leng).value();
            sum_lap += t.value(l_lap).value();
            sum_map += t.value(l_map).value();
            sum_lat += t.value(l_lat).value();
            ps.adam_step(t.named_gradients(total), loop.lr(epoch));
        }
        if (bad) {
            res.diverged = true;
            break;
        }
        double inv = 1.0 / double(ctxs.size());
        LossReport rep;
        rep.add("chamfer", sum_cham * inv, cfg.weights.cham);
        rep.add("edge_length", sum_leng * inv, cfg.weights.leng);
        rep.add("laplacian", sum_lap * inv, cfg.weights.lap);
        rep.add("latent_map", sum_map * inv, cfg.weights.map);
        rep.add("latent", sum_lat * inv, cfg.weights.lat);
        res.epochs.push_back(rep);
        loop.history.push_back(rep.total);
        last_good = ps;
        res.epochs_run = epoch + 1;
        if (loop.plateaued()) break;
    }

    res.checkpoint.params = last_good;
    stamp_model_meta(res.checkpoint, cfg, "deform");
    res.checkpoint.set_meta_int("stage", 1);
    std::string ids;
    for (const auto& p : data.pairs) ids += (ids.empty() ? "" : " ") + p.id;
    res.checkpoint.set_meta("ids", ids);
    return res;
}

// ---- similar-shape selection ----

inline std::vector<std::string> select_similar_shapes(const Mask2D& query, const ShapeDataset& pool,
                                                      int m) {
    require(m >= 1, "need at least one similar shape");
    std::vector<std::pair<double, std::string>> scored;
    for (const auto& s : pool.samples) scored.emplace_back(mask_iou(query, s.mask), s.id);
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    std::vector<std::string> out;
    for (const auto& [iou, id] : scored) {
        out.push_back(id);
        if (int(out.size()) == m) break;
    }
    return out;
}

// ---- deformation, stage 2 ----

// Auxiliary base used only through boundary penalties: its decoded mesh,
// skinning input, and boundary corner table.
struct AuxBase {
    std::string id;
    Mesh mesh;
    Tensor verts;
    Tensor skin_cond;
    Tensor zs;
    BoundaryFaceAngles angles;
};

inline TrainResult train_deformation_stage2(const ShapeDataset& pool, const DeformDataset& data,
                                            const Checkpoint& shape_ckpt,
                                            const Checkpoint& stage1_ckpt, const TrainConfig& cfg) {
    cfg.validate();
    check_checkpoint_kind(stage1_ckpt, "deform");
    check_k_control(stage1_ckpt, cfg.k_control);
    require(!data.pairs.empty(), "deformation training needs at least one pair");
    DeformConfig dcfg = cfg.deform_config();
    ShapeDecoderConfig scfg = cfg.shape_config();
    std::vector<PairContext> ctxs = build_pair_contexts(data, shape_ckpt, cfg);

    // neighbourhoods by mask overlap, excluding each pair's own base
    int m_use = std::min(cfg.similar_count, std::max(0, int(pool.samples.size()) - 1));
    std::map<std::string, AuxBase> aux;
    std::vector<std::vector<std::string>> similar(ctxs.size());
    for (size_t pi = 0; pi < data.pairs.size(); ++pi) {
        const std::string& base_id = data.pairs[pi].base_id;
        int qi = pool.find(base_id);
        require(qi >= 0, "pair base '" + base_id + "' is not in the shape pool");
        auto ranked = select_similar_shapes(pool.samples[size_t(qi)].mask, pool,
                                            std::min(int(pool.samples.size()), m_use + 1));
        for (const auto& id : ranked) {
            if (id == base_id || int(similar[pi].size()) >= m_use) continue;
            similar[pi].push_back(id);
            if (aux.count(id)) continue;
            AuxBase ab;
            ab.id = id;
            ab.zs = shape_ckpt.params.value(latent_key_shape(id));
            ab.mesh = decoded_mesh(shape_ckpt.params, scfg, ab.zs, cfg.grid_res);
            ab.verts = ab.mesh.vertex_tensor();
            ab.skin_cond = assemble_conditioned_input(ab.verts, ab.zs, cfg.pe_order);
            ab.angles = boundary_face_corners(ab.mesh);
            aux.emplace(id, std::move(ab));
        }
    }
    std::vector<Tensor> pair_zs(ctxs.size());
    for (size_t pi = 0; pi < data.pairs.size(); ++pi)
        pair_zs[pi] = shape_ckpt.params.value(latent_key_shape(data.pairs[pi].base_id));

    // continue from stage 1; z_d stays frozen here
    ParamSet ps;
    for (const char* name : {kControlPointsName, kMapScaleName})
        ps.add(name, stage1_ckpt.params.value(name));
    auto copy_prefix = [&](const std::string& prefix) {
        for (const std::string& name : stage1_ckpt.params.names())
            if (name.rfind(prefix + "/", 0) == 0) ps.add(name, stage1_ckpt.params.value(name));
    };
    copy_prefix(kSkinDecoderName);
    copy_prefix(kTransformDecoderName);
    std::vector<Tensor> zd(ctxs.size());
    for (size_t pi = 0; pi < ctxs.size(); ++pi) {
        const std::string key = latent_key_deform(ctxs[pi].id);
        if (!stage1_ckpt.params.has(key))
            throw ValidationError("stage-1 checkpoint lacks the latent for pair " + ctxs[pi].id);
        zd[pi] = stage1_ckpt.params.value(key);
    }

    TrainLoop loop{cfg.lr, cfg.decay_factor, cfg.plateau_rel, cfg.decay_interval, cfg.plateau_window, {}};
    TrainResult res;
    ParamSet last_good = ps;
    const MlpSpec skin_spec = dcfg.skinning_mlp(), xf_spec = dcfg.transform_mlp();

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // shared probe locations for the skinning-similarity penalty
        Rng probe_rng = Rng(cfg.seed + 23).fork(uint64_t(epoch));
        Tensor probes({cfg.skin_similarity_samples, 3});
        for (int i = 0; i < cfg.skin_similarity_samples; ++i) {
            probes.at(i, 0) = probe_rng.uniform();
            probes.at(i, 1) = probe_rng.uniform();
            probes.at(i, 2) = 0.0;
        }

        double sum_cham = 0.0, sum_leng = 0.0, sum_lap = 0.0, sum_map = 0.0, sum_lat = 0.0;
        double sum_sim = 0.0, sum_bound = 0.0, sum_ang = 0.0;
        bool bad = false;
        for (size_t pi = 0; pi < ctxs.size() && !bad; ++pi) {
            PairContext& ctx = ctxs[pi];
            Tape t;
            TapedMlp skin_mlp = push_mlp_params(t, ps, kSkinDecoderName, skin_spec);
            TapedMlp xf_mlp = push_mlp_params(t, ps, kTransformDecoderName, xf_spec);
            int control = t.param(kControlPointsName, ps.value(kControlPointsName));
            int phi = t.param(kMapScaleName, ps.value(kMapScaleName));
            int zd_node = t.input(zd[pi]);

            int weights = mlp_forward(t, skin_spec, skin_mlp, t.input(ctx.skin_cond)).out;
            int xf = taped_decode_transforms(t, dcfg, xf_mlp, zd_node, control);
            int deformed = taped_lbs(t, t.input(ctx.verts), weights, xf, control, dcfg.strict_offset_form);

            int l_cham = taped_chamfer_to_points(t, deformed, ctx.cloud, true);
            int l_leng = taped_loss_edge_length(t, ctx.mesh, deformed);
            int l_lap = taped_loss_laplacian(t, ctx.nb, deformed);
            int cham_base = taped_chamfer_to_points(t, deformed, ctx.base_points, true);
            int l_map = taped_loss_map(t, cham_base, zd_node, phi);
            int l_lat = taped_loss_latent(t, zd_node, cfg.sigma_d);
            int total = t.add(
                t.add(t.add(t.scale(l_cham, cfg.weights.cham), t.scale(l_leng, cfg.weights.leng)),
                      t.add(t.scale(l_lap, cfg.weights.lap), t.scale(l_map, cfg.weights.map))),
                t.scale(l_lat, cfg.weights.lat));

            if (!similar[pi].empty()) {
                int probe_pair = mlp_forward(t, skin_spec, skin_mlp,
                                             t.input(assemble_conditioned_input(probes, pair_zs[pi], cfg.pe_order)))
                                     .out;
                int l_sim = -1, l_bound = -1, l_ang = -1;
                for (const std::string& sid : similar[pi]) {
                    const AuxBase& ab = aux.at(sid);
                    int probe_sim = mlp_forward(t, skin_spec, skin_mlp,
                                                t.input(assemble_conditioned_input(probes, ab.zs, cfg.pe_order)))
                                        .out;
                    int d = t.mean_all(t.square(t.sub(probe_pair, probe_sim)));
                    l_sim = l_sim < 0 ? d : t.add(l_sim, d);

                    int w_aux = mlp_forward(t, skin_spec, skin_mlp, t.input(ab.skin_cond)).out;
                    int def_aux = taped_lbs(t, t.input(ab.verts), w_aux, xf, control, dcfg.strict_offset_form);
                    int b = taped_loss_boundary_length(t, ab.mesh, def_aux);
                    l_bound = l_bound < 0 ? b : t.add(l_bound, b);
                    if (!ab.angles.apex.empty()) {
                        int a = taped_loss_face_angle(t, ab.angles, def_aux);
                        l_ang = l_ang < 0 ? a : t.add(l_ang, a);
                    }
                }
                double inv_m = 1.0 / double(similar[pi].size());
                l_sim = t.scale(l_sim, inv_m);
                l_bound = t.scale(l_bound, inv_m);
                total = t.add(total, t.add(t.scale(l_sim, cfg.skin_similarity_weight),
                                           t.scale(l_bound, cfg.weights.bound)));
                sum_sim += t.value(l_sim).value();
                sum_bound += t.value(l_bound).value();
                if (l_ang >= 0) {
                    l_ang = t.scale(l_ang, inv_m);
                    total = t.add(total, t.scale(l_ang, cfg.weights.ang));
                    sum_ang += t.value(l_ang).value();
                }
            }

            double tv = t.value(total).value();
            if (!is_finite(tv)) {
                bad = true;
                break;
            }
            sum_cham += t.value(l_cham).value();
            sum_leng += t.value(l_leng).value();
            sum_lap += t.value(l_lap).value();
            sum_map += t.value(l_map).value();
            sum_lat += t.value(l_lat).value();
            ps.adam_step(t.named_gradients(total), loop.lr(epoch));
        }
        if (bad) {
            res.diverged = true;
            break;
        }
        double inv = 1.0 / double(ctxs.size());
        LossReport rep;
        rep.add("chamfer", sum_cham * inv, cfg.weights.cham);
        rep.add("edge_length", sum_leng * inv, cfg.weights.leng);
        rep.add("laplacian", sum_lap * inv, cfg.weights.lap);
        rep.add("latent_map", sum_map * inv, cfg.weights.map);
        rep.add("latent", sum_lat * inv, cfg.weights.lat);
        rep.add("skin_similarity", sum_sim * inv, cfg.skin_similarity_weight);
        rep.add("boundary", sum_bound * inv, cfg.weights.bound);
        rep.add("face_angle", sum_ang * inv, cfg.weights.ang);
        res.epochs.push_back(rep);
        loop.history.push_back(rep.total);
        last_good = ps;
        res.epochs_run = epoch + 1;
        if (loop.plateaued()) break;
    }

    // carry the frozen latents forward so the checkpoint stays self-contained
    for (size_t pi = 0; pi < ctxs.size(); ++pi)
        last_good.add(latent_key_deform(ctxs[pi].id), zd[pi]);
    res.checkpoint.params = last_good;
    stamp_model_meta(res.checkpoint, cfg, "deform");
    res.checkpoint.set_meta_int("stage", 2);
    res.checkpoint.set_meta("ids", stage1_ckpt.meta_str("ids"));
    return res;
}

// ---- synthetic data ----

struct SyntheticData {
    ShapeDataset shapes;
    DeformDataset pairs;
};

// Procedural leaf silhouette: a superellipse blade with serrated edges and a
// petiole notch at the stem end.
inline Mask2D synthetic_leaf_mask(int resolution, Rng& rng) {
    double a = rng.uniform(0.30, 0.42);
    double b = rng.uniform(0.15, 0.28);
    double power = rng.uniform(1.6, 3.0);
    double serr_amp = rng.uniform(0.015, 0.05);
    int serr_count = 6 + int(rng.uniform_index(9));
    double serr_phase = rng.uniform(0.0, 2.0 * kPi);
    double notch_half = rng.uniform(0.015, 0.035);
    double notch_start = rng.uniform(0.75, 0.9);

    Mask2D mask(resolution, resolution);
    for (int r = 0; r < resolution; ++r)
        for (int c = 0; c < resolution; ++c) {
            double x = (c + 0.5) / resolution - 0.5;
            double y = (r + 0.5) / resolution - 0.5;
            double theta = std::atan2(y, x);
            double edge = 1.0 + serr_amp * std::sin(serr_count * theta + serr_phase);
            double v = std::pow(std::fabs(x / a), power) + std::pow(std::fabs(y / b), power);
            bool in = v <= edge;
            if (x < -a * notch_start && std::fabs(y) < notch_half) in = false;  // petiole notch
            mask.at(r, c) = in ? 1 : 0;
        }
    Mask2D cleaned = cleanup_mask(mask);
    require(cleaned.count_foreground() >= 50, "synthetic mask degenerated");
    return cleaned;
}

// Analytic deformations about the blade centroid. The fold is an isometry
// about the midrib line, the cup a quadratic lift, the twist a rotation that
// grows along the midrib.
inline std::vector<Vec3> apply_synthetic_deformation(const std::vector<Vec3>& verts,
                                                     const std::string& kind, double amount) {
    Vec3 c0;
    for (const Vec3& v : verts) c0 += v;
    c0 = c0 * (1.0 / double(verts.size()));
    std::vector<Vec3> out(verts.size());
    for (size_t i = 0; i < verts.size(); ++i) {
        Vec3 p = verts[i];
        double dx = p.x - c0.x, dy = p.y - c0.y;
        if (kind == "fold") {
            out[i] = {p.x, c0.y + dy * std::cos(amount), std::fabs(dy) * std::sin(amount)};
        } else if (kind == "cup") {
            out[i] = {p.x, p.y, amount * (dx * dx + dy * dy)};
        } else if (kind == "twist") {
            double ang = amount * dx;
            out[i] = {p.x, c0.y + dy * std::cos(ang), dy * std::sin(ang)};
        } else {
            throw ValidationError("unknown synthetic deformation kind: " + kind);
        }
    }
    return out;
}

inline SyntheticData generate_synthetic_dataset(int n, uint64_t seed, int resolution = 64) {
    require(n >= 1 && n <= 1000, "synthetic dataset size out of range");
    SyntheticData data;
    const char* kinds[3] = {"fold", "cup", "twist"};
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng(seed).fork(uint64_t(i));
        char id[32];
        std::snprintf(id, sizeof(id), "leaf_%03d", i);
        Mask2D mask = synthetic_leaf_mask(resolution, rng);
        data.shapes.add(id, mask);

        Mesh mesh = extract_base_mesh(mask);
        DeformPair pair;
        std::snprintf(id, sizeof(id), "pair_%03d", i);
        pair.id = id;
        pair.base_id = data.shapes.samples.back().id;
        pair.truth_kind = kinds[i % 3];
        double lo[3] = {0.25, 0.6, 0.6}, hi[3] = {0.9, 1.6, 1.5};
        pair.truth_amount = rng.uniform(lo[i % 3], hi[i % 3]);
        pair.cloud = apply_synthetic_deformation(mesh.vertices, pair.truth_kind, pair.truth_amount);
        data.pairs.add(std::move(pair));
    }
    return data;
}

}  // namespace nlf
