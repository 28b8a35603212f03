// Command-line surface: dataset synthesis, training, registration, fitting,
// generation, and evaluation. Every run ends by writing a manifest with the
// effective configuration and the hash of each artifact.
#include <CLI11.hpp>

#include <chrono>

#include "nlf/nlf.hpp"

namespace {

constexpr const char* kVersion = "0.1.0";

using Clock = std::chrono::steady_clock;

std::string join_args(int argc, char** argv) {
    std::string s;
    for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
    return s;
}

// ---- config plumbing ----

void apply_config_entry(nlf::TrainConfig& cfg, const std::string& key, const std::string& value) {
    auto as_int = [&]() {
        try {
            return std::stoll(value);
        } catch (const std::exception&) {
            throw nlf::ValidationError("config key '" + key + "' needs an integer, got '" + value + "'");
        }
    };
    auto as_double = [&]() {
        try {
            return std::stod(value);
        } catch (const std::exception&) {
            throw nlf::ValidationError("config key '" + key + "' needs a number, got '" + value + "'");
        }
    };
    if (key == "epochs") cfg.epochs = int(as_int());
    else if (key == "lr") cfg.lr = as_double();
    else if (key == "decay_factor") cfg.decay_factor = as_double();
    else if (key == "decay_interval") cfg.decay_interval = int(as_int());
    else if (key == "batch") cfg.batch = int(as_int());
    else if (key == "delta_tau") cfg.delta_tau = as_double();
    else if (key == "sigma_s") cfg.sigma_s = as_double();
    else if (key == "sigma_d") cfg.sigma_d = as_double();
    else if (key == "latent_init_var") cfg.latent_init_var = as_double();
    else if (key == "n_s") cfg.n_s = int(as_int());
    else if (key == "n_d") cfg.n_d = int(as_int());
    else if (key == "k_control") cfg.k_control = int(as_int());
    else if (key == "hidden") cfg.hidden = int(as_int());
    else if (key == "hidden_layers") cfg.hidden_layers = int(as_int());
    else if (key == "pe_order") cfg.pe_order = int(as_int());
    else if (key == "grid_res") cfg.grid_res = int(as_int());
    else if (key == "similar_count") cfg.similar_count = int(as_int());
    else if (key == "skin_similarity_weight") cfg.skin_similarity_weight = as_double();
    else if (key == "skin_similarity_samples") cfg.skin_similarity_samples = int(as_int());
    else if (key == "plateau_rel") cfg.plateau_rel = as_double();
    else if (key == "plateau_window") cfg.plateau_window = int(as_int());
    else if (key == "strict_offset_form") cfg.strict_offset_form = as_int() != 0;
    else if (key == "optimize_control_points") cfg.optimize_control_points = as_int() != 0;
    else if (key == "seed") cfg.seed = uint64_t(as_int());
    else if (key == "w_sdf") cfg.weights.sdf = as_double();
    else if (key == "w_sil") cfg.weights.sil = as_double();
    else if (key == "w_eik") cfg.weights.eik = as_double();
    else if (key == "w_lat") cfg.weights.lat = as_double();
    else if (key == "w_cham") cfg.weights.cham = as_double();
    else if (key == "w_leng") cfg.weights.leng = as_double();
    else if (key == "w_lap") cfg.weights.lap = as_double();
    else if (key == "w_map") cfg.weights.map = as_double();
    else if (key == "w_bound") cfg.weights.bound = as_double();
    else if (key == "w_ang") cfg.weights.ang = as_double();
    else if (key == "w_anc") cfg.weights.anc = as_double();
    else throw nlf::ValidationError("unknown config key: " + key);
}

std::vector<std::pair<std::string, std::string>> config_snapshot(const nlf::TrainConfig& cfg) {
    using nlf::format_double;
    std::vector<std::pair<std::string, std::string>> out = {
        {"batch", std::to_string(cfg.batch)},
        {"decay_factor", format_double(cfg.decay_factor)},
        {"decay_interval", std::to_string(cfg.decay_interval)},
        {"delta_tau", format_double(cfg.delta_tau)},
        {"epochs", std::to_string(cfg.epochs)},
        {"grid_res", std::to_string(cfg.grid_res)},
        {"hidden", std::to_string(cfg.hidden)},
        {"hidden_layers", std::to_string(cfg.hidden_layers)},
        {"k_control", std::to_string(cfg.k_control)},
        {"latent_init_var", format_double(cfg.latent_init_var)},
        {"lr", format_double(cfg.lr)},
        {"n_d", std::to_string(cfg.n_d)},
        {"n_s", std::to_string(cfg.n_s)},
        {"optimize_control_points", cfg.optimize_control_points ? "1" : "0"},
        {"pe_order", std::to_string(cfg.pe_order)},
        {"plateau_rel", format_double(cfg.plateau_rel)},
        {"plateau_window", std::to_string(cfg.plateau_window)},
        {"seed", std::to_string(cfg.seed)},
        {"sigma_d", format_double(cfg.sigma_d)},
        {"sigma_s", format_double(cfg.sigma_s)},
        {"similar_count", std::to_string(cfg.similar_count)},
        {"skin_similarity_samples", std::to_string(cfg.skin_similarity_samples)},
        {"skin_similarity_weight", format_double(cfg.skin_similarity_weight)},
        {"strict_offset_form", cfg.strict_offset_form ? "1" : "0"},
        {"w_anc", format_double(cfg.weights.anc)},
        {"w_ang", format_double(cfg.weights.ang)},
        {"w_bound", format_double(cfg.weights.bound)},
        {"w_cham", format_double(cfg.weights.cham)},
        {"w_eik", format_double(cfg.weights.eik)},
        {"w_lap", format_double(cfg.weights.lap)},
        {"w_lat", format_double(cfg.weights.lat)},
        {"w_leng", format_double(cfg.weights.leng)},
        {"w_map", format_double(cfg.weights.map)},
        {"w_sdf", format_double(cfg.weights.sdf)},
        {"w_sil", format_double(cfg.weights.sil)},
    };
    return out;
}

// Flags shared by the training-style commands. Values only override the
// config file when the flag was actually given.
struct TrainFlags {
    int epochs = 0, k_control = 0, latent_dim = 0, grid_res = 0, batch = 0, hidden = 0;
    int stage = 1, similar_count = 0;
    double lr = 0.0;
    uint64_t seed = 0;
    std::string config_path;

    void attach(CLI::App* c) {
        c->add_option("--config", config_path, "flat key = value config file");
        c->add_option("--epochs", epochs, "training epochs");
        c->add_option("--lr", lr, "learning rate");
        c->add_option("--k-control", k_control, "control point count");
        c->add_option("--latent-dim", latent_dim, "shape and deformation latent length");
        c->add_option("--grid-res", grid_res, "mask canvas and decode resolution");
        c->add_option("--seed", seed, "random seed");
        c->add_option("--batch", batch, "distance samples per step");
        c->add_option("--hidden", hidden, "decoder hidden width");
    }
    nlf::TrainConfig resolve(CLI::App* c) const {
        nlf::TrainConfig cfg;
        if (!config_path.empty())
            for (const auto& [k, v] : nlf::load_config(config_path)) apply_config_entry(cfg, k, v);
        if (c->count("--epochs")) cfg.epochs = epochs;
        if (c->count("--lr")) cfg.lr = lr;
        if (c->count("--k-control")) cfg.k_control = k_control;
        if (c->count("--latent-dim")) cfg.n_s = cfg.n_d = latent_dim;
        if (c->count("--grid-res")) cfg.grid_res = grid_res;
        if (c->count("--seed")) cfg.seed = seed;
        if (c->count("--batch")) cfg.batch = batch;
        if (c->count("--hidden")) cfg.hidden = hidden;
        return cfg;
    }
};

void write_run_manifest(const std::string& path, const std::string& command, uint64_t seed,
                        const std::vector<std::pair<std::string, std::string>>& config,
                        const std::vector<std::string>& outputs, Clock::time_point t0) {
    nlf::RunManifest m;
    m.command = command;
    m.seed = seed;
    m.version = kVersion;
    m.config = config;
    for (const std::string& p : outputs) m.outputs.emplace_back(p, nlf::sha256_hex(nlf::read_file(p)));
    m.wall_seconds = std::chrono::duration<double>(Clock::now() - t0).count();
    nlf::write_manifest(m, path);
}

void write_latents_file(const nlf::Tensor& zs, const nlf::Tensor& zd, const std::string& path) {
    std::string out;
    for (size_t i = 0; i < zs.size(); ++i) out += nlf::format_double(zs[i]) + "\n";
    out += "---\n";
    for (size_t i = 0; i < zd.size(); ++i) out += nlf::format_double(zd[i]) + "\n";
    nlf::write_file_atomic(path, out);
}

nlf::Mesh generate_mesh(const nlf::Checkpoint& shape_ckpt, const nlf::Checkpoint& deform_ckpt,
                        const nlf::Tensor& zs, const nlf::Tensor& zd) {
    nlf::TrainConfig scfg = nlf::config_from_checkpoint(shape_ckpt);
    nlf::DeformConfig dcfg = nlf::config_from_checkpoint(deform_ckpt).deform_config();
    nlf::Mesh mesh = nlf::decoded_mesh(shape_ckpt.params, scfg.shape_config(), zs, scfg.grid_res);
    nlf::Tensor verts = mesh.vertex_tensor();
    nlf::Tensor weights = nlf::decode_skinning_weights(deform_ckpt.params, dcfg, zs, verts);
    nlf::Tensor xforms = nlf::decode_transforms(deform_ckpt.params, dcfg, zd,
                                                deform_ckpt.params.value(nlf::kControlPointsName));
    nlf::Tensor moved = nlf::lbs_deform(verts, weights, xforms,
                                        deform_ckpt.params.value(nlf::kControlPointsName),
                                        dcfg.strict_offset_form);
    mesh.set_vertices(moved);
    return mesh;
}

std::vector<nlf::Tensor> latent_table(const nlf::Checkpoint& ckpt, const std::string& prefix) {
    std::vector<nlf::Tensor> out;
    for (const std::string& name : ckpt.params.names())
        if (name.rfind(prefix, 0) == 0) out.push_back(ckpt.params.value(name));
    if (out.empty()) throw nlf::ValidationError("checkpoint has no trained latents under " + prefix);
    return out;
}

// Contour of an aligned cloud: occupancy in the x-y plane, traced, lifted to
// 3D with the mean height of the points in each boundary cell. The grid is
// capped by point density so sparse clouds stay 4-connected.
std::vector<nlf::Vec3> cloud_contour(const std::vector<nlf::Vec3>& cloud, int res_cap) {
    int res = std::min(res_cap, std::max(8, int(std::sqrt(double(cloud.size())))));
    double xlo = 1e300, xhi = -1e300, ylo = 1e300, yhi = -1e300;
    for (const auto& p : cloud) {
        xlo = std::min(xlo, p.x);
        xhi = std::max(xhi, p.x);
        ylo = std::min(ylo, p.y);
        yhi = std::max(yhi, p.y);
    }
    double span = std::max(xhi - xlo, yhi - ylo) * 1.05 + 1e-12;
    double cx = 0.5 * (xlo + xhi), cy = 0.5 * (ylo + yhi);
    auto cell = [&](const nlf::Vec3& p, int& r, int& c) {
        c = std::min(res - 1, std::max(0, int(((p.x - cx) / span + 0.5) * res)));
        r = std::min(res - 1, std::max(0, int(((p.y - cy) / span + 0.5) * res)));
    };
    nlf::Mask2D occ(res, res);
    for (const auto& p : cloud) {
        int r, c;
        cell(p, r, c);
        occ.at(r, c) = 1;
    }
    nlf::Mask2D cleaned = nlf::cleanup_mask(occ);
    nlf::Mesh m = nlf::extract_base_mesh(cleaned);
    // accumulate mean height per boundary cell
    std::vector<nlf::Vec3> out;
    for (int idx : m.contour) {
        const nlf::Vec3& v = m.vertices[size_t(idx)];
        int vc = std::min(res - 1, std::max(0, int(v.x * res)));
        int vr = std::min(res - 1, std::max(0, int(v.y * res)));
        double zsum = 0.0;
        int count = 0;
        for (const auto& p : cloud) {
            int r, c;
            cell(p, r, c);
            if (r == vr && c == vc) {
                zsum += p.z;
                ++count;
            }
        }
        double x = (v.x - 0.5) * span + cx, y = (v.y - 0.5) * span + cy;
        out.push_back({x, y, count ? zsum / count : 0.0});
    }
    return out;
}

// ---- subcommands ----

int run_synth(const std::string& cmdline, int n, uint64_t seed, int res, const std::string& out_dir) {
    auto t0 = Clock::now();
    nlf::SyntheticData data = nlf::generate_synthetic_dataset(n, seed, res);
    nlf::save_synthetic_dataset(data, out_dir);
    std::vector<std::string> outputs;
    for (const auto& s : data.shapes.samples)
        outputs.push_back((nlf::fs::path(out_dir) / "masks" / (s.id + ".pgm")).string());
    for (const auto& p : data.pairs.pairs) {
        auto pdir = nlf::fs::path(out_dir) / "pairs" / p.id;
        outputs.push_back((pdir / "base_id.txt").string());
        outputs.push_back((pdir / "deformed.xyz").string());
        outputs.push_back((pdir / "truth.json").string());
    }
    std::vector<std::pair<std::string, std::string>> cfg = {{"grid_res", std::to_string(res)},
                                                            {"n", std::to_string(n)}};
    write_run_manifest((nlf::fs::path(out_dir) / "manifest.txt").string(), cmdline, seed, cfg,
                       outputs, t0);
    std::printf("synth: %d leaves, %d pairs -> %s\n", n, n, out_dir.c_str());
    return 0;
}

int run_train_shape(const std::string& cmdline, const TrainFlags& tf, CLI::App* cmd,
                    const std::string& data_dir, const std::string& out_path) {
    auto t0 = Clock::now();
    nlf::TrainConfig cfg = tf.resolve(cmd);
    nlf::ShapeDataset data = nlf::load_shape_dataset(data_dir);
    nlf::TrainResult res = nlf::train_shape_space(data, cfg);
    nlf::save_checkpoint(res.checkpoint, out_path);
    write_run_manifest(out_path + ".manifest.txt", cmdline, cfg.seed, config_snapshot(cfg),
                       {out_path}, t0);
    std::printf("train-shape: %d samples, %d epochs%s, final loss %.6f -> %s\n",
                int(data.samples.size()), res.epochs_run, res.diverged ? " (diverged, last good kept)" : "",
                res.epochs.empty() ? 0.0 : res.epochs.back().total, out_path.c_str());
    return 0;
}

int run_train_deform(const std::string& cmdline, const TrainFlags& tf, CLI::App* cmd,
                     const std::string& data_dir, const std::string& shape_path,
                     const std::string& init_path, const std::string& out_path) {
    auto t0 = Clock::now();
    nlf::Checkpoint shape_ckpt = nlf::load_checkpoint(shape_path);
    nlf::TrainConfig cfg = nlf::config_from_checkpoint(shape_ckpt, tf.resolve(cmd));
    if (cmd->count("--k-control")) cfg.k_control = tf.k_control;
    nlf::DeformDataset pairs = nlf::load_deform_dataset(data_dir);

    nlf::TrainResult res;
    if (tf.stage == 1) {
        res = nlf::train_deformation_stage1(pairs, shape_ckpt, cfg);
    } else if (tf.stage == 2) {
        if (init_path.empty())
            throw nlf::ValidationError("stage 2 needs --init with the stage-1 checkpoint");
        nlf::Checkpoint stage1 = nlf::load_checkpoint(init_path);
        cfg.k_control = int(stage1.meta_int("k_control"));
        nlf::ShapeDataset pool = nlf::load_shape_dataset(data_dir);
        res = nlf::train_deformation_stage2(pool, pairs, shape_ckpt, stage1, cfg);
    } else {
        throw nlf::ValidationError("--stage must be 1 or 2");
    }
    nlf::save_checkpoint(res.checkpoint, out_path);
    write_run_manifest(out_path + ".manifest.txt", cmdline, cfg.seed, config_snapshot(cfg),
                       {out_path}, t0);
    std::printf("train-deform stage %d: %d pairs, %d epochs%s, final loss %.6f -> %s\n", tf.stage,
                int(pairs.pairs.size()), res.epochs_run, res.diverged ? " (diverged, last good kept)" : "",
                res.epochs.empty() ? 0.0 : res.epochs.back().total, out_path.c_str());
    return 0;
}

int run_train_enc(const std::string& cmdline, const TrainFlags& tf, CLI::App* cmd,
                  const std::string& data_dir, const std::string& shape_path,
                  const std::string& deform_path, int enc_res, double delta_grid,
                  const std::string& out_path) {
    auto t0 = Clock::now();
    nlf::Checkpoint shape_ckpt = nlf::load_checkpoint(shape_path);
    nlf::Checkpoint deform_ckpt = nlf::load_checkpoint(deform_path);
    nlf::TrainConfig cfg = nlf::config_from_checkpoint(shape_ckpt, tf.resolve(cmd));
    nlf::DeformDataset pairs = nlf::load_deform_dataset(data_dir);
    nlf::EncoderConfig ecfg;
    ecfg.grid_res = enc_res;
    ecfg.delta_grid = delta_grid;
    nlf::EncoderTrainResult res =
        nlf::train_inversion_encoders(shape_ckpt, deform_ckpt, pairs, cfg, ecfg);
    nlf::save_checkpoint(res.checkpoint, out_path);
    write_run_manifest(out_path + ".manifest.txt", cmdline, cfg.seed, config_snapshot(cfg),
                       {out_path}, t0);
    if (res.heldout_loss >= 0.0)
        std::printf("train-enc: %d epochs, train loss %.6f, held-out loss %.6f -> %s\n",
                    res.epochs_run, res.train_loss, res.heldout_loss, out_path.c_str());
    else
        std::printf("train-enc: %d epochs, train loss %.6f -> %s\n", res.epochs_run, res.train_loss,
                    out_path.c_str());
    return 0;
}

int run_register(const std::string& cmdline, const std::string& dir, int n_keypoints, int iters) {
    auto t0 = Clock::now();
    nlf::Mask2D mask = nlf::read_mask((nlf::fs::path(dir) / "base_mask.pgm").string());
    std::vector<nlf::Vec3> cloud = nlf::read_xyz((nlf::fs::path(dir) / "deformed.xyz").string());
    nlf::Mesh base = nlf::extract_base_mesh(nlf::cleanup_mask(mask));

    // both sides into the canonical frame
    nlf::RigidPose base_pose = nlf::rigid_align(base.vertices);
    for (auto& v : base.vertices) v = base_pose.apply(v);
    nlf::RigidPose cloud_pose = nlf::rigid_align(cloud);
    std::vector<nlf::Vec3> aligned(cloud.size());
    for (size_t i = 0; i < cloud.size(); ++i) aligned[i] = cloud_pose.apply(cloud[i]);
    nlf::write_ply_cloud(aligned, (nlf::fs::path(dir) / "aligned_deformed.ply").string());

    // coarse warp from contour keypoints, then dense correspondences
    std::vector<nlf::Vec3> base_contour;
    for (int idx : base.contour) base_contour.push_back(base.vertices[size_t(idx)]);
    nlf::require(base_contour.size() >= 2, "base mask contour is degenerate");
    std::vector<int> base_kp_contour = nlf::sample_contour_keypoints(base_contour, n_keypoints);
    std::vector<int> keypoints;
    for (int ci : base_kp_contour) keypoints.push_back(base.contour[size_t(ci)]);

    std::vector<nlf::Vec3> target_contour = cloud_contour(aligned, 64);
    std::vector<int> tgt_kp = nlf::sample_contour_keypoints(target_contour, n_keypoints);
    std::vector<nlf::Vec3> targets;
    for (int ci : tgt_kp) targets.push_back(target_contour[size_t(ci)]);

    nlf::ArapResult warped = nlf::arap_register(base, keypoints, targets, iters);
    nlf::CpdResult cpd = nlf::cpd_register(warped.vertices, aligned);

    std::vector<std::vector<std::string>> rows;
    for (size_t i = 0; i < cpd.correspondence.target_index.size(); ++i)
        rows.push_back({std::to_string(i), std::to_string(cpd.correspondence.target_index[i]),
                        nlf::format_fixed(cpd.correspondence.confidence[i], 6)});
    nlf::write_csv((nlf::fs::path(dir) / "correspondence.csv").string(),
                   {"base_vertex_index", "target_index", "confidence"}, rows);

    write_run_manifest((nlf::fs::path(dir) / "manifest.txt").string(), cmdline, 0,
                       {{"iters", std::to_string(iters)}, {"keypoints", std::to_string(n_keypoints)}},
                       {(nlf::fs::path(dir) / "aligned_deformed.ply").string(),
                        (nlf::fs::path(dir) / "correspondence.csv").string()},
                       t0);
    std::printf("register: %d vertices matched, residual sigma %.6f -> %s\n",
                int(cpd.correspondence.target_index.size()), std::sqrt(cpd.sigma2), dir.c_str());
    return 0;
}

int run_fit(const std::string& cmdline, const std::string& shape_path, const std::string& deform_path,
            const std::string& enc_path, const std::string& cloud_path, const std::string& gt_path,
            nlf::FitConfig fcfg, const std::string& out_dir) {
    auto t0 = Clock::now();
    nlf::Checkpoint shape_ckpt = nlf::load_checkpoint(shape_path);
    nlf::Checkpoint deform_ckpt = nlf::load_checkpoint(deform_path);
    nlf::Checkpoint enc_ckpt = nlf::load_checkpoint(enc_path);
    std::vector<nlf::Vec3> cloud = nlf::read_cloud(cloud_path);

    nlf::EncoderConfig ecfg = nlf::encoder_config_from_checkpoint(enc_ckpt);
    nlf::InvertResult init =
        nlf::invert_latents(nlf::backproject_to_grid(cloud, ecfg.grid_res, ecfg.delta_grid), enc_ckpt);
    nlf::FitResult fit =
        nlf::refine_fit(init.z_s, init.z_d, cloud, shape_ckpt, deform_ckpt, fcfg, nullptr);

    std::error_code ec;
    nlf::fs::create_directories(out_dir, ec);
    if (ec) throw nlf::IoError("cannot create '" + out_dir + "': " + ec.message());
    std::string obj_path = (nlf::fs::path(out_dir) / "fitted.obj").string();
    std::string lat_path = (nlf::fs::path(out_dir) / "latents.txt").string();
    std::string rep_path = (nlf::fs::path(out_dir) / "report.txt").string();
    nlf::write_obj(fit.mesh, obj_path);
    write_latents_file(fit.z_s, fit.z_d, lat_path);
    double nc = -1.0;
    if (!gt_path.empty()) nc = nlf::metric_normal_consistency(nlf::read_obj(gt_path), fit.mesh);
    std::string report = "chamfer_mm=" + nlf::format_fixed(fit.residual, 6) + "\n" +
                         "nc=" + nlf::format_fixed(nc, 3) + "\n" +
                         "iterations=" + std::to_string(fit.iterations) + "\n" +
                         "low_confidence=" + (init.low_confidence ? std::string("1") : std::string("0")) +
                         "\n";
    nlf::write_file_atomic(rep_path, report);
    write_run_manifest((nlf::fs::path(out_dir) / "manifest.txt").string(), cmdline, fcfg.seed,
                       {{"iterations", std::to_string(fcfg.iterations)},
                        {"lr", nlf::format_double(fcfg.lr)}},
                       {obj_path, lat_path, rep_path}, t0);
    std::printf("fit: chamfer %.6f after %d iterations -> %s\n", fit.residual, fit.iterations,
                out_dir.c_str());
    return 0;
}

int run_fit_multi(const std::string& cmdline, const std::string& shape_path,
                  const std::string& deform_path, const std::string& enc_path,
                  const std::string& clouds_dir, nlf::FitConfig fcfg, bool no_share,
                  const std::string& out_dir) {
    auto t0 = Clock::now();
    nlf::Checkpoint shape_ckpt = nlf::load_checkpoint(shape_path);
    nlf::Checkpoint deform_ckpt = nlf::load_checkpoint(deform_path);
    nlf::Checkpoint enc_ckpt = nlf::load_checkpoint(enc_path);

    std::vector<std::string> names;
    for (const std::string& name : nlf::sorted_entries(clouds_dir)) {
        auto ext = nlf::fs::path(name).extension().string();
        if (ext == ".xyz" || ext == ".ply") names.push_back(name);
    }
    if (names.empty()) throw nlf::ValidationError("no .xyz or .ply clouds under '" + clouds_dir + "'");
    std::vector<std::vector<nlf::Vec3>> instances;
    for (const std::string& name : names)
        instances.push_back(nlf::read_cloud((nlf::fs::path(clouds_dir) / name).string()));

    std::vector<nlf::FitResult> fits =
        nlf::fit_multi_leaf(instances, shape_ckpt, deform_ckpt, enc_ckpt, fcfg, !no_share);

    std::error_code ec;
    nlf::fs::create_directories(out_dir, ec);
    if (ec) throw nlf::IoError("cannot create '" + out_dir + "': " + ec.message());
    std::vector<std::string> outputs;
    std::string report;
    for (size_t i = 0; i < fits.size(); ++i) {
        char idx[16];
        std::snprintf(idx, sizeof(idx), "%03d", int(i));
        std::string obj_path = (nlf::fs::path(out_dir) / ("fitted_" + std::string(idx) + ".obj")).string();
        std::string lat_path = (nlf::fs::path(out_dir) / ("latents_" + std::string(idx) + ".txt")).string();
        nlf::write_obj(fits[i].mesh, obj_path);
        write_latents_file(fits[i].z_s, fits[i].z_d, lat_path);
        outputs.push_back(obj_path);
        outputs.push_back(lat_path);
        report += names[i] + " chamfer_mm=" + nlf::format_fixed(fits[i].residual, 6) +
                  " iterations=" + std::to_string(fits[i].iterations) + "\n";
    }
    std::string rep_path = (nlf::fs::path(out_dir) / "report.txt").string();
    nlf::write_file_atomic(rep_path, report);
    outputs.push_back(rep_path);
    write_run_manifest((nlf::fs::path(out_dir) / "manifest.txt").string(), cmdline, fcfg.seed,
                       {{"iterations", std::to_string(fcfg.iterations)},
                        {"share", no_share ? "0" : "1"}},
                       outputs, t0);
    std::printf("fit-multi: %d instances -> %s\n", int(fits.size()), out_dir.c_str());
    return 0;
}

int run_generate(const std::string& cmdline, const std::string& shape_path,
                 const std::string& deform_path, uint64_t zs_seed, uint64_t zd_seed,
                 const std::string& out_path) {
    auto t0 = Clock::now();
    nlf::Checkpoint shape_ckpt = nlf::load_checkpoint(shape_path);
    nlf::Checkpoint deform_ckpt = nlf::load_checkpoint(deform_path);
    int n_s = int(shape_ckpt.meta_int("latent_dim_shape"));
    int n_d = int(deform_ckpt.meta_int("latent_dim_deform"));
    nlf::Tensor zs = nlf::sample_shape_latent(latent_table(shape_ckpt, "zs/"), n_s, zs_seed);
    nlf::Tensor zd = nlf::sample_shape_latent(latent_table(deform_ckpt, "zd/"), n_d, zd_seed);
    nlf::Mesh mesh = generate_mesh(shape_ckpt, deform_ckpt, zs, zd);
    nlf::write_obj(mesh, out_path);
    write_run_manifest(out_path + ".manifest.txt", cmdline, zs_seed,
                       {{"zd_seed", std::to_string(zd_seed)}, {"zs_seed", std::to_string(zs_seed)}},
                       {out_path}, t0);
    std::printf("generate: %d vertices, %d faces -> %s\n", mesh.n_vertices(), mesh.n_faces(),
                out_path.c_str());
    return 0;
}

int run_interp(const std::string& cmdline, const std::string& shape_path, const std::string& id_a,
               const std::string& id_b, double t, const std::string& out_path) {
    auto t0 = Clock::now();
    nlf::Checkpoint shape_ckpt = nlf::load_checkpoint(shape_path);
    nlf::TrainConfig scfg = nlf::config_from_checkpoint(shape_ckpt);
    const nlf::Tensor& za = shape_ckpt.params.value(nlf::latent_key_shape(id_a));
    const nlf::Tensor& zb = shape_ckpt.params.value(nlf::latent_key_shape(id_b));
    nlf::Tensor z = nlf::interpolate_shape(za, zb, t);
    nlf::Mesh mesh = nlf::decoded_mesh(shape_ckpt.params, scfg.shape_config(), z, scfg.grid_res);
    nlf::write_obj(mesh, out_path);
    write_run_manifest(out_path + ".manifest.txt", cmdline, 0,
                       {{"a", id_a}, {"b", id_b}, {"t", nlf::format_double(t)}}, {out_path}, t0);
    std::printf("interp: t=%.3f between %s and %s -> %s\n", t, id_a.c_str(), id_b.c_str(),
                out_path.c_str());
    return 0;
}

int run_eval(const std::string& gt_path, const std::string& pred_path) {
    nlf::Mesh gt = nlf::read_obj(gt_path);
    nlf::Mesh pred = nlf::read_obj(pred_path);
    double cham = nlf::metric_chamfer_l2(gt.vertices, pred.vertices);
    double nc = nlf::metric_normal_consistency(gt, pred);
    std::printf("chamfer_l2_mm=%.3f nc=%.3f\n", cham, nc);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neural parametric leaf model"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);
    std::string cmdline = join_args(argc, argv);

    // synth
    auto* synth = app.add_subcommand("synth", "generate a procedural leaf dataset");
    int synth_n = 10, synth_res = 64;
    uint64_t synth_seed = 1;
    std::string synth_out;
    synth->add_option("--n", synth_n, "number of leaves and pairs");
    synth->add_option("--seed", synth_seed, "random seed");
    synth->add_option("--grid-res", synth_res, "mask resolution");
    synth->add_option("--out", synth_out, "output dataset directory")->required();

    // train-shape
    auto* tshape = app.add_subcommand("train-shape", "train the silhouette shape space");
    TrainFlags tshape_flags;
    tshape_flags.attach(tshape);
    std::string tshape_data, tshape_out;
    tshape->add_option("--data", tshape_data, "dataset directory")->required();
    tshape->add_option("--out", tshape_out, "checkpoint path")->required();

    // train-deform
    auto* tdef = app.add_subcommand("train-deform", "train the deformation space");
    TrainFlags tdef_flags;
    tdef_flags.attach(tdef);
    tdef->add_option("--stage", tdef_flags.stage, "training stage, 1 or 2");
    std::string tdef_data, tdef_shape, tdef_init, tdef_out;
    tdef->add_option("--data", tdef_data, "dataset directory")->required();
    tdef->add_option("--shape", tdef_shape, "trained shape checkpoint")->required();
    tdef->add_option("--init", tdef_init, "stage-1 checkpoint (stage 2 only)");
    tdef->add_option("--out", tdef_out, "checkpoint path")->required();

    // train-enc
    auto* tenc = app.add_subcommand("train-enc", "train the latent-inversion encoders");
    TrainFlags tenc_flags;
    tenc_flags.attach(tenc);
    std::string tenc_data, tenc_shape, tenc_deform, tenc_out;
    int tenc_res = 32;
    double tenc_delta = 0.1;
    tenc->add_option("--data", tenc_data, "dataset directory")->required();
    tenc->add_option("--shape", tenc_shape, "trained shape checkpoint")->required();
    tenc->add_option("--deform", tenc_deform, "trained deformation checkpoint")->required();
    tenc->add_option("--enc-grid-res", tenc_res, "encoder input grid resolution");
    tenc->add_option("--delta-grid", tenc_delta, "grid truncation width");
    tenc->add_option("--out", tenc_out, "checkpoint path")->required();

    // register
    auto* reg = app.add_subcommand("register", "align and register one base/deformed pair");
    std::string reg_dir;
    int reg_keypoints = 20, reg_iters = 30;
    reg->add_option("--dir", reg_dir, "pair directory with base_mask.pgm and deformed.xyz")->required();
    reg->add_option("--keypoints", reg_keypoints, "contour keypoint count");
    reg->add_option("--iters", reg_iters, "warp iterations");

    // fit
    auto* fit = app.add_subcommand("fit", "fit the model to one observation cloud");
    std::string fit_shape, fit_deform, fit_enc, fit_cloud, fit_gt, fit_out;
    nlf::FitConfig fit_cfg;
    fit->add_option("--model", fit_shape, "trained shape checkpoint")->required();
    fit->add_option("--deform", fit_deform, "trained deformation checkpoint")->required();
    fit->add_option("--enc", fit_enc, "trained encoder checkpoint")->required();
    fit->add_option("--cloud", fit_cloud, "observation cloud (.xyz or .ply)")->required();
    fit->add_option("--gt", fit_gt, "ground-truth mesh for the report (optional)");
    fit->add_option("--iters", fit_cfg.iterations, "refinement iterations");
    fit->add_option("--lr", fit_cfg.lr, "refinement learning rate");
    fit->add_option("--seed", fit_cfg.seed, "random seed");
    fit->add_option("--out", fit_out, "output directory")->required();

    // fit-multi
    auto* fmulti = app.add_subcommand("fit-multi", "fit several instances with a shared anchor");
    std::string fm_shape, fm_deform, fm_enc, fm_clouds, fm_out;
    nlf::FitConfig fm_cfg;
    bool fm_no_share = false;
    fmulti->add_option("--model", fm_shape, "trained shape checkpoint")->required();
    fmulti->add_option("--deform", fm_deform, "trained deformation checkpoint")->required();
    fmulti->add_option("--enc", fm_enc, "trained encoder checkpoint")->required();
    fmulti->add_option("--clouds", fm_clouds, "directory of observation clouds")->required();
    fmulti->add_option("--iters", fm_cfg.iterations, "refinement iterations");
    fmulti->add_option("--seed", fm_cfg.seed, "random seed");
    fmulti->add_flag("--no-share", fm_no_share, "fit each instance independently");
    fmulti->add_option("--out", fm_out, "output directory")->required();

    // generate
    auto* gen = app.add_subcommand("generate", "sample a leaf from the trained spaces");
    std::string gen_shape, gen_deform, gen_out;
    uint64_t gen_zs_seed = 1, gen_zd_seed = 2;
    gen->add_option("--model", gen_shape, "trained shape checkpoint")->required();
    gen->add_option("--deform", gen_deform, "trained deformation checkpoint")->required();
    gen->add_option("--zs-seed", gen_zs_seed, "shape code seed");
    gen->add_option("--zd-seed", gen_zd_seed, "deformation code seed");
    gen->add_option("--out", gen_out, "output OBJ path")->required();

    // interp
    auto* interp = app.add_subcommand("interp", "interpolate between two trained base shapes");
    std::string in_shape, in_a, in_b, in_out;
    double in_t = 0.5;
    interp->add_option("--model", in_shape, "trained shape checkpoint")->required();
    interp->add_option("--a", in_a, "first sample id")->required();
    interp->add_option("--b", in_b, "second sample id")->required();
    interp->add_option("--t", in_t, "blend parameter in [0,1]");
    interp->add_option("--out", in_out, "output OBJ path")->required();

    // eval
    auto* eval = app.add_subcommand("eval", "compare two meshes");
    std::string ev_gt, ev_pred;
    eval->add_option("--gt", ev_gt, "reference mesh (OBJ)")->required();
    eval->add_option("--pred", ev_pred, "predicted mesh (OBJ)")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return run_synth(cmdline, synth_n, synth_seed, synth_res, synth_out);
        if (tshape->parsed()) return run_train_shape(cmdline, tshape_flags, tshape, tshape_data, tshape_out);
        if (tdef->parsed())
            return run_train_deform(cmdline, tdef_flags, tdef, tdef_data, tdef_shape, tdef_init, tdef_out);
        if (tenc->parsed())
            return run_train_enc(cmdline, tenc_flags, tenc, tenc_data, tenc_shape, tenc_deform,
                                 tenc_res, tenc_delta, tenc_out);
        if (reg->parsed()) return run_register(cmdline, reg_dir, reg_keypoints, reg_iters);
        if (fit->parsed())
            return run_fit(cmdline, fit_shape, fit_deform, fit_enc, fit_cloud, fit_gt, fit_cfg, fit_out);
        if (fmulti->parsed())
            return run_fit_multi(cmdline, fm_shape, fm_deform, fm_enc, fm_clouds, fm_cfg,
                                 fm_no_share, fm_out);
        if (gen->parsed())
            return run_generate(cmdline, gen_shape, gen_deform, gen_zs_seed, gen_zd_seed, gen_out);
        if (interp->parsed()) return run_interp(cmdline, in_shape, in_a, in_b, in_t, in_out);
        if (eval->parsed()) return run_eval(ev_gt, ev_pred);
    } catch (const nlf::ValidationError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const nlf::NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return 2;
    } catch (const nlf::IoError& e) {
        std::fprintf(stderr, "io error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
