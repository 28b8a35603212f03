// Flat-shape latent space: distance-field decoding conditioned on a shape
// code, mask-to-mesh extraction with boundary tracing, and latent utilities.
#pragma once

#include "nlf/mesh.hpp"
#include "nlf/mlp.hpp"
#include "nlf/sdf_grid.hpp"

namespace nlf {

struct ShapeDecoderConfig {
    int latent_dim = 32;
    int hidden = 64;
    int hidden_layers = 4;
    int pe_order = 8;
    double softplus_beta = 100.0;

    MlpSpec mlp() const {
        MlpSpec s;
        s.layer_widths.push_back(positional_width(2, pe_order) + latent_dim);
        for (int i = 0; i < hidden_layers; ++i) s.layer_widths.push_back(hidden);
        s.layer_widths.push_back(1);
        s.activation = Activation::Softplus;
        s.softplus_beta = softplus_beta;
        s.head = OutputHead::Raw;
        if (hidden_layers >= 2) s.skips.push_back(hidden_layers / 2);
        return s;
    }

    // Columns of the encoded input that carry the raw (centred) coordinates.
    std::vector<int> raw_columns() const { return {0, 1 + 2 * pe_order}; }
};

inline const char* kShapeDecoderName = "shape";
inline const char* kMaskSlopeName = "mask_slope";  // the learnable sigmoid slope

inline void init_shape_decoder(ParamSet& ps, const ShapeDecoderConfig& cfg, Rng& rng) {
    init_mlp_spherical(ps, kShapeDecoderName, cfg.mlp(), rng, cfg.raw_columns(), 0.5);
    ps.add(kMaskSlopeName, Tensor::scalar(50.0));
}

// Points arrive in the unit square; the decoder sees them centred so the
// freshly initialized field is a disc around the canvas centre.
inline Tensor center_points(const Tensor& pts) {
    Tensor out = pts;
    for (size_t i = 0; i < out.size(); ++i) out[i] -= 0.5;
    return out;
}

inline Tensor decode_sdf_batch(const ParamSet& ps, const ShapeDecoderConfig& cfg, const Tensor& z,
                               const Tensor& pts) {
    require(z.rows() == 1 && z.cols() == cfg.latent_dim, "shape latent shape mismatch");
    require(pts.cols() == 2, "decode expects 2D points");
    Tensor enc = positional_encode(center_points(pts), cfg.pe_order);
    Tensor input({pts.rows(), enc.cols() + cfg.latent_dim});
    for (int i = 0; i < pts.rows(); ++i) {
        for (int j = 0; j < enc.cols(); ++j) input.at(i, j) = enc.at(i, j);
        for (int j = 0; j < cfg.latent_dim; ++j) input.at(i, enc.cols() + j) = z.at(0, j);
    }
    return mlp_forward_plain(ps, kShapeDecoderName, cfg.mlp(), input);
}

inline double decode_sdf(const ParamSet& ps, const ShapeDecoderConfig& cfg, const Tensor& z,
                         double u, double v) {
    Tensor p({1, 2});
    p.at(0, 0) = u;
    p.at(0, 1) = v;
    return decode_sdf_batch(ps, cfg, z, p).value();
}

// Taped decode for training. Returns the trace of the decoder MLP; the
// caller owns the tape and the pushed parameters.
struct TapedShapeDecode {
    MlpTrace trace;          // trace.raw: (n,1) distances
    TapedEncoding enc;       // encoded points (+ tangents when dirs given)
    int input = -1;          // full decoder input node
};

inline TapedShapeDecode taped_decode_sdf(Tape& t, const ShapeDecoderConfig& cfg,
                                         const TapedMlp& mlp, int z, int pts_centered,
                                         const std::vector<int>& tangent_dirs = {}) {
    TapedShapeDecode out;
    out.enc = positional_encode_dirs(t, pts_centered, cfg.pe_order, tangent_dirs);
    int n = t.value(pts_centered).rows();
    int zrep = t.broadcast_row(z, n);
    out.input = t.concat_cols(out.enc.enc, zrep);
    out.trace = mlp_forward(t, cfg.mlp(), mlp, out.input);
    return out;
}

// Tangent of the decoded distance along tangent direction `which`; the
// latent block contributes nothing to a spatial derivative.
inline int taped_decode_jvp(Tape& t, const ShapeDecoderConfig& cfg, const TapedMlp& mlp,
                            const TapedShapeDecode& dec, size_t which = 0) {
    int tenc = dec.enc.tangents.at(which);
    int n = t.value(tenc).rows();
    Tensor zeros({n, cfg.latent_dim});
    int tz = t.input(std::move(zeros));
    int tin = t.concat_cols(tenc, tz);
    return mlp_jvp(t, cfg.mlp(), mlp, dec.trace, tin);
}

// ---- mask to mesh ----

// One vertex per foreground pixel centre on z=0; every fully-foreground 2x2
// block becomes two triangles split along its (min,min)-(max,max) diagonal.
// The boundary loop comes from Moore neighbourhood tracing.
inline Mesh extract_base_mesh(const Mask2D& mask) {
    const int w = mask.width, h = mask.height;
    if (mask.count_foreground() < 3) throw ValidationError("mask too small to mesh");
    Mesh m;
    std::vector<int> vid(size_t(w) * h, -1);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            if (mask.at(r, c)) {
                vid[size_t(r) * w + c] = m.n_vertices();
                double u = (c + 0.5) / double(w), v = (r + 0.5) / double(h);
                m.vertices.push_back({u, v, 0.0});
                m.uv.push_back({u, v});
            }
    for (int r = 0; r + 1 < h; ++r)
        for (int c = 0; c + 1 < w; ++c) {
            if (!(mask.at(r, c) && mask.at(r, c + 1) && mask.at(r + 1, c) && mask.at(r + 1, c + 1)))
                continue;
            int v00 = vid[size_t(r) * w + c], v01 = vid[size_t(r) * w + c + 1];
            int v10 = vid[size_t(r + 1) * w + c], v11 = vid[size_t(r + 1) * w + c + 1];
            m.faces.push_back({v00, v01, v11});
            m.faces.push_back({v00, v11, v10});
        }

    // Boundary tracing. Directions run clockwise starting west; from the
    // neighbour after the backtrack position, the first foreground pixel is
    // the next boundary pixel.
    static const int dr[8] = {0, -1, -1, -1, 0, 1, 1, 1};
    static const int dc[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
    int sr = -1, sc = -1;
    for (int r = 0; r < h && sr < 0; ++r)
        for (int c = 0; c < w; ++c)
            if (mask.at(r, c)) {
                sr = r;
                sc = c;
                break;
            }
    auto fg = [&](int r, int c) { return mask.inside(r, c) && mask.at(r, c) != 0; };
    std::vector<int> contour;
    int cr = sr, cc = sc, back = 0;  // entered scanning from the west
    size_t cap = size_t(w) * h * 4;
    int first_move = -1;
    for (size_t step = 0; step < cap; ++step) {
        contour.push_back(vid[size_t(cr) * w + cc]);
        int found = -1;
        for (int k = 1; k <= 8; ++k) {
            int dir = (back + k) % 8;
            if (fg(cr + dr[dir], cc + dc[dir])) {
                found = dir;
                break;
            }
        }
        if (found < 0) break;  // isolated pixel
        if (cr == sr && cc == sc) {
            if (first_move < 0)
                first_move = found;
            else if (found == first_move && step > 0)
                break;  // closed the loop with the same exit as the first visit
        }
        cr += dr[size_t(found)];
        cc += dc[size_t(found)];
        // new backtrack: the direction pointing back at the previous pixel,
        // advanced by one so the scan resumes just past it
        back = (found + 4) % 8 + 1;
        if (cr == sr && cc == sc && first_move >= 0) {
            // check the next exit before committing another lap
            int nf = -1;
            for (int k = 1; k <= 8; ++k) {
                int dir = (back % 8 + k) % 8;
                if (fg(cr + dr[dir], cc + dc[dir])) {
                    nf = dir;
                    break;
                }
            }
            if (nf == first_move) break;
        }
    }
    // drop revisits so the loop stays simple
    std::vector<char> seen(size_t(m.n_vertices()), 0);
    for (int v : contour)
        if (!seen[size_t(v)]) {
            seen[size_t(v)] = 1;
            m.contour.push_back(v);
        }
    m.validate();
    return m;
}

inline Mask2D rasterize_decoded_mask(const ParamSet& ps, const ShapeDecoderConfig& cfg,
                                     const Tensor& z, int resolution) {
    require(resolution > 0, "resolution must be positive");
    Tensor pts({resolution * resolution, 2});
    for (int r = 0; r < resolution; ++r)
        for (int c = 0; c < resolution; ++c) {
            pts.at(r * resolution + c, 0) = (c + 0.5) / double(resolution);
            pts.at(r * resolution + c, 1) = (r + 0.5) / double(resolution);
        }
    Tensor d = decode_sdf_batch(ps, cfg, z, pts);
    double k = ps.value(kMaskSlopeName).value();
    Tensor soft = sdf_to_soft_mask(d, k);
    return threshold_soft_mask(soft, resolution, resolution);
}

inline Mesh decoded_mesh(const ParamSet& ps, const ShapeDecoderConfig& cfg, const Tensor& z,
                         int resolution) {
    Mask2D mask = rasterize_decoded_mask(ps, cfg, z, resolution);
    if (mask.count_foreground() < 3) throw NumericalError("latent decodes to a degenerate mask");
    return extract_base_mesh(cleanup_mask(mask));
}

inline Tensor interpolate_shape(const Tensor& za, const Tensor& zb, double t) {
    if (!za.same_shape(zb)) throw ValidationError("latent length mismatch");
    Tensor out = za;
    for (size_t i = 0; i < out.size(); ++i) out[i] = (1.0 - t) * za[i] + t * zb[i];
    return out;
}

// Draw from a zero-mean Gaussian whose scale is the pooled empirical std of
// the trained codes.
inline Tensor sample_shape_latent(const std::vector<Tensor>& trained, int latent_dim,
                                  uint64_t seed) {
    double var = 0.0;
    size_t n = 0;
    for (const Tensor& z : trained) {
        for (size_t i = 0; i < z.size(); ++i) var += z[i] * z[i];
        n += z.size();
    }
    double sigma = n > 0 ? std::sqrt(var / double(n)) : 1.0;
    Rng rng(seed);
    return Tensor::random_normal({1, latent_dim}, rng, 0.0, sigma);
}

}  // namespace nlf
