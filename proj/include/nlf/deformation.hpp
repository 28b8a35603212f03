// Skeleton-free blend skinning: control-point lattice, the skinning-weight
// and rigid-transform decoders, and LBS mesh deformation (plain and taped).
#pragma once

#include "nlf/base_shape.hpp"

namespace nlf {

inline const char* kSkinDecoderName = "skin";
inline const char* kTransformDecoderName = "xform";
inline const char* kControlPointsName = "control_points";

struct DeformConfig {
    int latent_dim = 32;   // z_d length
    int shape_latent_dim = 32;
    int k_control = 100;   // up to 1000
    int hidden = 64;
    int pe_order = 8;
    bool strict_offset_form = false;  // drop the +c recentring term (printed form)

    MlpSpec skinning_mlp() const {
        MlpSpec s;
        s.layer_widths = {positional_width(3, pe_order) + shape_latent_dim, hidden, hidden, hidden,
                          k_control};
        s.activation = Activation::LeakyRelu;
        s.head = OutputHead::SoftmaxRows;
        return s;
    }
    MlpSpec transform_mlp() const {
        MlpSpec s;
        s.layer_widths = {positional_width(3, pe_order) + latent_dim, hidden, hidden, hidden, 7};
        s.activation = Activation::LeakyRelu;
        s.head = OutputHead::Raw;
        return s;
    }
};

// ceil(sqrt(K)) lattice over the unit square, truncated to K points, z=0.
inline Tensor init_control_points(int k) {
    require(k >= 1 && k <= 1000, "control point count out of range");
    int m = int(std::ceil(std::sqrt(double(k))));
    Tensor c({k, 3});
    int idx = 0;
    for (int i = 0; i < m && idx < k; ++i)
        for (int j = 0; j < m && idx < k; ++j, ++idx) {
            c.at(idx, 0) = (j + 0.5) / double(m);
            c.at(idx, 1) = (i + 0.5) / double(m);
            c.at(idx, 2) = 0.0;
        }
    return c;
}

inline void init_deform_decoders(ParamSet& ps, const DeformConfig& cfg, Rng& rng) {
    init_mlp(ps, kSkinDecoderName, cfg.skinning_mlp(), rng);
    // identity start: unit quaternion, zero translation everywhere
    init_mlp_constant_head(ps, kTransformDecoderName, cfg.transform_mlp(), rng,
                           {1, 0, 0, 0, 0, 0, 0});
    ps.add(kControlPointsName, init_control_points(cfg.k_control));
}

inline Tensor assemble_conditioned_input(const Tensor& pts3, const Tensor& z, int pe_order) {
    Tensor enc = positional_encode(pts3, pe_order);
    Tensor input({pts3.rows(), enc.cols() + z.cols()});
    for (int i = 0; i < pts3.rows(); ++i) {
        for (int j = 0; j < enc.cols(); ++j) input.at(i, j) = enc.at(i, j);
        for (int j = 0; j < z.cols(); ++j) input.at(i, enc.cols() + j) = z.at(0, j);
    }
    return input;
}

// (K,7) rows: quaternion (w,x,y,z) then translation. Depends only on the
// deformation code and the control point positions.
inline Tensor decode_transforms(const ParamSet& ps, const DeformConfig& cfg, const Tensor& z_d,
                                const Tensor& control) {
    require(z_d.rows() == 1 && z_d.cols() == cfg.latent_dim, "deform latent shape mismatch");
    require(control.cols() == 3, "control points must be 3D");
    return mlp_forward_plain(ps, kTransformDecoderName, cfg.transform_mlp(),
                             assemble_conditioned_input(control, z_d, cfg.pe_order));
}

// (N,K) row-stochastic weights conditioned on the shape code.
inline Tensor decode_skinning_weights(const ParamSet& ps, const DeformConfig& cfg,
                                      const Tensor& z_s, const Tensor& vertices) {
    require(z_s.rows() == 1 && z_s.cols() == cfg.shape_latent_dim, "shape latent shape mismatch");
    require(vertices.cols() == 3, "vertices must be 3D");
    return mlp_forward_plain(ps, kSkinDecoderName, cfg.skinning_mlp(),
                             assemble_conditioned_input(vertices, z_s, cfg.pe_order));
}

// v_i = sum_k w_ik (R_k (v'_i - c_k) + c_k + t_k). The strict offset form
// drops the +c_k recentring and is kept only for comparison runs. The default
// form is accumulated as v + sum_k w_ik (R_k d - d + t_k) with d = v - c_k,
// which keeps identity transforms exact regardless of rounding.
inline Tensor lbs_deform(const Tensor& vertices, const Tensor& weights, const Tensor& transforms,
                         const Tensor& control, bool strict_offset_form = false) {
    const int n = vertices.rows(), k = control.rows();
    require(vertices.cols() == 3, "vertices must be 3D");
    require(weights.rows() == n && weights.cols() == k, "skinning weight shape mismatch");
    require(transforms.rows() == k && transforms.cols() == 7, "transform set shape mismatch");
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < k; ++j) s += weights.at(i, j);
        if (std::fabs(s - 1.0) > 1e-4) throw ValidationError("skinning weights must sum to 1");
    }
    Tensor out = strict_offset_form ? Tensor({n, 3}) : vertices;
    for (int j = 0; j < k; ++j) {
        Quat q{transforms.at(j, 0), transforms.at(j, 1), transforms.at(j, 2), transforms.at(j, 3)};
        Mat3 r = quat_to_mat(q);
        Vec3 c{control.at(j, 0), control.at(j, 1), control.at(j, 2)};
        Vec3 t{transforms.at(j, 4), transforms.at(j, 5), transforms.at(j, 6)};
        for (int i = 0; i < n; ++i) {
            Vec3 v{vertices.at(i, 0), vertices.at(i, 1), vertices.at(i, 2)};
            Vec3 d = v - c;
            Vec3 moved = strict_offset_form ? mat3_apply(r, d) + t : mat3_apply(r, d) - d + t;
            double w = weights.at(i, j);
            out.at(i, 0) += w * moved.x;
            out.at(i, 1) += w * moved.y;
            out.at(i, 2) += w * moved.z;
        }
    }
    return out;
}

// ---- taped variants for training ----

inline int taped_conditioned_input(Tape& t, int pts3, int z, int pe_order) {
    TapedEncoding enc = positional_encode(t, pts3, pe_order);
    int n = t.value(pts3).rows();
    return t.concat_cols(enc.enc, t.broadcast_row(z, n));
}

inline int taped_decode_transforms(Tape& t, const DeformConfig& cfg, const TapedMlp& mlp, int z_d,
                                   int control) {
    return mlp_forward(t, cfg.transform_mlp(), mlp, taped_conditioned_input(t, control, z_d, cfg.pe_order))
        .out;
}

inline int taped_decode_skinning(Tape& t, const DeformConfig& cfg, const TapedMlp& mlp, int z_s,
                                 int vertices) {
    return mlp_forward(t, cfg.skinning_mlp(), mlp, taped_conditioned_input(t, vertices, z_s, cfg.pe_order))
        .out;
}

// Transposed rotation matrix (3,3) from one unnormalized quaternion row
// (1,4), built from primitives so gradients flow to the quaternion.
// Row-vector convention: rotated = v * Rt.
inline int taped_quat_to_rot_t(Tape& t, int q_row) {
    double nrm = std::sqrt(t.value(q_row).squared_norm());
    if (nrm < 1e-8) throw NumericalError("degenerate quaternion");
    int inv = t.recip(t.sqrt_(t.row_sum(t.square(q_row))));  // (1,1)
    int qn = t.scale_rows(q_row, inv);
    int w = t.slice_cols(qn, 0, 1), x = t.slice_cols(qn, 1, 2);
    int y = t.slice_cols(qn, 2, 3), z = t.slice_cols(qn, 3, 4);
    auto two = [&](int n) { return t.scale(n, 2.0); };
    int xx = t.mul(x, x), yy = t.mul(y, y), zz = t.mul(z, z);
    int xy = t.mul(x, y), xz = t.mul(x, z), yz = t.mul(y, z);
    int wx = t.mul(w, x), wy = t.mul(w, y), wz = t.mul(w, z);
    int r00 = t.add_scalar(t.neg(two(t.add(yy, zz))), 1.0);
    int r01 = two(t.sub(xy, wz));
    int r02 = two(t.add(xz, wy));
    int r10 = two(t.add(xy, wz));
    int r11 = t.add_scalar(t.neg(two(t.add(xx, zz))), 1.0);
    int r12 = two(t.sub(yz, wx));
    int r20 = two(t.sub(xz, wy));
    int r21 = two(t.add(yz, wx));
    int r22 = t.add_scalar(t.neg(two(t.add(xx, yy))), 1.0);
    // Rt row i lists column i of R
    int row0 = t.concat_cols(t.concat_cols(r00, r10), r20);
    int row1 = t.concat_cols(t.concat_cols(r01, r11), r21);
    int row2 = t.concat_cols(t.concat_cols(r02, r12), r22);
    return t.concat_rows(t.concat_rows(row0, row1), row2);
}

// Full skinning blend on tape; every input may carry gradient.
inline int taped_lbs(Tape& t, int vertices, int weights, int transforms, int control,
                     bool strict_offset_form = false) {
    const int n = t.value(vertices).rows();
    const int k = t.value(control).rows();
    int out = -1;
    for (int j = 0; j < k; ++j) {
        int row = t.slice_rows(transforms, j, j + 1);
        int q = t.slice_cols(row, 0, 4);
        int tr = t.slice_cols(row, 4, 7);
        int c = t.slice_rows(control, j, j + 1);
        int rt = taped_quat_to_rot_t(t, q);
        int local = t.sub(vertices, t.broadcast_row(c, n));
        int rotated = t.matmul(local, rt);
        int shift = strict_offset_form ? tr : t.add(c, tr);
        int moved = t.add(rotated, t.broadcast_row(shift, n));
        int contrib = t.scale_rows(moved, t.slice_cols(weights, j, j + 1));
        out = out < 0 ? contrib : t.add(out, contrib);
    }
    return out;
}

}  // namespace nlf
