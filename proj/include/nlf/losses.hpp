// Training and fitting objective terms plus the two evaluation metrics.
// Each loss has a plain evaluator; terms used inside optimization also have
// a taped builder returning the node id of the scalar.
#pragma once

#include "nlf/deformation.hpp"
#include "nlf/mesh.hpp"

namespace nlf {

struct LossWeights {
    double sdf = 1.0;
    double sil = 1.0;
    double eik = 0.1;
    double lat = 1e-4;
    double cham = 1.0;
    double leng = 0.1;
    double lap = 0.1;
    double map = 0.01;
    double bound = 0.1;
    double ang = 0.01;
    double anc = 0.1;
};

// Named terms with weights; total is maintained as the weighted sum.
struct LossReport {
    std::vector<std::pair<std::string, double>> terms;
    std::vector<std::pair<std::string, double>> weights;
    double total = 0.0;

    void add(const std::string& name, double value, double weight) {
        if (!is_finite(value)) throw NumericalError("loss term not finite: " + name);
        terms.emplace_back(name, value);
        weights.emplace_back(name, weight);
        total += weight * value;
    }
    double term(const std::string& name) const {
        for (const auto& [n, v] : terms)
            if (n == name) return v;
        throw ValidationError("no such loss term: " + name);
    }
};

// ---- truncated distance supervision ----

inline int taped_loss_sdf(Tape& t, int pred, int truth, double delta) {
    require(delta > 0.0, "truncation width must be positive");
    int a = t.clamp(pred, -delta, delta);
    int b = t.clamp(truth, -delta, delta);
    return t.mean_all(t.abs_(t.sub(a, b)));
}

inline double loss_sdf(const Tensor& pred, const Tensor& truth, double delta) {
    Tape t;
    return t.value(taped_loss_sdf(t, t.input(pred), t.input(truth), delta)).value();
}

// ---- silhouette ----

inline int taped_loss_silhouette(Tape& t, int soft_mask, int gt_mask) {
    return t.mean_all(t.abs_(t.sub(soft_mask, gt_mask)));
}

inline double loss_silhouette(const Tensor& soft, const Tensor& gt) {
    Tape t;
    return t.value(taped_loss_silhouette(t, t.input(soft), t.input(gt))).value();
}

// ---- gradient-norm regulariser ----
// mean (|grad f| - 1)^2 using two forward tangents along the UV axes.

inline int taped_loss_eikonal(Tape& t, const ShapeDecoderConfig& cfg, const TapedMlp& mlp, int z,
                              int pts_centered) {
    int n = t.value(pts_centered).rows();
    Tensor eu({n, 2}), ev({n, 2});
    for (int i = 0; i < n; ++i) {
        eu.at(i, 0) = 1.0;
        ev.at(i, 1) = 1.0;
    }
    TapedShapeDecode dec =
        taped_decode_sdf(t, cfg, mlp, z, pts_centered, {t.input(eu), t.input(ev)});
    int ju = taped_decode_jvp(t, cfg, mlp, dec, 0);
    int jv = taped_decode_jvp(t, cfg, mlp, dec, 1);
    int norm = t.sqrt_(t.add_scalar(t.add(t.square(ju), t.square(jv)), 1e-12));
    return t.mean_all(t.square(t.add_scalar(norm, -1.0)));
}

inline double loss_eikonal(const ParamSet& ps, const ShapeDecoderConfig& cfg, const Tensor& z,
                           const Tensor& pts) {
    Tape t;
    TapedMlp mlp = push_mlp_params(t, ps, kShapeDecoderName, cfg.mlp());
    int zi = t.input(z);
    int pc = t.input(center_points(pts));
    return t.value(taped_loss_eikonal(t, cfg, mlp, zi, pc)).value();
}

// ---- latent prior ----

inline int taped_loss_latent(Tape& t, int z, double sigma) {
    require(sigma > 0.0, "latent prior sigma must be positive");
    return t.scale(t.sum_all(t.square(z)), 1.0 / (sigma * sigma));
}

inline double loss_latent(const Tensor& z, double sigma) {
    Tape t;
    return t.value(taped_loss_latent(t, t.input(z), sigma)).value();
}

// ---- chamfer ----

inline std::vector<Vec3> tensor_to_points(const Tensor& t) {
    require(t.cols() == 3, "point tensor must be (n,3)");
    std::vector<Vec3> out(size_t(t.rows()));
    for (int i = 0; i < t.rows(); ++i) out[size_t(i)] = {t.at(i, 0), t.at(i, 1), t.at(i, 2)};
    return out;
}

inline Tensor points_to_tensor(const std::vector<Vec3>& pts) {
    Tensor t({int(pts.size()), 3});
    for (size_t i = 0; i < pts.size(); ++i) {
        t.at(int(i), 0) = pts[i].x;
        t.at(int(i), 1) = pts[i].y;
        t.at(int(i), 2) = pts[i].z;
    }
    return t;
}

// Sum of the two directional means of nearest-neighbour distances
// (squared or plain).
inline double chamfer(const std::vector<Vec3>& a, const std::vector<Vec3>& b, bool squared) {
    if (a.empty() || b.empty()) throw ValidationError("chamfer on empty point set");
    NnIndex ib(b), ia(a);
    double sa = 0.0, sb = 0.0;
    for (const Vec3& p : a) {
        double d2 = ib.nearest_dist2(p);
        sa += squared ? d2 : std::sqrt(d2);
    }
    for (const Vec3& p : b) {
        double d2 = ia.nearest_dist2(p);
        sb += squared ? d2 : std::sqrt(d2);
    }
    return sa / double(a.size()) + sb / double(b.size());
}

// Taped chamfer between moving vertices and a fixed target cloud.
// Correspondences are frozen at the current values (recomputed every call).
inline int taped_chamfer_to_points(Tape& t, int moving, const std::vector<Vec3>& target,
                                   bool squared = true) {
    if (target.empty()) throw ValidationError("chamfer on empty point set");
    std::vector<Vec3> mv = tensor_to_points(t.value(moving));
    NnIndex it(target), im(mv);
    const int n = int(mv.size()), m = int(target.size());
    Tensor near_t({n, 3});
    for (int i = 0; i < n; ++i) {
        const Vec3& p = target[size_t(it.nearest(mv[size_t(i)]))];
        near_t.at(i, 0) = p.x;
        near_t.at(i, 1) = p.y;
        near_t.at(i, 2) = p.z;
    }
    std::vector<int> idx(size_t(m), 0);
    for (int j = 0; j < m; ++j) idx[size_t(j)] = im.nearest(target[size_t(j)]);
    int d1 = t.square(t.sub(moving, t.input(near_t)));
    int d2 = t.square(t.sub(t.gather_rows(moving, idx), t.input(points_to_tensor(target))));
    if (squared)
        return t.add(t.scale(t.sum_all(d1), 1.0 / n), t.scale(t.sum_all(d2), 1.0 / m));
    int l1 = t.mean_all(t.sqrt_(t.add_scalar(t.row_sum(d1), 1e-18)));
    int l2 = t.mean_all(t.sqrt_(t.add_scalar(t.row_sum(d2), 1e-18)));
    return t.add(l1, l2);
}

// ---- edge length preservation ----

inline int taped_loss_edge_length(Tape& t, const Mesh& base, int deformed) {
    auto edges = unique_edges(base);
    require(!edges.empty(), "mesh has no edges");
    std::vector<int> ea, eb;
    Tensor base_len({int(edges.size()), 1});
    for (size_t e = 0; e < edges.size(); ++e) {
        ea.push_back(edges[e][0]);
        eb.push_back(edges[e][1]);
        base_len.at(int(e), 0) =
            (base.vertices[size_t(edges[e][0])] - base.vertices[size_t(edges[e][1])]).norm();
    }
    int diff = t.sub(t.gather_rows(deformed, ea), t.gather_rows(deformed, eb));
    int len = t.sqrt_(t.add_scalar(t.row_sum(t.square(diff)), 1e-18));
    return t.mean_all(t.square(t.sub(len, t.input(base_len))));
}

inline double loss_edge_length(const Mesh& base, const Mesh& deformed) {
    require(base.n_vertices() == deformed.n_vertices(), "meshes must share vertices");
    Tape t;
    return t.value(taped_loss_edge_length(t, base, t.input(deformed.vertex_tensor()))).value();
}

// ---- uniform Laplacian smoothness ----

inline int taped_loss_laplacian(Tape& t, const NeighborLists& nb, int vertices) {
    int lap = t.sub(vertices, t.neighbor_mean(vertices, nb));
    return t.mean_all(t.row_sum(t.square(lap)));
}

inline double loss_laplacian(const Mesh& deformed) {
    Tape t;
    return t.value(taped_loss_laplacian(t, vertex_neighbors(deformed), t.input(deformed.vertex_tensor())))
        .value();
}

// ---- deformation-magnitude mapping ----
// (chamfer(base, deformed) / |z_d| - phi)^2 with a learnable phi. A
// near-zero code contributes the phi^2 limit.

inline int taped_loss_map(Tape& t, int cham, int z_d, int phi) {
    double zn = std::sqrt(t.value(z_d).squared_norm());
    int ratio;
    if (zn < 1e-8) {
        ratio = t.input(Tensor::scalar(0.0));
    } else {
        int norm = t.sqrt_(t.sum_all(t.square(z_d)));
        ratio = t.mul(cham, t.recip(norm));
    }
    return t.square(t.sub(ratio, phi));
}

inline double loss_map(const Mesh& base, const Mesh& deformed, const Tensor& z_d, double phi) {
    double cham = chamfer(base.vertices, deformed.vertices, true);
    double zn = z_d.norm();
    double ratio = zn < 1e-8 ? 0.0 : cham / zn;
    return sqr(ratio - phi);
}

// ---- boundary length ----
// Sum over cyclic contour pairs of the change in adjacent-vertex distance.

inline int taped_loss_boundary_length(Tape& t, const Mesh& base, int deformed) {
    const auto& c = base.contour;
    require(c.size() >= 2, "contour too short");
    std::vector<int> ia(c.begin(), c.end()), ib;
    for (size_t i = 0; i < c.size(); ++i) ib.push_back(c[(i + 1) % c.size()]);
    Tensor base_len({int(c.size()), 1});
    for (size_t i = 0; i < c.size(); ++i)
        base_len.at(int(i), 0) = (base.vertices[size_t(ia[i])] - base.vertices[size_t(ib[i])]).norm();
    int diff = t.sub(t.gather_rows(deformed, ia), t.gather_rows(deformed, ib));
    int len = t.sqrt_(t.add_scalar(t.row_sum(t.square(diff)), 1e-18));
    return t.sum_all(t.square(t.sub(len, t.input(base_len))));
}

inline double loss_boundary_length(const Mesh& base, const Mesh& deformed) {
    require(base.n_vertices() == deformed.n_vertices(), "meshes must share vertices");
    Tape t;
    return t.value(taped_loss_boundary_length(t, base, t.input(deformed.vertex_tensor()))).value();
}

// ---- face angle ----
// Faces touching the contour: 1/(angle at the contour vertex + eps), summed.
// With several contour vertices on a face, the lowest vertex id anchors it.

struct BoundaryFaceAngles {
    std::vector<int> apex, left, right;  // per boundary face
};

inline BoundaryFaceAngles boundary_face_corners(const Mesh& m) {
    std::vector<char> on_contour(size_t(m.n_vertices()), 0);
    for (int v : m.contour) on_contour[size_t(v)] = 1;
    BoundaryFaceAngles out;
    for (const auto& f : m.faces) {
        int apex = -1;
        for (int v : f)
            if (on_contour[size_t(v)] && (apex < 0 || v < apex)) apex = v;
        if (apex < 0) continue;
        std::vector<int> rest;
        for (int v : f)
            if (v != apex) rest.push_back(v);
        out.apex.push_back(apex);
        out.left.push_back(rest[0]);
        out.right.push_back(rest[1]);
    }
    return out;
}

inline int taped_loss_face_angle(Tape& t, const BoundaryFaceAngles& bf, int vertices,
                                 double eps = 1e-6) {
    require(!bf.apex.empty(), "no boundary faces");
    int a = t.gather_rows(vertices, bf.apex);
    int l = t.gather_rows(vertices, bf.left);
    int r = t.gather_rows(vertices, bf.right);
    int e1 = t.sub(l, a), e2 = t.sub(r, a);
    int dot = t.row_sum(t.mul(e1, e2));
    int n1 = t.sqrt_(t.add_scalar(t.row_sum(t.square(e1)), 1e-18));
    int n2 = t.sqrt_(t.add_scalar(t.row_sum(t.square(e2)), 1e-18));
    int cosv = t.clamp(t.mul(dot, t.recip(t.mul(n1, n2))), -1.0 + 1e-7, 1.0 - 1e-7);
    int theta = t.acos_(cosv);
    return t.sum_all(t.recip(t.add_scalar(theta, eps)));
}

inline double loss_face_angle(const Mesh& deformed, double eps = 1e-6) {
    Tape t;
    return t.value(taped_loss_face_angle(t, boundary_face_corners(deformed),
                                         t.input(deformed.vertex_tensor()), eps))
        .value();
}

// ---- multi-leaf anchor ----
// Plain euclidean distance, not squared.

inline int taped_loss_anchor(Tape& t, int z_s, int z_anchor) {
    return t.sqrt_(t.add_scalar(t.sum_all(t.square(t.sub(z_s, z_anchor))), 1e-18));
}

inline double loss_anchor(const Tensor& z_s, const Tensor& z_anchor) {
    if (!z_s.same_shape(z_anchor)) throw ValidationError("latent length mismatch");
    Tensor d = z_s;
    for (size_t i = 0; i < d.size(); ++i) d[i] -= z_anchor[i];
    return d.norm();
}

// ---- metrics ----

// Mean cosine between each source vertex normal and the normal of the
// nearest predicted vertex.
inline double metric_normal_consistency(const Mesh& gt, const Mesh& pred) {
    require(gt.n_vertices() > 0 && pred.n_vertices() > 0, "empty mesh");
    std::vector<Vec3> ngt = vertex_normals(gt), npr = vertex_normals(pred);
    NnIndex index(pred.vertices);
    double s = 0.0;
    for (int i = 0; i < gt.n_vertices(); ++i)
        s += ngt[size_t(i)].dot(npr[size_t(index.nearest(gt.vertices[size_t(i)]))]);
    return s / double(gt.n_vertices());
}

// Chamfer-style distance in source units (plain distances, not squared).
inline double metric_chamfer_l2(const std::vector<Vec3>& gt, const std::vector<Vec3>& pred) {
    return chamfer(gt, pred, false);
}

}  // namespace nlf
