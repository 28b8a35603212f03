// Dataset-preparation alignment chain: leaf-specific rigid alignment,
// contour-keypoint as-rigid-as-possible registration, and Gaussian-kernel
// coherent point drift for dense correspondences.
#pragma once

#include "nlf/losses.hpp"

namespace nlf {

struct RigidPose {
    Mat3 rotation = mat3_identity();  // rows are the canonical x, y, z axes
    Vec3 centroid;
    double scale = 1.0;

    Vec3 apply(const Vec3& p) const { return mat3_apply(rotation, p - centroid) * scale; }
    Vec3 invert(const Vec3& q) const {
        return mat3_apply(mat3_transpose(rotation), q * (1.0 / scale)) + centroid;
    }
};

// Occupancy count of the cloud projected along `axis`, on the plane spanned
// by the other two directions. Cell size is tied to the overall cloud extent
// so the measure is comparable across candidate axes.
inline double projected_shadow_area(const std::vector<Vec3>& pts, const Vec3& axis, const Vec3& u,
                                    double cell) {
    Vec3 w = axis.cross(u).normalized();
    double ulo = 1e300, uhi = -1e300, wlo = 1e300, whi = -1e300;
    std::vector<std::pair<double, double>> proj(pts.size());
    for (size_t i = 0; i < pts.size(); ++i) {
        double pu = pts[i].dot(u), pw = pts[i].dot(w);
        proj[i] = {pu, pw};
        ulo = std::min(ulo, pu);
        uhi = std::max(uhi, pu);
        wlo = std::min(wlo, pw);
        whi = std::max(whi, pw);
    }
    int nu = std::max(1, int((uhi - ulo) / cell) + 1);
    int nw = std::max(1, int((whi - wlo) / cell) + 1);
    std::vector<char> occ(size_t(nu) * nw, 0);
    for (const auto& [pu, pw] : proj) {
        int cu = std::min(nu - 1, std::max(0, int((pu - ulo) / cell)));
        int cw = std::min(nw - 1, std::max(0, int((pw - wlo) / cell)));
        occ[size_t(cw) * nu + cu] = 1;
    }
    double count = 0.0;
    for (char c : occ) count += c;
    return count * cell * cell;
}

// Canonical leaf frame: x along the largest principal direction (sign from
// the third moment), y the perpendicular direction whose line-of-sight
// shadow is smallest over 180 one-degree candidates, z completing the frame.
// The centroid moves to the origin and the x-extent is scaled to 1.
inline RigidPose rigid_align(const std::vector<Vec3>& points, int angle_steps = 180) {
    if (points.size() < 10) throw ValidationError("rigid alignment needs at least 10 points");
    Vec3 mu;
    for (const Vec3& p : points) mu += p;
    mu = mu * (1.0 / double(points.size()));
    std::vector<Vec3> c(points.size());
    Mat3 cov{};
    for (size_t i = 0; i < points.size(); ++i) {
        c[i] = points[i] - mu;
        const double v[3] = {c[i].x, c[i].y, c[i].z};
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) cov[a][b] += v[a] * v[b];
    }
    Eigen3 eig = eigen_sym3(cov);
    if (eig.values[1] < 1e-12 * std::max(eig.values[0], 1e-300))
        throw NumericalError("degenerate point cloud: points are collinear");
    Vec3 x{eig.vectors[0][0], eig.vectors[1][0], eig.vectors[2][0]};
    x = x.normalized();
    double skew = 0.0;
    for (const Vec3& p : c) skew += std::pow(p.dot(x), 3.0);
    if (skew < 0.0) x = x * -1.0;

    Vec3 b1{eig.vectors[0][1], eig.vectors[1][1], eig.vectors[2][1]};
    b1 = (b1 - x * b1.dot(x)).normalized();
    Vec3 b2 = x.cross(b1);
    double ext = 0.0;
    for (const Vec3& p : c) ext = std::max({ext, std::fabs(p.x), std::fabs(p.y), std::fabs(p.z)});
    double cell = std::max(2.0 * ext, 1e-9) / 64.0;
    double best_area = 1e300;
    Vec3 y = b1;
    for (int k = 0; k < angle_steps; ++k) {
        double a = kPi * double(k) / double(angle_steps);
        Vec3 cand = b1 * std::cos(a) + b2 * std::sin(a);
        double area = projected_shadow_area(c, cand, x, cell);
        if (area < best_area - 1e-15) {
            best_area = area;
            y = cand;
        }
    }
    double yskew = 0.0;
    for (const Vec3& p : c) yskew += std::pow(p.dot(y), 3.0);
    if (yskew < 0.0) y = y * -1.0;
    Vec3 z = x.cross(y);

    RigidPose pose;
    pose.rotation = {{{x.x, x.y, x.z}, {y.x, y.y, y.z}, {z.x, z.y, z.z}}};
    pose.centroid = mu;
    double xlo = 1e300, xhi = -1e300;
    for (const Vec3& p : c) {
        double px = p.dot(x);
        xlo = std::min(xlo, px);
        xhi = std::max(xhi, px);
    }
    pose.scale = xhi - xlo > 1e-12 ? 1.0 / (xhi - xlo) : 1.0;
    return pose;
}

// Equal arc-length positions along a closed polyline, starting at the max-x
// point (the leaf tip). Returns indices into the polyline. Asking for
// exactly as many points as the polyline has returns every vertex in order.
inline std::vector<int> sample_contour_keypoints(const std::vector<Vec3>& contour, int n) {
    require(n >= 1, "need at least one keypoint");
    const int m = int(contour.size());
    require(m >= 2, "contour too short");
    int tip = 0;
    for (int i = 1; i < m; ++i)
        if (contour[size_t(i)].x > contour[size_t(tip)].x) tip = i;
    if (n >= m) {
        std::vector<int> all(size_t(m), 0);
        for (int i = 0; i < m; ++i) all[size_t(i)] = (tip + i) % m;
        return all;
    }
    std::vector<double> arc(size_t(m) + 1, 0.0);
    for (int i = 0; i < m; ++i) {
        const Vec3& a = contour[size_t((tip + i) % m)];
        const Vec3& b = contour[size_t((tip + i + 1) % m)];
        arc[size_t(i) + 1] = arc[size_t(i)] + (b - a).norm();
    }
    double total = arc[size_t(m)];
    require(total > 0.0, "contour has zero length");
    std::vector<int> out;
    std::vector<char> used(size_t(m), 0);
    for (int k = 0; k < n; ++k) {
        double target = total * double(k) / double(n);
        int best = 0;
        double bd = 1e300;
        for (int i = 0; i < m; ++i) {
            double d = std::fabs(arc[size_t(i)] - target);
            d = std::min(d, total - d);
            if (!used[size_t(i)] && d < bd) {
                bd = d;
                best = i;
            }
        }
        used[size_t(best)] = 1;
        out.push_back((tip + best) % m);
    }
    return out;
}

// ---- as-rigid-as-possible registration ----

struct ArapResult {
    std::vector<Vec3> vertices;
    std::vector<double> energy;  // per iteration, non-increasing
};

inline double arap_energy(const std::vector<Vec3>& rest, const std::vector<Vec3>& cur,
                          const NeighborLists& nb, const std::vector<Mat3>& rot,
                          const std::vector<int>& kp, const std::vector<Vec3>& tgt) {
    double e = 0.0;
    int n = int(rest.size());
    for (int i = 0; i < n; ++i)
        for (int p = nb.offsets[size_t(i)]; p < nb.offsets[size_t(i) + 1]; ++p) {
            int u = nb.indices[size_t(p)];
            Vec3 want = mat3_apply(rot[size_t(i)], rest[size_t(i)] - rest[size_t(u)]);
            e += (cur[size_t(i)] - cur[size_t(u)] - want).squared_norm();
        }
    for (size_t k = 0; k < kp.size(); ++k) {
        int i = kp[k];
        double deg = double(nb.degree(i));
        e += deg * (cur[size_t(i)] - tgt[k]).squared_norm();
    }
    return e;
}

// Alternates per-vertex rotation fits (closest rotation to the ring
// covariance) with a sparse Laplacian solve for positions. Keypoint data
// terms ride inside the ring sums, which weights them by ring size.
inline ArapResult arap_register(const Mesh& base, const std::vector<int>& keypoints,
                                const std::vector<Vec3>& targets, int iters) {
    require(keypoints.size() == targets.size(), "keypoint/target count mismatch");
    require(!keypoints.empty(), "need at least one keypoint");
    const int n = base.n_vertices();
    NeighborLists nb = vertex_neighbors(base);
    std::vector<Vec3> rest = base.vertices, cur = base.vertices;
    std::vector<Mat3> rot(size_t(n), mat3_identity());
    std::vector<double> kp_weight(size_t(n), 0.0);
    std::vector<Vec3> kp_target(size_t(n), Vec3{});
    for (size_t k = 0; k < keypoints.size(); ++k) {
        int i = keypoints[k];
        require(i >= 0 && i < n, "keypoint index out of range");
        kp_weight[size_t(i)] = double(nb.degree(i));
        kp_target[size_t(i)] = targets[k];
    }

    // constant sparse structure: 2L + W
    SparseSym a;
    a.n = n;
    a.offsets.push_back(0);
    for (int i = 0; i < n; ++i) {
        a.cols.push_back(i);
        a.vals.push_back(2.0 * double(nb.degree(i)) + kp_weight[size_t(i)]);
        for (int p = nb.offsets[size_t(i)]; p < nb.offsets[size_t(i) + 1]; ++p) {
            a.cols.push_back(nb.indices[size_t(p)]);
            a.vals.push_back(-2.0);
        }
        a.offsets.push_back(int(a.cols.size()));
    }

    ArapResult res;
    for (int it = 0; it < iters; ++it) {
        // local step
        for (int i = 0; i < n; ++i) {
            Mat3 m{};
            for (int p = nb.offsets[size_t(i)]; p < nb.offsets[size_t(i) + 1]; ++p) {
                int u = nb.indices[size_t(p)];
                Vec3 e_cur = cur[size_t(i)] - cur[size_t(u)];
                Vec3 e_rest = rest[size_t(i)] - rest[size_t(u)];
                const double ec[3] = {e_cur.x, e_cur.y, e_cur.z};
                const double er[3] = {e_rest.x, e_rest.y, e_rest.z};
                for (int r = 0; r < 3; ++r)
                    for (int s = 0; s < 3; ++s) m[r][s] += ec[r] * er[s];
            }
            double norm = 0.0;
            for (int r = 0; r < 3; ++r)
                for (int s = 0; s < 3; ++s) norm += m[r][s] * m[r][s];
            rot[size_t(i)] = norm < 1e-24 ? mat3_identity() : polar_rotation(m);
        }
        // global step, one solve per coordinate
        std::vector<Vec3> rhs(size_t(n), Vec3{});
        for (int i = 0; i < n; ++i) {
            Vec3 acc;
            for (int p = nb.offsets[size_t(i)]; p < nb.offsets[size_t(i) + 1]; ++p) {
                int u = nb.indices[size_t(p)];
                Vec3 e_rest = rest[size_t(i)] - rest[size_t(u)];
                acc += mat3_apply(rot[size_t(i)], e_rest) + mat3_apply(rot[size_t(u)], e_rest);
            }
            rhs[size_t(i)] = acc + kp_target[size_t(i)] * kp_weight[size_t(i)];
        }
        for (int axis = 0; axis < 3; ++axis) {
            std::vector<double> b(size_t(n), 0.0);
            for (int i = 0; i < n; ++i)
                b[size_t(i)] = axis == 0 ? rhs[size_t(i)].x : axis == 1 ? rhs[size_t(i)].y : rhs[size_t(i)].z;
            std::vector<double> sol = conjugate_gradient(a, b, 1e-12, 4000);
            for (int i = 0; i < n; ++i)
                (axis == 0 ? cur[size_t(i)].x : axis == 1 ? cur[size_t(i)].y : cur[size_t(i)].z) =
                    sol[size_t(i)];
        }
        std::vector<Vec3> tg;
        std::vector<int> kpl;
        for (int i = 0; i < n; ++i)
            if (kp_weight[size_t(i)] > 0.0) {
                kpl.push_back(i);
                tg.push_back(kp_target[size_t(i)]);
            }
        double e = arap_energy(rest, cur, nb, rot, kpl, tg);
        if (!res.energy.empty() && e > res.energy.back() + 1e-9 + 1e-9 * std::fabs(res.energy.back()))
            throw NumericalError("registration energy increased");
        res.energy.push_back(e);
    }
    res.vertices = std::move(cur);
    return res;
}

// ---- coherent point drift ----

struct CorrespondenceMap {
    std::vector<int> target_index;     // per source point
    std::vector<double> confidence;    // in [0,1]
};

struct CpdResult {
    std::vector<Vec3> moved;           // source after the recovered motion
    CorrespondenceMap correspondence;
    std::vector<double> objective;     // penalized negative log-likelihood per iteration
    double sigma2 = 0.0;
    int iterations = 0;
};

// Classic Gaussian-kernel coherent point drift with a uniform outlier
// component. The motion field is T = Y + G W with g_ij = exp(-|y_i-y_j|^2 /
// (2 beta^2)); each EM step solves (d(P1) G + lambda sigma^2 I) W =
// P X - d(P1) Y and refreshes sigma^2.
inline CpdResult cpd_register(const std::vector<Vec3>& source, const std::vector<Vec3>& target,
                              double beta = 2.0, double lambda = 3.0, int max_iters = 60,
                              double omega = 0.1) {
    if (source.empty() || target.empty()) throw ValidationError("point cloud is empty");
    const int m = int(source.size()), n = int(target.size());

    // common normalization keeps the kernel width meaningful
    Vec3 mu_s, mu_t;
    for (const Vec3& p : source) mu_s += p;
    for (const Vec3& p : target) mu_t += p;
    mu_s = mu_s * (1.0 / m);
    mu_t = mu_t * (1.0 / n);
    double rms = 0.0;
    for (const Vec3& p : source) rms += (p - mu_s).squared_norm();
    for (const Vec3& p : target) rms += (p - mu_t).squared_norm();
    double scale = std::sqrt(rms / double(m + n));
    if (scale < 1e-12) scale = 1.0;
    std::vector<Vec3> y(size_t(m), Vec3{}), x(size_t(n), Vec3{});
    for (int i = 0; i < m; ++i) y[size_t(i)] = (source[size_t(i)] - mu_s) * (1.0 / scale);
    for (int j = 0; j < n; ++j) x[size_t(j)] = (target[size_t(j)] - mu_t) * (1.0 / scale);

    std::vector<double> g(size_t(m) * m, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j)
            g[size_t(i) * m + j] = std::exp(-(y[size_t(i)] - y[size_t(j)]).squared_norm() /
                                            (2.0 * beta * beta));

    double sigma2 = 0.0;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) sigma2 += (x[size_t(j)] - y[size_t(i)]).squared_norm();
    sigma2 /= double(3 * m * n);

    // fixed uniform outlier density over the target bounding box
    Vec3 lo = x[0], hi = x[0];
    for (const Vec3& p : x) {
        lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
        hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
    }
    double volume = std::max((hi.x - lo.x) * (hi.y - lo.y) * (hi.z - lo.z), 1e-6);

    std::vector<double> w(size_t(m) * 3, 0.0);
    std::vector<Vec3> t = y;
    std::vector<double> p(size_t(m) * n, 0.0);
    CpdResult res;

    auto nll = [&](double s2) {
        double e = 0.0;
        double cnorm = (1.0 - omega) / (double(m) * std::pow(2.0 * kPi * s2, 1.5));
        for (int j = 0; j < n; ++j) {
            double s = omega / volume;
            for (int i = 0; i < m; ++i)
                s += cnorm * std::exp(-(x[size_t(j)] - t[size_t(i)]).squared_norm() / (2.0 * s2));
            e -= std::log(std::max(s, 1e-300));
        }
        double reg = 0.0;
        for (int a = 0; a < 3; ++a)
            for (int i = 0; i < m; ++i) {
                double gw = 0.0;
                for (int j = 0; j < m; ++j) gw += g[size_t(i) * m + j] * w[size_t(j) * 3 + a];
                reg += w[size_t(i) * 3 + a] * gw;
            }
        return e + 0.5 * lambda * reg;
    };

    double prev = nll(sigma2);
    res.objective.push_back(prev);
    for (int it = 0; it < max_iters; ++it) {
        // E-step
        double c = omega / (1.0 - omega) * double(m) / volume * std::pow(2.0 * kPi * sigma2, 1.5);
        for (int j = 0; j < n; ++j) {
            double denom = c;
            for (int i = 0; i < m; ++i) {
                double v = std::exp(-(x[size_t(j)] - t[size_t(i)]).squared_norm() / (2.0 * sigma2));
                p[size_t(i) * n + j] = v;
                denom += v;
            }
            if (denom < 1e-300) denom = 1e-300;
            for (int i = 0; i < m; ++i) p[size_t(i) * n + j] /= denom;
        }
        std::vector<double> p1(size_t(m), 0.0);
        double np = 0.0;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                p1[size_t(i)] += p[size_t(i) * n + j];
                np += p[size_t(i) * n + j];
            }
        if (np < 1e-12) throw NumericalError("all points explained by the outlier component");

        // M-step: A = d(P1) G + lambda sigma2 I, rhs = P X - d(P1) Y
        std::vector<double> a(size_t(m) * m);
        std::vector<std::vector<double>> rhs(3, std::vector<double>(size_t(m)));
        auto build = [&](double lam) {
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < m; ++j)
                    a[size_t(i) * m + j] =
                        p1[size_t(i)] * g[size_t(i) * m + j] + (i == j ? lam * sigma2 : 0.0);
            for (int i = 0; i < m; ++i) {
                Vec3 px;
                for (int j = 0; j < n; ++j) px += x[size_t(j)] * p[size_t(i) * n + j];
                Vec3 r = px - y[size_t(i)] * p1[size_t(i)];
                rhs[0][size_t(i)] = r.x;
                rhs[1][size_t(i)] = r.y;
                rhs[2][size_t(i)] = r.z;
            }
        };
        // Solve via an asymmetric-safe route: the system is not symmetric in
        // general (d(P1)G), so use Gaussian elimination with partial pivoting.
        auto solve = [&](double lam) {
            build(lam);
            std::vector<double> lu = a;
            std::vector<int> piv(size_t(m), 0);
            for (int i = 0; i < m; ++i) piv[size_t(i)] = i;
            for (int k = 0; k < m; ++k) {
                int best = k;
                for (int i = k + 1; i < m; ++i)
                    if (std::fabs(lu[size_t(i) * m + k]) > std::fabs(lu[size_t(best) * m + k]))
                        best = i;
                if (std::fabs(lu[size_t(best) * m + k]) < 1e-14) return false;
                if (best != k) {
                    for (int j = 0; j < m; ++j)
                        std::swap(lu[size_t(k) * m + j], lu[size_t(best) * m + j]);
                    std::swap(piv[size_t(k)], piv[size_t(best)]);
                }
                for (int i = k + 1; i < m; ++i) {
                    double f = lu[size_t(i) * m + k] / lu[size_t(k) * m + k];
                    lu[size_t(i) * m + k] = f;
                    for (int j = k + 1; j < m; ++j) lu[size_t(i) * m + j] -= f * lu[size_t(k) * m + j];
                }
            }
            for (int axis = 0; axis < 3; ++axis) {
                std::vector<double> b(size_t(m), 0.0);
                for (int i = 0; i < m; ++i) b[size_t(i)] = rhs[size_t(axis)][size_t(piv[size_t(i)])];
                for (int i = 0; i < m; ++i)
                    for (int k2 = 0; k2 < i; ++k2) b[size_t(i)] -= lu[size_t(i) * m + k2] * b[size_t(k2)];
                for (int i = m - 1; i >= 0; --i) {
                    for (int k2 = i + 1; k2 < m; ++k2) b[size_t(i)] -= lu[size_t(i) * m + k2] * b[size_t(k2)];
                    b[size_t(i)] /= lu[size_t(i) * m + i];
                }
                for (int i = 0; i < m; ++i) w[size_t(i) * 3 + axis] = b[size_t(i)];
            }
            return true;
        };
        if (!solve(lambda)) {
            if (!solve(lambda * 10.0)) throw NumericalError("motion-field system is singular");
        }

        for (int i = 0; i < m; ++i) {
            Vec3 gw;
            for (int j = 0; j < m; ++j) {
                double gij = g[size_t(i) * m + j];
                gw += Vec3{w[size_t(j) * 3 + 0], w[size_t(j) * 3 + 1], w[size_t(j) * 3 + 2]} * gij;
            }
            t[size_t(i)] = y[size_t(i)] + gw;
        }

        // sigma^2 refresh
        double xpx = 0.0, trxt = 0.0, tpt = 0.0;
        std::vector<double> pt1(size_t(n), 0.0);
        for (int j = 0; j < n; ++j)
            for (int i = 0; i < m; ++i) pt1[size_t(j)] += p[size_t(i) * n + j];
        for (int j = 0; j < n; ++j) xpx += pt1[size_t(j)] * x[size_t(j)].squared_norm();
        for (int i = 0; i < m; ++i) {
            Vec3 px;
            for (int j = 0; j < n; ++j) px += x[size_t(j)] * p[size_t(i) * n + j];
            trxt += px.dot(t[size_t(i)]);
            tpt += p1[size_t(i)] * t[size_t(i)].squared_norm();
        }
        double s2 = (xpx - 2.0 * trxt + tpt) / (3.0 * np);
        sigma2 = std::max(s2, 1e-10);

        double cur = nll(sigma2);
        if (cur > prev + 1e-9 + 1e-9 * std::fabs(prev))
            throw NumericalError("registration objective increased");
        res.objective.push_back(cur);
        res.iterations = it + 1;
        if (std::fabs(prev - cur) < 1e-6) {
            prev = cur;
            break;
        }
        prev = cur;
    }

    res.sigma2 = sigma2;
    res.moved.resize(size_t(m));
    for (int i = 0; i < m; ++i) res.moved[size_t(i)] = t[size_t(i)] * scale + mu_t;
    res.correspondence.target_index.resize(size_t(m));
    res.correspondence.confidence.resize(size_t(m));
    NnIndex tidx(target);
    for (int i = 0; i < m; ++i) {
        double total = 0.0, best = -1.0;
        int arg = -1;
        for (int j = 0; j < n; ++j) {
            double v = p[size_t(i) * n + j];
            total += v;
            if (v > best) {
                best = v;
                arg = j;
            }
        }
        if (total < 1e-12 || arg < 0) {
            res.correspondence.target_index[size_t(i)] = tidx.nearest(res.moved[size_t(i)]);
            res.correspondence.confidence[size_t(i)] = 0.0;
        } else {
            res.correspondence.target_index[size_t(i)] = arg;
            res.correspondence.confidence[size_t(i)] = best / total;
        }
    }
    return res;
}

}  // namespace nlf
