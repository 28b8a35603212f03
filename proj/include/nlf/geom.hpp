// Small geometry kernel: fixed-size vectors, quaternions, 3x3 factorizations,
// dense/sparse linear solves, and a uniform-grid nearest-neighbour index.
#pragma once

#include <array>

#include "nlf/common.hpp"

namespace nlf {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3() = default;
    Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3& operator+=(const Vec3& o) {
        x += o.x;
        y += o.y;
        z += o.z;
        return *this;
    }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
    double squared_norm() const { return dot(*this); }
    double norm() const { return std::sqrt(squared_norm()); }
    Vec3 normalized() const {
        double n = norm();
        return n > 0.0 ? Vec3{x / n, y / n, z / n} : Vec3{};
    }
};

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 mat3_identity() { return {{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}}; }

inline Vec3 mat3_apply(const Mat3& m, const Vec3& v) {
    return {m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z};
}

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int k = 0; k < 3; ++k) {
            double v = a[i][k];
            if (v == 0.0) continue;
            for (int j = 0; j < 3; ++j) c[i][j] += v * b[k][j];
        }
    return c;
}

inline Mat3 mat3_transpose(const Mat3& a) {
    Mat3 t;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) t[i][j] = a[j][i];
    return t;
}

inline double mat3_det(const Mat3& m) {
    return m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) -
           m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0]) +
           m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
}

// Quaternion (w, x, y, z). Rotation of a point; the caller passes an
// arbitrary quaternion which is normalized first.
struct Quat {
    double w = 1.0, x = 0.0, y = 0.0, z = 0.0;
};

inline Quat quat_normalize(const Quat& q) {
    double n = std::sqrt(q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z);
    if (n < 1e-8) throw NumericalError("degenerate quaternion");
    return {q.w / n, q.x / n, q.y / n, q.z / n};
}

inline Mat3 quat_to_mat(const Quat& qin) {
    Quat q = quat_normalize(qin);
    double w = q.w, x = q.x, y = q.y, z = q.z;
    return {{{1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)},
             {2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)},
             {2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)}}};
}

inline Vec3 quat_rotate(const Quat& q, const Vec3& v) { return mat3_apply(quat_to_mat(q), v); }

inline Quat quat_from_axis_angle(const Vec3& axis, double angle) {
    Vec3 u = axis.normalized();
    double s = std::sin(angle / 2.0);
    return {std::cos(angle / 2.0), u.x * s, u.y * s, u.z * s};
}

// ---- symmetric 3x3 eigendecomposition (cyclic Jacobi) ----
// Returns eigenvalues in descending order with matching eigenvector columns.

struct Eigen3 {
    std::array<double, 3> values;
    Mat3 vectors;  // columns
};

inline Eigen3 eigen_sym3(const Mat3& m_in) {
    Mat3 a = m_in;
    Mat3 v = mat3_identity();
    for (int sweep = 0; sweep < 64; ++sweep) {
        double off = std::fabs(a[0][1]) + std::fabs(a[0][2]) + std::fabs(a[1][2]);
        if (off < 1e-15) break;
        for (int p = 0; p < 2; ++p)
            for (int q = p + 1; q < 3; ++q) {
                if (std::fabs(a[p][q]) < 1e-18) continue;
                double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                double t = (theta >= 0.0 ? 1.0 : -1.0) /
                           (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
                for (int k = 0; k < 3; ++k) {
                    double akp = a[k][p], akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for (int k = 0; k < 3; ++k) {
                    double apk = a[p][k], aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for (int k = 0; k < 3; ++k) {
                    double vkp = v[k][p], vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
    }
    std::array<int, 3> ord = {0, 1, 2};
    std::array<double, 3> d = {a[0][0], a[1][1], a[2][2]};
    std::sort(ord.begin(), ord.end(), [&](int i, int j) { return d[size_t(i)] > d[size_t(j)]; });
    Eigen3 out;
    for (int j = 0; j < 3; ++j) {
        out.values[size_t(j)] = d[size_t(ord[size_t(j)])];
        for (int i = 0; i < 3; ++i) out.vectors[i][j] = v[i][ord[size_t(j)]];
    }
    return out;
}

// Closest rotation to a 3x3 matrix (for shape-preserving local fits):
// from M = U S V^T take R = U V^T, flipping the last column if the result
// would be a reflection.
inline Mat3 polar_rotation(const Mat3& m) {
    Mat3 mtm = mat3_mul(mat3_transpose(m), m);
    Eigen3 e = eigen_sym3(mtm);
    Mat3 vT = mat3_transpose(e.vectors);
    std::array<double, 3> s;
    for (int i = 0; i < 3; ++i) s[size_t(i)] = std::sqrt(std::max(e.values[size_t(i)], 0.0));
    // U = M V S^-1 (columns with tiny singular values completed by cross product)
    Mat3 u{};
    for (int j = 0; j < 3; ++j) {
        Vec3 vj{e.vectors[0][j], e.vectors[1][j], e.vectors[2][j]};
        Vec3 uj = mat3_apply(m, vj);
        if (s[size_t(j)] > 1e-10) {
            uj = uj * (1.0 / s[size_t(j)]);
        } else {
            Vec3 u0{u[0][0], u[1][0], u[2][0]}, u1{u[0][1], u[1][1], u[2][1]};
            uj = j == 2 ? u0.cross(u1) : Vec3{j == 0 ? 1.0 : 0.0, j == 1 ? 1.0 : 0.0, 0.0};
            uj = uj.normalized();
        }
        for (int i = 0; i < 3; ++i) u[i][j] = uj.x * (i == 0) + uj.y * (i == 1) + uj.z * (i == 2);
    }
    Mat3 r = mat3_mul(u, vT);
    if (mat3_det(r) < 0.0) {
        for (int i = 0; i < 3; ++i) u[i][2] = -u[i][2];
        r = mat3_mul(u, vT);
    }
    return r;
}

// ---- dense symmetric positive definite solve ----

class Cholesky {
public:
    explicit Cholesky(std::vector<double> a, int n) : l_(std::move(a)), n_(n) {
        for (int j = 0; j < n_; ++j) {
            for (int i = j; i < n_; ++i) {
                double s = l_[size_t(i) * n_ + j];
                for (int k = 0; k < j; ++k) s -= l_[size_t(i) * n_ + k] * l_[size_t(j) * n_ + k];
                if (i == j) {
                    if (s <= 0.0) throw NumericalError("matrix not positive definite");
                    l_[size_t(j) * n_ + j] = std::sqrt(s);
                } else {
                    l_[size_t(i) * n_ + j] = s / l_[size_t(j) * n_ + j];
                }
            }
            for (int k = j + 1; k < n_; ++k) l_[size_t(j) * n_ + k] = 0.0;
        }
    }

    // Solves A x = b in place.
    void solve(std::vector<double>& b) const {
        for (int i = 0; i < n_; ++i) {
            double s = b[size_t(i)];
            for (int k = 0; k < i; ++k) s -= l_[size_t(i) * n_ + k] * b[size_t(k)];
            b[size_t(i)] = s / l_[size_t(i) * n_ + i];
        }
        for (int i = n_ - 1; i >= 0; --i) {
            double s = b[size_t(i)];
            for (int k = i + 1; k < n_; ++k) s -= l_[size_t(k) * n_ + i] * b[size_t(k)];
            b[size_t(i)] = s / l_[size_t(i) * n_ + i];
        }
    }

private:
    std::vector<double> l_;
    int n_;
};

// ---- sparse symmetric matrix (CSR) and conjugate gradient ----

struct SparseSym {
    int n = 0;
    std::vector<int> offsets;  // n+1
    std::vector<int> cols;
    std::vector<double> vals;

    void apply(const std::vector<double>& x, std::vector<double>& y) const {
        y.assign(size_t(n), 0.0);
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            for (int p = offsets[size_t(i)]; p < offsets[size_t(i) + 1]; ++p)
                s += vals[size_t(p)] * x[size_t(cols[size_t(p)])];
            y[size_t(i)] = s;
        }
    }
};

// Jacobi-preconditioned CG; the systems here are diagonally dominant
// Laplacians so convergence is quick.
inline std::vector<double> conjugate_gradient(const SparseSym& a, const std::vector<double>& b,
                                              double tol = 1e-10, int max_iter = 2000) {
    int n = a.n;
    std::vector<double> x(size_t(n), 0.0), r = b;
    std::vector<double> z(size_t(n), 0.0), p(size_t(n), 0.0), ap(size_t(n), 0.0);
    std::vector<double> diag(size_t(n), 1.0);
    for (int i = 0; i < n; ++i)
        for (int q = a.offsets[size_t(i)]; q < a.offsets[size_t(i) + 1]; ++q)
            if (a.cols[size_t(q)] == i && a.vals[size_t(q)] != 0.0) diag[size_t(i)] = a.vals[size_t(q)];
    double bnorm = 0.0;
    for (double v : b) bnorm += v * v;
    bnorm = std::sqrt(bnorm);
    if (bnorm == 0.0) return x;
    for (int i = 0; i < n; ++i) z[size_t(i)] = r[size_t(i)] / diag[size_t(i)];
    p = z;
    double rz = 0.0;
    for (int i = 0; i < n; ++i) rz += r[size_t(i)] * z[size_t(i)];
    for (int it = 0; it < max_iter; ++it) {
        a.apply(p, ap);
        double pap = 0.0;
        for (int i = 0; i < n; ++i) pap += p[size_t(i)] * ap[size_t(i)];
        if (std::fabs(pap) < 1e-300) break;
        double alpha = rz / pap;
        double rnorm = 0.0;
        for (int i = 0; i < n; ++i) {
            x[size_t(i)] += alpha * p[size_t(i)];
            r[size_t(i)] -= alpha * ap[size_t(i)];
            rnorm += r[size_t(i)] * r[size_t(i)];
        }
        if (std::sqrt(rnorm) < tol * bnorm) break;
        double rz_new = 0.0;
        for (int i = 0; i < n; ++i) {
            z[size_t(i)] = r[size_t(i)] / diag[size_t(i)];
            rz_new += r[size_t(i)] * z[size_t(i)];
        }
        double beta = rz_new / rz;
        rz = rz_new;
        for (int i = 0; i < n; ++i) p[size_t(i)] = z[size_t(i)] + beta * p[size_t(i)];
    }
    return x;
}

// ---- nearest neighbour over a point cloud ----
// Uniform hash grid with expanding ring search; exact result.

class NnIndex {
public:
    explicit NnIndex(const std::vector<Vec3>& pts) : pts_(pts) {
        require(!pts.empty(), "nn index needs at least one point");
        lo_ = hi_ = pts[0];
        for (const Vec3& p : pts) {
            lo_ = {std::min(lo_.x, p.x), std::min(lo_.y, p.y), std::min(lo_.z, p.z)};
            hi_ = {std::max(hi_.x, p.x), std::max(hi_.y, p.y), std::max(hi_.z, p.z)};
        }
        double ext = std::max({hi_.x - lo_.x, hi_.y - lo_.y, hi_.z - lo_.z, 1e-9});
        int target = std::max(1, int(std::cbrt(double(pts.size()))));
        res_ = std::min(64, target);
        cell_ = ext / double(res_);
        cells_.assign(size_t(res_) * res_ * res_, {});
        for (size_t i = 0; i < pts.size(); ++i) cells_[cell_of(pts[i])].push_back(int(i));
    }

    // Index of the closest stored point.
    int nearest(const Vec3& q) const {
        int cx = clampi(int((q.x - lo_.x) / cell_));
        int cy = clampi(int((q.y - lo_.y) / cell_));
        int cz = clampi(int((q.z - lo_.z) / cell_));
        int best = -1;
        double best_d2 = 1e300;
        for (int ring = 0; ring < res_; ++ring) {
            bool any = false;
            for (int dz = -ring; dz <= ring; ++dz)
                for (int dy = -ring; dy <= ring; ++dy)
                    for (int dx = -ring; dx <= ring; ++dx) {
                        if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
                        int x = cx + dx, y = cy + dy, z = cz + dz;
                        if (x < 0 || y < 0 || z < 0 || x >= res_ || y >= res_ || z >= res_) continue;
                        any = true;
                        for (int i : cells_[(size_t(z) * res_ + y) * res_ + x]) {
                            double d2 = (pts_[size_t(i)] - q).squared_norm();
                            if (d2 < best_d2) {
                                best_d2 = d2;
                                best = i;
                            }
                        }
                    }
            // One extra ring after the first hit covers diagonal neighbours.
            if (best >= 0 && double(ring) * cell_ > std::sqrt(best_d2)) break;
            if (!any && best >= 0 && ring > 0) break;
        }
        if (best < 0) {
            for (size_t i = 0; i < pts_.size(); ++i) {
                double d2 = (pts_[i] - q).squared_norm();
                if (d2 < best_d2) {
                    best_d2 = d2;
                    best = int(i);
                }
            }
        }
        return best;
    }

    double nearest_dist2(const Vec3& q) const { return (pts_[size_t(nearest(q))] - q).squared_norm(); }

private:
    size_t cell_of(const Vec3& p) const {
        int x = clampi(int((p.x - lo_.x) / cell_));
        int y = clampi(int((p.y - lo_.y) / cell_));
        int z = clampi(int((p.z - lo_.z) / cell_));
        return (size_t(z) * res_ + y) * res_ + x;
    }
    int clampi(int v) const { return std::min(res_ - 1, std::max(0, v)); }

    std::vector<Vec3> pts_;
    Vec3 lo_, hi_;
    int res_ = 1;
    double cell_ = 1.0;
    std::vector<std::vector<int>> cells_;
};

}  // namespace nlf
