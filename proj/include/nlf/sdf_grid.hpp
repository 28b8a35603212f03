// Binary masks, 2D signed distance grids via jump flooding, and truncated
// unsigned 3D grids back-projected from point observations.
#pragma once

#include "nlf/geom.hpp"
#include "nlf/tensor.hpp"

namespace nlf {

struct Mask2D {
    int width = 0, height = 0;
    std::vector<uint8_t> bits;       // row-major, 1 = foreground
    double pixel_scale = 0.0;        // UV units per pixel

    Mask2D() = default;
    Mask2D(int w, int h) : width(w), height(h), bits(size_t(w) * h, 0), pixel_scale(1.0 / w) {
        require(w > 0 && h > 0, "mask dimensions must be positive");
    }

    uint8_t at(int r, int c) const { return bits[size_t(r) * width + c]; }
    uint8_t& at(int r, int c) { return bits[size_t(r) * width + c]; }
    bool inside(int r, int c) const { return r >= 0 && r < height && c >= 0 && c < width; }

    int count_foreground() const {
        int n = 0;
        for (uint8_t b : bits) n += b != 0;
        return n;
    }
};

inline double mask_iou(const Mask2D& a, const Mask2D& b) {
    require(a.width == b.width && a.height == b.height, "mask IoU needs equal dimensions");
    int inter = 0, uni = 0;
    for (size_t i = 0; i < a.bits.size(); ++i) {
        bool fa = a.bits[i] != 0, fb = b.bits[i] != 0;
        inter += fa && fb;
        uni += fa || fb;
    }
    return uni == 0 ? 1.0 : double(inter) / double(uni);
}

// Keeps the largest 4-connected foreground component, fills single-pixel
// holes, then shaves dangling single-width filament tips. Segmentation noise
// otherwise derails boundary tracing.
inline Mask2D cleanup_mask(const Mask2D& in) {
    Mask2D m = in;
    // largest component
    std::vector<int> label(m.bits.size(), -1);
    int best_label = -1, best_count = 0, next = 0;
    std::vector<int> stack;
    for (int r = 0; r < m.height; ++r)
        for (int c = 0; c < m.width; ++c) {
            size_t i = size_t(r) * m.width + c;
            if (!m.bits[i] || label[i] >= 0) continue;
            int count = 0;
            stack.assign(1, int(i));
            label[i] = next;
            while (!stack.empty()) {
                int p = stack.back();
                stack.pop_back();
                ++count;
                int pr = p / m.width, pc = p % m.width;
                const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
                for (int k = 0; k < 4; ++k) {
                    int nr = pr + dr[k], nc = pc + dc[k];
                    if (!m.inside(nr, nc)) continue;
                    size_t ni = size_t(nr) * m.width + nc;
                    if (m.bits[ni] && label[ni] < 0) {
                        label[ni] = next;
                        stack.push_back(int(ni));
                    }
                }
            }
            if (count > best_count) {
                best_count = count;
                best_label = next;
            }
            ++next;
        }
    if (best_label < 0) throw ValidationError("mask has no foreground");
    for (size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = label[i] == best_label ? 1 : 0;
    // fill single-pixel holes
    for (int r = 0; r < m.height; ++r)
        for (int c = 0; c < m.width; ++c) {
            if (m.at(r, c)) continue;
            int fg = 0;
            fg += r > 0 ? m.at(r - 1, c) : 0;
            fg += r + 1 < m.height ? m.at(r + 1, c) : 0;
            fg += c > 0 ? m.at(r, c - 1) : 0;
            fg += c + 1 < m.width ? m.at(r, c + 1) : 0;
            if (fg == 4) m.at(r, c) = 1;
        }
    // shave filament tips (pixels with <=1 foreground 4-neighbour)
    for (bool changed = true; changed;) {
        changed = false;
        if (m.count_foreground() <= 4) break;
        for (int r = 0; r < m.height; ++r)
            for (int c = 0; c < m.width; ++c) {
                if (!m.at(r, c)) continue;
                int fg = 0;
                fg += r > 0 ? m.at(r - 1, c) : 0;
                fg += r + 1 < m.height ? m.at(r + 1, c) : 0;
                fg += c > 0 ? m.at(r, c - 1) : 0;
                fg += c + 1 < m.width ? m.at(r, c + 1) : 0;
                if (fg <= 1) {
                    m.at(r, c) = 0;
                    changed = true;
                }
            }
    }
    if (m.count_foreground() == 0) throw ValidationError("mask empty after cleanup");
    return m;
}

// Recenters the foreground bounding box at the canvas centre and scales it
// isotropically to 90% extent on a size x size canvas.
inline Mask2D normalize_to_canvas(const Mask2D& in, int size) {
    require(size > 0, "canvas size must be positive");
    int r0 = in.height, r1 = -1, c0 = in.width, c1 = -1;
    for (int r = 0; r < in.height; ++r)
        for (int c = 0; c < in.width; ++c)
            if (in.at(r, c)) {
                r0 = std::min(r0, r);
                r1 = std::max(r1, r);
                c0 = std::min(c0, c);
                c1 = std::max(c1, c);
            }
    if (r1 < 0) throw ValidationError("mask has no foreground");
    double bw = double(c1 - c0 + 1), bh = double(r1 - r0 + 1);
    double scale = 0.9 * double(size) / std::max(bw, bh);  // canvas px per source px
    double cr = 0.5 * (r0 + r1 + 1), cc = 0.5 * (c0 + c1 + 1);
    Mask2D out(size, size);
    for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c) {
            double sr = cr + (r + 0.5 - size / 2.0) / scale;
            double sc = cc + (c + 0.5 - size / 2.0) / scale;
            int ir = int(std::floor(sr)), ic = int(std::floor(sc));
            if (in.inside(ir, ic) && in.at(ir, ic)) out.at(r, c) = 1;
        }
    if (out.count_foreground() == 0) throw ValidationError("mask vanished during normalization");
    return out;
}

struct SdfGrid2D {
    int width = 0, height = 0;
    std::vector<double> d;     // UV units, positive inside
    double pixel_scale = 0.0;

    double at(int r, int c) const { return d[size_t(r) * width + c]; }
    double& at(int r, int c) { return d[size_t(r) * width + c]; }

    // Bilinear interpolation at a UV point; u ~ columns, v ~ rows, cell
    // centres at (c+0.5)*scale. Clamped at the border.
    double sample(double u, double v) const {
        double gc = u / pixel_scale - 0.5, gr = v / pixel_scale - 0.5;
        gc = std::min(double(width - 1), std::max(0.0, gc));
        gr = std::min(double(height - 1), std::max(0.0, gr));
        int c0 = std::min(width - 2, std::max(0, int(gc)));
        int r0 = std::min(height - 2, std::max(0, int(gr)));
        if (width == 1) c0 = 0;
        if (height == 1) r0 = 0;
        double fc = gc - c0, fr = gr - r0;
        int c1 = std::min(width - 1, c0 + 1), r1 = std::min(height - 1, r0 + 1);
        double v00 = at(r0, c0), v01 = at(r0, c1), v10 = at(r1, c0), v11 = at(r1, c1);
        return (1 - fr) * ((1 - fc) * v00 + fc * v01) + fr * ((1 - fc) * v10 + fc * v11);
    }
};

// Signed distance to the nearest boundary cell (foreground pixels touching
// background), positive inside, zero on the boundary cells themselves.
// One initial unit pass followed by halving jumps; the result deviates from
// the exact transform by at most about one cell diagonal.
inline SdfGrid2D jump_flood_sdf(const Mask2D& mask, bool normalize = false) {
    const int w = mask.width, h = mask.height;
    int fg = mask.count_foreground();
    if (fg == 0) throw ValidationError("distance transform: all-background mask");
    if (fg == w * h) throw ValidationError("distance transform: all-foreground mask");

    // seed = index of the closest known boundary cell, -1 = unknown
    std::vector<int> seed(size_t(w) * h, -1);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            if (!mask.at(r, c)) continue;
            bool edge = r == 0 || r == h - 1 || c == 0 || c == w - 1 || !mask.at(r - 1, c) ||
                        !mask.at(r + 1, c) || !mask.at(r, c - 1) || !mask.at(r, c + 1);
            if (edge) seed[size_t(r) * w + c] = r * w + c;
        }

    auto dist2 = [&](int idx, int r, int c) {
        int sr = idx / w, sc = idx % w;
        double dr = double(sr - r), dc = double(sc - c);
        return dr * dr + dc * dc;
    };
    auto pass = [&](int step) {
        std::vector<int> next = seed;
        for (int r = 0; r < h; ++r)
            for (int c = 0; c < w; ++c) {
                int best = next[size_t(r) * w + c];
                double bd = best >= 0 ? dist2(best, r, c) : 1e300;
                for (int dr = -1; dr <= 1; ++dr)
                    for (int dc = -1; dc <= 1; ++dc) {
                        if (dr == 0 && dc == 0) continue;
                        int nr = r + dr * step, nc = c + dc * step;
                        if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
                        int s = seed[size_t(nr) * w + nc];
                        if (s < 0) continue;
                        double d2 = dist2(s, r, c);
                        if (d2 < bd) {
                            bd = d2;
                            best = s;
                        }
                    }
                next[size_t(r) * w + c] = best;
            }
        seed = std::move(next);
    };
    pass(1);
    for (int step = std::max(w, h) / 2; step >= 1; step /= 2) pass(step);

    SdfGrid2D out;
    out.width = w;
    out.height = h;
    out.pixel_scale = mask.pixel_scale;
    out.d.resize(size_t(w) * h);
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
            int s = seed[size_t(r) * w + c];
            if (s < 0) throw NumericalError("distance transform: unreached cell");
            double dist = std::sqrt(dist2(s, r, c)) * mask.pixel_scale;
            out.at(r, c) = mask.at(r, c) ? dist : -dist;
        }
    if (normalize) {
        double mx = 0.0;
        for (double v : out.d) mx = std::max(mx, std::fabs(v));
        if (mx > 0.0)
            for (double& v : out.d) v /= mx;
    }
    return out;
}

inline double truncate_sdf(double d, double delta) {
    require(delta > 0.0, "truncation width must be positive");
    return std::min(delta, std::max(-delta, d));
}

// Per-cell sigmoid(k*d); the binary mask uses >= 0.5, i.e. d >= 0 counts as
// foreground, which makes the distance-transform round trip exact.
inline Tensor sdf_to_soft_mask(const Tensor& d, double k) {
    require(is_finite(k), "slope k must be finite");
    Tensor out = d;
    for (size_t i = 0; i < out.size(); ++i) {
        double x = k * out[i];
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    return out;
}

inline Mask2D threshold_soft_mask(const Tensor& soft, int width, int height) {
    require(int(soft.size()) == width * height, "soft mask size mismatch");
    Mask2D m(width, height);
    for (size_t i = 0; i < soft.size(); ++i) m.bits[i] = soft[i] >= 0.5 ? 1 : 0;
    return m;
}

struct SdfGrid3D {
    int resolution = 0;
    std::vector<double> values;  // truncated unsigned distances, [0, delta]
    Vec3 origin;                 // centre of voxel (0,0,0), millimetres
    double voxel_size = 0.0;
    double delta = 0.0;

    double at(int x, int y, int z) const {
        return values[(size_t(z) * resolution + y) * resolution + x];
    }
    double& at(int x, int y, int z) {
        return values[(size_t(z) * resolution + y) * resolution + x];
    }
    Vec3 voxel_center(int x, int y, int z) const {
        return origin + Vec3{x * voxel_size, y * voxel_size, z * voxel_size};
    }
};

// Truncated unsigned distance from every voxel centre to the nearest
// observed point. Single-view leaf scans carry no reliable inside/outside,
// so no sign is assigned.
inline SdfGrid3D backproject_to_grid(const std::vector<Vec3>& points, int resolution,
                                     double delta_grid) {
    require(resolution >= 2, "grid resolution must be at least 2");
    require(delta_grid > 0.0, "truncation width must be positive");
    if (points.size() < 50) throw ValidationError("too few points to back-project (need 50)");
    Vec3 lo = points[0], hi = points[0];
    for (const Vec3& p : points) {
        lo = {std::min(lo.x, p.x), std::min(lo.y, p.y), std::min(lo.z, p.z)};
        hi = {std::max(hi.x, p.x), std::max(hi.y, p.y), std::max(hi.z, p.z)};
    }
    Vec3 center = (lo + hi) * 0.5;
    double ext = std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z, 1e-6}) * 1.1;
    SdfGrid3D g;
    g.resolution = resolution;
    g.voxel_size = ext / double(resolution - 1);
    g.origin = center - Vec3{ext / 2.0, ext / 2.0, ext / 2.0};
    g.delta = delta_grid;
    g.values.resize(size_t(resolution) * resolution * resolution);
    NnIndex index(points);
    parallel_for(size_t(resolution), [&](size_t z0, size_t z1) {
        for (size_t z = z0; z < z1; ++z)
            for (int y = 0; y < resolution; ++y)
                for (int x = 0; x < resolution; ++x) {
                    double d = std::sqrt(index.nearest_dist2(g.voxel_center(x, y, int(z))));
                    g.at(x, y, int(z)) = std::min(d, delta_grid);
                }
    });
    return g;
}

struct SdfSample {
    double u = 0.0, v = 0.0, d = 0.0;
};

// Half the samples land where the interpolated |d| is under two cells, half
// uniformly over the unit square.
inline std::vector<SdfSample> sample_training_points(const SdfGrid2D& grid, int n, uint64_t seed) {
    require(n >= 1, "need at least one sample");
    Rng rng(seed);
    double near_band = 2.0 * grid.pixel_scale;
    std::vector<std::pair<int, int>> near_cells;
    for (int r = 0; r < grid.height; ++r)
        for (int c = 0; c < grid.width; ++c)
            if (std::fabs(grid.at(r, c)) < near_band) near_cells.emplace_back(r, c);
    std::vector<SdfSample> out;
    out.reserve(size_t(n));
    int n_near = near_cells.empty() ? 0 : n / 2;
    for (int i = 0; i < n_near; ++i) {
        const auto& [r, c] = near_cells[rng.uniform_index(near_cells.size())];
        SdfSample s;
        bool ok = false;
        for (int tries = 0; tries < 100 && !ok; ++tries) {
            s.u = (c + rng.uniform()) * grid.pixel_scale;
            s.v = (r + rng.uniform()) * grid.pixel_scale;
            s.d = grid.sample(s.u, s.v);
            ok = std::fabs(s.d) < near_band;
        }
        if (!ok) {
            s.u = (c + 0.5) * grid.pixel_scale;
            s.v = (r + 0.5) * grid.pixel_scale;
            s.d = grid.at(r, c);
        }
        out.push_back(s);
    }
    while (int(out.size()) < n) {
        SdfSample s;
        s.u = rng.uniform();
        s.v = rng.uniform();
        s.d = grid.sample(s.u, s.v);
        out.push_back(s);
    }
    return out;
}

}  // namespace nlf
