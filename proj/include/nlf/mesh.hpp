// Triangle mesh with per-vertex texture coordinates, plus the adjacency
// queries the deformation and loss code relies on.
#pragma once

#include "nlf/geom.hpp"
#include "nlf/tape.hpp"

namespace nlf {

struct Mesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<int, 3>> faces;
    std::vector<std::array<double, 2>> uv;  // one entry per vertex, unit square
    std::vector<int> contour;               // boundary loop in walk order (may be empty)

    int n_vertices() const { return int(vertices.size()); }
    int n_faces() const { return int(faces.size()); }

    void validate() const {
        for (const auto& f : faces)
            for (int v : f)
                if (v < 0 || v >= n_vertices()) throw ValidationError("mesh: face index out of range");
        if (!uv.empty() && uv.size() != vertices.size())
            throw ValidationError("mesh: uv count mismatch");
        for (const Vec3& v : vertices)
            if (!is_finite(v.x) || !is_finite(v.y) || !is_finite(v.z))
                throw ValidationError("mesh: non-finite vertex");
    }

    Tensor vertex_tensor() const {
        Tensor t({n_vertices(), 3});
        for (int i = 0; i < n_vertices(); ++i) {
            t.at(i, 0) = vertices[size_t(i)].x;
            t.at(i, 1) = vertices[size_t(i)].y;
            t.at(i, 2) = vertices[size_t(i)].z;
        }
        return t;
    }

    Tensor uv_tensor() const {
        Tensor t({int(uv.size()), 2});
        for (size_t i = 0; i < uv.size(); ++i) {
            t.at(int(i), 0) = uv[i][0];
            t.at(int(i), 1) = uv[i][1];
        }
        return t;
    }

    void set_vertices(const Tensor& v) {
        require(v.rows() == n_vertices() && v.cols() == 3, "vertex tensor shape mismatch");
        for (int i = 0; i < v.rows(); ++i)
            vertices[size_t(i)] = {v.at(i, 0), v.at(i, 1), v.at(i, 2)};
    }
};

// Undirected edge list without duplicates.
inline std::vector<std::array<int, 2>> unique_edges(const Mesh& m) {
    std::vector<std::array<int, 2>> edges;
    edges.reserve(m.faces.size() * 3);
    for (const auto& f : m.faces)
        for (int e = 0; e < 3; ++e) {
            int a = f[size_t(e)], b = f[size_t((e + 1) % 3)];
            if (a > b) std::swap(a, b);
            edges.push_back({a, b});
        }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    return edges;
}

// One-ring vertex adjacency as flat lists, sorted per row.
inline NeighborLists vertex_neighbors(const Mesh& m) {
    std::vector<std::vector<int>> adj(size_t(m.n_vertices()));
    for (const auto& e : unique_edges(m)) {
        adj[size_t(e[0])].push_back(e[1]);
        adj[size_t(e[1])].push_back(e[0]);
    }
    NeighborLists nb;
    nb.offsets.resize(size_t(m.n_vertices()) + 1, 0);
    for (int i = 0; i < m.n_vertices(); ++i) {
        std::sort(adj[size_t(i)].begin(), adj[size_t(i)].end());
        nb.offsets[size_t(i) + 1] = nb.offsets[size_t(i)] + int(adj[size_t(i)].size());
        nb.indices.insert(nb.indices.end(), adj[size_t(i)].begin(), adj[size_t(i)].end());
    }
    return nb;
}

// Edges that belong to exactly one face.
inline std::vector<std::array<int, 2>> boundary_edges(const Mesh& m) {
    std::vector<std::array<int, 2>> all;
    all.reserve(m.faces.size() * 3);
    for (const auto& f : m.faces)
        for (int e = 0; e < 3; ++e) {
            int a = f[size_t(e)], b = f[size_t((e + 1) % 3)];
            if (a > b) std::swap(a, b);
            all.push_back({a, b});
        }
    std::sort(all.begin(), all.end());
    std::vector<std::array<int, 2>> out;
    for (size_t i = 0; i < all.size();) {
        size_t j = i;
        while (j < all.size() && all[j] == all[i]) ++j;
        if (j - i == 1) out.push_back(all[i]);
        i = j;
    }
    return out;
}

inline Vec3 face_normal(const Mesh& m, int f) {
    const auto& t = m.faces[size_t(f)];
    Vec3 a = m.vertices[size_t(t[0])], b = m.vertices[size_t(t[1])], c = m.vertices[size_t(t[2])];
    return (b - a).cross(c - a);  // magnitude = 2 * area
}

// Area-weighted vertex normals, normalized; degenerate stars fall back to +z.
inline std::vector<Vec3> vertex_normals(const Mesh& m) {
    std::vector<Vec3> n(size_t(m.n_vertices()));
    for (int f = 0; f < m.n_faces(); ++f) {
        Vec3 fn = face_normal(m, f);
        for (int v : m.faces[size_t(f)]) n[size_t(v)] += fn;
    }
    for (Vec3& v : n) {
        double len = v.norm();
        v = len > 1e-12 ? v * (1.0 / len) : Vec3{0.0, 0.0, 1.0};
    }
    return n;
}

inline double total_edge_length(const Mesh& m) {
    double s = 0.0;
    for (const auto& e : unique_edges(m))
        s += (m.vertices[size_t(e[0])] - m.vertices[size_t(e[1])]).norm();
    return s;
}

inline double mesh_extent(const Mesh& m) {
    if (m.vertices.empty()) return 0.0;
    Vec3 lo = m.vertices[0], hi = m.vertices[0];
    for (const Vec3& v : m.vertices) {
        lo = {std::min(lo.x, v.x), std::min(lo.y, v.y), std::min(lo.z, v.z)};
        hi = {std::max(hi.x, v.x), std::max(hi.y, v.y), std::max(hi.z, v.z)};
    }
    return std::max({hi.x - lo.x, hi.y - lo.y, hi.z - lo.z});
}

}  // namespace nlf
