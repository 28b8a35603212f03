// File formats: PGM/PNG masks, XYZ and PLY point clouds, OBJ meshes, CSV
// tables, flat key=value configs, and the per-run manifest. All writes are
// atomic (temp file + rename) so partial outputs never appear.
#pragma once

#include <openssl/evp.h>
#include <png.h>

#include <charconv>
#include <map>

#include "nlf/checkpoint.hpp"
#include "nlf/mesh.hpp"
#include "nlf/sdf_grid.hpp"

namespace nlf {

// Shortest decimal text that round-trips the double exactly.
inline std::string format_double(double v) {
    char buf[40];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    require(ec == std::errc(), "number formatting failed");
    return std::string(buf, p);
}

inline std::string format_fixed(double v, int digits) {
    std::ostringstream ss;
    ss.setf(std::ios::fixed);
    ss.precision(digits);
    ss << v;
    return ss.str();
}

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw IoError("digest computation failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

// ---- masks ----

inline void write_pgm(const Mask2D& mask, const std::string& path) {
    std::string out = "P5\n" + std::to_string(mask.width) + " " + std::to_string(mask.height) +
                      "\n255\n";
    for (uint8_t b : mask.bits) out.push_back(b ? char(255) : char(0));
    write_file_atomic(path, out);
}

inline Mask2D read_pgm(const std::string& path) {
    std::string bytes = read_file(path);
    size_t pos = 0;
    auto token = [&]() -> std::string {
        while (pos < bytes.size()) {
            if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
        size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos) throw IoError("'" + path + "': unexpected end of PGM header");
        return bytes.substr(start, pos - start);
    };
    if (token() != "P5") throw IoError("'" + path + "' is not a binary PGM (P5) file");
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(token());
        h = std::stoi(token());
        maxval = std::stoi(token());
    } catch (const std::exception&) {
        throw IoError("'" + path + "': malformed PGM header");
    }
    if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
        throw IoError("'" + path + "': unsupported PGM dimensions or depth");
    ++pos;  // single whitespace byte after maxval
    if (bytes.size() - pos < size_t(w) * h) throw IoError("'" + path + "': truncated PGM payload");
    Mask2D mask(w, h);
    for (size_t i = 0; i < size_t(w) * h; ++i)
        mask.bits[i] = static_cast<unsigned char>(bytes[pos + i]) > 127 ? 1 : 0;
    return mask;
}

inline Mask2D read_png_mask(const std::string& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw IoError("cannot open '" + path + "'");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("PNG reader initialization failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw IoError("'" + path + "' is not a readable PNG file");
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    png_uint_32 w = png_get_image_width(png, info), h = png_get_image_height(png, info);
    // normalize every color layout to 8-bit grayscale
    png_set_expand(png);
    if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
    png_byte color = png_get_color_type(png, info);
    if (color & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray(png, 1, -1.0, -1.0);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    std::vector<png_byte> row(png_get_rowbytes(png, info));
    Mask2D mask{int(w), int(h)};
    for (png_uint_32 r = 0; r < h; ++r) {
        png_read_row(png, row.data(), nullptr);
        for (png_uint_32 c = 0; c < w; ++c) mask.at(int(r), int(c)) = row[c] > 127 ? 1 : 0;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return mask;
}

inline Mask2D read_mask(const std::string& path) {
    std::string lower = path;
    for (char& c : lower) c = char(std::tolower(static_cast<unsigned char>(c)));
    if (lower.size() > 4 && lower.substr(lower.size() - 4) == ".png") return read_png_mask(path);
    return read_pgm(path);
}

// ---- point clouds ----

inline void write_xyz(const std::vector<Vec3>& points, const std::string& path) {
    std::string out;
    for (const Vec3& p : points) {
        out += format_double(p.x);
        out += ' ';
        out += format_double(p.y);
        out += ' ';
        out += format_double(p.z);
        out += '\n';
    }
    write_file_atomic(path, out);
}

inline std::vector<Vec3> read_xyz(const std::string& path) {
    std::istringstream in(read_file(path));
    std::vector<Vec3> pts;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t start = line.find_first_not_of(" \t\r");
        if (start == std::string::npos || line[start] == '#') continue;
        std::istringstream ls(line);
        Vec3 p;
        if (!(ls >> p.x >> p.y >> p.z))
            throw IoError("'" + path + "' line " + std::to_string(lineno) +
                          ": expected three numbers");
        pts.push_back(p);
    }
    return pts;
}

inline void write_ply_cloud(const std::vector<Vec3>& points, const std::string& path) {
    std::string out = "ply\nformat ascii 1.0\nelement vertex " + std::to_string(points.size()) +
                      "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
    for (const Vec3& p : points)
        out += format_double(p.x) + " " + format_double(p.y) + " " + format_double(p.z) + "\n";
    write_file_atomic(path, out);
}

// Reads vertex positions from ascii or binary little-endian PLY. Extra
// vertex properties are skipped by stride; faces and later elements are
// ignored since only positions feed the pipeline.
inline std::vector<Vec3> read_ply_cloud(const std::string& path) {
    std::string bytes = read_file(path);
    size_t pos = 0;
    auto line = [&]() -> std::string {
        size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw IoError("'" + path + "': unterminated PLY header");
        std::string l = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        if (!l.empty() && l.back() == '\r') l.pop_back();
        return l;
    };
    if (line() != "ply") throw IoError("'" + path + "' is not a PLY file");
    bool binary = false;
    long vertex_count = -1;
    struct Prop {
        std::string type, name;
    };
    std::vector<Prop> vprops;
    bool in_vertex = false;
    for (;;) {
        std::string l = line();
        std::istringstream ls(l);
        std::string kw;
        ls >> kw;
        if (kw == "format") {
            std::string fmt;
            ls >> fmt;
            if (fmt == "ascii") {
                binary = false;
            } else if (fmt == "binary_little_endian") {
                binary = true;
            } else {
                throw IoError("'" + path + "': unsupported PLY format " + fmt);
            }
        } else if (kw == "element") {
            std::string name;
            long count;
            ls >> name >> count;
            in_vertex = name == "vertex";
            if (in_vertex) vertex_count = count;
            if (!in_vertex && vertex_count < 0)
                throw IoError("'" + path + "': PLY vertex element must come first");
        } else if (kw == "property" && in_vertex) {
            Prop p;
            ls >> p.type >> p.name;
            if (p.type == "list") throw IoError("'" + path + "': list property on vertices");
            vprops.push_back(p);
        } else if (kw == "end_header") {
            break;
        }
    }
    if (vertex_count < 0) throw IoError("'" + path + "': PLY has no vertex element");
    auto type_size = [&](const std::string& t) -> size_t {
        if (t == "char" || t == "uchar" || t == "int8" || t == "uint8") return 1;
        if (t == "short" || t == "ushort" || t == "int16" || t == "uint16") return 2;
        if (t == "int" || t == "uint" || t == "int32" || t == "uint32" || t == "float" ||
            t == "float32")
            return 4;
        if (t == "double" || t == "float64") return 8;
        throw IoError("'" + path + "': unknown PLY property type " + t);
    };
    int ix = -1, iy = -1, iz = -1;
    for (size_t i = 0; i < vprops.size(); ++i) {
        if (vprops[i].name == "x") ix = int(i);
        if (vprops[i].name == "y") iy = int(i);
        if (vprops[i].name == "z") iz = int(i);
    }
    if (ix < 0 || iy < 0 || iz < 0) throw IoError("'" + path + "': PLY vertices lack x/y/z");

    std::vector<Vec3> out(size_t(vertex_count), Vec3{});
    if (!binary) {
        std::istringstream data(bytes.substr(pos));
        for (long v = 0; v < vertex_count; ++v) {
            std::vector<double> vals(vprops.size());
            for (double& d : vals)
                if (!(data >> d)) throw IoError("'" + path + "': truncated PLY vertex data");
            out[size_t(v)] = {vals[size_t(ix)], vals[size_t(iy)], vals[size_t(iz)]};
        }
    } else {
        std::vector<size_t> offs(vprops.size() + 1, 0);
        for (size_t i = 0; i < vprops.size(); ++i) offs[i + 1] = offs[i] + type_size(vprops[i].type);
        size_t stride = offs.back();
        if (bytes.size() - pos < stride * size_t(vertex_count))
            throw IoError("'" + path + "': truncated PLY vertex data");
        auto fetch = [&](size_t base, int prop) -> double {
            const unsigned char* p =
                reinterpret_cast<const unsigned char*>(bytes.data() + base + offs[size_t(prop)]);
            const std::string& t = vprops[size_t(prop)].type;
            if (t == "float" || t == "float32") {
                uint32_t bits = read_le_u32(p);
                float f;
                std::memcpy(&f, &bits, 4);
                return double(f);
            }
            if (t == "double" || t == "float64") {
                uint64_t bits = 0;
                for (int i = 7; i >= 0; --i) bits = bits << 8 | p[i];
                double d;
                std::memcpy(&d, &bits, 8);
                return d;
            }
            throw IoError("'" + path + "': vertex coordinate has integer type");
        };
        for (long v = 0; v < vertex_count; ++v) {
            size_t base = pos + stride * size_t(v);
            out[size_t(v)] = {fetch(base, ix), fetch(base, iy), fetch(base, iz)};
        }
    }
    return out;
}

inline std::vector<Vec3> read_cloud(const std::string& path) {
    std::string lower = path;
    for (char& c : lower) c = char(std::tolower(static_cast<unsigned char>(c)));
    if (lower.size() > 4 && lower.substr(lower.size() - 4) == ".ply") return read_ply_cloud(path);
    return read_xyz(path);
}

// ---- meshes ----

inline void write_obj(const Mesh& mesh, const std::string& path) {
    std::string out;
    for (const Vec3& v : mesh.vertices)
        out += "v " + format_double(v.x) + " " + format_double(v.y) + " " + format_double(v.z) +
               "\n";
    bool has_uv = mesh.uv.size() == mesh.vertices.size();
    if (has_uv)
        for (const auto& t : mesh.uv)
            out += "vt " + format_double(t[0]) + " " + format_double(t[1]) + "\n";
    for (const auto& f : mesh.faces) {
        out += 'f';
        for (int k = 0; k < 3; ++k) {
            std::string idx = std::to_string(f[size_t(k)] + 1);
            out += ' ' + idx + (has_uv ? "/" + idx : "");
        }
        out += '\n';
    }
    write_file_atomic(path, out);
}

inline Mesh read_obj(const std::string& path) {
    std::istringstream in(read_file(path));
    Mesh mesh;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::istringstream ls(line);
        std::string kw;
        if (!(ls >> kw) || kw[0] == '#') continue;
        auto fail = [&](const std::string& what) {
            throw IoError("'" + path + "' line " + std::to_string(lineno) + ": " + what);
        };
        if (kw == "v") {
            Vec3 v;
            if (!(ls >> v.x >> v.y >> v.z)) fail("malformed vertex");
            mesh.vertices.push_back(v);
        } else if (kw == "vt") {
            double u, v;
            if (!(ls >> u >> v)) fail("malformed texture coordinate");
            mesh.uv.push_back({u, v});
        } else if (kw == "f") {
            std::vector<int> poly;
            std::string tok;
            while (ls >> tok) {
                size_t slash = tok.find('/');
                std::string head = slash == std::string::npos ? tok : tok.substr(0, slash);
                int idx = 0;
                auto [p, ec] = std::from_chars(head.data(), head.data() + head.size(), idx);
                if (ec != std::errc() || p != head.data() + head.size()) fail("malformed face index");
                if (idx < 0) fail("negative face indices are not supported");
                poly.push_back(idx - 1);
            }
            if (poly.size() < 3) fail("face with fewer than three vertices");
            for (size_t k = 2; k < poly.size(); ++k)
                mesh.faces.push_back({poly[0], poly[k - 1], poly[k]});
        }
        // other keywords (vn, o, g, s, usemtl, mtllib) are valid and ignored
    }
    if (!mesh.uv.empty() && mesh.uv.size() != mesh.vertices.size()) mesh.uv.clear();
    mesh.validate();
    return mesh;
}

// ---- tables and configs ----

inline void write_csv(const std::string& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
    std::string out;
    for (size_t i = 0; i < header.size(); ++i) out += (i ? "," : "") + header[i];
    out += '\n';
    for (const auto& row : rows) {
        require(row.size() == header.size(), "CSV row width mismatch");
        for (size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + row[i];
        out += '\n';
    }
    write_file_atomic(path, out);
}

// Flat "key = value" text. '#' starts a comment, blank lines are skipped.
inline std::map<std::string, std::string> parse_config(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    auto trim = [](std::string s) {
        size_t a = s.find_first_not_of(" \t\r");
        size_t b = s.find_last_not_of(" \t\r");
        return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    while (std::getline(in, line)) {
        ++lineno;
        size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::string t = trim(line);
        if (t.empty()) continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config line " + std::to_string(lineno) +
                                  ": expected key = value");
        std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
        if (key.empty()) throw ValidationError("config line " + std::to_string(lineno) + ": empty key");
        out[key] = value;
    }
    return out;
}

inline std::map<std::string, std::string> load_config(const std::string& path) {
    return parse_config(read_file(path));
}

// ---- run manifest ----

struct RunManifest {
    std::string command;
    uint64_t seed = 0;
    std::string version;
    double wall_seconds = 0.0;
    std::vector<std::pair<std::string, std::string>> config;   // snapshot, sorted
    std::vector<std::pair<std::string, std::string>> outputs;  // path, sha256
};

// wall_time is informational; every other line is reproducible bit-exactly
// for identical seed and config.
inline void write_manifest(const RunManifest& m, const std::string& path) {
    std::string out;
    out += "command=" + m.command + "\n";
    out += "seed=" + std::to_string(m.seed) + "\n";
    out += "version=" + m.version + "\n";
    for (const auto& [k, v] : m.config) out += "config " + k + "=" + v + "\n";
    for (const auto& [p, h] : m.outputs) out += "output " + p + " sha256=" + h + "\n";
    out += "wall_time_s=" + format_fixed(m.wall_seconds, 3) + "\n";
    write_file_atomic(path, out);
}

}  // namespace nlf
