// Versioned model container: named parameter tensors plus string metadata.
// Layout: a textual header (magic, version, meta lines, tensor directory
// with shapes) terminated by "end", then raw little-endian float32 payloads
// in directory order.
#pragma once

#include <charconv>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "nlf/mlp.hpp"

namespace nlf {

constexpr const char* kCheckpointMagic = "NLF1";
constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    ParamSet params;
    std::vector<std::pair<std::string, std::string>> meta;

    void set_meta(const std::string& key, const std::string& value) {
        for (auto& [k, v] : meta)
            if (k == key) {
                v = value;
                return;
            }
        meta.emplace_back(key, value);
    }
    void set_meta_int(const std::string& key, long long value) {
        set_meta(key, std::to_string(value));
    }
    bool has_meta(const std::string& key) const {
        for (const auto& [k, v] : meta)
            if (k == key) return true;
        return false;
    }
    const std::string& meta_str(const std::string& key) const {
        for (const auto& [k, v] : meta)
            if (k == key) return v;
        throw ValidationError("checkpoint is missing metadata key '" + key + "'");
    }
    long long meta_int(const std::string& key) const {
        const std::string& s = meta_str(key);
        long long out = 0;
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
        if (ec != std::errc() || p != s.data() + s.size())
            throw ValidationError("checkpoint metadata '" + key + "' is not an integer: " + s);
        return out;
    }
};

inline void append_le_u32(std::string& out, uint32_t v) {
    out.push_back(char(v & 0xff));
    out.push_back(char((v >> 8) & 0xff));
    out.push_back(char((v >> 16) & 0xff));
    out.push_back(char((v >> 24) & 0xff));
}

inline uint32_t read_le_u32(const unsigned char* p) {
    return uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
}

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    std::ostringstream head;
    head << kCheckpointMagic << ' ' << kCheckpointVersion << '\n';
    for (const auto& [k, v] : ckpt.meta) {
        require(!k.empty() && k.find_first_of(" \n") == std::string::npos,
                "metadata key must be a single token");
        require(v.find('\n') == std::string::npos, "metadata value must be a single line");
        head << "meta " << k << ' ' << v << '\n';
    }
    for (const std::string& name : ckpt.params.names()) {
        require(name.find_first_of(" \n") == std::string::npos,
                "tensor name must not contain spaces");
        const Tensor& t = ckpt.params.value(name);
        head << "tensor " << name << ' ' << t.shape().size();
        for (int d : t.shape()) head << ' ' << d;
        head << '\n';
    }
    head << "end\n";
    std::string out = head.str();
    for (const std::string& name : ckpt.params.names()) {
        const Tensor& t = ckpt.params.value(name);
        for (size_t di = 0; di < t.size(); ++di) {
            double d = t[di];
            float f = float(d);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            append_le_u32(out, bits);
        }
    }
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
    size_t pos = 0;
    auto next_line = [&]() -> std::string {
        if (pos >= bytes.size()) throw IoError("truncated checkpoint: header ended early");
        size_t nl = bytes.find('\n', pos);
        if (nl == std::string::npos) throw IoError("truncated checkpoint: header ended early");
        std::string line = bytes.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    std::istringstream first(next_line());
    std::string magic;
    int version = -1;
    first >> magic >> version;
    if (magic != kCheckpointMagic) throw IoError("not a model checkpoint (bad magic)");
    if (version != kCheckpointVersion)
        throw IoError("incompatible checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));

    Checkpoint ckpt;
    std::vector<std::pair<std::string, std::vector<int>>> directory;
    for (;;) {
        std::string line = next_line();
        if (line == "end") break;
        std::istringstream ls(line);
        std::string kind;
        ls >> kind;
        if (kind == "meta") {
            std::string key;
            ls >> key;
            std::string value;
            std::getline(ls, value);
            if (!value.empty() && value.front() == ' ') value.erase(0, 1);
            if (key.empty()) throw IoError("malformed checkpoint meta line");
            ckpt.meta.emplace_back(key, value);
        } else if (kind == "tensor") {
            std::string name;
            int ndim = -1;
            ls >> name >> ndim;
            if (name.empty() || ndim < 0 || ndim > 8) throw IoError("malformed tensor directory line");
            std::vector<int> shape(size_t(ndim), 0);
            for (int& d : shape) {
                ls >> d;
                if (!ls || d <= 0) throw IoError("malformed tensor shape in checkpoint");
            }
            directory.emplace_back(name, shape);
        } else {
            throw IoError("unknown checkpoint header line: " + line);
        }
    }

    for (const auto& [name, shape] : directory) {
        Tensor t(shape);
        size_t need = t.size() * 4;
        if (bytes.size() - pos < need) throw IoError("truncated checkpoint: payload ended early");
        const unsigned char* p = reinterpret_cast<const unsigned char*>(bytes.data() + pos);
        for (size_t i = 0; i < t.size(); ++i) {
            uint32_t bits = read_le_u32(p + i * 4);
            float f;
            std::memcpy(&f, &bits, 4);
            t[i] = double(f);
        }
        pos += need;
        ckpt.params.add(name, std::move(t));
    }
    if (pos != bytes.size()) throw IoError("checkpoint has trailing bytes after payload");
    return ckpt;
}

// Atomic write: the file appears complete or not at all.
inline void write_file_atomic(const std::string& path, const std::string& content) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + tmp + "' for writing");
        out.write(content.data(), std::streamsize(content.size()));
        out.flush();
        if (!out) throw IoError("write failed for '" + tmp + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move '" + tmp + "' to '" + path + "': " + ec.message());
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) throw IoError("read failed for '" + path + "'");
    return ss.str();
}

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    write_file_atomic(path, serialize_checkpoint(ckpt));
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return deserialize_checkpoint(read_file(path));
}

}  // namespace nlf
