// On-disk dataset layout: masks/<id>.pgm plus pairs/<id>/{base_id.txt,
// deformed.xyz, truth.json}. Listings are sorted so identical data always
// serializes identically.
#pragma once

#include <json.hpp>

#include "nlf/io.hpp"
#include "nlf/training.hpp"

namespace nlf {

namespace fs = std::filesystem;

inline void save_synthetic_dataset(const SyntheticData& data, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "masks", ec);
    if (ec) throw IoError("cannot create '" + dir + "/masks': " + ec.message());
    fs::create_directories(fs::path(dir) / "pairs", ec);
    if (ec) throw IoError("cannot create '" + dir + "/pairs': " + ec.message());

    for (const auto& s : data.shapes.samples)
        write_pgm(s.mask, (fs::path(dir) / "masks" / (s.id + ".pgm")).string());
    for (const auto& p : data.pairs.pairs) {
        fs::path pdir = fs::path(dir) / "pairs" / p.id;
        fs::create_directories(pdir, ec);
        if (ec) throw IoError("cannot create '" + pdir.string() + "': " + ec.message());
        write_file_atomic((pdir / "base_id.txt").string(), p.base_id + "\n");
        write_xyz(p.cloud, (pdir / "deformed.xyz").string());
        if (!p.truth_kind.empty()) {
            nlohmann::json truth;
            truth["amount"] = p.truth_amount;
            truth["base_id"] = p.base_id;
            truth["kind"] = p.truth_kind;
            write_file_atomic((pdir / "truth.json").string(), truth.dump(2) + "\n");
        }
    }
}

inline std::vector<std::string> sorted_entries(const std::string& dir) {
    std::vector<std::string> names;
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(dir, ec)) names.push_back(e.path().filename().string());
    if (ec) throw IoError("cannot list '" + dir + "': " + ec.message());
    std::sort(names.begin(), names.end());
    return names;
}

inline ShapeDataset load_shape_dataset(const std::string& dir) {
    std::string masks = (fs::path(dir) / "masks").string();
    if (!fs::is_directory(masks)) throw IoError("'" + masks + "' is not a directory");
    ShapeDataset out;
    for (const std::string& name : sorted_entries(masks)) {
        fs::path p = fs::path(masks) / name;
        std::string ext = p.extension().string();
        if (ext != ".pgm" && ext != ".png") continue;
        out.add(p.stem().string(), read_mask(p.string()));
    }
    if (out.samples.empty()) throw ValidationError("no masks found under '" + masks + "'");
    return out;
}

inline std::string trimmed(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

inline DeformDataset load_deform_dataset(const std::string& dir) {
    std::string pairs = (fs::path(dir) / "pairs").string();
    if (!fs::is_directory(pairs)) throw IoError("'" + pairs + "' is not a directory");
    DeformDataset out;
    for (const std::string& name : sorted_entries(pairs)) {
        fs::path pdir = fs::path(pairs) / name;
        if (!fs::is_directory(pdir)) continue;
        DeformPair pair;
        pair.id = name;
        pair.base_id = trimmed(read_file((pdir / "base_id.txt").string()));
        if (pair.base_id.empty()) throw IoError("empty base id in '" + pdir.string() + "'");
        pair.cloud = read_xyz((pdir / "deformed.xyz").string());
        fs::path truth = pdir / "truth.json";
        if (fs::exists(truth)) {
            nlohmann::json j = nlohmann::json::parse(read_file(truth.string()), nullptr, false);
            if (j.is_discarded()) throw IoError("'" + truth.string() + "' is not valid JSON");
            pair.truth_kind = j.value("kind", std::string());
            pair.truth_amount = j.value("amount", 0.0);
        }
        out.add(std::move(pair));
    }
    if (out.pairs.empty()) throw ValidationError("no pairs found under '" + pairs + "'");
    return out;
}

}  // namespace nlf
