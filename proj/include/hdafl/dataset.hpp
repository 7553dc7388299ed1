#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "hdafl/common.hpp"
#include "hdafl/tensor.hpp"

namespace hdafl {

struct dataset {
    std::size_t height = 0, width = 0, channels = 0;
    std::vector<tensor> feature_maps;  // one H x W x C map per image
    std::vector<int> labels;           // per-image class id
    std::vector<int> class_ids;        // sorted; row order of class_semantics
    tensor class_semantics;            // M x K, row per class (a_y)
    tensor attribute_semantics;        // K x D_attr, row per attribute
    std::vector<int> seen_classes;     // sorted
    std::vector<int> unseen_classes;   // sorted
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> test_indices;

    std::size_t image_count() const { return feature_maps.size(); }
    std::size_t class_count() const { return class_ids.size(); }
    std::size_t attr_count() const {
        return attribute_semantics.empty() ? 0 : attribute_semantics.rows();
    }

    std::size_t class_row(int class_id) const {
        auto it = std::lower_bound(class_ids.begin(), class_ids.end(), class_id);
        if (it == class_ids.end() || *it != class_id)
            throw validation_error("unknown class id " + std::to_string(class_id));
        return static_cast<std::size_t>(it - class_ids.begin());
    }

    bool is_seen(int class_id) const {
        return std::binary_search(seen_classes.begin(), seen_classes.end(), class_id);
    }

    void validate() const {
        std::vector<int> overlap;
        std::set_intersection(seen_classes.begin(), seen_classes.end(), unseen_classes.begin(),
                              unseen_classes.end(), std::back_inserter(overlap));
        if (!overlap.empty())
            throw validation_error("seen and unseen class sets must be disjoint (class " +
                                   std::to_string(overlap.front()) + " appears in both)");
        if (class_ids.empty()) throw validation_error("dataset declares no classes");
        for (std::size_t i = 0; i + 1 < class_ids.size(); ++i)
            if (class_ids[i] >= class_ids[i + 1])
                throw validation_error("class ids must be strictly increasing");
        if (class_semantics.rank() != 2 || class_semantics.rows() != class_ids.size())
            throw validation_error(
                "class_semantics must have one row per class in seen and unseen");
        if (!class_semantics.all_finite())
            throw validation_error("class_semantics entries must be finite");
        if (attribute_semantics.rank() != 2 || attribute_semantics.rows() == 0)
            throw validation_error("attribute_semantics must have one row per attribute");
        if (!attribute_semantics.all_finite())
            throw validation_error("attribute_semantics entries must be finite");
        if (class_semantics.cols() != attribute_semantics.rows())
            throw validation_error("class_semantics width (" +
                                   std::to_string(class_semantics.cols()) +
                                   ") must equal the attribute count (" +
                                   std::to_string(attribute_semantics.rows()) + ")");
        if (labels.size() != feature_maps.size())
            throw validation_error("one label per image required");
        for (std::size_t i = 0; i < feature_maps.size(); ++i) {
            const tensor& f = feature_maps[i];
            if (f.rank() != 3 || f.dim(0) != height || f.dim(1) != width || f.dim(2) != channels)
                throw validation_error("all feature maps must share identical (H, W, C); image " +
                                       std::to_string(i) + " has shape " + f.shape_str());
        }
        std::set<int> declared(class_ids.begin(), class_ids.end());
        for (int c : seen_classes)
            if (!declared.count(c))
                throw validation_error("seen class " + std::to_string(c) +
                                       " has no class_semantics row");
        for (int c : unseen_classes)
            if (!declared.count(c))
                throw validation_error("unseen class " + std::to_string(c) +
                                       " has no class_semantics row");
        std::set<int> split_union(seen_classes.begin(), seen_classes.end());
        split_union.insert(unseen_classes.begin(), unseen_classes.end());
        for (int c : class_ids)
            if (!split_union.count(c))
                throw validation_error("class " + std::to_string(c) +
                                       " belongs to neither seen nor unseen");
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (!declared.count(labels[i]))
                throw validation_error("image " + std::to_string(i) + " has unknown class id " +
                                       std::to_string(labels[i]));
        std::vector<char> assigned(image_count(), 0);
        auto check_split = [&](const std::vector<std::size_t>& idx, const char* name) {
            for (std::size_t i : idx) {
                if (i >= image_count())
                    throw validation_error(std::string(name) + " split index " +
                                           std::to_string(i) + " out of range");
                if (assigned[i])
                    throw validation_error("image " + std::to_string(i) +
                                           " assigned to more than one split");
                assigned[i] = 1;
            }
        };
        check_split(train_indices, "train");
        check_split(test_indices, "test");
        for (std::size_t i : train_indices)
            if (!is_seen(labels[i]))
                throw validation_error("every training image's label must be a seen class; image " +
                                       std::to_string(i) + " has unseen class " +
                                       std::to_string(labels[i]));
    }

    /// Ground-truth attribute vector for the trainer: class_semantics rows
    /// min-max normalized per attribute column. A constant column maps to 1
    /// when nonzero (present everywhere) and 0 otherwise.
    tensor normalized_class_attributes() const {
        const std::size_t m = class_semantics.rows(), k = class_semantics.cols();
        tensor out({m, k});
        for (std::size_t j = 0; j < k; ++j) {
            double lo = class_semantics(0, j), hi = lo;
            for (std::size_t i = 1; i < m; ++i) {
                lo = std::min(lo, class_semantics(i, j));
                hi = std::max(hi, class_semantics(i, j));
            }
            for (std::size_t i = 0; i < m; ++i) {
                if (hi > lo)
                    out(i, j) = (class_semantics(i, j) - lo) / (hi - lo);
                else
                    out(i, j) = hi != 0.0 ? 1.0 : 0.0;
            }
        }
        return out;
    }
};

namespace detail {

inline std::string read_text_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw load_error("missing file: " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
    const std::string text = read_text_file(p);
    nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
    if (j.is_discarded()) throw load_error("malformed JSON in " + p.string());
    return j;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
    try {
        std::size_t pos = 0;
        double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw validation_error("cannot parse number '" + s + "' in " + where);
    }
}

inline long long parse_int(const std::string& s, const std::string& where) {
    try {
        std::size_t pos = 0;
        long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw validation_error("cannot parse integer '" + s + "' in " + where);
    }
}

/// CSV matrix keyed by a leading integer id column. Returns (ids, rows).
inline std::pair<std::vector<int>, std::vector<std::vector<double>>> read_id_csv(
    const std::filesystem::path& p) {
    const std::string text = read_text_file(p);
    std::vector<int> ids;
    std::vector<std::vector<double>> rows;
    std::istringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::vector<std::string> cells = split_csv_line(line);
        if (cells.empty()) continue;
        ids.push_back(static_cast<int>(parse_int(cells[0], p.filename().string())));
        std::vector<double> row;
        for (std::size_t i = 1; i < cells.size(); ++i)
            row.push_back(parse_double(cells[i], p.filename().string()));
        rows.push_back(std::move(row));
    }
    return {std::move(ids), std::move(rows)};
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

inline dataset load_dataset(const std::filesystem::path& root) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(root)) throw load_error("dataset directory not found: " + root.string());

    nlohmann::json sidecar = detail::read_json_file(root / "features.json");
    if (!sidecar.contains("shape") || !sidecar["shape"].is_array() || sidecar["shape"].size() != 4)
        throw load_error("features.json must declare shape [N, H, W, C]");
    std::size_t n = sidecar["shape"][0].get<std::size_t>();
    std::size_t h = sidecar["shape"][1].get<std::size_t>();
    std::size_t w = sidecar["shape"][2].get<std::size_t>();
    std::size_t c = sidecar["shape"][3].get<std::size_t>();
    if (n == 0 || h == 0 || w == 0 || c == 0)
        throw validation_error("features.json declares an empty shape");

    std::ifstream bin(root / "features.bin", std::ios::binary);
    if (!bin) throw load_error("missing file: " + (root / "features.bin").string());
    bin.seekg(0, std::ios::end);
    const std::uint64_t bytes = static_cast<std::uint64_t>(bin.tellg());
    const std::uint64_t expected = static_cast<std::uint64_t>(n) * h * w * c * sizeof(float);
    if (bytes != expected)
        throw validation_error("features.bin holds " + std::to_string(bytes) +
                               " bytes but shape [N,H,W,C] requires " + std::to_string(expected));
    bin.seekg(0, std::ios::beg);

    dataset ds;
    ds.height = h;
    ds.width = w;
    ds.channels = c;
    std::vector<float> buf(h * w * c);
    for (std::size_t i = 0; i < n; ++i) {
        bin.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (!bin) throw load_error("features.bin truncated at image " + std::to_string(i));
        tensor f({h, w, c});
        for (std::size_t e = 0; e < buf.size(); ++e) f.storage()[e] = static_cast<double>(buf[e]);
        ds.feature_maps.push_back(std::move(f));
    }

    {
        auto [ids, rows] = detail::read_id_csv(root / "labels.csv");
        ds.labels.assign(n, 0);
        if (ids.size() != n)
            throw validation_error("labels.csv has " + std::to_string(ids.size()) +
                                   " rows but features declare " + std::to_string(n) + " images");
        std::vector<char> seen_idx(n, 0);
        for (std::size_t r = 0; r < ids.size(); ++r) {
            if (rows[r].size() != 1)
                throw validation_error("labels.csv rows must be image_index,class_id");
            const long long idx = ids[r];
            if (idx < 0 || static_cast<std::size_t>(idx) >= n || seen_idx[idx])
                throw validation_error("labels.csv must cover each image index exactly once");
            seen_idx[idx] = 1;
            ds.labels[static_cast<std::size_t>(idx)] = static_cast<int>(rows[r][0]);
        }
    }

    {
        auto [ids, rows] = detail::read_id_csv(root / "class_semantics.csv");
        if (ids.empty()) throw load_error("class_semantics.csv is empty");
        std::vector<std::size_t> order(ids.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ids[a] < ids[b]; });
        const std::size_t width = rows[order[0]].size();
        tensor cs({ids.size(), width == 0 ? 1 : width});
        for (std::size_t r = 0; r < order.size(); ++r) {
            ds.class_ids.push_back(ids[order[r]]);
            if (rows[order[r]].size() != width || width == 0)
                throw validation_error("class_semantics.csv rows must share one width");
            for (std::size_t j = 0; j < width; ++j) cs(r, j) = rows[order[r]][j];
        }
        ds.class_semantics = std::move(cs);
    }

    {
        const fs::path p = root / "attribute_semantics.csv";
        if (!fs::exists(p))
            throw load_error("missing attributes file: " + p.string());
        auto [ids, rows] = detail::read_id_csv(p);
        if (ids.empty()) throw load_error("attribute_semantics.csv is empty");
        std::vector<std::size_t> order(ids.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(), [&](auto a, auto b) { return ids[a] < ids[b]; });
        const std::size_t width = rows[order[0]].size();
        tensor as({ids.size(), width == 0 ? 1 : width});
        for (std::size_t r = 0; r < order.size(); ++r) {
            if (rows[order[r]].size() != width || width == 0)
                throw validation_error("attribute_semantics.csv rows must share one width");
            for (std::size_t j = 0; j < width; ++j) as(r, j) = rows[order[r]][j];
        }
        ds.attribute_semantics = std::move(as);
    }

    {
        nlohmann::json splits = detail::read_json_file(root / "splits.json");
        for (const char* key : {"seen", "unseen", "train", "test"})
            if (!splits.contains(key) || !splits[key].is_array())
                throw validation_error(std::string("splits.json must contain array '") + key +
                                       "'");
        for (const auto& v : splits["seen"]) ds.seen_classes.push_back(v.get<int>());
        for (const auto& v : splits["unseen"]) ds.unseen_classes.push_back(v.get<int>());
        for (const auto& v : splits["train"]) ds.train_indices.push_back(v.get<std::size_t>());
        for (const auto& v : splits["test"]) ds.test_indices.push_back(v.get<std::size_t>());
        std::sort(ds.seen_classes.begin(), ds.seen_classes.end());
        std::sort(ds.unseen_classes.begin(), ds.unseen_classes.end());
    }

    ds.validate();
    return ds;
}

/// Writes the directory layout load_dataset reads. Output is byte
/// deterministic: floats print as %.17g, features store as 32-bit LE floats.
inline void save_dataset(const dataset& ds, const std::filesystem::path& root, bool force = false) {
    namespace fs = std::filesystem;
    ds.validate();
    if (fs::exists(root) && !fs::is_directory(root))
        throw validation_error("dataset path exists and is not a directory: " + root.string());
    if (fs::is_directory(root) && !fs::is_empty(root) && !force)
        throw validation_error("refusing to overwrite non-empty directory " + root.string() +
                               " (pass --force to allow)");
    fs::create_directories(root);

    {
        std::ofstream bin(root / "features.bin", std::ios::binary | std::ios::trunc);
        for (const tensor& f : ds.feature_maps) {
            std::vector<float> buf(f.size());
            for (std::size_t e = 0; e < f.size(); ++e) buf[e] = static_cast<float>(f.storage()[e]);
            bin.write(reinterpret_cast<const char*>(buf.data()),
                      static_cast<std::streamsize>(buf.size() * sizeof(float)));
        }
        if (!bin) throw load_error("cannot write " + (root / "features.bin").string());
    }
    {
        nlohmann::json j;
        j["shape"] = {ds.image_count(), ds.height, ds.width, ds.channels};
        std::ofstream out(root / "features.json", std::ios::trunc);
        out << j.dump(2) << "\n";
    }
    {
        std::ofstream out(root / "labels.csv", std::ios::trunc);
        for (std::size_t i = 0; i < ds.labels.size(); ++i)
            out << i << "," << ds.labels[i] << "\n";
    }
    {
        std::ofstream out(root / "class_semantics.csv", std::ios::trunc);
        for (std::size_t r = 0; r < ds.class_ids.size(); ++r) {
            out << ds.class_ids[r];
            for (std::size_t j = 0; j < ds.class_semantics.cols(); ++j)
                out << "," << detail::format_double(ds.class_semantics(r, j));
            out << "\n";
        }
    }
    {
        std::ofstream out(root / "attribute_semantics.csv", std::ios::trunc);
        for (std::size_t r = 0; r < ds.attribute_semantics.rows(); ++r) {
            out << r;
            for (std::size_t j = 0; j < ds.attribute_semantics.cols(); ++j)
                out << "," << detail::format_double(ds.attribute_semantics(r, j));
            out << "\n";
        }
    }
    {
        nlohmann::json j;
        j["seen"] = ds.seen_classes;
        j["unseen"] = ds.unseen_classes;
        j["train"] = ds.train_indices;
        j["test"] = ds.test_indices;
        std::ofstream out(root / "splits.json", std::ios::trunc);
        out << j.dump(2) << "\n";
    }
}

}  // namespace hdafl
