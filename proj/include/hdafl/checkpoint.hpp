#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hdafl/common.hpp"
#include "hdafl/tensor.hpp"

namespace hdafl {

/// FNV-1a over the canonical JSON dump; stored in checkpoints so mismatched
/// configurations are detectable.
inline std::string config_hash(const nlohmann::json& cfg) {
    const std::string s = cfg.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct checkpoint_data {
    std::map<std::string, tensor> tensors;
    nlohmann::json meta;

    const tensor& require(const std::string& name) const {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw load_error("checkpoint is missing tensor '" + name + "'");
        return it->second;
    }
};

namespace detail {
constexpr char checkpoint_magic[8] = {'H', 'D', 'A', 'F', 'L', 'C', 'K', '1'};

inline void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline std::uint64_t read_u64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}
}  // namespace detail

/// Single binary container: magic, manifest length, JSON manifest (names,
/// shapes, dtype, metadata), then raw float64 little-endian tensor payloads in
/// manifest order.
inline void save_checkpoint(const std::filesystem::path& path,
                            const std::vector<std::pair<std::string, tensor>>& tensors,
                            const nlohmann::json& meta) {
    nlohmann::json manifest;
    manifest["format_version"] = 1;
    manifest["meta"] = meta;
    manifest["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : tensors) {
        nlohmann::json entry;
        entry["name"] = name;
        entry["shape"] = t.shape();
        entry["dtype"] = "float64";
        manifest["tensors"].push_back(entry);
    }
    const std::string manifest_text = manifest.dump();

    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw load_error("cannot open checkpoint for writing: " + path.string());
    out.write(detail::checkpoint_magic, sizeof(detail::checkpoint_magic));
    detail::write_u64(out, manifest_text.size());
    out.write(manifest_text.data(), static_cast<std::streamsize>(manifest_text.size()));
    static_assert(sizeof(double) == 8);
    for (const auto& [name, t] : tensors)
        out.write(reinterpret_cast<const char*>(t.data()),
                  static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!out) throw load_error("failed writing checkpoint " + path.string());
}

inline checkpoint_data load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw load_error("missing checkpoint: " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, detail::checkpoint_magic, 8) != 0)
        throw load_error("not a checkpoint file: " + path.string());
    const std::uint64_t manifest_len = detail::read_u64(in);
    std::string manifest_text(manifest_len, '\0');
    in.read(manifest_text.data(), static_cast<std::streamsize>(manifest_len));
    if (!in) throw load_error("truncated checkpoint manifest: " + path.string());
    nlohmann::json manifest = nlohmann::json::parse(manifest_text, nullptr, false);
    if (manifest.is_discarded())
        throw load_error("malformed checkpoint manifest: " + path.string());

    checkpoint_data ck;
    ck.meta = manifest.value("meta", nlohmann::json::object());
    for (const auto& entry : manifest["tensors"]) {
        const std::string name = entry["name"].get<std::string>();
        if (entry.value("dtype", "") != "float64")
            throw load_error("checkpoint tensor '" + name + "' has unsupported dtype");
        std::vector<std::size_t> shape = entry["shape"].get<std::vector<std::size_t>>();
        tensor t(shape);
        in.read(reinterpret_cast<char*>(t.storage().data()),
                static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in) throw load_error("truncated checkpoint payload at tensor '" + name + "'");
        ck.tensors.emplace(name, std::move(t));
    }
    return ck;
}

}  // namespace hdafl
