#pragma once

#include <cstdlib>
#include <filesystem>
#include <sstream>
#include <string>

#include "hdafl/common.hpp"
#include "hdafl/dataset.hpp"
#include "hdafl/trainer.hpp"

namespace hdafl {

struct run_config {
    train_config train;
    double eval_gamma = 0.7;
    std::string data_path;
    std::string trace_path = "loss_trace.csv";
};

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw config_error("config key '" + key + "' expects a boolean, got '" + v + "'");
}

inline double parse_real(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw config_error("config key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline std::uint64_t parse_count(const std::string& v, const std::string& key) {
    try {
        std::size_t pos = 0;
        unsigned long long u = std::stoull(v, &pos);
        if (pos != v.size() || (!v.empty() && v[0] == '-')) throw std::invalid_argument(v);
        return u;
    } catch (const std::exception&) {
        throw config_error("config key '" + key + "' expects a non-negative integer, got '" + v +
                           "'");
    }
}

}  // namespace detail

/// INI-style run configuration. Lines are `key = value` under a [section]
/// header; blank lines and lines starting with # or ; are ignored. Unknown
/// sections and keys are rejected by name. Defaults are the standard training
/// recipe (alpha=25, tau_attr=0.3, tau_class=0.1, mu=0.32, epsilon=0.42,
/// lr=1e-3, momentum=0.9, wd=1e-5, epochs=15, ways=16, shots=2).
inline run_config parse_run_config_text(const std::string& text, const std::string& origin) {
    run_config rc;
    std::istringstream ss(text);
    std::string line, section;
    std::size_t line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const std::string t = detail::trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw config_error(origin + ":" + std::to_string(line_no) +
                                   ": malformed section header '" + t + "'");
            section = detail::trim(t.substr(1, t.size() - 2));
            if (section != "train" && section != "episode" && section != "loss" &&
                section != "model" && section != "eval" && section != "paths")
                throw config_error("unknown config section '" + section + "'");
            continue;
        }
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw config_error(origin + ":" + std::to_string(line_no) +
                               ": expected 'key = value', got '" + t + "'");
        const std::string key = detail::trim(t.substr(0, eq));
        const std::string value = detail::trim(t.substr(eq + 1));
        const std::string qual = section + "." + key;

        train_config& tc = rc.train;
        loss_weights& w = tc.weights;
        if (section == "train") {
            if (key == "epochs") tc.epochs = detail::parse_count(value, qual);
            else if (key == "learning_rate") tc.learning_rate = detail::parse_real(value, qual);
            else if (key == "momentum") tc.momentum = detail::parse_real(value, qual);
            else if (key == "weight_decay") tc.weight_decay = detail::parse_real(value, qual);
            else if (key == "seed") tc.seed = detail::parse_count(value, qual);
            else if (key == "checkpoint_dir") tc.checkpoint_dir = value;
            else throw config_error("unknown config key '" + qual + "'");
        } else if (section == "episode") {
            if (key == "ways") tc.episode.ways = detail::parse_count(value, qual);
            else if (key == "shots") tc.episode.shots = detail::parse_count(value, qual);
            else throw config_error("unknown config key '" + qual + "'");
        } else if (section == "loss") {
            if (key == "alpha") w.alpha = detail::parse_real(value, qual);
            else if (key == "tau_attr") w.tau_attr = detail::parse_real(value, qual);
            else if (key == "tau_class") w.tau_class = detail::parse_real(value, qual);
            else if (key == "mu") w.mu = detail::parse_real(value, qual);
            else if (key == "epsilon") w.epsilon = detail::parse_real(value, qual);
            else if (key == "lambda_mse") w.lambda_mse = detail::parse_real(value, qual);
            else if (key == "lambda_align") w.lambda_align = detail::parse_real(value, qual);
            else if (key == "lambda_attr_contrast")
                w.lambda_attr_contrast = detail::parse_real(value, qual);
            else if (key == "lambda_class_contrast")
                w.lambda_class_contrast = detail::parse_real(value, qual);
            else if (key == "aal_variant") w.aal_variant = aal_variant_from_string(value);
            else if (key == "aal_margin") w.aal_margin = detail::parse_real(value, qual);
            else if (key == "presence_threshold")
                w.presence_threshold = detail::parse_real(value, qual);
            else throw config_error("unknown config key '" + qual + "'");
        } else if (section == "model") {
            if (key == "encoder_hidden") tc.model.encoder_hidden = detail::parse_count(value, qual);
            else if (key == "ade_heads") tc.model.ade_heads = detail::parse_count(value, qual);
            else if (key == "attention_softmax_axis")
                tc.model.attention_softmax_axis = attention_axis_from_string(value);
            else if (key == "use_enhanced_features")
                tc.model.use_enhanced_features = detail::parse_bool(value, qual);
            else throw config_error("unknown config key '" + qual + "'");
        } else if (section == "eval") {
            if (key == "gamma") rc.eval_gamma = detail::parse_real(value, qual);
            else throw config_error("unknown config key '" + qual + "'");
        } else if (section == "paths") {
            if (key == "data") rc.data_path = value;
            else if (key == "checkpoint_dir") tc.checkpoint_dir = value;
            else if (key == "trace") rc.trace_path = value;
            else throw config_error("unknown config key '" + qual + "'");
        } else {
            throw config_error(origin + ":" + std::to_string(line_no) +
                               ": key '" + key + "' appears before any [section]");
        }
    }
    return rc;
}

inline run_config parse_run_config(const std::filesystem::path& path) {
    return parse_run_config_text(detail::read_text_file(path), path.string());
}

/// HDAFL_SEED overrides the configured training seed.
inline void apply_env_overrides(run_config& rc) {
    if (const char* env = std::getenv("HDAFL_SEED")) {
        rc.train.seed = detail::parse_count(env, "HDAFL_SEED");
    }
}

}  // namespace hdafl
