#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "hdafl/common.hpp"
#include "hdafl/dataset.hpp"
#include "hdafl/rng.hpp"
#include "hdafl/tensor.hpp"

namespace hdafl {

struct synth_spec {
    std::size_t n_seen = 10;
    std::size_t n_unseen = 3;
    std::size_t attr_count = 12;
    std::size_t channels = 64;
    std::size_t height = 7;
    std::size_t width = 7;
    std::size_t images_per_class = 20;
    double noise_scale = 0.1;
    std::uint64_t seed = 1;

    void validate() const {
        if (n_seen == 0 || n_unseen == 0 || attr_count == 0 || channels == 0 || height == 0 ||
            width == 0 || images_per_class == 0)
            throw config_error("synth_spec: all counts must be positive");
        if (attr_count > channels)
            throw config_error("synth_spec: attr_count (" + std::to_string(attr_count) +
                               ") must not exceed channels (" + std::to_string(channels) + ")");
        if (!(noise_scale >= 0)) throw config_error("synth_spec: noise_scale must be >= 0");
    }
};

/// Builds a desk-scale dataset where each class owns a binary attribute
/// signature and every present attribute injects a fixed direction in channel
/// space at one random spatial cell per image. Class semantics equal the
/// signature, so they double as ground-truth attribute vectors. Deterministic
/// per seed; features are rounded through 32-bit floats so that saving and
/// reloading the directory is lossless.
inline dataset generate_synthetic(const synth_spec& spec) {
    spec.validate();
    rng r(spec.seed);
    const std::size_t n_classes = spec.n_seen + spec.n_unseen;
    const std::size_t k = spec.attr_count;
    const std::size_t c = spec.channels;

    // distinct, non-empty signatures at density 0.4
    std::vector<std::vector<char>> signatures;
    std::set<std::vector<char>> used;
    for (std::size_t y = 0; y < n_classes; ++y) {
        std::vector<char> sig(k);
        std::size_t attempts = 0;
        for (;;) {
            bool any = false;
            for (std::size_t j = 0; j < k; ++j) {
                sig[j] = r.uniform() < 0.4 ? 1 : 0;
                any = any || sig[j];
            }
            if (any && !used.count(sig)) break;
            if (++attempts > 100000)
                throw config_error("synth_spec: cannot draw " + std::to_string(n_classes) +
                                   " distinct attribute signatures over " + std::to_string(k) +
                                   " attributes");
        }
        used.insert(sig);
        signatures.push_back(sig);
    }

    // one unit signal direction per attribute
    std::vector<std::vector<double>> directions(k, std::vector<double>(c));
    for (std::size_t j = 0; j < k; ++j) {
        double nrm = 0;
        do {
            nrm = 0;
            for (std::size_t e = 0; e < c; ++e) {
                directions[j][e] = r.normal();
                nrm += directions[j][e] * directions[j][e];
            }
        } while (nrm < 1e-12);
        nrm = std::sqrt(nrm);
        for (std::size_t e = 0; e < c; ++e) directions[j][e] /= nrm;
    }

    constexpr double signal_strength = 4.0;

    dataset ds;
    ds.height = spec.height;
    ds.width = spec.width;
    ds.channels = c;
    ds.class_semantics = tensor({n_classes, k});
    for (std::size_t y = 0; y < n_classes; ++y) {
        ds.class_ids.push_back(static_cast<int>(y));
        for (std::size_t j = 0; j < k; ++j) ds.class_semantics(y, j) = signatures[y][j];
        if (y < spec.n_seen)
            ds.seen_classes.push_back(static_cast<int>(y));
        else
            ds.unseen_classes.push_back(static_cast<int>(y));
    }
    ds.attribute_semantics = tensor::identity(k);

    const std::size_t cells = spec.height * spec.width;
    const std::size_t train_per_class =
        std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(
                                                                                 spec.images_per_class))));
    for (std::size_t y = 0; y < n_classes; ++y) {
        for (std::size_t img = 0; img < spec.images_per_class; ++img) {
            tensor f({spec.height, spec.width, c});
            if (spec.noise_scale > 0)
                for (std::size_t e = 0; e < f.size(); ++e)
                    f.storage()[e] = spec.noise_scale * r.normal();
            for (std::size_t j = 0; j < k; ++j) {
                if (!signatures[y][j]) continue;
                const std::size_t cell = r.below(cells);
                const std::size_t row = cell / spec.width, col = cell % spec.width;
                for (std::size_t e = 0; e < c; ++e)
                    f(row, col, e) += signal_strength * directions[j][e];
            }
            for (std::size_t e = 0; e < f.size(); ++e)
                f.storage()[e] = static_cast<double>(static_cast<float>(f.storage()[e]));
            const std::size_t index = ds.feature_maps.size();
            ds.feature_maps.push_back(std::move(f));
            ds.labels.push_back(static_cast<int>(y));
            const bool is_train = y < spec.n_seen && img < train_per_class;
            if (is_train)
                ds.train_indices.push_back(index);
            else
                ds.test_indices.push_back(index);
        }
    }

    ds.validate();
    return ds;
}

}  // namespace hdafl
