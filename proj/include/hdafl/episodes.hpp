#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "hdafl/common.hpp"
#include "hdafl/dataset.hpp"
#include "hdafl/rng.hpp"
#include "hdafl/tensor.hpp"

namespace hdafl {

struct episode_spec {
    std::size_t ways = 16;
    std::size_t shots = 2;
    std::uint64_t seed = 0;

    void validate() const {
        if (ways == 0) throw config_error("episode: ways must be positive");
        if (shots == 0) throw config_error("episode: shots must be positive");
    }
};

struct episode_batch {
    std::vector<std::size_t> image_indices;  // into the dataset
    std::vector<const tensor*> feature_maps;
    std::vector<int> labels;
    tensor attribute_rows;  // B x K, class_semantics row per image

    std::size_t size() const { return image_indices.size(); }
};

/// Draws ways x shots batches from the training split: classes without
/// replacement within an episode, with replacement across episodes. Episode i
/// uses its own derived stream, so seek() + next() reproduces any point of a
/// run regardless of history.
class episode_sampler {
  public:
    episode_sampler(const dataset& ds, episode_spec spec) : ds_(&ds), spec_(spec) {
        spec_.validate();
        if (ds.train_indices.empty()) throw sampling_error("dataset has no training images");
        if (spec_.ways > ds.seen_classes.size())
            throw sampling_error("episode ways (" + std::to_string(spec_.ways) +
                                 ") exceeds seen class count (" +
                                 std::to_string(ds.seen_classes.size()) + ")");
        train_by_class_.resize(ds.seen_classes.size());
        for (std::size_t idx : ds.train_indices) {
            const int label = ds.labels[idx];
            const auto it =
                std::lower_bound(ds.seen_classes.begin(), ds.seen_classes.end(), label);
            train_by_class_[static_cast<std::size_t>(it - ds.seen_classes.begin())].push_back(idx);
        }
    }

    std::size_t episodes_per_epoch() const {
        const std::size_t batch = spec_.ways * spec_.shots;
        return (ds_->train_indices.size() + batch - 1) / batch;
    }

    std::size_t episode_index() const { return episode_index_; }
    void seek(std::size_t episode_index) { episode_index_ = episode_index; }

    episode_batch next() {
        rng r = rng::derive(spec_.seed, episode_index_);
        ++episode_index_;
        episode_batch batch;
        const std::vector<std::size_t> class_picks =
            r.sample_without_replacement(ds_->seen_classes.size(), spec_.ways);
        for (std::size_t ci : class_picks) {
            const std::vector<std::size_t>& pool = train_by_class_[ci];
            if (pool.size() < spec_.shots)
                throw sampling_error("class " + std::to_string(ds_->seen_classes[ci]) + " has " +
                                     std::to_string(pool.size()) + " training images but " +
                                     std::to_string(spec_.shots) + " shots were requested");
            for (std::size_t pick : r.sample_without_replacement(pool.size(), spec_.shots))
                batch.image_indices.push_back(pool[pick]);
        }
        batch.feature_maps.reserve(batch.size());
        batch.labels.reserve(batch.size());
        batch.attribute_rows = tensor({batch.size(), ds_->class_semantics.cols()});
        for (std::size_t i = 0; i < batch.image_indices.size(); ++i) {
            const std::size_t idx = batch.image_indices[i];
            batch.feature_maps.push_back(&ds_->feature_maps[idx]);
            batch.labels.push_back(ds_->labels[idx]);
            const std::size_t row = ds_->class_row(ds_->labels[idx]);
            for (std::size_t j = 0; j < ds_->class_semantics.cols(); ++j)
                batch.attribute_rows(i, j) = ds_->class_semantics(row, j);
        }
        return batch;
    }

  private:
    const dataset* ds_;
    episode_spec spec_;
    std::vector<std::vector<std::size_t>> train_by_class_;
    std::size_t episode_index_ = 0;
};

}  // namespace hdafl
