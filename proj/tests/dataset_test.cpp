#include <gtest/gtest.h>

#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "hdafl/dataset.hpp"
#include "hdafl/episodes.hpp"
#include "hdafl/model.hpp"
#include "hdafl/synthetic.hpp"
#include "testutil.hpp"

namespace fs = std::filesystem;
using hdafl::dataset;
using hdafl::episode_sampler;
using hdafl::episode_spec;
using hdafl::synth_spec;
using hdafl::tensor;

namespace {

struct temp_dir {
    fs::path path;
    explicit temp_dir(const std::string& tag) {
        path = fs::path(testing::TempDir()) / (tag + "_" + std::to_string(::getpid()));
        fs::remove_all(path);
    }
    ~temp_dir() { fs::remove_all(path); }
};

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
}

synth_spec small_spec() {
    synth_spec s;
    s.n_seen = 6;
    s.n_unseen = 2;
    s.attr_count = 4;
    s.channels = 4;
    s.height = 2;
    s.width = 2;
    s.images_per_class = 6;
    s.noise_scale = 0.05;
    s.seed = 11;
    return s;
}

dataset tiny_dataset() {
    dataset ds;
    ds.height = ds.width = 1;
    ds.channels = 2;
    ds.feature_maps = {tensor({1, 1, 2}, 0.25), tensor({1, 1, 2}, 0.5), tensor({1, 1, 2}, 0.75)};
    ds.labels = {0, 0, 1};
    ds.class_ids = {0, 1};
    ds.class_semantics = tensor::from({2, 2}, {1, 0, 0, 1});
    ds.attribute_semantics = tensor::identity(2);
    ds.seen_classes = {0};
    ds.unseen_classes = {1};
    ds.train_indices = {0};
    ds.test_indices = {1, 2};
    return ds;
}

}  // namespace

TEST(Synthetic, GeneratesDeclaredCounts) {
    synth_spec spec;  // defaults: 10 seen, 3 unseen, 20 images per class
    dataset ds = hdafl::generate_synthetic(spec);
    EXPECT_EQ(ds.image_count(), 260u);
    EXPECT_EQ(ds.class_count(), 13u);
    EXPECT_EQ(ds.attr_count(), 12u);
    EXPECT_EQ(ds.seen_classes.size(), 10u);
    EXPECT_EQ(ds.unseen_classes.size(), 3u);
    EXPECT_EQ(ds.train_indices.size(), 160u);  // 16 of every seen class's 20
    EXPECT_EQ(ds.test_indices.size(), 100u);
    EXPECT_NO_THROW(ds.validate());
}

TEST(Synthetic, ClassSignaturesAreDistinctBinaryAndNonEmpty) {
    dataset ds = hdafl::generate_synthetic(small_spec());
    std::set<std::vector<double>> seen_rows;
    for (std::size_t r = 0; r < ds.class_semantics.rows(); ++r) {
        std::vector<double> row;
        bool any = false;
        for (std::size_t j = 0; j < ds.class_semantics.cols(); ++j) {
            double v = ds.class_semantics(r, j);
            EXPECT_TRUE(v == 0.0 || v == 1.0);
            any = any || v == 1.0;
            row.push_back(v);
        }
        EXPECT_TRUE(any) << "class row " << r;
        EXPECT_TRUE(seen_rows.insert(row).second) << "duplicate signature at row " << r;
    }
    // attribute self-descriptions are one-hot
    EXPECT_EQ(ds.attribute_semantics.rows(), 4u);
    EXPECT_EQ(ds.attribute_semantics.cols(), 4u);
}

TEST(Synthetic, SameSeedSameBytesDifferentSeedDiffers) {
    dataset a = hdafl::generate_synthetic(small_spec());
    dataset b = hdafl::generate_synthetic(small_spec());
    synth_spec other = small_spec();
    other.seed = 12;
    dataset c = hdafl::generate_synthetic(other);
    ASSERT_EQ(a.image_count(), b.image_count());
    for (std::size_t i = 0; i < a.image_count(); ++i)
        ASSERT_EQ(std::memcmp(a.feature_maps[i].data(), b.feature_maps[i].data(),
                              a.feature_maps[i].size() * sizeof(double)),
                  0);
    bool differs = false;
    for (std::size_t i = 0; i < a.image_count() && !differs; ++i)
        differs = std::memcmp(a.feature_maps[i].data(), c.feature_maps[i].data(),
                              a.feature_maps[i].size() * sizeof(double)) != 0;
    EXPECT_TRUE(differs);
}

TEST(Synthetic, NoiselessImagesOfAClassShareTheirSpatialSum) {
    synth_spec spec = small_spec();
    spec.noise_scale = 0.0;
    dataset ds = hdafl::generate_synthetic(spec);
    std::map<int, tensor> sums;
    for (std::size_t i = 0; i < ds.image_count(); ++i) {
        tensor h = hdafl::global_feature(ds.feature_maps[i]);
        auto [it, fresh] = sums.emplace(ds.labels[i], h);
        if (!fresh)
            for (std::size_t c = 0; c < h.size(); ++c)
                EXPECT_NEAR(h[c], it->second[c], 1e-6) << "class " << ds.labels[i];
    }
    // different classes carry different signatures, so their sums differ
    EXPECT_GT(sums.size(), 1u);
}

TEST(Synthetic, RejectsMoreAttributesThanChannels) {
    synth_spec spec = small_spec();
    spec.attr_count = 5;
    spec.channels = 4;
    EXPECT_THROW(hdafl::generate_synthetic(spec), hdafl::config_error);
}

TEST(DatasetIo, SaveLoadRoundTripsExactly) {
    temp_dir dir("hdafl_roundtrip");
    dataset ds = hdafl::generate_synthetic(small_spec());
    hdafl::save_dataset(ds, dir.path);
    dataset back = hdafl::load_dataset(dir.path);

    ASSERT_EQ(back.image_count(), ds.image_count());
    for (std::size_t i = 0; i < ds.image_count(); ++i)
        ASSERT_EQ(std::memcmp(back.feature_maps[i].data(), ds.feature_maps[i].data(),
                              ds.feature_maps[i].size() * sizeof(double)),
                  0)
            << "image " << i;
    EXPECT_EQ(back.labels, ds.labels);
    EXPECT_EQ(back.class_ids, ds.class_ids);
    EXPECT_EQ(back.seen_classes, ds.seen_classes);
    EXPECT_EQ(back.unseen_classes, ds.unseen_classes);
    EXPECT_EQ(back.train_indices, ds.train_indices);
    EXPECT_EQ(back.test_indices, ds.test_indices);
    ASSERT_TRUE(back.class_semantics.same_shape(ds.class_semantics));
    for (std::size_t i = 0; i < ds.class_semantics.size(); ++i)
        ASSERT_EQ(back.class_semantics[i], ds.class_semantics[i]);
    ASSERT_TRUE(back.attribute_semantics.same_shape(ds.attribute_semantics));
}

TEST(DatasetIo, RepeatedSavesAreByteIdentical) {
    temp_dir a("hdafl_bytes_a"), b("hdafl_bytes_b");
    dataset ds = hdafl::generate_synthetic(small_spec());
    hdafl::save_dataset(ds, a.path);
    hdafl::save_dataset(ds, b.path);
    for (const char* name : {"features.bin", "features.json", "labels.csv",
                             "class_semantics.csv", "attribute_semantics.csv", "splits.json"}) {
        EXPECT_EQ(slurp(a.path / name), slurp(b.path / name)) << name;
        EXPECT_FALSE(slurp(a.path / name).empty()) << name;
    }
}

TEST(DatasetIo, RefusesNonEmptyTargetWithoutForce) {
    temp_dir dir("hdafl_refuse");
    fs::create_directories(dir.path);
    std::ofstream(dir.path / "keep.txt") << "x";
    dataset ds = tiny_dataset();
    EXPECT_THROW(hdafl::save_dataset(ds, dir.path), hdafl::validation_error);
    EXPECT_NO_THROW(hdafl::save_dataset(ds, dir.path, true));
}

TEST(DatasetIo, MissingPiecesRaiseLoadErrors) {
    temp_dir dir("hdafl_missing");
    EXPECT_THROW(hdafl::load_dataset(dir.path / "nowhere"), hdafl::load_error);

    hdafl::save_dataset(tiny_dataset(), dir.path);
    fs::remove(dir.path / "attribute_semantics.csv");
    try {
        hdafl::load_dataset(dir.path);
        FAIL() << "expected load_error";
    } catch (const hdafl::load_error& e) {
        EXPECT_NE(std::string(e.what()).find("attributes"), std::string::npos);
    }

    temp_dir dir2("hdafl_missing2");
    hdafl::save_dataset(tiny_dataset(), dir2.path);
    fs::remove(dir2.path / "labels.csv");
    EXPECT_THROW(hdafl::load_dataset(dir2.path), hdafl::load_error);
}

TEST(DatasetIo, FeatureSizeMismatchIsRejected) {
    temp_dir dir("hdafl_badsize");
    hdafl::save_dataset(tiny_dataset(), dir.path);
    std::ofstream bin(dir.path / "features.bin", std::ios::binary | std::ios::trunc);
    float one = 1.0f;
    bin.write(reinterpret_cast<const char*>(&one), sizeof(one));
    bin.close();
    try {
        hdafl::load_dataset(dir.path);
        FAIL() << "expected validation_error";
    } catch (const hdafl::validation_error& e) {
        EXPECT_NE(std::string(e.what()).find("requires"), std::string::npos);
    }
}

TEST(DatasetIo, DuplicateLabelRowsAreRejected) {
    temp_dir dir("hdafl_duplabel");
    hdafl::save_dataset(tiny_dataset(), dir.path);
    std::ofstream(dir.path / "labels.csv", std::ios::trunc) << "0,0\n0,0\n2,1\n";
    EXPECT_THROW(hdafl::load_dataset(dir.path), hdafl::validation_error);
}

TEST(DatasetValidation, CatchesStructuralMistakes) {
    dataset ds = tiny_dataset();
    ds.unseen_classes = {0, 1};
    try {
        ds.validate();
        FAIL() << "expected validation_error";
    } catch (const hdafl::validation_error& e) {
        EXPECT_NE(std::string(e.what()).find("class 0"), std::string::npos);
    }

    ds = tiny_dataset();
    ds.train_indices = {2};  // class 1 is unseen
    ds.test_indices = {0, 1};
    EXPECT_THROW(ds.validate(), hdafl::validation_error);

    ds = tiny_dataset();
    ds.test_indices = {1, 1};
    EXPECT_THROW(ds.validate(), hdafl::validation_error);

    ds = tiny_dataset();
    ds.feature_maps[1] = tensor({1, 1, 3}, 0.0);
    try {
        ds.validate();
        FAIL() << "expected validation_error";
    } catch (const hdafl::validation_error& e) {
        EXPECT_NE(std::string(e.what()).find("image 1"), std::string::npos);
    }

    ds = tiny_dataset();
    ds.labels[0] = 9;
    EXPECT_THROW(ds.validate(), hdafl::validation_error);

    ds = tiny_dataset();
    ds.class_semantics = tensor({2, 3}, 1.0);  // width 3 vs 2 attributes
    EXPECT_THROW(ds.validate(), hdafl::validation_error);
}

TEST(DatasetValidation, NormalizedAttributesUseColumnMinMax) {
    dataset ds = tiny_dataset();
    ds.class_semantics = tensor::from({2, 4}, {0, 2, 5, 0, 10, 2, 0, 0});
    ds.attribute_semantics = tensor::identity(4);
    tensor norm = ds.normalized_class_attributes();
    EXPECT_DOUBLE_EQ(norm(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(norm(1, 0), 1.0);
    EXPECT_DOUBLE_EQ(norm(0, 1), 1.0);  // constant nonzero column
    EXPECT_DOUBLE_EQ(norm(1, 1), 1.0);
    EXPECT_DOUBLE_EQ(norm(0, 2), 1.0);
    EXPECT_DOUBLE_EQ(norm(1, 2), 0.0);
    EXPECT_DOUBLE_EQ(norm(0, 3), 0.0);  // constant zero column
    EXPECT_DOUBLE_EQ(norm(1, 3), 0.0);
}

// ---- episode sampling ----

TEST(Episodes, BatchHoldsWaysClassesTimesShotsImages) {
    dataset ds = hdafl::generate_synthetic(small_spec());
    episode_sampler sampler(ds, episode_spec{3, 2, 7});
    hdafl::episode_batch batch = sampler.next();
    ASSERT_EQ(batch.size(), 6u);
    std::map<int, int> per_class;
    std::set<std::size_t> distinct_images;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        per_class[batch.labels[i]]++;
        distinct_images.insert(batch.image_indices[i]);
        EXPECT_TRUE(ds.is_seen(batch.labels[i]));
        EXPECT_EQ(batch.feature_maps[i], &ds.feature_maps[batch.image_indices[i]]);
        std::size_t row = ds.class_row(batch.labels[i]);
        for (std::size_t k = 0; k < ds.attr_count(); ++k)
            EXPECT_DOUBLE_EQ(batch.attribute_rows(i, k), ds.class_semantics(row, k));
    }
    EXPECT_EQ(per_class.size(), 3u);
    for (auto [cls, count] : per_class) EXPECT_EQ(count, 2) << "class " << cls;
    EXPECT_EQ(distinct_images.size(), 6u);
}

TEST(Episodes, DrawsOnlyFromTrainSplit) {
    dataset ds = hdafl::generate_synthetic(small_spec());
    std::set<std::size_t> train(ds.train_indices.begin(), ds.train_indices.end());
    episode_sampler sampler(ds, episode_spec{4, 2, 3});
    for (int e = 0; e < 30; ++e) {
        hdafl::episode_batch batch = sampler.next();
        for (std::size_t idx : batch.image_indices) EXPECT_TRUE(train.count(idx));
    }
}

TEST(Episodes, PerEpochCountRoundsUp) {
    dataset ds = hdafl::generate_synthetic(small_spec());
    // 6 seen classes keep 5 of their 6 images for training
    ASSERT_EQ(ds.train_indices.size(), 30u);
    EXPECT_EQ(episode_sampler(ds, episode_spec{3, 2, 0}).episodes_per_epoch(), 5u);
    EXPECT_EQ(episode_sampler(ds, episode_spec{4, 2, 0}).episodes_per_epoch(), 4u);
    EXPECT_EQ(episode_sampler(ds, episode_spec{1, 1, 0}).episodes_per_epoch(), 30u);
}

TEST(Episodes, SequencesAreSeededAndSeekable) {
    dataset ds = hdafl::generate_synthetic(small_spec());
    episode_sampler a(ds, episode_spec{3, 2, 9});
    episode_sampler b(ds, episode_spec{3, 2, 9});
    episode_sampler other(ds, episode_spec{3, 2, 10});
    std::vector<hdafl::episode_batch> first;
    bool seed_matters = false;
    for (int e = 0; e < 8; ++e) {
        hdafl::episode_batch ba = a.next(), bb = b.next(), bo = other.next();
        EXPECT_EQ(ba.image_indices, bb.image_indices);
        EXPECT_EQ(ba.labels, bb.labels);
        seed_matters = seed_matters || ba.image_indices != bo.image_indices;
        first.push_back(std::move(ba));
    }
    EXPECT_TRUE(seed_matters);

    b.seek(3);
    hdafl::episode_batch replay = b.next();
    EXPECT_EQ(replay.image_indices, first[3].image_indices);
    EXPECT_EQ(b.episode_index(), 4u);
}

TEST(Episodes, RejectsImpossibleSpecs) {
    dataset ds = hdafl::generate_synthetic(small_spec());
    EXPECT_THROW(episode_sampler(ds, episode_spec{7, 2, 0}), hdafl::sampling_error);
    episode_sampler starved(ds, episode_spec{2, 6, 0});  // only 5 train images per class
    EXPECT_THROW(starved.next(), hdafl::sampling_error);
    EXPECT_THROW((episode_spec{0, 1, 0}).validate(), hdafl::config_error);
    EXPECT_THROW((episode_spec{1, 0, 0}).validate(), hdafl::config_error);

    dataset no_train = tiny_dataset();
    no_train.train_indices.clear();
    no_train.test_indices = {0, 1, 2};
    EXPECT_THROW(episode_sampler(no_train, episode_spec{1, 1, 0}), hdafl::sampling_error);
}

TEST(Episodes, SingleWaySingleShotWorks) {
    dataset ds = hdafl::generate_synthetic(small_spec());
    episode_sampler sampler(ds, episode_spec{1, 1, 2});
    hdafl::episode_batch batch = sampler.next();
    EXPECT_EQ(batch.size(), 1u);
}

TEST(Episodes, ClassDrawsAreCloseToUniform) {
    synth_spec spec = small_spec();
    spec.n_seen = 8;
    dataset ds = hdafl::generate_synthetic(spec);
    episode_sampler sampler(ds, episode_spec{4, 1, 13});
    std::map<int, std::size_t> counts;
    const int episodes = 2000;
    for (int e = 0; e < episodes; ++e) {
        std::set<int> classes;
        hdafl::episode_batch batch = sampler.next();
        for (int label : batch.labels) classes.insert(label);
        ASSERT_EQ(classes.size(), 4u);
        for (int label : classes) counts[label]++;
    }
    ASSERT_EQ(counts.size(), 8u);
    const double expect = episodes * 4.0 / 8.0;
    for (auto [cls, count] : counts)
        EXPECT_NEAR(static_cast<double>(count), expect, 0.10 * expect) << "class " << cls;
}
