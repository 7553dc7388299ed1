// Desk-scale acceptance suite: one test per shipped guarantee. The trained
// end-to-end model is built once and shared, so this binary must run as a
// single ctest entry.

#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <vector>

#include "hdafl/hdafl.hpp"
#include "testutil.hpp"

using namespace hdafl;
using testutil::rand_mat;

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// 10 seen / 3 unseen classes, 12 attributes, 64 channels, 7x7 maps, 20
// images per class, noise 0.1, seed 1; training runs the default recipe at
// M=4/N=2 for exactly 200 episodes.
struct desk_run {
    dataset ds;
    train_config cfg;
    train_result result;
    double train_seconds = 0;

    static const desk_run& get() {
        static desk_run run;
        return run;
    }

private:
    desk_run() {
        synth_spec spec;
        ds = generate_synthetic(spec);
        cfg.episode = episode_spec{4, 2, 0};
        cfg.epochs = 10;  // 160 training images / (4*2) = 20 episodes per epoch
        cfg.checkpoint_dir.clear();
        const auto t0 = std::chrono::steady_clock::now();
        result = train(ds, cfg, "");
        train_seconds = seconds_since(t0);
    }
};

hdafl::pool_vars pool_vars_over(const std::vector<std::size_t>& attrs,
                                const std::vector<std::size_t>& images, const ad::var& features) {
    hdafl::pool_vars pv;
    pv.attribute_ids = attrs;
    pv.image_ids = images;
    pv.features = features;
    return pv;
}

}  // namespace

TEST(Acceptance, GradientSuitePassesOnRandomInstances) {
    const auto t0 = std::chrono::steady_clock::now();
    rng r(401);
    double worst = 0;

    for (int i = 0; i < 25; ++i) {
        const std::size_t B = 2 + r.below(3);  // <= 4
        const std::size_t C = 2 + r.below(7);  // <= 8
        const std::size_t M = 2 + r.below(3);
        const std::size_t K = 2 + r.below(3);  // <= 4

        std::vector<std::size_t> label_rows;
        std::vector<int> labels;
        for (std::size_t b = 0; b < B; ++b) {
            label_rows.push_back(r.below(M));
            labels.push_back(static_cast<int>(label_rows.back()));
        }
        std::vector<tensor> cls_in{rand_mat(r, B, C), rand_mat(r, M, C)};
        worst = std::max(worst, testutil::check_gradients(
                                    [&](ad::tape& t, const std::vector<ad::var>& v) {
                                        return classification_loss_node(t, v[0], v[1], label_rows,
                                                                        5.0);
                                    },
                                    cls_in)
                                    .max_rel);

        tensor target = rand_mat(r, B, K);
        std::vector<tensor> mse_in{rand_mat(r, B, K)};
        worst = std::max(worst, testutil::check_gradients(
                                    [&](ad::tape& t, const std::vector<ad::var>& v) {
                                        return mse_attribute_loss_node(t, v[0], target);
                                    },
                                    mse_in)
                                    .max_rel);

        const std::size_t n = 3 + r.below(4);
        std::vector<std::size_t> attrs, images;
        for (std::size_t e = 0; e < n; ++e) {
            attrs.push_back(r.below(K));
            images.push_back(e);
        }
        std::vector<tensor> pool_in{rand_mat(r, n, C), rand_mat(r, K, C)};
        for (auto variant : {aal_variant_kind::verbatim, aal_variant_kind::flipped}) {
            worst = std::max(
                worst, testutil::check_gradients(
                           [&](ad::tape& t, const std::vector<ad::var>& v) {
                               return attribute_alignment_loss_node(
                                   t, pool_vars_over(attrs, images, v[0]), v[1], variant, 0.5);
                           },
                           pool_in)
                           .max_rel);
        }

        const double mu = r.uniform(0.0, 0.5), eps = r.uniform(0.0, 0.5);
        std::vector<tensor> acl_in{pool_in[0]};
        worst = std::max(worst, testutil::check_gradients(
                                    [&](ad::tape& t, const std::vector<ad::var>& v) {
                                        return attribute_contrastive_loss_node(
                                            t, pool_vars_over(attrs, images, v[0]), mu, eps, 0.3);
                                    },
                                    acl_in)
                                    .max_rel);

        std::vector<tensor> ccl_in{rand_mat(r, B, C)};
        worst = std::max(worst, testutil::check_gradients(
                                    [&](ad::tape& t, const std::vector<ad::var>& v) {
                                        return class_contrastive_loss_node(t, v[0], labels, 0.1);
                                    },
                                    ccl_in)
                                    .max_rel);

        // channel-attention encoder, all weight groups perturbed
        const std::size_t Ce = 2 * (1 + r.below(4));  // even, <= 8
        model_config mc = testutil::small_model(K, Ce, 2);
        head_params hp = init_head_params(mc, 500 + static_cast<std::uint64_t>(i));
        tensor weight = rand_mat(r, K, Ce);
        std::vector<tensor> ade_in{rand_mat(r, K, Ce), hp.ade.wq[0], hp.ade.wk[0],
                                   hp.ade.wv[0],       hp.ade.wo,    hp.ade.ffn_w1,
                                   hp.ade.ffn_w2};
        worst = std::max(
            worst,
            testutil::check_gradients(
                [&](ad::tape& t, const std::vector<ad::var>& v) {
                    ade_vars av;
                    av.heads = 2;
                    av.wq = {v[1], t.constant(hp.ade.wq[1])};
                    av.wk = {v[2], t.constant(hp.ade.wk[1])};
                    av.wv = {v[3], t.constant(hp.ade.wv[1])};
                    av.wo = v[4];
                    av.ffn_w1 = v[5];
                    av.ffn_b1 = t.constant(hp.ade.ffn_b1);
                    av.ffn_w2 = v[6];
                    av.ffn_b2 = t.constant(hp.ade.ffn_b2);
                    return ad::sum_all(ad::hadamard(ade_encode_node(v[0], av), t.constant(weight)));
                },
                ade_in)
                .max_rel);
    }

    EXPECT_LT(worst, 1e-4);
    EXPECT_LT(seconds_since(t0), 60.0);
}

TEST(Acceptance, MiningMatchesBruteForceOnThousandPools) {
    rng r(402);
    double worst_mined = 0, worst_plain = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        testutil::random_pool rp = testutil::make_random_pool(r, 8, 5);
        attribute_pool pool;
        pool.attribute_ids = rp.attr_ids;
        pool.image_ids = rp.image_ids;
        pool.features = rp.features;
        const double mu = r.uniform(0.0, 0.99);
        const double eps = r.uniform(0.0, 0.99);
        const double tau = r.uniform(0.1, 1.0);
        worst_mined = std::max(
            worst_mined,
            std::fabs(attribute_contrastive_loss(pool, mu, eps, tau) -
                      testutil::acl_oracle(rp.features, rp.attr_ids, rp.image_ids, mu, eps, tau)));
        worst_plain = std::max(
            worst_plain,
            std::fabs(attribute_contrastive_loss(pool, 0.0, 0.0, tau) -
                      testutil::supcon_oracle(rp.features, rp.attr_ids, rp.image_ids, tau)));
    }
    EXPECT_LE(worst_mined, 1e-10);
    EXPECT_LE(worst_plain, 1e-12);
}

TEST(Acceptance, HarmonicMeanMatchesHandComputedPairs) {
    EXPECT_NEAR(harmonic_mean(48.3, 41.9), 44.9, 0.05);
    EXPECT_NEAR(harmonic_mean(70.1, 78.9), 74.3, 0.15);
}

TEST(Acceptance, CalibratedStackingIsArgmaxAtZeroAndMonotone) {
    rng r(403);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 2 + r.below(7);
        tensor protos = rand_mat(r, n, 5);
        tensor h = rand_mat(r, 1, 5);
        std::vector<int> ids;
        std::vector<char> seen;
        for (std::size_t c = 0; c < n; ++c) {
            ids.push_back(static_cast<int>(c));
            seen.push_back(r.below(2) ? 1 : 0);
        }
        ASSERT_EQ(gzsl_predict(h, protos, ids, seen, 25.0, 0.0),
                  czsl_predict(h, protos, ids, 25.0))
            << "trial " << trial;
    }

    const desk_run& run = desk_run::get();
    std::vector<double> gammas;
    for (int i = 0; i <= 20; ++i) gammas.push_back(0.1 * i);
    std::vector<sweep_row> rows = gamma_sweep(run.ds, run.result.params, run.result.model,
                                              run.cfg.weights.alpha, gammas);
    ASSERT_EQ(rows.size(), gammas.size());
    for (std::size_t i = 0; i + 1 < rows.size(); ++i)
        EXPECT_LE(rows[i].unseen_predictions, rows[i + 1].unseen_predictions)
            << "gamma " << rows[i + 1].gamma;
}

TEST(Acceptance, StructuralInvariantsHold) {
    rng r(404);
    model_config cfg = testutil::small_model(4, 8, 2);
    head_params p = init_head_params(cfg, 405);

    tensor f = rand_mat(r, 1, 72).reshaped({3, 3, 8});
    tensor att = attention_maps(f, p.attr_kernels, attention_axis::spatial);
    for (std::size_t k = 0; k < 4; ++k) {
        double sum = 0;
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) sum += att(i, j, k);
        EXPECT_NEAR(sum, 1.0, 1e-6) << "attribute " << k;
    }

    // with W^o and the FFN output layer zeroed both residual branches add
    // nothing, so the encoder must return its input bit for bit
    head_params zeroed = p;
    zeroed.ade.wo = tensor({8, 8}, 0.0);
    zeroed.ade.ffn_w2 = tensor({32, 8}, 0.0);
    zeroed.ade.ffn_b2 = tensor({1, 8}, 0.0);
    tensor af = rand_mat(r, 4, 8);
    tensor out = attribute_discrimination_encode(af, zeroed.ade);
    ASSERT_EQ(out.shape(), af.shape());
    for (std::size_t i = 0; i < af.size(); ++i) EXPECT_EQ(out[i], af[i]) << "entry " << i;

    const auto dir = std::filesystem::path(::testing::TempDir()) / "hdafl_acceptance_ck";
    std::filesystem::create_directories(dir);
    const auto path = dir / "roundtrip.ckpt";
    save_checkpoint(path, named_tensors(p), {{"note", "acceptance"}});
    checkpoint_data ck = load_checkpoint(path);
    head_params back = head_params_from_checkpoint(ck, cfg);
    for (const auto& [name, before] : named_tensors(p)) {
        const tensor& after = ck.require(name);
        ASSERT_EQ(before.size(), after.size()) << name;
        EXPECT_EQ(std::memcmp(before.data(), after.data(), before.size() * sizeof(double)), 0)
            << name;
    }
    forward_out a = forward(f, p, cfg);
    forward_out b = forward(f, back, cfg);
    EXPECT_EQ(std::memcmp(a.eaf.data(), b.eaf.data(), a.eaf.size() * sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(a.h_x.data(), b.h_x.data(), a.h_x.size() * sizeof(double)), 0);
    EXPECT_EQ(std::memcmp(a.a_hat.data(), b.a_hat.data(), a.a_hat.size() * sizeof(double)), 0);
    std::filesystem::remove_all(dir);
}

TEST(Acceptance, DeskScaleRunReachesAccuracyTargets) {
    const desk_run& run = desk_run::get();
    EXPECT_EQ(run.result.trace.size(), 200u);
    EXPECT_LT(run.train_seconds, 300.0);

    const double alpha = run.cfg.weights.alpha;
    eval_report czsl = evaluate(run.ds, run.result.params, run.result.model, eval_mode::czsl,
                                0.0, alpha);
    EXPECT_GE(czsl.acc, 66.0);

    eval_report gzsl = evaluate(run.ds, run.result.params, run.result.model, eval_mode::gzsl,
                                0.7, alpha);
    EXPECT_GT(gzsl.u, 0.0);
    EXPECT_GT(gzsl.h, 0.0);

    // the head must have actually fit the training classes
    const tensor protos = encode_class_prototypes(run.ds.class_semantics,
                                                  run.result.params.class_encoder);
    tensor seen_protos({run.ds.seen_classes.size(), protos.cols()});
    for (std::size_t r = 0; r < run.ds.seen_classes.size(); ++r) {
        const std::size_t src = run.ds.class_row(run.ds.seen_classes[r]);
        for (std::size_t j = 0; j < protos.cols(); ++j) seen_protos(r, j) = protos(src, j);
    }
    std::size_t correct = 0;
    for (std::size_t i : run.ds.train_indices) {
        const tensor h_x = global_feature(run.ds.feature_maps[i]);
        if (czsl_predict(h_x, seen_protos, run.ds.seen_classes, alpha) == run.ds.labels[i])
            ++correct;
    }
    const double train_acc =
        100.0 * static_cast<double>(correct) / static_cast<double>(run.ds.train_indices.size());
    EXPECT_GT(train_acc, 90.0);

    // attribute scores track the class signature: attributes a class has must
    // outscore the ones it lacks, averaged over the test split
    double present_sum = 0, absent_sum = 0;
    std::size_t present_n = 0, absent_n = 0;
    for (std::size_t i : run.ds.test_indices) {
        forward_out fo = forward(run.ds.feature_maps[i], run.result.params, run.result.model);
        const std::size_t row = run.ds.class_row(run.ds.labels[i]);
        for (std::size_t k = 0; k < run.ds.attr_count(); ++k) {
            if (run.ds.class_semantics(row, k) > 0.5) {
                present_sum += fo.a_hat[k];
                ++present_n;
            } else {
                absent_sum += fo.a_hat[k];
                ++absent_n;
            }
        }
    }
    ASSERT_GT(present_n, 0u);
    ASSERT_GT(absent_n, 0u);
    EXPECT_GT(present_sum / static_cast<double>(present_n),
              absent_sum / static_cast<double>(absent_n));
}

TEST(Acceptance, EpisodeSamplerIsUniformAndWellFormed) {
    synth_spec spec;
    spec.n_seen = 8;
    spec.n_unseen = 2;
    spec.attr_count = 4;
    spec.channels = 4;
    spec.height = spec.width = 1;
    spec.images_per_class = 6;
    spec.noise_scale = 0.05;
    spec.seed = 3;
    dataset ds = generate_synthetic(spec);

    std::vector<char> in_train(ds.image_count(), 0);
    for (std::size_t i : ds.train_indices) in_train[i] = 1;

    episode_sampler sampler(ds, episode_spec{4, 2, 9});
    std::map<int, std::size_t> class_draws;
    std::size_t malformed = 0;
    const std::size_t episodes = 10000;
    for (std::size_t e = 0; e < episodes; ++e) {
        episode_batch batch = sampler.next();
        if (batch.size() != 8) ++malformed;
        std::map<int, std::size_t> per_class;
        std::set<std::size_t> images;
        for (std::size_t b = 0; b < batch.size(); ++b) {
            ++per_class[batch.labels[b]];
            images.insert(batch.image_indices[b]);
            if (!in_train[batch.image_indices[b]]) ++malformed;
            if (!ds.is_seen(batch.labels[b])) ++malformed;
        }
        if (per_class.size() != 4 || images.size() != 8) ++malformed;
        for (const auto& [cls, count] : per_class) {
            if (count != 2) ++malformed;
            ++class_draws[cls];
        }
    }
    EXPECT_EQ(malformed, 0u);

    const double expected = static_cast<double>(episodes) * 4 / 8;
    ASSERT_EQ(class_draws.size(), 8u);
    for (const auto& [cls, count] : class_draws)
        EXPECT_NEAR(static_cast<double>(count), expected, 0.05 * expected) << "class " << cls;
}
