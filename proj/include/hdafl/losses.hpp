#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "hdafl/autodiff.hpp"
#include "hdafl/common.hpp"
#include "hdafl/model.hpp"
#include "hdafl/tensor.hpp"

namespace hdafl {

enum class aal_variant_kind { verbatim, flipped };

inline const char* to_string(aal_variant_kind v) {
    return v == aal_variant_kind::verbatim ? "verbatim" : "flipped";
}

inline aal_variant_kind aal_variant_from_string(const std::string& s) {
    if (s == "verbatim") return aal_variant_kind::verbatim;
    if (s == "flipped") return aal_variant_kind::flipped;
    throw config_error("aal_variant must be 'verbatim' or 'flipped', got '" + s + "'");
}

struct loss_weights {
    double alpha = 25.0;      // cosine logit scale
    double tau_attr = 0.3;    // attribute contrast temperature
    double tau_class = 0.1;   // class contrast temperature
    double mu = 0.32;         // fraction of positives dropped (most similar)
    double epsilon = 0.42;    // fraction of negatives dropped (least similar)
    double lambda_mse = 1.0;
    double lambda_align = 1.0;
    double lambda_attr_contrast = 1.0;
    double lambda_class_contrast = 1.0;
    aal_variant_kind aal_variant = aal_variant_kind::verbatim;
    double aal_margin = 0.5;  // only used by the flipped variant
    double presence_threshold = 0.5;

    void validate() const {
        if (!(alpha > 0)) throw config_error("loss: alpha must be positive");
        if (!(tau_attr > 0) || !(tau_class > 0))
            throw config_error("loss: temperatures must be positive");
        if (!(mu >= 0 && mu < 1)) throw config_error("loss: mu must be in [0, 1)");
        if (!(epsilon >= 0 && epsilon < 1)) throw config_error("loss: epsilon must be in [0, 1)");
        if (!(lambda_mse >= 0) || !(lambda_align >= 0) || !(lambda_attr_contrast >= 0) ||
            !(lambda_class_contrast >= 0))
            throw config_error("loss: lambda weights must be non-negative");
        if (!std::isfinite(aal_margin)) throw config_error("loss: aal_margin must be finite");
        if (!(presence_threshold >= 0 && presence_threshold <= 1))
            throw config_error("loss: presence_threshold must be in [0, 1]");
    }
};

// ---- hard sample mining ----

enum class mining_direction { drop_most_similar, drop_least_similar };

inline std::size_t mining_drop_count(double fraction, std::size_t n) {
    return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
}

/// Retains all but the floor(fraction*n) entries ranked first by similarity
/// (descending for drop_most_similar, ascending otherwise). Ties rank by
/// original index. Returned indices are ascending.
inline std::vector<std::size_t> mine_by_similarity(const std::vector<double>& sims,
                                                   double fraction, mining_direction dir) {
    if (!(fraction >= 0.0 && fraction < 1.0))
        throw validation_error("mining fraction must be in [0, 1)");
    const std::size_t n = sims.size();
    if (n == 0) return {};
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (dir == mining_direction::drop_most_similar)
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });
    else
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return sims[a] < sims[b]; });
    std::vector<std::size_t> retained(order.begin() + mining_drop_count(fraction, n), order.end());
    std::sort(retained.begin(), retained.end());
    return retained;
}

inline std::vector<std::size_t> mine_hard_samples(const tensor& anchor,
                                                  const std::vector<tensor>& candidates,
                                                  double fraction, mining_direction dir) {
    std::vector<double> sims;
    sims.reserve(candidates.size());
    for (const tensor& c : candidates) sims.push_back(cosine(anchor, c));
    return mine_by_similarity(sims, fraction, dir);
}

// ---- attribute feature pool ----

struct attribute_pool {
    std::vector<std::size_t> attribute_ids;  // parallel arrays, one row each
    std::vector<std::size_t> image_ids;
    tensor features;  // P x C

    std::size_t size() const { return attribute_ids.size(); }
    bool empty() const { return attribute_ids.empty(); }
};

struct pool_vars {
    std::vector<std::size_t> attribute_ids;
    std::vector<std::size_t> image_ids;
    ad::var features;

    std::size_t size() const { return attribute_ids.size(); }
    bool empty() const { return attribute_ids.empty(); }
};

/// Gathers one feature row per (image, present attribute) pair. `attr_truth`
/// holds the per-image normalized attribute vector, one row per forward
/// output; values strictly above the threshold count as present.
inline pool_vars build_attribute_pool_node(const std::vector<forward_vars>& outs,
                                           const tensor& attr_truth, double threshold,
                                           bool use_enhanced) {
    if (outs.size() != attr_truth.rows())
        throw validation_error("attribute pool: one truth row per image required");
    pool_vars pool;
    std::vector<ad::var> pieces;
    for (std::size_t i = 0; i < outs.size(); ++i) {
        const ad::var& feat = use_enhanced ? outs[i].eaf : outs[i].af;
        std::vector<std::size_t> present;
        for (std::size_t k = 0; k < attr_truth.cols(); ++k)
            if (attr_truth(i, k) > threshold) present.push_back(k);
        if (present.empty()) continue;
        pieces.push_back(ad::gather_rows(feat, present));
        for (std::size_t k : present) {
            pool.attribute_ids.push_back(k);
            pool.image_ids.push_back(i);
        }
    }
    if (pieces.empty()) {
        warn("attribute pool is empty: no attribute exceeds the presence threshold");
        return pool;
    }
    pool.features = pieces.size() == 1 ? pieces[0] : ad::concat_rows(pieces);
    return pool;
}

inline attribute_pool build_attribute_pool(const std::vector<forward_out>& outs,
                                           const tensor& attr_truth, double threshold,
                                           bool use_enhanced) {
    ad::tape t;
    std::vector<forward_vars> vars(outs.size());
    for (std::size_t i = 0; i < outs.size(); ++i) {
        const tensor& feat = use_enhanced ? outs[i].eaf : outs[i].af;
        vars[i].eaf = t.constant(feat);
        vars[i].af = vars[i].eaf;
    }
    pool_vars pv = build_attribute_pool_node(vars, attr_truth, threshold, true);
    attribute_pool pool;
    pool.attribute_ids = std::move(pv.attribute_ids);
    pool.image_ids = std::move(pv.image_ids);
    if (!pool.empty()) pool.features = pv.features.value();
    return pool;
}

// ---- losses, tape level ----

/// Cross entropy over alpha-scaled cosine similarities between pooled image
/// features and class prototypes, averaged over the batch.
inline ad::var classification_loss_node(ad::tape& t, const ad::var& h_batch, const ad::var& protos,
                                        const std::vector<std::size_t>& label_rows, double alpha) {
    const std::size_t b = h_batch.value().rows();
    if (label_rows.size() != b)
        throw validation_error("classification loss: one label per batch row required");
    for (std::size_t r : label_rows)
        if (r >= protos.value().rows())
            throw validation_error("classification loss: label row out of range");
    ad::var logits = ad::scale(ad::cosine_matrix(h_batch, protos), alpha);  // B x M
    ad::var lse = ad::reshape(ad::logsumexp_rows(logits), {1, b});
    std::vector<std::size_t> rows(b);
    std::iota(rows.begin(), rows.end(), std::size_t{0});
    ad::var picked = ad::gather_elements(logits, rows, label_rows);  // 1 x B
    (void)t;
    return ad::mean_all(ad::sub(lse, picked));
}

/// Total squared error between predicted and target attribute vectors.
/// Callers average over the batch when rows span several images.
inline ad::var mse_attribute_loss_node(ad::tape& t, const ad::var& a_hat, const tensor& target) {
    if (!a_hat.value().same_shape(target))
        throw validation_error("mse loss: prediction " + a_hat.value().shape_str() +
                               " vs target " + tensor(target).shape_str() + " shape mismatch");
    ad::var d = ad::sub(a_hat, t.constant(target));
    return ad::sum_all(ad::hadamard(d, d));
}

/// Keeps each pooled attribute feature at least as close to its own prototype
/// as to half the nearest foreign prototype. The verbatim form penalizes
/// relu(cos_own - 0.5 * min_other); the flipped form penalizes
/// relu(0.5 * min_other - cos_own + margin).
inline ad::var attribute_alignment_loss_node(ad::tape& t, const pool_vars& pool,
                                             const ad::var& attr_protos, aal_variant_kind variant,
                                             double margin) {
    const std::size_t k = attr_protos.value().rows();
    if (pool.empty()) return t.constant(tensor({1, 1}, 0.0));
    if (k < 2) {
        warn("attribute alignment loss needs at least two attribute prototypes; returning 0");
        return t.constant(tensor({1, 1}, 0.0));
    }
    ad::var cos = ad::cosine_matrix(pool.features, attr_protos);  // P x K
    ad::var total;
    for (std::size_t e = 0; e < pool.size(); ++e) {
        const std::size_t j = pool.attribute_ids[e];
        if (j >= k) throw validation_error("attribute alignment loss: attribute id out of range");
        ad::var own = ad::gather_elements(cos, {e}, {j});
        std::vector<std::size_t> rows, cols;
        for (std::size_t jj = 0; jj < k; ++jj)
            if (jj != j) {
                rows.push_back(e);
                cols.push_back(jj);
            }
        ad::var half_min = ad::scale(ad::min_all(ad::gather_elements(cos, rows, cols)), 0.5);
        ad::var term;
        if (variant == aal_variant_kind::verbatim)
            term = ad::relu(ad::sub(own, half_min));
        else
            term = ad::relu(ad::add(ad::sub(half_min, own), t.constant(tensor({1, 1}, margin))));
        total = total.valid() ? ad::add(total, term) : term;
    }
    return total;
}

/// Supervised contrast across the attribute pool with hard mining: for each
/// anchor the most similar floor(mu*n) positives and least similar
/// floor(epsilon*n) negatives are dropped, then the anchor contributes the
/// mean over retained positives u of
///   -log( exp(cos_u/tau) / sum_retained exp(cos/tau) )
/// which is logsumexp(retained/tau) - mean(pos/tau). Anchors without a
/// positive are skipped; the result is the mean over contributing anchors.
inline ad::var attribute_contrastive_loss_node(ad::tape& t, const pool_vars& pool, double mu,
                                               double epsilon, double tau) {
    if (pool.size() < 2) {
        if (!pool.empty()) warn("attribute contrast needs at least two pool entries; returning 0");
        return t.constant(tensor({1, 1}, 0.0));
    }
    const std::size_t p = pool.size();
    // plain-value cosine matrix drives the mining decisions
    tensor cos_plain;
    {
        ad::tape scratch;
        cos_plain =
            ad::cosine_matrix(scratch.constant(pool.features.value()),
                              scratch.constant(pool.features.value()))
                .value();
    }
    ad::var cos = ad::cosine_matrix(pool.features, pool.features);
    ad::var total;
    std::size_t anchors = 0;
    for (std::size_t e = 0; e < p; ++e) {
        std::vector<std::size_t> pos, neg;
        for (std::size_t o = 0; o < p; ++o) {
            if (o == e) continue;
            if (pool.attribute_ids[o] == pool.attribute_ids[e] && pool.image_ids[o] != pool.image_ids[e])
                pos.push_back(o);
            else if (pool.attribute_ids[o] != pool.attribute_ids[e])
                neg.push_back(o);
        }
        if (pos.empty()) continue;
        std::vector<double> pos_sims, neg_sims;
        for (std::size_t o : pos) pos_sims.push_back(cos_plain(e, o));
        for (std::size_t o : neg) neg_sims.push_back(cos_plain(e, o));
        std::vector<std::size_t> keep_pos =
            mine_by_similarity(pos_sims, mu, mining_direction::drop_most_similar);
        std::vector<std::size_t> keep_neg =
            mine_by_similarity(neg_sims, epsilon, mining_direction::drop_least_similar);
        std::vector<std::size_t> pos_cols, all_cols;
        for (std::size_t i : keep_pos) pos_cols.push_back(pos[i]);
        all_cols = pos_cols;
        for (std::size_t i : keep_neg) all_cols.push_back(neg[i]);
        std::vector<std::size_t> rows_pos(pos_cols.size(), e), rows_all(all_cols.size(), e);
        ad::var pos_scaled = ad::scale(ad::gather_elements(cos, rows_pos, pos_cols), 1.0 / tau);
        ad::var all_scaled = ad::scale(ad::gather_elements(cos, rows_all, all_cols), 1.0 / tau);
        ad::var term = ad::sub(ad::logsumexp_rows(all_scaled), ad::mean_all(pos_scaled));
        total = total.valid() ? ad::add(total, term) : term;
        ++anchors;
    }
    if (anchors == 0) {
        warn("attribute contrast found no anchor with a positive; returning 0");
        return t.constant(tensor({1, 1}, 0.0));
    }
    return ad::scale(total, 1.0 / static_cast<double>(anchors));
}

/// Supervised contrast over pooled image features: anchors are batch rows,
/// positives share the class label, the denominator spans all other rows.
inline ad::var class_contrastive_loss_node(ad::tape& t, const ad::var& h_batch,
                                           const std::vector<int>& labels, double tau) {
    const std::size_t b = h_batch.value().rows();
    if (labels.size() != b)
        throw validation_error("class contrast: one label per batch row required");
    if (b < 2) {
        warn("class contrast needs at least two batch rows; returning 0");
        return t.constant(tensor({1, 1}, 0.0));
    }
    ad::var scaled = ad::scale(ad::cosine_matrix(h_batch, h_batch), 1.0 / tau);
    tensor mask({b, b}, 0.0);
    for (std::size_t i = 0; i < b; ++i) mask(i, i) = -1e30;  // exp underflows to exactly 0
    ad::var masked = ad::add(scaled, t.constant(mask));
    ad::var lse = ad::logsumexp_rows(masked);  // B x 1
    ad::var total;
    std::size_t anchors = 0;
    for (std::size_t i = 0; i < b; ++i) {
        std::vector<std::size_t> pos;
        for (std::size_t j = 0; j < b; ++j)
            if (j != i && labels[j] == labels[i]) pos.push_back(j);
        if (pos.empty()) continue;
        std::vector<std::size_t> rows(pos.size(), i);
        ad::var mean_pos = ad::mean_all(ad::gather_elements(scaled, rows, pos));
        ad::var term = ad::sub(ad::gather_elements(lse, {i}, {0}), mean_pos);
        total = total.valid() ? ad::add(total, term) : term;
        ++anchors;
    }
    if (anchors == 0) {
        warn("class contrast found no anchor with a positive; returning 0");
        return t.constant(tensor({1, 1}, 0.0));
    }
    return ad::scale(total, 1.0 / static_cast<double>(b));
}

// ---- losses, plain values ----

inline double classification_loss(const tensor& h_batch, const tensor& protos,
                                  const std::vector<std::size_t>& label_rows, double alpha) {
    ad::tape t;
    return classification_loss_node(t, t.constant(h_batch), t.constant(protos), label_rows, alpha)
        .scalar();
}

inline double mse_attribute_loss(const tensor& a_hat, const tensor& target) {
    ad::tape t;
    tensor pred = a_hat.rank() == 1 ? a_hat.reshaped({1, a_hat.size()}) : a_hat;
    tensor tgt = target.rank() == 1 ? target.reshaped({1, target.size()}) : target;
    return mse_attribute_loss_node(t, t.constant(pred), tgt).scalar();
}

namespace detail {
inline pool_vars lift_pool(ad::tape& t, const attribute_pool& pool) {
    pool_vars pv;
    pv.attribute_ids = pool.attribute_ids;
    pv.image_ids = pool.image_ids;
    if (!pool.empty()) pv.features = t.constant(pool.features);
    return pv;
}
}  // namespace detail

inline double attribute_alignment_loss(const attribute_pool& pool, const tensor& attr_protos,
                                       aal_variant_kind variant = aal_variant_kind::verbatim,
                                       double margin = 0.5) {
    ad::tape t;
    return attribute_alignment_loss_node(t, detail::lift_pool(t, pool), t.constant(attr_protos),
                                         variant, margin)
        .scalar();
}

inline double attribute_contrastive_loss(const attribute_pool& pool, double mu, double epsilon,
                                         double tau) {
    ad::tape t;
    return attribute_contrastive_loss_node(t, detail::lift_pool(t, pool), mu, epsilon, tau)
        .scalar();
}

inline double class_contrastive_loss(const tensor& h_batch, const std::vector<int>& labels,
                                     double tau) {
    ad::tape t;
    return class_contrastive_loss_node(t, t.constant(h_batch), labels, tau).scalar();
}

struct loss_breakdown {
    double cls = 0, mse = 0, aal = 0, acl = 0, ccl = 0, total = 0;
};

inline double total_loss(const loss_breakdown& parts, const loss_weights& w) {
    return parts.cls + w.lambda_mse * parts.mse + w.lambda_align * parts.aal +
           w.lambda_attr_contrast * parts.acl + w.lambda_class_contrast * parts.ccl;
}

}  // namespace hdafl
