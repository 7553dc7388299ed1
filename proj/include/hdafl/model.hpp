#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "hdafl/autodiff.hpp"
#include "hdafl/common.hpp"
#include "hdafl/rng.hpp"
#include "hdafl/tensor.hpp"

namespace hdafl {

enum class attention_axis { spatial, attributes };

struct model_config {
    std::size_t attr_count = 0;     // K
    std::size_t channels = 0;       // C
    std::size_t class_sem_dim = 0;  // input width of the class semantics encoder
    std::size_t attr_sem_dim = 0;   // input width of the attribute semantics encoder
    std::size_t encoder_hidden = 1024;
    std::size_t ade_heads = 4;
    attention_axis attention_softmax_axis = attention_axis::spatial;
    bool use_enhanced_features = true;

    void validate() const {
        if (attr_count == 0 || channels == 0 || class_sem_dim == 0 || attr_sem_dim == 0)
            throw config_error("model_config: all dimensions must be positive");
        if (encoder_hidden == 0) throw config_error("model_config: encoder_hidden must be positive");
        if (ade_heads == 0) throw config_error("model_config: ade_heads must be positive");
        if (channels % ade_heads != 0)
            throw config_error("model_config: ade_heads (" + std::to_string(ade_heads) +
                               ") must divide channels (" + std::to_string(channels) + ")");
    }
};

inline const char* to_string(attention_axis a) {
    return a == attention_axis::spatial ? "spatial" : "attributes";
}

inline attention_axis attention_axis_from_string(const std::string& s) {
    if (s == "spatial") return attention_axis::spatial;
    if (s == "attributes") return attention_axis::attributes;
    throw config_error("attention_softmax_axis must be 'spatial' or 'attributes', got '" + s + "'");
}

// Two hidden layers with rectifier, linear output: in -> hidden -> hidden -> out.
struct mlp_params {
    tensor w1, b1, w2, b2, w3, b3;
};

struct ade_params {
    std::size_t heads = 0;
    std::vector<tensor> wq, wk, wv;  // per head, (C/h) x (C/h)
    tensor wo;                       // C x C
    tensor ffn_w1, ffn_b1;           // C -> 4C
    tensor ffn_w2, ffn_b2;           // 4C -> C
};

struct head_params {
    tensor attr_kernels;  // K x C, one 1x1xC kernel per attribute
    mlp_params class_encoder;
    mlp_params attr_encoder;
    ade_params ade;
};

namespace detail {
inline tensor init_weight(std::size_t in, std::size_t out, rng& r) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return tensor::random_uniform({in, out}, -bound, bound, r);
}
inline tensor init_bias(std::size_t in, std::size_t out, rng& r) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    return tensor::random_uniform({1, out}, -bound, bound, r);
}
inline mlp_params init_mlp(std::size_t in, std::size_t hidden, std::size_t out, rng& r) {
    mlp_params p;
    p.w1 = init_weight(in, hidden, r);
    p.b1 = init_bias(in, hidden, r);
    p.w2 = init_weight(hidden, hidden, r);
    p.b2 = init_bias(hidden, hidden, r);
    p.w3 = init_weight(hidden, out, r);
    p.b3 = init_bias(hidden, out, r);
    return p;
}
}  // namespace detail

inline head_params init_head_params(const model_config& cfg, std::uint64_t seed) {
    cfg.validate();
    rng r(seed);
    head_params p;
    p.attr_kernels = detail::init_weight(cfg.channels, cfg.attr_count, r);
    p.attr_kernels = transposed(p.attr_kernels);  // stored K x C
    p.class_encoder = detail::init_mlp(cfg.class_sem_dim, cfg.encoder_hidden, cfg.channels, r);
    p.attr_encoder = detail::init_mlp(cfg.attr_sem_dim, cfg.encoder_hidden, cfg.channels, r);

    const std::size_t ch = cfg.channels / cfg.ade_heads;
    p.ade.heads = cfg.ade_heads;
    for (std::size_t i = 0; i < cfg.ade_heads; ++i) {
        p.ade.wq.push_back(detail::init_weight(ch, ch, r));
        p.ade.wk.push_back(detail::init_weight(ch, ch, r));
        p.ade.wv.push_back(detail::init_weight(ch, ch, r));
    }
    p.ade.wo = detail::init_weight(cfg.channels, cfg.channels, r);
    p.ade.ffn_w1 = detail::init_weight(cfg.channels, 4 * cfg.channels, r);
    p.ade.ffn_b1 = detail::init_bias(cfg.channels, 4 * cfg.channels, r);
    p.ade.ffn_w2 = detail::init_weight(4 * cfg.channels, cfg.channels, r);
    p.ade.ffn_b2 = detail::init_bias(4 * cfg.channels, cfg.channels, r);
    return p;
}

/// Visits every trainable tensor with a stable name. Checkpointing and the
/// optimizer both rely on this enumeration.
template <typename Params, typename F>
void visit_params(Params& p, F&& f) {
    f("attr_kernels", p.attr_kernels);
    f("class_encoder/w1", p.class_encoder.w1);
    f("class_encoder/b1", p.class_encoder.b1);
    f("class_encoder/w2", p.class_encoder.w2);
    f("class_encoder/b2", p.class_encoder.b2);
    f("class_encoder/w3", p.class_encoder.w3);
    f("class_encoder/b3", p.class_encoder.b3);
    f("attr_encoder/w1", p.attr_encoder.w1);
    f("attr_encoder/b1", p.attr_encoder.b1);
    f("attr_encoder/w2", p.attr_encoder.w2);
    f("attr_encoder/b2", p.attr_encoder.b2);
    f("attr_encoder/w3", p.attr_encoder.w3);
    f("attr_encoder/b3", p.attr_encoder.b3);
    for (std::size_t i = 0; i < p.ade.heads; ++i) {
        const std::string prefix = "ade/head" + std::to_string(i) + "/";
        f(prefix + "wq", p.ade.wq[i]);
        f(prefix + "wk", p.ade.wk[i]);
        f(prefix + "wv", p.ade.wv[i]);
    }
    f("ade/wo", p.ade.wo);
    f("ade/ffn_w1", p.ade.ffn_w1);
    f("ade/ffn_b1", p.ade.ffn_b1);
    f("ade/ffn_w2", p.ade.ffn_w2);
    f("ade/ffn_b2", p.ade.ffn_b2);
}

// ---- tape-level building blocks ----

struct mlp_vars {
    ad::var w1, b1, w2, b2, w3, b3;
};

struct ade_vars {
    std::size_t heads = 0;
    std::vector<ad::var> wq, wk, wv;
    ad::var wo, ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

struct head_vars {
    ad::var attr_kernels;
    mlp_vars class_encoder;
    mlp_vars attr_encoder;
    ade_vars ade;
};

inline mlp_vars lift(ad::tape& t, const mlp_params& p) {
    return {t.param(p.w1), t.param(p.b1), t.param(p.w2),
            t.param(p.b2), t.param(p.w3), t.param(p.b3)};
}

inline head_vars lift(ad::tape& t, const head_params& p) {
    head_vars v;
    v.attr_kernels = t.param(p.attr_kernels);
    v.class_encoder = lift(t, p.class_encoder);
    v.attr_encoder = lift(t, p.attr_encoder);
    v.ade.heads = p.ade.heads;
    for (std::size_t i = 0; i < p.ade.heads; ++i) {
        v.ade.wq.push_back(t.param(p.ade.wq[i]));
        v.ade.wk.push_back(t.param(p.ade.wk[i]));
        v.ade.wv.push_back(t.param(p.ade.wv[i]));
    }
    v.ade.wo = t.param(p.ade.wo);
    v.ade.ffn_w1 = t.param(p.ade.ffn_w1);
    v.ade.ffn_b1 = t.param(p.ade.ffn_b1);
    v.ade.ffn_w2 = t.param(p.ade.ffn_w2);
    v.ade.ffn_b2 = t.param(p.ade.ffn_b2);
    return v;
}

/// Mirrors visit_params over lifted vars (same names, same order).
template <typename F>
void visit_vars(const head_vars& v, F&& f) {
    f("attr_kernels", v.attr_kernels);
    f("class_encoder/w1", v.class_encoder.w1);
    f("class_encoder/b1", v.class_encoder.b1);
    f("class_encoder/w2", v.class_encoder.w2);
    f("class_encoder/b2", v.class_encoder.b2);
    f("class_encoder/w3", v.class_encoder.w3);
    f("class_encoder/b3", v.class_encoder.b3);
    f("attr_encoder/w1", v.attr_encoder.w1);
    f("attr_encoder/b1", v.attr_encoder.b1);
    f("attr_encoder/w2", v.attr_encoder.w2);
    f("attr_encoder/b2", v.attr_encoder.b2);
    f("attr_encoder/w3", v.attr_encoder.w3);
    f("attr_encoder/b3", v.attr_encoder.b3);
    for (std::size_t i = 0; i < v.ade.heads; ++i) {
        const std::string prefix = "ade/head" + std::to_string(i) + "/";
        f(prefix + "wq", v.ade.wq[i]);
        f(prefix + "wk", v.ade.wk[i]);
        f(prefix + "wv", v.ade.wv[i]);
    }
    f("ade/wo", v.ade.wo);
    f("ade/ffn_w1", v.ade.ffn_w1);
    f("ade/ffn_b1", v.ade.ffn_b1);
    f("ade/ffn_w2", v.ade.ffn_w2);
    f("ade/ffn_b2", v.ade.ffn_b2);
}

/// Per-attribute attention maps over an HW x C feature matrix. Scores are
/// dot products with the attribute kernels; the softmax runs over spatial
/// positions per attribute (default) or across attributes per position.
inline ad::var attention_maps_node(const ad::var& f_hw_c, const ad::var& kernels,
                                   attention_axis axis = attention_axis::spatial) {
    if (f_hw_c.value().cols() != kernels.value().cols())
        throw validation_error("attention_maps: channel mismatch between features " +
                               f_hw_c.value().shape_str() + " and kernels " +
                               kernels.value().shape_str());
    ad::var logits = ad::matmul(f_hw_c, ad::transpose(kernels));  // HW x K
    if (axis == attention_axis::spatial)
        return ad::transpose(ad::softmax_rows(ad::transpose(logits)));
    return ad::softmax_rows(logits);
}

/// AF = Att^T f, K x C.
inline ad::var attribute_features_node(const ad::var& f_hw_c, const ad::var& att_hw_k) {
    if (f_hw_c.value().rows() != att_hw_k.value().rows())
        throw validation_error("attribute_features: spatial size mismatch");
    return ad::matmul(ad::transpose(att_hw_k), f_hw_c);
}

/// Global average pool over spatial positions, 1 x C.
inline ad::var global_feature_node(const ad::var& f_hw_c) { return ad::mean_axis0(f_hw_c); }

/// Global max pool of each attention map, 1 x K.
inline ad::var attribute_scores_node(const ad::var& att_hw_k) { return ad::max_axis0(att_hw_k); }

inline ad::var mlp_apply_node(const ad::var& x, const mlp_vars& p) {
    if (x.value().cols() != p.w1.value().rows())
        throw validation_error("mlp: input width " + std::to_string(x.value().cols()) +
                               " does not match encoder input " +
                               std::to_string(p.w1.value().rows()));
    ad::var h1 = ad::relu(ad::add_bias_row(ad::matmul(x, p.w1), p.b1));
    ad::var h2 = ad::relu(ad::add_bias_row(ad::matmul(h1, p.w2), p.b2));
    return ad::add_bias_row(ad::matmul(h2, p.w3), p.b3);
}

/// Channel-attention encoder. AF splits into h column blocks; each head
/// attends over its C/h channels with a softmax scaled by 1/sqrt(K), K being
/// the contraction length (the attribute count). Both the multi-head mix and
/// the feed-forward block are residual.
inline ad::var ade_encode_node(const ad::var& af, const ade_vars& p) {
    const std::size_t k = af.value().rows();
    const std::size_t c = af.value().cols();
    if (p.heads == 0 || c % p.heads != 0)
        throw config_error("ade: head count must divide the channel dimension");
    const std::size_t ch = c / p.heads;
    const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(k));

    std::vector<ad::var> head_outputs;
    for (std::size_t i = 0; i < p.heads; ++i) {
        ad::var block = ad::slice_cols(af, i * ch, (i + 1) * ch);  // K x Ch
        ad::var q = ad::matmul(block, p.wq[i]);
        ad::var key = ad::matmul(block, p.wk[i]);
        ad::var v = ad::matmul(block, p.wv[i]);
        // softmax((Q^T K)/sqrt(K)) is Ch x Ch: attention across channels
        ad::var attn = ad::softmax_rows(ad::scale(ad::matmul(ad::transpose(q), key), inv_sqrt_k));
        ad::var head = ad::matmul(attn, ad::transpose(v));  // Ch x K
        head_outputs.push_back(ad::transpose(head));        // K x Ch
    }
    ad::var mh = ad::matmul(ad::concat_cols(head_outputs), p.wo);
    ad::var af_hat = ad::add(af, mh);

    ad::var ffn_hidden = ad::relu(ad::add_bias_row(ad::matmul(af_hat, p.ffn_w1), p.ffn_b1));
    ad::var ffn_out = ad::add_bias_row(ad::matmul(ffn_hidden, p.ffn_w2), p.ffn_b2);
    return ad::add(af_hat, ffn_out);
}

struct forward_vars {
    ad::var att;    // HW x K
    ad::var af;     // K x C
    ad::var eaf;    // K x C
    ad::var h_x;    // 1 x C
    ad::var a_hat;  // 1 x K
};

/// Full head forward for one image. `f` may be H x W x C or HW x C.
inline forward_vars forward_node(ad::tape& t, const tensor& f, const head_vars& params,
                                 const model_config& cfg) {
    tensor f2 = f;
    if (f.rank() == 3) f2 = f.reshaped({f.dim(0) * f.dim(1), f.dim(2)});
    if (f2.rank() != 2 || f2.cols() != cfg.channels)
        throw validation_error("forward: feature map must be HxWxC with C = " +
                               std::to_string(cfg.channels));
    ad::var fv = t.constant(std::move(f2));
    forward_vars out;
    out.att = attention_maps_node(fv, params.attr_kernels, cfg.attention_softmax_axis);
    out.af = attribute_features_node(fv, out.att);
    out.eaf = ade_encode_node(out.af, params.ade);
    out.h_x = global_feature_node(fv);
    out.a_hat = attribute_scores_node(out.att);
    return out;
}

// ---- plain-tensor entry points ----

struct forward_out {
    tensor att;    // H x W x K
    tensor af;     // K x C
    tensor eaf;    // K x C
    tensor h_x;    // C
    tensor a_hat;  // K
};

namespace detail {
inline void require_finite(const tensor& t, const char* what) {
    if (!t.all_finite()) throw numeric_error(std::string(what) + ": non-finite input");
}
inline tensor as_hw_c(const tensor& f) {
    if (f.rank() == 3) return f.reshaped({f.dim(0) * f.dim(1), f.dim(2)});
    if (f.rank() == 2) return f;
    throw validation_error("feature map must be rank 2 (HWxC) or rank 3 (HxWxC)");
}
}  // namespace detail

inline tensor attention_maps(const tensor& f, const tensor& kernels,
                             attention_axis axis = attention_axis::spatial) {
    detail::require_finite(f, "attention_maps");
    detail::require_finite(kernels, "attention_maps");
    ad::tape t;
    ad::var out = attention_maps_node(t.constant(detail::as_hw_c(f)), t.constant(kernels), axis);
    if (f.rank() == 3) return out.value().reshaped({f.dim(0), f.dim(1), kernels.rows()});
    return out.value();
}

inline tensor attribute_features(const tensor& f, const tensor& att) {
    ad::tape t;
    return attribute_features_node(t.constant(detail::as_hw_c(f)), t.constant(detail::as_hw_c(att)))
        .value();
}

inline tensor global_feature(const tensor& f) {
    ad::tape t;
    return global_feature_node(t.constant(detail::as_hw_c(f))).value().reshaped({f.dim(f.rank() - 1)});
}

inline tensor attribute_scores(const tensor& att) {
    ad::tape t;
    const tensor a2 = detail::as_hw_c(att);
    return attribute_scores_node(t.constant(a2)).value().reshaped({a2.cols()});
}

inline tensor apply_mlp(const tensor& x, const mlp_params& p) {
    ad::tape t;
    return mlp_apply_node(t.constant(x), lift(t, p)).value();
}

inline tensor encode_class_prototypes(const tensor& class_semantics, const mlp_params& p) {
    return apply_mlp(class_semantics, p);
}

inline tensor encode_attribute_prototypes(const tensor& attribute_semantics, const mlp_params& p) {
    return apply_mlp(attribute_semantics, p);
}

inline tensor attribute_discrimination_encode(const tensor& af, const ade_params& p) {
    detail::require_finite(af, "attribute_discrimination_encode");
    ad::tape t;
    ade_vars v;
    v.heads = p.heads;
    for (std::size_t i = 0; i < p.heads; ++i) {
        v.wq.push_back(t.constant(p.wq[i]));
        v.wk.push_back(t.constant(p.wk[i]));
        v.wv.push_back(t.constant(p.wv[i]));
    }
    v.wo = t.constant(p.wo);
    v.ffn_w1 = t.constant(p.ffn_w1);
    v.ffn_b1 = t.constant(p.ffn_b1);
    v.ffn_w2 = t.constant(p.ffn_w2);
    v.ffn_b2 = t.constant(p.ffn_b2);
    ad::var out = ade_encode_node(t.constant(af), v);
    if (!out.value().all_finite())
        throw numeric_error("attribute_discrimination_encode: non-finite output");
    return out.value();
}

inline forward_out forward(const tensor& f, const head_params& params, const model_config& cfg) {
    detail::require_finite(f, "forward");
    ad::tape t;
    head_vars hv = lift(t, params);
    forward_vars fv = forward_node(t, f, hv, cfg);
    forward_out out;
    const std::size_t k = cfg.attr_count;
    if (f.rank() == 3)
        out.att = fv.att.value().reshaped({f.dim(0), f.dim(1), k});
    else
        out.att = fv.att.value();
    out.af = fv.af.value();
    out.eaf = fv.eaf.value();
    out.h_x = fv.h_x.value().reshaped({cfg.channels});
    out.a_hat = fv.a_hat.value().reshaped({k});
    return out;
}

}  // namespace hdafl
