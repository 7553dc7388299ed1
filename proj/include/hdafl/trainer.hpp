#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hdafl/checkpoint.hpp"
#include "hdafl/common.hpp"
#include "hdafl/dataset.hpp"
#include "hdafl/episodes.hpp"
#include "hdafl/losses.hpp"
#include "hdafl/model.hpp"
#include "hdafl/rng.hpp"

namespace hdafl {

struct train_config {
    std::size_t epochs = 15;
    double learning_rate = 1e-3;
    double momentum = 0.9;
    double weight_decay = 1e-5;
    std::uint64_t seed = 1;
    episode_spec episode{16, 2, 0};  // episode.seed is derived from `seed` at train time
    loss_weights weights;
    model_config model;  // data-dependent dims are filled in from the dataset
    std::string checkpoint_dir = "checkpoints";

    void validate() const {
        if (epochs < 1) throw config_error("train: epochs must be >= 1");
        if (!(learning_rate > 0)) throw config_error("train: learning_rate must be positive");
        if (!(momentum >= 0 && momentum < 1))
            throw config_error("train: momentum must be in [0, 1)");
        if (!(weight_decay >= 0)) throw config_error("train: weight_decay must be >= 0");
        episode.validate();
        weights.validate();
    }
};

inline nlohmann::json to_json(const model_config& m) {
    return {{"attr_count", m.attr_count},
            {"channels", m.channels},
            {"class_sem_dim", m.class_sem_dim},
            {"attr_sem_dim", m.attr_sem_dim},
            {"encoder_hidden", m.encoder_hidden},
            {"ade_heads", m.ade_heads},
            {"attention_softmax_axis", to_string(m.attention_softmax_axis)},
            {"use_enhanced_features", m.use_enhanced_features}};
}

inline model_config model_config_from_json(const nlohmann::json& j) {
    model_config m;
    m.attr_count = j.at("attr_count").get<std::size_t>();
    m.channels = j.at("channels").get<std::size_t>();
    m.class_sem_dim = j.at("class_sem_dim").get<std::size_t>();
    m.attr_sem_dim = j.at("attr_sem_dim").get<std::size_t>();
    m.encoder_hidden = j.at("encoder_hidden").get<std::size_t>();
    m.ade_heads = j.at("ade_heads").get<std::size_t>();
    m.attention_softmax_axis =
        attention_axis_from_string(j.at("attention_softmax_axis").get<std::string>());
    m.use_enhanced_features = j.at("use_enhanced_features").get<bool>();
    return m;
}

inline nlohmann::json to_json(const loss_weights& w) {
    return {{"alpha", w.alpha},
            {"tau_attr", w.tau_attr},
            {"tau_class", w.tau_class},
            {"mu", w.mu},
            {"epsilon", w.epsilon},
            {"lambda_mse", w.lambda_mse},
            {"lambda_align", w.lambda_align},
            {"lambda_attr_contrast", w.lambda_attr_contrast},
            {"lambda_class_contrast", w.lambda_class_contrast},
            {"aal_variant", to_string(w.aal_variant)},
            {"aal_margin", w.aal_margin},
            {"presence_threshold", w.presence_threshold}};
}

inline loss_weights loss_weights_from_json(const nlohmann::json& j) {
    loss_weights w;
    w.alpha = j.at("alpha").get<double>();
    w.tau_attr = j.at("tau_attr").get<double>();
    w.tau_class = j.at("tau_class").get<double>();
    w.mu = j.at("mu").get<double>();
    w.epsilon = j.at("epsilon").get<double>();
    w.lambda_mse = j.at("lambda_mse").get<double>();
    w.lambda_align = j.at("lambda_align").get<double>();
    w.lambda_attr_contrast = j.at("lambda_attr_contrast").get<double>();
    w.lambda_class_contrast = j.at("lambda_class_contrast").get<double>();
    w.aal_variant = aal_variant_from_string(j.at("aal_variant").get<std::string>());
    w.aal_margin = j.at("aal_margin").get<double>();
    w.presence_threshold = j.at("presence_threshold").get<double>();
    return w;
}

inline nlohmann::json to_json(const train_config& c) {
    return {{"epochs", c.epochs},
            {"learning_rate", c.learning_rate},
            {"momentum", c.momentum},
            {"weight_decay", c.weight_decay},
            {"seed", c.seed},
            {"episode", {{"ways", c.episode.ways}, {"shots", c.episode.shots}}},
            {"loss", to_json(c.weights)},
            {"model", to_json(c.model)}};
}

inline train_config train_config_from_json(const nlohmann::json& j) {
    train_config c;
    c.epochs = j.at("epochs").get<std::size_t>();
    c.learning_rate = j.at("learning_rate").get<double>();
    c.momentum = j.at("momentum").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.episode.ways = j.at("episode").at("ways").get<std::size_t>();
    c.episode.shots = j.at("episode").at("shots").get<std::size_t>();
    c.weights = loss_weights_from_json(j.at("loss"));
    c.model = model_config_from_json(j.at("model"));
    return c;
}

/// Classic momentum update with weight decay folded into the gradient:
///   v <- momentum*v + grad + weight_decay*param;  param <- param - lr*v
inline void sgd_step(tensor& param, const tensor& grad, tensor& velocity, double lr,
                     double momentum, double weight_decay, const std::string& name) {
    if (!param.same_shape(grad) || !param.same_shape(velocity))
        throw validation_error("sgd_step: shape mismatch on '" + name + "'");
    if (!grad.all_finite())
        throw numeric_error("non-finite gradient for tensor '" + name + "'");
    for (std::size_t i = 0; i < param.size(); ++i) {
        velocity.storage()[i] = momentum * velocity.storage()[i] + grad.storage()[i] +
                                weight_decay * param.storage()[i];
        param.storage()[i] -= lr * velocity.storage()[i];
    }
}

struct episode_record {
    std::size_t episode = 0;
    double cls = 0, mse = 0, aal = 0, acl = 0, ccl = 0, total = 0;
};

struct train_result {
    head_params params;
    model_config model;
    std::vector<episode_record> trace;
    std::filesystem::path final_checkpoint;
};

inline void write_loss_trace(const std::filesystem::path& path,
                             const std::vector<episode_record>& trace, bool append = false) {
    const bool header = !append || !std::filesystem::exists(path);
    std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
    if (!out) throw load_error("cannot write loss trace: " + path.string());
    if (header) out << "episode,L_cls,L_mse,L_aal,L_acl,L_ccl,total\n";
    for (const episode_record& r : trace)
        out << r.episode << "," << detail::format_double(r.cls) << ","
            << detail::format_double(r.mse) << "," << detail::format_double(r.aal) << ","
            << detail::format_double(r.acl) << "," << detail::format_double(r.ccl) << ","
            << detail::format_double(r.total) << "\n";
}

inline std::vector<std::pair<std::string, tensor>> named_tensors(const head_params& p) {
    std::vector<std::pair<std::string, tensor>> out;
    visit_params(p, [&](const std::string& n, const tensor& t) { out.emplace_back(n, t); });
    return out;
}

inline head_params head_params_from_checkpoint(const checkpoint_data& ck,
                                               const model_config& cfg) {
    head_params p = init_head_params(cfg, 0);  // shape scaffold, overwritten below
    visit_params(p, [&](const std::string& n, tensor& t) {
        const tensor& src = ck.require(n);
        if (!src.same_shape(t))
            throw load_error("checkpoint tensor '" + n + "' has shape " + src.shape_str() +
                             " but the configuration requires " + t.shape_str());
        t = src;
    });
    return p;
}

/// One optimization pass over the dataset's training split. Resumes from
/// `resume_from` when given; checkpoints land in cfg.checkpoint_dir (one per
/// epoch plus `final.ckpt`), or nowhere when the directory is empty.
inline train_result train(const dataset& ds, train_config cfg,
                          const std::filesystem::path& resume_from = {}) {
    ds.validate();
    cfg.validate();
    cfg.model.attr_count = ds.attr_count();
    cfg.model.channels = ds.channels;
    cfg.model.class_sem_dim = ds.class_semantics.cols();
    cfg.model.attr_sem_dim = ds.attribute_semantics.cols();
    cfg.model.validate();
    cfg.episode.seed = rng::derive(cfg.seed, 1).next_u64();

    head_params params = init_head_params(cfg.model, rng::derive(cfg.seed, 0).next_u64());
    std::map<std::string, tensor> velocity;
    visit_params(params, [&](const std::string& n, const tensor& t) {
        velocity.emplace(n, tensor(t.shape(), 0.0));
    });

    episode_sampler sampler(ds, cfg.episode);
    const std::size_t per_epoch = sampler.episodes_per_epoch();
    const std::size_t total_episodes = per_epoch * cfg.epochs;
    std::size_t next_episode = 0;

    if (!resume_from.empty()) {
        checkpoint_data ck = load_checkpoint(resume_from);
        params = head_params_from_checkpoint(ck, cfg.model);
        visit_params(params, [&](const std::string& n, const tensor& t) {
            auto it = ck.tensors.find("opt/" + n);
            if (it == ck.tensors.end()) return;
            if (!it->second.same_shape(t))
                throw load_error("checkpoint tensor 'opt/" + n + "' has unexpected shape");
            velocity[n] = it->second;
        });
        next_episode = ck.meta.value("episodes_done", std::size_t{0});
        if (ck.meta.contains("config_hash") &&
            ck.meta["config_hash"] != config_hash(to_json(cfg)))
            warn("resume checkpoint was written with a different configuration");
        if (next_episode >= total_episodes)
            warn("checkpoint already covers " + std::to_string(next_episode) +
                 " episodes; the requested run adds nothing");
        sampler.seek(next_episode);
    }

    const tensor norm_attrs = ds.normalized_class_attributes();
    const std::size_t k = ds.attr_count();

    auto run_episode = [&](std::size_t index) {
        episode_batch batch = sampler.next();
        const std::size_t b = batch.size();
        ad::tape t;
        head_vars hv = lift(t, params);

        std::vector<forward_vars> outs;
        std::vector<ad::var> h_rows, a_rows;
        outs.reserve(b);
        for (std::size_t i = 0; i < b; ++i) {
            forward_vars fv = forward_node(t, *batch.feature_maps[i], hv, cfg.model);
            h_rows.push_back(fv.h_x);
            a_rows.push_back(fv.a_hat);
            outs.push_back(std::move(fv));
        }
        ad::var h_batch = b == 1 ? h_rows[0] : ad::concat_rows(h_rows);
        ad::var a_hat = b == 1 ? a_rows[0] : ad::concat_rows(a_rows);
        ad::var protos = mlp_apply_node(t.constant(ds.class_semantics), hv.class_encoder);
        ad::var attr_protos =
            mlp_apply_node(t.constant(ds.attribute_semantics), hv.attr_encoder);

        std::vector<std::size_t> label_rows(b);
        tensor truth({b, k});
        for (std::size_t i = 0; i < b; ++i) {
            label_rows[i] = ds.class_row(batch.labels[i]);
            for (std::size_t j = 0; j < k; ++j) truth(i, j) = norm_attrs(label_rows[i], j);
        }

        const loss_weights& w = cfg.weights;
        ad::var l_cls = classification_loss_node(t, h_batch, protos, label_rows, w.alpha);
        ad::var l_mse =
            ad::scale(mse_attribute_loss_node(t, a_hat, truth), 1.0 / static_cast<double>(b));
        pool_vars pool = build_attribute_pool_node(outs, truth, w.presence_threshold,
                                                   cfg.model.use_enhanced_features);
        ad::var l_aal = attribute_alignment_loss_node(t, pool, attr_protos, w.aal_variant,
                                                      w.aal_margin);
        ad::var l_acl = attribute_contrastive_loss_node(t, pool, w.mu, w.epsilon, w.tau_attr);
        ad::var l_ccl = class_contrastive_loss_node(t, h_batch, batch.labels, w.tau_class);
        ad::var total = ad::add(
            l_cls, ad::add(ad::add(ad::scale(l_mse, w.lambda_mse), ad::scale(l_aal, w.lambda_align)),
                           ad::add(ad::scale(l_acl, w.lambda_attr_contrast),
                                   ad::scale(l_ccl, w.lambda_class_contrast))));

        episode_record rec{index,         l_cls.scalar(), l_mse.scalar(), l_aal.scalar(),
                           l_acl.scalar(), l_ccl.scalar(), total.scalar()};
        if (!std::isfinite(rec.total))
            throw numeric_error("episode " + std::to_string(index) + ": total loss is not finite");
        t.backward(total);

        std::vector<const ad::var*> gvars;
        visit_vars(hv, [&](const std::string&, const ad::var& v) { gvars.push_back(&v); });
        std::size_t gi = 0;
        visit_params(params, [&](const std::string& n, tensor& p) {
            const ad::var& v = *gvars[gi++];
            if (v.has_grad())
                sgd_step(p, v.grad(), velocity.at(n), cfg.learning_rate, cfg.momentum,
                         cfg.weight_decay, n);
            else
                sgd_step(p, tensor(p.shape(), 0.0), velocity.at(n), cfg.learning_rate,
                         cfg.momentum, cfg.weight_decay, n);
        });
        return rec;
    };

    const std::filesystem::path dir = cfg.checkpoint_dir;
    auto write_ckpt = [&](const std::filesystem::path& path, std::size_t episodes_done) {
        std::vector<std::pair<std::string, tensor>> named = named_tensors(params);
        for (const auto& [n, v] : velocity) named.emplace_back("opt/" + n, v);
        nlohmann::json meta;
        meta["config"] = to_json(cfg);
        meta["config_hash"] = config_hash(to_json(cfg));
        meta["episodes_done"] = episodes_done;
        meta["episodes_per_epoch"] = per_epoch;
        save_checkpoint(path, named, meta);
    };

    train_result result;
    for (std::size_t epoch = next_episode / per_epoch; epoch < cfg.epochs; ++epoch) {
        const std::size_t epoch_end = (epoch + 1) * per_epoch;
        for (; next_episode < epoch_end; ++next_episode)
            result.trace.push_back(run_episode(next_episode));
        if (!cfg.checkpoint_dir.empty()) {
            char name[32];
            std::snprintf(name, sizeof(name), "epoch_%04zu.ckpt", epoch + 1);
            write_ckpt(dir / name, next_episode);
        }
    }
    if (!cfg.checkpoint_dir.empty()) {
        result.final_checkpoint = dir / "final.ckpt";
        write_ckpt(result.final_checkpoint, next_episode);
    }
    result.params = std::move(params);
    result.model = cfg.model;
    return result;
}

}  // namespace hdafl
