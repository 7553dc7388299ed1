#pragma once

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hdafl/common.hpp"
#include "hdafl/dataset.hpp"
#include "hdafl/model.hpp"
#include "hdafl/tensor.hpp"

namespace hdafl {

enum class eval_mode { czsl, gzsl };

inline eval_mode eval_mode_from_string(const std::string& s) {
    if (s == "czsl") return eval_mode::czsl;
    if (s == "gzsl") return eval_mode::gzsl;
    throw config_error("mode must be 'czsl' or 'gzsl', got '" + s + "'");
}

inline double harmonic_mean(double s, double u) { return s + u > 0 ? 2.0 * s * u / (s + u) : 0.0; }

/// Argmax of alpha*cos(h_x, prototype) over candidate classes; ties go to the
/// smallest class id (ids must be sorted ascending, matching proto rows).
inline int czsl_predict(const tensor& h_x, const tensor& protos, const std::vector<int>& ids,
                        double alpha) {
    if (ids.empty() || protos.rows() != ids.size())
        throw validation_error("czsl_predict: one prototype row per candidate class required");
    int best_id = ids[0];
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < ids.size(); ++r) {
        tensor row({1, protos.cols()});
        for (std::size_t j = 0; j < protos.cols(); ++j) row[j] = protos(r, j);
        const double score = alpha * cosine(h_x, row);
        if (score > best) {
            best = score;
            best_id = ids[r];
        }
    }
    return best_id;
}

/// Calibrated stacking: alpha*cos minus gamma for seen classes, argmax over
/// all classes, ties to the smallest class id.
inline int gzsl_predict(const tensor& h_x, const tensor& protos, const std::vector<int>& ids,
                        const std::vector<char>& seen_mask, double alpha, double gamma) {
    if (ids.empty() || protos.rows() != ids.size() || seen_mask.size() != ids.size())
        throw validation_error("gzsl_predict: prototypes, ids and seen mask must align");
    if (!(gamma >= 0)) throw validation_error("gzsl_predict: gamma must be >= 0");
    int best_id = ids[0];
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < ids.size(); ++r) {
        tensor row({1, protos.cols()});
        for (std::size_t j = 0; j < protos.cols(); ++j) row[j] = protos(r, j);
        const double score = alpha * cosine(h_x, row) - (seen_mask[r] ? gamma : 0.0);
        if (score > best) {
            best = score;
            best_id = ids[r];
        }
    }
    return best_id;
}

/// Mean over classes of within-class top-1 accuracy, in percent. Classes with
/// no samples are excluded (with a warning), not counted as zero.
inline double per_class_accuracy(const std::vector<int>& predictions,
                                 const std::vector<int>& labels,
                                 const std::vector<int>& class_set) {
    if (predictions.size() != labels.size())
        throw validation_error("per_class_accuracy: one prediction per label required");
    double sum = 0;
    std::size_t counted = 0;
    for (int c : class_set) {
        std::size_t total = 0, correct = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] != c) continue;
            ++total;
            if (predictions[i] == c) ++correct;
        }
        if (total == 0) {
            warn("class " + std::to_string(c) + " has no test samples; excluded from accuracy");
            continue;
        }
        sum += 100.0 * static_cast<double>(correct) / static_cast<double>(total);
        ++counted;
    }
    if (counted == 0) {
        warn("no class in the evaluation set has test samples");
        return 0.0;
    }
    return sum / static_cast<double>(counted);
}

struct eval_report {
    eval_mode mode = eval_mode::czsl;
    double gamma = 0;
    double acc = 0;           // czsl
    double u = 0, s = 0, h = 0;  // gzsl
    std::map<int, double> per_class_acc;
    std::map<std::pair<int, int>, std::size_t> confusion;  // (true, predicted) -> count

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["mode"] = mode == eval_mode::czsl ? "czsl" : "gzsl";
        if (mode == eval_mode::czsl) {
            j["acc"] = acc;
        } else {
            j["gamma"] = gamma;
            j["u"] = u;
            j["s"] = s;
            j["h"] = h;
        }
        nlohmann::json pca = nlohmann::json::object();
        for (const auto& [c, a] : per_class_acc) pca[std::to_string(c)] = a;
        j["per_class_acc"] = pca;
        nlohmann::json conf = nlohmann::json::array();
        for (const auto& [key, count] : confusion)
            conf.push_back({key.first, key.second, count});
        j["confusion"] = conf;
        return j;
    }

    /// One-decimal table in the column order ACC, U, S, H.
    std::string table() const {
        auto cell = [](double v, bool present) {
            char buf[16];
            if (present)
                std::snprintf(buf, sizeof(buf), "%6.1f", v);
            else
                std::snprintf(buf, sizeof(buf), "%6s", "-");
            return std::string(buf);
        };
        const bool g = mode == eval_mode::gzsl;
        std::string out = "   ACC      U      S      H\n";
        out += cell(acc, !g) + " " + cell(u, g) + " " + cell(s, g) + " " + cell(h, g) + "\n";
        return out;
    }
};

namespace detail {
inline std::vector<double> prototype_scores(const tensor& h_x, const tensor& protos,
                                            double alpha) {
    std::vector<double> scores(protos.rows());
    tensor row({1, protos.cols()});
    for (std::size_t r = 0; r < protos.rows(); ++r) {
        for (std::size_t j = 0; j < protos.cols(); ++j) row[j] = protos(r, j);
        scores[r] = alpha * cosine(h_x, row);
    }
    return scores;
}
}  // namespace detail

/// Runs forward + predict over the test split. CZSL restricts both candidates
/// and test images to unseen classes; GZSL scores every test image against all
/// classes with the seen-class penalty gamma.
inline eval_report evaluate(const dataset& ds, const head_params& params,
                            const model_config& cfg, eval_mode mode, double gamma, double alpha) {
    ds.validate();
    if (ds.channels != cfg.channels)
        throw validation_error("dataset channel count does not match the model configuration");
    bool any_unseen = false;
    for (std::size_t i : ds.test_indices)
        if (!ds.is_seen(ds.labels[i])) any_unseen = true;
    if (!any_unseen)
        throw validation_error("evaluation requires unseen-class test samples, none present");

    const tensor protos = encode_class_prototypes(ds.class_semantics, params.class_encoder);
    std::vector<char> seen_mask(ds.class_ids.size());
    for (std::size_t r = 0; r < ds.class_ids.size(); ++r)
        seen_mask[r] = ds.is_seen(ds.class_ids[r]) ? 1 : 0;

    tensor unseen_protos({ds.unseen_classes.size(), protos.cols()});
    for (std::size_t r = 0; r < ds.unseen_classes.size(); ++r) {
        const std::size_t src = ds.class_row(ds.unseen_classes[r]);
        for (std::size_t j = 0; j < protos.cols(); ++j) unseen_protos(r, j) = protos(src, j);
    }

    eval_report rep;
    rep.mode = mode;
    rep.gamma = mode == eval_mode::gzsl ? gamma : 0.0;
    std::vector<int> predictions, labels;
    for (std::size_t i : ds.test_indices) {
        const int label = ds.labels[i];
        if (mode == eval_mode::czsl && ds.is_seen(label)) continue;
        const tensor h_x = global_feature(ds.feature_maps[i]);
        const int pred = mode == eval_mode::czsl
                             ? czsl_predict(h_x, unseen_protos, ds.unseen_classes, alpha)
                             : gzsl_predict(h_x, protos, ds.class_ids, seen_mask, alpha, gamma);
        predictions.push_back(pred);
        labels.push_back(label);
        ++rep.confusion[{label, pred}];
    }

    const std::vector<int>& czsl_set = ds.unseen_classes;
    if (mode == eval_mode::czsl) {
        rep.acc = per_class_accuracy(predictions, labels, czsl_set);
    } else {
        rep.u = per_class_accuracy(predictions, labels, ds.unseen_classes);
        rep.s = per_class_accuracy(predictions, labels, ds.seen_classes);
        rep.h = harmonic_mean(rep.s, rep.u);
    }
    for (int c : mode == eval_mode::czsl ? czsl_set : ds.class_ids) {
        std::size_t total = 0, correct = 0;
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] != c) continue;
            ++total;
            if (predictions[i] == c) ++correct;
        }
        if (total > 0)
            rep.per_class_acc[c] = 100.0 * static_cast<double>(correct) / static_cast<double>(total);
    }
    return rep;
}

struct sweep_row {
    double gamma = 0;
    double u = 0, s = 0, h = 0;
    std::size_t unseen_predictions = 0;
};

/// GZSL metrics for several gammas at once; prototype scores are computed one
/// time and re-ranked per gamma.
inline std::vector<sweep_row> gamma_sweep(const dataset& ds, const head_params& params,
                                          const model_config& cfg, double alpha,
                                          const std::vector<double>& gammas) {
    ds.validate();
    if (ds.channels != cfg.channels)
        throw validation_error("dataset channel count does not match the model configuration");
    const tensor protos = encode_class_prototypes(ds.class_semantics, params.class_encoder);
    std::vector<char> seen_mask(ds.class_ids.size());
    for (std::size_t r = 0; r < ds.class_ids.size(); ++r)
        seen_mask[r] = ds.is_seen(ds.class_ids[r]) ? 1 : 0;

    std::vector<std::vector<double>> scores;
    std::vector<int> labels;
    for (std::size_t i : ds.test_indices) {
        scores.push_back(
            detail::prototype_scores(global_feature(ds.feature_maps[i]), protos, alpha));
        labels.push_back(ds.labels[i]);
    }

    std::vector<sweep_row> rows;
    for (double gamma : gammas) {
        if (!(gamma >= 0)) throw validation_error("gamma sweep: gamma must be >= 0");
        sweep_row row;
        row.gamma = gamma;
        std::vector<int> predictions(labels.size());
        for (std::size_t i = 0; i < scores.size(); ++i) {
            int best_id = ds.class_ids[0];
            double best = -std::numeric_limits<double>::infinity();
            for (std::size_t r = 0; r < ds.class_ids.size(); ++r) {
                const double v = scores[i][r] - (seen_mask[r] ? gamma : 0.0);
                if (v > best) {
                    best = v;
                    best_id = ds.class_ids[r];
                }
            }
            predictions[i] = best_id;
            if (!ds.is_seen(best_id)) ++row.unseen_predictions;
        }
        row.u = per_class_accuracy(predictions, labels, ds.unseen_classes);
        row.s = per_class_accuracy(predictions, labels, ds.seen_classes);
        row.h = harmonic_mean(row.s, row.u);
        rows.push_back(row);
    }
    return rows;
}

}  // namespace hdafl
