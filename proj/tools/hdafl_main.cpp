// hdafl: synthesize datasets, train the attribute-attention head, evaluate
// CZSL/GZSL metrics, and export attribute features.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hdafl/hdafl.hpp"

namespace {

using namespace hdafl;

std::vector<double> parse_sweep(const std::string& s) {
    // "start:stop:step", inclusive of stop up to rounding slack
    double start = 0, stop = 0, step = 0;
    if (std::sscanf(s.c_str(), "%lf:%lf:%lf", &start, &stop, &step) != 3)
        throw config_error("--gamma-sweep expects start:stop:step, got '" + s + "'");
    if (!(step > 0) || stop < start)
        throw config_error("--gamma-sweep needs step > 0 and stop >= start");
    std::vector<double> out;
    for (double g = start; g <= stop + 1e-9; g += step) out.push_back(g);
    return out;
}

run_config load_run_config(const std::string& config_path) {
    run_config rc;
    if (!config_path.empty()) rc = parse_run_config(config_path);
    apply_env_overrides(rc);
    return rc;
}

struct checkpoint_bundle {
    head_params params;
    train_config config;
};

checkpoint_bundle load_trained(const std::string& path) {
    checkpoint_data ck = load_checkpoint(path);
    if (!ck.meta.contains("config"))
        throw load_error("checkpoint " + path + " carries no configuration");
    checkpoint_bundle b;
    b.config = train_config_from_json(ck.meta["config"]);
    b.params = head_params_from_checkpoint(ck, b.config.model);
    return b;
}

int cmd_synth_data(const synth_spec& spec, const std::string& out_dir, bool force) {
    dataset ds = generate_synthetic(spec);
    save_dataset(ds, out_dir, force);
    std::printf("wrote %zu images (%zu seen + %zu unseen classes, %zux%zux%zu, %zu attributes) to %s\n",
                ds.image_count(), ds.seen_classes.size(), ds.unseen_classes.size(), ds.height,
                ds.width, ds.channels, ds.attr_count(), out_dir.c_str());
    return 0;
}

int cmd_train(run_config rc, const std::string& resume, bool append_trace) {
    if (rc.data_path.empty()) throw config_error("no dataset: pass --data or set [paths] data");
    dataset ds = load_dataset(rc.data_path);
    train_result result = train(ds, rc.train, resume);
    write_loss_trace(rc.trace_path, result.trace, append_trace);
    if (!result.trace.empty()) {
        const episode_record& last = result.trace.back();
        std::printf("trained %zu episodes; final losses cls=%.4f mse=%.4f aal=%.4f acl=%.4f ccl=%.4f total=%.4f\n",
                    result.trace.size(), last.cls, last.mse, last.aal, last.acl, last.ccl,
                    last.total);
    }
    if (!result.final_checkpoint.empty())
        std::printf("checkpoint: %s\n", result.final_checkpoint.string().c_str());
    std::printf("loss trace: %s\n", rc.trace_path.c_str());
    return 0;
}

int cmd_eval(const run_config& rc, const std::string& ckpt_path, const std::string& mode_str,
             double gamma, bool gamma_set, const std::string& sweep,
             const std::string& report_path) {
    if (rc.data_path.empty()) throw config_error("no dataset: pass --data or set [paths] data");
    checkpoint_bundle b = load_trained(ckpt_path);
    dataset ds = load_dataset(rc.data_path);
    const double alpha = b.config.weights.alpha;

    if (!sweep.empty()) {
        std::vector<sweep_row> rows =
            gamma_sweep(ds, b.params, b.config.model, alpha, parse_sweep(sweep));
        std::printf(" gamma      U      S      H  unseen_preds\n");
        nlohmann::json jrows = nlohmann::json::array();
        for (const sweep_row& r : rows) {
            std::printf("%6.2f %6.1f %6.1f %6.1f  %12zu\n", r.gamma, r.u, r.s, r.h,
                        r.unseen_predictions);
            jrows.push_back({{"gamma", r.gamma},
                             {"u", r.u},
                             {"s", r.s},
                             {"h", r.h},
                             {"unseen_predictions", r.unseen_predictions}});
        }
        if (!report_path.empty()) {
            std::ofstream out(report_path, std::ios::trunc);
            out << nlohmann::json{{"mode", "gzsl_sweep"}, {"rows", jrows}}.dump(2) << "\n";
            std::printf("report: %s\n", report_path.c_str());
        }
        return 0;
    }

    const eval_mode mode = eval_mode_from_string(mode_str);
    const double g = gamma_set ? gamma : rc.eval_gamma;
    eval_report rep = evaluate(ds, b.params, b.config.model, mode, g, alpha);
    std::fputs(rep.table().c_str(), stdout);
    if (!report_path.empty()) {
        std::ofstream out(report_path, std::ios::trunc);
        out << rep.to_json().dump(2) << "\n";
        std::printf("report: %s\n", report_path.c_str());
    }
    return 0;
}

int cmd_export_embeddings(const run_config& rc, const std::string& ckpt_path,
                          const std::string& out_path, const std::string& features) {
    if (rc.data_path.empty()) throw config_error("no dataset: pass --data or set [paths] data");
    bool enhanced;
    if (features == "enhanced") enhanced = true;
    else if (features == "raw") enhanced = false;
    else throw config_error("--features must be 'raw' or 'enhanced', got '" + features + "'");

    checkpoint_bundle b = load_trained(ckpt_path);
    dataset ds = load_dataset(rc.data_path);
    if (ds.test_indices.empty()) throw validation_error("dataset has no test images to export");

    const tensor norm_attrs = ds.normalized_class_attributes();
    const double threshold = b.config.weights.presence_threshold;
    std::ofstream out(out_path, std::ios::trunc);
    if (!out) throw load_error("cannot write " + out_path);
    out << "image_index,attribute_id";
    for (std::size_t j = 0; j < ds.channels; ++j) out << ",c" << j;
    out << "\n";
    std::size_t rows = 0;
    for (std::size_t i : ds.test_indices) {
        forward_out fo = forward(ds.feature_maps[i], b.params, b.config.model);
        const tensor& feat = enhanced ? fo.eaf : fo.af;
        const std::size_t class_row = ds.class_row(ds.labels[i]);
        for (std::size_t j = 0; j < ds.attr_count(); ++j) {
            if (!(norm_attrs(class_row, j) > threshold)) continue;
            out << i << "," << j;
            for (std::size_t c = 0; c < feat.cols(); ++c)
                out << "," << detail::format_double(feat(j, c));
            out << "\n";
            ++rows;
        }
    }
    std::printf("wrote %zu attribute feature rows (%s) to %s\n", rows, features.c_str(),
                out_path.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attribute-attention zero-shot learning toolkit"};
    app.require_subcommand(1);

    // synth-data
    auto* synth = app.add_subcommand("synth-data", "generate a synthetic dataset directory");
    hdafl::synth_spec spec;
    std::string synth_out;
    bool force = false;
    synth->add_option("--seen", spec.n_seen, "seen class count")->capture_default_str();
    synth->add_option("--unseen", spec.n_unseen, "unseen class count")->capture_default_str();
    synth->add_option("--attrs", spec.attr_count, "attribute count")->capture_default_str();
    synth->add_option("--channels", spec.channels, "feature channels")->capture_default_str();
    synth->add_option("--height", spec.height, "feature map height")->capture_default_str();
    synth->add_option("--width", spec.width, "feature map width")->capture_default_str();
    synth->add_option("--images-per-class", spec.images_per_class, "images per class")
        ->capture_default_str();
    synth->add_option("--noise", spec.noise_scale, "additive noise scale")->capture_default_str();
    synth->add_option("--seed", spec.seed, "generator seed")->capture_default_str();
    synth->add_option("--out", synth_out, "output directory")->required();
    synth->add_flag("--force", force, "overwrite a non-empty output directory");

    // shared train/eval/export options
    std::string config_path, data_path, resume, ckpt_path, mode_str = "gzsl";
    std::string sweep, report_path, export_out, features = "enhanced";
    double gamma = 0.7;

    auto* tr = app.add_subcommand("train", "train the head on a dataset directory");
    std::string trace_path, checkpoint_dir;
    std::size_t epochs = 0, ways = 0, shots = 0;
    double lr = 0;
    bool seed_set = false;
    std::uint64_t seed = 0;
    tr->add_option("--config", config_path, "run configuration file (INI)");
    tr->add_option("--data", data_path, "dataset directory");
    tr->add_option("--checkpoint-dir", checkpoint_dir, "checkpoint directory (default: checkpoints)");
    tr->add_option("--trace", trace_path, "loss trace CSV path (default: loss_trace.csv)");
    tr->add_option("--epochs", epochs, "override epochs (default 15)");
    tr->add_option("--ways", ways, "override episode ways M (default 16)");
    tr->add_option("--shots", shots, "override episode shots N (default 2)");
    tr->add_option("--lr", lr, "override learning rate (default 1e-3)");
    tr->add_option("--seed", seed, "override master seed (default 1)")
        ->each([&](const std::string&) { seed_set = true; });
    tr->add_option("--resume", resume, "resume from a checkpoint file");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint in czsl or gzsl mode");
    bool gamma_set = false;
    ev->add_option("--config", config_path, "run configuration file (INI)");
    ev->add_option("--data", data_path, "dataset directory");
    ev->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    ev->add_option("--mode", mode_str, "czsl or gzsl")->capture_default_str();
    ev->add_option("--gamma", gamma, "seen-class penalty (default 0.7)")
        ->each([&](const std::string&) { gamma_set = true; });
    ev->add_option("--gamma-sweep", sweep, "sweep gammas start:stop:step (gzsl)");
    ev->add_option("--report", report_path, "write a JSON report here");

    auto* ex = app.add_subcommand("export-embeddings",
                                  "write per-attribute features of the test split as CSV");
    ex->add_option("--config", config_path, "run configuration file (INI)");
    ex->add_option("--data", data_path, "dataset directory");
    ex->add_option("--checkpoint", ckpt_path, "trained checkpoint")->required();
    ex->add_option("--out", export_out, "output CSV path")->required();
    ex->add_option("--features", features, "raw (AF) or enhanced (EAF)")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synth_data(spec, synth_out, force);

        hdafl::run_config rc = load_run_config(config_path);
        if (!data_path.empty()) rc.data_path = data_path;

        if (tr->parsed()) {
            if (!checkpoint_dir.empty()) rc.train.checkpoint_dir = checkpoint_dir;
            if (!trace_path.empty()) rc.trace_path = trace_path;
            if (epochs != 0) rc.train.epochs = epochs;
            if (ways != 0) rc.train.episode.ways = ways;
            if (shots != 0) rc.train.episode.shots = shots;
            if (lr != 0) rc.train.learning_rate = lr;
            if (seed_set) rc.train.seed = seed;
            return cmd_train(rc, resume, !resume.empty());
        }
        if (ev->parsed())
            return cmd_eval(rc, ckpt_path, mode_str, gamma, gamma_set, sweep, report_path);
        if (ex->parsed()) return cmd_export_embeddings(rc, ckpt_path, export_out, features);
    } catch (const hdafl::numeric_error& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const hdafl::load_error& e) {
        std::fprintf(stderr, "missing artifact: %s\n", e.what());
        return 2;
    } catch (const hdafl::validation_error& e) {
        std::fprintf(stderr, "invalid input: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
