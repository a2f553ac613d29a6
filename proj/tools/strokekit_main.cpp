// strokekit command-line tool: generate / train / eval / infer / plot.
//
// Exit codes, fixed for scriptability:
//   0   success (including --help)
//   1   operation ran but failed (training divergence)
//   2   invalid spec/config/input, missing split, empty report
//   3   I/O failure (unreadable/unwritable files, damaged payloads)
//   4   config-hash mismatch on train --resume
//   64  usage errors (bad flags, unknown subcommand)
//
// STROKEKIT_THREADS caps every worker count regardless of flags.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "strokekit/age_fusion.hpp"
#include "strokekit/augment.hpp"
#include "strokekit/config.hpp"
#include "strokekit/dataset_io.hpp"
#include "strokekit/error.hpp"
#include "strokekit/metrics.hpp"
#include "strokekit/network.hpp"
#include "strokekit/phantom.hpp"
#include "strokekit/pipeline.hpp"
#include "strokekit/plot.hpp"
#include "strokekit/resample.hpp"
#include "strokekit/rng.hpp"
#include "strokekit/train.hpp"

namespace fs = std::filesystem;
using namespace strokekit;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    SK_CHECK(is.good(), IoError, "cannot open " << path);
    std::ostringstream os;
    os << is.rdbuf();
    SK_CHECK(is.good() || is.eof(), IoError, "cannot read " << path);
    return os.str();
}

void spill(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    SK_CHECK(os.good(), IoError, "cannot open " << path);
    os << text;
    os.flush();
    SK_CHECK(os.good(), IoError, "short write to " << path);
}

// STROKEKIT_THREADS caps the worker count; malformed or non-positive
// values are ignored.
int capped_threads(int requested) {
    const char* env = std::getenv("STROKEKIT_THREADS");
    if (!env) return requested;
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || cap < 1) return requested;
    return std::min<long>(requested, cap) > 0 ? static_cast<int>(std::min<long>(requested, cap))
                                              : requested;
}

// Shared checkpoint-with-config loading for eval/infer: the config defaults
// to config.txt next to the checkpoint.
struct LoadedModel {
    TrainConfig cfg;
    Model<double> model;
};

LoadedModel load_model(const std::string& ckpt_path, std::string config_path) {
    if (config_path.empty())
        config_path = (fs::path(ckpt_path).parent_path() / "config.txt").string();
    TrainConfig cfg = parse_train_config(slurp(config_path));
    LoadedModel lm{cfg, Model<double>(cfg.model, cfg.seed)};
    TrainState state;
    load_checkpoint(ckpt_path, lm.model.params(), state, train_config_hash(cfg));
    return lm;
}

// ---------------------------------------------------------------- generate

int cmd_generate(const std::string& spec_file, const std::string& out_dir, std::uint64_t seed,
                 std::optional<int> subjects_override) {
    GenerateSpec spec = parse_generate_spec(slurp(spec_file));
    if (subjects_override) {
        spec.subjects = *subjects_override;
        spec.validate();
    }

    std::vector<std::string> splits;
    if (spec.subjects > 0)
        splits = split_subjects(spec.subjects, spec.test_fraction, spec.folds,
                                Rng::derive(seed, "split", {}));

    std::vector<DatasetRecord> records;
    records.reserve(static_cast<size_t>(spec.subjects));
    for (int s = 0; s < spec.subjects; ++s) {
        Rng rng(Rng::derive(seed, "phantom", {static_cast<std::uint64_t>(s)}));
        Phantom p = generate_phantom(spec.phantom, rng);
        DatasetRecord r;
        r.subject = s;
        char buf[32];
        std::snprintf(buf, sizeof buf, "s%04d", s);
        r.volume_file = std::string("volumes/") + buf + ".vol";
        r.ann_file = std::string("annotations/") + buf + ".ann";
        r.split = splits[static_cast<size_t>(s)];
        r.annotations = std::move(p.annotations);
        r.volume = std::move(p.volume);
        records.push_back(std::move(r));
    }

    write_dataset(out_dir, records);
    spill((fs::path(out_dir) / "spec.txt").string(), serialize_generate_spec(spec));
    std::ostringstream sp;
    for (const auto& r : records) sp << r.subject << " " << r.split << "\n";
    spill((fs::path(out_dir) / "splits.txt").string(), sp.str());

    std::map<std::string, int> by_split;
    int instances = 0;
    for (const auto& r : records) {
        ++by_split[r.split];
        instances += static_cast<int>(r.annotations.size());
    }
    std::cout << "wrote " << records.size() << " subjects (" << instances << " lesions) to "
              << out_dir << "\n";
    for (const auto& [name, n] : by_split) std::cout << "  " << name << " " << n << "\n";
    return 0;
}

// ------------------------------------------------------------------- train

int cmd_train(const std::string& config_file, const std::string& data_dir,
              const std::string& out_dir, const std::string& resume_path,
              std::optional<std::uint64_t> seed, std::optional<int> threads) {
    TrainConfig cfg = parse_train_config(slurp(config_file));
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    cfg.threads = capped_threads(cfg.threads);
    cfg.validate();

    const auto records = read_dataset(data_dir);
    Model<double> model(cfg.model, cfg.seed);
    TrainState state;
    const std::uint64_t hash = train_config_hash(cfg);

    if (!resume_path.empty()) {
        try {
            load_checkpoint(resume_path, model.params(), state, hash);
        } catch (const ConfigError& e) {
            std::cerr << "error: checkpoint does not match this config: " << e.what() << "\n";
            return 4;
        }
        std::cout << "resumed " << resume_path << " at epoch " << state.epochs_done << "\n";
    }

    fs::create_directories(out_dir);
    spill((fs::path(out_dir) / "config.txt").string(), serialize_train_config(cfg));
    std::ofstream log(fs::path(out_dir) / "train.log", std::ios::app);
    SK_CHECK(log.good(), IoError, "cannot open train.log in " << out_dir);

    if (state.epochs_done >= cfg.epochs) {
        std::cout << "nothing to do: checkpoint already at epoch " << state.epochs_done
                  << " of " << cfg.epochs << "\n";
        return 0;
    }

    const TrainResult result = train(model, state, cfg, records, out_dir, &log);
    for (const auto& e : result.history) {
        std::cout << "epoch " << e.epoch << " loss " << e.loss << " lr " << e.lr;
        if (e.val_loss) std::cout << " val " << *e.val_loss;
        if (e.skipped) std::cout << " skipped " << e.skipped;
        std::cout << "\n";
    }
    if (result.diverged) {
        std::cerr << "error: training diverged; diagnostic checkpoint at "
                  << result.diverged_path << "\n";
        return 1;
    }
    std::cout << "checkpoints: last " << result.last_path;
    if (!result.best_path.empty()) std::cout << ", best " << result.best_path;
    if (!result.swa_path.empty()) std::cout << ", swa " << result.swa_path;
    std::cout << "\n";
    return 0;
}

// -------------------------------------------------------------------- eval

// Report file format (EVALREPORT1): header lines, a metrics block, then one
// "pair <subject> <true_log_age> <pred_log_age>" line per regression pair
// at full precision. cmd_plot consumes this.
std::string render_report(const EvalReport& rep, const std::string& split,
                          const std::string& predictor) {
    std::ostringstream os;
    os << "EVALREPORT1\n";
    os << "split " << split << "\n";
    os << "predictor " << predictor << "\n";
    os << "metrics " << rep.metrics.size() << "\n";
    os << metrics_kv(rep.metrics);
    os << "pairs " << rep.pair_subject.size() << "\n";
    os << std::setprecision(17);
    for (size_t i = 0; i < rep.pair_subject.size(); ++i)
        os << "pair " << rep.pair_subject[i] << " " << rep.pair_true[i] << " "
           << rep.pair_pred[i] << "\n";
    return os.str();
}

int cmd_eval(const std::string& predictor, const std::string& data_dir, const std::string& split,
             const std::string& config_path, const std::string& out_file, int threads,
             double prob_threshold) {
    auto records = read_dataset(data_dir);
    std::erase_if(records, [&](const DatasetRecord& r) { return r.split != split; });
    SK_CHECK(!records.empty(), InputError, "no records in split '" << split << "'");

    EvalOptions opt;
    opt.infer.threads = capped_threads(threads);
    opt.infer.prob_threshold = prob_threshold;

    EvalReport rep;
    if (predictor == "oracle") {
        opt.oracle = true;
        rep = evaluate_records(nullptr, records, opt);
    } else {
        const LoadedModel lm = load_model(predictor, config_path);
        rep = evaluate_records(&lm.model, records, opt);
    }

    std::cout << "split " << split << ", predictor " << predictor << "\n";
    std::cout << metrics_table(rep.metrics);
    if (!out_file.empty()) {
        spill(out_file, render_report(rep, split, predictor));
        std::cout << "report written to " << out_file << "\n";
    }
    return 0;
}

// ------------------------------------------------------------------- infer

// Per-instance saliency: the member-wise |d median / d input| maps, each
// linearly resampled to the volume's in-plane grid, max-combined over the
// instance's members into one volume.
Volume saliency_volume(const Model<double>& model, const Volume& norm,
                       const LesionInstance3D& inst) {
    const int mh = model.config().image_h, mw = model.config().image_w;
    const auto rows = linear_plan(mh, norm.height);
    const auto cols = linear_plan(mw, norm.width);
    Volume out;
    out.width = norm.width;
    out.height = norm.height;
    out.slices = norm.slices;
    out.spacing = norm.spacing;
    out.data.assign(static_cast<size_t>(out.numel()), 0.0f);
    for (const auto& [slice, query] : inst.members) {
        auto map = model.saliency(slice_tensor(norm, slice, mh, mw), query);
        if (!map) continue;
        // rows then columns; plans are over source length -> dest length
        std::vector<double> tmp(static_cast<size_t>(out.height) * mw, 0.0);
        for (int r = 0; r < out.height; ++r)
            for (const auto& tap : rows[static_cast<size_t>(r)])
                for (int c = 0; c < mw; ++c)
                    tmp[static_cast<size_t>(r) * mw + c] +=
                        tap.weight * map->at(tap.src, c);
        for (int r = 0; r < out.height; ++r)
            for (int c = 0; c < out.width; ++c) {
                double v = 0;
                for (const auto& tap : cols[static_cast<size_t>(c)])
                    v += tap.weight * tmp[static_cast<size_t>(r) * mw + tap.src];
                auto& dst = out.at(slice, r, c);
                dst = std::max(dst, static_cast<float>(v));
            }
    }
    return out;
}

int cmd_infer(const std::string& ckpt, const std::string& volume_file,
              const std::string& config_path, const std::string& saliency_dir,
              const std::string& out_file, int threads, double prob_threshold) {
    const Volume vol = read_volume(volume_file);
    const LoadedModel lm = load_model(ckpt, config_path);

    InferOptions opt;
    opt.threads = capped_threads(threads);
    opt.prob_threshold = prob_threshold;

    const auto t0 = std::chrono::steady_clock::now();
    const VolumeInference inf = predict_volume(lm.model, vol, opt);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    std::ostringstream os;
    os << "volume " << volume_file << " " << vol.width << "x" << vol.height << "x" << vol.slices
       << "\n";
    os << "instances " << inf.instances.size() << "\n";
    os << export_instances_text(inf.instances);

    if (!saliency_dir.empty()) {
        fs::create_directories(saliency_dir);
        const Volume norm = clip_normalize(vol);
        for (size_t i = 0; i < inf.instances.size(); ++i) {
            const auto path =
                (fs::path(saliency_dir) / ("saliency_" + std::to_string(i) + ".vol")).string();
            write_volume(path, saliency_volume(lm.model, norm, inf.instances[i]));
            os << "saliency " << i << " " << path << "\n";
        }
    }
    os << std::setprecision(6) << "wall_time_seconds " << secs << "\n";

    std::cout << os.str();
    if (!out_file.empty()) spill(out_file, os.str());
    return 0;
}

// -------------------------------------------------------------------- plot

void parse_report(const std::string& path, std::vector<double>& true_log,
                  std::vector<double>& pred_log) {
    std::istringstream is(slurp(path));
    std::string line;
    SK_CHECK(std::getline(is, line) && line == "EVALREPORT1", InputError,
             path << ": not an EVALREPORT1 file");
    while (std::getline(is, line)) {
        if (line.rfind("pair ", 0) != 0) continue;
        std::istringstream ls(line.substr(5));
        int subject = 0;
        double t = 0, p = 0;
        ls >> subject >> t >> p;
        SK_CHECK(!ls.fail(), InputError, path << ": bad pair line '" << line << "'");
        true_log.push_back(t);
        pred_log.push_back(p);
    }
}

int cmd_plot(const std::vector<std::string>& reports, const std::string& out_dir) {
    std::vector<double> true_log, pred_log;
    for (const auto& r : reports) parse_report(r, true_log, pred_log);
    SK_CHECK(!true_log.empty(), InputError, "no regression pairs in the given reports");

    fs::create_directories(out_dir);
    const auto scatter_path = (fs::path(out_dir) / "scatter.svg").string();
    spill(scatter_path, svg_scatter(true_log, pred_log));

    const RocCurve roc = roc_curve(true_log, pred_log);
    const auto roc_path = (fs::path(out_dir) / "roc.svg").string();
    spill(roc_path, svg_roc(roc));

    std::cout << "scatter " << scatter_path << "\n";
    std::cout << "roc " << roc_path << "\n";
    std::cout << std::setprecision(6) << "auc " << roc.auc << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"strokekit: lesion age estimation and segmentation toolkit"};
    app.require_subcommand(1);

    // generate
    auto* gen = app.add_subcommand("generate", "Write a synthetic phantom dataset");
    std::string gen_spec, gen_out;
    std::uint64_t gen_seed = 0;
    std::optional<int> gen_subjects;
    gen->add_option("spec-file", gen_spec, "generation spec (key = value text)")->required();
    gen->add_option("out-dir", gen_out, "output dataset directory")->required();
    gen->add_option("--seed", gen_seed, "master seed for all randomness");
    gen->add_option("--subjects", gen_subjects, "override the spec's subject count");

    // train
    auto* tr = app.add_subcommand("train", "Train a model on a dataset");
    std::string tr_config, tr_data, tr_out, tr_resume;
    std::optional<std::uint64_t> tr_seed;
    std::optional<int> tr_threads;
    tr->add_option("config", tr_config, "training config (key = value text)")->required();
    tr->add_option("data-dir", tr_data, "dataset directory")->required();
    tr->add_option("out-dir", tr_out, "checkpoint/log output directory")->required();
    tr->add_option("--resume", tr_resume, "checkpoint to continue from");
    tr->add_option("--seed", tr_seed, "override the config seed");
    tr->add_option("--threads", tr_threads, "override the config worker count");

    // eval
    auto* ev = app.add_subcommand("eval", "Score a checkpoint (or the oracle) on a split");
    std::string ev_pred, ev_data, ev_split = "test", ev_config, ev_out;
    int ev_threads = 1;
    double ev_prob = 0.5;
    ev->add_option("checkpoint", ev_pred, "checkpoint file, or 'oracle' for the ground-truth passthrough")
        ->required();
    ev->add_option("data-dir", ev_data, "dataset directory")->required();
    ev->add_option("--split", ev_split, "split to score (default test)");
    ev->add_option("--config", ev_config, "training config (default: config.txt beside the checkpoint)");
    ev->add_option("--out", ev_out, "write an EVALREPORT1 file here");
    ev->add_option("--threads", ev_threads, "inference worker count");
    ev->add_option("--prob-threshold", ev_prob, "lesion probability gate in (0,1)");

    // infer
    auto* in = app.add_subcommand("infer", "Run inference on one volume");
    std::string in_ckpt, in_vol, in_config, in_saliency, in_out;
    int in_threads = 1;
    double in_prob = 0.5;
    in->add_option("checkpoint", in_ckpt, "checkpoint file")->required();
    in->add_option("volume-file", in_vol, "input volume")->required();
    in->add_option("--config", in_config, "training config (default: config.txt beside the checkpoint)");
    in->add_option("--saliency", in_saliency, "write per-instance saliency volumes to this directory");
    in->add_option("--out", in_out, "also write the report here");
    in->add_option("--threads", in_threads, "inference worker count");
    in->add_option("--prob-threshold", in_prob, "lesion probability gate in (0,1)");

    // plot
    auto* pl = app.add_subcommand("plot", "Render scatter and ROC plots from eval reports");
    std::vector<std::string> pl_reports;
    std::string pl_out = ".";
    pl->add_option("report", pl_reports, "EVALREPORT1 files")->required();
    pl->add_option("--out-dir", pl_out, "plot output directory (default .)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 64;
    }

    try {
        if (gen->parsed()) return cmd_generate(gen_spec, gen_out, gen_seed, gen_subjects);
        if (tr->parsed()) return cmd_train(tr_config, tr_data, tr_out, tr_resume, tr_seed, tr_threads);
        if (ev->parsed())
            return cmd_eval(ev_pred, ev_data, ev_split, ev_config, ev_out, ev_threads, ev_prob);
        if (in->parsed())
            return cmd_infer(in_ckpt, in_vol, in_config, in_saliency, in_out, in_threads, in_prob);
        if (pl->parsed()) return cmd_plot(pl_reports, pl_out);
    } catch (const LoadError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
