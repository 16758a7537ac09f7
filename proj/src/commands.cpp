#include "sdseg/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "json.hpp"
#include "sdseg/config.hpp"
#include "sdseg/data.hpp"
#include "sdseg/grad_check.hpp"
#include "sdseg/infer.hpp"
#include "sdseg/io_util.hpp"
#include "sdseg/metrics.hpp"
#include "sdseg/train.hpp"
#include "sdseg/unet.hpp"

namespace sdseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double seconds_since(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct ManifestWriter {
    json doc;
    explicit ManifestWriter(const std::string& command) {
        doc["command"] = command;
        doc["config"] = json::object();
        doc["inputs"] = json::array();
        doc["outputs"] = json::array();
        doc["timings_sec"] = json::object();
    }
    void config(const std::string& key, const json& value) { doc["config"][key] = value; }
    void input(const std::string& path) {
        doc["inputs"].push_back({{"path", path}, {"checksum", checksum_hex(file_checksum(path))}});
    }
    void output(const std::string& path, bool checksummed = true) {
        doc["outputs"].push_back(
            {{"path", path},
             {"checksum", checksummed ? checksum_hex(file_checksum(path)) : "excluded-timing"}});
    }
    void timing(const std::string& key, double sec) { doc["timings_sec"][key] = sec; }
    void write(const std::string& dir) const {
        std::ofstream os(fs::path(dir) / "manifest.json");
        if (!os) throw FormatError("cannot write manifest in " + dir);
        os << doc.dump(2) << '\n';
    }
};

std::string pct(double fraction) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", 100.0 * fraction);
    return buf;
}

ScenarioSpec scenario_from(const Config& cfg) {
    ScenarioSpec s;
    s.grid_h = cfg.get_int("data.grid_h", s.grid_h);
    s.grid_w = cfg.get_int("data.grid_w", s.grid_w);
    s.channels = cfg.get_int("data.channels", s.channels);
    s.noise_sigma = cfg.get_double("data.noise_sigma", s.noise_sigma);
    s.stochastic_sigma = cfg.get_double("data.stochastic_sigma", s.stochastic_sigma);
    s.damage_fraction = cfg.get_double("data.damage_fraction", s.damage_fraction);
    s.mix_none = cfg.get_double("data.mix_none", s.mix_none);
    s.mix_soft_story = cfg.get_double("data.mix_soft_story", s.mix_soft_story);
    s.mix_cluster = cfg.get_double("data.mix_cluster", s.mix_cluster);
    s.mix_scattered = cfg.get_double("data.mix_scattered", s.mix_scattered);
    s.seed = cfg.get_u64("data.seed", s.seed);
    return s;
}

ArchConfig arch_from(const Config& cfg, const Dataset& ds) {
    ArchConfig a;
    a.in_channels = ds.spec.channels;
    a.grid_h = ds.spec.grid_h;
    a.grid_w = ds.spec.grid_w;
    a.depth = cfg.get_int("arch.depth", 4);
    a.base_filters = cfg.get_int("arch.base_filters", 32);
    a.dlc = cfg.get_int("arch.dlc", 4);
    a.p_do = cfg.get_double("arch.p_do", 0.4);
    return a;
}

TrainConfig train_from(const Config& cfg) {
    TrainConfig t;
    t.lr0 = cfg.get_double("train.lr0", t.lr0);
    t.lr_decay = cfg.get_double("train.lr_decay", t.lr_decay);
    t.l2 = cfg.get_double("train.l2", t.l2);
    t.batch = cfg.get_int("train.batch", t.batch);
    t.max_epochs = cfg.get_int("train.max_epochs", t.max_epochs);
    t.patience = cfg.get_int("train.patience", t.patience);
    t.weight_mode = weight_mode_from(cfg.get_string("train.weight_mode", "UW"));
    t.n_val_samples = cfg.get_int("train.n_val_samples", t.n_val_samples);
    t.seed = cfg.get_u64("train.seed", t.seed);
    return t;
}

void record_train_config(ManifestWriter& m, const TrainConfig& t) {
    m.config("train.lr0", t.lr0);
    m.config("train.lr_decay", t.lr_decay);
    m.config("train.l2", t.l2);
    m.config("train.batch", t.batch);
    m.config("train.max_epochs", t.max_epochs);
    m.config("train.patience", t.patience);
    m.config("train.weight_mode", weight_mode_name(t.weight_mode));
    m.config("train.n_val_samples", t.n_val_samples);
    m.config("train.seed", t.seed);
    m.config("train.optimizer", "nadam(b1=0.9,b2=0.999,eps=1e-7)");
    m.config("train.val_loss", "bayesian CE, L2 excluded");
}

Split split_from(const std::string& name) {
    if (name == "train") return Split::kTrain;
    if (name == "val") return Split::kVal;
    if (name == "test") return Split::kTest;
    throw ConfigError("unknown split: " + name);
}

Variant variant_from(const std::string& name) {
    if (name == "ideal") return Variant::kIdeal;
    if (name == "stochastic") return Variant::kStochastic;
    throw ConfigError("unknown variant: " + name);
}

struct SplitMetrics {
    double mca, ga, acc_d, acc_nd;
};

SplitMetrics metrics_of(const Confusion2& c) {
    const auto [acc_nd, acc_d] = class_acc(c);
    return {mca(c), ga(c), acc_d, acc_nd};
}

const char* kMetricsHeader = "model_id,dlc,p_do,weight_mode,rule,split,mca,ga,acc_d,acc_nd,n_sample,seed\n";

std::string metrics_row(const std::string& model_id, const std::string& dlc,
                        const std::string& p_do, const std::string& wm, const std::string& rule,
                        const std::string& split, const SplitMetrics& m, int n_sample,
                        std::uint64_t seed) {
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%s,%s,%s,%s,%s,%s,%s,%s,%s,%s,%d,%llu\n", model_id.c_str(),
                  dlc.c_str(), p_do.c_str(), wm.c_str(), rule.c_str(), split.c_str(),
                  pct(m.mca).c_str(), pct(m.ga).c_str(), pct(m.acc_d).c_str(),
                  pct(m.acc_nd).c_str(), n_sample,
                  static_cast<unsigned long long>(seed));
    return buf;
}

}  // namespace

void cmd_generate(const GenerateOptions& opt, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    Config cfg = Config::parse_file(opt.config_path);
    cfg.require_known({"data.n_obs", "data.grid_h", "data.grid_w", "data.channels",
                       "data.noise_sigma", "data.stochastic_sigma", "data.damage_fraction",
                       "data.mix_none", "data.mix_soft_story", "data.mix_cluster",
                       "data.mix_scattered", "data.seed"});
    ScenarioSpec spec = scenario_from(cfg);
    if (opt.has_seed) spec.seed = opt.seed;
    const int n_obs = cfg.get_int("data.n_obs", 2000);

    fs::create_directories(opt.out_dir);
    const Dataset ds = gen_dataset(n_obs, spec);
    const std::string base = (fs::path(opt.out_dir) / "dataset").string();
    save_dataset(ds, base);

    const SplitSizes sz = split_sizes(n_obs);
    const double frac = ds.damage_fraction();
    log << "generated " << n_obs << " observations (grid " << spec.grid_h << "x" << spec.grid_w
        << ", " << spec.channels << " channels)\n";
    log << "splits train/val/test: " << sz.train << "/" << sz.val << "/" << sz.test << "\n";
    log << "realized class frequencies: ND " << pct(1.0 - frac) << "%, D " << pct(frac) << "%\n";

    ManifestWriter m("generate");
    for (const auto& [key, entry] : cfg.entries()) m.config(key, entry.value);
    m.config("resolved.n_obs", n_obs);
    m.config("resolved.seed", spec.seed);
    m.doc["seed"] = spec.seed;
    for (const char* suffix : {".sdsb", "_stochastic.sdsb", ".split", ".manifest"})
        m.output(base + suffix);
    m.timing("total", seconds_since(t0));
    m.write(opt.out_dir);
}

void cmd_train(const TrainOptions& opt, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    Config cfg = Config::parse_file(opt.config_path);
    cfg.require_known({"data.path", "arch.depth", "arch.base_filters", "arch.dlc", "arch.p_do",
                       "train.lr0", "train.lr_decay", "train.l2", "train.batch",
                       "train.max_epochs", "train.patience", "train.weight_mode",
                       "train.n_val_samples", "train.seed"});
    const std::string data_base = cfg.get_string("data.path", "");
    if (data_base.empty()) throw ConfigError("train config needs data.path");

    const Dataset ds = load_dataset(data_base);
    const ArchConfig arch = arch_from(cfg, ds);
    TrainConfig tcfg = train_from(cfg);
    if (opt.has_seed) tcfg.seed = opt.seed;

    log << "training " << arch.depth << "-level model (base " << arch.base_filters << ", dlc "
        << arch.dlc << ", p_do " << arch.p_do << ", " << weight_mode_name(tcfg.weight_mode)
        << ") on " << ds.indices(Split::kTrain).size() << " observations\n";

    const UNetModel init = build_unet(arch, tcfg.seed);
    const TrainResult result = train(init, ds, tcfg);

    fs::create_directories(opt.out_dir);
    const std::string ckpt_path = (fs::path(opt.out_dir) / "checkpoint.ckpt").string();
    const std::string hist_path = (fs::path(opt.out_dir) / "history.csv").string();
    save_checkpoint(result.best, ckpt_path);
    write_history_csv(result.history, hist_path);

    log << "best epoch " << result.history.best_epoch << " of " << result.history.epochs.size()
        << ", bayesian val loss " << result.history.best_val_loss << "\n";

    ManifestWriter m("train");
    for (const auto& [key, entry] : cfg.entries()) m.config(key, entry.value);
    record_train_config(m, tcfg);
    m.config("arch.depth", arch.depth);
    m.config("arch.base_filters", arch.base_filters);
    m.config("arch.dlc", arch.dlc);
    m.config("arch.p_do", arch.p_do);
    m.doc["seed"] = tcfg.seed;
    for (const char* suffix : {".sdsb", "_stochastic.sdsb", ".split", ".manifest"})
        m.input(data_base + suffix);
    m.output(ckpt_path);
    m.output(hist_path);
    m.timing("total", seconds_since(t0));
    m.write(opt.out_dir);
}

namespace {

struct SweepCell {
    int dlc;
    double p_do;
    WeightMode weight;
    std::string id() const {
        char buf[64];
        std::snprintf(buf, sizeof(buf), "dlc%d_p%03d_%s", dlc,
                      static_cast<int>(std::lround(1000.0 * p_do)), weight_mode_name(weight));
        return buf;
    }
};

// cells are keyed by their values, not grid positions, so a restricted grid
// trains exactly the same cell as the full grid
std::uint64_t cell_seed(std::uint64_t base, const SweepCell& cell) {
    std::uint64_t k = mix64(base);
    k = mix64(k ^ static_cast<std::uint64_t>(cell.dlc));
    k = mix64(k ^ static_cast<std::uint64_t>(std::lround(1000.0 * cell.p_do)));
    k = mix64(k ^ (cell.weight == WeightMode::kUW ? 17ULL : 23ULL));
    return k;
}

}  // namespace

void cmd_sweep(const SweepOptions& opt, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    Config cfg = Config::parse_file(opt.config_path);
    cfg.require_known({"data.path", "arch.depth", "arch.base_filters", "train.lr0",
                       "train.lr_decay", "train.l2", "train.batch", "train.max_epochs",
                       "train.patience", "train.n_val_samples", "train.seed", "sweep.p_do_list",
                       "sweep.dlc_list", "sweep.weight_modes", "infer.n_sample"});
    const std::string data_base = cfg.get_string("data.path", "");
    if (data_base.empty()) throw ConfigError("sweep config needs data.path");

    // the paper's 13-value bin and four layer configurations are the default grid
    const std::vector<double> p_do_list = cfg.get_double_list(
        "sweep.p_do_list",
        {0.02, 0.05, 0.08, 0.10, 0.12, 0.15, 0.20, 0.25, 0.30, 0.40, 0.50, 0.60, 0.70});
    const std::vector<int> dlc_list = cfg.get_int_list("sweep.dlc_list", {1, 2, 3, 4});
    const std::vector<std::string> wm_list =
        cfg.get_string_list("sweep.weight_modes", {"UW", "MFW"});
    const int n_sample = cfg.get_int("infer.n_sample", 50);

    const Dataset ds = load_dataset(data_base);
    TrainConfig base_train = train_from(cfg);
    if (opt.has_seed) base_train.seed = opt.seed;
    const std::uint64_t dataset_checksum = file_checksum(data_base + ".sdsb");

    std::vector<SweepCell> cells;
    for (int dlc : dlc_list)
        for (double p : p_do_list)
            for (const auto& wm : wm_list) cells.push_back({dlc, p, weight_mode_from(wm)});

    fs::create_directories(fs::path(opt.out_dir) / "cells");
    std::vector<SweepResult> results;
    std::vector<std::string> failures;
    int trained = 0, skipped = 0;

    for (const SweepCell& cell : cells) {
        const std::string cell_id = cell.id();
        const fs::path cell_dir = fs::path(opt.out_dir) / "cells" / cell_id;
        const std::string ckpt_path = (cell_dir / "checkpoint.ckpt").string();
        const std::string rows_path = (cell_dir / "metrics.csv").string();
        const std::string cell_manifest = (cell_dir / "cell.json").string();

        // content hash that must match for a resume to skip this cell
        std::uint64_t config_hash = mix64(dataset_checksum ^ cell_seed(base_train.seed, cell));
        config_hash = mix64(config_hash ^ static_cast<std::uint64_t>(cfg.get_int("arch.depth", 4)));
        config_hash =
            mix64(config_hash ^ static_cast<std::uint64_t>(cfg.get_int("arch.base_filters", 32)));
        config_hash = mix64(config_hash ^ static_cast<std::uint64_t>(base_train.max_epochs));
        config_hash = mix64(config_hash ^ static_cast<std::uint64_t>(n_sample));

        bool reuse = false;
        if (opt.resume && fs::exists(cell_manifest) && fs::exists(rows_path) && fs::exists(ckpt_path)) {
            try {
                std::ifstream is(cell_manifest);
                json j;
                is >> j;
                reuse = j.at("config_hash").get<std::string>() == checksum_hex(config_hash) &&
                        j.at("checkpoint").get<std::string>() ==
                            checksum_hex(file_checksum(ckpt_path)) &&
                        j.at("metrics").get<std::string>() == checksum_hex(file_checksum(rows_path));
            } catch (...) {
                reuse = false;
            }
        }

        try {
            SplitMetrics per_rule[2];
            if (!reuse) {
                ArchConfig arch = arch_from(cfg, ds);
                arch.dlc = cell.dlc;
                arch.p_do = cell.p_do;
                TrainConfig tcfg = base_train;
                tcfg.weight_mode = cell.weight;
                tcfg.seed = cell_seed(base_train.seed, cell);

                const TrainResult r = train(build_unet(arch, tcfg.seed), ds, tcfg);
                fs::create_directories(cell_dir);
                save_checkpoint(r.best, ckpt_path);

                const std::pair<double, double> priors{r.best.prior_nd, r.best.prior_d};
                std::ofstream rows(rows_path);
                rows << kMetricsHeader;
                for (const Rule rule : {Rule::kMAP, Rule::kML}) {
                    const Confusion2 c = evaluate_split(r.best.model, ds, Split::kVal,
                                                        Variant::kIdeal, n_sample, rule, priors,
                                                        tcfg.seed);
                    per_rule[static_cast<int>(rule)] = metrics_of(c);
                    rows << metrics_row(cell_id, std::to_string(cell.dlc),
                                        std::to_string(cell.p_do), weight_mode_name(cell.weight),
                                        rule_name(rule), "val",
                                        per_rule[static_cast<int>(rule)], n_sample, tcfg.seed);
                }
                rows.close();
                json j;
                j["config_hash"] = checksum_hex(config_hash);
                j["checkpoint"] = checksum_hex(file_checksum(ckpt_path));
                j["metrics"] = checksum_hex(file_checksum(rows_path));
                std::ofstream os(cell_manifest);
                os << j.dump(2) << '\n';
                ++trained;
            } else {
                ++skipped;
            }

            // read the cell rows back (uniform path for fresh and resumed cells)
            std::ifstream rows(rows_path);
            std::string line;
            std::getline(rows, line);  // header
            while (std::getline(rows, line)) {
                std::vector<std::string> cols;
                std::stringstream ss(line);
                std::string col;
                while (std::getline(ss, col, ',')) cols.push_back(col);
                if (cols.size() != 12) throw FormatError("bad cell metrics row in " + rows_path);
                SweepResult r;
                r.model_id = cols[0];
                r.dlc = std::stoi(cols[1]);
                r.p_do = std::stod(cols[2]);
                r.weight_mode = cols[3];
                r.rule = cols[4];
                r.mca = std::stod(cols[6]);
                r.ga = std::stod(cols[7]);
                r.acc_d = std::stod(cols[8]);
                r.acc_nd = std::stod(cols[9]);
                results.push_back(std::move(r));
            }
        } catch (const std::exception& e) {
            failures.push_back(cell_id + ": " + e.what());
            log << "cell " << cell_id << " failed: " << e.what() << "\n";
        }
    }

    // canonical order: (dlc, p_do, weight, rule)
    std::sort(results.begin(), results.end(), [](const SweepResult& a, const SweepResult& b) {
        if (a.dlc != b.dlc) return a.dlc < b.dlc;
        if (a.p_do != b.p_do) return a.p_do < b.p_do;
        if (a.weight_mode != b.weight_mode) return a.weight_mode > b.weight_mode;  // UW first
        return a.rule < b.rule;
    });

    const std::string metrics_path = (fs::path(opt.out_dir) / "metrics.csv").string();
    {
        std::ofstream os(metrics_path);
        os << "# node-pooled (micro) metrics over the validation split\n";
        os << kMetricsHeader;
        char buf[320];
        for (const auto& r : results) {
            std::snprintf(buf, sizeof(buf), "%s,%d,%g,%s,%s,val,%.2f,%.2f,%.2f,%.2f,%d,-\n",
                          r.model_id.c_str(), r.dlc, r.p_do, r.weight_mode.c_str(), r.rule.c_str(),
                          r.mca, r.ga, r.acc_d, r.acc_nd, n_sample);
            os << buf;
        }
    }

    const std::string report_path = (fs::path(opt.out_dir) / "report.txt").string();
    {
        std::ofstream os(report_path);
        for (const RankedTable& table : sweep_report(results)) {
            os << "== " << table.rule << " decision rule, ranked by validation MCA ==\n";
            auto print_rows = [&](const std::vector<SweepResult>& rows, const char* title) {
                os << title << "\n";
                os << "  dlc  p_do   weights  MCA%%    GA%%     accD%%   accND%%\n";
                for (const auto& r : rows) {
                    char buf[160];
                    std::snprintf(buf, sizeof(buf), "  %-4d %-6g %-8s %-7.2f %-7.2f %-7.2f %-7.2f\n",
                                  r.dlc, r.p_do, r.weight_mode.c_str(), r.mca, r.ga, r.acc_d,
                                  r.acc_nd);
                    os << buf;
                }
            };
            print_rows(table.top(5), "highest validation MCA");
            print_rows(table.bottom(5), "lowest validation MCA");
            os << "rows: " << table.rows.size() << "\n\n";
        }
        if (!failures.empty()) {
            os << "== failed cells ==\n";
            for (const auto& f : failures) os << "  " << f << '\n';
        }
    }

    log << "sweep: " << trained << " trained, " << skipped << " resumed, " << failures.size()
        << " failed; " << results.size() << " ranked rows\n";

    ManifestWriter m("sweep");
    for (const auto& [key, entry] : cfg.entries()) m.config(key, entry.value);
    m.doc["seed"] = base_train.seed;
    m.input(data_base + ".sdsb");
    m.output(metrics_path);
    m.output(report_path);
    m.doc["cells_trained"] = trained;
    m.doc["cells_resumed"] = skipped;
    m.doc["cells_failed"] = failures;
    m.timing("total", seconds_since(t0));
    m.write(opt.out_dir);
}

void cmd_infer(const InferCmdOptions& opt, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    if (opt.n_samples.empty()) throw ConfigError("infer needs at least one n_sample value");
    const Checkpoint ckpt = load_checkpoint(opt.checkpoint_path);
    const Dataset ds = load_dataset(opt.data_base);
    const Split split = split_from(opt.split);
    const Variant variant = variant_from(opt.variant);
    const Rule rule = rule_from(opt.rule);
    const std::pair<double, double> priors{ckpt.prior_nd, ckpt.prior_d};
    if (variant == Variant::kStochastic && split != Split::kTest)
        throw DataError("stochastic features exist only for the test split");

    const std::vector<int> idx = ds.indices(split);
    if (idx.empty()) throw DataError("split `" + opt.split + "` is empty");
    fs::create_directories(opt.out_dir);

    // timing table over every requested sample size
    const std::string timing_path = (fs::path(opt.out_dir) / "timing.csv").string();
    std::ofstream timing(timing_path);
    timing << "n_sample,observations,total_sec,per_obs_ms\n";

    ManifestWriter m("infer");
    m.config("checkpoint", opt.checkpoint_path);
    m.config("data", opt.data_base);
    m.config("split", opt.split);
    m.config("variant", opt.variant);
    m.config("rule", opt.rule);
    m.config("seed", opt.seed);
    m.config("priors.nd", ckpt.prior_nd);
    m.config("priors.d", ckpt.prior_d);
    m.doc["seed"] = opt.seed;
    m.input(opt.checkpoint_path);
    m.input(opt.data_base + ".sdsb");

    bool artifacts_written = false;
    for (const int n : opt.n_samples) {
        const auto tn = std::chrono::steady_clock::now();
        for (std::size_t k = 0; k < idx.size(); ++k) {
            const auto i = static_cast<std::size_t>(idx[k]);
            const FeatureGrid& input = variant == Variant::kStochastic
                                           ? ds.stochastic_test[k]
                                           : ds.observations[i].features;
            const InferOutput out = infer(ckpt.model, input, n, rule, priors, opt.seed,
                                          static_cast<std::uint64_t>(idx[k]));
            if (!artifacts_written) {
                char name[64];
                std::snprintf(name, sizeof(name), "obs_%06d", idx[k]);
                const std::string base = (fs::path(opt.out_dir) / name).string();
                write_label_csv(out.decision.labels, base + "_labels.csv");
                write_pgm(out.normalized_mask, base + "_uncertainty.pgm");
                write_posterior_csv(out.posterior, base + "_posterior.csv");
                if (k == 0) {
                    m.output(base + "_labels.csv");
                    m.output(base + "_uncertainty.pgm");
                    m.output(base + "_posterior.csv");
                }
            }
        }
        const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - tn).count();
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%d,%zu,%.6f,%.6f\n", n, idx.size(), total,
                      1000.0 * total / static_cast<double>(idx.size()));
        timing << buf;
        log << "n_sample " << n << ": " << total << " s over " << idx.size() << " observations\n";
        m.timing("n_sample_" + std::to_string(n), total);
        artifacts_written = true;  // masks/posteriors correspond to the first entry
    }
    timing.close();
    m.output(timing_path, /*checksummed=*/false);
    m.timing("total", seconds_since(t0));
    m.write(opt.out_dir);
}

void cmd_evaluate(const EvaluateOptions& opt, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    const Dataset ds = load_dataset(opt.data_base);
    const Split split = split_from(opt.split);
    const std::vector<int> idx = ds.indices(split);
    if (idx.empty()) throw DataError("split `" + opt.split + "` is empty");

    Confusion2 total;
    for (const int i : idx) {
        char name[64];
        std::snprintf(name, sizeof(name), "obs_%06d_labels.csv", i);
        const fs::path pred_path = fs::path(opt.pred_dir) / name;
        if (!fs::exists(pred_path))
            throw DataError("missing prediction for observation " + std::to_string(i) + ": " +
                            pred_path.string());
        const DamageMask pred = read_label_csv(pred_path.string());
        total.add(ds.observations[static_cast<std::size_t>(i)].mask, pred);
    }
    const SplitMetrics sm = metrics_of(total);
    log << "split " << opt.split << ": MCA " << pct(sm.mca) << "%, GA " << pct(sm.ga)
        << "%, accD " << pct(sm.acc_d) << "%, accND " << pct(sm.acc_nd) << "%\n";

    fs::create_directories(opt.out_dir);
    const std::string metrics_path = (fs::path(opt.out_dir) / "metrics.csv").string();
    {
        std::ofstream os(metrics_path);
        os << "# node-pooled (micro) metrics\n";
        os << kMetricsHeader;
        os << metrics_row("evaluated", "-", "-", "-", "-", opt.split, sm, 0, 0);
    }

    ManifestWriter m("evaluate");
    m.config("pred_dir", opt.pred_dir);
    m.config("data", opt.data_base);
    m.config("split", opt.split);
    m.input(opt.data_base + ".sdsb");
    m.output(metrics_path);
    m.timing("total", seconds_since(t0));
    m.write(opt.out_dir);
}

void cmd_stability(const StabilityOptions& opt, std::ostream& log) {
    const auto t0 = std::chrono::steady_clock::now();
    if (opt.trials < 1) throw ConfigError("stability needs at least one trial");
    const Checkpoint ckpt = load_checkpoint(opt.checkpoint_path);
    const Dataset ds = load_dataset(opt.data_base);
    const Split split = split_from(opt.split);
    const Rule rule = rule_from(opt.rule);
    const std::pair<double, double> priors{ckpt.prior_nd, ckpt.prior_d};

    fs::create_directories(opt.out_dir);
    const std::string out_path = (fs::path(opt.out_dir) / "stability.csv").string();
    std::ofstream os(out_path);
    os << "metric,n_sample,trials,mean,stddev\n";

    for (const int n : opt.n_samples) {
        std::vector<double> v_mca, v_ga, v_accd, v_accnd;
        for (int t = 0; t < opt.trials; ++t) {
            const std::uint64_t trial_seed =
                mix64(opt.seed ^ mix64(static_cast<std::uint64_t>(n)) ^
                      mix64(0x714a1ULL + static_cast<std::uint64_t>(t)));
            const Confusion2 c =
                evaluate_split(ckpt.model, ds, split, Variant::kIdeal, n, rule, priors, trial_seed);
            const SplitMetrics sm = metrics_of(c);
            v_mca.push_back(100.0 * sm.mca);
            v_ga.push_back(100.0 * sm.ga);
            v_accd.push_back(100.0 * sm.acc_d);
            v_accnd.push_back(100.0 * sm.acc_nd);
        }
        for (const auto& [name, values] :
             {std::pair<const char*, std::vector<double>*>{"mca", &v_mca},
              {"ga", &v_ga},
              {"acc_d", &v_accd},
              {"acc_nd", &v_accnd}}) {
            const TrialStats s = trial_stats(name, *values);
            char buf[160];
            std::snprintf(buf, sizeof(buf), "%s,%d,%d,%.6f,%.6f\n", name, n, opt.trials, s.mean,
                          s.stddev);
            os << buf;
        }
        log << "n_sample " << n << ": mca mean " << trial_stats("m", v_mca).mean << " std "
            << trial_stats("m", v_mca).stddev << "\n";
    }
    os.close();

    ManifestWriter m("stability");
    m.config("checkpoint", opt.checkpoint_path);
    m.config("data", opt.data_base);
    m.config("rule", opt.rule);
    m.config("trials", opt.trials);
    m.doc["seed"] = opt.seed;
    m.input(opt.checkpoint_path);
    m.input(opt.data_base + ".sdsb");
    m.output(out_path);
    m.timing("total", seconds_since(t0));
    m.write(opt.out_dir);
}

bool cmd_gradcheck(std::uint64_t seed, std::ostream& log) {
    bool ok = true;
    log << "layer                max rel err   tolerance   status\n";
    for (const LayerCheckRow& row : gradcheck_layers(seed, 5)) {
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%-20s %-13.3e %-11.0e %s\n", row.layer.c_str(),
                      row.max_rel_err, row.tolerance, row.pass ? "pass" : "FAIL");
        log << buf;
        ok = ok && row.pass;
    }
    const double e2e = gradcheck_end_to_end(seed);
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-20s %-13.3e %-11.0e %s\n", "network end-to-end", e2e, 5e-3,
                  e2e < 5e-3 ? "pass" : "FAIL");
    log << buf;
    return ok && e2e < 5e-3;
}

}  // namespace sdseg
