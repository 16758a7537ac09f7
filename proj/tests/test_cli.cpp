#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "sdseg/commands.hpp"
#include "sdseg/config.hpp"
#include "sdseg/infer.hpp"
#include "sdseg/io_util.hpp"

using namespace sdseg;
namespace fs = std::filesystem;

namespace {

struct TmpDir {
    fs::path path;
    explicit TmpDir(const char* name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TmpDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

void write_file(const fs::path& p, const std::string& text) {
    std::ofstream os(p);
    os << text;
}

// tiny data/arch/train settings so command tests stay fast
const char* kTinyData =
    "data.n_obs = 40\n"
    "data.grid_h = 8\n"
    "data.grid_w = 8\n"
    "data.channels = 4\n"
    "data.noise_sigma = 0.2\n"
    "data.seed = 7\n";

std::string tiny_train(const std::string& data_base) {
    return "data.path = " + data_base +
           "\n"
           "arch.depth = 2\n"
           "arch.base_filters = 6\n"
           "arch.dlc = 2\n"
           "arch.p_do = 0.3\n"
           "train.lr0 = 2e-3\n"
           "train.batch = 16\n"
           "train.max_epochs = 3\n"
           "train.patience = 3\n"
           "train.n_val_samples = 2\n"
           "train.seed = 11\n";
}

}  // namespace

TEST_CASE("config parser: values, comments, errors") {
    const Config cfg = Config::parse_string(
        "# a comment\n"
        "data.n_obs = 100  # trailing comment\n"
        "train.lr0 = 1e-4\n"
        "sweep.p_do_list = 0.1, 0.2, 0.4\n"
        "train.weight_mode = MFW\n");
    CHECK(cfg.get_int("data.n_obs", 0) == 100);
    CHECK(cfg.get_double("train.lr0", 0) == doctest::Approx(1e-4));
    CHECK(cfg.get_double_list("sweep.p_do_list", {}) == std::vector<double>{0.1, 0.2, 0.4});
    CHECK(cfg.get_string("train.weight_mode", "") == "MFW");
    CHECK(cfg.get_int("data.missing", 42) == 42);

    SUBCASE("unknown keys are hard errors with the line number") {
        const Config bad = Config::parse_string("data.n_obs = 10\ndata.n_obsz = 10\n");
        try {
            bad.require_known({"data.n_obs"});
            FAIL("expected ConfigError");
        } catch (const ConfigError& e) {
            CHECK(e.line() == 2);
            CHECK(std::string(e.what()).find("data.n_obsz") != std::string::npos);
        }
    }
    SUBCASE("duplicate keys are rejected") {
        CHECK_THROWS_AS(Config::parse_string("a.b = 1\na.b = 2\n"), ConfigError);
    }
    SUBCASE("malformed values are rejected") {
        const Config bad = Config::parse_string("train.lr0 = fast\n");
        CHECK_THROWS_AS(bad.get_double("train.lr0", 0), ConfigError);
    }
    SUBCASE("lines without = are rejected") {
        CHECK_THROWS_AS(Config::parse_string("data.n_obs 100\n"), ConfigError);
    }
}

TEST_CASE("generate command writes dataset, prints frequencies, reproduces checksums") {
    TmpDir dir("sdseg_cli_gen");
    write_file(dir.path / "gen.cfg", kTinyData);

    GenerateOptions opt;
    opt.config_path = (dir.path / "gen.cfg").string();
    opt.out_dir = (dir.path / "out1").string();
    std::ostringstream log1;
    cmd_generate(opt, log1);
    CHECK(log1.str().find("realized class frequencies") != std::string::npos);
    CHECK(log1.str().find("32/4/4") != std::string::npos);  // 0.8/0.1/0.1 of 40
    CHECK(fs::exists(dir.path / "out1" / "dataset.sdsb"));
    CHECK(fs::exists(dir.path / "out1" / "manifest.json"));

    opt.out_dir = (dir.path / "out2").string();
    std::ostringstream log2;
    cmd_generate(opt, log2);
    for (const char* f : {"dataset.sdsb", "dataset_stochastic.sdsb", "dataset.split",
                          "dataset.manifest"})
        CHECK(file_checksum((dir.path / "out1" / f).string()) ==
              file_checksum((dir.path / "out2" / f).string()));

    SUBCASE("manifest is valid json with checksummed outputs") {
        std::ifstream is(dir.path / "out1" / "manifest.json");
        nlohmann::json j;
        is >> j;
        CHECK(j["command"] == "generate");
        CHECK(j["outputs"].size() == 4);
        for (const auto& o : j["outputs"]) CHECK(o["checksum"].get<std::string>().size() == 16);
    }
    SUBCASE("unknown config key aborts") {
        write_file(dir.path / "bad.cfg", "data.n_obz = 40\n");
        GenerateOptions bad;
        bad.config_path = (dir.path / "bad.cfg").string();
        bad.out_dir = (dir.path / "outbad").string();
        std::ostringstream log;
        CHECK_THROWS_AS(cmd_generate(bad, log), ConfigError);
    }
}

TEST_CASE("train command: checkpoint bytes identical across reruns") {
    TmpDir dir("sdseg_cli_train");
    write_file(dir.path / "gen.cfg", kTinyData);
    GenerateOptions gen;
    gen.config_path = (dir.path / "gen.cfg").string();
    gen.out_dir = (dir.path / "data").string();
    std::ostringstream glog;
    cmd_generate(gen, glog);
    const std::string data_base = (dir.path / "data" / "dataset").string();

    write_file(dir.path / "train.cfg", tiny_train(data_base));
    TrainOptions tr;
    tr.config_path = (dir.path / "train.cfg").string();
    tr.out_dir = (dir.path / "run1").string();
    std::ostringstream tlog1;
    cmd_train(tr, tlog1);
    CHECK(fs::exists(dir.path / "run1" / "checkpoint.ckpt"));
    CHECK(fs::exists(dir.path / "run1" / "history.csv"));

    tr.out_dir = (dir.path / "run2").string();
    std::ostringstream tlog2;
    cmd_train(tr, tlog2);
    CHECK(file_checksum((dir.path / "run1" / "checkpoint.ckpt").string()) ==
          file_checksum((dir.path / "run2" / "checkpoint.ckpt").string()));
    CHECK(file_checksum((dir.path / "run1" / "history.csv").string()) ==
          file_checksum((dir.path / "run2" / "history.csv").string()));

    SUBCASE("history row count respects max_epochs") {
        std::ifstream is(dir.path / "run1" / "history.csv");
        std::string line;
        int rows = -1;  // header
        while (std::getline(is, line))
            if (!line.empty()) ++rows;
        CHECK(rows <= 3);
        CHECK(rows >= 1);
    }

    SUBCASE("infer + evaluate round trip on the test split") {
        InferCmdOptions inf;
        inf.checkpoint_path = (dir.path / "run1" / "checkpoint.ckpt").string();
        inf.data_base = data_base;
        inf.n_samples = {4};
        inf.seed = 5;
        inf.out_dir = (dir.path / "pred").string();
        std::ostringstream ilog;
        cmd_infer(inf, ilog);
        CHECK(fs::exists(dir.path / "pred" / "timing.csv"));

        // every test observation got its three artifacts
        int masks = 0, pgms = 0, posts = 0;
        for (const auto& e : fs::directory_iterator(dir.path / "pred")) {
            const std::string name = e.path().filename().string();
            masks += name.ends_with("_labels.csv");
            pgms += name.ends_with("_uncertainty.pgm");
            posts += name.ends_with("_posterior.csv");
        }
        CHECK(masks == 4);
        CHECK(pgms == 4);
        CHECK(posts == 4);

        // deterministic rerun
        InferCmdOptions inf2 = inf;
        inf2.out_dir = (dir.path / "pred2").string();
        std::ostringstream ilog2;
        cmd_infer(inf2, ilog2);
        for (const auto& e : fs::directory_iterator(dir.path / "pred")) {
            const std::string name = e.path().filename().string();
            if (name.ends_with("_labels.csv") || name.ends_with(".pgm"))
                CHECK(file_checksum(e.path().string()) ==
                      file_checksum((dir.path / "pred2" / name).string()));
        }

        EvaluateOptions ev;
        ev.pred_dir = (dir.path / "pred").string();
        ev.data_base = data_base;
        ev.out_dir = (dir.path / "eval").string();
        std::ostringstream elog;
        cmd_evaluate(ev, elog);
        CHECK(elog.str().find("MCA") != std::string::npos);
        CHECK(fs::exists(dir.path / "eval" / "metrics.csv"));

        SUBCASE("missing prediction is a coverage error") {
            // remove one prediction file
            for (const auto& e : fs::directory_iterator(dir.path / "pred")) {
                if (e.path().filename().string().ends_with("_labels.csv")) {
                    fs::remove(e.path());
                    break;
                }
            }
            std::ostringstream elog2;
            CHECK_THROWS_AS(cmd_evaluate(ev, elog2), DataError);
        }
    }
}

TEST_CASE("stability command: zero dropout gives zero spread") {
    TmpDir dir("sdseg_cli_stab");
    write_file(dir.path / "gen.cfg", kTinyData);
    GenerateOptions gen;
    gen.config_path = (dir.path / "gen.cfg").string();
    gen.out_dir = (dir.path / "data").string();
    std::ostringstream glog;
    cmd_generate(gen, glog);
    const std::string data_base = (dir.path / "data" / "dataset").string();

    std::string cfg = tiny_train(data_base);
    cfg.replace(cfg.find("arch.p_do = 0.3"), 15, "arch.p_do = 0.0");
    write_file(dir.path / "train.cfg", cfg);
    TrainOptions tr;
    tr.config_path = (dir.path / "train.cfg").string();
    tr.out_dir = (dir.path / "run").string();
    std::ostringstream tlog;
    cmd_train(tr, tlog);

    StabilityOptions st;
    st.checkpoint_path = (dir.path / "run" / "checkpoint.ckpt").string();
    st.data_base = data_base;
    st.n_samples = {2, 5};
    st.trials = 4;
    st.out_dir = (dir.path / "stab").string();
    std::ostringstream slog;
    cmd_stability(st, slog);

    std::ifstream is(dir.path / "stab" / "stability.csv");
    std::string line;
    std::getline(is, line);  // header
    int rows = 0;
    while (std::getline(is, line)) {
        ++rows;
        const auto last_comma = line.rfind(',');
        CHECK(std::stod(line.substr(last_comma + 1)) == 0.0);  // stddev column
    }
    CHECK(rows == 8);  // 4 metrics x 2 sample sizes
}

TEST_CASE("sweep: single cell, resume equivalence on a two-cell grid") {
    TmpDir dir("sdseg_cli_sweep");
    write_file(dir.path / "gen.cfg", kTinyData);
    GenerateOptions gen;
    gen.config_path = (dir.path / "gen.cfg").string();
    gen.out_dir = (dir.path / "data").string();
    std::ostringstream glog;
    cmd_generate(gen, glog);
    const std::string data_base = (dir.path / "data" / "dataset").string();

    const std::string base_cfg =
        "data.path = " + data_base +
        "\n"
        "arch.depth = 2\n"
        "arch.base_filters = 4\n"
        "train.lr0 = 2e-3\n"
        "train.batch = 16\n"
        "train.max_epochs = 2\n"
        "train.patience = 2\n"
        "train.n_val_samples = 2\n"
        "train.seed = 13\n"
        "infer.n_sample = 3\n"
        "sweep.dlc_list = 1\n"
        "sweep.weight_modes = UW\n";

    SUBCASE("one-cell grid produces one ranked row per rule") {
        write_file(dir.path / "sweep.cfg", base_cfg + "sweep.p_do_list = 0.3\n");
        SweepOptions sw;
        sw.config_path = (dir.path / "sweep.cfg").string();
        sw.out_dir = (dir.path / "sweep1").string();
        std::ostringstream slog;
        cmd_sweep(sw, slog);
        std::ifstream is(dir.path / "sweep1" / "metrics.csv");
        std::string line;
        int rows = 0;
        while (std::getline(is, line))
            if (!line.empty() && line[0] != '#' && line.rfind("model_id", 0) != 0) ++rows;
        CHECK(rows == 2);  // MAP + ML for the single cell
        const std::string report = [&] {
            std::ifstream r(dir.path / "sweep1" / "report.txt");
            std::ostringstream ss;
            ss << r.rdbuf();
            return ss.str();
        }();
        CHECK(report.find("MAP decision rule") != std::string::npos);
        CHECK(report.find("ML decision rule") != std::string::npos);
    }

    SUBCASE("interrupted-then-resumed sweep matches the uninterrupted run") {
        // full two-cell run
        write_file(dir.path / "full.cfg", base_cfg + "sweep.p_do_list = 0.1, 0.3\n");
        SweepOptions full;
        full.config_path = (dir.path / "full.cfg").string();
        full.out_dir = (dir.path / "full").string();
        std::ostringstream flog;
        cmd_sweep(full, flog);

        // "interrupted": only the first cell, then resume with the full grid
        write_file(dir.path / "part.cfg", base_cfg + "sweep.p_do_list = 0.1\n");
        SweepOptions part;
        part.config_path = (dir.path / "part.cfg").string();
        part.out_dir = (dir.path / "resumed").string();
        std::ostringstream plog;
        cmd_sweep(part, plog);

        SweepOptions rest;
        rest.config_path = (dir.path / "full.cfg").string();
        rest.out_dir = (dir.path / "resumed").string();
        rest.resume = true;
        std::ostringstream rlog;
        cmd_sweep(rest, rlog);
        CHECK(rlog.str().find("1 resumed") != std::string::npos);

        CHECK(file_checksum((dir.path / "full" / "metrics.csv").string()) ==
              file_checksum((dir.path / "resumed" / "metrics.csv").string()));
        CHECK(file_checksum((dir.path / "full" / "report.txt").string()) ==
              file_checksum((dir.path / "resumed" / "report.txt").string()));
    }
}

#ifdef SDSEG_CLI_PATH
TEST_CASE("cli process exit codes") {
    TmpDir dir("sdseg_cli_exit");
    const std::string cli = SDSEG_CLI_PATH;

    SUBCASE("bad config key exits 2") {
        write_file(dir.path / "bad.cfg", "data.nope = 1\n");
        const std::string cmd = cli + " generate --config " + (dir.path / "bad.cfg").string() +
                                " --out " + dir.str() + " >/dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        CHECK(WEXITSTATUS(status) == 2);
    }
    SUBCASE("missing dataset exits 3") {
        write_file(dir.path / "train.cfg", tiny_train((dir.path / "nowhere" / "ds").string()));
        const std::string cmd = cli + " train --config " + (dir.path / "train.cfg").string() +
                                " --out " + dir.str() + " >/dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        CHECK(WEXITSTATUS(status) == 3);
    }
    SUBCASE("gradcheck exits 0") {
        const std::string cmd = cli + " gradcheck >/dev/null 2>&1";
        const int status = std::system(cmd.c_str());
        CHECK(WEXITSTATUS(status) == 0);
    }
}
#endif
