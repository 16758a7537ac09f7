#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "sdseg/commands.hpp"
#include "sdseg/errors.hpp"
#include "sdseg/parallel.hpp"

using namespace sdseg;

int main(int argc, char** argv) {
    CLI::App app{"Bayesian U-Net semantic damage segmentation for grid-structured monitoring data"};
    app.require_subcommand(1);

    int threads = 0;
    app.add_option("--threads", threads, "worker threads (default: hardware concurrency)");

    GenerateOptions gen;
    auto* cmd_gen = app.add_subcommand("generate", "generate a synthetic dataset");
    cmd_gen->add_option("--config", gen.config_path, "config file (data.* keys)")->required();
    cmd_gen->add_option("--out", gen.out_dir, "output directory");
    auto* gen_seed = cmd_gen->add_option("--seed", gen.seed, "override data.seed");

    TrainOptions tr;
    auto* cmd_tr = app.add_subcommand("train", "train one model");
    cmd_tr->add_option("--config", tr.config_path, "config file (data.path, arch.*, train.*)")->required();
    cmd_tr->add_option("--out", tr.out_dir, "output directory");
    auto* tr_seed = cmd_tr->add_option("--seed", tr.seed, "override train.seed");

    SweepOptions sw;
    auto* cmd_sw = app.add_subcommand("sweep", "train the dropout hyperparameter grid");
    cmd_sw->add_option("--config", sw.config_path, "config file (sweep.* grid lists)")->required();
    cmd_sw->add_option("--out", sw.out_dir, "output directory");
    auto* sw_seed = cmd_sw->add_option("--seed", sw.seed, "override train.seed");
    cmd_sw->add_flag("--resume", sw.resume, "skip cells whose artifacts already match");

    InferCmdOptions inf;
    auto* cmd_inf = app.add_subcommand("infer", "Monte Carlo dropout inference with mask export");
    cmd_inf->add_option("--checkpoint", inf.checkpoint_path, "trained checkpoint")->required();
    cmd_inf->add_option("--data", inf.data_base, "dataset base path (no extension)")->required();
    cmd_inf->add_option("--split", inf.split, "train|val|test (default test)");
    cmd_inf->add_option("--variant", inf.variant, "ideal|stochastic (default ideal)");
    cmd_inf->add_option("--rule", inf.rule, "MAP|ML (default MAP)");
    cmd_inf->add_option("--samples", inf.n_samples,
                        "n_sample values; timing covers all, artifacts use the first")
        ->delimiter(',');
    cmd_inf->add_option("--seed", inf.seed, "sampling seed");
    cmd_inf->add_option("--out", inf.out_dir, "output directory");

    EvaluateOptions ev;
    auto* cmd_ev = app.add_subcommand("evaluate", "score exported label masks against the truth");
    cmd_ev->add_option("--pred", ev.pred_dir, "directory with obs_*_labels.csv")->required();
    cmd_ev->add_option("--data", ev.data_base, "dataset base path")->required();
    cmd_ev->add_option("--split", ev.split, "train|val|test (default test)");
    cmd_ev->add_option("--out", ev.out_dir, "output directory");

    StabilityOptions st;
    auto* cmd_st = app.add_subcommand("stability", "repeated-trial metric stability study");
    cmd_st->add_option("--checkpoint", st.checkpoint_path, "trained checkpoint")->required();
    cmd_st->add_option("--data", st.data_base, "dataset base path")->required();
    cmd_st->add_option("--split", st.split, "split to score (default test)");
    cmd_st->add_option("--rule", st.rule, "MAP|ML (default MAP)");
    cmd_st->add_option("--samples", st.n_samples, "n_sample values")->delimiter(',');
    cmd_st->add_option("--trials", st.trials, "independent trials per value (default 10)");
    cmd_st->add_option("--seed", st.seed, "base seed");
    cmd_st->add_option("--out", st.out_dir, "output directory");

    std::uint64_t gc_seed = 0xdefa117;
    auto* cmd_gc = app.add_subcommand("gradcheck", "finite-difference check of every layer");
    cmd_gc->add_option("--seed", gc_seed, "battery seed");

    CLI11_PARSE(app, argc, argv);
    if (threads > 0) ThreadPool::set_threads(threads);

    try {
        if (cmd_gen->parsed()) {
            gen.has_seed = gen_seed->count() > 0;
            cmd_generate(gen, std::cout);
        } else if (cmd_tr->parsed()) {
            tr.has_seed = tr_seed->count() > 0;
            cmd_train(tr, std::cout);
        } else if (cmd_sw->parsed()) {
            sw.has_seed = sw_seed->count() > 0;
            cmd_sweep(sw, std::cout);
        } else if (cmd_inf->parsed()) {
            cmd_infer(inf, std::cout);
        } else if (cmd_ev->parsed()) {
            cmd_evaluate(ev, std::cout);
        } else if (cmd_st->parsed()) {
            cmd_stability(st, std::cout);
        } else if (cmd_gc->parsed()) {
            return cmd_gradcheck(gc_seed, std::cout) ? 0 : 1;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "data format error: " << e.what() << "\n";
        return 3;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const DivergenceError& e) {
        std::cerr << "numerical divergence: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
