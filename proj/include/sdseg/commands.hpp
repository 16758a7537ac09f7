#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace sdseg {

// Command implementations behind the CLI. Each run writes its artifacts plus
// exactly one manifest.json (command, resolved config, seeds, input/output
// checksums, wall-clock timings; timing fields never enter checksums).
// Errors surface as exceptions; the CLI maps them to exit codes
// (2 config, 3 data format, 4 divergence).

struct GenerateOptions {
    std::string config_path;
    std::string out_dir = ".";
    bool has_seed = false;
    std::uint64_t seed = 0;
};
void cmd_generate(const GenerateOptions& opt, std::ostream& log);

struct TrainOptions {
    std::string config_path;
    std::string out_dir = ".";
    bool has_seed = false;
    std::uint64_t seed = 0;
};
void cmd_train(const TrainOptions& opt, std::ostream& log);

struct SweepOptions {
    std::string config_path;
    std::string out_dir = ".";
    bool has_seed = false;
    std::uint64_t seed = 0;
    bool resume = false;
};
void cmd_sweep(const SweepOptions& opt, std::ostream& log);

struct InferCmdOptions {
    std::string checkpoint_path;
    std::string data_base;            // dataset base path (no extension)
    std::string split = "test";
    std::string variant = "ideal";    // ideal | stochastic (test split only)
    std::string rule = "MAP";
    std::vector<int> n_samples = {50};  // timing table covers all entries;
                                        // masks/posteriors use the first
    std::uint64_t seed = 1;
    std::string out_dir = ".";
};
void cmd_infer(const InferCmdOptions& opt, std::ostream& log);

struct EvaluateOptions {
    std::string pred_dir;
    std::string data_base;
    std::string split = "test";
    std::string out_dir = ".";
};
void cmd_evaluate(const EvaluateOptions& opt, std::ostream& log);

struct StabilityOptions {
    std::string checkpoint_path;
    std::string data_base;
    std::string split = "test";
    std::string rule = "MAP";
    std::vector<int> n_samples = {5, 50, 200};
    int trials = 10;
    std::uint64_t seed = 1;
    std::string out_dir = ".";
};
void cmd_stability(const StabilityOptions& opt, std::ostream& log);

/// Runs the finite-difference battery plus the end-to-end network check and
/// prints one row per layer. Returns false when any row fails.
bool cmd_gradcheck(std::uint64_t seed, std::ostream& log);

}  // namespace sdseg
