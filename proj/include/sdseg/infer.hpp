#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sdseg/data.hpp"
#include "sdseg/metrics.hpp"
#include "sdseg/tensor.hpp"
#include "sdseg/unet.hpp"

namespace sdseg {

enum class Rule : std::uint8_t { kMAP = 0, kML = 1 };
const char* rule_name(Rule r);
Rule rule_from(const std::string& name);

/// Monte Carlo posterior summary for one observation.
struct PosteriorField {
    Tensor mean_probs;    // [2,H,W], per-node expected class probabilities
    Tensor variance;      // [H,W], population variance of the P(D) samples
    int n_sample = 0;
    double max_variance = 0.0;
};

struct Decision {
    DamageMask labels;
    Rule rule = Rule::kMAP;
    std::pair<double, double> priors{0.5, 0.5};
};

/// n_sample dropout-active forward passes with frozen batch-norm stats.
/// Sample i draws from a stream keyed by (seed, observation id, i), so the
/// stack is identical under any execution order or parallel schedule.
std::vector<Tensor> mc_sample(const UNetModel& model, const FeatureGrid& input, int n_sample,
                              std::uint64_t seed, std::uint64_t obs_id);

PosteriorField posterior_stats(const std::vector<Tensor>& samples);

/// MAP: argmax of the expected probabilities. ML: argmax of expected
/// probability divided by the class prior. Exact ties resolve to D.
Decision decide(const PosteriorField& post, Rule rule, std::pair<double, double> priors);

/// variance / max_variance, all zeros when max_variance < 1e-15.
Tensor normalize_uncertainty(const PosteriorField& post);

struct InferOutput {
    Decision decision;
    PosteriorField posterior;
    Tensor normalized_mask;  // [H,W] in [0,1]
    double wall_seconds = 0.0;
};

InferOutput infer(const UNetModel& model, const FeatureGrid& input, int n_sample, Rule rule,
                  std::pair<double, double> priors, std::uint64_t seed, std::uint64_t obs_id);

/// Node-pooled confusion of MC-dropout decisions over a set of observations
/// (obs_ids key the per-observation sample streams).
Confusion2 evaluate_observations(const UNetModel& model, const std::vector<const FeatureGrid*>& inputs,
                                 const std::vector<const DamageMask*>& truths,
                                 const std::vector<std::uint64_t>& obs_ids, int n_sample, Rule rule,
                                 std::pair<double, double> priors, std::uint64_t seed);

/// Same, over one split of a dataset (global observation indices key the
/// streams). The stochastic variant is only available for the test split.
Confusion2 evaluate_split(const UNetModel& model, const Dataset& ds, Split split, Variant variant,
                          int n_sample, Rule rule, std::pair<double, double> priors,
                          std::uint64_t seed);

// file emitters (formats shared with the CLI)
void write_label_csv(const DamageMask& labels, const std::string& path);
DamageMask read_label_csv(const std::string& path);
/// 8-bit binary PGM (P5), pixel = round(255 * mask).
void write_pgm(const Tensor& mask, const std::string& path);
std::vector<std::uint8_t> read_pgm(const std::string& path, int& w, int& h);
void write_posterior_csv(const PosteriorField& post, const std::string& path);

}  // namespace sdseg
