#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdseg/rng.hpp"
#include "sdseg/tensor.hpp"

namespace sdseg {

// Synthetic (FeatureGrid, DamageMask) datasets with controllable class
// imbalance, damage patterns and noise. Features are generated directly in
// float32 resolution so dataset files round-trip exactly.

enum class Pattern : std::uint8_t { kNone = 0, kSoftStory = 1, kCluster = 2, kScattered = 3 };
enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };
enum class Variant : std::uint8_t { kIdeal = 0, kStochastic = 1 };

struct ScenarioSpec {
    int grid_h = 11;
    int grid_w = 10;
    // pattern mix weights: none | soft_story | cluster | scattered
    double mix_none = 0.05;
    double mix_soft_story = 0.15;
    double mix_cluster = 0.15;
    double mix_scattered = 0.65;
    double damage_fraction = 0.42;  // dataset-level node target
    int channels = 8;
    double noise_sigma = 0.3;
    double stochastic_sigma = 0.15;  // per-observation scale jitter, stochastic variant only
    std::uint64_t seed = 1;

    void validate() const;
};

struct Observation {
    FeatureGrid features;  // [C,H,W]
    DamageMask mask;
};

struct Dataset {
    ScenarioSpec spec;
    std::vector<double> signature;            // d_c, drawn once per dataset
    std::vector<Observation> observations;    // ideal variant
    std::vector<Split> splits;                // per observation
    std::vector<FeatureGrid> stochastic_test; // stochastic variant of the test
                                              // observations, ascending index order

    std::vector<int> indices(Split s) const;
    /// Realized node-level damage fraction over all observations.
    double damage_fraction() const;
    bool operator==(const Dataset& o) const;
};

/// Deterministic per-channel background field (no RNG involved).
double base_field_value(int c, int y, int x, int grid_h, int grid_w);

/// Light smoothing pass used on the damage signature: a convex blend of the
/// mask with its 3x3 mean filter, out = (1-w)*m + w*mean3x3(m).
std::vector<double> smooth_mask(const DamageMask& mask, double blend_weight);
inline constexpr double kSignatureBlend = 0.1;

/// Samples one mask. The pattern is drawn from the spec's mix; the scattered
/// pattern uses `scatter_rate` (callers steering the dataset-level fraction
/// pass an adapted rate; spec.damage_fraction is the natural base value).
DamageMask gen_mask(const ScenarioSpec& spec, StreamRng& rng, double scatter_rate);
DamageMask gen_mask(const ScenarioSpec& spec, StreamRng& rng);

/// Features for one observation. Streams are keyed by (seed, purpose, index),
/// so the two variants share noise draws and differ only by the scale factor.
FeatureGrid gen_features(const DamageMask& mask, const ScenarioSpec& spec,
                         const std::vector<double>& signature, Variant variant,
                         std::uint64_t obs_index);

/// Generates n observations plus the stochastic test variant and assigns
/// 0.8/0.1/0.1 splits (seeded shuffle, contiguous cut).
Dataset gen_dataset(int n_obs, const ScenarioSpec& spec);

struct SplitSizes {
    int train, val, test;
};
SplitSizes split_sizes(int n_obs);

/// Writes <base>.sdsb, <base>_stochastic.sdsb, <base>.split, <base>.manifest.
void save_dataset(const Dataset& ds, const std::string& base_path);
Dataset load_dataset(const std::string& base_path);

/// Node-level class counts over the masks of the given split.
struct ClassCounts {
    std::int64_t nd = 0;
    std::int64_t d = 0;
    std::int64_t total() const { return nd + d; }
    double freq_nd() const { return static_cast<double>(nd) / static_cast<double>(total()); }
    double freq_d() const { return static_cast<double>(d) / static_cast<double>(total()); }
};
ClassCounts count_classes(const Dataset& ds, Split split);
ClassCounts count_classes(const std::vector<DamageMask>& masks);

}  // namespace sdseg
