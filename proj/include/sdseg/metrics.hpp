#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdseg/tensor.hpp"

namespace sdseg {

/// Node-level 2x2 confusion counts, n[truth][pred] with 0 = ND, 1 = D.
struct Confusion2 {
    std::int64_t n[2][2] = {{0, 0}, {0, 0}};

    void add(const DamageMask& truth, const DamageMask& pred);
    Confusion2& merge(const Confusion2& other);
    std::int64_t total() const { return n[0][0] + n[0][1] + n[1][0] + n[1][1]; }
};

Confusion2 confusion(const DamageMask& truth, const DamageMask& pred);

/// Per-class recalls (acc_ND, acc_D). Throws DataError when a truth class is
/// empty (MCA is undefined there).
std::pair<double, double> class_acc(const Confusion2& c);
double mca(const Confusion2& c);
double ga(const Confusion2& c);

/// Mean and population standard deviation over repeated trials.
struct TrialStats {
    std::string metric;
    std::vector<double> values;
    double mean = 0.0;
    double stddev = 0.0;  // population convention (defined for a single trial)
};
TrialStats trial_stats(std::string metric, std::vector<double> values);

/// One sweep cell evaluated under one decision rule.
struct SweepResult {
    std::string model_id;
    int dlc = 0;
    double p_do = 0.0;
    std::string weight_mode;  // "UW" | "MFW"
    std::string rule;         // "MAP" | "ML"
    double mca = 0.0;         // percent
    double ga = 0.0;
    double acc_d = 0.0;
    double acc_nd = 0.0;
};

/// Rows of one rule ranked by validation MCA (descending; ties by higher GA,
/// then ascending dlc, p_do, weight mode).
struct RankedTable {
    std::string rule;
    std::vector<SweepResult> rows;
    std::vector<SweepResult> top(int k) const;
    std::vector<SweepResult> bottom(int k) const;
};

/// Groups results per decision rule and ranks each group.
std::vector<RankedTable> sweep_report(const std::vector<SweepResult>& results);

}  // namespace sdseg
