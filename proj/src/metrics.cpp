#include "sdseg/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "sdseg/errors.hpp"

namespace sdseg {

void Confusion2::add(const DamageMask& truth, const DamageMask& pred) {
    if (truth.h != pred.h || truth.w != pred.w)
        throw ShapeError("confusion: prediction and truth shapes differ");
    for (std::size_t i = 0; i < truth.labels.size(); ++i)
        ++n[truth.labels[i]][pred.labels[i]];
}

Confusion2& Confusion2::merge(const Confusion2& other) {
    for (int t = 0; t < 2; ++t)
        for (int p = 0; p < 2; ++p) n[t][p] += other.n[t][p];
    return *this;
}

Confusion2 confusion(const DamageMask& truth, const DamageMask& pred) {
    Confusion2 c;
    c.add(truth, pred);
    return c;
}

std::pair<double, double> class_acc(const Confusion2& c) {
    const std::int64_t nd_total = c.n[0][0] + c.n[0][1];
    const std::int64_t d_total = c.n[1][0] + c.n[1][1];
    if (nd_total == 0) throw DataError("class_acc: no ND nodes in the truth");
    if (d_total == 0) throw DataError("class_acc: no D nodes in the truth");
    return {static_cast<double>(c.n[0][0]) / static_cast<double>(nd_total),
            static_cast<double>(c.n[1][1]) / static_cast<double>(d_total)};
}

double mca(const Confusion2& c) {
    const auto [acc_nd, acc_d] = class_acc(c);
    return 0.5 * (acc_nd + acc_d);
}

double ga(const Confusion2& c) {
    const std::int64_t total = c.total();
    if (total == 0) throw DataError("ga: empty confusion");
    return static_cast<double>(c.n[0][0] + c.n[1][1]) / static_cast<double>(total);
}

TrialStats trial_stats(std::string metric, std::vector<double> values) {
    if (values.empty()) throw DataError("trial_stats: need at least one trial");
    TrialStats s;
    s.metric = std::move(metric);
    s.values = std::move(values);
    double acc = 0.0;
    for (double v : s.values) acc += v;
    s.mean = acc / static_cast<double>(s.values.size());
    double var = 0.0;
    for (double v : s.values) var += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(var / static_cast<double>(s.values.size()));
    return s;
}

namespace {
bool rank_before(const SweepResult& a, const SweepResult& b) {
    if (a.mca != b.mca) return a.mca > b.mca;
    if (a.ga != b.ga) return a.ga > b.ga;
    if (a.dlc != b.dlc) return a.dlc < b.dlc;
    if (a.p_do != b.p_do) return a.p_do < b.p_do;
    return a.weight_mode < b.weight_mode;
}
}  // namespace

std::vector<SweepResult> RankedTable::top(int k) const {
    const int n = std::min<int>(k, static_cast<int>(rows.size()));
    return {rows.begin(), rows.begin() + n};
}

std::vector<SweepResult> RankedTable::bottom(int k) const {
    const int n = std::min<int>(k, static_cast<int>(rows.size()));
    return {rows.end() - n, rows.end()};
}

std::vector<RankedTable> sweep_report(const std::vector<SweepResult>& results) {
    std::vector<RankedTable> tables;
    for (const char* rule : {"MAP", "ML"}) {
        RankedTable t;
        t.rule = rule;
        for (const auto& r : results)
            if (r.rule == rule) t.rows.push_back(r);
        std::sort(t.rows.begin(), t.rows.end(), rank_before);
        if (!t.rows.empty()) tables.push_back(std::move(t));
    }
    return tables;
}

}  // namespace sdseg
