#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "sdseg/data.hpp"
#include "sdseg/unet.hpp"

namespace sdseg {

enum class WeightMode : std::uint8_t { kUW = 0, kMFW = 1 };

const char* weight_mode_name(WeightMode m);
WeightMode weight_mode_from(const std::string& name);

struct TrainConfig {
    double lr0 = 1e-4;
    double lr_decay = 0.9996;  // per epoch
    double l2 = 1e-6;
    int batch = 256;
    int max_epochs = 1000;
    int patience = 200;
    WeightMode weight_mode = WeightMode::kUW;
    int n_val_samples = 50;
    std::uint64_t seed = 0;

    // Nadam constants (the optimizer choice is fixed; these are recorded in
    // run manifests for reproducibility)
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-7;

    void validate() const;
};

/// (w_ND, w_D). UW = (1,1); MFW = median class frequency / class frequency,
/// which for two classes is 0.5/f_c. Requires both classes present for MFW.
std::pair<double, double> class_weights(const ClassCounts& counts, WeightMode mode);
std::pair<double, double> class_weights(const std::vector<DamageMask>& labels, WeightMode mode);

/// lr0 * decay^epoch (epoch 0 gives lr0).
double lr_at(const TrainConfig& cfg, int epoch);

/// L2 penalty over kernel weights only: l2 * sum(k^2).
double l2_penalty(const UNetModel& model, double l2);

/// Mean weighted CE of a deterministic forward over the batch plus the L2
/// penalty.
double total_loss(const UNetModel& model, const std::vector<const Observation*>& batch,
                  std::pair<double, double> weights, double l2);

/// First/second moment accumulators for Nadam, one slot per parameter.
struct NadamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::int64_t t = 0;
    explicit NadamState(const UNetModel& model);
    NadamState() = default;
};

/// One Nadam update over all parameters:
///   m <- b1*m + (1-b1)*g,  v <- b2*v + (1-b2)*g^2,
///   theta <- theta - lr * (b1*m/(1-b1^t) + (1-b1)*g) / (sqrt(v/(1-b2^t)) + eps)
void nadam_step(std::vector<ParamTensor>& params, const std::vector<Tensor>& grads,
                NadamState& state, double lr, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-7);

/// Expected weighted CE (no L2) over n_sample dropout-active passes with
/// batch norm frozen. Streams are keyed by (seed, epoch, observation, sample)
/// so the value is reproducible for a stored checkpoint.
double bayes_val_loss(const UNetModel& model, const std::vector<const Observation*>& val_set,
                      std::pair<double, double> weights, int n_val_samples, std::uint64_t seed,
                      std::int64_t epoch);

struct TrainHistory {
    struct EpochRow {
        int epoch;
        double train_loss;  // CE + L2, mean over steps
        double val_loss;    // Bayesian validation CE (L2 excluded)
        double lr;
    };
    std::vector<EpochRow> epochs;
    int best_epoch = -1;
    double best_val_loss = 0.0;
};

struct TrainResult {
    Checkpoint best;
    TrainHistory history;
};

/// Mini-batch training with per-epoch LR decay and Bayesian early stopping:
/// stops once the validation loss has not improved (by more than 1e-9) for
/// `patience` consecutive epochs (patience 0 stops at the first such epoch);
/// returns the checkpoint of the best epoch.
TrainResult train(const UNetModel& initial, const Dataset& ds, const TrainConfig& cfg);

void write_history_csv(const TrainHistory& history, const std::string& path);

}  // namespace sdseg
