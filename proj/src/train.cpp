#include "sdseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "sdseg/layers.hpp"
#include "sdseg/parallel.hpp"

namespace sdseg {

const char* weight_mode_name(WeightMode m) { return m == WeightMode::kUW ? "UW" : "MFW"; }

WeightMode weight_mode_from(const std::string& name) {
    if (name == "UW" || name == "uw") return WeightMode::kUW;
    if (name == "MFW" || name == "mfw") return WeightMode::kMFW;
    throw DataError("unknown weight mode: " + name);
}

void TrainConfig::validate() const {
    if (lr0 <= 0.0) throw DataError("train: lr0 must be > 0");
    if (lr_decay <= 0.0 || lr_decay > 1.0) throw DataError("train: lr_decay must be in (0, 1]");
    if (l2 < 0.0) throw DataError("train: l2 must be >= 0");
    if (batch < 1) throw DataError("train: batch must be >= 1");
    if (max_epochs < 1) throw DataError("train: max_epochs must be >= 1");
    if (patience < 0 || patience > max_epochs)
        throw DataError("train: patience must be in [0, max_epochs]");
    if (n_val_samples < 1) throw DataError("train: n_val_samples must be >= 1");
}

std::pair<double, double> class_weights(const ClassCounts& counts, WeightMode mode) {
    if (mode == WeightMode::kUW) return {1.0, 1.0};
    if (counts.nd == 0 || counts.d == 0)
        throw DataError("MFW weights need both classes present in the labels");
    // two classes: the median frequency is (f_nd + f_d)/2 = 0.5
    return {0.5 / counts.freq_nd(), 0.5 / counts.freq_d()};
}

std::pair<double, double> class_weights(const std::vector<DamageMask>& labels, WeightMode mode) {
    return class_weights(count_classes(labels), mode);
}

double lr_at(const TrainConfig& cfg, int epoch) {
    return cfg.lr0 * std::pow(cfg.lr_decay, epoch);
}

double l2_penalty(const UNetModel& model, double l2) {
    if (l2 == 0.0) return 0.0;
    double acc = 0.0;
    for (const auto& p : model.params) {
        if (!p.is_kernel) continue;
        for (std::int64_t i = 0; i < p.value.size(); ++i) acc += p.value[i] * p.value[i];
    }
    return l2 * acc;
}

namespace {

// batch tensor [N,C,H,W] and masks for the given observations
Tensor stack_features(const std::vector<const Observation*>& obs) {
    const Tensor& first = obs.front()->features;
    Tensor out({static_cast<int>(obs.size()), first.dim(0), first.dim(1), first.dim(2)});
    const std::int64_t per = first.size();
    for (std::size_t i = 0; i < obs.size(); ++i)
        std::copy_n(obs[i]->features.data(), per, out.data() + static_cast<std::int64_t>(i) * per);
    return out;
}

std::vector<DamageMask> stack_masks(const std::vector<const Observation*>& obs) {
    std::vector<DamageMask> out;
    out.reserve(obs.size());
    for (const auto* o : obs) out.push_back(o->mask);
    return out;
}

}  // namespace

double total_loss(const UNetModel& model, const std::vector<const Observation*>& batch,
                  std::pair<double, double> weights, double l2) {
    if (batch.empty()) throw DataError("total_loss: empty batch");
    const Tensor input = stack_features(batch);
    const Tensor probs = unet_forward(model, input, {});
    return weighted_ce(probs, stack_masks(batch), weights) + l2_penalty(model, l2);
}

NadamState::NadamState(const UNetModel& model) {
    m.reserve(model.params.size());
    v.reserve(model.params.size());
    for (const auto& p : model.params) {
        m.push_back(Tensor::zeros(p.value.shape()));
        v.push_back(Tensor::zeros(p.value.shape()));
    }
}

void nadam_step(std::vector<ParamTensor>& params, const std::vector<Tensor>& grads,
                NadamState& state, double lr, double beta1, double beta2, double eps) {
    if (grads.size() != params.size() || state.m.size() != params.size())
        throw ShapeError("nadam_step: parameter/gradient/state size mismatch");
    ++state.t;
    const double m_corr = 1.0 / (1.0 - std::pow(beta1, static_cast<double>(state.t)));
    const double v_corr = 1.0 / (1.0 - std::pow(beta2, static_cast<double>(state.t)));
    for (std::size_t p = 0; p < params.size(); ++p) {
        double* theta = params[p].value.data();
        const double* g = grads[p].data();
        double* m = state.m[p].data();
        double* v = state.v[p].data();
        const std::int64_t n = params[p].value.size();
        for (std::int64_t i = 0; i < n; ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double lookahead = beta1 * m[i] * m_corr + (1.0 - beta1) * g[i];
            theta[i] -= lr * lookahead / (std::sqrt(v[i] * v_corr) + eps);
        }
    }
}

double bayes_val_loss(const UNetModel& model, const std::vector<const Observation*>& val_set,
                      std::pair<double, double> weights, int n_val_samples, std::uint64_t seed,
                      std::int64_t epoch) {
    if (val_set.empty()) throw DataError("bayes_val_loss: empty validation set");
    if (n_val_samples < 1) throw DataError("bayes_val_loss: n_val_samples must be >= 1");

    const Tensor input = stack_features(val_set);
    const std::vector<DamageMask> masks = stack_masks(val_set);
    double acc = 0.0;
    for (int s = 0; s < n_val_samples; ++s) {
        std::vector<StreamRng> rngs;
        rngs.reserve(val_set.size());
        for (std::size_t o = 0; o < val_set.size(); ++o)
            rngs.push_back(StreamRng::from_path(
                seed, {stream::kValDropout, static_cast<std::uint64_t>(epoch),
                       static_cast<std::uint64_t>(o), static_cast<std::uint64_t>(s)}));
        UNetForwardOptions opts;
        opts.dropout_active = true;
        opts.bn_mode = BnMode::kInfer;
        opts.per_sample_rngs = &rngs;
        const Tensor probs = unet_forward(model, input, opts);
        acc += weighted_ce(probs, masks, weights);
    }
    return acc / static_cast<double>(n_val_samples);
}

TrainResult train(const UNetModel& initial, const Dataset& ds, const TrainConfig& cfg) {
    cfg.validate();
    const std::vector<int> train_idx = ds.indices(Split::kTrain);
    const std::vector<int> val_idx = ds.indices(Split::kVal);
    if (train_idx.empty()) throw DataError("train: empty training split");
    if (val_idx.empty()) throw DataError("train: empty validation split");

    UNetModel model = initial;
    const ClassCounts counts = count_classes(ds, Split::kTrain);
    const std::pair<double, double> weights = class_weights(counts, cfg.weight_mode);

    std::vector<const Observation*> val_view;
    for (int i : val_idx) val_view.push_back(&ds.observations[static_cast<std::size_t>(i)]);

    NadamState opt(model);
    TrainResult result;
    result.history.best_epoch = -1;
    result.history.best_val_loss = std::numeric_limits<double>::infinity();
    int since_improve = 0;

    std::vector<int> order = train_idx;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr = lr_at(cfg, epoch);

        StreamRng shuffle = StreamRng::from_path(
            cfg.seed, {stream::kTrainShuffle, static_cast<std::uint64_t>(epoch)});
        for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle.below(static_cast<std::uint64_t>(i + 1)));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }

        double loss_acc = 0.0;
        int steps = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
            std::vector<const Observation*> batch;
            batch.reserve(end - start);
            for (std::size_t k = start; k < end; ++k)
                batch.push_back(&ds.observations[static_cast<std::size_t>(order[k])]);

            const Tensor input = stack_features(batch);
            const std::vector<DamageMask> masks = stack_masks(batch);

            std::vector<StreamRng> rngs;
            rngs.reserve(batch.size());
            for (std::size_t slot = 0; slot < batch.size(); ++slot)
                rngs.push_back(StreamRng::from_path(
                    cfg.seed, {stream::kTrainDropout, static_cast<std::uint64_t>(epoch),
                               static_cast<std::uint64_t>(steps), static_cast<std::uint64_t>(slot)}));

            UNetCache cache;
            UNetForwardOptions opts;
            opts.dropout_active = true;
            opts.bn_mode = BnMode::kTrain;
            opts.per_sample_rngs = &rngs;
            opts.cache = &cache;
            const Tensor probs = unet_forward(model, input, opts);
            const double ce = weighted_ce(probs, masks, weights);
            const double loss = ce + l2_penalty(model, cfg.l2);
            if (!std::isfinite(loss))
                throw DivergenceError("non-finite training loss at epoch " +
                                      std::to_string(epoch) + ", batch " + std::to_string(steps));
            loss_acc += loss;
            ++steps;

            const Tensor d_probs = weighted_ce_backward(probs, masks, weights);
            std::vector<Tensor> grads = unet_backward(model, cache, d_probs);
            if (cfg.l2 > 0.0) {
                for (std::size_t p = 0; p < model.params.size(); ++p) {
                    if (!model.params[p].is_kernel) continue;
                    const double* theta = model.params[p].value.data();
                    double* g = grads[p].data();
                    const std::int64_t n = grads[p].size();
                    for (std::int64_t i = 0; i < n; ++i) g[i] += 2.0 * cfg.l2 * theta[i];
                }
            }
            nadam_step(model.params, grads, opt, lr, cfg.beta1, cfg.beta2, cfg.eps);
            apply_bn_update(model, cache);
        }

        const double val_loss =
            bayes_val_loss(model, val_view, weights, cfg.n_val_samples, cfg.seed, epoch);
        result.history.epochs.push_back(
            {epoch, loss_acc / std::max(1, steps), val_loss, lr});

        if (val_loss < result.history.best_val_loss - 1e-9) {
            result.history.best_val_loss = val_loss;
            result.history.best_epoch = epoch;
            result.best.model = model;
            result.best.epoch = epoch;
            since_improve = 0;
        } else {
            ++since_improve;
            if (since_improve >= std::max(cfg.patience, 1)) break;
        }
    }

    result.best.train_seed = cfg.seed;
    result.best.data_seed = ds.spec.seed;
    result.best.prior_nd = counts.freq_nd();
    result.best.prior_d = counts.freq_d();
    return result;
}

void write_history_csv(const TrainHistory& history, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write history csv: " + path);
    os << "epoch,train_loss,val_loss,lr\n";
    char buf[160];
    for (const auto& row : history.epochs) {
        std::snprintf(buf, sizeof(buf), "%d,%.12g,%.12g,%.12g\n", row.epoch, row.train_loss,
                      row.val_loss, row.lr);
        os << buf;
    }
}

}  // namespace sdseg
