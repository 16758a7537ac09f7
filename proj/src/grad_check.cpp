#include "sdseg/grad_check.hpp"

#include <cmath>

#include "sdseg/layers.hpp"
#include "sdseg/rng.hpp"
#include "sdseg/unet.hpp"

namespace sdseg {

std::vector<Tensor> numeric_gradients(const ScalarFn& f, std::vector<Tensor> xs, double eps) {
    std::vector<Tensor> grads;
    grads.reserve(xs.size());
    for (std::size_t t = 0; t < xs.size(); ++t) {
        Tensor g(xs[t].shape());
        for (std::int64_t i = 0; i < xs[t].size(); ++i) {
            const double keep = xs[t][i];
            xs[t][i] = keep + eps;
            const double fp = f(xs);
            xs[t][i] = keep - eps;
            const double fm = f(xs);
            xs[t][i] = keep;
            g[i] = (fp - fm) / (2.0 * eps);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

double grad_check(const ScalarFn& f, const std::vector<Tensor>& xs,
                  const std::vector<Tensor>& analytic, double eps) {
    const std::vector<Tensor> numeric = numeric_gradients(f, xs, eps);
    double worst = 0.0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        for (std::int64_t i = 0; i < numeric[t].size(); ++i) {
            const double a = analytic[t][i];
            const double n = numeric[t][i];
            const double rel = std::fabs(a - n) / std::max(1e-6, std::fabs(a) + std::fabs(n));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

namespace {

Tensor random_tensor(std::vector<int> shape, StreamRng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

// keeps values away from the relu/maxpool kinks
Tensor random_tensor_nudged(std::vector<int> shape, StreamRng& rng, double min_abs = 0.05) {
    Tensor t = random_tensor(std::move(shape), rng);
    for (std::int64_t i = 0; i < t.size(); ++i)
        if (std::fabs(t[i]) < min_abs) t[i] = t[i] < 0.0 ? -min_abs : min_abs;
    return t;
}

double project(const Tensor& out, const Tensor& cotangent) {
    double s = 0.0;
    for (std::int64_t i = 0; i < out.size(); ++i) s += out[i] * cotangent[i];
    return s;
}

double check_conv(std::uint64_t seed, int k, double eps) {
    StreamRng rng(seed);
    const Tensor x = random_tensor({2, 6, 6}, rng);
    const Tensor kernel = random_tensor({4, 2, k, k}, rng);
    const Tensor bias = random_tensor({4}, rng);
    const Tensor cot = random_tensor({4, 6, 6}, rng);
    auto f = [&](const std::vector<Tensor>& v) { return project(conv2d(v[0], v[1], v[2]), cot); };
    ConvGrad g = conv2d_backward(x, kernel, cot);
    return grad_check(f, {x, kernel, bias}, {g.d_input, g.d_kernel, g.d_bias}, eps);
}

double check_tconv(std::uint64_t seed) {
    StreamRng rng(seed);
    const Tensor x = random_tensor({2, 3, 3}, rng);
    const Tensor kernel = random_tensor({3, 2, 3, 3}, rng);
    const Tensor bias = random_tensor({3}, rng);
    const Tensor cot = random_tensor({3, 6, 6}, rng);
    auto f = [&](const std::vector<Tensor>& v) { return project(tconv2d(v[0], v[1], v[2]), cot); };
    ConvGrad g = tconv2d_backward(x, kernel, cot);
    return grad_check(f, {x, kernel, bias}, {g.d_input, g.d_kernel, g.d_bias});
}

double check_maxpool(std::uint64_t seed) {
    StreamRng rng(seed);
    const Tensor x = random_tensor({3, 4, 4}, rng);
    const Tensor cot = random_tensor({3, 2, 2}, rng);
    auto f = [&](const std::vector<Tensor>& v) { return project(maxpool2(v[0]).output, cot); };
    MaxPoolResult fwd = maxpool2(x);
    const Tensor d = maxpool2_backward(fwd, x.shape(), cot);
    return grad_check(f, {x}, {d});
}

double check_batchnorm(std::uint64_t seed) {
    StreamRng rng(seed);
    const Tensor x = random_tensor({4, 2, 2, 2}, rng);
    const Tensor gamma = random_tensor({2}, rng, 0.5, 1.5);
    const Tensor beta = random_tensor({2}, rng);
    const Tensor cot = random_tensor({4, 2, 2, 2}, rng);
    auto f = [&](const std::vector<Tensor>& v) {
        BatchNormState st(2);
        return project(batchnorm(v[0], v[1], v[2], st, BnMode::kTrain), cot);
    };
    BatchNormState st(2);
    BatchNormCache cache;
    batchnorm(x, gamma, beta, st, BnMode::kTrain, false, &cache);
    BatchNormGrad g = batchnorm_backward(x, gamma, cache, cot);
    return grad_check(f, {x, gamma, beta}, {g.d_input, g.d_gamma, g.d_beta});
}

double check_relu(std::uint64_t seed) {
    StreamRng rng(seed);
    const Tensor x = random_tensor_nudged({2, 4, 4}, rng);
    const Tensor cot = random_tensor({2, 4, 4}, rng);
    auto f = [&](const std::vector<Tensor>& v) { return project(relu(v[0]), cot); };
    return grad_check(f, {x}, {relu_backward(x, cot)});
}

double check_softmax(std::uint64_t seed) {
    StreamRng rng(seed);
    const Tensor z = random_tensor({2, 4, 4}, rng, -2.0, 2.0);
    const Tensor cot = random_tensor({2, 4, 4}, rng);
    auto f = [&](const std::vector<Tensor>& v) { return project(softmax2(v[0]), cot); };
    const Tensor p = softmax2(z);
    return grad_check(f, {z}, {softmax2_backward(p, cot)});
}

double check_dropout(std::uint64_t seed) {
    StreamRng rng(seed);
    const double p = 0.3;
    const Tensor x = random_tensor({2, 4, 4}, rng);
    const Tensor cot = random_tensor({2, 4, 4}, rng);
    StreamRng mask_rng(seed ^ 0x5eedULL);
    const std::vector<std::uint8_t> mask = dropout(x, p, mask_rng).mask;
    auto f = [&](const std::vector<Tensor>& v) { return project(dropout_apply(v[0], p, mask), cot); };
    return grad_check(f, {x}, {dropout_backward(mask, p, cot)});
}

double check_weighted_ce(std::uint64_t seed) {
    StreamRng rng(seed);
    const Tensor z = random_tensor({2, 4, 4}, rng, -1.5, 1.5);
    const Tensor probs = softmax2(z);
    DamageMask truth(4, 4);
    for (auto& v : truth.labels) v = rng.bernoulli(0.45) ? 1 : 0;
    const std::pair<double, double> w{0.8621, 1.1905};
    auto f = [&](const std::vector<Tensor>& v) {
        return weighted_ce(v[0], std::vector<DamageMask>{truth}, w);
    };
    return grad_check(f, {probs}, {weighted_ce_backward(probs, {truth}, w)});
}

}  // namespace

std::vector<LayerCheckRow> gradcheck_layers(std::uint64_t seed, int rounds) {
    struct Def {
        const char* name;
        double tol;
        double (*fn)(std::uint64_t);
    };
    // the 1x1 conv is exactly linear: a wide step has no truncation error and
    // drowns the float cancellation that a 1e-5 step would leave behind
    const auto conv3 = [](std::uint64_t s) { return check_conv(s, 3, 1e-5); };
    const auto conv1 = [](std::uint64_t s) { return check_conv(s, 1, 1e-2); };
    const std::vector<Def> defs = {
        {"conv2d 3x3", 1e-4, +conv3},
        {"conv2d 1x1", 1e-7, +conv1},
        {"tconv2d", 1e-4, check_tconv},
        {"maxpool2", 1e-4, check_maxpool},
        {"batchnorm", 1e-4, check_batchnorm},
        {"relu", 1e-4, check_relu},
        {"softmax2", 1e-4, check_softmax},
        {"dropout", 1e-4, check_dropout},
        {"weighted_ce", 1e-4, check_weighted_ce},
    };
    std::vector<LayerCheckRow> rows;
    for (const auto& d : defs) {
        double worst = 0.0;
        for (int r = 0; r < rounds; ++r)
            worst = std::max(worst, d.fn(mix64(seed ^ (0x1000ULL + static_cast<std::uint64_t>(r)))));
        rows.push_back({d.name, worst, d.tol, worst < d.tol});
    }
    return rows;
}

double gradcheck_end_to_end(std::uint64_t seed) {
    ArchConfig arch;
    arch.in_channels = 3;
    arch.grid_h = 8;
    arch.grid_w = 8;
    arch.depth = 2;
    arch.base_filters = 4;
    arch.dlc = 2;
    arch.p_do = 0.2;
    UNetModel model = build_unet(arch, seed);

    StreamRng rng(mix64(seed ^ 0xe2eULL));
    Tensor input({2, 3, 8, 8});
    for (std::int64_t i = 0; i < input.size(); ++i) input[i] = rng.uniform(-1.0, 1.0);
    std::vector<DamageMask> truth(2, DamageMask(8, 8));
    for (auto& m : truth)
        for (auto& v : m.labels) v = rng.bernoulli(0.42) ? 1 : 0;
    const std::pair<double, double> w{0.8621, 1.1905};

    // freeze the dropout masks so the loss is deterministic under perturbation
    std::vector<std::vector<std::uint8_t>> masks;
    {
        StreamRng mask_rng(mix64(seed ^ 0xd0));
        std::int64_t n = input.size();
        masks.emplace_back();
        for (std::int64_t i = 0; i < n; ++i) masks.back().push_back(mask_rng.bernoulli(arch.p_do) ? 0 : 1);
        // second dropout layer sits after the first pooling: [2, 4, 4, 4]
        n = 2LL * 4 * 4 * 4;
        masks.emplace_back();
        for (std::int64_t i = 0; i < n; ++i) masks.back().push_back(mask_rng.bernoulli(arch.p_do) ? 0 : 1);
    }

    auto loss_for = [&](const UNetModel& m) {
        UNetForwardOptions opts;
        opts.dropout_active = true;
        opts.bn_mode = BnMode::kTrain;
        opts.frozen_masks = &masks;
        const Tensor probs = unet_forward(m, input, opts);
        return weighted_ce(probs, truth, w);
    };

    // analytic gradients
    UNetCache cache;
    UNetForwardOptions opts;
    opts.dropout_active = true;
    opts.bn_mode = BnMode::kTrain;
    opts.frozen_masks = &masks;
    opts.cache = &cache;
    const Tensor probs = unet_forward(model, input, opts);
    const Tensor d_probs = weighted_ce_backward(probs, truth, w);
    const std::vector<Tensor> analytic = unet_backward(model, cache, d_probs);

    // numeric, parameter by parameter
    double worst = 0.0;
    const double eps = 1e-5;
    for (std::size_t t = 0; t < model.params.size(); ++t) {
        Tensor& value = model.params[t].value;
        for (std::int64_t i = 0; i < value.size(); ++i) {
            const double keep = value[i];
            value[i] = keep + eps;
            const double fp = loss_for(model);
            value[i] = keep - eps;
            const double fm = loss_for(model);
            value[i] = keep;
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[t][i];
            const double rel =
                std::fabs(a - numeric) / std::max(1e-6, std::fabs(a) + std::fabs(numeric));
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace sdseg
