#include <cmath>

#include "doctest.h"
#include "sdseg/layers.hpp"
#include "sdseg/train.hpp"

using namespace sdseg;

namespace {

// small, easy dataset for smoke training
Dataset easy_dataset(int n = 60, std::uint64_t seed = 1, double noise = 0.15) {
    ScenarioSpec s;
    s.grid_h = 8;
    s.grid_w = 8;
    s.channels = 4;
    s.noise_sigma = noise;
    s.seed = seed;
    return gen_dataset(n, s);
}

ArchConfig tiny_arch(const Dataset& ds, double p_do = 0.2) {
    ArchConfig a;
    a.in_channels = ds.spec.channels;
    a.grid_h = ds.spec.grid_h;
    a.grid_w = ds.spec.grid_w;
    a.depth = 2;
    a.base_filters = 8;
    a.dlc = 2;
    a.p_do = p_do;
    return a;
}

}  // namespace

TEST_CASE("class weights: uniform and median-frequency") {
    ClassCounts c;
    c.nd = 58;
    c.d = 42;
    SUBCASE("UW is always (1,1)") {
        const auto [wn, wd] = class_weights(c, WeightMode::kUW);
        CHECK(wn == 1.0);
        CHECK(wd == 1.0);
    }
    SUBCASE("MFW matches the worked 58/42 case") {
        const auto [wn, wd] = class_weights(c, WeightMode::kMFW);
        CHECK(wn == doctest::Approx(0.8621).epsilon(1e-4));
        CHECK(wd == doctest::Approx(1.1905).epsilon(1e-4));
        // exact rational identity: w_d/w_nd == f_nd/f_d == 58/42
        CHECK(wd / wn == doctest::Approx(58.0 / 42.0).epsilon(1e-12));
    }
    SUBCASE("balanced classes give unit weights") {
        ClassCounts b;
        b.nd = 500;
        b.d = 500;
        const auto [wn, wd] = class_weights(b, WeightMode::kMFW);
        CHECK(wn == doctest::Approx(1.0));
        CHECK(wd == doctest::Approx(1.0));
    }
    SUBCASE("missing class rejects MFW") {
        ClassCounts bad;
        bad.nd = 10;
        CHECK_THROWS_AS(class_weights(bad, WeightMode::kMFW), DataError);
    }
}

TEST_CASE("learning-rate schedule decays exponentially per epoch") {
    TrainConfig cfg;
    CHECK(lr_at(cfg, 0) == doctest::Approx(1e-4));
    CHECK(lr_at(cfg, 1) == doctest::Approx(9.996e-5));
    CHECK(lr_at(cfg, 1000) == doctest::Approx(1e-4 * std::exp(1000.0 * std::log(0.9996))));
    CHECK(lr_at(cfg, 1000) == doctest::Approx(6.703e-5).epsilon(1e-3));
}

TEST_CASE("nadam step: zero gradient leaves parameters unchanged") {
    ArchConfig a;
    a.in_channels = 1;
    a.grid_h = 8;
    a.grid_w = 8;
    a.depth = 2;
    a.base_filters = 4;
    a.dlc = 1;
    UNetModel model = build_unet(a, 3);
    const std::vector<double> before = model.params[0].value.values();
    NadamState st(model);
    std::vector<Tensor> zero_grads;
    for (const auto& p : model.params) zero_grads.push_back(Tensor::zeros(p.value.shape()));
    nadam_step(model.params, zero_grads, st, 0.1);
    CHECK(model.params[0].value.values() == before);
}

TEST_CASE("nadam first step on a scalar matches the hand evaluation") {
    UNetModel fake;
    fake.params.push_back({"theta", Tensor::zeros({1}), false});
    NadamState st;
    st.m.push_back(Tensor::zeros({1}));
    st.v.push_back(Tensor::zeros({1}));
    Tensor g({1});
    g[0] = 1.0;
    nadam_step(fake.params, {g}, st, 0.1);
    // -0.1 * (0.9*1 + 0.1*1) / (1 + 1e-7)
    CHECK(fake.params[0].value[0] == doctest::Approx(-0.0999999).epsilon(1e-6));
}

TEST_CASE("nadam drives a quadratic to its minimum") {
    UNetModel fake;
    Tensor theta({1});
    theta[0] = 1.0;
    fake.params.push_back({"theta", theta, false});
    NadamState st;
    st.m.push_back(Tensor::zeros({1}));
    st.v.push_back(Tensor::zeros({1}));
    for (int step = 0; step < 500; ++step) {
        Tensor g({1});
        g[0] = 2.0 * fake.params[0].value[0];  // d/dtheta theta^2
        nadam_step(fake.params, {g}, st, 0.05);
    }
    CHECK(std::fabs(fake.params[0].value[0]) < 1e-3);
}

TEST_CASE("total loss reduces to the CE term when l2 is zero") {
    const Dataset ds = easy_dataset(20, 5);
    const ArchConfig a = tiny_arch(ds);
    const UNetModel model = build_unet(a, 7);
    std::vector<const Observation*> batch;
    for (int i = 0; i < 10; ++i) batch.push_back(&ds.observations[static_cast<std::size_t>(i)]);

    const double no_l2 = total_loss(model, batch, {1.0, 1.0}, 0.0);
    const Tensor input = [&] {
        Tensor t({10, a.in_channels, a.grid_h, a.grid_w});
        for (int i = 0; i < 10; ++i)
            std::copy_n(batch[static_cast<std::size_t>(i)]->features.data(),
                        batch[static_cast<std::size_t>(i)]->features.size(),
                        t.data() + static_cast<std::int64_t>(i) *
                                       batch[static_cast<std::size_t>(i)]->features.size());
        return t;
    }();
    std::vector<DamageMask> masks;
    for (const auto* o : batch) masks.push_back(o->mask);
    const double ce = weighted_ce(unet_forward(model, input, {}), masks, {1.0, 1.0});
    CHECK(no_l2 == doctest::Approx(ce).epsilon(1e-12));

    SUBCASE("l2 adds the kernel penalty") {
        const double with_l2 = total_loss(model, batch, {1.0, 1.0}, 1e-6);
        CHECK(with_l2 == doctest::Approx(no_l2 + l2_penalty(model, 1e-6)));
        CHECK(l2_penalty(model, 1e-6) > 0.0);
    }
}

TEST_CASE("zeroed model has zero penalty; a lone kernel weight of 2 gives 4e-6") {
    const Dataset ds = easy_dataset(20, 9);
    ArchConfig a = tiny_arch(ds, 0.0);
    UNetModel model = build_unet(a, 11);
    for (auto& p : model.params)
        for (std::int64_t i = 0; i < p.value.size(); ++i) p.value[i] = 0.0;
    CHECK(l2_penalty(model, 1e-6) == 0.0);

    // one hidden kernel weight of 2.0 cannot reach the logits through the
    // all-zero downstream kernels, so the prediction stays at the head bias
    for (auto& p : model.params) {
        if (p.name == "enc1.conv.kernel") p.value[0] = 2.0;
        if (p.name == "head.conv.bias") {
            p.value[0] = 50.0;  // ND logit pinned high -> P(ND) ~ 1
            p.value[1] = -50.0;
        }
    }
    // truth all-ND matches the constant ND prediction: CE ~ 0
    std::vector<const Observation*> batch;
    Observation all_nd;
    all_nd.features = ds.observations[0].features;
    all_nd.mask = DamageMask(a.grid_h, a.grid_w);
    batch.push_back(&all_nd);
    CHECK(total_loss(model, batch, {1.0, 1.0}, 1e-6) == doctest::Approx(4e-6).epsilon(1e-9));
}

TEST_CASE("bayesian validation loss: p_do 0 equals the deterministic CE") {
    const Dataset ds = easy_dataset(30, 13);
    const ArchConfig a = tiny_arch(ds, 0.0);
    const UNetModel model = build_unet(a, 15);
    std::vector<const Observation*> val;
    for (int i : ds.indices(Split::kVal)) val.push_back(&ds.observations[static_cast<std::size_t>(i)]);
    REQUIRE(!val.empty());
    const double v1 = bayes_val_loss(model, val, {1.0, 1.0}, 1, 99, 0);
    const double v50 = bayes_val_loss(model, val, {1.0, 1.0}, 50, 99, 0);
    const double deterministic = total_loss(model, val, {1.0, 1.0}, 0.0);
    CHECK(v1 == doctest::Approx(deterministic).epsilon(1e-12));
    CHECK(v50 == doctest::Approx(deterministic).epsilon(1e-12));
}

TEST_CASE("bayesian validation loss: more samples, lower spread") {
    const Dataset ds = easy_dataset(30, 17);
    const ArchConfig a = tiny_arch(ds, 0.5);
    const UNetModel model = build_unet(a, 19);
    std::vector<const Observation*> val;
    for (int i : ds.indices(Split::kVal)) val.push_back(&ds.observations[static_cast<std::size_t>(i)]);

    auto spread = [&](int n_samples) {
        double mn = 1e300, mx = -1e300;
        for (int rep = 0; rep < 10; ++rep) {
            const double v = bayes_val_loss(model, val, {1.0, 1.0}, n_samples,
                                            1000 + static_cast<std::uint64_t>(rep), 0);
            mn = std::min(mn, v);
            mx = std::max(mx, v);
        }
        return mx - mn;
    };
    CHECK(spread(50) < spread(1));
}

TEST_CASE("training runs deterministically and stops early") {
    const Dataset ds = easy_dataset(60, 21);
    const ArchConfig a = tiny_arch(ds, 0.2);
    const UNetModel init = build_unet(a, 23);

    TrainConfig cfg;
    cfg.lr0 = 2e-3;
    cfg.batch = 16;
    cfg.max_epochs = 8;
    cfg.patience = 8;
    cfg.n_val_samples = 2;
    cfg.seed = 31;

    const TrainResult r1 = train(init, ds, cfg);
    const TrainResult r2 = train(init, ds, cfg);
    CHECK(r1.history.epochs.size() == r2.history.epochs.size());
    CHECK(r1.history.best_epoch == r2.history.best_epoch);
    for (std::size_t i = 0; i < r1.history.epochs.size(); ++i) {
        CHECK(r1.history.epochs[i].train_loss == r2.history.epochs[i].train_loss);
        CHECK(r1.history.epochs[i].val_loss == r2.history.epochs[i].val_loss);
    }
    for (std::size_t p = 0; p < r1.best.model.params.size(); ++p)
        CHECK(r1.best.model.params[p].value.values() == r2.best.model.params[p].value.values());

    // the best epoch attains the minimum recorded validation loss
    double min_val = 1e300;
    for (const auto& row : r1.history.epochs) min_val = std::min(min_val, row.val_loss);
    CHECK(r1.history.best_val_loss == doctest::Approx(min_val));
    CHECK(r1.history.epochs[static_cast<std::size_t>(r1.history.best_epoch)].val_loss ==
          doctest::Approx(r1.history.best_val_loss));

    // priors recorded from the training split
    CHECK(r1.best.prior_nd + r1.best.prior_d == doctest::Approx(1.0));

    SUBCASE("max_epochs 1 produces exactly one history row") {
        TrainConfig one = cfg;
        one.max_epochs = 1;
        one.patience = 1;
        const TrainResult r = train(init, ds, one);
        CHECK(r.history.epochs.size() == 1);
    }
    SUBCASE("patience 0 stops at the first non-improving epoch") {
        TrainConfig p0 = cfg;
        p0.max_epochs = 50;
        p0.patience = 0;
        p0.lr0 = 10.0;  // violent steps so validation soon stops improving
        const TrainResult r = train(init, ds, p0);
        CHECK(r.history.epochs.size() < 50);
        // every epoch before the last improved on its predecessor's best
        const auto& rows = r.history.epochs;
        for (std::size_t i = 0; i + 1 < rows.size(); ++i) {
            double best_before = 1e300;
            for (std::size_t j = 0; j <= i; ++j) best_before = std::min(best_before, rows[j].val_loss);
            if (i + 1 < rows.size() - 1) CHECK(rows[i + 1].val_loss < best_before);
        }
    }
}

TEST_CASE("best checkpoint reproduces its recorded bayesian validation loss") {
    const Dataset ds = easy_dataset(60, 37);
    const ArchConfig a = tiny_arch(ds, 0.3);
    TrainConfig cfg;
    cfg.lr0 = 2e-3;
    cfg.batch = 16;
    cfg.max_epochs = 5;
    cfg.patience = 5;
    cfg.n_val_samples = 3;
    cfg.seed = 41;
    const TrainResult r = train(build_unet(a, 39), ds, cfg);

    std::vector<const Observation*> val;
    for (int i : ds.indices(Split::kVal)) val.push_back(&ds.observations[static_cast<std::size_t>(i)]);
    const ClassCounts counts = count_classes(ds, Split::kTrain);
    const auto weights = class_weights(counts, cfg.weight_mode);
    const double again = bayes_val_loss(r.best.model, val, weights, cfg.n_val_samples, cfg.seed,
                                        r.best.epoch);
    CHECK(again == doctest::Approx(r.history.best_val_loss).epsilon(1e-12));
}

TEST_CASE("training loss decreases on an easy fixed batch") {
    const Dataset ds = easy_dataset(40, 43, 0.05);
    ArchConfig a = tiny_arch(ds, 0.0);
    UNetModel model = build_unet(a, 47);

    std::vector<const Observation*> batch;
    for (int i = 0; i < 16; ++i) batch.push_back(&ds.observations[static_cast<std::size_t>(i)]);
    Tensor input({16, a.in_channels, a.grid_h, a.grid_w});
    for (int i = 0; i < 16; ++i)
        std::copy_n(batch[static_cast<std::size_t>(i)]->features.data(),
                    batch[static_cast<std::size_t>(i)]->features.size(),
                    input.data() + static_cast<std::int64_t>(i) *
                                       batch[static_cast<std::size_t>(i)]->features.size());
    std::vector<DamageMask> masks;
    for (const auto* o : batch) masks.push_back(o->mask);

    NadamState opt(model);
    std::vector<double> losses;
    for (int step = 0; step < 50; ++step) {
        UNetCache cache;
        UNetForwardOptions opts;
        opts.bn_mode = BnMode::kTrain;
        opts.cache = &cache;
        const Tensor probs = unet_forward(model, input, opts);
        losses.push_back(weighted_ce(probs, masks, {1.0, 1.0}));
        const Tensor d = weighted_ce_backward(probs, masks, {1.0, 1.0});
        nadam_step(model.params, unet_backward(model, cache, d), opt, 2e-3);
        apply_bn_update(model, cache);
    }
    int non_monotone = 0;
    for (std::size_t i = 1; i < losses.size(); ++i)
        if (losses[i] >= losses[i - 1]) ++non_monotone;
    CHECK(non_monotone <= 5);
    CHECK(losses.back() < losses.front());
}

TEST_CASE("empty split is rejected") {
    Dataset ds = easy_dataset(20, 51);
    for (auto& s : ds.splits) s = Split::kTrain;  // wipe out the validation split
    TrainConfig cfg;
    CHECK_THROWS_AS(train(build_unet(tiny_arch(ds), 1), ds, cfg), DataError);
}
