#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "sdseg/data.hpp"
#include "sdseg/io_util.hpp"

using namespace sdseg;

namespace {

ScenarioSpec desk_spec(std::uint64_t seed = 1) {
    ScenarioSpec s;
    s.seed = seed;
    return s;
}

std::filesystem::path tmp_base(const char* name) {
    return std::filesystem::temp_directory_path() / name;
}

void remove_dataset_files(const std::string& base) {
    for (const char* suffix : {".sdsb", "_stochastic.sdsb", ".split", ".manifest"})
        std::filesystem::remove(base + suffix);
}

}  // namespace

TEST_CASE("pattern mix of pure none yields all-ND masks") {
    ScenarioSpec s = desk_spec();
    s.mix_none = 1.0;
    s.mix_soft_story = s.mix_cluster = s.mix_scattered = 0.0;
    StreamRng rng(3);
    for (int i = 0; i < 10; ++i) {
        const DamageMask m = gen_mask(s, rng);
        CHECK(m.count_damaged() == 0);
    }
}

TEST_CASE("soft story damages one or two full rows") {
    ScenarioSpec s = desk_spec();
    s.mix_none = s.mix_cluster = s.mix_scattered = 0.0;
    s.mix_soft_story = 1.0;
    StreamRng rng(5);
    for (int i = 0; i < 50; ++i) {
        const DamageMask m = gen_mask(s, rng);
        const std::int64_t d = m.count_damaged();
        CHECK((d == 10 || d == 20));
        // damaged nodes form whole rows
        for (int y = 0; y < s.grid_h; ++y) {
            int row = 0;
            for (int x = 0; x < s.grid_w; ++x) row += m.at(y, x);
            CHECK((row == 0 || row == s.grid_w));
        }
    }
}

TEST_CASE("cluster pattern damages a 4..12 node rectangle") {
    ScenarioSpec s = desk_spec();
    s.mix_none = s.mix_soft_story = s.mix_scattered = 0.0;
    s.mix_cluster = 1.0;
    StreamRng rng(7);
    for (int i = 0; i < 50; ++i) {
        const DamageMask m = gen_mask(s, rng);
        const std::int64_t d = m.count_damaged();
        CHECK(d >= 4);
        CHECK(d <= 12);
    }
}

TEST_CASE("2000-mask dataset lands within two points of the damage target") {
    const Dataset ds = gen_dataset(2000, desk_spec(11));
    CHECK(ds.damage_fraction() >= 0.40);
    CHECK(ds.damage_fraction() <= 0.44);
}

TEST_CASE("noise-free features are deterministic") {
    ScenarioSpec s = desk_spec();
    s.noise_sigma = 0.0;
    const std::vector<double> sig(static_cast<std::size_t>(s.channels), 1.0);
    const DamageMask all_nd(s.grid_h, s.grid_w);
    const FeatureGrid a = gen_features(all_nd, s, sig, Variant::kIdeal, 0);
    const FeatureGrid b = gen_features(all_nd, s, sig, Variant::kIdeal, 0);
    CHECK(a.values() == b.values());
    // all-ND leaves exactly the base field
    for (int c = 0; c < s.channels; ++c)
        CHECK(a.at(c, 3, 4) ==
              doctest::Approx(base_field_value(c, 3, 4, s.grid_h, s.grid_w)).epsilon(1e-6));
}

TEST_CASE("full-row class separation approximates the signature magnitude") {
    ScenarioSpec s = desk_spec();
    s.noise_sigma = 0.0;
    StreamRng sig_rng(17);
    std::vector<double> sig;
    for (int c = 0; c < s.channels; ++c) sig.push_back(sig_rng.uniform(0.5, 1.5));

    DamageMask row_mask(s.grid_h, s.grid_w);
    for (int x = 0; x < s.grid_w; ++x) row_mask.at(5, x) = 1;
    const FeatureGrid f = gen_features(row_mask, s, sig, Variant::kIdeal, 3);

    for (int c = 0; c < s.channels; ++c) {
        double sum_d = 0.0, sum_nd = 0.0;
        int n_d = 0, n_nd = 0;
        for (int y = 0; y < s.grid_h; ++y)
            for (int x = 0; x < s.grid_w; ++x) {
                const double v = f.at(c, y, x) - base_field_value(c, y, x, s.grid_h, s.grid_w);
                if (row_mask.at(y, x)) {
                    sum_d += v;
                    ++n_d;
                } else {
                    sum_nd += v;
                    ++n_nd;
                }
            }
        const double diff = sum_d / n_d - sum_nd / n_nd;
        CHECK(diff / sig[static_cast<std::size_t>(c)] == doctest::Approx(1.0).epsilon(0.1));
    }
}

TEST_CASE("threshold oracle achieves 100% at zero noise on every pattern") {
    ScenarioSpec s = desk_spec(23);
    s.noise_sigma = 0.0;
    const Dataset ds = gen_dataset(200, s);
    for (const auto& obs : ds.observations) {
        for (int y = 0; y < s.grid_h; ++y)
            for (int x = 0; x < s.grid_w; ++x) {
                double score = 0.0;
                for (int c = 0; c < s.channels; ++c)
                    score += (obs.features.at(c, y, x) -
                              base_field_value(c, y, x, s.grid_h, s.grid_w)) /
                             ds.signature[static_cast<std::size_t>(c)];
                score /= s.channels;
                CHECK(static_cast<int>(score > 0.5) == static_cast<int>(obs.mask.at(y, x)));
            }
    }
}

TEST_CASE("stochastic variant collapses to ideal when its sigma is zero") {
    ScenarioSpec s = desk_spec(29);
    s.stochastic_sigma = 0.0;
    const std::vector<double> sig(static_cast<std::size_t>(s.channels), 1.0);
    StreamRng rng(31);
    const DamageMask m = gen_mask(s, rng);
    const FeatureGrid ideal = gen_features(m, s, sig, Variant::kIdeal, 12);
    const FeatureGrid stoch = gen_features(m, s, sig, Variant::kStochastic, 12);
    CHECK(ideal.values() == stoch.values());
}

TEST_CASE("split sizes follow the 0.8/0.1/0.1 rule") {
    CHECK(split_sizes(10).train == 8);
    CHECK(split_sizes(10).val == 1);
    CHECK(split_sizes(10).test == 1);
    CHECK(split_sizes(10800).train == 8640);
    CHECK(split_sizes(10800).val == 1080);
    CHECK(split_sizes(10800).test == 1080);

    const Dataset ds = gen_dataset(10, desk_spec(37));
    CHECK(ds.indices(Split::kTrain).size() == 8);
    CHECK(ds.indices(Split::kVal).size() == 1);
    CHECK(ds.indices(Split::kTest).size() == 1);
}

TEST_CASE("same spec generates byte-identical dataset files") {
    const std::string b1 = tmp_base("sdseg_ds_a").string();
    const std::string b2 = tmp_base("sdseg_ds_b").string();
    save_dataset(gen_dataset(40, desk_spec(41)), b1);
    save_dataset(gen_dataset(40, desk_spec(41)), b2);
    for (const char* suffix : {".sdsb", "_stochastic.sdsb", ".split", ".manifest"})
        CHECK(file_checksum(b1 + suffix) == file_checksum(b2 + suffix));
    remove_dataset_files(b1);
    remove_dataset_files(b2);
}

TEST_CASE("dataset save/load round-trips exactly") {
    const Dataset ds = gen_dataset(30, desk_spec(43));
    const std::string base = tmp_base("sdseg_ds_rt").string();
    save_dataset(ds, base);
    const Dataset back = load_dataset(base);
    CHECK(back == ds);
    remove_dataset_files(base);
}

TEST_CASE("sdsb file size matches the format arithmetic") {
    ScenarioSpec s = desk_spec(47);
    const int n = 20;
    const Dataset ds = gen_dataset(n, s);
    const std::string base = tmp_base("sdseg_ds_size").string();
    save_dataset(ds, base);
    const auto size = std::filesystem::file_size(base + ".sdsb");
    const std::uintmax_t expect =
        24 + static_cast<std::uintmax_t>(n) *
                 (static_cast<std::uintmax_t>(s.channels) * s.grid_h * s.grid_w * 4 +
                  static_cast<std::uintmax_t>(s.grid_h) * s.grid_w);
    CHECK(size == expect);
    remove_dataset_files(base);
}

TEST_CASE("corrupted magic is rejected without returning a partial dataset") {
    const Dataset ds = gen_dataset(12, desk_spec(53));
    const std::string base = tmp_base("sdseg_ds_bad").string();
    save_dataset(ds, base);
    {
        std::fstream f(base + ".sdsb", std::ios::in | std::ios::out | std::ios::binary);
        f.put('Z');
    }
    CHECK_THROWS_AS(load_dataset(base), FormatError);
    remove_dataset_files(base);
}

TEST_CASE("truncated dataset file is rejected") {
    const Dataset ds = gen_dataset(12, desk_spec(59));
    const std::string base = tmp_base("sdseg_ds_trunc").string();
    save_dataset(ds, base);
    std::filesystem::resize_file(base + ".sdsb", std::filesystem::file_size(base + ".sdsb") - 7);
    CHECK_THROWS_AS(load_dataset(base), FormatError);
    remove_dataset_files(base);
}

TEST_CASE("class counts and frequencies") {
    const Dataset ds = gen_dataset(100, desk_spec(61));
    const ClassCounts all = count_classes(ds, Split::kTrain);
    CHECK(all.total() == 80 * 11 * 10);
    CHECK(all.freq_d() == doctest::Approx(1.0 - all.freq_nd()));
}
