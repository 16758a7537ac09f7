#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "sdseg/grad_check.hpp"
#include "sdseg/layers.hpp"
#include "sdseg/unet.hpp"

using namespace sdseg;

namespace {

ArchConfig small_arch() {
    ArchConfig a;
    a.in_channels = 3;
    a.grid_h = 11;
    a.grid_w = 10;
    a.depth = 4;
    a.base_filters = 4;
    a.dlc = 4;
    a.p_do = 0.4;
    return a;
}

Tensor random_grid(const ArchConfig& a, std::uint64_t seed) {
    StreamRng rng(seed);
    Tensor t({a.in_channels, a.grid_h, a.grid_w});
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-1.0, 1.0);
    return t;
}

}  // namespace

TEST_CASE("contracting widths double per level") {
    ArchConfig a;
    a.in_channels = 8;
    a.grid_h = 16;
    a.grid_w = 16;
    a.depth = 4;
    a.base_filters = 32;
    a.dlc = 4;
    const UNetModel m = build_unet(a, 1);
    CHECK(m.param("enc1.conv.kernel").shape() == std::vector<int>{32, 8, 3, 3});
    CHECK(m.param("enc2.conv.kernel").shape() == std::vector<int>{64, 32, 3, 3});
    CHECK(m.param("enc3.conv.kernel").shape() == std::vector<int>{128, 64, 3, 3});
    CHECK(m.param("enc4.conv.kernel").shape() == std::vector<int>{256, 128, 3, 3});
    CHECK(m.param("bottleneck.conv.kernel").shape() == std::vector<int>{512, 256, 3, 3});
    CHECK(m.param("dec4.tconv.kernel").shape() == std::vector<int>{256, 512, 3, 3});
    CHECK(m.param("dec1.conv.kernel").shape() == std::vector<int>{32, 64, 3, 3});
    CHECK(m.param("head.conv.kernel").shape() == std::vector<int>{2, 32, 1, 1});
}

TEST_CASE("same seed and arch rebuild bit-identical parameters") {
    const ArchConfig a = small_arch();
    const UNetModel m1 = build_unet(a, 42);
    const UNetModel m2 = build_unet(a, 42);
    REQUIRE(m1.params.size() == m2.params.size());
    for (std::size_t i = 0; i < m1.params.size(); ++i) {
        CHECK(m1.params[i].name == m2.params[i].name);
        CHECK(m1.params[i].value.values() == m2.params[i].value.values());
    }
    const UNetModel m3 = build_unet(a, 43);
    CHECK(m3.params[0].value.values() != m1.params[0].value.values());
}

TEST_CASE("parameter count matches the hand count for depth 2, base 4, 1 channel") {
    ArchConfig a;
    a.in_channels = 1;
    a.grid_h = 8;
    a.grid_w = 8;
    a.depth = 2;
    a.base_filters = 4;
    a.dlc = 2;
    const UNetModel m = build_unet(a, 5);
    // enc1 conv 1->4: 40, bn 8; enc2 conv 4->8: 296, bn 16;
    // bottleneck conv 8->16: 1168, bn 32;
    // dec2 tconv 16->8: 1160, conv 16->8: 1160, bn 16;
    // dec1 tconv 8->4: 292, conv 8->4: 292, bn 8; head 4->2: 10
    CHECK(m.param_count() == 4498);
}

TEST_CASE("arch validation rejects bad configurations") {
    ArchConfig a = small_arch();
    a.dlc = 5;
    CHECK_THROWS_AS(build_unet(a, 1), ShapeError);
    a = small_arch();
    a.depth = 3;  // dlc 4 > depth
    CHECK_THROWS_AS(build_unet(a, 1), ShapeError);
    a = small_arch();
    a.p_do = 0.8;
    CHECK_THROWS_AS(build_unet(a, 1), ShapeError);
}

TEST_CASE("padding arithmetic") {
    SUBCASE("multiple-of-factor input is unchanged") {
        Tensor x = Tensor::full({1, 16, 16}, 2.0);
        const Tensor p = pad_to_multiple(x, 16);
        CHECK(p.shape() == std::vector<int>{1, 16, 16});
        CHECK(p.values() == x.values());
    }
    SUBCASE("11x10 pads to 16x16 with zero rows and columns") {
        Tensor x = Tensor::full({2, 11, 10}, 1.0);
        const Tensor p = pad_to_multiple(x, 16);
        REQUIRE(p.shape() == std::vector<int>{2, 16, 16});
        double padded_sum = 0.0;
        for (std::int64_t i = 0; i < p.size(); ++i) padded_sum += p[i];
        CHECK(padded_sum == doctest::Approx(2.0 * 11 * 10));  // padding contributes zero
        CHECK(p.at(0, 11, 0) == 0.0);
        CHECK(p.at(0, 0, 10) == 0.0);
        CHECK(p.at(1, 15, 15) == 0.0);
    }
    SUBCASE("crop undoes pad") {
        StreamRng rng(71);
        Tensor x({3, 11, 10});
        for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.uniform(-2.0, 2.0);
        const Tensor back = crop(pad_to_multiple(x, 16), 11, 10);
        CHECK(back.values() == x.values());
    }
}

TEST_CASE("forward output is 2 x grid and deterministic without dropout") {
    const ArchConfig a = small_arch();
    const UNetModel m = build_unet(a, 7);
    const Tensor x = random_grid(a, 99);
    UNetForwardOptions opts;  // dropout off, infer bn
    const Tensor p1 = unet_forward(m, x, opts);
    const Tensor p2 = unet_forward(m, x, opts);
    REQUIRE(p1.shape() == std::vector<int>{2, 11, 10});
    CHECK(p1.values() == p2.values());

    // per-node probabilities
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 10; ++j) {
            const double p0 = p1.at(0, i, j), pd = p1.at(1, i, j);
            CHECK(p0 >= 0.0);
            CHECK(pd >= 0.0);
            CHECK(std::fabs(p0 + pd - 1.0) < 1e-9);
        }
}

TEST_CASE("dropout with p=0 equals no dropout") {
    ArchConfig a = small_arch();
    a.p_do = 0.0;
    const UNetModel m = build_unet(a, 9);
    const Tensor x = random_grid(a, 100);
    UNetForwardOptions off;
    UNetForwardOptions on;
    on.dropout_active = true;
    StreamRng rng(5);
    on.rng = &rng;
    CHECK(unet_forward(m, x, off).values() == unet_forward(m, x, on).values());
}

TEST_CASE("forward rejects channel mismatch") {
    const ArchConfig a = small_arch();
    const UNetModel m = build_unet(a, 7);
    Tensor bad({a.in_channels + 1, a.grid_h, a.grid_w});
    CHECK_THROWS_AS(unet_forward(m, bad, {}), ShapeError);
}

TEST_CASE("dlc k drops at the inputs of contracting blocks 1..k only") {
    for (int k = 1; k <= 4; ++k) {
        ArchConfig a = small_arch();
        a.dlc = k;
        const UNetModel m = build_unet(a, 11);
        const Tensor x = random_grid(a, 55);
        UNetCache cache;
        UNetForwardOptions opts;
        opts.dropout_active = true;
        StreamRng rng(13);
        opts.rng = &rng;
        opts.cache = &cache;
        unet_forward(m, x, opts);
        int dropped = 0;
        for (int i = 0; i < a.depth; ++i) {
            if (cache.enc[static_cast<std::size_t>(i)].dropped) {
                CHECK(i < k);  // only the first k blocks
                ++dropped;
            }
        }
        CHECK(dropped == k);
    }
}

TEST_CASE("skip connection keeps contracting features when the up branch is zeroed") {
    ArchConfig a = small_arch();
    a.p_do = 0.0;
    UNetModel m = build_unet(a, 15);
    // zero the deepest expansive tconv so its half of the concat vanishes
    for (auto& p : m.params) {
        if (p.name == "dec4.tconv.kernel" || p.name == "dec4.tconv.bias")
            for (std::int64_t i = 0; i < p.value.size(); ++i) p.value[i] = 0.0;
    }
    const Tensor x = random_grid(a, 77);
    UNetCache cache;
    UNetForwardOptions opts;
    opts.cache = &cache;
    unet_forward(m, x, opts);

    const Tensor& cat = cache.dec[0].concat;   // deepest block processes first
    const Tensor& skip = cache.enc[3].relu_out;  // its contracting partner
    const int w4 = a.width(4);
    REQUIRE(cat.dim(1) == 2 * w4);
    const std::int64_t plane = static_cast<std::int64_t>(cat.dim(2)) * cat.dim(3);
    for (int c = 0; c < w4; ++c)
        for (std::int64_t i = 0; i < plane; ++i) {
            CHECK(cat.data()[(static_cast<std::int64_t>(c)) * plane + i] ==
                  skip.data()[(static_cast<std::int64_t>(c)) * plane + i]);
            CHECK(cat.data()[(static_cast<std::int64_t>(c) + w4) * plane + i] == 0.0);
        }
}

TEST_CASE("end-to-end loss gradient matches finite differences within 5e-3") {
    CHECK(gradcheck_end_to_end(0x5eed) < 5e-3);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
    const ArchConfig a = small_arch();
    Checkpoint ckpt;
    ckpt.model = build_unet(a, 21);
    ckpt.epoch = 17;
    ckpt.train_seed = 99;
    ckpt.data_seed = 7;
    ckpt.prior_nd = 0.58;
    ckpt.prior_d = 0.42;
    // make bn state non-trivial
    for (auto& st : ckpt.model.bn_state)
        for (int c = 0; c < st.running_mean.dim(0); ++c) {
            st.running_mean[c] = 0.01 * c;
            st.running_var[c] = 1.0 + 0.02 * c;
        }

    const std::string path = (std::filesystem::temp_directory_path() / "sdseg_ckpt_test.bin").string();
    save_checkpoint(ckpt, path);
    const Checkpoint back = load_checkpoint(path);

    CHECK(back.epoch == ckpt.epoch);
    CHECK(back.train_seed == ckpt.train_seed);
    CHECK(back.prior_nd == ckpt.prior_nd);
    CHECK(back.model.arch == ckpt.model.arch);
    REQUIRE(back.model.params.size() == ckpt.model.params.size());
    for (std::size_t i = 0; i < ckpt.model.params.size(); ++i) {
        CHECK(back.model.params[i].name == ckpt.model.params[i].name);
        CHECK(back.model.params[i].value.values() == ckpt.model.params[i].value.values());
    }

    // identical forward outputs
    const Tensor x = random_grid(a, 31);
    const Tensor p1 = unet_forward(ckpt.model, x, {});
    const Tensor p2 = unet_forward(back.model, x, {});
    CHECK(p1.values() == p2.values());

    // and byte-identical on re-save
    const std::string path2 = path + ".2";
    save_checkpoint(back, path2);
    std::FILE* f1 = std::fopen(path.c_str(), "rb");
    std::FILE* f2 = std::fopen(path2.c_str(), "rb");
    REQUIRE(f1);
    REQUIRE(f2);
    int c1, c2;
    do {
        c1 = std::fgetc(f1);
        c2 = std::fgetc(f2);
        CHECK(c1 == c2);
    } while (c1 != EOF && c2 != EOF);
    std::fclose(f1);
    std::fclose(f2);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("corrupted checkpoint magic is rejected") {
    const ArchConfig a = small_arch();
    Checkpoint ckpt;
    ckpt.model = build_unet(a, 2);
    const std::string path = (std::filesystem::temp_directory_path() / "sdseg_ckpt_bad.bin").string();
    save_checkpoint(ckpt, path);
    {
        std::FILE* f = std::fopen(path.c_str(), "r+b");
        REQUIRE(f);
        std::fputc('X', f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    std::filesystem::remove(path);
}
