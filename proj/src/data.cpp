#include "sdseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "sdseg/io_util.hpp"
#include "sdseg/parallel.hpp"

namespace sdseg {

void ScenarioSpec::validate() const {
    if (grid_h < 2 || grid_w < 2) throw DataError("scenario: grid must be at least 2x2");
    if (channels < 1) throw DataError("scenario: need at least one feature channel");
    if (mix_none < 0 || mix_soft_story < 0 || mix_cluster < 0 || mix_scattered < 0)
        throw DataError("scenario: pattern weights must be >= 0");
    if (mix_none + mix_soft_story + mix_cluster + mix_scattered <= 0)
        throw DataError("scenario: pattern weights must not all be zero");
    if (damage_fraction < 0.0 || damage_fraction > 1.0)
        throw DataError("scenario: damage_fraction must be in [0,1]");
    if (noise_sigma < 0.0 || stochastic_sigma < 0.0)
        throw DataError("scenario: sigmas must be >= 0");
}

std::vector<int> Dataset::indices(Split s) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < splits.size(); ++i)
        if (splits[i] == s) out.push_back(static_cast<int>(i));
    return out;
}

double Dataset::damage_fraction() const {
    std::int64_t d = 0, total = 0;
    for (const auto& o : observations) {
        d += o.mask.count_damaged();
        total += static_cast<std::int64_t>(o.mask.h) * o.mask.w;
    }
    return total ? static_cast<double>(d) / static_cast<double>(total) : 0.0;
}

bool Dataset::operator==(const Dataset& o) const {
    if (signature != o.signature || splits != o.splits ||
        observations.size() != o.observations.size() ||
        stochastic_test.size() != o.stochastic_test.size())
        return false;
    for (std::size_t i = 0; i < observations.size(); ++i) {
        if (!(observations[i].mask == o.observations[i].mask)) return false;
        if (observations[i].features.values() != o.observations[i].features.values()) return false;
    }
    for (std::size_t i = 0; i < stochastic_test.size(); ++i)
        if (stochastic_test[i].values() != o.stochastic_test[i].values()) return false;
    return true;
}

double base_field_value(int c, int y, int x, int grid_h, int grid_w) {
    const double uy = 1.0 + static_cast<double>(c % 3);
    const double ux = 1.0 + static_cast<double>((c + 1) % 4);
    const double phase = 0.7 * static_cast<double>(c);
    constexpr double two_pi = 6.283185307179586476925286766559;
    return std::sin(two_pi * (uy * y / grid_h + ux * x / grid_w) + phase);
}

std::vector<double> smooth_mask(const DamageMask& mask, double blend_weight) {
    const int h = mask.h, w = mask.w;
    std::vector<double> out(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy >= 0 && yy < h && xx >= 0 && xx < w) acc += mask.at(yy, xx);
                }
            out[static_cast<std::size_t>(y) * w + x] =
                (1.0 - blend_weight) * mask.at(y, x) + blend_weight * acc / 9.0;
        }
    return out;
}

DamageMask gen_mask(const ScenarioSpec& spec, StreamRng& rng, double scatter_rate) {
    const int h = spec.grid_h, w = spec.grid_w;
    DamageMask mask(h, w);
    const double total =
        spec.mix_none + spec.mix_soft_story + spec.mix_cluster + spec.mix_scattered;
    const double u = rng.uniform() * total;
    Pattern pattern;
    if (u < spec.mix_none)
        pattern = Pattern::kNone;
    else if (u < spec.mix_none + spec.mix_soft_story)
        pattern = Pattern::kSoftStory;
    else if (u < spec.mix_none + spec.mix_soft_story + spec.mix_cluster)
        pattern = Pattern::kCluster;
    else
        pattern = Pattern::kScattered;

    switch (pattern) {
        case Pattern::kNone:
            break;
        case Pattern::kSoftStory: {
            const int row = static_cast<int>(rng.below(static_cast<std::uint64_t>(h)));
            for (int x = 0; x < w; ++x) mask.at(row, x) = 1;
            if (rng.bernoulli(0.1)) {  // occasional spill into the neighboring story
                const int spill = row + 1 < h ? row + 1 : row - 1;
                for (int x = 0; x < w; ++x) mask.at(spill, x) = 1;
            }
            break;
        }
        case Pattern::kCluster: {
            // rectangle of 4..12 nodes
            const int ch = 2 + static_cast<int>(rng.below(2));                 // 2..3
            const int cw = 2 + static_cast<int>(rng.below(3));                 // 2..4
            const int hh = std::min(ch, h), ww = std::min(cw, w);
            const int y0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(h - hh + 1)));
            const int x0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(w - ww + 1)));
            for (int y = y0; y < y0 + hh; ++y)
                for (int x = x0; x < x0 + ww; ++x) mask.at(y, x) = 1;
            break;
        }
        case Pattern::kScattered: {
            for (auto& v : mask.labels) v = rng.bernoulli(scatter_rate) ? 1 : 0;
            break;
        }
    }
    return mask;
}

DamageMask gen_mask(const ScenarioSpec& spec, StreamRng& rng) {
    return gen_mask(spec, rng, spec.damage_fraction);
}

FeatureGrid gen_features(const DamageMask& mask, const ScenarioSpec& spec,
                         const std::vector<double>& signature, Variant variant,
                         std::uint64_t obs_index) {
    const int h = spec.grid_h, w = spec.grid_w, channels = spec.channels;
    if (static_cast<int>(signature.size()) != channels)
        throw DataError("gen_features: signature size does not match channel count");
    const std::vector<double> smoothed = smooth_mask(mask, kSignatureBlend);

    StreamRng noise = StreamRng::from_path(spec.seed, {stream::kFeatureNoise, obs_index});
    double scale = 1.0;
    if (variant == Variant::kStochastic) {
        StreamRng jitter = StreamRng::from_path(spec.seed, {stream::kStochasticScale, obs_index});
        scale = 1.0 + spec.stochastic_sigma * jitter.normal();
    }

    FeatureGrid grid({channels, h, w});
    for (int c = 0; c < channels; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double v = base_field_value(c, y, x, h, w) +
                           signature[static_cast<std::size_t>(c)] *
                               smoothed[static_cast<std::size_t>(y) * w + x];
                if (spec.noise_sigma > 0.0) v += spec.noise_sigma * noise.normal();
                v *= scale;
                grid.at(c, y, x) = static_cast<double>(static_cast<float>(v));  // f32 resolution
            }
    return grid;
}

SplitSizes split_sizes(int n_obs) {
    const int train = static_cast<int>(std::llround(0.8 * n_obs));
    const int val = static_cast<int>(std::llround(0.1 * n_obs));
    return {train, val, n_obs - train - val};
}

Dataset gen_dataset(int n_obs, const ScenarioSpec& spec) {
    spec.validate();
    if (n_obs < 10) throw DataError("gen_dataset: need at least 10 observations");

    Dataset ds;
    ds.spec = spec;

    StreamRng sig_rng = StreamRng::from_path(spec.seed, {stream::kSignature});
    ds.signature.resize(static_cast<std::size_t>(spec.channels));
    for (auto& d : ds.signature) d = sig_rng.uniform(0.5, 1.5);

    // masks: sequential, with the scattered rate steering the running damage
    // fraction toward the target (structured patterns sit far below it)
    const double nodes_per_mask = static_cast<double>(spec.grid_h) * spec.grid_w;
    const double target = spec.damage_fraction;
    StreamRng mask_rng = StreamRng::from_path(spec.seed, {stream::kMaskPattern});
    ds.observations.resize(static_cast<std::size_t>(n_obs));
    std::int64_t damaged = 0, total = 0;
    for (int i = 0; i < n_obs; ++i) {
        // rate that would close the cumulative deficit within one mask
        double rate = target;
        if (spec.mix_scattered > 0 && total > 0) {
            rate = (target * (static_cast<double>(total) + nodes_per_mask) -
                    static_cast<double>(damaged)) /
                   nodes_per_mask;
        }
        rate = std::clamp(rate, 0.02, 0.95);

        DamageMask best;
        double best_err = -1.0;
        for (int attempt = 0; attempt < 20; ++attempt) {
            DamageMask candidate = gen_mask(spec, mask_rng, rate);
            const double frac_after =
                static_cast<double>(damaged + candidate.count_damaged()) /
                (static_cast<double>(total) + nodes_per_mask);
            const double err = std::fabs(frac_after - target);
            if (best_err < 0.0 || err < best_err) {
                best = candidate;
                best_err = err;
            }
            // generous early on; tight once the dataset is large enough to pin
            const double band = std::max(0.02, 2.0 / std::sqrt(static_cast<double>(i + 1)));
            if (err <= band) break;
        }
        damaged += best.count_damaged();
        total += static_cast<std::int64_t>(nodes_per_mask);
        ds.observations[static_cast<std::size_t>(i)].mask = std::move(best);
    }

    // splits: seeded shuffle, contiguous cut
    {
        std::vector<int> order(static_cast<std::size_t>(n_obs));
        for (int i = 0; i < n_obs; ++i) order[static_cast<std::size_t>(i)] = i;
        StreamRng shuffle = StreamRng::from_path(spec.seed, {stream::kSplitShuffle});
        for (int i = n_obs - 1; i > 0; --i) {
            const int j = static_cast<int>(shuffle.below(static_cast<std::uint64_t>(i + 1)));
            std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(j)]);
        }
        const SplitSizes sz = split_sizes(n_obs);
        ds.splits.assign(static_cast<std::size_t>(n_obs), Split::kTrain);
        for (int k = 0; k < n_obs; ++k) {
            const Split s = k < sz.train          ? Split::kTrain
                            : k < sz.train + sz.val ? Split::kVal
                                                    : Split::kTest;
            ds.splits[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = s;
        }
    }

    // features: per-observation streams, parallel
    parallel_for(n_obs, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            auto& obs = ds.observations[static_cast<std::size_t>(i)];
            obs.features = gen_features(obs.mask, spec, ds.signature, Variant::kIdeal,
                                        static_cast<std::uint64_t>(i));
        }
    });

    // stochastic variant of the test split
    const std::vector<int> test_idx = ds.indices(Split::kTest);
    ds.stochastic_test.resize(test_idx.size());
    parallel_for(static_cast<std::int64_t>(test_idx.size()), [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t k = lo; k < hi; ++k) {
            const int i = test_idx[static_cast<std::size_t>(k)];
            ds.stochastic_test[static_cast<std::size_t>(k)] =
                gen_features(ds.observations[static_cast<std::size_t>(i)].mask, spec, ds.signature,
                             Variant::kStochastic, static_cast<std::uint64_t>(i));
        }
    });
    return ds;
}

namespace {

constexpr char kMagic[4] = {'S', 'D', 'S', 'B'};
constexpr std::uint32_t kVersion = 1;

void write_sdsb(const std::string& path, const std::vector<const Observation*>& obs, int channels,
                int h, int w) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open dataset file for writing: " + path);
    write_bytes(os, kMagic, 4);
    write_le<std::uint32_t>(os, kVersion);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(obs.size()));
    write_le<std::uint16_t>(os, static_cast<std::uint16_t>(channels));
    write_le<std::uint16_t>(os, static_cast<std::uint16_t>(h));
    write_le<std::uint16_t>(os, static_cast<std::uint16_t>(w));
    write_le<std::uint16_t>(os, 0);  // pad: keeps the header at 24 bytes
    write_le<std::uint32_t>(os, 0);  // reserved
    for (const Observation* o : obs) {
        for (std::int64_t i = 0; i < o->features.size(); ++i)
            write_le<float>(os, static_cast<float>(o->features[i]));
        write_bytes(os, o->mask.labels.data(), o->mask.labels.size());
    }
    if (!os) throw FormatError("failed writing dataset file: " + path);
}

struct SdsbContents {
    int channels, h, w;
    std::vector<Observation> observations;
};

SdsbContents read_sdsb(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open dataset file: " + path);
    char magic[4];
    read_bytes(is, magic, 4, "dataset magic");
    if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("bad dataset magic in " + path);
    const auto version = read_le<std::uint32_t>(is, "dataset version");
    if (version != kVersion)
        throw FormatError("unsupported dataset version " + std::to_string(version));
    const auto n_obs = read_le<std::uint32_t>(is, "observation count");
    const int channels = read_le<std::uint16_t>(is, "channel count");
    const int h = read_le<std::uint16_t>(is, "grid height");
    const int w = read_le<std::uint16_t>(is, "grid width");
    read_le<std::uint16_t>(is, "pad");
    read_le<std::uint32_t>(is, "reserved");
    if (channels < 1 || h < 1 || w < 1) throw FormatError("degenerate dataset header in " + path);

    SdsbContents out{channels, h, w, {}};
    out.observations.resize(n_obs);
    for (auto& o : out.observations) {
        o.features = Tensor({channels, h, w});
        for (std::int64_t i = 0; i < o.features.size(); ++i)
            o.features[i] = static_cast<double>(read_le<float>(is, "features"));
        o.mask = DamageMask(h, w);
        read_bytes(is, o.mask.labels.data(), o.mask.labels.size(), "labels");
        for (auto v : o.mask.labels)
            if (v > 1) throw FormatError("non-binary label byte in " + path);
    }
    // must be exactly at EOF
    char extra;
    if (is.read(&extra, 1); is.gcount() != 0)
        throw FormatError("trailing bytes after last observation in " + path);
    return out;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::kTrain: return "train";
        case Split::kVal: return "val";
        default: return "test";
    }
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void save_dataset(const Dataset& ds, const std::string& base_path) {
    const ScenarioSpec& s = ds.spec;
    std::vector<const Observation*> main;
    main.reserve(ds.observations.size());
    for (const auto& o : ds.observations) main.push_back(&o);
    write_sdsb(base_path + ".sdsb", main, s.channels, s.grid_h, s.grid_w);

    // stochastic variant: same masks, perturbed features, test order
    const std::vector<int> test_idx = ds.indices(Split::kTest);
    std::vector<Observation> stoch(test_idx.size());
    std::vector<const Observation*> stoch_ptr;
    for (std::size_t k = 0; k < test_idx.size(); ++k) {
        stoch[k].features = ds.stochastic_test[k];
        stoch[k].mask = ds.observations[static_cast<std::size_t>(test_idx[k])].mask;
        stoch_ptr.push_back(&stoch[k]);
    }
    write_sdsb(base_path + "_stochastic.sdsb", stoch_ptr, s.channels, s.grid_h, s.grid_w);

    {
        std::ofstream os(base_path + ".split");
        if (!os) throw FormatError("cannot write split sidecar");
        for (std::size_t i = 0; i < ds.splits.size(); ++i)
            os << i << ' ' << split_name(ds.splits[i]) << '\n';
    }
    {
        std::ofstream os(base_path + ".manifest");
        if (!os) throw FormatError("cannot write dataset manifest");
        os << "generator = sdseg synthgrid v1\n";
        os << "seed = " << s.seed << '\n';
        os << "grid_h = " << s.grid_h << '\n';
        os << "grid_w = " << s.grid_w << '\n';
        os << "channels = " << s.channels << '\n';
        os << "mix_none = " << fmt_double(s.mix_none) << '\n';
        os << "mix_soft_story = " << fmt_double(s.mix_soft_story) << '\n';
        os << "mix_cluster = " << fmt_double(s.mix_cluster) << '\n';
        os << "mix_scattered = " << fmt_double(s.mix_scattered) << '\n';
        os << "damage_fraction = " << fmt_double(s.damage_fraction) << '\n';
        os << "noise_sigma = " << fmt_double(s.noise_sigma) << '\n';
        os << "stochastic_sigma = " << fmt_double(s.stochastic_sigma) << '\n';
        for (std::size_t c = 0; c < ds.signature.size(); ++c)
            os << "signature_" << c << " = " << fmt_double(ds.signature[c]) << '\n';
    }
}

Dataset load_dataset(const std::string& base_path) {
    SdsbContents main = read_sdsb(base_path + ".sdsb");
    SdsbContents stoch = read_sdsb(base_path + "_stochastic.sdsb");

    Dataset ds;
    ds.observations = std::move(main.observations);

    // manifest: restores the generating spec and signature
    {
        std::ifstream is(base_path + ".manifest");
        if (!is) throw FormatError("missing dataset manifest: " + base_path + ".manifest");
        ds.spec.grid_h = main.h;
        ds.spec.grid_w = main.w;
        ds.spec.channels = main.channels;
        std::string line;
        std::vector<std::pair<int, double>> sig;
        while (std::getline(is, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            std::string key = line.substr(0, eq);
            std::string value = line.substr(eq + 1);
            const auto trim = [](std::string& t) {
                t.erase(0, t.find_first_not_of(" \t"));
                t.erase(t.find_last_not_of(" \t") + 1);
            };
            trim(key);
            trim(value);
            if (key == "seed") ds.spec.seed = std::stoull(value);
            else if (key == "mix_none") ds.spec.mix_none = std::stod(value);
            else if (key == "mix_soft_story") ds.spec.mix_soft_story = std::stod(value);
            else if (key == "mix_cluster") ds.spec.mix_cluster = std::stod(value);
            else if (key == "mix_scattered") ds.spec.mix_scattered = std::stod(value);
            else if (key == "damage_fraction") ds.spec.damage_fraction = std::stod(value);
            else if (key == "noise_sigma") ds.spec.noise_sigma = std::stod(value);
            else if (key == "stochastic_sigma") ds.spec.stochastic_sigma = std::stod(value);
            else if (key.rfind("signature_", 0) == 0)
                sig.emplace_back(std::stoi(key.substr(10)), std::stod(value));
        }
        std::sort(sig.begin(), sig.end());
        for (const auto& [idx, v] : sig) {
            (void)idx;
            ds.signature.push_back(v);
        }
    }

    // split sidecar
    {
        std::ifstream is(base_path + ".split");
        if (!is) throw FormatError("missing split sidecar: " + base_path + ".split");
        ds.splits.assign(ds.observations.size(), Split::kTrain);
        std::string tag;
        std::size_t idx;
        std::size_t seen = 0;
        while (is >> idx >> tag) {
            if (idx >= ds.splits.size()) throw FormatError("split sidecar index out of range");
            if (tag == "train") ds.splits[idx] = Split::kTrain;
            else if (tag == "val") ds.splits[idx] = Split::kVal;
            else if (tag == "test") ds.splits[idx] = Split::kTest;
            else throw FormatError("unknown split tag: " + tag);
            ++seen;
        }
        if (seen != ds.splits.size()) throw FormatError("split sidecar does not cover all observations");
    }

    const std::vector<int> test_idx = ds.indices(Split::kTest);
    if (test_idx.size() != stoch.observations.size())
        throw FormatError("stochastic file observation count does not match test split");
    ds.stochastic_test.reserve(stoch.observations.size());
    for (std::size_t k = 0; k < stoch.observations.size(); ++k) {
        if (!(stoch.observations[k].mask ==
              ds.observations[static_cast<std::size_t>(test_idx[k])].mask))
            throw FormatError("stochastic file mask disagrees with the main file");
        ds.stochastic_test.push_back(std::move(stoch.observations[k].features));
    }
    return ds;
}

ClassCounts count_classes(const Dataset& ds, Split split) {
    ClassCounts c;
    for (std::size_t i = 0; i < ds.observations.size(); ++i) {
        if (ds.splits[i] != split) continue;
        const std::int64_t d = ds.observations[i].mask.count_damaged();
        const std::int64_t n =
            static_cast<std::int64_t>(ds.observations[i].mask.h) * ds.observations[i].mask.w;
        c.d += d;
        c.nd += n - d;
    }
    return c;
}

ClassCounts count_classes(const std::vector<DamageMask>& masks) {
    ClassCounts c;
    for (const auto& m : masks) {
        const std::int64_t d = m.count_damaged();
        c.d += d;
        c.nd += static_cast<std::int64_t>(m.h) * m.w - d;
    }
    return c;
}

}  // namespace sdseg
