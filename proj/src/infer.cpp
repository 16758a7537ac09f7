#include "sdseg/infer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "sdseg/layers.hpp"

namespace sdseg {

const char* rule_name(Rule r) { return r == Rule::kMAP ? "MAP" : "ML"; }

Rule rule_from(const std::string& name) {
    if (name == "MAP" || name == "map") return Rule::kMAP;
    if (name == "ML" || name == "ml") return Rule::kML;
    throw DataError("unknown decision rule: " + name);
}

std::vector<Tensor> mc_sample(const UNetModel& model, const FeatureGrid& input, int n_sample,
                              std::uint64_t seed, std::uint64_t obs_id) {
    if (n_sample < 1) throw DataError("mc_sample: n_sample must be >= 1");
    if (input.rank() != 3) throw ShapeError("mc_sample: input must be [C,H,W]");

    // all samples ride one batched forward; each slot has its own keyed stream
    Tensor batch({n_sample, input.dim(0), input.dim(1), input.dim(2)});
    for (int s = 0; s < n_sample; ++s)
        std::copy_n(input.data(), input.size(), batch.data() + static_cast<std::int64_t>(s) * input.size());
    std::vector<StreamRng> rngs;
    rngs.reserve(static_cast<std::size_t>(n_sample));
    for (int s = 0; s < n_sample; ++s)
        rngs.push_back(StreamRng::from_path(
            seed, {stream::kMcSample, obs_id, static_cast<std::uint64_t>(s)}));

    UNetForwardOptions opts;
    opts.dropout_active = true;
    opts.bn_mode = BnMode::kInfer;
    opts.per_sample_rngs = &rngs;
    const Tensor probs = unet_forward(model, batch, opts);

    std::vector<Tensor> samples;
    samples.reserve(static_cast<std::size_t>(n_sample));
    const std::int64_t per = 2LL * probs.dim(2) * probs.dim(3);
    for (int s = 0; s < n_sample; ++s) {
        Tensor one({2, probs.dim(2), probs.dim(3)});
        std::copy_n(probs.data() + static_cast<std::int64_t>(s) * per, per, one.data());
        samples.push_back(std::move(one));
    }
    return samples;
}

PosteriorField posterior_stats(const std::vector<Tensor>& samples) {
    if (samples.empty()) throw DataError("posterior_stats: need at least one sample");
    const int h = samples.front().dim(1), w = samples.front().dim(2);
    const double inv_n = 1.0 / static_cast<double>(samples.size());

    PosteriorField post;
    post.n_sample = static_cast<int>(samples.size());
    post.mean_probs = Tensor::zeros({2, h, w});
    post.variance = Tensor::zeros({h, w});

    for (const Tensor& s : samples) {
        if (s.shape() != post.mean_probs.shape())
            throw ShapeError("posterior_stats: inconsistent sample shapes");
        for (std::int64_t i = 0; i < s.size(); ++i) post.mean_probs[i] += s[i];
    }
    for (std::int64_t i = 0; i < post.mean_probs.size(); ++i) post.mean_probs[i] *= inv_n;

    // population variance of the P(D) samples per node
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (const Tensor& s : samples) {
        for (std::int64_t i = 0; i < plane; ++i) {
            const double d = s[plane + i] - post.mean_probs[plane + i];
            post.variance[i] += d * d;
        }
    }
    double max_var = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) {
        post.variance[i] *= inv_n;
        // bit-identical samples must report exactly zero; anything this small
        // is pure summation round-off, far below a resolvable MC variance
        if (post.variance[i] < 1e-30) post.variance[i] = 0.0;
        max_var = std::max(max_var, post.variance[i]);
    }
    post.max_variance = max_var;
    return post;
}

Decision decide(const PosteriorField& post, Rule rule, std::pair<double, double> priors) {
    if (priors.first <= 0.0 || priors.second <= 0.0)
        throw DataError("decide: priors must be strictly positive");
    if (std::fabs(priors.first + priors.second - 1.0) > 1e-9)
        throw DataError("decide: priors must sum to 1");

    const int h = post.mean_probs.dim(1), w = post.mean_probs.dim(2);
    Decision dec;
    dec.rule = rule;
    dec.priors = priors;
    dec.labels = DamageMask(h, w);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    for (std::int64_t i = 0; i < plane; ++i) {
        double score_nd = post.mean_probs[i];
        double score_d = post.mean_probs[plane + i];
        if (rule == Rule::kML) {
            score_nd /= priors.first;
            score_d /= priors.second;
        }
        // ties go to damage
        dec.labels.labels[static_cast<std::size_t>(i)] = score_d >= score_nd ? 1 : 0;
    }
    return dec;
}

Tensor normalize_uncertainty(const PosteriorField& post) {
    Tensor mask(post.variance.shape());
    if (post.max_variance < 1e-15) return mask;  // all zeros, no division blow-up
    const double inv = 1.0 / post.max_variance;
    for (std::int64_t i = 0; i < mask.size(); ++i) mask[i] = post.variance[i] * inv;
    return mask;
}

InferOutput infer(const UNetModel& model, const FeatureGrid& input, int n_sample, Rule rule,
                  std::pair<double, double> priors, std::uint64_t seed, std::uint64_t obs_id) {
    const auto t0 = std::chrono::steady_clock::now();
    InferOutput out;
    out.posterior = posterior_stats(mc_sample(model, input, n_sample, seed, obs_id));
    out.decision = decide(out.posterior, rule, priors);
    out.normalized_mask = normalize_uncertainty(out.posterior);
    out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

Confusion2 evaluate_observations(const UNetModel& model, const std::vector<const FeatureGrid*>& inputs,
                                 const std::vector<const DamageMask*>& truths,
                                 const std::vector<std::uint64_t>& obs_ids, int n_sample, Rule rule,
                                 std::pair<double, double> priors, std::uint64_t seed) {
    if (inputs.size() != truths.size() || inputs.size() != obs_ids.size())
        throw ShapeError("evaluate_observations: input/truth/id sizes differ");
    if (n_sample < 1) throw DataError("evaluate_observations: n_sample must be >= 1");
    if (inputs.empty()) return {};

    // observations ride the batch dimension in groups; the per-slot streams
    // use exactly the mc_sample keys, so grouping cannot change any draw
    const int group = std::clamp(1024 / n_sample, 1, static_cast<int>(inputs.size()));
    const std::int64_t per = inputs.front()->size();
    Confusion2 total;
    for (std::size_t g0 = 0; g0 < inputs.size(); g0 += static_cast<std::size_t>(group)) {
        const std::size_t g1 = std::min(inputs.size(), g0 + static_cast<std::size_t>(group));
        const int slots = static_cast<int>(g1 - g0) * n_sample;
        Tensor batch({slots, inputs.front()->dim(0), inputs.front()->dim(1), inputs.front()->dim(2)});
        std::vector<StreamRng> rngs;
        rngs.reserve(static_cast<std::size_t>(slots));
        for (std::size_t k = g0; k < g1; ++k) {
            if (inputs[k]->size() != per) throw ShapeError("evaluate_observations: mixed shapes");
            for (int s = 0; s < n_sample; ++s) {
                std::copy_n(inputs[k]->data(), per,
                            batch.data() + static_cast<std::int64_t>(rngs.size()) * per);
                rngs.push_back(StreamRng::from_path(
                    seed, {stream::kMcSample, obs_ids[k], static_cast<std::uint64_t>(s)}));
            }
        }
        UNetForwardOptions opts;
        opts.dropout_active = true;
        opts.bn_mode = BnMode::kInfer;
        opts.per_sample_rngs = &rngs;
        const Tensor probs = unet_forward(model, batch, opts);

        const std::int64_t sample_sz = 2LL * probs.dim(2) * probs.dim(3);
        for (std::size_t k = g0; k < g1; ++k) {
            std::vector<Tensor> samples;
            samples.reserve(static_cast<std::size_t>(n_sample));
            for (int s = 0; s < n_sample; ++s) {
                Tensor one({2, probs.dim(2), probs.dim(3)});
                std::copy_n(probs.data() +
                                (static_cast<std::int64_t>(k - g0) * n_sample + s) * sample_sz,
                            sample_sz, one.data());
                samples.push_back(std::move(one));
            }
            const Decision dec = decide(posterior_stats(samples), rule, priors);
            total.add(*truths[k], dec.labels);
        }
    }
    return total;
}

Confusion2 evaluate_split(const UNetModel& model, const Dataset& ds, Split split, Variant variant,
                          int n_sample, Rule rule, std::pair<double, double> priors,
                          std::uint64_t seed) {
    const std::vector<int> idx = ds.indices(split);
    std::vector<const FeatureGrid*> inputs;
    std::vector<const DamageMask*> truths;
    std::vector<std::uint64_t> ids;
    if (variant == Variant::kStochastic && split != Split::kTest)
        throw DataError("stochastic features exist only for the test split");
    for (std::size_t k = 0; k < idx.size(); ++k) {
        const auto i = static_cast<std::size_t>(idx[k]);
        inputs.push_back(variant == Variant::kStochastic ? &ds.stochastic_test[k]
                                                         : &ds.observations[i].features);
        truths.push_back(&ds.observations[i].mask);
        ids.push_back(static_cast<std::uint64_t>(idx[k]));
    }
    return evaluate_observations(model, inputs, truths, ids, n_sample, rule, priors, seed);
}

void write_label_csv(const DamageMask& labels, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write label csv: " + path);
    for (int y = 0; y < labels.h; ++y) {
        for (int x = 0; x < labels.w; ++x) {
            if (x) os << ',';
            os << static_cast<int>(labels.at(y, x));
        }
        os << '\n';
    }
}

DamageMask read_label_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open label csv: " + path);
    std::vector<std::vector<std::uint8_t>> rows;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::uint8_t> row;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            if (cell != "0" && cell != "1") throw FormatError("label csv cell must be 0 or 1");
            row.push_back(cell == "1" ? 1 : 0);
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw FormatError("label csv rows have inconsistent lengths");
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw FormatError("label csv is empty: " + path);
    DamageMask mask(static_cast<int>(rows.size()), static_cast<int>(rows.front().size()));
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) mask.at(y, x) = rows[static_cast<std::size_t>(y)][static_cast<std::size_t>(x)];
    return mask;
}

void write_pgm(const Tensor& mask, const std::string& path) {
    if (mask.rank() != 2) throw ShapeError("write_pgm: mask must be [H,W]");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot write pgm: " + path);
    os << "P5\n" << mask.dim(1) << ' ' << mask.dim(0) << "\n255\n";
    for (std::int64_t i = 0; i < mask.size(); ++i) {
        const double v = std::min(1.0, std::max(0.0, mask[i]));
        os.put(static_cast<char>(static_cast<int>(std::lround(255.0 * v))));
    }
}

std::vector<std::uint8_t> read_pgm(const std::string& path, int& w, int& h) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open pgm: " + path);
    std::string magic;
    int maxval = 0;
    is >> magic >> w >> h >> maxval;
    if (magic != "P5" || maxval != 255 || w <= 0 || h <= 0)
        throw FormatError("unsupported pgm header in " + path);
    is.get();  // single whitespace after maxval
    std::vector<std::uint8_t> data(static_cast<std::size_t>(w) * h);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size()));
    if (static_cast<std::size_t>(is.gcount()) != data.size())
        throw FormatError("truncated pgm: " + path);
    return data;
}

void write_posterior_csv(const PosteriorField& post, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw FormatError("cannot write posterior csv: " + path);
    os << "y,x,mean_p_d,variance,max_variance,n_sample\n";
    const int h = post.mean_probs.dim(1), w = post.mean_probs.dim(2);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    char buf[160];
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::int64_t i = static_cast<std::int64_t>(y) * w + x;
            std::snprintf(buf, sizeof(buf), "%d,%d,%.12g,%.12g,%.12g,%d\n", y, x,
                          post.mean_probs[plane + i], post.variance[i], post.max_variance,
                          post.n_sample);
            os << buf;
        }
}

}  // namespace sdseg
