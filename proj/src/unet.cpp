#include "sdseg/unet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "sdseg/io_util.hpp"
#include "sdseg/parallel.hpp"

namespace sdseg {

namespace {

// Tensor index layout inside UNetModel::params. Per contracting block:
// kernel, bias, gamma, beta (4); bottleneck the same; per expansive block:
// tconv kernel, tconv bias, conv kernel, conv bias, gamma, beta (6);
// head: kernel, bias.
struct Layout {
    int depth;
    int enc(int i) const { return 4 * i; }                    // i = 0..depth-1
    int mid() const { return 4 * depth; }
    int dec(int j) const { return 4 * depth + 4 + 6 * j; }    // j = 0 is the deepest block
    int head() const { return 4 * depth + 4 + 6 * depth; }
    int total() const { return 10 * depth + 6; }
};

struct Batched {
    int n, c, h, w;
    bool had_batch_dim;
};

Batched view(const Tensor& t, const char* what) {
    if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3), true};
    if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2), false};
    throw ShapeError(std::string(what) + ": expected rank 3 or 4, got " + t.shape_str());
}

Tensor unsqueeze(const Tensor& t) {
    return Tensor({1, t.dim(0), t.dim(1), t.dim(2)}, t.values());
}

Tensor squeeze(const Tensor& t) {
    return Tensor({t.dim(1), t.dim(2), t.dim(3)}, t.values());
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), h = a.dim(2), w = a.dim(3);
    Tensor out({n, ca + cb, h, w});
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            std::copy_n(a.data() + i * ca * plane, ca * plane,
                        out.data() + i * (ca + cb) * plane);
            std::copy_n(b.data() + i * cb * plane, cb * plane,
                        out.data() + (i * (ca + cb) + ca) * plane);
        }
    });
    return out;
}

void split_channels(const Tensor& cat, int ca, Tensor& da, Tensor& db) {
    const int n = cat.dim(0), c = cat.dim(1), h = cat.dim(2), w = cat.dim(3);
    const int cb = c - ca;
    da = Tensor({n, ca, h, w});
    db = Tensor({n, cb, h, w});
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t i = lo; i < hi; ++i) {
            std::copy_n(cat.data() + i * c * plane, ca * plane, da.data() + i * ca * plane);
            std::copy_n(cat.data() + (i * c + ca) * plane, cb * plane, db.data() + i * cb * plane);
        }
    });
}

void add_into(Tensor& dst, const Tensor& src) {
    const std::int64_t n = dst.size();
    double* d = dst.data();
    const double* s = src.data();
    for (std::int64_t i = 0; i < n; ++i) d[i] += s[i];
}

// Dropout over a batch with one stream per sample; each sample's draws come
// from its own keyed stream, so neither batch grouping nor the parallel
// schedule can change a mask.
Tensor dropout_per_sample(const Tensor& x, double p, std::vector<StreamRng>& rngs,
                          std::vector<std::uint8_t>& mask_out) {
    const int n = x.dim(0);
    if (static_cast<int>(rngs.size()) != n)
        throw ShapeError("dropout: need one rng stream per batch slot");
    const std::int64_t per = x.size() / n;
    Tensor out(x.shape());
    mask_out.assign(static_cast<std::size_t>(x.size()), 1);
    const double scale = 1.0 / (1.0 - p);
    const double* xp = x.data();
    double* yp = out.data();
    parallel_for(n, [&](std::int64_t lo, std::int64_t hi) {
        for (std::int64_t s = lo; s < hi; ++s) {
            StreamRng& rng = rngs[static_cast<std::size_t>(s)];
            const std::int64_t base = s * per;
            for (std::int64_t i = 0; i < per; ++i) {
                if (rng.uniform() < p) {
                    mask_out[static_cast<std::size_t>(base + i)] = 0;
                    yp[base + i] = 0.0;
                } else {
                    yp[base + i] = xp[base + i] * scale;
                }
            }
        }
    });
    return out;
}

}  // namespace

void ArchConfig::validate() const {
    if (in_channels < 1) throw ShapeError("arch: in_channels must be >= 1");
    if (grid_h < 1 || grid_w < 1) throw ShapeError("arch: grid extents must be >= 1");
    if (depth < 1) throw ShapeError("arch: depth must be >= 1");
    if (base_filters < 1) throw ShapeError("arch: base_filters must be >= 1");
    if (dlc < 1 || dlc > 4 || dlc > depth)
        throw ShapeError("arch: dlc must be in {1..4} and <= depth");
    if (p_do < 0.0 || p_do > 0.7) throw ShapeError("arch: p_do must be in [0, 0.7]");
    if (padded_h() < pad_factor() || padded_w() < pad_factor())
        throw ShapeError("arch: grid too small for depth " + std::to_string(depth));
}

std::int64_t UNetModel::param_count() const {
    std::int64_t n = 0;
    for (const auto& p : params) n += p.value.size();
    return n;
}

const Tensor& UNetModel::param(const std::string& name) const {
    for (const auto& p : params)
        if (p.name == name) return p.value;
    throw ShapeError("unknown parameter: " + name);
}

UNetModel build_unet(const ArchConfig& arch, std::uint64_t seed) {
    arch.validate();
    UNetModel model;
    model.arch = arch;
    model.init_seed = seed;
    const Layout lay{arch.depth};
    model.params.resize(static_cast<std::size_t>(lay.total()));

    auto he_kernel = [&](int index, const std::string& name, int cout, int cin, int k) {
        Tensor t({cout, cin, k, k});
        const double bound = std::sqrt(6.0 / (static_cast<double>(cin) * k * k));
        StreamRng rng = StreamRng::from_path(seed, {stream::kParamInit, static_cast<std::uint64_t>(index)});
        for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-bound, bound);
        model.params[static_cast<std::size_t>(index)] = {name, std::move(t), true};
    };
    auto vec = [&](int index, const std::string& name, int c, double fill) {
        model.params[static_cast<std::size_t>(index)] = {name, Tensor::full({c}, fill), false};
    };

    for (int i = 0; i < arch.depth; ++i) {
        const int cin = i == 0 ? arch.in_channels : arch.width(i);
        const int cout = arch.width(i + 1);
        const std::string b = "enc" + std::to_string(i + 1);
        he_kernel(lay.enc(i) + 0, b + ".conv.kernel", cout, cin, 3);
        vec(lay.enc(i) + 1, b + ".conv.bias", cout, 0.0);
        vec(lay.enc(i) + 2, b + ".bn.gamma", cout, 1.0);
        vec(lay.enc(i) + 3, b + ".bn.beta", cout, 0.0);
        model.bn_state.emplace_back(cout);
    }
    he_kernel(lay.mid() + 0, "bottleneck.conv.kernel", arch.bottleneck_width(), arch.width(arch.depth), 3);
    vec(lay.mid() + 1, "bottleneck.conv.bias", arch.bottleneck_width(), 0.0);
    vec(lay.mid() + 2, "bottleneck.bn.gamma", arch.bottleneck_width(), 1.0);
    vec(lay.mid() + 3, "bottleneck.bn.beta", arch.bottleneck_width(), 0.0);
    model.bn_state.emplace_back(arch.bottleneck_width());

    for (int j = 0; j < arch.depth; ++j) {
        const int block = arch.depth - j;  // deepest first
        const int wi = arch.width(block);
        const int cin = block == arch.depth ? arch.bottleneck_width() : arch.width(block + 1);
        const std::string b = "dec" + std::to_string(block);
        he_kernel(lay.dec(j) + 0, b + ".tconv.kernel", wi, cin, 3);
        vec(lay.dec(j) + 1, b + ".tconv.bias", wi, 0.0);
        he_kernel(lay.dec(j) + 2, b + ".conv.kernel", wi, 2 * wi, 3);
        vec(lay.dec(j) + 3, b + ".conv.bias", wi, 0.0);
        vec(lay.dec(j) + 4, b + ".bn.gamma", wi, 1.0);
        vec(lay.dec(j) + 5, b + ".bn.beta", wi, 0.0);
        model.bn_state.emplace_back(wi);
    }
    he_kernel(lay.head() + 0, "head.conv.kernel", 2, arch.width(1), 1);
    vec(lay.head() + 1, "head.conv.bias", 2, 0.0);
    return model;
}

Tensor pad_to_multiple(const Tensor& input, int factor) {
    const Batched b = view(input, "pad_to_multiple");
    const int ph = ((b.h + factor - 1) / factor) * factor;
    const int pw = ((b.w + factor - 1) / factor) * factor;
    if (ph == b.h && pw == b.w) return input;
    Tensor out(b.had_batch_dim ? std::vector<int>{b.n, b.c, ph, pw}
                               : std::vector<int>{b.c, ph, pw});
    const std::int64_t planes = static_cast<std::int64_t>(b.n) * b.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* src = input.data() + p * b.h * b.w;
        double* dst = out.data() + p * static_cast<std::int64_t>(ph) * pw;
        for (int y = 0; y < b.h; ++y)
            std::copy_n(src + static_cast<std::int64_t>(y) * b.w, b.w,
                        dst + static_cast<std::int64_t>(y) * pw);
    }
    return out;
}

Tensor crop(const Tensor& output, int grid_h, int grid_w) {
    const Batched b = view(output, "crop");
    if (grid_h > b.h || grid_w > b.w) throw ShapeError("crop: target larger than input");
    if (grid_h == b.h && grid_w == b.w) return output;
    Tensor out(b.had_batch_dim ? std::vector<int>{b.n, b.c, grid_h, grid_w}
                               : std::vector<int>{b.c, grid_h, grid_w});
    const std::int64_t planes = static_cast<std::int64_t>(b.n) * b.c;
    for (std::int64_t p = 0; p < planes; ++p) {
        const double* src = output.data() + p * b.h * b.w;
        double* dst = out.data() + p * static_cast<std::int64_t>(grid_h) * grid_w;
        for (int y = 0; y < grid_h; ++y)
            std::copy_n(src + static_cast<std::int64_t>(y) * b.w, grid_w,
                        dst + static_cast<std::int64_t>(y) * grid_w);
    }
    return out;
}

Tensor unet_forward(const UNetModel& model, const Tensor& input, const UNetForwardOptions& opts) {
    const ArchConfig& arch = model.arch;
    const bool had_batch = input.rank() == 4;
    Tensor x = had_batch ? input : unsqueeze(input);
    if (x.dim(1) != arch.in_channels)
        throw ShapeError("unet_forward: input has " + std::to_string(x.dim(1)) +
                         " channels, arch expects " + std::to_string(arch.in_channels));
    if (x.dim(2) != arch.grid_h || x.dim(3) != arch.grid_w)
        throw ShapeError("unet_forward: input grid " + std::to_string(x.dim(2)) + "x" +
                         std::to_string(x.dim(3)) + " does not match arch grid");
    x = pad_to_multiple(x, arch.pad_factor());

    const Layout lay{arch.depth};
    const bool use_dropout = opts.dropout_active && arch.p_do > 0.0;
    UNetCache local_cache;
    UNetCache& c = opts.cache ? *opts.cache : local_cache;
    const bool keep = opts.cache != nullptr;
    if (keep) {
        c.enc.assign(static_cast<std::size_t>(arch.depth), {});
        c.dec.assign(static_cast<std::size_t>(arch.depth), {});
        c.padded_input = x;
    }

    std::vector<Tensor> skips(static_cast<std::size_t>(arch.depth));
    int drop_layer = 0;
    auto bn_state = [&](int i) -> BatchNormState& {
        // forward never mutates running stats; training folds them in later
        return const_cast<BatchNormState&>(model.bn_state[static_cast<std::size_t>(i)]);
    };

    for (int i = 0; i < arch.depth; ++i) {
        auto& ec = keep ? c.enc[static_cast<std::size_t>(i)] : local_cache.enc.emplace_back();
        if (use_dropout && i < arch.dlc) {
            if (keep) ec.drop_in = x;
            ec.dropped = true;
            if (opts.frozen_masks) {
                const auto& mask = (*opts.frozen_masks)[static_cast<std::size_t>(drop_layer)];
                x = dropout_apply(x, arch.p_do, mask);
                ec.drop_mask = mask;
            } else if (opts.per_sample_rngs) {
                x = dropout_per_sample(x, arch.p_do, *opts.per_sample_rngs, ec.drop_mask);
            } else if (opts.rng) {
                DropoutResult r = dropout(x, arch.p_do, *opts.rng);
                x = std::move(r.output);
                ec.drop_mask = std::move(r.mask);
            } else {
                throw std::invalid_argument("unet_forward: dropout active but no rng provided");
            }
            ++drop_layer;
        }
        if (keep) ec.conv_in = x;
        Tensor conv_out = conv2d(x, model.params[static_cast<std::size_t>(lay.enc(i))].value,
                                 model.params[static_cast<std::size_t>(lay.enc(i) + 1)].value);
        Tensor bn_out = batchnorm(conv_out, model.params[static_cast<std::size_t>(lay.enc(i) + 2)].value,
                                  model.params[static_cast<std::size_t>(lay.enc(i) + 3)].value,
                                  bn_state(i), opts.bn_mode, false, keep ? &ec.bn : nullptr);
        if (keep) ec.conv_out = std::move(conv_out);
        Tensor relu_out = relu(bn_out);
        if (keep) ec.bn_out = std::move(bn_out);
        MaxPoolResult pool = maxpool2(relu_out);
        skips[static_cast<std::size_t>(i)] = keep ? relu_out : std::move(relu_out);
        if (keep) {
            ec.relu_out = skips[static_cast<std::size_t>(i)];
            ec.pool = pool;
        }
        x = std::move(pool.output);
    }

    {
        Tensor conv_out = conv2d(x, model.params[static_cast<std::size_t>(lay.mid())].value,
                                 model.params[static_cast<std::size_t>(lay.mid() + 1)].value);
        Tensor bn_out = batchnorm(conv_out, model.params[static_cast<std::size_t>(lay.mid() + 2)].value,
                                  model.params[static_cast<std::size_t>(lay.mid() + 3)].value,
                                  bn_state(arch.depth), opts.bn_mode, false, keep ? &c.mid_bn : nullptr);
        if (keep) c.mid_conv_out = std::move(conv_out);
        x = relu(bn_out);
        if (keep) {
            c.mid_bn_out = std::move(bn_out);
            c.mid_relu_out = x;
        }
    }

    for (int j = 0; j < arch.depth; ++j) {
        const int block = arch.depth - j;
        auto& dc = keep ? c.dec[static_cast<std::size_t>(j)] : local_cache.dec.emplace_back();
        if (keep) dc.tconv_in = x;
        Tensor up = tconv2d(x, model.params[static_cast<std::size_t>(lay.dec(j))].value,
                            model.params[static_cast<std::size_t>(lay.dec(j) + 1)].value);
        Tensor cat = concat_channels(skips[static_cast<std::size_t>(block - 1)], up);
        if (keep) dc.tconv_out = std::move(up);
        Tensor conv_out = conv2d(cat, model.params[static_cast<std::size_t>(lay.dec(j) + 2)].value,
                                 model.params[static_cast<std::size_t>(lay.dec(j) + 3)].value);
        if (keep) dc.concat = std::move(cat);
        Tensor bn_out = batchnorm(conv_out, model.params[static_cast<std::size_t>(lay.dec(j) + 4)].value,
                                  model.params[static_cast<std::size_t>(lay.dec(j) + 5)].value,
                                  bn_state(arch.depth + 1 + j), opts.bn_mode, false,
                                  keep ? &dc.bn : nullptr);
        if (keep) dc.conv_out = std::move(conv_out);
        x = relu(bn_out);
        if (keep) {
            dc.bn_out = std::move(bn_out);
            dc.relu_out = x;
        }
    }

    Tensor logits = conv2d(x, model.params[static_cast<std::size_t>(lay.head())].value,
                           model.params[static_cast<std::size_t>(lay.head() + 1)].value);
    logits = crop(logits, arch.grid_h, arch.grid_w);
    Tensor probs = softmax2(logits);
    if (keep) {
        c.logits = std::move(logits);
        c.probs = probs;
    }
    return had_batch ? probs : squeeze(probs);
}

void apply_bn_update(UNetModel& model, const UNetCache& cache) {
    auto fold = [](BatchNormState& st, const BatchNormCache& bc) {
        for (int c = 0; c < st.running_mean.dim(0); ++c) {
            st.running_mean[c] = kBnMomentum * st.running_mean[c] + (1.0 - kBnMomentum) * bc.batch_mean[c];
            st.running_var[c] = kBnMomentum * st.running_var[c] + (1.0 - kBnMomentum) * bc.batch_var[c];
        }
    };
    const int depth = model.arch.depth;
    for (int i = 0; i < depth; ++i) fold(model.bn_state[static_cast<std::size_t>(i)], cache.enc[static_cast<std::size_t>(i)].bn);
    fold(model.bn_state[static_cast<std::size_t>(depth)], cache.mid_bn);
    for (int j = 0; j < depth; ++j)
        fold(model.bn_state[static_cast<std::size_t>(depth + 1 + j)], cache.dec[static_cast<std::size_t>(j)].bn);
}

std::vector<Tensor> unet_backward(const UNetModel& model, const UNetCache& cache,
                                  const Tensor& d_probs) {
    const ArchConfig& arch = model.arch;
    const Layout lay{arch.depth};
    std::vector<Tensor> grads(model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i)
        grads[i] = Tensor::zeros(model.params[i].value.shape());

    const bool had_batch = d_probs.rank() == 4;
    Tensor d = had_batch ? d_probs : unsqueeze(d_probs);
    d = softmax2_backward(cache.probs, d);

    // undo the crop: padding positions receive zero gradient
    {
        const int n = d.dim(0), ph = arch.padded_h(), pw = arch.padded_w();
        Tensor full({n, 2, ph, pw});
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < 2; ++ch)
                for (int y = 0; y < arch.grid_h; ++y)
                    std::copy_n(d.data() + ((static_cast<std::int64_t>(i) * 2 + ch) * arch.grid_h + y) * arch.grid_w,
                                arch.grid_w,
                                full.data() + ((static_cast<std::int64_t>(i) * 2 + ch) * ph + y) * pw);
        d = std::move(full);
    }

    {
        ConvGrad g = conv2d_backward(cache.dec.back().relu_out,
                                     model.params[static_cast<std::size_t>(lay.head())].value, d);
        grads[static_cast<std::size_t>(lay.head())] = std::move(g.d_kernel);
        grads[static_cast<std::size_t>(lay.head() + 1)] = std::move(g.d_bias);
        d = std::move(g.d_input);
    }

    std::vector<Tensor> skip_grads(static_cast<std::size_t>(arch.depth));
    for (int j = arch.depth - 1; j >= 0; --j) {
        const auto& dc = cache.dec[static_cast<std::size_t>(j)];
        const int block = arch.depth - j;
        d = relu_backward(dc.bn_out, d);
        BatchNormGrad bg = batchnorm_backward(dc.conv_out,
                                              model.params[static_cast<std::size_t>(lay.dec(j) + 4)].value,
                                              dc.bn, d);
        grads[static_cast<std::size_t>(lay.dec(j) + 4)] = std::move(bg.d_gamma);
        grads[static_cast<std::size_t>(lay.dec(j) + 5)] = std::move(bg.d_beta);
        ConvGrad cg = conv2d_backward(dc.concat,
                                      model.params[static_cast<std::size_t>(lay.dec(j) + 2)].value,
                                      bg.d_input);
        grads[static_cast<std::size_t>(lay.dec(j) + 2)] = std::move(cg.d_kernel);
        grads[static_cast<std::size_t>(lay.dec(j) + 3)] = std::move(cg.d_bias);
        Tensor d_skip, d_up;
        split_channels(cg.d_input, arch.width(block), d_skip, d_up);
        skip_grads[static_cast<std::size_t>(block - 1)] = std::move(d_skip);
        ConvGrad tg = tconv2d_backward(dc.tconv_in,
                                       model.params[static_cast<std::size_t>(lay.dec(j))].value, d_up);
        grads[static_cast<std::size_t>(lay.dec(j))] = std::move(tg.d_kernel);
        grads[static_cast<std::size_t>(lay.dec(j) + 1)] = std::move(tg.d_bias);
        d = std::move(tg.d_input);
    }

    {
        d = relu_backward(cache.mid_bn_out, d);
        BatchNormGrad bg = batchnorm_backward(cache.mid_conv_out,
                                              model.params[static_cast<std::size_t>(lay.mid() + 2)].value,
                                              cache.mid_bn, d);
        grads[static_cast<std::size_t>(lay.mid() + 2)] = std::move(bg.d_gamma);
        grads[static_cast<std::size_t>(lay.mid() + 3)] = std::move(bg.d_beta);
        ConvGrad cg = conv2d_backward(cache.enc.back().pool.output,
                                      model.params[static_cast<std::size_t>(lay.mid())].value,
                                      bg.d_input);
        grads[static_cast<std::size_t>(lay.mid())] = std::move(cg.d_kernel);
        grads[static_cast<std::size_t>(lay.mid() + 1)] = std::move(cg.d_bias);
        d = std::move(cg.d_input);
    }

    for (int i = arch.depth - 1; i >= 0; --i) {
        const auto& ec = cache.enc[static_cast<std::size_t>(i)];
        Tensor d_relu = maxpool2_backward(ec.pool, ec.relu_out.shape(), d);
        add_into(d_relu, skip_grads[static_cast<std::size_t>(i)]);
        d = relu_backward(ec.bn_out, d_relu);
        BatchNormGrad bg = batchnorm_backward(ec.conv_out,
                                              model.params[static_cast<std::size_t>(lay.enc(i) + 2)].value,
                                              ec.bn, d);
        grads[static_cast<std::size_t>(lay.enc(i) + 2)] = std::move(bg.d_gamma);
        grads[static_cast<std::size_t>(lay.enc(i) + 3)] = std::move(bg.d_beta);
        ConvGrad cg = conv2d_backward(ec.conv_in,
                                      model.params[static_cast<std::size_t>(lay.enc(i))].value,
                                      bg.d_input);
        grads[static_cast<std::size_t>(lay.enc(i))] = std::move(cg.d_kernel);
        grads[static_cast<std::size_t>(lay.enc(i) + 1)] = std::move(cg.d_bias);
        d = std::move(cg.d_input);
        if (ec.dropped) d = dropout_backward(ec.drop_mask, arch.p_do, d);
    }
    return grads;
}

namespace {
constexpr char kCkptMagic[4] = {'S', 'D', 'S', 'C'};
constexpr std::uint32_t kCkptVersion = 1;

void write_tensor(std::ostream& os, const Tensor& t) {
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (int i = 0; i < t.rank(); ++i) write_le<std::int32_t>(os, t.dim(i));
    for (std::int64_t i = 0; i < t.size(); ++i) write_le<double>(os, t[i]);
}

Tensor read_tensor(std::istream& is) {
    const int rank = read_le<std::uint8_t>(is, "tensor rank");
    std::vector<int> shape(static_cast<std::size_t>(rank));
    for (auto& d : shape) d = read_le<std::int32_t>(is, "tensor shape");
    Tensor t(shape);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = read_le<double>(is, "tensor data");
    return t;
}
}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open checkpoint for writing: " + path);
    write_bytes(os, kCkptMagic, 4);
    write_le<std::uint32_t>(os, kCkptVersion);
    const ArchConfig& a = ckpt.model.arch;
    write_le<std::int32_t>(os, a.in_channels);
    write_le<std::int32_t>(os, a.grid_h);
    write_le<std::int32_t>(os, a.grid_w);
    write_le<std::int32_t>(os, a.depth);
    write_le<std::int32_t>(os, a.base_filters);
    write_le<std::int32_t>(os, a.dlc);
    write_le<double>(os, a.p_do);
    write_le<std::int64_t>(os, ckpt.epoch);
    write_le<std::uint64_t>(os, ckpt.model.init_seed);
    write_le<std::uint64_t>(os, ckpt.train_seed);
    write_le<std::uint64_t>(os, ckpt.data_seed);
    write_le<double>(os, ckpt.prior_nd);
    write_le<double>(os, ckpt.prior_d);
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.model.params.size()));
    for (const auto& p : ckpt.model.params) {
        write_string(os, p.name);
        write_le<std::uint8_t>(os, p.is_kernel ? 1 : 0);
        write_tensor(os, p.value);
    }
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ckpt.model.bn_state.size()));
    for (const auto& st : ckpt.model.bn_state) {
        write_tensor(os, st.running_mean);
        write_tensor(os, st.running_var);
    }
    if (!os) throw FormatError("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint: " + path);
    char magic[4];
    read_bytes(is, magic, 4, "checkpoint magic");
    if (std::memcmp(magic, kCkptMagic, 4) != 0)
        throw FormatError("bad checkpoint magic in " + path);
    const auto version = read_le<std::uint32_t>(is, "checkpoint version");
    if (version != kCkptVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version));
    Checkpoint ckpt;
    ArchConfig a;
    a.in_channels = read_le<std::int32_t>(is, "arch");
    a.grid_h = read_le<std::int32_t>(is, "arch");
    a.grid_w = read_le<std::int32_t>(is, "arch");
    a.depth = read_le<std::int32_t>(is, "arch");
    a.base_filters = read_le<std::int32_t>(is, "arch");
    a.dlc = read_le<std::int32_t>(is, "arch");
    a.p_do = read_le<double>(is, "arch");
    ckpt.model.arch = a;
    ckpt.epoch = read_le<std::int64_t>(is, "epoch");
    ckpt.model.init_seed = read_le<std::uint64_t>(is, "seed");
    ckpt.train_seed = read_le<std::uint64_t>(is, "seed");
    ckpt.data_seed = read_le<std::uint64_t>(is, "seed");
    ckpt.prior_nd = read_le<double>(is, "priors");
    ckpt.prior_d = read_le<double>(is, "priors");
    const auto n_params = read_le<std::uint32_t>(is, "param count");
    ckpt.model.params.resize(n_params);
    for (auto& p : ckpt.model.params) {
        p.name = read_string(is, "param name");
        p.is_kernel = read_le<std::uint8_t>(is, "param flag") != 0;
        p.value = read_tensor(is);
    }
    const auto n_bn = read_le<std::uint32_t>(is, "bn count");
    ckpt.model.bn_state.resize(n_bn);
    for (auto& st : ckpt.model.bn_state) {
        st.running_mean = read_tensor(is);
        st.running_var = read_tensor(is);
    }
    return ckpt;
}

}  // namespace sdseg
