#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sdseg/layers.hpp"
#include "sdseg/rng.hpp"
#include "sdseg/tensor.hpp"

namespace sdseg {

/// Architecture of the segmentation U-Net.
///
/// Contracting block i (1-based) computes
///   [dropout D_i if i <= dlc] -> conv3x3 -> batchnorm -> relu -> maxpool2
/// with channel width base_filters * 2^(i-1); the bottleneck doubles once
/// more; expansive block i mirrors it with
///   tconv3x3 (stride 2) -> concat(skip_i, up) -> conv3x3 -> batchnorm -> relu
/// and the head is a 1x1 conv to 2 class channels followed by softmax.
struct ArchConfig {
    int in_channels = 8;
    int grid_h = 11;
    int grid_w = 10;
    int depth = 4;
    int base_filters = 32;
    int dlc = 4;       // dropout layers D1..D_dlc enabled
    double p_do = 0.0; // unit-drop probability, [0, 0.7]

    int pad_factor() const { return 1 << depth; }
    int padded_h() const { return ((grid_h + pad_factor() - 1) / pad_factor()) * pad_factor(); }
    int padded_w() const { return ((grid_w + pad_factor() - 1) / pad_factor()) * pad_factor(); }
    /// Channel width of contracting block i (1-based).
    int width(int block) const { return base_filters << (block - 1); }
    int bottleneck_width() const { return base_filters << depth; }

    void validate() const;
    bool operator==(const ArchConfig&) const = default;
};

/// One named parameter tensor. Kernels (is_kernel) are the only tensors that
/// enter the L2 penalty.
struct ParamTensor {
    std::string name;
    Tensor value;
    bool is_kernel = false;
};

struct UNetModel {
    ArchConfig arch;
    std::vector<ParamTensor> params;          // fixed order, see build()
    std::vector<BatchNormState> bn_state;     // enc blocks, bottleneck, dec blocks
    std::uint64_t init_seed = 0;

    std::int64_t param_count() const;
    const Tensor& param(const std::string& name) const;
};

/// Builds a model with He-uniform kernels (bound sqrt(6/fan_in)) from a
/// seeded stream; biases 0, gamma 1, beta 0. Same (arch, seed) gives
/// bit-identical parameters.
UNetModel build_unet(const ArchConfig& arch, std::uint64_t seed);

/// Zero-pads bottom/right so both spatial extents are multiples of factor.
Tensor pad_to_multiple(const Tensor& input, int factor);
/// Removes the padding again (top-left crop to grid_h x grid_w).
Tensor crop(const Tensor& output, int grid_h, int grid_w);

/// Everything forward saves for the backward pass.
struct UNetCache {
    struct Enc {
        Tensor drop_in;                   // only when dropout was applied
        std::vector<std::uint8_t> drop_mask;
        bool dropped = false;
        Tensor conv_in;
        Tensor conv_out;
        BatchNormCache bn;
        Tensor bn_out;
        Tensor relu_out;                  // skip connection source
        MaxPoolResult pool;
    };
    struct Dec {
        Tensor tconv_in;
        Tensor tconv_out;
        Tensor concat;
        Tensor conv_out;
        BatchNormCache bn;
        Tensor bn_out;
        Tensor relu_out;
    };
    Tensor padded_input;
    std::vector<Enc> enc;
    Tensor mid_conv_out;                  // bottleneck
    BatchNormCache mid_bn;
    Tensor mid_bn_out;
    Tensor mid_relu_out;
    std::vector<Dec> dec;                 // processing order (deepest first)
    Tensor logits;                        // cropped
    Tensor probs;
};

struct UNetForwardOptions {
    bool dropout_active = false;
    BnMode bn_mode = BnMode::kInfer;
    /// Single stream (whole batch) — used for single-observation passes.
    StreamRng* rng = nullptr;
    /// One stream per batch slot; masks are drawn per sample so results are
    /// independent of batch-internal parallelism.
    std::vector<StreamRng>* per_sample_rngs = nullptr;
    /// Frozen masks per dropout layer (gradient checking).
    const std::vector<std::vector<std::uint8_t>>* frozen_masks = nullptr;
    UNetCache* cache = nullptr;
};

/// Runs the network on [C,H,W] or [N,C,H,W] input (grid-sized; padding is
/// internal) and returns per-node class probabilities [2,gh,gw] or
/// [N,2,gh,gw] summing to 1 per node. Does not mutate the model; batch-norm
/// running stats are folded in separately (see apply_bn_update).
Tensor unet_forward(const UNetModel& model, const Tensor& input, const UNetForwardOptions& opts);

/// Folds the batch statistics recorded in `cache` into the model's running
/// stats with momentum 0.99 (training steps only).
void apply_bn_update(UNetModel& model, const UNetCache& cache);

/// Gradients for every parameter, aligned with model.params. d_probs is the
/// loss gradient w.r.t. the (cropped) probability output. The cache must come
/// from a train-mode forward (batch-norm gradients flow through batch stats).
std::vector<Tensor> unet_backward(const UNetModel& model, const UNetCache& cache,
                                  const Tensor& d_probs);

/// Checkpoint container: arch, parameters, batch-norm state, training epoch,
/// seed lineage and the training-split class priors (stored f64; round-trips
/// bit-exactly).
struct Checkpoint {
    UNetModel model;
    std::int64_t epoch = 0;
    std::uint64_t train_seed = 0;
    std::uint64_t data_seed = 0;
    double prior_nd = 0.5;  // training-split node frequencies, used by the ML rule
    double prior_d = 0.5;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace sdseg
