#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "sdseg/rng.hpp"
#include "sdseg/tensor.hpp"

namespace sdseg {

// Differentiable layer primitives for grid segmentation networks.
//
// Every op accepts either a single observation [C,H,W] or a batch [N,C,H,W]
// and returns a tensor of matching rank. Backward passes are hand-written;
// each one is validated against central finite differences (see grad_check).

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.99;
inline constexpr double kProbFloor = 1e-12;

struct ConvGrad {
    Tensor d_input;
    Tensor d_kernel;
    Tensor d_bias;
};

/// 3x3 (or 1x1) convolution, stride 1, zero "same" padding.
/// kernel [Cout, Cin, k, k] with k in {1, 3}; bias [Cout].
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);
ConvGrad conv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out);

/// Transposed convolution, stride 2, 3x3 kernel; output spatial size doubles.
/// The linear map is the adjoint of a stride-2 convolution with the same
/// kernel (bias added after). kernel [Cout, Cin, 3, 3], input [.., Cin, H, W],
/// output [.., Cout, 2H, 2W].
Tensor tconv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias);
ConvGrad tconv2d_backward(const Tensor& input, const Tensor& kernel, const Tensor& grad_out);

/// Reference stride-2 convolution (the adjoint counterpart of tconv2d):
/// maps [.., Cout, 2H, 2W] -> [.., Cin, H, W] with the same kernel. Used by
/// the adjoint identity check and nowhere in the network itself.
Tensor conv2d_stride2_adjoint(const Tensor& input, const Tensor& kernel);

struct MaxPoolResult {
    Tensor output;
    std::vector<std::uint8_t> argmax;  // 0..3 = position within each 2x2 window
};

/// Non-overlapping 2x2 max pooling; H and W must be even.
MaxPoolResult maxpool2(const Tensor& input);
Tensor maxpool2_backward(const MaxPoolResult& fwd, const std::vector<int>& input_shape,
                         const Tensor& grad_out);

enum class BnMode { kTrain, kInfer };

/// Per-channel running statistics of a batch-norm layer.
struct BatchNormState {
    Tensor running_mean;  // [C]
    Tensor running_var;   // [C]
    explicit BatchNormState(int channels = 0);
};

/// Saved forward quantities needed by batchnorm_backward (train mode).
struct BatchNormCache {
    Tensor x_hat;
    Tensor batch_mean;  // [C]
    Tensor batch_var;   // [C], population convention
};

/// Train mode normalizes by batch statistics (and, when update_running is
/// set, folds them into `state` with momentum 0.99); infer mode uses the
/// running statistics only. Input [N,C,H,W] or [C,H,W] (treated as N=1).
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, BnMode mode, bool update_running = false,
                 BatchNormCache* cache = nullptr);

struct BatchNormGrad {
    Tensor d_input;
    Tensor d_gamma;
    Tensor d_beta;
};
BatchNormGrad batchnorm_backward(const Tensor& input, const Tensor& gamma,
                                 const BatchNormCache& cache, const Tensor& grad_out);

Tensor relu(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& grad_out);

/// Per-node softmax over the 2-channel class axis, max-stabilized.
/// Input [2,H,W] or [N,2,H,W].
Tensor softmax2(const Tensor& logits);
Tensor softmax2_backward(const Tensor& probs, const Tensor& grad_out);

struct DropoutResult {
    Tensor output;
    std::vector<std::uint8_t> mask;  // 1 = kept
};

/// Inverted dropout: zeroes units with probability p, scales survivors by
/// 1/(1-p). Requires 0 <= p < 1. p = 0 is the identity with an all-ones mask.
DropoutResult dropout(const Tensor& input, double p, StreamRng& rng);
/// Applies a fixed mask (gradient checking against frozen masks).
Tensor dropout_apply(const Tensor& input, double p, const std::vector<std::uint8_t>& mask);
Tensor dropout_backward(const std::vector<std::uint8_t>& mask, double p, const Tensor& grad_out);

/// Class-weighted cross entropy over node probabilities.
/// probs [2,H,W] or [N,2,H,W] (columns sum to 1 per node), weights = (w_ND, w_D).
/// Returns -(1/nodes) * sum weights[truth]*log(max(probs[truth], 1e-12)).
double weighted_ce(const Tensor& probs, const std::vector<DamageMask>& truth,
                   std::pair<double, double> weights);
double weighted_ce(const Tensor& probs, const DamageMask& truth,
                   std::pair<double, double> weights);
Tensor weighted_ce_backward(const Tensor& probs, const std::vector<DamageMask>& truth,
                            std::pair<double, double> weights);

}  // namespace sdseg
