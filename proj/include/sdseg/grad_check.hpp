#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sdseg/tensor.hpp"

namespace sdseg {

/// Scalar function of a list of tensors (inputs and/or parameters).
using ScalarFn = std::function<double(const std::vector<Tensor>&)>;

/// Central finite differences of f w.r.t. every component of every tensor.
std::vector<Tensor> numeric_gradients(const ScalarFn& f, std::vector<Tensor> xs,
                                      double eps = 1e-5);

/// Max relative error between analytic and central-difference gradients,
/// rel = |a - n| / max(1e-6, |a| + |n|) over all components.
double grad_check(const ScalarFn& f, const std::vector<Tensor>& xs,
                  const std::vector<Tensor>& analytic, double eps = 1e-5);

struct LayerCheckRow {
    std::string layer;
    double max_rel_err;
    double tolerance;
    bool pass;
};

/// Finite-difference battery over every layer primitive (random instances,
/// `rounds` seeds each). Tolerances: 1e-7 for the linear 1x1 conv, 1e-4
/// otherwise.
std::vector<LayerCheckRow> gradcheck_layers(std::uint64_t seed, int rounds = 5);

/// End-to-end check: weighted CE of a depth-2, base-4 network forward on an
/// 8x8 grid, dropout masks frozen, gradients w.r.t. every parameter.
/// Returns the max relative error (tolerance 5e-3).
double gradcheck_end_to_end(std::uint64_t seed);

}  // namespace sdseg
