#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "sdseg/errors.hpp"

namespace sdseg {

/// Dense row-major multidimensional array of doubles.
///
/// All internal computation is 64-bit; 32-bit happens only at dataset file
/// boundaries. Rank is 1..4 in practice ([C,H,W] feature grids,
/// [N,C,H,W] batches, [Cout,Cin,kh,kw] kernels, [C] per-channel vectors).
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, double value);

    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& values() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    // rank-specific indexers (unchecked in release builds)
    double& at(int i, int j) { return data_[idx2(i, j)]; }
    double at(int i, int j) const { return data_[idx2(i, j)]; }
    double& at(int i, int j, int k) { return data_[idx3(i, j, k)]; }
    double at(int i, int j, int k) const { return data_[idx3(i, j, k)]; }
    double& at(int i, int j, int k, int l) { return data_[idx4(i, j, k, l)]; }
    double at(int i, int j, int k, int l) const { return data_[idx4(i, j, k, l)]; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    bool all_finite() const;

    /// "[2, 16, 16]" — used in error messages.
    std::string shape_str() const;

    /// Throws ShapeError unless shapes match.
    static void require_shape(const Tensor& t, const std::vector<int>& expect,
                              const char* what);

private:
    std::size_t idx2(int i, int j) const {
        return static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_[1]) +
               static_cast<std::size_t>(j);
    }
    std::size_t idx3(int i, int j, int k) const {
        return (static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_[1]) +
                static_cast<std::size_t>(j)) *
                   static_cast<std::size_t>(shape_[2]) +
               static_cast<std::size_t>(k);
    }
    std::size_t idx4(int i, int j, int k, int l) const {
        return ((static_cast<std::size_t>(i) * static_cast<std::size_t>(shape_[1]) +
                 static_cast<std::size_t>(j)) *
                    static_cast<std::size_t>(shape_[2]) +
                static_cast<std::size_t>(k)) *
                   static_cast<std::size_t>(shape_[3]) +
               static_cast<std::size_t>(l);
    }

    std::vector<int> shape_;
    std::vector<double> data_;
};

/// Gradient of one layer application: d(loss)/d(input) plus d(loss)/d(param)
/// for each parameter tensor (empty for parameter-free layers).
struct LayerGrad {
    Tensor d_input;
    std::vector<Tensor> d_params;
};

/// H×W binary node labels; 0 = no damage (ND), 1 = damage (D).
struct DamageMask {
    int h = 0;
    int w = 0;
    std::vector<std::uint8_t> labels;  // row-major

    DamageMask() = default;
    DamageMask(int h_, int w_) : h(h_), w(w_), labels(static_cast<std::size_t>(h_) * w_, 0) {}

    std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * w + x]; }
    std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * w + x]; }
    std::int64_t count_damaged() const;

    bool operator==(const DamageMask& o) const {
        return h == o.h && w == o.w && labels == o.labels;
    }
};

/// Per-node input field, shape [C, H, W].
using FeatureGrid = Tensor;

}  // namespace sdseg
