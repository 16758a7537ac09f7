#include "sdseg/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace sdseg {

namespace {
std::int64_t checked_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw ShapeError("tensor extents must be positive");
        n *= e;
    }
    return n;
}
}  // namespace

Tensor::Tensor(std::vector<int> shape)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(checked_numel(shape_)), 0.0) {}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data) : shape_(std::move(shape)) {
    const std::int64_t n = checked_numel(shape_);
    if (n != static_cast<std::int64_t>(data.size()))
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape product " + std::to_string(n));
    data_ = std::move(data);
}

Tensor Tensor::full(std::vector<int> shape, double value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << ", ";
        os << shape_[i];
    }
    os << ']';
    return os.str();
}

void Tensor::require_shape(const Tensor& t, const std::vector<int>& expect, const char* what) {
    if (t.shape() != expect) {
        Tensor e;
        e.shape_ = expect;
        throw ShapeError(std::string(what) + ": expected shape " + e.shape_str() + ", got " +
                         t.shape_str());
    }
}

std::int64_t DamageMask::count_damaged() const {
    std::int64_t n = 0;
    for (std::uint8_t v : labels) n += v;
    return n;
}

}  // namespace sdseg
