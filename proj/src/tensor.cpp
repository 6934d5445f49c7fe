#include "aai/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "aai/error.hpp"

namespace aai {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        require(d >= 0, "negative dimension in shape");
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << "]";
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
    require(data_.size() == shape_numel(shape_),
            "tensor value count " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

double Tensor::item() const {
    require(data_.size() == 1, "item() on tensor with " + std::to_string(data_.size()) + " elements");
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
    require(shape_numel(shape) == data_.size(), "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice0(int index) const {
    require(!shape_.empty() && index >= 0 && index < shape_[0], "slice0 index out of range");
    Shape sub(shape_.begin() + 1, shape_.end());
    const std::size_t n = shape_numel(sub);
    std::vector<double> v(data_.begin() + static_cast<std::ptrdiff_t>(n * index),
                          data_.begin() + static_cast<std::ptrdiff_t>(n * (index + 1)));
    return Tensor(std::move(sub), std::move(v));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor stack(std::span<const Tensor> items) {
    require(!items.empty(), "stack of zero tensors");
    Shape shape = items[0].shape();
    std::vector<double> values;
    values.reserve(items.size() * items[0].size());
    for (const auto& t : items) {
        require(t.shape() == shape, "stack shape mismatch " + shape_str(t.shape()) + " vs " + shape_str(shape));
        values.insert(values.end(), t.values().begin(), t.values().end());
    }
    shape.insert(shape.begin(), static_cast<int>(items.size()));
    return Tensor(std::move(shape), std::move(values));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(), "max_abs_diff shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

std::uint64_t checksum(const Tensor& t) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const unsigned char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (int d : t.shape()) {
        mix(reinterpret_cast<const unsigned char*>(&d), sizeof d);
    }
    mix(reinterpret_cast<const unsigned char*>(t.data()), t.size() * sizeof(double));
    return h;
}

}  // namespace aai
