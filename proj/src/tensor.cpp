#include "vaeunet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace vaeunet {

std::string Shape::str() const {
    std::ostringstream os;
    os << '[' << n << 'x' << c << 'x' << h << 'x' << w << ']';
    return os.str();
}

void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
    if (a != b) {
        throw ShapeError(what + ": shape mismatch " + a.str() + " vs " + b.str());
    }
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.numel(), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape_.numel()) {
        throw ShapeError("Tensor: " + std::to_string(data_.size()) + " values for shape " + shape_.str());
    }
}

double Tensor::item() const {
    if (data_.size() != 1) {
        throw ShapeError("Tensor::item on shape " + shape_.str());
    }
    return data_[0];
}

Tensor Tensor::batch_item(int i) const {
    if (i < 0 || i >= shape_.n) {
        throw std::out_of_range("batch index " + std::to_string(i) + " outside " + shape_.str());
    }
    Shape s = shape_;
    s.n = 1;
    const std::size_t stride = s.numel();
    std::vector<double> v(data_.begin() + static_cast<std::ptrdiff_t>(i * stride),
                          data_.begin() + static_cast<std::ptrdiff_t>((i + 1) * stride));
    return Tensor(s, std::move(v));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
    require_same_shape(shape_, other.shape_, "Tensor::operator+=");
    for (std::size_t i = 0; i < data_.size(); ++i) {
        data_[i] += other.data_[i];
    }
    return *this;
}

bool Tensor::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor stack_batch(std::span<const Tensor> items) {
    if (items.empty()) {
        throw ShapeError("stack_batch: no items");
    }
    Shape s = items.front().shape();
    int total = 0;
    for (const auto& t : items) {
        Shape a = t.shape();
        Shape b = s;
        a.n = b.n = 1;
        require_same_shape(a, b, "stack_batch");
        total += t.shape().n;
    }
    s.n = total;
    std::vector<double> v;
    v.reserve(s.numel());
    for (const auto& t : items) {
        v.insert(v.end(), t.vec().begin(), t.vec().end());
    }
    return Tensor(s, std::move(v));
}

}  // namespace vaeunet
