#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vaeunet {

/// NCHW shape. Every tensor in the library is four dimensional; scalars are 1x1x1x1.
struct Shape {
    int n = 1;
    int c = 1;
    int h = 1;
    int w = 1;

    [[nodiscard]] std::size_t numel() const {
        return static_cast<std::size_t>(n) * c * h * w;
    }
    [[nodiscard]] std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    [[nodiscard]] std::string str() const;

    friend bool operator==(const Shape&, const Shape&) = default;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Throws ShapeError naming `what` when the two shapes differ.
void require_same_shape(const Shape& a, const Shape& b, const std::string& what);

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v) { return Tensor(Shape{}, v); }

    [[nodiscard]] const Shape& shape() const { return shape_; }
    [[nodiscard]] std::size_t size() const { return data_.size(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    [[nodiscard]] double* data() { return data_.data(); }
    [[nodiscard]] const double* data() const { return data_.data(); }
    [[nodiscard]] std::span<double> values() { return data_; }
    [[nodiscard]] std::span<const double> values() const { return data_; }
    [[nodiscard]] const std::vector<double>& vec() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
    [[nodiscard]] double at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

    [[nodiscard]] std::size_t index(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    /// Scalar value of a 1-element tensor.
    [[nodiscard]] double item() const;

    /// Copy of sample `i` along the batch axis, as a batch of one.
    [[nodiscard]] Tensor batch_item(int i) const;

    void fill(double v);
    Tensor& operator+=(const Tensor& other);

    [[nodiscard]] bool all_finite() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    Shape shape_{0, 0, 0, 0};
    std::vector<double> data_;
};

/// Stacks batch-of-one (or larger) tensors along the batch axis.
Tensor stack_batch(std::span<const Tensor> items);

}  // namespace vaeunet
