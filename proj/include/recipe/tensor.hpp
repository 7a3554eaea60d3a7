#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "recipe/errors.hpp"

namespace recipe::numerics {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape);

// Dense row-major tensor of 64-bit reals with an optional gradient
// accumulator of the same length.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape) : shape_(std::move(shape)), values_(numel(shape_), 0.0) {}

    Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
        if (values_.size() != numel(shape_)) {
            throw InvalidInputError("tensor value count does not match shape " + shape_to_string(shape_));
        }
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

    static Tensor full(Shape shape, double v) {
        Tensor t(std::move(shape));
        for (double& x : t.values_) x = v;
        return t;
    }

    static Tensor vector(std::vector<double> values) {
        Shape s{values.size()};
        return Tensor(std::move(s), std::move(values));
    }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return values_.size(); }

    double* data() { return values_.data(); }
    const double* data() const { return values_.data(); }
    std::vector<double>& values() { return values_; }
    const std::vector<double>& values() const { return values_; }

    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }

    // Row-major offset of a multi-index.
    std::size_t offset(std::span<const std::size_t> idx) const {
        std::size_t off = 0;
        for (std::size_t a = 0; a < shape_.size(); ++a) off = off * shape_[a] + idx[a];
        return off;
    }

    double at(std::initializer_list<std::size_t> idx) const {
        return values_[offset(std::span<const std::size_t>(idx.begin(), idx.size()))];
    }
    double& at(std::initializer_list<std::size_t> idx) {
        return values_[offset(std::span<const std::size_t>(idx.begin(), idx.size()))];
    }

    bool has_grad() const { return grad_.has_value(); }
    std::vector<double>& grad() {
        if (!grad_) grad_.emplace(values_.size(), 0.0);
        return *grad_;
    }
    const std::vector<double>& grad() const { return *grad_; }
    void zero_grad() {
        if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
    }
    void drop_grad() { grad_.reset(); }

    bool all_finite() const {
        for (double v : values_) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }

private:
    Shape shape_;
    std::vector<double> values_;
    std::optional<std::vector<double>> grad_;
};

}  // namespace recipe::numerics
