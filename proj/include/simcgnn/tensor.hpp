#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace simcgnn {

using shape_t = std::vector<std::size_t>;

inline std::size_t shape_size(const shape_t& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

/// Dense row-major f64 array with an explicit shape.
///
/// Row-wise operations in the autodiff layer treat the last axis as columns
/// and fold all leading axes into rows, so a rank-1 tensor is one row and a
/// (B, N, d) tensor is B*N rows of width d.
class tensor {
public:
    tensor() = default;

    explicit tensor(shape_t shape, double fill = 0.0)
        : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

    tensor(shape_t shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_size(shape_) != data_.size())
            throw dimension_error("tensor: shape " + detail::shape_string(shape_) + " does not match " +
                                  std::to_string(data_.size()) + " values");
    }

    static tensor scalar(double v) { return tensor({}, std::vector<double>{v}); }
    static tensor vector(std::vector<double> v) {
        const std::size_t n = v.size();
        return tensor({n}, std::move(v));
    }
    static tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
        return tensor({rows, cols}, std::move(v));
    }

    const shape_t& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    // Width of the last axis (1 for scalars) and the number of such rows.
    std::size_t cols() const noexcept { return shape_.empty() ? 1 : shape_.back(); }
    std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    std::span<double> row(std::size_t r) { return std::span<double>(data_).subspan(r * cols(), cols()); }
    std::span<const double> row(std::size_t r) const {
        return std::span<const double>(data_).subspan(r * cols(), cols());
    }

    double item() const {
        if (data_.size() != 1) throw dimension_error("tensor::item on shape " + detail::shape_string(shape_));
        return data_[0];
    }

    tensor reshaped(shape_t shape) const {
        if (shape_size(shape) != data_.size())
            throw dimension_error("reshape " + detail::shape_string(shape_) + " -> " + detail::shape_string(shape));
        return tensor(std::move(shape), data_);
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const tensor& a, const tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

private:
    shape_t shape_;
    std::vector<double> data_;
};

inline double norm2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double cosine(std::span<const double> a, std::span<const double> b) {
    const double na = norm2(a), nb = norm2(b);
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

} // namespace simcgnn
