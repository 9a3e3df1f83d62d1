#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "merging/error.hpp"

namespace merging {

// Dense row-major tensor of 64-bit floats. Plain value type: copyable,
// immutable-by-convention once published (all sharing is by value or
// const reference).
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape);
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor filled(std::vector<std::size_t> shape, double v);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t extent(std::size_t dim) const { return shape_.at(dim); }
    std::size_t size() const noexcept { return data_.size(); }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // row-major 2-D accessors; valid only for rank-2 tensors
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
    std::size_t rows() const { return shape_[0]; }
    std::size_t cols() const { return shape_[1]; }

    bool operator==(const Tensor& other) const {
        return shape_ == other.shape_ && data_ == other.data_;
    }

    // Throws NumericError naming `what` if any element is NaN/Inf.
    void ensure_finite(const char* what) const;

    std::string shape_string() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

inline std::size_t shape_size(std::span<const std::size_t> shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

}  // namespace merging
