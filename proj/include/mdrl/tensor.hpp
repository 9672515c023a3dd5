#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mdrl/errors.hpp"

namespace mdrl {

/// Dense row-major tensor of doubles. Shapes are small (rank <= 3 in
/// practice); all storage is contiguous. Tensors are plain values:
/// copyable, movable, no aliasing.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);

    static Tensor from_data(std::vector<std::size_t> shape, std::vector<double> data);
    static Tensor scalar(double v);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t extent(std::size_t axis) const;
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    // 2-D accessors.
    std::size_t rows() const { return extent(0); }
    std::size_t cols() const { return extent(1); }
    double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    /// Scalar value of a size-1 tensor.
    double item() const;

    /// Shape rendered as "[2x3]" for error messages.
    std::string shape_str() const;

    /// True when every element is finite (no NaN/Inf).
    bool all_finite() const;

    /// Index of the first non-finite element; size() when all finite.
    std::size_t first_non_finite() const;

    /// Round every element to the nearest float32 value.
    void quantize_to_float32();

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

/// Throws NumericError naming `what` and the offending index if `t`
/// contains a NaN or Inf.
void require_finite(const Tensor& t, const char* what);

std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace mdrl
