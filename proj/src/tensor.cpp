#include "mdrl/tensor.hpp"

#include <cmath>

namespace mdrl {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data) {
    if (shape_product(shape) != data.size()) {
        throw ShapeError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + mdrl::shape_str(shape));
    }
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

std::size_t Tensor::extent(std::size_t axis) const {
    if (axis >= shape_.size()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str());
    }
    return shape_[axis];
}

double Tensor::item() const {
    if (size() != 1) {
        throw ShapeError("item() requires a size-1 tensor, got " + shape_str());
    }
    return data_[0];
}

std::string Tensor::shape_str() const { return mdrl::shape_str(shape_); }

bool Tensor::all_finite() const { return first_non_finite() == size(); }

std::size_t Tensor::first_non_finite() const {
    for (std::size_t i = 0; i < data_.size(); ++i) {
        if (!std::isfinite(data_[i])) return i;
    }
    return data_.size();
}

void Tensor::quantize_to_float32() {
    for (double& v : data_) v = static_cast<double>(static_cast<float>(v));
}

void require_finite(const Tensor& t, const char* what) {
    std::size_t i = t.first_non_finite();
    if (i != t.size()) {
        throw NumericError(std::string(what) + ": non-finite value at flat index " +
                           std::to_string(i));
    }
}

std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    s += "]";
    return s;
}

}  // namespace mdrl
