#pragma once

#include <cstddef>
#include <vector>

#include "mdrl/tensor.hpp"

namespace mdrl {

// Forward kernels. These are pure shape-checked functions on Tensors; the
// autodiff layer wraps them and supplies the matching backward rules.

/// Standard matrix product of a [PxQ] by b [QxS].
Tensor matmul(const Tensor& a, const Tensor& b);
/// a' * b where a is [KxM], b is [KxN].
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a * b' where a is [MxK], b is [NxK].
Tensor matmul_nt(const Tensor& a, const Tensor& b);

/// out (+)= op(a) * op(b) with optional transposes. The workhorse behind
/// the three public variants and all matmul gradients.
void matmul_into(Tensor& out, const Tensor& a, bool trans_a, const Tensor& b, bool trans_b,
                 bool accumulate);

/// Softmax along `axis` of a 2-D tensor, computed with max subtraction.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalizes each slice along `axis` to unit Euclidean norm. Slices with
/// norm below `eps` are returned unchanged.
Tensor l2_normalize(const Tensor& x, std::size_t axis, double eps = 1e-12);

Tensor tanh_map(const Tensor& x);

Tensor add(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// y += s * x
void axpy(Tensor& y, double s, const Tensor& x);

/// Adds bias[r] to every element of row r of x [RxC].
Tensor add_col_bias(const Tensor& x, const Tensor& bias);

/// Per-row mean over columns of x [RxC] -> [R].
Tensor mean_cols(const Tensor& x);
/// Tiles a length-R vector into an [RxC] matrix.
Tensor repeat_cols(const Tensor& v, std::size_t cols);

/// Stacks 2-D tensors with equal column counts along the row axis.
Tensor concat_rows(const std::vector<const Tensor*>& parts);

/// 3x3 spatial stencil shared across channels, zero padded. x is [Z, H*W]
/// with row-major (y, x) positions, kernel is [3x3].
Tensor conv3x3_shared(const Tensor& x, std::size_t height, std::size_t width,
                      const Tensor& kernel);
void conv3x3_shared_backward(const Tensor& grad_out, const Tensor& x, const Tensor& kernel,
                             std::size_t height, std::size_t width, Tensor& grad_x,
                             Tensor& grad_kernel);

/// Nearest-neighbor upsampling by integer factor s: [C, H*W] -> [C, Hs*Ws].
Tensor upsample_nearest(const Tensor& x, std::size_t height, std::size_t width, std::size_t s);
void upsample_nearest_backward(const Tensor& grad_out, std::size_t height, std::size_t width,
                               std::size_t s, Tensor& grad_x);

/// Keeps every s-th position (top-left convention): [Z, H*W] -> [Z, (H/s)(W/s)].
Tensor subsample(const Tensor& x, std::size_t height, std::size_t width, std::size_t s);
void subsample_backward(const Tensor& grad_out, std::size_t height, std::size_t width,
                        std::size_t s, Tensor& grad_x);

double sum_all(const Tensor& x);
/// Inner product of equal-shaped tensors, flattened.
double dot_all(const Tensor& a, const Tensor& b);

}  // namespace mdrl
