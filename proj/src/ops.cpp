#include "mdrl/ops.hpp"

#include <algorithm>
#include <cmath>

namespace mdrl {

namespace {

void require_rank2(const Tensor& t, const char* what) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(what) + ": expected a rank-2 tensor, got " + t.shape_str());
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw ShapeError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " +
                         b.shape_str());
    }
}

}  // namespace

void matmul_into(Tensor& out, const Tensor& a, bool trans_a, const Tensor& b, bool trans_b,
                 bool accumulate) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = trans_a ? a.cols() : a.rows();
    const std::size_t k = trans_a ? a.rows() : a.cols();
    const std::size_t kb = trans_b ? b.cols() : b.rows();
    const std::size_t n = trans_b ? b.rows() : b.cols();
    if (k != kb) {
        throw ShapeError("matmul: inner extents mismatch " + a.shape_str() +
                         (trans_a ? "'" : "") + " vs " + b.shape_str() + (trans_b ? "'" : ""));
    }
    if (out.empty()) {
        out = Tensor({m, n});
    } else if (out.rows() != m || out.cols() != n) {
        throw ShapeError("matmul: output shape " + out.shape_str() + " does not match [" +
                         std::to_string(m) + "x" + std::to_string(n) + "]");
    } else if (!accumulate) {
        std::fill(out.data(), out.data() + out.size(), 0.0);
    }

    const double* pa = a.data();
    const double* pb = b.data();
    double* pc = out.data();

    if (!trans_a && !trans_b) {
        // C[m,n] += A[m,k] B[k,n]; inner loop contiguous over n.
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
                const double av = pa[i * k + p];
                const double* brow = pb + p * n;
                double* crow = pc + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (trans_a && !trans_b) {
        // C[m,n] += A[k,m] B[k,n]
        for (std::size_t p = 0; p < k; ++p) {
            const double* arow = pa + p * m;
            const double* brow = pb + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = arow[i];
                double* crow = pc + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // C[m,n] += A[m,k] B[n,k]; dot products of contiguous rows.
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = pa + i * k;
            double* crow = pc + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* brow = pb + j * k;
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    } else {
        // C[m,n] += A[k,m] B[n,k]; rare, used by no gradient path but kept total.
        for (std::size_t p = 0; p < k; ++p) {
            const double* arow = pa + p * m;
            for (std::size_t i = 0; i < m; ++i) {
                const double av = arow[i];
                double* crow = pc + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * pb[j * k + p];
            }
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    Tensor out;
    matmul_into(out, a, false, b, false, false);
    return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    Tensor out;
    matmul_into(out, a, true, b, false, false);
    return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    Tensor out;
    matmul_into(out, a, false, b, true, false);
    return out;
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    require_rank2(x, "softmax");
    if (axis > 1) {
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         x.shape_str());
    }
    const std::size_t rows = x.rows(), cols = x.cols();
    Tensor out({rows, cols});
    if (axis == 1) {
        for (std::size_t r = 0; r < rows; ++r) {
            const double* in = x.data() + r * cols;
            double* o = out.data() + r * cols;
            double mx = in[0];
            for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
            double sum = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                o[c] = std::exp(in[c] - mx);
                sum += o[c];
            }
            const double inv = 1.0 / sum;
            for (std::size_t c = 0; c < cols; ++c) o[c] *= inv;
        }
    } else {
        for (std::size_t c = 0; c < cols; ++c) {
            double mx = x.at(0, c);
            for (std::size_t r = 1; r < rows; ++r) mx = std::max(mx, x.at(r, c));
            double sum = 0.0;
            for (std::size_t r = 0; r < rows; ++r) {
                const double e = std::exp(x.at(r, c) - mx);
                out.at(r, c) = e;
                sum += e;
            }
            const double inv = 1.0 / sum;
            for (std::size_t r = 0; r < rows; ++r) out.at(r, c) *= inv;
        }
    }
    return out;
}

Tensor l2_normalize(const Tensor& x, std::size_t axis, double eps) {
    require_rank2(x, "l2_normalize");
    if (axis > 1) {
        throw ShapeError("l2_normalize: axis " + std::to_string(axis) + " out of range for " +
                         x.shape_str());
    }
    if (eps <= 0.0) {
        throw ConfigError("l2_normalize: eps must be positive");
    }
    const std::size_t rows = x.rows(), cols = x.cols();
    Tensor out = x;
    if (axis == 1) {
        for (std::size_t r = 0; r < rows; ++r) {
            double* o = out.data() + r * cols;
            double n2 = 0.0;
            for (std::size_t c = 0; c < cols; ++c) n2 += o[c] * o[c];
            const double n = std::sqrt(n2);
            if (n < eps) continue;
            const double inv = 1.0 / n;
            for (std::size_t c = 0; c < cols; ++c) o[c] *= inv;
        }
    } else {
        for (std::size_t c = 0; c < cols; ++c) {
            double n2 = 0.0;
            for (std::size_t r = 0; r < rows; ++r) n2 += out.at(r, c) * out.at(r, c);
            const double n = std::sqrt(n2);
            if (n < eps) continue;
            const double inv = 1.0 / n;
            for (std::size_t r = 0; r < rows; ++r) out.at(r, c) *= inv;
        }
    }
    return out;
}

Tensor tanh_map(const Tensor& x) {
    Tensor out = x;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(out[i]);
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
    return out;
}

void axpy(Tensor& y, double s, const Tensor& x) {
    require_same_shape(y, x, "axpy");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * x[i];
}

Tensor add_col_bias(const Tensor& x, const Tensor& bias) {
    require_rank2(x, "add_col_bias");
    if (bias.rank() != 1 || bias.size() != x.rows()) {
        throw ShapeError("add_col_bias: bias " + bias.shape_str() + " does not match rows of " +
                         x.shape_str());
    }
    Tensor out = x;
    const std::size_t rows = x.rows(), cols = x.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        const double b = bias[r];
        double* o = out.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) o[c] += b;
    }
    return out;
}

Tensor mean_cols(const Tensor& x) {
    require_rank2(x, "mean_cols");
    const std::size_t rows = x.rows(), cols = x.cols();
    Tensor out({rows});
    const double inv = 1.0 / static_cast<double>(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        const double* in = x.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) acc += in[c];
        out[r] = acc * inv;
    }
    return out;
}

Tensor repeat_cols(const Tensor& v, std::size_t cols) {
    if (v.rank() != 1) {
        throw ShapeError("repeat_cols: expected a rank-1 tensor, got " + v.shape_str());
    }
    Tensor out({v.size(), cols});
    for (std::size_t r = 0; r < v.size(); ++r) {
        double* o = out.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) o[c] = v[r];
    }
    return out;
}

Tensor concat_rows(const std::vector<const Tensor*>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows: no inputs");
    }
    const std::size_t cols = parts[0]->cols();
    std::size_t rows = 0;
    for (const Tensor* p : parts) {
        require_rank2(*p, "concat_rows");
        if (p->cols() != cols) {
            throw ShapeError("concat_rows: column mismatch " + parts[0]->shape_str() + " vs " +
                             p->shape_str());
        }
        rows += p->rows();
    }
    Tensor out({rows, cols});
    std::size_t row0 = 0;
    for (const Tensor* p : parts) {
        std::copy(p->data(), p->data() + p->size(), out.data() + row0 * cols);
        row0 += p->rows();
    }
    return out;
}

namespace {

void require_grid(const Tensor& x, std::size_t height, std::size_t width, const char* what) {
    require_rank2(x, what);
    if (x.cols() != height * width) {
        throw ShapeError(std::string(what) + ": " + x.shape_str() + " does not hold a " +
                         std::to_string(height) + "x" + std::to_string(width) + " grid");
    }
}

}  // namespace

Tensor conv3x3_shared(const Tensor& x, std::size_t height, std::size_t width,
                      const Tensor& kernel) {
    require_grid(x, height, width, "conv3x3");
    if (kernel.rank() != 2 || kernel.rows() != 3 || kernel.cols() != 3) {
        throw ShapeError("conv3x3: kernel must be [3x3], got " + kernel.shape_str());
    }
    const std::size_t channels = x.rows();
    const long h = static_cast<long>(height), w = static_cast<long>(width);
    Tensor out({channels, height * width});
    for (std::size_t z = 0; z < channels; ++z) {
        const double* in = x.data() + z * height * width;
        double* o = out.data() + z * height * width;
        for (long y = 0; y < h; ++y) {
            for (long c = 0; c < w; ++c) {
                double acc = 0.0;
                for (long dy = -1; dy <= 1; ++dy) {
                    const long yy = y + dy;
                    if (yy < 0 || yy >= h) continue;
                    for (long dx = -1; dx <= 1; ++dx) {
                        const long xx = c + dx;
                        if (xx < 0 || xx >= w) continue;
                        acc += kernel.at(static_cast<std::size_t>(dy + 1),
                                         static_cast<std::size_t>(dx + 1)) *
                               in[yy * w + xx];
                    }
                }
                o[y * w + c] = acc;
            }
        }
    }
    return out;
}

void conv3x3_shared_backward(const Tensor& grad_out, const Tensor& x, const Tensor& kernel,
                             std::size_t height, std::size_t width, Tensor& grad_x,
                             Tensor& grad_kernel) {
    const std::size_t channels = x.rows();
    const long h = static_cast<long>(height), w = static_cast<long>(width);
    for (std::size_t z = 0; z < channels; ++z) {
        const double* go = grad_out.data() + z * height * width;
        const double* in = x.data() + z * height * width;
        double* gx = grad_x.empty() ? nullptr : grad_x.data() + z * height * width;
        for (long y = 0; y < h; ++y) {
            for (long c = 0; c < w; ++c) {
                const double g = go[y * w + c];
                for (long dy = -1; dy <= 1; ++dy) {
                    const long yy = y + dy;
                    if (yy < 0 || yy >= h) continue;
                    for (long dx = -1; dx <= 1; ++dx) {
                        const long xx = c + dx;
                        if (xx < 0 || xx >= w) continue;
                        const std::size_t ky = static_cast<std::size_t>(dy + 1);
                        const std::size_t kx = static_cast<std::size_t>(dx + 1);
                        if (gx) gx[yy * w + xx] += g * kernel.at(ky, kx);
                        if (!grad_kernel.empty()) {
                            grad_kernel.at(ky, kx) += g * in[yy * w + xx];
                        }
                    }
                }
            }
        }
    }
}

Tensor upsample_nearest(const Tensor& x, std::size_t height, std::size_t width, std::size_t s) {
    require_grid(x, height, width, "upsample_nearest");
    if (s == 0) throw ConfigError("upsample_nearest: stride must be >= 1");
    if (s == 1) return x;
    const std::size_t channels = x.rows();
    Tensor out({channels, height * s * width * s});
    for (std::size_t z = 0; z < channels; ++z) {
        const double* in = x.data() + z * height * width;
        double* o = out.data() + z * height * s * width * s;
        for (std::size_t y = 0; y < height * s; ++y) {
            const std::size_t sy = y / s;
            for (std::size_t c = 0; c < width * s; ++c) {
                o[y * width * s + c] = in[sy * width + c / s];
            }
        }
    }
    return out;
}

void upsample_nearest_backward(const Tensor& grad_out, std::size_t height, std::size_t width,
                               std::size_t s, Tensor& grad_x) {
    const std::size_t channels = grad_out.rows();
    for (std::size_t z = 0; z < channels; ++z) {
        const double* go = grad_out.data() + z * height * s * width * s;
        double* gx = grad_x.data() + z * height * width;
        for (std::size_t y = 0; y < height * s; ++y) {
            const std::size_t sy = y / s;
            for (std::size_t c = 0; c < width * s; ++c) {
                gx[sy * width + c / s] += go[y * width * s + c];
            }
        }
    }
}

Tensor subsample(const Tensor& x, std::size_t height, std::size_t width, std::size_t s) {
    require_grid(x, height, width, "subsample");
    if (s == 0 || height % s != 0 || width % s != 0) {
        throw ConfigError("subsample: stride " + std::to_string(s) + " must divide " +
                          std::to_string(height) + "x" + std::to_string(width));
    }
    if (s == 1) return x;
    const std::size_t channels = x.rows();
    const std::size_t oh = height / s, ow = width / s;
    Tensor out({channels, oh * ow});
    for (std::size_t z = 0; z < channels; ++z) {
        const double* in = x.data() + z * height * width;
        double* o = out.data() + z * oh * ow;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t c = 0; c < ow; ++c) {
                o[y * ow + c] = in[y * s * width + c * s];
            }
        }
    }
    return out;
}

void subsample_backward(const Tensor& grad_out, std::size_t height, std::size_t width,
                        std::size_t s, Tensor& grad_x) {
    const std::size_t channels = grad_out.rows();
    const std::size_t oh = height / s, ow = width / s;
    for (std::size_t z = 0; z < channels; ++z) {
        const double* go = grad_out.data() + z * oh * ow;
        double* gx = grad_x.data() + z * height * width;
        for (std::size_t y = 0; y < oh; ++y) {
            for (std::size_t c = 0; c < ow; ++c) {
                gx[y * s * width + c * s] += go[y * ow + c];
            }
        }
    }
}

double sum_all(const Tensor& x) {
    double acc = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
    return acc;
}

double dot_all(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot_all");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

}  // namespace mdrl
