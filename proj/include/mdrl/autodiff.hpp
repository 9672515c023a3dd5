#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "mdrl/ops.hpp"
#include "mdrl/tensor.hpp"

namespace mdrl {

namespace detail {

struct Node {
    Tensor value;
    Tensor grad;  // allocated (zeroed) at the start of each backward pass
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    const char* op = "leaf";
};

}  // namespace detail

/// Handle to one node of the recorded computation graph. Values are
/// computed eagerly; backward() replays the recorded adjoint rules in
/// reverse topological order. Copying a Var shares the node.
class Var {
public:
    Var() = default;

    /// Non-trainable input; no gradient is tracked through it.
    static Var constant(Tensor value);
    /// Trainable leaf; grad() is populated by backward().
    static Var leaf(Tensor value);

    bool valid() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    const Tensor& grad() const;
    /// True once backward() has populated this node (a leaf that never
    /// entered the graph stays without a gradient).
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_->requires_grad; }

private:
    explicit Var(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;

    friend Var wrap_node(std::shared_ptr<detail::Node> n);
    friend const std::shared_ptr<detail::Node>& share_node(const Var& v);
};

/// Seeds the scalar root with gradient 1 and accumulates gradients into
/// every reachable grad-requiring node. Gradients are zeroed first.
void backward(const Var& root);

// Graph-building operations. Same semantics as the Tensor kernels of the
// corresponding names.
Var matmul(const Var& a, const Var& b);
Var matmul_tn(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var add_n(const std::vector<Var>& xs);
Var scale(const Var& x, double s);
Var tanh_map(const Var& x);
Var softmax(const Var& x, std::size_t axis);
Var l2_normalize(const Var& x, std::size_t axis, double eps = 1e-12);
Var add_col_bias(const Var& x, const Var& bias);
Var mean_cols(const Var& x);
Var repeat_cols(const Var& v, std::size_t cols);
Var concat_rows(const std::vector<Var>& parts);
Var conv3x3_shared(const Var& x, std::size_t height, std::size_t width, const Var& kernel);
Var upsample_nearest(const Var& x, std::size_t height, std::size_t width, std::size_t s);
Var subsample(const Var& x, std::size_t height, std::size_t width, std::size_t s);
/// Scalar inner product <c, x> with a fixed coefficient tensor.
Var cdot(const Tensor& coeffs, const Var& x);

/// Node with a precomputed value and a caller-supplied backward rule. The
/// rule receives the node itself; parents are reachable through it and
/// must be guarded with requires_grad before accumulation.
Var custom_op(Tensor value, const std::vector<Var>& parents, const char* op,
              std::function<void(detail::Node&)> backward_fn);

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double tolerance = 0.0;
    bool passed() const { return max_rel_error < tolerance; }
};

/// Compares the analytic gradient of the scalar function `f` at `x`
/// against central differences with the given step. The relative error of
/// coordinate i is |a_i - n_i| / max(|a_i|, |n_i|, 1). Throws NumericError
/// (naming the coordinate) if any probe produces a non-finite value.
GradCheckReport grad_check(const std::function<Var(const Var&)>& f, const Tensor& x,
                           double step = 1e-6, double tol = 1e-4);

}  // namespace mdrl
