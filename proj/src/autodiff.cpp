#include "mdrl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace mdrl {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr make_node(Tensor value, std::vector<NodePtr> parents, const char* op) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = op;
#ifndef NDEBUG
    require_finite(n->value, op);
#endif
    for (const NodePtr& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
    n->parents = std::move(parents);
    return n;
}

bool needs(const NodePtr& p) { return p->requires_grad; }

}  // namespace

Var wrap_node(NodePtr n) { return Var(std::move(n)); }

const NodePtr& share_node(const Var& v) { return v.node_; }

namespace {

NodePtr node_ptr(const Var& v) {
    if (!v.valid()) throw ShapeError("operation on an empty Var");
    return share_node(v);
}

}  // namespace

Var Var::constant(Tensor value) {
    return wrap_node(make_node(std::move(value), {}, "constant"));
}

Var Var::leaf(Tensor value) {
    auto n = make_node(std::move(value), {}, "leaf");
    n->requires_grad = true;
    return wrap_node(std::move(n));
}

const Tensor& Var::grad() const {
    if (node_->grad.empty()) {
        throw NumericError("gradient not computed for this Var (run backward first)");
    }
    return node_->grad;
}

void backward(const Var& root) {
    if (!root.valid()) throw ShapeError("backward: empty Var");
    Node* root_node = share_node(root).get();
    if (root_node->value.size() != 1) {
        throw ShapeError("backward: root must be scalar, got " + root_node->value.shape_str());
    }
    if (!root_node->requires_grad) {
        throw NumericError("backward: root does not depend on any trainable leaf");
    }

    // Iterative post-order DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root_node, 0);
    seen.insert(root_node);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = &*node->parents[next++];
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        n->grad = Tensor(n->value.shape());
    }
    root_node->grad[0] = 1.0;

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// Operations

namespace {

Var make_matmul(const Var& a, const Var& b, bool ta, bool tb, const char* op) {
    NodePtr pa = node_ptr(a), pb = node_ptr(b);
    Tensor out;
    matmul_into(out, pa->value, ta, pb->value, tb, false);
    NodePtr n = make_node(std::move(out), {pa, pb}, op);
    if (n->requires_grad) {
        Node *ra = &*pa, *rb = &*pb;
        n->backward_fn = [ra, rb, ta, tb](Node& self) {
            if (!ta && !tb) {
                if (ra->requires_grad) matmul_into(ra->grad, self.grad, false, rb->value, true, true);
                if (rb->requires_grad) matmul_into(rb->grad, ra->value, true, self.grad, false, true);
            } else if (ta && !tb) {
                if (ra->requires_grad) matmul_into(ra->grad, rb->value, false, self.grad, true, true);
                if (rb->requires_grad) matmul_into(rb->grad, ra->value, false, self.grad, false, true);
            } else if (!ta && tb) {
                if (ra->requires_grad) matmul_into(ra->grad, self.grad, false, rb->value, false, true);
                if (rb->requires_grad) matmul_into(rb->grad, self.grad, true, ra->value, false, true);
            } else {
                if (ra->requires_grad) matmul_into(ra->grad, rb->value, true, self.grad, true, true);
                if (rb->requires_grad) matmul_into(rb->grad, self.grad, true, ra->value, true, true);
            }
        };
    }
    return wrap_node(std::move(n));
}

}  // namespace

Var matmul(const Var& a, const Var& b) { return make_matmul(a, b, false, false, "matmul"); }
Var matmul_tn(const Var& a, const Var& b) { return make_matmul(a, b, true, false, "matmul_tn"); }
Var matmul_nt(const Var& a, const Var& b) { return make_matmul(a, b, false, true, "matmul_nt"); }

Var add(const Var& a, const Var& b) {
    NodePtr pa = node_ptr(a), pb = node_ptr(b);
    NodePtr n = make_node(mdrl::add(pa->value, pb->value), {pa, pb}, "add");
    if (n->requires_grad) {
        Node *ra = &*pa, *rb = &*pb;
        n->backward_fn = [ra, rb](Node& self) {
            if (ra->requires_grad) axpy(ra->grad, 1.0, self.grad);
            if (rb->requires_grad) axpy(rb->grad, 1.0, self.grad);
        };
    }
    return wrap_node(std::move(n));
}

Var add_n(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("add_n: no inputs");
    std::vector<NodePtr> parents;
    parents.reserve(xs.size());
    Tensor out = xs[0].value();
    parents.push_back(node_ptr(xs[0]));
    for (std::size_t i = 1; i < xs.size(); ++i) {
        parents.push_back(node_ptr(xs[i]));
        if (!out.same_shape(parents[i]->value)) {
            throw ShapeError("add_n: shape mismatch " + out.shape_str() + " vs " +
                             parents[i]->value.shape_str());
        }
        for (std::size_t k = 0; k < out.size(); ++k) out[k] += parents[i]->value[k];
    }
    NodePtr n = make_node(std::move(out), std::move(parents), "add_n");
    if (n->requires_grad) {
        n->backward_fn = [](Node& self) {
            for (const NodePtr& p : self.parents) {
                if (p->requires_grad) axpy(p->grad, 1.0, self.grad);
            }
        };
    }
    return wrap_node(std::move(n));
}

Var scale(const Var& x, double s) {
    NodePtr px = node_ptr(x);
    NodePtr n = make_node(mdrl::scale(px->value, s), {px}, "scale");
    if (n->requires_grad) {
        Node* rx = &*px;
        n->backward_fn = [rx, s](Node& self) { axpy(rx->grad, s, self.grad); };
    }
    return wrap_node(std::move(n));
}

Var tanh_map(const Var& x) {
    NodePtr px = node_ptr(x);
    NodePtr n = make_node(mdrl::tanh_map(px->value), {px}, "tanh");
    if (n->requires_grad) {
        Node* rx = &*px;
        n->backward_fn = [rx](Node& self) {
            for (std::size_t i = 0; i < self.value.size(); ++i) {
                rx->grad[i] += (1.0 - self.value[i] * self.value[i]) * self.grad[i];
            }
        };
    }
    return wrap_node(std::move(n));
}

Var softmax(const Var& x, std::size_t axis) {
    NodePtr px = node_ptr(x);
    NodePtr n = make_node(mdrl::softmax(px->value, axis), {px}, "softmax");
    if (n->requires_grad) {
        Node* rx = &*px;
        n->backward_fn = [rx, axis](Node& self) {
            const Tensor& y = self.value;
            const Tensor& dy = self.grad;
            const std::size_t rows = y.rows(), cols = y.cols();
            if (axis == 1) {
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* yr = y.data() + r * cols;
                    const double* gr = dy.data() + r * cols;
                    double dot = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
                    double* out = rx->grad.data() + r * cols;
                    for (std::size_t c = 0; c < cols; ++c) out[c] += yr[c] * (gr[c] - dot);
                }
            } else {
                for (std::size_t c = 0; c < cols; ++c) {
                    double dot = 0.0;
                    for (std::size_t r = 0; r < rows; ++r) dot += y.at(r, c) * dy.at(r, c);
                    for (std::size_t r = 0; r < rows; ++r) {
                        rx->grad.at(r, c) += y.at(r, c) * (dy.at(r, c) - dot);
                    }
                }
            }
        };
    }
    return wrap_node(std::move(n));
}

Var l2_normalize(const Var& x, std::size_t axis, double eps) {
    NodePtr px = node_ptr(x);
    NodePtr n = make_node(mdrl::l2_normalize(px->value, axis, eps), {px}, "l2_normalize");
    if (n->requires_grad) {
        Node* rx = &*px;
        n->backward_fn = [rx, axis, eps](Node& self) {
            const Tensor& xin = rx->value;
            const Tensor& y = self.value;
            const Tensor& dy = self.grad;
            const std::size_t rows = xin.rows(), cols = xin.cols();
            const std::size_t slices = (axis == 1) ? rows : cols;
            const std::size_t len = (axis == 1) ? cols : rows;
            for (std::size_t s = 0; s < slices; ++s) {
                auto idx = [&](std::size_t k) {
                    return (axis == 1) ? s * cols + k : k * cols + s;
                };
                double n2 = 0.0;
                for (std::size_t k = 0; k < len; ++k) n2 += xin[idx(k)] * xin[idx(k)];
                const double norm = std::sqrt(n2);
                if (norm < eps) {
                    for (std::size_t k = 0; k < len; ++k) rx->grad[idx(k)] += dy[idx(k)];
                    continue;
                }
                double dot = 0.0;
                for (std::size_t k = 0; k < len; ++k) dot += y[idx(k)] * dy[idx(k)];
                const double inv = 1.0 / norm;
                for (std::size_t k = 0; k < len; ++k) {
                    rx->grad[idx(k)] += (dy[idx(k)] - y[idx(k)] * dot) * inv;
                }
            }
        };
    }
    return wrap_node(std::move(n));
}

Var add_col_bias(const Var& x, const Var& bias) {
    NodePtr px = node_ptr(x), pb = node_ptr(bias);
    NodePtr n = make_node(mdrl::add_col_bias(px->value, pb->value), {px, pb}, "add_col_bias");
    if (n->requires_grad) {
        Node *rx = &*px, *rb = &*pb;
        n->backward_fn = [rx, rb](Node& self) {
            const std::size_t rows = self.value.rows(), cols = self.value.cols();
            if (rx->requires_grad) axpy(rx->grad, 1.0, self.grad);
            if (rb->requires_grad) {
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* g = self.grad.data() + r * cols;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) acc += g[c];
                    rb->grad[r] += acc;
                }
            }
        };
    }
    return wrap_node(std::move(n));
}

Var mean_cols(const Var& x) {
    NodePtr px = node_ptr(x);
    NodePtr n = make_node(mdrl::mean_cols(px->value), {px}, "mean_cols");
    if (n->requires_grad) {
        Node* rx = &*px;
        n->backward_fn = [rx](Node& self) {
            const std::size_t rows = rx->value.rows(), cols = rx->value.cols();
            const double inv = 1.0 / static_cast<double>(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                const double g = self.grad[r] * inv;
                double* out = rx->grad.data() + r * cols;
                for (std::size_t c = 0; c < cols; ++c) out[c] += g;
            }
        };
    }
    return wrap_node(std::move(n));
}

Var repeat_cols(const Var& v, std::size_t cols) {
    NodePtr pv = node_ptr(v);
    NodePtr n = make_node(mdrl::repeat_cols(pv->value, cols), {pv}, "repeat_cols");
    if (n->requires_grad) {
        Node* rv = &*pv;
        n->backward_fn = [rv, cols](Node& self) {
            const std::size_t rows = rv->value.size();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* g = self.grad.data() + r * cols;
                double acc = 0.0;
                for (std::size_t c = 0; c < cols; ++c) acc += g[c];
                rv->grad[r] += acc;
            }
        };
    }
    return wrap_node(std::move(n));
}

Var concat_rows(const std::vector<Var>& parts) {
    std::vector<NodePtr> parents;
    std::vector<const Tensor*> values;
    parents.reserve(parts.size());
    for (const Var& p : parts) {
        parents.push_back(node_ptr(p));
        values.push_back(&parents.back()->value);
    }
    NodePtr n = make_node(mdrl::concat_rows(values), std::move(parents), "concat_rows");
    if (n->requires_grad) {
        n->backward_fn = [](Node& self) {
            const std::size_t cols = self.value.cols();
            std::size_t row0 = 0;
            for (const NodePtr& p : self.parents) {
                const std::size_t rows = p->value.rows();
                if (p->requires_grad) {
                    const double* g = self.grad.data() + row0 * cols;
                    for (std::size_t i = 0; i < rows * cols; ++i) p->grad[i] += g[i];
                }
                row0 += rows;
            }
        };
    }
    return wrap_node(std::move(n));
}

Var conv3x3_shared(const Var& x, std::size_t height, std::size_t width, const Var& kernel) {
    NodePtr px = node_ptr(x), pk = node_ptr(kernel);
    NodePtr n = make_node(mdrl::conv3x3_shared(px->value, height, width, pk->value), {px, pk},
                          "conv3x3");
    if (n->requires_grad) {
        Node *rx = &*px, *rk = &*pk;
        n->backward_fn = [rx, rk, height, width](Node& self) {
            Tensor empty;
            conv3x3_shared_backward(self.grad, rx->value, rk->value, height, width,
                                    rx->requires_grad ? rx->grad : empty,
                                    rk->requires_grad ? rk->grad : empty);
        };
    }
    return wrap_node(std::move(n));
}

Var upsample_nearest(const Var& x, std::size_t height, std::size_t width, std::size_t s) {
    NodePtr px = node_ptr(x);
    NodePtr n = make_node(mdrl::upsample_nearest(px->value, height, width, s), {px}, "upsample");
    if (n->requires_grad) {
        Node* rx = &*px;
        n->backward_fn = [rx, height, width, s](Node& self) {
            if (s == 1) {
                axpy(rx->grad, 1.0, self.grad);
            } else {
                upsample_nearest_backward(self.grad, height, width, s, rx->grad);
            }
        };
    }
    return wrap_node(std::move(n));
}

Var subsample(const Var& x, std::size_t height, std::size_t width, std::size_t s) {
    NodePtr px = node_ptr(x);
    NodePtr n = make_node(mdrl::subsample(px->value, height, width, s), {px}, "subsample");
    if (n->requires_grad) {
        Node* rx = &*px;
        n->backward_fn = [rx, height, width, s](Node& self) {
            if (s == 1) {
                axpy(rx->grad, 1.0, self.grad);
            } else {
                subsample_backward(self.grad, height, width, s, rx->grad);
            }
        };
    }
    return wrap_node(std::move(n));
}

Var cdot(const Tensor& coeffs, const Var& x) {
    NodePtr px = node_ptr(x);
    NodePtr n = make_node(Tensor::scalar(dot_all(coeffs, px->value)), {px}, "cdot");
    if (n->requires_grad) {
        Node* rx = &*px;
        Tensor c = coeffs;
        n->backward_fn = [rx, c = std::move(c)](Node& self) {
            axpy(rx->grad, self.grad[0], c);
        };
    }
    return wrap_node(std::move(n));
}

Var custom_op(Tensor value, const std::vector<Var>& parents, const char* op,
              std::function<void(detail::Node&)> backward_fn) {
    std::vector<NodePtr> ps;
    ps.reserve(parents.size());
    for (const Var& p : parents) ps.push_back(node_ptr(p));
    NodePtr n = make_node(std::move(value), std::move(ps), op);
    if (n->requires_grad) n->backward_fn = std::move(backward_fn);
    return wrap_node(std::move(n));
}

GradCheckReport grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, double step,
                           double tol) {
    if (step <= 0.0) throw ConfigError("grad_check: step must be positive");

    Var vx = Var::leaf(x);
    Var y = f(vx);
    if (y.value().size() != 1) {
        throw ShapeError("grad_check: f must return a scalar, got " + y.value().shape_str());
    }
    if (!std::isfinite(y.value()[0])) {
        throw NumericError("grad_check: non-finite value at the expansion point");
    }
    backward(y);
    Tensor analytic = vx.grad();

    auto probe = [&](const Tensor& xp, std::size_t i) {
        const double v = f(Var::constant(xp)).value().item();
        if (!std::isfinite(v)) {
            throw NumericError("grad_check: non-finite value probing index " + std::to_string(i));
        }
        return v;
    };

    GradCheckReport report;
    report.tolerance = tol;
    Tensor xp = x;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double orig = xp[i];
        xp[i] = orig + step;
        const double fp = probe(xp, i);
        xp[i] = orig - step;
        const double fm = probe(xp, i);
        xp[i] = orig;
        const double numeric = (fp - fm) / (2.0 * step);
        const double a = analytic[i];
        const double denom = std::max({std::abs(a), std::abs(numeric), 1.0});
        const double rel = std::abs(a - numeric) / denom;
        if (rel > report.max_rel_error) {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
    }
    return report;
}

}  // namespace mdrl
