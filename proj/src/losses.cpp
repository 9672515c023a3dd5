#include "mdrl/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

namespace mdrl {

void LossConfig::validate() const {
    if (eta < 0.0 || alpha < 0.0 || beta < 0.0) {
        throw ConfigError("loss: eta, alpha, beta must be >= 0");
    }
    if (!(tau > 0.0)) throw ConfigError("loss: tau must be > 0");
}

LossBreakdown combine_losses(double cls, double aug, double clcl, double cgcl,
                             const LossConfig& config) {
    config.validate();
    auto check = [](double v, const char* name) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string("loss part '") + name + "' is not finite");
        }
    };
    check(cls, "cls");
    check(aug, "aug");
    check(clcl, "clcl");
    check(cgcl, "cgcl");
    LossBreakdown out;
    out.cls = cls;
    out.aug = aug;
    out.clcl = clcl;
    out.cgcl = cgcl;
    out.total = config.eta * cls + aug + config.alpha * clcl + config.beta * cgcl;
    return out;
}

namespace {

std::vector<std::size_t> valid_positions(std::span<const std::uint8_t> labels,
                                         std::uint8_t ignore_label, std::size_t expected,
                                         std::size_t num_classes, const char* what) {
    if (labels.size() != expected) {
        throw ShapeError(std::string(what) + ": " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(expected) + " positions");
    }
    std::vector<std::size_t> valid;
    valid.reserve(labels.size());
    for (std::size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] == ignore_label) continue;
        if (labels[p] >= num_classes) {
            throw ShapeError(std::string(what) + ": label " + std::to_string(labels[p]) +
                             " outside C = " + std::to_string(num_classes));
        }
        valid.push_back(p);
    }
    return valid;
}

Var zero_scalar_like(const Var& parent) {
    // Keeps the graph rooted even when nothing is valid.
    return cdot(Tensor(parent.value().shape()), parent);
}

/// logit_c = max_n <e_p, d_{c,n}>, with the argmax per class.
void nearest_logits(const DistributionBank& bank, const Tensor& emb, std::size_t p,
                    std::vector<double>& logits, std::vector<std::size_t>& arg) {
    const std::size_t classes = bank.num_classes();
    const std::size_t per_class = bank.distributions_per_class();
    const std::size_t dim = bank.embed_dim();
    for (std::size_t c = 0; c < classes; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_n = 0;
        for (std::size_t n = 0; n < per_class; ++n) {
            const double* d = bank.entry(c, n);
            double dot = 0.0;
            for (std::size_t z = 0; z < dim; ++z) dot += emb.at(z, p) * d[z];
            if (dot > best) {
                best = dot;
                best_n = n;
            }
        }
        logits[c] = best;
        arg[c] = best_n;
    }
}

/// a_{c,n} = <e_p, d_{c,n}>/tau for every bank entry.
void scaled_similarities(const DistributionBank& bank, double tau, const Tensor& emb,
                         std::size_t p, std::vector<double>& sims) {
    const std::size_t classes = bank.num_classes();
    const std::size_t per_class = bank.distributions_per_class();
    const std::size_t dim = bank.embed_dim();
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t n = 0; n < per_class; ++n) {
            const double* d = bank.entry(c, n);
            double dot = 0.0;
            for (std::size_t z = 0; z < dim; ++z) dot += emb.at(z, p) * d[z];
            sims[c * per_class + n] = dot / tau;
        }
    }
}

void require_embedding_inputs(const Tensor& e, const DistributionBank& bank, const char* what) {
    if (e.rank() != 2 || e.rows() != bank.embed_dim()) {
        throw ShapeError(std::string(what) + ": embeddings " + e.shape_str() +
                         " do not match bank Z = " + std::to_string(bank.embed_dim()));
    }
}

}  // namespace

Var cross_entropy_loss(const Var& logits, std::span<const std::uint8_t> labels,
                       std::uint8_t ignore_label, PixelLossStats* stats) {
    const Tensor& l = logits.value();
    if (l.rank() != 2) {
        throw ShapeError("cross_entropy: logits must be rank 2, got " + l.shape_str());
    }
    const std::size_t classes = l.rows();
    std::vector<std::size_t> valid =
        valid_positions(labels, ignore_label, l.cols(), classes, "cross_entropy");
    if (stats) {
        stats->valid_pixels = valid.size();
        stats->empty = valid.empty();
    }
    if (valid.empty()) return zero_scalar_like(logits);

    double loss = 0.0;
    for (std::size_t p : valid) {
        double mx = l.at(0, p);
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, l.at(c, p));
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(l.at(c, p) - mx);
        loss += mx + std::log(sum) - l.at(labels[p], p);
    }
    loss /= static_cast<double>(valid.size());

    std::vector<std::uint8_t> labels_copy(labels.begin(), labels.end());
    return custom_op(
        Tensor::scalar(loss), {logits}, "cross_entropy",
        [labels_copy = std::move(labels_copy), valid = std::move(valid),
         classes](detail::Node& self) {
            detail::Node& lg = *self.parents[0];
            if (!lg.requires_grad) return;
            const Tensor& lv = lg.value;
            const double g = self.grad[0] / static_cast<double>(valid.size());
            std::vector<double> probs(classes);
            for (std::size_t p : valid) {
                double mx = lv.at(0, p);
                for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, lv.at(c, p));
                double sum = 0.0;
                for (std::size_t c = 0; c < classes; ++c) {
                    probs[c] = std::exp(lv.at(c, p) - mx);
                    sum += probs[c];
                }
                const double inv = 1.0 / sum;
                for (std::size_t c = 0; c < classes; ++c) {
                    lg.grad.at(c, p) +=
                        g * (probs[c] * inv - (c == labels_copy[p] ? 1.0 : 0.0));
                }
            }
        });
}

Var class_local_consistency_loss(const Var& embeddings, std::span<const std::uint8_t> labels,
                                 const DistributionBank& bank, std::uint8_t ignore_label,
                                 PixelLossStats* stats) {
    const Tensor& e = embeddings.value();
    require_embedding_inputs(e, bank, "clcl");
    const std::size_t classes = bank.num_classes();
    const std::size_t dim = bank.embed_dim();
    std::vector<std::size_t> valid =
        valid_positions(labels, ignore_label, e.cols(), classes, "clcl");
    if (stats) {
        stats->valid_pixels = valid.size();
        stats->empty = valid.empty();
    }
    if (valid.empty()) return zero_scalar_like(embeddings);

    double loss = 0.0;
    std::vector<double> logits(classes);
    std::vector<std::size_t> arg(classes);
    for (std::size_t p : valid) {
        nearest_logits(bank, e, p, logits, arg);
        double mx = logits[0];
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, logits[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(logits[c] - mx);
        loss += mx + std::log(sum) - logits[labels[p]];
    }
    loss /= static_cast<double>(valid.size());

    std::vector<std::uint8_t> labels_copy(labels.begin(), labels.end());
    return custom_op(
        Tensor::scalar(loss), {embeddings}, "clcl",
        [labels_copy = std::move(labels_copy), valid = std::move(valid), bank_copy = bank,
         classes, dim](detail::Node& self) {
            detail::Node& en = *self.parents[0];
            if (!en.requires_grad) return;
            const double g = self.grad[0] / static_cast<double>(valid.size());
            std::vector<double> logits(classes);
            std::vector<std::size_t> arg(classes);
            for (std::size_t p : valid) {
                nearest_logits(bank_copy, en.value, p, logits, arg);
                double mx = logits[0];
                for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, logits[c]);
                double sum = 0.0;
                for (std::size_t c = 0; c < classes; ++c) sum += std::exp(logits[c] - mx);
                const double inv = 1.0 / sum;
                for (std::size_t c = 0; c < classes; ++c) {
                    const double soft = std::exp(logits[c] - mx) * inv;
                    const double coeff = g * (soft - (c == labels_copy[p] ? 1.0 : 0.0));
                    const double* d = bank_copy.entry(c, arg[c]);
                    for (std::size_t z = 0; z < dim; ++z) en.grad.at(z, p) += coeff * d[z];
                }
            }
        });
}

Var class_global_consistency_loss(const Var& embeddings, std::span<const std::uint8_t> labels,
                                  const DistributionBank& bank, double tau,
                                  std::uint8_t ignore_label, PixelLossStats* stats) {
    if (!(tau > 0.0)) throw ConfigError("cgcl: tau must be > 0");
    const Tensor& e = embeddings.value();
    require_embedding_inputs(e, bank, "cgcl");
    const std::size_t classes = bank.num_classes();
    const std::size_t per_class = bank.distributions_per_class();
    const std::size_t dim = bank.embed_dim();
    std::vector<std::size_t> valid =
        valid_positions(labels, ignore_label, e.cols(), classes, "cgcl");
    if (stats) {
        stats->valid_pixels = valid.size();
        stats->empty = valid.empty();
    }
    if (valid.empty()) return zero_scalar_like(embeddings);

    double loss = 0.0;
    std::vector<double> sims(classes * per_class);
    std::vector<double> class_sum(classes);
    std::vector<double> terms(per_class);
    for (std::size_t p : valid) {
        scaled_similarities(bank, tau, e, p, sims);
        const double gmax = *std::max_element(sims.begin(), sims.end());
        for (std::size_t c = 0; c < classes; ++c) {
            for (std::size_t n = 0; n < per_class; ++n) {
                terms[n] = std::exp(sims[c * per_class + n] - gmax);
            }
            std::sort(terms.begin(), terms.end());
            double s = 0.0;
            for (double t : terms) s += t;
            class_sum[c] = s;
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < classes; ++c) denom += class_sum[c];
        loss += std::log(denom) - std::log(class_sum[labels[p]]);
    }
    loss /= static_cast<double>(valid.size());

    std::vector<std::uint8_t> labels_copy(labels.begin(), labels.end());
    return custom_op(
        Tensor::scalar(loss), {embeddings}, "cgcl",
        [labels_copy = std::move(labels_copy), valid = std::move(valid), bank_copy = bank, tau,
         classes, per_class, dim](detail::Node& self) {
            detail::Node& en = *self.parents[0];
            if (!en.requires_grad) return;
            const double g = self.grad[0] / static_cast<double>(valid.size());
            std::vector<double> sims(classes * per_class);
            std::vector<double> expv(classes * per_class);
            for (std::size_t p : valid) {
                scaled_similarities(bank_copy, tau, en.value, p, sims);
                const double gmax = *std::max_element(sims.begin(), sims.end());
                double denom = 0.0;
                double pos_sum = 0.0;
                const std::size_t gt = labels_copy[p];
                for (std::size_t i = 0; i < sims.size(); ++i) {
                    expv[i] = std::exp(sims[i] - gmax);
                    denom += expv[i];
                }
                for (std::size_t n = 0; n < per_class; ++n) pos_sum += expv[gt * per_class + n];
                for (std::size_t c = 0; c < classes; ++c) {
                    for (std::size_t n = 0; n < per_class; ++n) {
                        const std::size_t i = c * per_class + n;
                        double da = expv[i] / denom;
                        if (c == gt) da -= expv[i] / pos_sum;
                        const double coeff = g * da / tau;
                        const double* d = bank_copy.entry(c, n);
                        for (std::size_t z = 0; z < dim; ++z) en.grad.at(z, p) += coeff * d[z];
                    }
                }
            }
        });
}

Var total_loss(const Var& cls, const Var& aug, const Var& clcl, const Var& cgcl,
               const LossConfig& config) {
    config.validate();
    return add_n({scale(cls, config.eta), aug, scale(clcl, config.alpha),
                  scale(cgcl, config.beta)});
}

}  // namespace mdrl
