#include "mdrl/bank.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mdrl/ops.hpp"
#include "mdrl/rng.hpp"

namespace mdrl {

void SinkhornParams::validate() const {
    if (!(lambda > 0.0)) throw ConfigError("sinkhorn: lambda must be > 0");
    if (iterations < 1) throw ConfigError("sinkhorn: iterations must be >= 1");
}

void BankConfig::validate() const {
    if (!(momentum >= 0.0 && momentum <= 1.0)) {
        throw ConfigError("bank: momentum must lie in [0, 1]");
    }
}

AssignmentMatrix::AssignmentMatrix(Tensor values) : values_(std::move(values)) {
    if (values_.rank() != 2) {
        throw ShapeError("assignment matrix must be rank 2, got " + values_.shape_str());
    }
}

std::vector<std::size_t> AssignmentMatrix::hard_assignments() const {
    const std::size_t n = distributions(), m = pixel_count();
    std::vector<std::size_t> out(m, 0);
    for (std::size_t j = 0; j < m; ++j) {
        double best = values_.at(0, j);
        for (std::size_t i = 1; i < n; ++i) {
            if (values_.at(i, j) > best) {
                best = values_.at(i, j);
                out[j] = i;
            }
        }
    }
    return out;
}

double AssignmentMatrix::max_column_residual() const {
    const std::size_t n = distributions(), m = pixel_count();
    double worst = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += values_.at(i, j);
        worst = std::max(worst, std::abs(s - 1.0));
    }
    return worst;
}

double AssignmentMatrix::max_row_residual() const {
    const std::size_t n = distributions(), m = pixel_count();
    const double target = static_cast<double>(m) / static_cast<double>(n);
    double worst = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        const double* row = values_.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) s += row[j];
        worst = std::max(worst, std::abs(s - target));
    }
    return worst;
}

DistributionBank DistributionBank::init(std::size_t classes, std::size_t per_class,
                                        std::size_t dim, std::uint64_t seed) {
    if (classes < 2 || per_class < 1 || dim < 2) {
        throw ConfigError("bank: need C >= 2, N >= 1, Z >= 2, got C=" + std::to_string(classes) +
                          " N=" + std::to_string(per_class) + " Z=" + std::to_string(dim));
    }
    Rng rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Tensor entries({classes, per_class, dim});
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i] = gauss(rng);
    for (std::size_t c = 0; c < classes; ++c) {
        for (std::size_t n = 0; n < per_class; ++n) {
            double* e = entries.data() + (c * per_class + n) * dim;
            double n2 = 0.0;
            for (std::size_t z = 0; z < dim; ++z) n2 += e[z] * e[z];
            const double inv = 1.0 / std::sqrt(n2);
            for (std::size_t z = 0; z < dim; ++z) e[z] *= inv;
        }
    }
    entries.quantize_to_float32();
    return from_entries(classes, per_class, dim, std::move(entries));
}

DistributionBank DistributionBank::from_entries(std::size_t classes, std::size_t per_class,
                                                std::size_t dim, Tensor entries) {
    if (classes < 2 || per_class < 1 || dim < 2) {
        throw ConfigError("bank: need C >= 2, N >= 1, Z >= 2");
    }
    if (entries.size() != classes * per_class * dim) {
        throw ShapeError("bank entries " + entries.shape_str() + " do not match C*N*Z = " +
                         std::to_string(classes * per_class * dim));
    }
    DistributionBank bank;
    bank.classes_ = classes;
    bank.per_class_ = per_class;
    bank.dim_ = dim;
    bank.entries_ = Tensor::from_data({classes, per_class, dim},
                                      std::vector<double>(entries.data(),
                                                          entries.data() + entries.size()));
    return bank;
}

const double* DistributionBank::entry(std::size_t c, std::size_t n) const {
    return entries_.data() + (c * per_class_ + n) * dim_;
}

void DistributionBank::set_entry(std::size_t c, std::size_t n, std::span<const double> v) {
    if (v.size() != dim_) {
        throw ShapeError("bank set_entry: vector length " + std::to_string(v.size()) +
                         " != Z = " + std::to_string(dim_));
    }
    std::copy(v.begin(), v.end(), entries_.data() + (c * per_class_ + n) * dim_);
}

Tensor DistributionBank::group(std::size_t i) const {
    if (i >= per_class_) {
        throw ShapeError("bank group " + std::to_string(i) + " out of range, N = " +
                         std::to_string(per_class_));
    }
    Tensor g({classes_, dim_});
    for (std::size_t c = 0; c < classes_; ++c) {
        const double* e = entry(c, i);
        std::copy(e, e + dim_, g.data() + c * dim_);
    }
    return g;
}

double DistributionBank::max_norm_error() const {
    double worst = 0.0;
    for (std::size_t c = 0; c < classes_; ++c) {
        for (std::size_t n = 0; n < per_class_; ++n) {
            const double* e = entry(c, n);
            double n2 = 0.0;
            for (std::size_t z = 0; z < dim_; ++z) n2 += e[z] * e[z];
            worst = std::max(worst, std::abs(std::sqrt(n2) - 1.0));
        }
    }
    return worst;
}

NearestDistribution nearest_distribution(const DistributionBank& bank, const double* pixel) {
    NearestDistribution best;
    best.distance = std::numeric_limits<double>::infinity();
    const std::size_t dim = bank.embed_dim();
    for (std::size_t c = 0; c < bank.num_classes(); ++c) {
        for (std::size_t n = 0; n < bank.distributions_per_class(); ++n) {
            const double* e = bank.entry(c, n);
            double dot = 0.0;
            for (std::size_t z = 0; z < dim; ++z) dot += pixel[z] * e[z];
            const double dist = -dot;
            if (dist < best.distance) {
                best = {c, n, dist};
            }
        }
    }
    return best;
}

NearestDistribution nearest_distribution(const DistributionBank& bank, const Tensor& pixel) {
    if (pixel.size() != bank.embed_dim()) {
        throw ShapeError("nearest_distribution: pixel " + pixel.shape_str() +
                         " does not match Z = " + std::to_string(bank.embed_dim()));
    }
    return nearest_distribution(bank, pixel.data());
}

AssignmentMatrix sinkhorn_assign(const Tensor& scores, const SinkhornParams& params) {
    params.validate();
    if (scores.rank() != 2) {
        throw ShapeError("sinkhorn: scores must be rank 2, got " + scores.shape_str());
    }
    require_finite(scores, "sinkhorn scores");
    const std::size_t n = scores.rows(), m = scores.cols();
    if (m < 1) throw ShapeError("sinkhorn: need at least one pixel column");

    // Gibbs kernel with per-column max subtraction for stability.
    Tensor plan({n, m});
    for (std::size_t j = 0; j < m; ++j) {
        double mx = scores.at(0, j);
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, scores.at(i, j));
        for (std::size_t i = 0; i < n; ++i) {
            plan.at(i, j) = std::exp((scores.at(i, j) - mx) / params.lambda);
        }
    }

    const double row_target = static_cast<double>(m) / static_cast<double>(n);
    std::vector<double> col_sum(m);
    auto normalize_columns = [&]() {
        std::fill(col_sum.begin(), col_sum.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = plan.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) col_sum[j] += row[j];
        }
        for (std::size_t j = 0; j < m; ++j) {
            if (col_sum[j] <= 0.0) {
                throw NumericError("sinkhorn: column " + std::to_string(j) +
                                   " underflowed to zero; use a larger lambda");
            }
            col_sum[j] = 1.0 / col_sum[j];
        }
        for (std::size_t i = 0; i < n; ++i) {
            double* row = plan.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) row[j] *= col_sum[j];
        }
    };

    for (std::size_t it = 0; it < params.iterations; ++it) {
        for (std::size_t i = 0; i < n; ++i) {
            double* row = plan.data() + i * m;
            double s = 0.0;
            for (std::size_t j = 0; j < m; ++j) s += row[j];
            if (s <= 0.0) {
                throw NumericError("sinkhorn: row " + std::to_string(i) +
                                   " underflowed to zero; use a larger lambda");
            }
            const double f = row_target / s;
            for (std::size_t j = 0; j < m; ++j) row[j] *= f;
        }
        normalize_columns();
    }
    normalize_columns();

    return AssignmentMatrix(std::move(plan));
}

PixelGroups group_pixels(const Tensor& embeddings, std::span<const std::uint8_t> labels,
                         std::uint8_t ignore_label) {
    if (embeddings.rank() != 2) {
        throw ShapeError("group_pixels: embeddings must be rank 2, got " + embeddings.shape_str());
    }
    const std::size_t dim = embeddings.rows(), pixels = embeddings.cols();
    if (labels.size() != pixels) {
        throw ShapeError("group_pixels: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(pixels) + " embedding columns");
    }

    std::map<std::uint8_t, std::vector<std::size_t>> columns;
    for (std::size_t p = 0; p < pixels; ++p) {
        if (labels[p] == ignore_label) continue;
        columns[labels[p]].push_back(p);
    }

    PixelGroups groups;
    for (const auto& [cls, idx] : columns) {
        Tensor g({dim, idx.size()});
        for (std::size_t z = 0; z < dim; ++z) {
            const double* src = embeddings.data() + z * pixels;
            double* dst = g.data() + z * idx.size();
            for (std::size_t k = 0; k < idx.size(); ++k) dst[k] = src[idx[k]];
        }
        groups.by_class.emplace(cls, std::move(g));
    }
    return groups;
}

std::map<std::uint8_t, AssignmentMatrix> cluster_batch(const PixelGroups& groups,
                                                       const DistributionBank& bank,
                                                       const SinkhornParams& params,
                                                       ClusterDiagnostics* diag) {
    std::map<std::uint8_t, AssignmentMatrix> out;
    for (const auto& [cls, pixels] : groups.by_class) {
        if (cls >= bank.num_classes()) {
            throw ShapeError("cluster_batch: class " + std::to_string(cls) +
                             " outside bank with C = " + std::to_string(bank.num_classes()));
        }
        if (pixels.rows() != bank.embed_dim()) {
            throw ShapeError("cluster_batch: embedding dim " + std::to_string(pixels.rows()) +
                             " != bank Z = " + std::to_string(bank.embed_dim()));
        }
        if (pixels.cols() < bank.distributions_per_class()) {
            if (diag) ++diag->skipped_classes;
            continue;
        }
        // scores = D_c' * I_c, cosine similarities on unit vectors.
        Tensor dc({bank.embed_dim(), bank.distributions_per_class()});
        for (std::size_t n = 0; n < bank.distributions_per_class(); ++n) {
            const double* e = bank.entry(cls, n);
            for (std::size_t z = 0; z < bank.embed_dim(); ++z) dc.at(z, n) = e[z];
        }
        AssignmentMatrix assignment = sinkhorn_assign(matmul_tn(dc, pixels), params);
        if (diag) {
            ++diag->clustered_classes;
            const double residual =
                std::max(assignment.max_column_residual(),
                         assignment.max_row_residual() * static_cast<double>(assignment.distributions()) /
                             static_cast<double>(assignment.pixel_count()));
            diag->max_marginal_residual = std::max(diag->max_marginal_residual, residual);
        }
        out.emplace(cls, std::move(assignment));
    }
    return out;
}

DistributionBank update_bank(const DistributionBank& bank, const PixelGroups& groups,
                             const std::map<std::uint8_t, AssignmentMatrix>& assignments,
                             const BankConfig& config, std::vector<std::uint64_t>* update_counts) {
    config.validate();
    const std::size_t dim = bank.embed_dim();
    const std::size_t per_class = bank.distributions_per_class();
    if (update_counts && update_counts->size() != bank.num_classes() * per_class) {
        throw ShapeError("update_bank: update_counts has wrong size");
    }

    Tensor entries = bank.entries();
    const double mu = config.momentum;

    for (const auto& [cls, assignment] : assignments) {
        auto git = groups.by_class.find(cls);
        if (git == groups.by_class.end()) {
            throw ShapeError("update_bank: assignment for class " + std::to_string(cls) +
                             " has no pixel group");
        }
        const Tensor& pixels = git->second;
        if (assignment.pixel_count() != pixels.cols() || assignment.distributions() != per_class) {
            throw ShapeError("update_bank: assignment " + assignment.values().shape_str() +
                             " does not match pixel group " + pixels.shape_str());
        }

        const std::vector<std::size_t> hard = assignment.hard_assignments();
        std::vector<double> sums(per_class * dim, 0.0);
        std::vector<std::size_t> counts(per_class, 0);
        for (std::size_t p = 0; p < hard.size(); ++p) ++counts[hard[p]];
        for (std::size_t z = 0; z < dim; ++z) {
            const double* row = pixels.data() + z * pixels.cols();
            for (std::size_t p = 0; p < hard.size(); ++p) sums[hard[p] * dim + z] += row[p];
        }

        for (std::size_t n = 0; n < per_class; ++n) {
            if (counts[n] == 0) continue;
            if (update_counts) ++(*update_counts)[cls * per_class + n];
            if (mu == 1.0) continue;  // entries unchanged exactly

            double* target = sums.data() + n * dim;
            double n2 = 0.0;
            for (std::size_t z = 0; z < dim; ++z) n2 += target[z] * target[z];
            if (n2 <= 0.0) continue;  // degenerate cancellation, keep old entry
            const double inv = 1.0 / std::sqrt(n2);
            for (std::size_t z = 0; z < dim; ++z) target[z] *= inv;  // b_{c,n}

            double* e = entries.data() + (cls * per_class + n) * dim;
            if (mu == 0.0) {
                for (std::size_t z = 0; z < dim; ++z) e[z] = target[z];
            } else {
                double m2 = 0.0;
                for (std::size_t z = 0; z < dim; ++z) {
                    e[z] = mu * e[z] + (1.0 - mu) * target[z];
                    m2 += e[z] * e[z];
                }
                const double renorm = 1.0 / std::sqrt(m2);
                for (std::size_t z = 0; z < dim; ++z) e[z] *= renorm;
            }
            // Quantize only the rewritten entry; untouched entries stay
            // bitwise identical.
            for (std::size_t z = 0; z < dim; ++z) {
                e[z] = static_cast<double>(static_cast<float>(e[z]));
            }
        }
    }

    return DistributionBank::from_entries(bank.num_classes(), per_class, dim, std::move(entries));
}

}  // namespace mdrl
