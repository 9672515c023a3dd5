#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "mdrl/tensor.hpp"

namespace mdrl {

/// Entropic regularization and iteration budget for the balanced
/// assignment solver.
struct SinkhornParams {
    double lambda = 0.05;
    std::size_t iterations = 3;

    void validate() const;
};

struct BankConfig {
    double momentum = 0.999;
    std::uint64_t init_seed = 0;
    std::size_t warmup_steps = 0;

    void validate() const;
};

/// Soft assignment of M pixels (columns) to N distributions (rows).
/// Columns sum to 1; rows sum to M/N at convergence.
class AssignmentMatrix {
public:
    AssignmentMatrix() = default;
    explicit AssignmentMatrix(Tensor values);

    const Tensor& values() const { return values_; }
    std::size_t distributions() const { return values_.rows(); }
    std::size_t pixel_count() const { return values_.cols(); }

    /// Argmax row per column; ties break to the lowest row index.
    std::vector<std::size_t> hard_assignments() const;

    double max_column_residual() const;
    double max_row_residual() const;

private:
    Tensor values_;
};

/// Class-level store of N unit-norm distribution features per class.
/// Entries are updated by the momentum rule only, never by backprop, and
/// are kept at single precision so checkpoints round-trip exactly.
class DistributionBank {
public:
    DistributionBank() = default;  // empty placeholder; fill via init/from_entries

    static DistributionBank init(std::size_t classes, std::size_t per_class, std::size_t dim,
                                 std::uint64_t seed);
    static DistributionBank from_entries(std::size_t classes, std::size_t per_class,
                                         std::size_t dim, Tensor entries);

    std::size_t num_classes() const { return classes_; }
    std::size_t distributions_per_class() const { return per_class_; }
    std::size_t embed_dim() const { return dim_; }

    const Tensor& entries() const { return entries_; }
    const double* entry(std::size_t c, std::size_t n) const;
    void set_entry(std::size_t c, std::size_t n, std::span<const double> v);

    /// The i-th distribution feature of every class, as a [C x Z] matrix.
    Tensor group(std::size_t i) const;

    /// Largest |norm - 1| over all entries.
    double max_norm_error() const;

private:
    std::size_t classes_ = 0, per_class_ = 0, dim_ = 0;
    Tensor entries_;  // [C, N, Z]
};

struct NearestDistribution {
    std::size_t class_index = 0;
    std::size_t distribution_index = 0;
    double distance = 0.0;  // negative cosine similarity
};

/// Exhaustive scan over all C*N entries; ties break to the lowest
/// (class, index) pair. `pixel` must be a unit vector of length Z.
NearestDistribution nearest_distribution(const DistributionBank& bank, const double* pixel);
NearestDistribution nearest_distribution(const DistributionBank& bank, const Tensor& pixel);

/// Balanced entropic assignment: maximizes <L, scores> + lambda * H(L)
/// subject to column sums 1 and row sums M/N, via alternating row/column
/// rescalings of exp(scores/lambda). Column maxima are subtracted before
/// exponentiation, which leaves the solution invariant. The final column
/// normalization makes column sums exact.
AssignmentMatrix sinkhorn_assign(const Tensor& scores, const SinkhornParams& params);

/// Pixels of one batch grouped by ground-truth class; each entry is a
/// [Z x M_c] matrix of unit-norm embeddings.
struct PixelGroups {
    std::map<std::uint8_t, Tensor> by_class;
};

PixelGroups group_pixels(const Tensor& embeddings, std::span<const std::uint8_t> labels,
                         std::uint8_t ignore_label);

struct ClusterDiagnostics {
    std::size_t clustered_classes = 0;
    std::size_t skipped_classes = 0;  // classes present but with fewer than N pixels
    double max_marginal_residual = 0.0;
};

/// One assignment per class with at least N pixels; smaller classes are
/// skipped and counted in the diagnostics.
std::map<std::uint8_t, AssignmentMatrix> cluster_batch(const PixelGroups& groups,
                                                       const DistributionBank& bank,
                                                       const SinkhornParams& params,
                                                       ClusterDiagnostics* diag = nullptr);

/// Momentum update d <- mu*d + (1-mu)*b with b the normalized mean of the
/// pixels whose hard assignment lands on that distribution; the result is
/// renormalized. Entries with no assigned pixels are unchanged. When
/// `update_counts` is given (size C*N), assigned entries are incremented.
DistributionBank update_bank(const DistributionBank& bank, const PixelGroups& groups,
                             const std::map<std::uint8_t, AssignmentMatrix>& assignments,
                             const BankConfig& config,
                             std::vector<std::uint64_t>* update_counts = nullptr);

}  // namespace mdrl
