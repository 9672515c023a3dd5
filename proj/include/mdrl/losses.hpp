#pragma once

#include <cstdint>
#include <span>

#include "mdrl/autodiff.hpp"
#include "mdrl/bank.hpp"

namespace mdrl {

struct LossConfig {
    double eta = 0.4;    // weight of the base classification loss
    double alpha = 0.01; // weight of the class local consistency loss
    double beta = 0.05;  // weight of the class global consistency loss
    double tau = 0.5;    // contrastive temperature
    std::uint8_t ignore_label = 255;

    void validate() const;
};

struct LossBreakdown {
    double cls = 0.0;
    double aug = 0.0;
    double clcl = 0.0;
    double cgcl = 0.0;
    double total = 0.0;
};

/// total = eta*cls + aug + alpha*clcl + beta*cgcl. Throws NumericError
/// naming the first non-finite part.
LossBreakdown combine_losses(double cls, double aug, double clcl, double cgcl,
                             const LossConfig& config);

struct PixelLossStats {
    std::size_t valid_pixels = 0;
    bool empty = false;  // set when every position carried the ignore label
};

/// Mean softmax cross-entropy over non-ignored positions of a [C x P]
/// logit map. Returns a constant 0 (with stats.empty) when nothing is valid.
Var cross_entropy_loss(const Var& logits, std::span<const std::uint8_t> labels,
                       std::uint8_t ignore_label, PixelLossStats* stats = nullptr);

/// Class local consistency: softmax cross-entropy over classes whose score
/// is the best cosine similarity against the class's N distribution
/// features. The max is a hard selection; gradients flow through the
/// selected entry only, and only into the embeddings (the bank is
/// constant). embeddings is [Z x P] with unit-norm columns.
Var class_local_consistency_loss(const Var& embeddings, std::span<const std::uint8_t> labels,
                                 const DistributionBank& bank, std::uint8_t ignore_label,
                                 PixelLossStats* stats = nullptr);

/// Class global consistency: temperature-tau contrastive loss with the N
/// same-class features as positives and the (C-1)*N remaining features as
/// negatives. Per-class sums are accumulated in sorted order so the value
/// is exactly invariant under within-class permutations of the bank.
Var class_global_consistency_loss(const Var& embeddings, std::span<const std::uint8_t> labels,
                                  const DistributionBank& bank, double tau,
                                  std::uint8_t ignore_label, PixelLossStats* stats = nullptr);

/// Weighted combination of the four scalar loss terms as a graph node.
Var total_loss(const Var& cls, const Var& aug, const Var& clcl, const Var& cgcl,
               const LossConfig& config);

}  // namespace mdrl
