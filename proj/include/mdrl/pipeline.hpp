#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mdrl/autodiff.hpp"
#include "mdrl/bank.hpp"

namespace mdrl {

struct ModelDims {
    std::size_t input_dim = 8;
    std::size_t hidden_dim = 16;
    std::size_t embed_dim = 8;
    std::size_t key_dim = 4;  // attention key width, Z/2 by default
    std::size_t num_classes = 4;
    std::size_t stride = 1;
    bool ssa_enabled = false;

    void validate() const;
    std::size_t fuse_input_dim() const { return embed_dim * (ssa_enabled ? 3 : 2); }
};

/// All trainable parameters. Values are kept at single precision (stored
/// in doubles) so the float32 checkpoint format is lossless.
struct Model {
    ModelDims dims;

    // Per-pixel two-layer map followed by a shared 3x3 mixing stencil.
    Tensor enc_w1, enc_b1, enc_w2, enc_b2, enc_mix;
    // Head producing the class probability map; its logits also serve the
    // base classification loss.
    Tensor weight_w, weight_b;
    // Distribution semantic aggregation projections.
    Tensor dsa_wa, dsa_ba, dsa_wb, dsa_bb, dsa_wf, dsa_bf, dsa_wc, dsa_bc;
    // Optional single-image context projection.
    Tensor ssa_w, ssa_b;
    // Fusion back to Z channels and the classification head on R_aug.
    Tensor fuse_w, fuse_b;
    Tensor cls_w, cls_b;
};

Model init_model(const ModelDims& dims, std::uint64_t seed);

/// Visits every trainable tensor in a fixed order (the checkpoint order).
void for_each_param(Model& model,
                    const std::function<void(const std::string&, Tensor&)>& fn);
void for_each_param(const Model& model,
                    const std::function<void(const std::string&, const Tensor&)>& fn);
std::size_t param_count(const Model& model);

/// Graph handles over the model parameters for one forward/backward pass.
struct ModelVars {
    ModelDims dims;
    Var enc_w1, enc_b1, enc_w2, enc_b2, enc_mix;
    Var weight_w, weight_b;
    Var dsa_wa, dsa_ba, dsa_wb, dsa_bb, dsa_wf, dsa_bf, dsa_wc, dsa_bc;
    Var ssa_w, ssa_b;
    Var fuse_w, fuse_b;
    Var cls_w, cls_b;
};

/// Trainable lift: gradients flow into every parameter.
ModelVars lift_trainable(const Model& model);
/// Frozen lift for inference; parameters are constants.
ModelVars lift_frozen(const Model& model);
/// Every parameter constant except the one at `index` (for_each_param
/// order), which is taken from `substitute`; drives the gradient suite.
ModelVars lift_with_substitution(const Model& model, std::size_t index, const Var& substitute);
/// Vars in for_each_param order; aligned with the Model visitation.
std::vector<Var> trainable_vars(const ModelVars& vars);

// --- Forward stages ----------------------------------------------------------

/// Per-pixel nonlinear embedding plus 3x3 mixing; subsamples by the
/// configured stride. input is [D_in x H*W].
Var encode(const ModelVars& m, const Var& input, std::size_t height, std::size_t width);

Var class_weight_logits(const ModelVars& m, const Var& embeddings);
/// Per-pixel softmax over classes of the weight-head logits.
Var class_weights(const Var& weight_logits);

/// Blends the i-th distribution feature of every class per pixel with the
/// predicted class probabilities: [Z x P] from weights [C x P] and a
/// [C x Z] bank group.
Var feature_vote(const Var& weights, const Tensor& group);

/// Arithmetic mean of the N voted maps.
Var fuse_votes(const std::vector<Var>& votes);

/// Attention refinement: position confidences from the embeddings against
/// the fused voted map, rows softmax-normalized, scaled by 1/sqrt(key_dim).
Var dsa_refine(const ModelVars& m, const Var& embeddings, const Var& fused_votes);

/// Global-average context vector pushed through a trainable projection and
/// broadcast to every position.
Var ssa_context(const ModelVars& m, const Var& embeddings);

/// Channel-concatenates the provided maps and projects back to Z channels.
Var fuse_transform(const ModelVars& m, const Var& embeddings,
                   const std::optional<Var>& image_context, const Var& refined);

Var classify_logits(const ModelVars& m, const Var& augmented);

/// Classification head followed by nearest-neighbor upsampling to the full
/// resolution (identity at stride 1).
Var classify_upsample(const ModelVars& m, const Var& augmented, std::size_t grid_height,
                      std::size_t grid_width, std::size_t stride);

struct ForwardResult {
    std::size_t grid_height = 0;  // stride resolution
    std::size_t grid_width = 0;
    Var embeddings;     // R
    Var normalized;     // unit-norm columns of R, feeds the bank losses
    Var weight_logits;  // base-head logits
    Var weights;        // W_eg
    Var fused_votes;    // R_m
    Var refined;        // R_dl (zeros during warmup)
    Var augmented;      // R_aug
    Var aug_logits;     // classification logits at stride resolution
    Var output;         // O, full resolution
};

/// Full pipeline over one image. `use_refined` replaces the attention
/// output with zeros (bank warmup).
ForwardResult run_forward(const ModelVars& m, const DistributionBank& bank, const Tensor& input,
                          std::size_t height, std::size_t width, bool use_refined = true);

}  // namespace mdrl
