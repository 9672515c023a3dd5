#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mdrl/config.hpp"

namespace mdrl {

struct StepRecord {
    std::size_t step = 0;
    double lr = 0.0;
    LossBreakdown losses;
    std::size_t clustered_classes = 0;
    std::size_t skipped_classes = 0;
    double sinkhorn_residual = 0.0;
};

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based, recorded after the epoch finished
    double eval_miou = 0.0;
};

struct MetricsRecord {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    std::vector<std::uint64_t> bank_update_counts;  // C*N cumulative assignments
    double wall_seconds = 0.0;
};

struct TrainState {
    Model model;
    DistributionBank bank;
    std::size_t step = 0;
    std::vector<Tensor> momentum_buffers;  // parameter order; empty when momentum = 0
};

TrainState init_state(const TrainConfig& config);

/// lr * (1 - step/max_steps)^power; zero at step == max_steps.
double poly_lr(const OptimConfig& optim, std::size_t step, std::size_t max_steps);

/// One optimization step over `batch`: forward, all four losses, backward,
/// poly-decayed gradient descent, then Sinkhorn clustering and the bank
/// momentum update on the detached embeddings of this batch.
StepRecord train_step(TrainState& state, const TrainConfig& config,
                      const std::vector<const Sample*>& batch, std::size_t max_steps,
                      std::vector<std::uint64_t>* bank_update_counts = nullptr);

struct EvalResult {
    IouReport iou;
    ConfusionMatrix confusion;

    explicit EvalResult(std::size_t classes) : confusion(classes) {}
};

/// Full-pipeline inference (bank-driven refinement included), one image at
/// a time; predictions are the argmax of the output map.
EvalResult evaluate(const Model& model, const DistributionBank& bank,
                    const std::vector<Sample>& dataset);

struct RunResult {
    TrainState state;
    MetricsRecord metrics;
};

/// Runs the configured schedule. Pass `resume_from` to continue a loaded
/// state; the step counter decides the remaining schedule.
RunResult run_training(const TrainConfig& config, const std::vector<Sample>& train_set,
                       const std::vector<Sample>& eval_set,
                       const std::function<void(const StepRecord&)>& on_step = {},
                       std::optional<TrainState> resume_from = std::nullopt);

// --- Checkpoint format -------------------------------------------------------
// magic "MDCK" | version u16=1 | config text block (u32 length + bytes,
// canonical config plus a state.step line) | tensor count u32 | tensors
// (name length u16, name bytes, rank u8, extents u32 each, float32 LE
// data) with the bank tensor last.

void save_checkpoint(const std::string& path, const TrainConfig& config,
                     const TrainState& state);

struct Checkpoint {
    TrainConfig config;
    TrainState state;
};

Checkpoint load_checkpoint(const std::string& path);

// --- Ablation ----------------------------------------------------------------

struct AblateRow {
    double value = 0.0;
    std::vector<double> per_seed_miou;
    double mean = 0.0;
    double stdev = 0.0;
    bool failed = false;
    std::string error;
};

/// Sweeps one hyperparameter ("n-dist", "alpha", "beta", "lambda" or
/// "sinkhorn-iters") over `values`, training one model per (value, seed);
/// seed k shifts the model and bank seeds by k with the dataset fixed.
/// Failed runs mark their row and the sweep continues.
std::vector<AblateRow> ablate(const TrainConfig& base, const std::string& parameter,
                              const std::vector<double>& values, std::size_t num_seeds,
                              std::size_t jobs = 1);

}  // namespace mdrl
