#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "mdrl/losses.hpp"
#include "mdrl/pipeline.hpp"
#include "mdrl/synth.hpp"

namespace mdrl {

struct ModelSettings {
    std::size_t embed_dim = 8;
    std::size_t hidden_dim = 16;
    std::size_t key_dim = 4;
    std::size_t stride = 1;
    bool ssa = false;
    std::uint64_t seed = 2;
};

struct BankSettings {
    std::size_t distributions = 3;  // N
    double lambda = 0.05;
    std::size_t sinkhorn_iterations = 3;
    double momentum = 0.999;
    std::size_t warmup_steps = 0;
    bool freeze = false;
    std::uint64_t seed = 3;
};

struct OptimConfig {
    double lr = 0.05;
    double poly_power = 0.9;
    double weight_decay = 0.0005;
    double momentum = 0.0;
    std::size_t epochs = 30;
    std::size_t batch_size = 8;
    std::size_t eval_every = 5;  // epochs between mid-training evals
    // Keep parameters and bank on the float32 grid after every update so
    // the float32 checkpoint format round-trips exactly.
    bool single_precision_state = true;

    void validate() const;
};

struct TrainConfig {
    SynthSpec data;
    ModelSettings model;
    BankSettings bank;
    LossConfig loss;
    OptimConfig optim;

    void validate() const;
    ModelDims model_dims() const;
    SinkhornParams sinkhorn_params() const;
};

TrainConfig default_config();

/// Canonical key=value rendering; parse(config_to_text(c)) == c.
std::string config_to_text(const TrainConfig& config);

struct ParsedConfig {
    TrainConfig config;
    std::optional<std::uint64_t> step;  // present in checkpoint blocks
};

/// Parses a canonical text block. Unknown keys raise ConfigError; the
/// reserved "state.step" key is returned separately.
ParsedConfig config_from_text(const std::string& text);

/// Sets one key; same keys the text format uses.
void apply_config_value(TrainConfig& config, const std::string& key, const std::string& value);

TrainConfig load_config_file(const std::string& path);

/// Shortest decimal rendering that parses back to the same double.
std::string format_double(double v);

}  // namespace mdrl
