#include "mdrl/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <numeric>
#include <thread>

#include "mdrl/rng.hpp"

namespace mdrl {

TrainState init_state(const TrainConfig& config) {
    config.validate();
    TrainState state;
    state.model = init_model(config.model_dims(), config.model.seed);
    state.bank = DistributionBank::init(config.data.num_classes, config.bank.distributions,
                                        config.model.embed_dim, config.bank.seed);
    if (config.optim.momentum > 0.0) {
        for_each_param(state.model, [&state](const std::string&, Tensor& t) {
            state.momentum_buffers.emplace_back(t.shape());
        });
    }
    return state;
}

double poly_lr(const OptimConfig& optim, std::size_t step, std::size_t max_steps) {
    if (max_steps == 0) return optim.lr;
    const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(max_steps));
    return optim.lr * std::pow(1.0 - frac, optim.poly_power);
}

namespace {

void check_sample(const Sample& s, const TrainConfig& config, const char* what) {
    if (s.input_dim != config.data.input_dim || s.height != config.data.height ||
        s.width != config.data.width) {
        throw ConfigError(std::string(what) + ": sample " + std::to_string(s.input_dim) + "x" +
                          std::to_string(s.height) + "x" + std::to_string(s.width) +
                          " does not match config " + std::to_string(config.data.input_dim) +
                          "x" + std::to_string(config.data.height) + "x" +
                          std::to_string(config.data.width));
    }
}

}  // namespace

StepRecord train_step(TrainState& state, const TrainConfig& config,
                      const std::vector<const Sample*>& batch, std::size_t max_steps,
                      std::vector<std::uint64_t>* bank_update_counts) {
    if (batch.empty()) throw ConfigError("train_step: empty batch");
    const ModelDims dims = state.model.dims;
    const double lr = poly_lr(config.optim, state.step, max_steps);
    const bool use_refined = state.step >= config.bank.warmup_steps;

    ModelVars vars = lift_trainable(state.model);

    std::vector<Var> cls_terms, aug_terms, clcl_terms, cgcl_terms;
    std::vector<Tensor> detached_embeddings;
    std::vector<std::vector<std::uint8_t>> detached_labels;
    std::size_t grid_pixels = 0;

    for (const Sample* sample : batch) {
        check_sample(*sample, config, "train_step");
        ForwardResult fwd = run_forward(vars, state.bank, sample->feature_tensor(),
                                        sample->height, sample->width, use_refined);
        LabelGrid grid_labels = downsample_labels(sample->labels, dims.stride);
        grid_pixels = grid_labels.values.size();

        cls_terms.push_back(
            cross_entropy_loss(fwd.weight_logits, grid_labels.values, config.loss.ignore_label));
        aug_terms.push_back(
            cross_entropy_loss(fwd.aug_logits, grid_labels.values, config.loss.ignore_label));
        clcl_terms.push_back(class_local_consistency_loss(
            fwd.normalized, grid_labels.values, state.bank, config.loss.ignore_label));
        cgcl_terms.push_back(class_global_consistency_loss(fwd.normalized, grid_labels.values,
                                                           state.bank, config.loss.tau,
                                                           config.loss.ignore_label));

        detached_embeddings.push_back(fwd.normalized.value());
        detached_labels.push_back(std::move(grid_labels.values));
    }

    const double inv_batch = 1.0 / static_cast<double>(batch.size());
    Var cls = scale(add_n(cls_terms), inv_batch);
    Var aug = scale(add_n(aug_terms), inv_batch);
    Var clcl = scale(add_n(clcl_terms), inv_batch);
    Var cgcl = scale(add_n(cgcl_terms), inv_batch);
    Var total = total_loss(cls, aug, clcl, cgcl, config.loss);

    if (!std::isfinite(total.value()[0])) {
        throw NumericError("train_step: non-finite total loss at step " +
                           std::to_string(state.step));
    }

    backward(total);

    // Poly-decayed gradient descent with optional momentum; the state is
    // quantized back to the float32 grid so checkpoints are lossless.
    std::vector<Tensor*> params;
    for_each_param(state.model, [&params](const std::string&, Tensor& t) { params.push_back(&t); });
    std::vector<Var> grads = trainable_vars(vars);
    if (grads.size() != params.size()) {
        throw ShapeError("train_step: parameter/gradient list mismatch");
    }
    const double wd = config.optim.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!grads[i].has_grad()) continue;  // stage disabled, parameter unused
        Tensor& p = *params[i];
        const Tensor& g = grads[i].grad();
        if (config.optim.momentum > 0.0) {
            Tensor& buf = state.momentum_buffers[i];
            for (std::size_t k = 0; k < p.size(); ++k) {
                buf[k] = config.optim.momentum * buf[k] + g[k] + wd * p[k];
                p[k] -= lr * buf[k];
            }
        } else {
            for (std::size_t k = 0; k < p.size(); ++k) {
                p[k] -= lr * (g[k] + wd * p[k]);
            }
        }
        if (config.optim.single_precision_state) p.quantize_to_float32();
    }

    // Bank maintenance on this batch's detached embeddings.
    ClusterDiagnostics diag;
    if (!config.bank.freeze) {
        const std::size_t total_pixels = grid_pixels * batch.size();
        Tensor pooled({dims.embed_dim, total_pixels});
        std::vector<std::uint8_t> pooled_labels(total_pixels);
        for (std::size_t b = 0; b < batch.size(); ++b) {
            const Tensor& em = detached_embeddings[b];
            for (std::size_t z = 0; z < dims.embed_dim; ++z) {
                std::copy(em.data() + z * grid_pixels, em.data() + (z + 1) * grid_pixels,
                          pooled.data() + z * total_pixels + b * grid_pixels);
            }
            std::copy(detached_labels[b].begin(), detached_labels[b].end(),
                      pooled_labels.begin() + b * grid_pixels);
        }
        PixelGroups groups = group_pixels(pooled, pooled_labels, config.loss.ignore_label);
        auto assignments = cluster_batch(groups, state.bank, config.sinkhorn_params(), &diag);
        BankConfig bank_cfg{config.bank.momentum, config.bank.seed, config.bank.warmup_steps};
        state.bank = update_bank(state.bank, groups, assignments, bank_cfg, bank_update_counts);
    }

    StepRecord record;
    record.step = state.step;
    record.lr = lr;
    record.losses = combine_losses(cls.value()[0], aug.value()[0], clcl.value()[0],
                                   cgcl.value()[0], config.loss);
    record.clustered_classes = diag.clustered_classes;
    record.skipped_classes = diag.skipped_classes;
    record.sinkhorn_residual = diag.max_marginal_residual;

    ++state.step;
    return record;
}

EvalResult evaluate(const Model& model, const DistributionBank& bank,
                    const std::vector<Sample>& dataset) {
    EvalResult result(model.dims.num_classes);
    ModelVars vars = lift_frozen(model);
    for (const Sample& sample : dataset) {
        if (sample.input_dim != model.dims.input_dim) {
            throw ConfigError("evaluate: sample input_dim " + std::to_string(sample.input_dim) +
                              " does not match model D_in = " +
                              std::to_string(model.dims.input_dim));
        }
        ForwardResult fwd =
            run_forward(vars, bank, sample.feature_tensor(), sample.height, sample.width, true);
        const Tensor& out = fwd.output.value();
        LabelGrid pred;
        pred.height = sample.height;
        pred.width = sample.width;
        pred.values.resize(sample.height * sample.width);
        const std::size_t pixels = pred.values.size();
        for (std::size_t p = 0; p < pixels; ++p) {
            std::size_t best = 0;
            double best_v = out.at(0, p);
            for (std::size_t c = 1; c < model.dims.num_classes; ++c) {
                if (out.at(c, p) > best_v) {
                    best_v = out.at(c, p);
                    best = c;
                }
            }
            pred.values[p] = static_cast<std::uint8_t>(best);
        }
        result.confusion.accumulate(pred, sample.labels);
    }
    result.iou = miou(result.confusion);
    return result;
}

RunResult run_training(const TrainConfig& config, const std::vector<Sample>& train_set,
                       const std::vector<Sample>& eval_set,
                       const std::function<void(const StepRecord&)>& on_step,
                       std::optional<TrainState> resume_from) {
    config.validate();
    if (train_set.empty()) throw ConfigError("run_training: empty training set");
    const auto t0 = std::chrono::steady_clock::now();

    RunResult result{resume_from ? std::move(*resume_from) : init_state(config), {}};
    TrainState& state = result.state;
    MetricsRecord& metrics = result.metrics;
    metrics.bank_update_counts.assign(
        config.data.num_classes * config.bank.distributions, 0);

    const std::size_t steps_per_epoch =
        (train_set.size() + config.optim.batch_size - 1) / config.optim.batch_size;
    const std::size_t max_steps = steps_per_epoch * config.optim.epochs;
    const std::size_t start_epoch = state.step / steps_per_epoch;

    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(config.model.seed, 0x5EED));
    // Keep the shuffle stream aligned with the epoch counter on resume.
    for (std::size_t e = 0; e < start_epoch; ++e) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
    }

    for (std::size_t epoch = start_epoch; epoch < config.optim.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        for (std::size_t first = 0; first < order.size(); first += config.optim.batch_size) {
            const std::size_t last = std::min(order.size(), first + config.optim.batch_size);
            std::vector<const Sample*> batch;
            batch.reserve(last - first);
            for (std::size_t i = first; i < last; ++i) batch.push_back(&train_set[order[i]]);
            StepRecord record =
                train_step(state, config, batch, max_steps, &metrics.bank_update_counts);
            if (on_step) on_step(record);
            metrics.steps.push_back(std::move(record));
        }
        const bool last_epoch = epoch + 1 == config.optim.epochs;
        if (!eval_set.empty() && (last_epoch || (epoch + 1) % config.optim.eval_every == 0)) {
            EvalResult eval = evaluate(state.model, state.bank, eval_set);
            metrics.epochs.push_back({epoch + 1, eval.iou.mean});
        }
    }

    metrics.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

// --- Checkpoint --------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'D', 'C', 'K'};
constexpr std::uint16_t kCheckpointVersion = 1;
constexpr const char* kBankTensorName = "bank.entries";

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xFF));
    out.push_back(static_cast<unsigned char>(v >> 8));
}

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xFF));
}

void put_tensor(std::vector<unsigned char>& out, const std::string& name, const Tensor& t) {
    put_u16(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<unsigned char>(t.rank()));
    for (std::size_t a = 0; a < t.rank(); ++a) {
        put_u32(out, static_cast<std::uint32_t>(t.extent(a)));
    }
    for (std::size_t i = 0; i < t.size(); ++i) {
        const float f = static_cast<float>(t[i]);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(out, bits);
    }
}

struct CheckpointReader {
    const std::vector<unsigned char>& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size()) {
            throw FormatError(std::string("checkpoint truncated reading ") + what, pos);
        }
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(buf[pos]) |
                          static_cast<std::uint16_t>(buf[pos + 1]) << 8;
        pos += 2;
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + i]) << (8 * i);
        pos += 4;
        return v;
    }
    std::string str(std::size_t n, const char* what) {
        need(n, what);
        std::string s(buf.begin() + static_cast<long>(pos), buf.begin() + static_cast<long>(pos + n));
        pos += n;
        return s;
    }
    Tensor tensor(const char* what) {
        need(1, what);
        const std::size_t rank = buf[pos++];
        std::vector<std::size_t> shape(rank);
        std::size_t count = 1;
        for (std::size_t a = 0; a < rank; ++a) {
            shape[a] = u32("tensor extent");
            count *= shape[a];
        }
        std::vector<double> data(count);
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint32_t bits = u32("tensor data");
            float f;
            std::memcpy(&f, &bits, 4);
            data[i] = static_cast<double>(f);
        }
        return Tensor::from_data(std::move(shape), std::move(data));
    }
};

}  // namespace

void save_checkpoint(const std::string& path, const TrainConfig& config,
                     const TrainState& state) {
    std::string text = config_to_text(config);
    text += "state.step = " + std::to_string(state.step) + "\n";

    std::vector<unsigned char> out;
    out.insert(out.end(), kCheckpointMagic, kCheckpointMagic + 4);
    put_u16(out, kCheckpointVersion);
    put_u32(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());

    std::vector<std::pair<std::string, const Tensor*>> tensors;
    for_each_param(state.model, [&tensors](const std::string& name, const Tensor& t) {
        tensors.emplace_back(name, &t);
    });
    put_u32(out, static_cast<std::uint32_t>(tensors.size() + 1));
    for (const auto& [name, t] : tensors) put_tensor(out, name, *t);
    put_tensor(out, kBankTensorName, state.bank.entries());

    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    const std::size_t written = std::fwrite(out.data(), 1, out.size(), f);
    std::fclose(f);
    if (written != out.size()) {
        throw std::runtime_error("save_checkpoint: short write to " + path);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::fseek(f, 0, SEEK_END);
    const long len = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<unsigned char> buf(static_cast<std::size_t>(len));
    const std::size_t got = std::fread(buf.data(), 1, buf.size(), f);
    std::fclose(f);
    if (got != buf.size()) throw std::runtime_error("load_checkpoint: short read from " + path);

    CheckpointReader r{buf};
    r.need(4, "magic");
    if (std::memcmp(buf.data(), kCheckpointMagic, 4) != 0) {
        throw FormatError("checkpoint: bad magic, expected \"MDCK\"", 0);
    }
    r.pos = 4;
    const std::uint16_t version = r.u16("version");
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
    }
    const std::uint32_t text_len = r.u32("config length");
    const std::string text = r.str(text_len, "config block");
    ParsedConfig parsed = config_from_text(text);
    if (!parsed.step) {
        throw FormatError("checkpoint: config block is missing state.step", r.pos);
    }
    parsed.config.validate();

    const std::uint32_t tensor_count = r.u32("tensor count");
    std::map<std::string, Tensor> tensors;
    std::string last_name;
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
        const std::uint16_t name_len = r.u16("tensor name length");
        last_name = r.str(name_len, "tensor name");
        tensors[last_name] = r.tensor("tensor");
    }
    if (r.pos != buf.size()) throw FormatError("checkpoint: trailing bytes", r.pos);
    if (last_name != kBankTensorName) {
        throw FormatError("checkpoint: bank tensor must come last", r.pos);
    }

    Checkpoint ck{parsed.config, {}};
    ck.state.step = *parsed.step;
    ck.state.model = init_model(ck.config.model_dims(), ck.config.model.seed);
    for_each_param(ck.state.model, [&tensors](const std::string& name, Tensor& t) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw FormatError("checkpoint: missing tensor '" + name + "'", 0);
        }
        if (!it->second.same_shape(t)) {
            throw ConfigError("checkpoint: tensor '" + name + "' has shape " +
                              it->second.shape_str() + ", expected " + t.shape_str());
        }
        t = std::move(it->second);
    });

    auto bank_it = tensors.find(kBankTensorName);
    const Tensor& be = bank_it->second;
    if (be.rank() != 3 || be.extent(0) != ck.config.data.num_classes ||
        be.extent(1) != ck.config.bank.distributions ||
        be.extent(2) != ck.config.model.embed_dim) {
        throw ConfigError("checkpoint: bank tensor " + be.shape_str() +
                          " does not match the config dimensions");
    }
    ck.state.bank = DistributionBank::from_entries(be.extent(0), be.extent(1), be.extent(2), be);
    if (ck.config.optim.momentum > 0.0) {
        for_each_param(ck.state.model, [&ck](const std::string&, Tensor& t) {
            ck.state.momentum_buffers.emplace_back(t.shape());
        });
    }
    return ck;
}

// --- Ablation ----------------------------------------------------------------

namespace {

TrainConfig config_with_value(const TrainConfig& base, const std::string& parameter,
                              double value) {
    TrainConfig cfg = base;
    auto integral = [&](const char* what) {
        if (value < 1.0 || value != std::floor(value)) {
            throw ConfigError(std::string("ablate: ") + what + " needs a positive integer, got " +
                              format_double(value));
        }
        return static_cast<std::size_t>(value);
    };
    if (parameter == "n-dist") {
        cfg.bank.distributions = integral("n-dist");
    } else if (parameter == "alpha") {
        cfg.loss.alpha = value;
    } else if (parameter == "beta") {
        cfg.loss.beta = value;
    } else if (parameter == "lambda") {
        cfg.bank.lambda = value;
    } else if (parameter == "sinkhorn-iters") {
        cfg.bank.sinkhorn_iterations = integral("sinkhorn-iters");
    } else {
        throw ConfigError("ablate: unknown parameter '" + parameter +
                          "' (use n-dist, alpha, beta, lambda, sinkhorn-iters)");
    }
    return cfg;
}

}  // namespace

std::vector<AblateRow> ablate(const TrainConfig& base, const std::string& parameter,
                              const std::vector<double>& values, std::size_t num_seeds,
                              std::size_t jobs) {
    if (num_seeds < 1) throw ConfigError("ablate: need at least one seed");
    if (values.empty()) return {};
    // Validate the parameter name and value range up front.
    for (double v : values) config_with_value(base, parameter, v).validate();

    const std::vector<Sample> train_set = generate(base.data, Split::kTrain);
    const std::vector<Sample> eval_set = generate(base.data, Split::kEval);

    struct Task {
        std::size_t value_index, seed_index;
    };
    std::vector<Task> tasks;
    for (std::size_t vi = 0; vi < values.size(); ++vi) {
        for (std::size_t si = 0; si < num_seeds; ++si) tasks.push_back({vi, si});
    }

    std::vector<double> miou_table(values.size() * num_seeds, 0.0);
    std::vector<std::string> errors(values.size() * num_seeds);

    auto run_task = [&](const Task& task) {
        const std::size_t slot = task.value_index * num_seeds + task.seed_index;
        try {
            TrainConfig cfg = config_with_value(base, parameter, values[task.value_index]);
            cfg.model.seed = base.model.seed + task.seed_index;
            cfg.bank.seed = base.bank.seed + task.seed_index;
            RunResult run = run_training(cfg, train_set, eval_set);
            EvalResult eval = evaluate(run.state.model, run.state.bank, eval_set);
            miou_table[slot] = eval.iou.mean;
        } catch (const std::exception& e) {
            errors[slot] = e.what();
        }
    };

    if (jobs <= 1) {
        for (const Task& t : tasks) run_task(t);
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> workers;
        const std::size_t n_workers = std::min(jobs, tasks.size());
        for (std::size_t w = 0; w < n_workers; ++w) {
            workers.emplace_back([&]() {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= tasks.size()) return;
                    run_task(tasks[i]);
                }
            });
        }
        for (std::thread& t : workers) t.join();
    }

    std::vector<AblateRow> rows;
    rows.reserve(values.size());
    for (std::size_t vi = 0; vi < values.size(); ++vi) {
        AblateRow row;
        row.value = values[vi];
        for (std::size_t si = 0; si < num_seeds; ++si) {
            const std::size_t slot = vi * num_seeds + si;
            if (!errors[slot].empty()) {
                row.failed = true;
                row.error = errors[slot];
            }
            row.per_seed_miou.push_back(miou_table[slot]);
        }
        if (!row.failed) {
            double sum = 0.0;
            for (double m : row.per_seed_miou) sum += m;
            row.mean = sum / static_cast<double>(num_seeds);
            if (num_seeds > 1) {
                double sq = 0.0;
                for (double m : row.per_seed_miou) sq += (m - row.mean) * (m - row.mean);
                row.stdev = std::sqrt(sq / static_cast<double>(num_seeds - 1));
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace mdrl
