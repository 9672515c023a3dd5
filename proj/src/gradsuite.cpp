#include "mdrl/gradsuite.hpp"

#include <cmath>

#include "mdrl/losses.hpp"
#include "mdrl/pipeline.hpp"
#include "mdrl/rng.hpp"
#include "mdrl/trainer.hpp"

namespace mdrl {

namespace {

Tensor random_tensor(Rng& rng, std::vector<std::size_t> shape, double scale = 1.0) {
    std::normal_distribution<double> gauss(0.0, scale);
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = gauss(rng);
    return t;
}

std::vector<std::uint8_t> random_labels(Rng& rng, std::size_t count, std::size_t classes,
                                        double ignore_fraction) {
    std::uniform_int_distribution<std::size_t> cls(0, classes - 1);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<std::uint8_t> labels(count);
    for (auto& l : labels) {
        l = u(rng) < ignore_fraction ? 255 : static_cast<std::uint8_t>(cls(rng));
    }
    // Keep at least one valid position.
    if (labels[0] == 255) labels[0] = 0;
    return labels;
}

struct Recorder {
    std::vector<ComponentCheck>& out;

    ComponentCheck& component(const std::string& name, double tol) {
        for (ComponentCheck& c : out) {
            if (c.name == name) return c;
        }
        out.push_back({name, 0.0, tol, 0, true});
        return out.back();
    }

    void record(const std::string& name, double tol, const GradCheckReport& report) {
        ComponentCheck& c = component(name, tol);
        ++c.trials;
        c.max_rel_error = std::max(c.max_rel_error, report.max_rel_error);
        c.passed = c.max_rel_error < tol;
    }
};

}  // namespace

std::vector<ComponentCheck> run_gradient_suite(std::uint64_t seed, std::size_t trials,
                                               bool inject_fault) {
    std::vector<ComponentCheck> out;
    Recorder rec{out};

    // The toy geometry used by the end-to-end objective check.
    TrainConfig cfg;
    cfg.data.num_classes = 3;
    cfg.data.input_dim = 6;
    cfg.data.height = cfg.data.width = 4;
    cfg.model.embed_dim = 8;
    cfg.model.hidden_dim = 10;
    cfg.model.key_dim = 4;
    cfg.model.ssa = true;  // exercise the optional context path end to end
    cfg.bank.distributions = 2;

    for (std::size_t trial = 0; trial < trials; ++trial) {
        Rng rng(mix_seed(seed, 0x6AD, trial));

        {  // softmax, both axes
            const Tensor x = random_tensor(rng, {3, 5});
            const Tensor proj = random_tensor(rng, {3, 5});
            rec.record("softmax", 1e-4, grad_check([&](const Var& v) {
                return cdot(proj, softmax(v, 0));
            }, x));
            rec.record("softmax", 1e-4, grad_check([&](const Var& v) {
                return cdot(proj, softmax(v, 1));
            }, x));
        }
        {  // l2 normalization
            const Tensor x = random_tensor(rng, {6, 4});
            const Tensor proj = random_tensor(rng, {6, 4});
            rec.record("l2_normalize", 1e-4, grad_check([&](const Var& v) {
                return cdot(proj, l2_normalize(v, 0));
            }, x));
        }

        const Model model = init_model(cfg.model_dims(), mix_seed(seed, 0x30DE1, trial));
        const DistributionBank bank =
            DistributionBank::init(cfg.data.num_classes, cfg.bank.distributions,
                                   cfg.model.embed_dim, mix_seed(seed, 0xBA2C, trial));
        const std::size_t pixels = cfg.data.height * cfg.data.width;
        const Tensor input = random_tensor(rng, {cfg.data.input_dim, pixels});
        const std::vector<std::uint8_t> labels =
            random_labels(rng, pixels, cfg.data.num_classes, 0.2);
        const ModelVars frozen = lift_frozen(model);

        std::vector<const Tensor*> params;
        for_each_param(model, [&params](const std::string&, const Tensor& t) {
            params.push_back(&t);
        });

        {  // encoder w.r.t. its own parameters
            const Tensor proj = random_tensor(rng, {cfg.model.embed_dim, pixels});
            for (std::size_t k = 0; k < 5; ++k) {  // the five encoder tensors come first
                auto f = [&](const Var& v) {
                    ModelVars vars = lift_with_substitution(model, k, v);
                    return cdot(proj, encode(vars, Var::constant(input), cfg.data.height,
                                             cfg.data.width));
                };
                rec.record("encoder", 1e-4, grad_check(f, *params[k]));
            }
        }

        {  // attention block w.r.t. both feature inputs
            const Tensor r = random_tensor(rng, {cfg.model.embed_dim, pixels});
            const Tensor rm = random_tensor(rng, {cfg.model.embed_dim, pixels});
            const Tensor proj = random_tensor(rng, {cfg.model.embed_dim, pixels});
            rec.record("dsa", 1e-4, grad_check([&](const Var& v) {
                return cdot(proj, dsa_refine(frozen, v, Var::constant(rm)));
            }, r));
            rec.record("dsa", 1e-4, grad_check([&](const Var& v) {
                return cdot(proj, dsa_refine(frozen, Var::constant(r), v));
            }, rm));
        }

        {  // optional context stage
            const Tensor r = random_tensor(rng, {cfg.model.embed_dim, pixels});
            const Tensor proj = random_tensor(rng, {cfg.model.embed_dim, pixels});
            rec.record("ssa", 1e-4, grad_check([&](const Var& v) {
                return cdot(proj, ssa_context(frozen, v));
            }, r));
        }

        {  // cross-entropy
            const Tensor logits = random_tensor(rng, {cfg.data.num_classes, pixels});
            rec.record("cross_entropy", 1e-5, grad_check([&](const Var& v) {
                return cross_entropy_loss(v, labels, 255);
            }, logits));
        }

        {  // bank losses through the normalization
            const Tensor raw = random_tensor(rng, {cfg.model.embed_dim, pixels});
            rec.record("clcl", 1e-4, grad_check([&](const Var& v) {
                return class_local_consistency_loss(l2_normalize(v, 0), labels, bank, 255);
            }, raw));
            rec.record("cgcl", 1e-4, grad_check([&](const Var& v) {
                return class_global_consistency_loss(l2_normalize(v, 0), labels, bank, 0.5, 255);
            }, raw));
        }

        {  // full training objective w.r.t. every parameter
            for (std::size_t k = 0; k < params.size(); ++k) {
                auto f = [&](const Var& v) {
                    ModelVars vars = lift_with_substitution(model, k, v);
                    ForwardResult fwd = run_forward(vars, bank, input, cfg.data.height,
                                                    cfg.data.width, true);
                    PixelLossStats stats;
                    Var cls = cross_entropy_loss(fwd.weight_logits, labels, 255, &stats);
                    Var aug = cross_entropy_loss(fwd.aug_logits, labels, 255);
                    Var clcl = class_local_consistency_loss(fwd.normalized, labels, bank, 255);
                    Var cgcl = class_global_consistency_loss(fwd.normalized, labels, bank,
                                                             cfg.loss.tau, 255);
                    return total_loss(cls, aug, clcl, cgcl, cfg.loss);
                };
                rec.record("total_loss", 1e-4, grad_check(f, *params[k]));
            }
        }

        if (inject_fault) {
            // Wrong derivative on purpose; the suite must flag it.
            const Tensor x = random_tensor(rng, {1, 4});
            const Tensor proj = random_tensor(rng, {1, 4});
            auto broken_tanh = [](const Var& v) {
                Tensor y = tanh_map(v.value());
                return custom_op(std::move(y), {v}, "broken_tanh", [](detail::Node& self) {
                    for (std::size_t i = 0; i < self.value.size(); ++i) {
                        // Missing the (1 - y^2) factor.
                        self.parents[0]->grad[i] += self.grad[i];
                    }
                });
            };
            rec.record("tanh (injected fault)", 1e-4, grad_check([&](const Var& v) {
                return cdot(proj, broken_tanh(v));
            }, x));
        }
    }

    return out;
}

}  // namespace mdrl
