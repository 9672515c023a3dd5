#include "mdrl/pipeline.hpp"

#include <cmath>

#include "mdrl/rng.hpp"

namespace mdrl {

void ModelDims::validate() const {
    if (input_dim < 1) throw ConfigError("model: input_dim must be >= 1");
    if (hidden_dim < 1) throw ConfigError("model: hidden_dim must be >= 1");
    if (embed_dim < 2) throw ConfigError("model: embed_dim must be >= 2");
    if (key_dim < 1) throw ConfigError("model: key_dim must be >= 1");
    if (num_classes < 2) throw ConfigError("model: num_classes must be >= 2");
    if (stride < 1) throw ConfigError("model: stride must be >= 1");
}

namespace {

Tensor init_weight(Rng& rng, std::size_t rows, std::size_t cols) {
    std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(cols)));
    Tensor w({rows, cols});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = gauss(rng);
    return w;
}

}  // namespace

Model init_model(const ModelDims& dims, std::uint64_t seed) {
    dims.validate();
    Rng rng(seed);
    Model m;
    m.dims = dims;
    const std::size_t z = dims.embed_dim, c = dims.num_classes, zk = dims.key_dim;

    m.enc_w1 = init_weight(rng, dims.hidden_dim, dims.input_dim);
    m.enc_b1 = Tensor({dims.hidden_dim});
    m.enc_w2 = init_weight(rng, z, dims.hidden_dim);
    m.enc_b2 = Tensor({z});
    // 3x3 mixing starts near the identity stencil.
    m.enc_mix = Tensor({3, 3});
    {
        std::normal_distribution<double> gauss(0.0, 0.05);
        for (std::size_t i = 0; i < 9; ++i) m.enc_mix[i] = gauss(rng);
        m.enc_mix.at(1, 1) += 1.0;
    }

    m.weight_w = init_weight(rng, c, z);
    m.weight_b = Tensor({c});

    m.dsa_wa = init_weight(rng, zk, z);
    m.dsa_ba = Tensor({zk});
    m.dsa_wb = init_weight(rng, zk, z);
    m.dsa_bb = Tensor({zk});
    m.dsa_wf = init_weight(rng, z, z);
    m.dsa_bf = Tensor({z});
    m.dsa_wc = init_weight(rng, z, z);
    m.dsa_bc = Tensor({z});

    m.ssa_w = init_weight(rng, z, z);
    m.ssa_b = Tensor({z});

    m.fuse_w = init_weight(rng, z, dims.fuse_input_dim());
    m.fuse_b = Tensor({z});
    m.cls_w = init_weight(rng, c, z);
    m.cls_b = Tensor({c});

    for_each_param(m, [](const std::string&, Tensor& t) { t.quantize_to_float32(); });
    return m;
}

namespace {

template <typename ModelT, typename Fn>
void visit_params(ModelT& m, const Fn& fn) {
    fn("enc.w1", m.enc_w1);
    fn("enc.b1", m.enc_b1);
    fn("enc.w2", m.enc_w2);
    fn("enc.b2", m.enc_b2);
    fn("enc.mix", m.enc_mix);
    fn("weight_head.w", m.weight_w);
    fn("weight_head.b", m.weight_b);
    fn("dsa.wa", m.dsa_wa);
    fn("dsa.ba", m.dsa_ba);
    fn("dsa.wb", m.dsa_wb);
    fn("dsa.bb", m.dsa_bb);
    fn("dsa.wf", m.dsa_wf);
    fn("dsa.bf", m.dsa_bf);
    fn("dsa.wc", m.dsa_wc);
    fn("dsa.bc", m.dsa_bc);
    fn("ssa.w", m.ssa_w);
    fn("ssa.b", m.ssa_b);
    fn("fuse.w", m.fuse_w);
    fn("fuse.b", m.fuse_b);
    fn("cls.w", m.cls_w);
    fn("cls.b", m.cls_b);
}

}  // namespace

void for_each_param(Model& model, const std::function<void(const std::string&, Tensor&)>& fn) {
    visit_params(model, fn);
}

void for_each_param(const Model& model,
                    const std::function<void(const std::string&, const Tensor&)>& fn) {
    visit_params(model, fn);
}

std::size_t param_count(const Model& model) {
    std::size_t n = 0;
    for_each_param(model, [&n](const std::string&, const Tensor& t) { n += t.size(); });
    return n;
}

namespace {

// Order must match for_each_param and trainable_vars.
template <typename WrapFn>
ModelVars lift_impl(const Model& model, const WrapFn& wrap) {
    ModelVars v;
    v.dims = model.dims;
    std::size_t i = 0;
    v.enc_w1 = wrap(i++, model.enc_w1);
    v.enc_b1 = wrap(i++, model.enc_b1);
    v.enc_w2 = wrap(i++, model.enc_w2);
    v.enc_b2 = wrap(i++, model.enc_b2);
    v.enc_mix = wrap(i++, model.enc_mix);
    v.weight_w = wrap(i++, model.weight_w);
    v.weight_b = wrap(i++, model.weight_b);
    v.dsa_wa = wrap(i++, model.dsa_wa);
    v.dsa_ba = wrap(i++, model.dsa_ba);
    v.dsa_wb = wrap(i++, model.dsa_wb);
    v.dsa_bb = wrap(i++, model.dsa_bb);
    v.dsa_wf = wrap(i++, model.dsa_wf);
    v.dsa_bf = wrap(i++, model.dsa_bf);
    v.dsa_wc = wrap(i++, model.dsa_wc);
    v.dsa_bc = wrap(i++, model.dsa_bc);
    v.ssa_w = wrap(i++, model.ssa_w);
    v.ssa_b = wrap(i++, model.ssa_b);
    v.fuse_w = wrap(i++, model.fuse_w);
    v.fuse_b = wrap(i++, model.fuse_b);
    v.cls_w = wrap(i++, model.cls_w);
    v.cls_b = wrap(i++, model.cls_b);
    return v;
}

}  // namespace

ModelVars lift_trainable(const Model& model) {
    return lift_impl(model, [](std::size_t, const Tensor& t) { return Var::leaf(t); });
}

ModelVars lift_frozen(const Model& model) {
    return lift_impl(model, [](std::size_t, const Tensor& t) { return Var::constant(t); });
}

ModelVars lift_with_substitution(const Model& model, std::size_t index, const Var& substitute) {
    return lift_impl(model, [index, &substitute](std::size_t i, const Tensor& t) {
        if (i == index && !substitute.value().same_shape(t)) {
            throw ShapeError("lift_with_substitution: substitute " +
                             substitute.value().shape_str() + " does not match parameter " +
                             t.shape_str());
        }
        return i == index ? substitute : Var::constant(t);
    });
}

std::vector<Var> trainable_vars(const ModelVars& v) {
    return {v.enc_w1, v.enc_b1, v.enc_w2, v.enc_b2, v.enc_mix, v.weight_w, v.weight_b,
            v.dsa_wa, v.dsa_ba, v.dsa_wb, v.dsa_bb, v.dsa_wf, v.dsa_bf, v.dsa_wc, v.dsa_bc,
            v.ssa_w,  v.ssa_b,  v.fuse_w, v.fuse_b, v.cls_w,  v.cls_b};
}

Var encode(const ModelVars& m, const Var& input, std::size_t height, std::size_t width) {
    if (input.value().rank() != 2 || input.value().rows() != m.dims.input_dim ||
        input.value().cols() != height * width) {
        throw ConfigError("encode: input " + input.value().shape_str() + " does not match D_in=" +
                          std::to_string(m.dims.input_dim) + ", " + std::to_string(height) + "x" +
                          std::to_string(width));
    }
    Var hidden = tanh_map(add_col_bias(matmul(m.enc_w1, input), m.enc_b1));
    Var embedded = add_col_bias(matmul(m.enc_w2, hidden), m.enc_b2);
    Var mixed = conv3x3_shared(embedded, height, width, m.enc_mix);
    if (m.dims.stride > 1) {
        mixed = subsample(mixed, height, width, m.dims.stride);
    }
    return mixed;
}

Var class_weight_logits(const ModelVars& m, const Var& embeddings) {
    return add_col_bias(matmul(m.weight_w, embeddings), m.weight_b);
}

Var class_weights(const Var& weight_logits) { return softmax(weight_logits, 0); }

Var feature_vote(const Var& weights, const Tensor& group) {
    if (group.rank() != 2 || group.rows() != weights.value().rows()) {
        throw ShapeError("feature_vote: group " + group.shape_str() + " does not match weights " +
                         weights.value().shape_str());
    }
    // votes[:, p] = sum_c weights[c, p] * group[c, :]
    return matmul_tn(Var::constant(group), weights);
}

Var fuse_votes(const std::vector<Var>& votes) {
    if (votes.empty()) throw ShapeError("fuse_votes: need at least one map");
    if (votes.size() == 1) return votes[0];
    return scale(add_n(votes), 1.0 / static_cast<double>(votes.size()));
}

Var dsa_refine(const ModelVars& m, const Var& embeddings, const Var& fused_votes) {
    if (!embeddings.value().same_shape(fused_votes.value())) {
        throw ShapeError("dsa_refine: shape mismatch " + embeddings.value().shape_str() + " vs " +
                         fused_votes.value().shape_str());
    }
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(m.dims.key_dim));
    Var queries = scale(add_col_bias(matmul(m.dsa_wa, embeddings), m.dsa_ba), inv_sqrt);
    Var keys = add_col_bias(matmul(m.dsa_wb, fused_votes), m.dsa_bb);
    Var attention = softmax(matmul_tn(queries, keys), 1);  // [P x P], rows sum to 1
    Var values = add_col_bias(matmul(m.dsa_wf, fused_votes), m.dsa_bf);
    Var mixed = matmul_nt(values, attention);
    return add_col_bias(matmul(m.dsa_wc, mixed), m.dsa_bc);
}

Var ssa_context(const ModelVars& m, const Var& embeddings) {
    const std::size_t positions = embeddings.value().cols();
    Var context = repeat_cols(mean_cols(embeddings), positions);
    return add_col_bias(matmul(m.ssa_w, context), m.ssa_b);
}

Var fuse_transform(const ModelVars& m, const Var& embeddings,
                   const std::optional<Var>& image_context, const Var& refined) {
    std::vector<Var> parts;
    parts.push_back(embeddings);
    if (image_context) parts.push_back(*image_context);
    parts.push_back(refined);
    Var stacked = concat_rows(parts);
    if (stacked.value().rows() != m.fuse_w.value().cols()) {
        throw ShapeError("fuse_transform: stacked input " + stacked.value().shape_str() +
                         " does not match projection " + m.fuse_w.value().shape_str());
    }
    return add_col_bias(matmul(m.fuse_w, stacked), m.fuse_b);
}

Var classify_logits(const ModelVars& m, const Var& augmented) {
    return add_col_bias(matmul(m.cls_w, augmented), m.cls_b);
}

Var classify_upsample(const ModelVars& m, const Var& augmented, std::size_t grid_height,
                      std::size_t grid_width, std::size_t stride) {
    return upsample_nearest(classify_logits(m, augmented), grid_height, grid_width, stride);
}

ForwardResult run_forward(const ModelVars& m, const DistributionBank& bank, const Tensor& input,
                          std::size_t height, std::size_t width, bool use_refined) {
    if (bank.embed_dim() != m.dims.embed_dim || bank.num_classes() != m.dims.num_classes) {
        throw ConfigError("run_forward: bank (C=" + std::to_string(bank.num_classes()) + ", Z=" +
                          std::to_string(bank.embed_dim()) + ") does not match model (C=" +
                          std::to_string(m.dims.num_classes) + ", Z=" +
                          std::to_string(m.dims.embed_dim) + ")");
    }
    if (height % m.dims.stride != 0 || width % m.dims.stride != 0) {
        throw ConfigError("run_forward: stride must divide the image size");
    }

    ForwardResult r;
    r.grid_height = height / m.dims.stride;
    r.grid_width = width / m.dims.stride;

    r.embeddings = encode(m, Var::constant(input), height, width);
    r.normalized = l2_normalize(r.embeddings, 0);
    r.weight_logits = class_weight_logits(m, r.embeddings);
    r.weights = class_weights(r.weight_logits);

    std::vector<Var> votes;
    votes.reserve(bank.distributions_per_class());
    for (std::size_t i = 0; i < bank.distributions_per_class(); ++i) {
        votes.push_back(feature_vote(r.weights, bank.group(i)));
    }
    r.fused_votes = fuse_votes(votes);

    if (use_refined) {
        r.refined = dsa_refine(m, r.embeddings, r.fused_votes);
    } else {
        r.refined = Var::constant(Tensor(r.embeddings.value().shape()));
    }

    std::optional<Var> context;
    if (m.dims.ssa_enabled) context = ssa_context(m, r.embeddings);
    r.augmented = fuse_transform(m, r.embeddings, context, r.refined);
    r.aug_logits = classify_logits(m, r.augmented);
    r.output = upsample_nearest(r.aug_logits, r.grid_height, r.grid_width, m.dims.stride);
    return r;
}

}  // namespace mdrl
