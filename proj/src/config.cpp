#include "mdrl/config.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>
#include <vector>

namespace mdrl {

void OptimConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("optim: lr must be > 0");
    if (!(poly_power > 0.0)) throw ConfigError("optim: poly_power must be > 0");
    if (weight_decay < 0.0) throw ConfigError("optim: weight_decay must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optim: momentum must be in [0, 1)");
    if (epochs < 1) throw ConfigError("optim: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("optim: batch_size must be >= 1");
    if (eval_every < 1) throw ConfigError("optim: eval_every must be >= 1");
}

void TrainConfig::validate() const {
    data.validate();
    optim.validate();
    loss.validate();
    model_dims().validate();
    if (bank.distributions < 1) throw ConfigError("bank: distributions must be >= 1");
    SinkhornParams sp = sinkhorn_params();
    sp.validate();
    BankConfig bc{bank.momentum, bank.seed, bank.warmup_steps};
    bc.validate();
    if (data.height % model.stride != 0 || data.width % model.stride != 0) {
        throw ConfigError("model: stride must divide the image size");
    }
}

ModelDims TrainConfig::model_dims() const {
    ModelDims dims;
    dims.input_dim = data.input_dim;
    dims.hidden_dim = model.hidden_dim;
    dims.embed_dim = model.embed_dim;
    dims.key_dim = model.key_dim;
    dims.num_classes = data.num_classes;
    dims.stride = model.stride;
    dims.ssa_enabled = model.ssa;
    return dims;
}

SinkhornParams TrainConfig::sinkhorn_params() const {
    return SinkhornParams{bank.lambda, bank.sinkhorn_iterations};
}

TrainConfig default_config() { return TrainConfig{}; }

std::string format_double(double v) {
    char buf[64];
    for (int precision = 15; precision <= 17; ++precision) {
        std::snprintf(buf, sizeof(buf), "%.*g", precision, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

namespace {

std::string format_size(std::size_t v) { return std::to_string(v); }
std::string format_u64(std::uint64_t v) { return std::to_string(v); }
std::string format_bool(bool v) { return v ? "true" : "false"; }

double parse_double(const std::string& s, const std::string& key) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || s.empty()) {
        throw ConfigError("config: bad number '" + s + "' for " + key);
    }
    return v;
}

std::uint64_t parse_u64(const std::string& s, const std::string& key) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
    if (end != s.c_str() + s.size() || s.empty()) {
        throw ConfigError("config: bad integer '" + s + "' for " + key);
    }
    return v;
}

std::size_t parse_size(const std::string& s, const std::string& key) {
    return static_cast<std::size_t>(parse_u64(s, key));
}

bool parse_bool(const std::string& s, const std::string& key) {
    if (s == "true") return true;
    if (s == "false") return false;
    throw ConfigError("config: bad bool '" + s + "' for " + key + " (use true/false)");
}

struct Field {
    const char* key;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

#define MDRL_FIELD_D(key, member)                                             \
    Field{key, [](const TrainConfig& c) { return format_double(c.member); },  \
          [](TrainConfig& c, const std::string& s) { c.member = parse_double(s, key); }}
#define MDRL_FIELD_Z(key, member)                                             \
    Field{key, [](const TrainConfig& c) { return format_size(c.member); },    \
          [](TrainConfig& c, const std::string& s) { c.member = parse_size(s, key); }}
#define MDRL_FIELD_U64(key, member)                                           \
    Field{key, [](const TrainConfig& c) { return format_u64(c.member); },     \
          [](TrainConfig& c, const std::string& s) { c.member = parse_u64(s, key); }}
#define MDRL_FIELD_B(key, member)                                             \
    Field{key, [](const TrainConfig& c) { return format_bool(c.member); },    \
          [](TrainConfig& c, const std::string& s) { c.member = parse_bool(s, key); }}

const std::vector<Field>& fields() {
    static const std::vector<Field> kFields = {
        MDRL_FIELD_Z("data.classes", data.num_classes),
        MDRL_FIELD_Z("data.modes_per_class", data.modes_per_class),
        MDRL_FIELD_Z("data.input_dim", data.input_dim),
        MDRL_FIELD_Z("data.height", data.height),
        MDRL_FIELD_Z("data.width", data.width),
        MDRL_FIELD_Z("data.blob_count", data.blob_count),
        MDRL_FIELD_Z("data.blob_min", data.blob_min),
        MDRL_FIELD_Z("data.blob_max", data.blob_max),
        MDRL_FIELD_D("data.mode_separation", data.mode_separation),
        MDRL_FIELD_D("data.cross_separation", data.cross_separation),
        MDRL_FIELD_D("data.noise_sigma", data.noise_sigma),
        MDRL_FIELD_Z("data.train_images", data.train_images),
        MDRL_FIELD_Z("data.eval_images", data.eval_images),
        MDRL_FIELD_U64("data.seed", data.seed),
        MDRL_FIELD_Z("model.embed_dim", model.embed_dim),
        MDRL_FIELD_Z("model.hidden_dim", model.hidden_dim),
        MDRL_FIELD_Z("model.key_dim", model.key_dim),
        MDRL_FIELD_Z("model.stride", model.stride),
        MDRL_FIELD_B("model.ssa", model.ssa),
        MDRL_FIELD_U64("model.seed", model.seed),
        MDRL_FIELD_Z("bank.distributions", bank.distributions),
        MDRL_FIELD_D("bank.lambda", bank.lambda),
        MDRL_FIELD_Z("bank.sinkhorn_iters", bank.sinkhorn_iterations),
        MDRL_FIELD_D("bank.momentum", bank.momentum),
        MDRL_FIELD_Z("bank.warmup", bank.warmup_steps),
        MDRL_FIELD_B("bank.freeze", bank.freeze),
        MDRL_FIELD_U64("bank.seed", bank.seed),
        MDRL_FIELD_D("loss.eta", loss.eta),
        MDRL_FIELD_D("loss.alpha", loss.alpha),
        MDRL_FIELD_D("loss.beta", loss.beta),
        MDRL_FIELD_D("loss.tau", loss.tau),
        Field{"loss.ignore_label",
              [](const TrainConfig& c) { return format_size(c.loss.ignore_label); },
              [](TrainConfig& c, const std::string& s) {
                  const std::uint64_t v = parse_u64(s, "loss.ignore_label");
                  if (v > 255) throw ConfigError("config: loss.ignore_label must fit a byte");
                  c.loss.ignore_label = static_cast<std::uint8_t>(v);
              }},
        MDRL_FIELD_D("optim.lr", optim.lr),
        MDRL_FIELD_D("optim.poly_power", optim.poly_power),
        MDRL_FIELD_D("optim.weight_decay", optim.weight_decay),
        MDRL_FIELD_D("optim.momentum", optim.momentum),
        MDRL_FIELD_Z("optim.epochs", optim.epochs),
        MDRL_FIELD_Z("optim.batch_size", optim.batch_size),
        MDRL_FIELD_Z("optim.eval_every", optim.eval_every),
        MDRL_FIELD_B("optim.single_precision_state", optim.single_precision_state),
    };
    return kFields;
}

#undef MDRL_FIELD_D
#undef MDRL_FIELD_Z
#undef MDRL_FIELD_U64
#undef MDRL_FIELD_B

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

}  // namespace

std::string config_to_text(const TrainConfig& config) {
    std::string out;
    for (const Field& f : fields()) {
        out += f.key;
        out += " = ";
        out += f.get(config);
        out += "\n";
    }
    return out;
}

void apply_config_value(TrainConfig& config, const std::string& key, const std::string& value) {
    for (const Field& f : fields()) {
        if (key == f.key) {
            f.set(config, value);
            return;
        }
    }
    throw ConfigError("config: unknown key '" + key + "'");
}

ParsedConfig config_from_text(const std::string& text) {
    ParsedConfig out;
    out.config = default_config();
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config: line " + std::to_string(lineno) +
                              " is not 'key = value': " + t);
        }
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        if (key == "state.step") {
            out.step = parse_u64(value, key);
            continue;
        }
        apply_config_value(out.config, key, value);
    }
    return out;
}

TrainConfig load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    ParsedConfig parsed = config_from_text(ss.str());
    return parsed.config;
}

}  // namespace mdrl
