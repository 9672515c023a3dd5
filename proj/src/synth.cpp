#include "mdrl/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "mdrl/rng.hpp"

namespace mdrl {

void SynthSpec::validate() const {
    if (num_classes < 2) throw ConfigError("synth: num_classes must be >= 2");
    if (num_classes >= kIgnoreLabel) throw ConfigError("synth: num_classes must be < 255");
    if (modes_per_class < 1) throw ConfigError("synth: modes_per_class must be >= 1");
    if (input_dim < 1) throw ConfigError("synth: input_dim must be >= 1");
    if (height < 1 || width < 1) throw ConfigError("synth: image size must be positive");
    if (!(mode_separation > 0.0)) throw ConfigError("synth: mode_separation must be > 0");
    if (!(cross_separation >= 0.0)) throw ConfigError("synth: cross_separation must be >= 0");
    if (noise_sigma < 0.0) throw ConfigError("synth: noise_sigma must be >= 0");
    if (blob_min < 1 || blob_min > blob_max) {
        throw ConfigError("synth: need 1 <= blob_min <= blob_max");
    }
    if (blob_max > height || blob_max > width) {
        throw ConfigError("synth: blobs of size " + std::to_string(blob_max) +
                          " do not fit a " + std::to_string(height) + "x" +
                          std::to_string(width) + " image");
    }
}

LabelGrid downsample_labels(const LabelGrid& labels, std::size_t stride) {
    if (stride == 0 || labels.height % stride != 0 || labels.width % stride != 0) {
        throw ConfigError("downsample_labels: stride must divide the grid size");
    }
    if (stride == 1) return labels;
    LabelGrid out;
    out.height = labels.height / stride;
    out.width = labels.width / stride;
    out.values.resize(out.height * out.width);
    for (std::size_t y = 0; y < out.height; ++y) {
        for (std::size_t x = 0; x < out.width; ++x) {
            out.at(y, x) = labels.at(y * stride, x * stride);
        }
    }
    return out;
}

Tensor Sample::feature_tensor() const {
    const std::size_t pixels = height * width;
    Tensor t({input_dim, pixels});
    for (std::size_t i = 0; i < features.size(); ++i) t[i] = static_cast<double>(features[i]);
    return t;
}

Tensor make_mode_centers(const SynthSpec& spec) {
    spec.validate();
    const std::size_t total = spec.num_classes * spec.modes_per_class;
    Rng rng(mix_seed(spec.seed, 0xC0DE));
    std::normal_distribution<double> gauss(0.0, spec.mode_separation * 0.75);

    Tensor centers({total, spec.input_dim});
    for (std::size_t i = 0; i < total; ++i) {
        const std::size_t cls = i / spec.modes_per_class;
        bool placed = false;
        for (std::size_t attempt = 0; attempt < 10000 && !placed; ++attempt) {
            std::vector<double> cand(spec.input_dim);
            for (double& v : cand) v = gauss(rng);
            placed = true;
            for (std::size_t j = 0; j < i; ++j) {
                const std::size_t other_cls = j / spec.modes_per_class;
                double d2 = 0.0;
                for (std::size_t z = 0; z < spec.input_dim; ++z) {
                    const double d = cand[z] - centers.at(j, z);
                    d2 += d * d;
                }
                const double required =
                    other_cls == cls ? spec.mode_separation : spec.cross_separation;
                if (d2 < required * required) {
                    placed = false;
                    break;
                }
            }
            if (placed) {
                for (std::size_t z = 0; z < spec.input_dim; ++z) centers.at(i, z) = cand[z];
            }
        }
        if (!placed) {
            throw ConfigError("synth: could not place mode centers with separation " +
                              std::to_string(spec.mode_separation) + "; lower it or raise the "
                              "input dimension");
        }
    }
    return centers;
}

namespace {

Sample make_sample(const SynthSpec& spec, const Tensor& centers, Rng& rng) {
    Sample s;
    s.input_dim = spec.input_dim;
    s.height = spec.height;
    s.width = spec.width;
    s.num_classes = spec.num_classes;
    s.features.assign(spec.input_dim * spec.height * spec.width, 0.0f);
    s.labels.height = spec.height;
    s.labels.width = spec.width;
    s.labels.values.assign(spec.height * spec.width, kIgnoreLabel);

    std::normal_distribution<double> noise(0.0, spec.noise_sigma);
    std::uniform_int_distribution<std::size_t> cls_dist(0, spec.num_classes - 1);
    std::uniform_int_distribution<std::size_t> mode_dist(0, spec.modes_per_class - 1);
    std::uniform_int_distribution<std::size_t> size_dist(spec.blob_min, spec.blob_max);

    const std::size_t hw = spec.height * spec.width;

    // Background noise for uncovered (ignore) pixels.
    for (float& f : s.features) f = static_cast<float>(noise(rng));

    for (std::size_t blob = 0; blob < spec.blob_count; ++blob) {
        const std::size_t cls = cls_dist(rng);
        const std::size_t mode = mode_dist(rng);
        const std::size_t bh = size_dist(rng);
        const std::size_t bw = size_dist(rng);
        std::uniform_int_distribution<std::size_t> y_dist(0, spec.height - bh);
        std::uniform_int_distribution<std::size_t> x_dist(0, spec.width - bw);
        const std::size_t y0 = y_dist(rng);
        const std::size_t x0 = x_dist(rng);
        const double* center = centers.data() + (cls * spec.modes_per_class + mode) * spec.input_dim;
        for (std::size_t y = y0; y < y0 + bh; ++y) {
            for (std::size_t x = x0; x < x0 + bw; ++x) {
                s.labels.at(y, x) = static_cast<std::uint8_t>(cls);
                for (std::size_t z = 0; z < spec.input_dim; ++z) {
                    s.features[z * hw + y * spec.width + x] =
                        static_cast<float>(center[z] + noise(rng));
                }
            }
        }
    }
    return s;
}

}  // namespace

std::vector<Sample> generate(const SynthSpec& spec, Split split) {
    spec.validate();
    const Tensor centers = make_mode_centers(spec);
    const std::size_t count = split == Split::kTrain ? spec.train_images : spec.eval_images;
    const std::uint64_t stream = split == Split::kTrain ? 1 : 2;

    std::vector<Sample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng(mix_seed(spec.seed, stream, i));
        out.push_back(make_sample(spec, centers, rng));
    }
    return out;
}

// --- Sample file IO ---------------------------------------------------------

namespace {

constexpr char kSampleMagic[4] = {'M', 'D', 'R', 'S'};
constexpr std::uint16_t kSampleVersion = 1;

static_assert(sizeof(float) == 4, "float must be 32-bit");

struct ByteReader {
    const std::vector<unsigned char>& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size()) {
            throw FormatError(std::string("sample file truncated reading ") + what, pos);
        }
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = static_cast<std::uint16_t>(buf[pos]) |
                          static_cast<std::uint16_t>(buf[pos + 1]) << 8;
        pos += 2;
        return v;
    }
};

void put_u16(std::vector<unsigned char>& out, std::uint16_t v) {
    out.push_back(static_cast<unsigned char>(v & 0xFF));
    out.push_back(static_cast<unsigned char>(v >> 8));
}

std::uint16_t narrow_u16(std::size_t v, const char* what) {
    if (v > 0xFFFF) {
        throw ConfigError(std::string("sample file: ") + what + " exceeds 65535");
    }
    return static_cast<std::uint16_t>(v);
}

}  // namespace

void write_sample(const std::string& path, const Sample& sample) {
    const std::size_t hw = sample.height * sample.width;
    if (sample.features.size() != sample.input_dim * hw ||
        sample.labels.values.size() != hw) {
        throw ShapeError("write_sample: inconsistent sample dimensions");
    }

    std::vector<unsigned char> out;
    out.reserve(14 + sample.features.size() * 4 + hw);
    out.insert(out.end(), kSampleMagic, kSampleMagic + 4);
    put_u16(out, kSampleVersion);
    put_u16(out, narrow_u16(sample.input_dim, "input_dim"));
    put_u16(out, narrow_u16(sample.height, "height"));
    put_u16(out, narrow_u16(sample.width, "width"));
    put_u16(out, narrow_u16(sample.num_classes, "num_classes"));
    for (float f : sample.features) {
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        out.push_back(static_cast<unsigned char>(bits & 0xFF));
        out.push_back(static_cast<unsigned char>((bits >> 8) & 0xFF));
        out.push_back(static_cast<unsigned char>((bits >> 16) & 0xFF));
        out.push_back(static_cast<unsigned char>((bits >> 24) & 0xFF));
    }
    out.insert(out.end(), sample.labels.values.begin(), sample.labels.values.end());

    std::FILE* f = std::fopen(path.c_str(), "wb");
    if (!f) throw std::runtime_error("write_sample: cannot open " + path);
    const std::size_t written = std::fwrite(out.data(), 1, out.size(), f);
    std::fclose(f);
    if (written != out.size()) {
        throw std::runtime_error("write_sample: short write to " + path);
    }
}

Sample read_sample(const std::string& path) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    if (!f) throw std::runtime_error("read_sample: cannot open " + path);
    std::fseek(f, 0, SEEK_END);
    const long len = std::ftell(f);
    std::fseek(f, 0, SEEK_SET);
    std::vector<unsigned char> buf(static_cast<std::size_t>(len));
    const std::size_t got = std::fread(buf.data(), 1, buf.size(), f);
    std::fclose(f);
    if (got != buf.size()) throw std::runtime_error("read_sample: short read from " + path);

    ByteReader r{buf};
    r.need(4, "magic");
    if (std::memcmp(buf.data(), kSampleMagic, 4) != 0) {
        throw FormatError("sample file: bad magic, expected \"MDRS\"", 0);
    }
    r.pos = 4;
    const std::uint16_t version = r.u16("version");
    if (version != kSampleVersion) {
        throw FormatError("sample file: unsupported version " + std::to_string(version), 4);
    }

    Sample s;
    s.input_dim = r.u16("input_dim");
    s.height = r.u16("height");
    s.width = r.u16("width");
    s.num_classes = r.u16("num_classes");
    const std::size_t hw = s.height * s.width;
    const std::size_t feat_count = s.input_dim * hw;

    r.need(feat_count * 4, "features");
    s.features.resize(feat_count);
    for (std::size_t i = 0; i < feat_count; ++i) {
        std::uint32_t bits = static_cast<std::uint32_t>(buf[r.pos]) |
                             static_cast<std::uint32_t>(buf[r.pos + 1]) << 8 |
                             static_cast<std::uint32_t>(buf[r.pos + 2]) << 16 |
                             static_cast<std::uint32_t>(buf[r.pos + 3]) << 24;
        std::memcpy(&s.features[i], &bits, 4);
        r.pos += 4;
    }

    r.need(hw, "labels");
    s.labels.height = s.height;
    s.labels.width = s.width;
    s.labels.values.assign(buf.begin() + static_cast<long>(r.pos),
                           buf.begin() + static_cast<long>(r.pos + hw));
    r.pos += hw;
    if (r.pos != buf.size()) {
        throw FormatError("sample file: trailing bytes", r.pos);
    }
    return s;
}

// --- Evaluation --------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes)
    : num_classes_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes < 1) throw ConfigError("confusion matrix: need at least one class");
}

std::uint64_t ConfusionMatrix::at(std::size_t gt, std::size_t pred) const {
    return counts_[gt * num_classes_ + pred];
}

void ConfusionMatrix::accumulate(const LabelGrid& pred, const LabelGrid& gt) {
    if (pred.height != gt.height || pred.width != gt.width) {
        throw ShapeError("confusion accumulate: prediction " + std::to_string(pred.height) + "x" +
                         std::to_string(pred.width) + " vs ground truth " +
                         std::to_string(gt.height) + "x" + std::to_string(gt.width));
    }
    for (std::size_t i = 0; i < gt.values.size(); ++i) {
        const std::uint8_t g = gt.values[i];
        if (g == kIgnoreLabel) continue;
        const std::uint8_t p = pred.values[i];
        if (g >= num_classes_ || p >= num_classes_) {
            throw ShapeError("confusion accumulate: label " + std::to_string(std::max(g, p)) +
                             " outside C = " + std::to_string(num_classes_));
        }
        ++counts_[g * num_classes_ + p];
    }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.num_classes_ != num_classes_) {
        throw ShapeError("confusion merge: class count mismatch");
    }
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

IouReport miou(const ConfusionMatrix& conf) {
    const std::size_t c = conf.num_classes();
    IouReport report;
    report.per_class.assign(c, 0.0);
    report.present.assign(c, false);
    double sum = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
        const double tp = static_cast<double>(conf.at(k, k));
        double fp = 0.0, fn = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            if (j == k) continue;
            fn += static_cast<double>(conf.at(k, j));
            fp += static_cast<double>(conf.at(j, k));
        }
        const double denom = tp + fp + fn;
        if (denom > 0.0) {
            report.per_class[k] = tp / denom;
            report.present[k] = true;
            sum += report.per_class[k];
            ++report.valid_classes;
        }
    }
    report.mean = report.valid_classes ? sum / static_cast<double>(report.valid_classes) : 0.0;
    return report;
}

}  // namespace mdrl
