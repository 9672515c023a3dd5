#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdrl/tensor.hpp"

namespace mdrl {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// Multi-modal synthetic segmentation task: every class owns K mode
/// centers in feature space, images are tilings of random blobs, each blob
/// drawn from one (class, mode) with per-pixel Gaussian noise. Pixels not
/// covered by any blob carry the ignore label.
struct SynthSpec {
    std::size_t num_classes = 4;
    std::size_t modes_per_class = 3;
    std::size_t input_dim = 8;
    std::size_t height = 16;
    std::size_t width = 16;
    std::size_t blob_count = 14;
    std::size_t blob_min = 3;
    std::size_t blob_max = 8;
    double mode_separation = 4.0;  // minimum distance between same-class mode centers
    double cross_separation = 1.5; // minimum distance between any two mode centers
    double noise_sigma = 0.7;
    std::size_t train_images = 200;
    std::size_t eval_images = 50;
    std::uint64_t seed = 1;

    void validate() const;
};

struct LabelGrid {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> values;

    std::uint8_t at(std::size_t y, std::size_t x) const { return values[y * width + x]; }
    std::uint8_t& at(std::size_t y, std::size_t x) { return values[y * width + x]; }
};

/// Nearest-neighbor (top-left) label downsampling by integer stride.
LabelGrid downsample_labels(const LabelGrid& labels, std::size_t stride);

struct Sample {
    std::size_t input_dim = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t num_classes = 0;
    std::vector<float> features;  // [D_in][H][W] row-major
    LabelGrid labels;

    /// Features as a [D_in x H*W] double tensor for the pipeline.
    Tensor feature_tensor() const;
};

enum class Split { kTrain, kEval };

/// Mode centers for all classes, row (c*K + k) of the result. Same-class
/// centers are at least `mode_separation` apart, any two centers at least
/// `cross_separation` apart. Deterministic in spec.seed.
Tensor make_mode_centers(const SynthSpec& spec);

/// Deterministic dataset for one split; train and eval share mode centers.
std::vector<Sample> generate(const SynthSpec& spec, Split split);

// --- Sample file format ----------------------------------------------------
// magic "MDRS" | version u16=1 | D_in u16 | H u16 | W u16 | C u16 |
// features float32 LE row-major (D_in*H*W) | labels u8 row-major (H*W).

void write_sample(const std::string& path, const Sample& sample);
Sample read_sample(const std::string& path);

// --- Evaluation ------------------------------------------------------------

/// Row = ground truth class, column = predicted class. Ignore-labeled
/// pixels are never counted.
class ConfusionMatrix {
public:
    explicit ConfusionMatrix(std::size_t num_classes);

    std::size_t num_classes() const { return num_classes_; }
    std::uint64_t at(std::size_t gt, std::size_t pred) const;

    void accumulate(const LabelGrid& pred, const LabelGrid& gt);
    void merge(const ConfusionMatrix& other);

    const std::vector<std::uint64_t>& counts() const { return counts_; }

private:
    std::size_t num_classes_;
    std::vector<std::uint64_t> counts_;
};

struct IouReport {
    std::vector<double> per_class;  // 0 for absent classes; check `present`
    std::vector<bool> present;
    double mean = 0.0;
    std::size_t valid_classes = 0;
};

/// IoU_c = TP / (TP + FP + FN); classes with zero denominator are excluded
/// from the mean.
IouReport miou(const ConfusionMatrix& conf);

}  // namespace mdrl
