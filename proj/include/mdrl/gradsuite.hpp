#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdrl/autodiff.hpp"

namespace mdrl {

struct ComponentCheck {
    std::string name;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    std::size_t trials = 0;
    bool passed = false;
};

/// Central-difference verification of every differentiable component:
/// softmax, normalization, encoder, attention block, the two bank losses,
/// cross-entropy, and the full training objective on a small image, each
/// over `trials` random seeds in double precision. `inject_fault` adds a
/// deliberately wrong derivative that must be flagged (detector self-test).
std::vector<ComponentCheck> run_gradient_suite(std::uint64_t seed, std::size_t trials,
                                               bool inject_fault = false);

}  // namespace mdrl
