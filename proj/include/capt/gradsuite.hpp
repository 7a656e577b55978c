#pragma once

// Finite-difference verification of every differentiable primitive and
// every training objective on a two-class toy model.

#include <cstdint>
#include <string>
#include <vector>

#include "capt/encoder.hpp"

namespace capt {

struct GradCheckResult {
    std::string name;
    double error = 0.0;
    double tolerance = 0.0;
    bool passed() const { return error < tolerance; }
};

std::vector<GradCheckResult> primitive_grad_checks(std::uint64_t seed = 7, double h = 1e-3);
// Prompt blocks are drawn N(0, 0.02^2) and multiplied by `prompt_scale`.
std::vector<GradCheckResult> objective_grad_checks(std::uint64_t seed = 7, double h = 1e-3, double prompt_scale = 25.0);

// Two-class, 8x8 configuration used by the objective checks.
EncoderConfig toy_grad_config();

} // namespace capt
