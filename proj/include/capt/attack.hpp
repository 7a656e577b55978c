#pragma once

// L-infinity PGD: delta starts at U(-eps, eps) (or 0), takes K signed
// gradient ascent steps of size alpha, and is clipped back into the ball
// after every step. Adversarial images are clamp(x + delta, 0, 1).

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "capt/encoder.hpp"
#include "capt/head.hpp"

namespace capt {

struct AttackConfig {
    double epsilon = 8.0 / 255.0;
    double step_size = 2.0 / 255.0;
    std::size_t steps = 100;
    bool random_start = true;
    bool init_zero = false; // forces delta_0 = 0 regardless of random_start
    double clamp_lo = 0.0;
    double clamp_hi = 1.0;
    std::uint64_t seed = 0;

    void validate() const;

    // K=3, alpha=2eps/3, random start.
    static AttackConfig train_default(double epsilon);
    // K=100, alpha=eps/4, random start.
    static AttackConfig eval_default(double epsilon);
};

struct AdvBatch {
    Tensor x_adv;
    Tensor delta;
    std::vector<double> loss_trace; // mean attack loss after each of the K steps
};

// Running totals of invariant checks, shared across attack calls.
struct AttackAudit {
    std::size_t calls = 0;
    std::size_t budget_violations = 0;
    std::size_t range_violations = 0;
    double max_abs_delta = 0.0;
};

// Maps an input batch to per-example losses [B]. Called on an active tape.
using PerExampleLoss = std::function<Tensor(const Tensor& x)>;

// Ascends mean(loss(x + delta)). Never touches gradients of anything but the
// internal delta leaf. Throws InvariantViolation if the budget or range
// invariant fails after any iteration, NumericError on non-finite gradients.
AdvBatch pgd_attack(const Tensor& x, const PerExampleLoss& loss, const AttackConfig& cfg,
                    AttackAudit* audit = nullptr);

// Attack on the cross-entropy of the prompted model's zero-shot head (or
// the PAFT probe when present).
AdvBatch pgd_attack(const Tensor& x, std::span<const std::size_t> y, const ModelState& state, const AttackConfig& cfg,
                    AttackAudit* audit = nullptr);

Tensor project_linf(const Tensor& delta, double epsilon);

} // namespace capt
