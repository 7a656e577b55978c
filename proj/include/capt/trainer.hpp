#pragma once

// Few-shot adversarial tuning loop: per batch one PGD call against the
// current learnables, loss composition, and an SGD-momentum update under a
// warmup + cosine schedule.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "capt/attack.hpp"
#include "capt/objectives.hpp"
#include "capt/synth.hpp"

namespace capt {

struct TrainConfig {
    std::size_t epochs = 30;
    std::size_t batch_size = 32;
    std::optional<double> lr0; // unset: method default (0.0025, or 0.1 for AVP/PAFT)
    double momentum = 0.9;
    std::size_t warmup_epochs = 1;
    std::size_t shots = 16; // 0 = all
    std::uint64_t seed = 0;
    AttackConfig attack = AttackConfig::train_default(8.0 / 255.0);
    ObjectiveConfig objective;
    // Per-epoch validation; 0 disables it. The validation attack is a
    // shortened copy of the evaluation attack.
    std::size_t val_every = 0;
    std::size_t val_attack_steps = 10;
    bool random_context = false;
    // Global L2 norm cap on the learnables' gradient before the momentum
    // update; 0 disables clipping.
    double grad_clip = 1.0;

    double learning_rate() const;
    void validate() const;
};

double default_lr(Method m);

// Linear ramp 0 -> lr0 over the warmup steps (reaching lr0 exactly at
// step == warmup_steps), then lr0 * 0.5 * (1 + cos(pi * progress)).
double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double lr0);

// v <- momentum * v + g; p <- p - lr * v.
void sgd_momentum_step(std::vector<double>& params, std::span<const double> grads, std::vector<double>& velocity,
                       double lr, double momentum);

// Exactly `shots` indices per class (0 = all), drawn once from `seed`.
// Indices are returned grouped by class in ascending class order.
std::vector<std::size_t> nshot_sample(const Dataset& data, std::size_t shots, std::uint64_t seed);

// Disjoint split of the test pool: the first `fraction` of each class goes to
// validation, the rest to evaluation.
struct TestSplit {
    std::vector<std::size_t> validation;
    std::vector<std::size_t> evaluation;
};
TestSplit split_test_pool(const Dataset& test, double fraction = 0.2);
// First `per_class` evaluation indices of each class (0 = all).
std::vector<std::size_t> eval_subset(const Dataset& test, const std::vector<std::size_t>& pool, std::size_t per_class);

struct StepRecord {
    std::size_t step = 0;
    std::size_t epoch = 0;
    double lr = 0.0;
    double total = 0.0;
    double ce_clean = 0.0;
    double ce_adv = 0.0;
    double l_cons_train = 0.0;
    double l_cons_frz = 0.0;
    double alpha_cons = 0.0;
    double grad_norm = 0.0; // before clipping
};

struct EpochRecord {
    std::size_t epoch = 0;
    double val_clean = 0.0;
    double val_robust = 0.0;
};

struct RunRecord {
    std::string method;
    std::uint64_t seed = 0;
    std::vector<std::size_t> shot_indices;
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
    AttackAudit audit;
    std::string checkpoint;

    // One JSON object per line: step records, epoch records, then a summary.
    void write_ndjson(std::ostream& os) const;
};

// Adds the method's learnables to a prompt-free pretrained state.
ModelState prepare_method(const ModelState& pretrained, Method method, const TrainConfig& cfg);

struct TuneResult {
    ModelState state;
    RunRecord record;
};

// Trains the learnables of `state` on `train` (already N-shot sampled).
// `frozen` is the prompt-free guidance model. `val` may be empty.
// Throws NumericError naming the step on a non-finite loss, and
// InvariantViolation when the backbone changed.
TuneResult tune(const ModelState& state, const ModelState& frozen, const Dataset& train, const Dataset& val,
                const TrainConfig& cfg);

} // namespace capt
