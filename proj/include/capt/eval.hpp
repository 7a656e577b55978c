#pragma once

// Clean / robust accuracy and the report format.

#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "capt/attack.hpp"
#include "capt/synth.hpp"

namespace capt {

double compute_accuracy(std::span<const std::size_t> preds, std::span<const std::size_t> labels);

struct AccuracyPair {
    double clean = 0.0;
    double robust = 0.0;
};

// Clean and PGD accuracy of the deployed predictor on `indices` of `data`.
// Both numbers use the same examples. Batches of `chunk` images get attack
// seeds cfg.seed + batch index.
AccuracyPair evaluate_accuracy(const ModelState& state, const Dataset& data, std::span<const std::size_t> indices,
                               const AttackConfig& attack, AttackAudit* audit = nullptr, std::size_t chunk = 40);

double clean_accuracy(const ModelState& state, const Dataset& data, std::span<const std::size_t> indices,
                      std::size_t chunk = 128);

struct ShiftResult {
    std::string kind;
    double intensity = 0.0;
    double clean = 0.0;
    double robust = 0.0;
};

struct EvalReport {
    std::string method;
    std::size_t shots = 0;
    double epsilon = 0.0;
    double clean_accuracy = 0.0;
    double robust_accuracy = 0.0;
    std::size_t num_examples = 0;
    std::vector<ShiftResult> shifts;
    std::uint64_t seed = 0;
    double wall_clock_seconds = 0.0;
    AttackConfig attack;
    std::map<std::string, std::string> config; // echo of the effective settings

    // Deterministic JSON (sorted keys). `with_wall_clock` false drops the
    // only non-reproducible field.
    std::string to_json(bool with_wall_clock = true) const;
    static std::string csv_header();
    std::string csv_row() const;
};

// Appends a row to `path`, writing the header first when the file is new.
void append_csv(const EvalReport& report, const std::string& path);

} // namespace capt
