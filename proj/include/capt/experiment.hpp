#pragma once

// Experiment configuration (key = value files and flags) and the pipeline
// steps shared by the command-line tool and the acceptance harness.

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "capt/eval.hpp"
#include "capt/pretrain.hpp"
#include "capt/synth.hpp"
#include "capt/trainer.hpp"

namespace capt {

struct ExperimentConfig {
    SynthSpec data;
    EncoderConfig model;
    PretrainConfig pretrain;
    TrainConfig train;
    AttackConfig eval_attack = AttackConfig::eval_default(8.0 / 255.0);
    std::size_t eval_per_class = 10; // 0 = the whole evaluation split
    std::vector<ShiftSpec> shifts;
    std::uint64_t seed = 0;
    // Keys assigned explicitly; model overrides on a loaded checkpoint only
    // apply to these.
    std::set<std::string> explicit_keys;

    // Throws ConfigError for unknown keys and unparsable values.
    void set(const std::string& key, const std::string& value);
    // Effective value of every key, for report echoes.
    std::map<std::string, std::string> echo() const;
    static std::vector<std::string> keys();
    void validate() const;
};

// Lines are `key = value`; `#` starts a comment; blank lines are ignored.
void apply_config_text(ExperimentConfig& cfg, const std::string& text);
void apply_config_file(ExperimentConfig& cfg, const std::filesystem::path& path);

// `shifts` values: comma-separated `kind:intensity` items, e.g.
// "value-jitter:0.3,channel-drop:0.5".
std::vector<ShiftSpec> parse_shifts(const std::string& text);

// Applies explicit model overrides (prompt depth / length, tau) to a loaded
// checkpoint. A context length different from the checkpoint's is rejected.
ModelState apply_model_overrides(const ModelState& ckpt, const ExperimentConfig& cfg);

PretrainResult run_pretrain(const DataBundle& bundle, const ExperimentConfig& cfg);

// N-shot sampling, method setup and tuning. The validation split is used
// only when train.val_every > 0.
TuneResult run_tune(const ModelState& pretrained, const DataBundle& bundle, const ExperimentConfig& cfg);

// Clean / robust accuracy on the evaluation subset and under each shift.
EvalReport run_eval(const ModelState& state, const DataBundle& bundle, const ExperimentConfig& cfg,
                    AttackAudit* audit = nullptr);

struct AblationRow {
    std::string name;
    AblationMask mask;
    double clean = 0.0;
    double robust = 0.0;
};

// The four objective ablation rows plus the full objective.
std::vector<std::pair<std::string, AblationMask>> ablation_masks();
AblationMask parse_mask(const std::string& bits); // "ce_adv ce_clean cons_train cons_frz" as 0/1, e.g. "0111"
std::string mask_bits(const AblationMask& mask);

AblationRow run_ablation_row(const ModelState& pretrained, const DataBundle& bundle, const ExperimentConfig& cfg,
                             const std::string& name, const AblationMask& mask);

} // namespace capt
