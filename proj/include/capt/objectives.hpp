#pragma once

// Training objectives: the consistency-guided CAPT loss, its TRADES-style
// endpoint, and the HEP / APT / AVP / PAFT baselines.

#include <optional>
#include <string>

#include "capt/encoder.hpp"
#include "capt/head.hpp"

namespace capt {

enum class Method { capt, apt_uc, apt_csc, avp, paft, hep };

std::string to_string(Method m);
Method parse_method(const std::string& text);

struct AblationMask {
    bool ce_adv = false;
    bool ce_clean = true;
    bool cons_train = true;
    bool cons_frz = true;

    bool operator==(const AblationMask&) const = default;
};

enum class AlphaMode { adaptive, fixed };

struct ObjectiveConfig {
    double lambda = 100.0;
    Method method = Method::capt;
    AblationMask mask;
    AlphaMode alpha_mode = AlphaMode::adaptive;
    double fixed_alpha = 0.5;
    // When false the adaptive alpha is treated as a constant in backward.
    bool alpha_grad = false;
    std::size_t avp_border = 4; // width of the pixel-prompt frame

    void validate() const;
};

struct LossBreakdown {
    Tensor total;
    double ce_clean = 0.0;
    double ce_adv = 0.0;
    double l_cons_train = 0.0;
    double l_cons_frz = 0.0;
    double alpha_cons = 0.0;
};

// sigmoid(ce_frz - ce_train) = exp(ce_frz) / (exp(ce_frz) + exp(ce_train)).
double adaptive_alpha(double ce_frz, double ce_train);
// Differentiable form; both arguments are scalars.
Tensor adaptive_alpha(const Tensor& ce_frz, const Tensor& ce_train);

// KL(sft(adv) || sft(clean)) from logits of the tuned model.
Tensor cons_train(const Tensor& logits_adv, const Tensor& logits_clean);
// KL(sft(adv) || sft(frozen clean)); the frozen logits carry no gradient.
Tensor cons_frz(const Tensor& logits_adv, const Tensor& logits_frz_clean);

struct BatchOutputs {
    Tensor logits_clean; // tuned model, clean images
    Tensor logits_adv;   // tuned model, adversarial images
    Tensor logits_frz;   // frozen model, clean images (may be undefined if unused)
    Labels labels;
};

// total = [ce_adv] CE_adv + [ce_clean] CE_clean + lambda * cons, where cons is
// (1 - a) L_cons-train + a L_cons-frz when both terms are on and the single
// active term otherwise. With the default mask this is L_CAPT.
LossBreakdown capt_loss(const BatchOutputs& out, const ObjectiveConfig& cfg);
// CE_clean + lambda * KL(adv || clean).
Tensor trades_loss(const BatchOutputs& out, double lambda);
// CE on adversarial examples only.
Tensor apt_loss(const Tensor& logits_adv, std::span<const std::size_t> labels);
// CE(x + phi) + CE(x + delta + phi).
Tensor avp_loss(const Tensor& logits_clean_prompted, const Tensor& logits_adv_prompted,
                std::span<const std::size_t> labels);
// CE of the linear probe on adversarial features.
Tensor paft_loss(const Tensor& probe_logits_adv, std::span<const std::size_t> labels);

// clamp(x + phi * mask, 0, 1).
Tensor apply_pixel_prompt(const Tensor& x, const PixelPrompt& pp);
PixelPrompt make_pixel_prompt(const EncoderConfig& config, std::size_t border);
// Probe initialized to the zero-shot head: W = z_txt^T / tau, b = 0.
Linear make_probe(const ModelState& state);
Tensor probe_logits(const ModelState& state, const Tensor& z_img);

// Logits of the deployed predictor for any method: pixel prompt (if any),
// then the probe on frozen features (PAFT) or the zero-shot head with the
// current prompts. `z_txt` may be passed in to skip re-encoding classes.
Tensor predict_logits(const ModelState& state, const Tensor& x, const Tensor& z_txt = {});
// Prompt-free template head; no learnable parameters involved.
Tensor hep_predict(const Tensor& x, const ModelState& state);

// Deep copy with every tensor detached from differentiation.
ModelState detached_copy(const ModelState& state);

} // namespace capt
