#pragma once

// Miniature two-tower (image / text) transformer with deep prompt injection.
//
// Image tokens are [cls, patch_1..patch_M]; text tokens are
// [ctx_1..ctx_m, CLASS, EOT]. Learnable prompt tokens are appended after
// these, so readout positions (cls for images, EOT for text) never move.
// For layers 1..J a fresh prompt block is fed in and the block's prompt
// outputs are thrown away; after layer J the prompt outputs propagate.

#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "capt/tensor.hpp"

namespace capt {

enum class ContextMode { unified, class_specific };

std::string to_string(ContextMode mode);
ContextMode parse_context_mode(const std::string& text);

struct EncoderConfig {
    std::size_t image_size = 16;
    std::size_t patch_size = 4;
    std::size_t channels = 3;
    std::size_t embed_dim = 32;
    std::size_t num_layers = 4;
    std::size_t num_heads = 2;
    std::size_t mlp_ratio = 2;
    std::size_t num_classes = 8;
    std::size_t template_words = 12; // vocabulary ids usable in caption templates
    std::size_t prompt_depth = 2;     // J
    std::size_t prompt_len = 2;       // b
    std::size_t text_context_len = 4; // m
    ContextMode context_mode = ContextMode::unified;
    double temperature = 0.07;

    // [template words][class tokens][EOT]
    std::size_t text_vocab_size() const { return template_words + num_classes + 1; }
    std::size_t text_seq_len() const { return text_context_len + 2; }
    std::size_t class_token(std::size_t c) const { return template_words + c; }
    std::size_t eot_token() const { return template_words + num_classes; }
    std::size_t num_patches() const { return (image_size / patch_size) * (image_size / patch_size); }
    std::size_t image_tokens() const { return num_patches() + 1; }
    std::size_t pixels_per_image() const { return image_size * image_size * channels; }

    // Throws ConfigError listing the violated constraint.
    void validate() const;
};

// Caption templates: each is text_context_len template-word ids. Index 0 is
// the hand-engineered prompt used by the prompt-free (HEP) path.
std::vector<std::vector<std::size_t>> caption_templates(const EncoderConfig& config, std::size_t count = 4);

struct Linear {
    Tensor weight; // [in, out]
    Tensor bias;   // [out]
};

struct LayerNormParams {
    Tensor gamma;
    Tensor beta;
};

struct Block {
    LayerNormParams ln1;
    Linear qkv;
    Linear attn_out;
    LayerNormParams ln2;
    Linear fc1;
    Linear fc2;
};

struct ImageTower {
    Linear patch;
    Tensor cls; // [d]
    Tensor pos; // [M+1, d]
    std::vector<Block> blocks;
    LayerNormParams ln_post;
    Tensor proj; // [d, d]
};

struct TextTower {
    Tensor token_embedding; // [V, d]
    Tensor pos;             // [m+2, d]
    std::vector<Block> blocks;
    LayerNormParams ln_final;
    Tensor proj; // [d, d]
};

struct Backbone {
    ImageTower image;
    TextTower text;

    // Visits every parameter in declaration order (the checkpoint order).
    void for_each(const std::function<void(const std::string&, Tensor&)>& fn);
    void for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const;
    Backbone clone() const;
    void set_requires_grad(bool on);
};

struct PromptSet {
    std::vector<Tensor> visual;  // J blocks [b, d]; empty when deep prompting is off
    std::vector<Tensor> textual; // J blocks [b, d]
    Tensor text_context;         // [m, d] or [C, m, d]; undefined -> template words
    ContextMode mode = ContextMode::unified;

    bool deep() const { return !visual.empty(); }
    bool has_context() const { return text_context.defined(); }
    bool empty() const { return !deep() && !has_context(); }
    std::vector<Tensor> learnables() const;
    PromptSet clone() const;
};

// Additive pixel-space prompt phi restricted to a border mask (AVP).
struct PixelPrompt {
    Tensor phi;  // [H, W, C], learnable
    Tensor mask; // [H, W, C], 0/1
};

struct ModelState {
    EncoderConfig config;
    Backbone theta;
    PromptSet prompts;
    std::optional<PixelPrompt> pixel_prompt;
    std::optional<Linear> probe; // PAFT linear head on frozen image features

    double temperature() const { return config.temperature; }
    ModelState clone() const;
    // Deep copy of the backbone only: the prompt-free guidance model.
    ModelState frozen_copy() const;
};

Backbone init_backbone(const EncoderConfig& config, std::mt19937_64& rng);

// Prompt blocks drawn i.i.d. N(0, 0.02^2). With `deep` false only the text
// context is created. The text context starts from the embeddings of the
// hand-engineered template (CoOp-style), one copy per class when
// class-specific; `random_context` draws it from N(0, 0.02^2) instead.
PromptSet init_prompts(const ModelState& state, bool deep, bool with_context, ContextMode mode, std::mt19937_64& rng,
                       bool random_context = false);

// x: [B, H, W, C] in [0, 1]. Returns [B, d] unit rows.
Tensor encode_image(const Tensor& x, const ModelState& state, bool use_prompts);
// Returns [len(class_ids), d] unit rows.
Tensor encode_text(std::span<const std::size_t> class_ids, const ModelState& state, bool use_prompts);
// Prompt-free encoding of raw token sequences [N, m+2] (pretraining captions).
Tensor encode_tokens(const std::vector<std::vector<std::size_t>>& sequences, const ModelState& state);

std::vector<std::size_t> all_classes(const EncoderConfig& config);

} // namespace capt
