#pragma once

// Binary checkpoint for a ModelState.
//
// Layout (little-endian): "CAPTCKPT", u32 version, EncoderConfig fields,
// f64 temperature, u32 block count, then per block: u32 name length, name,
// u32 rank, u64 dims, f64 payload. Backbone blocks come first in declared
// order, followed by prompts ("prompt.visual.<l>", "prompt.textual.<l>",
// "prompt.context"), "avp.phi"/"avp.mask" and "paft.weight"/"paft.bias".

#include <filesystem>

#include "capt/encoder.hpp"

namespace capt {

void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
// Loaded backbone tensors have requires_grad = false; learnables get true.
// Throws ConfigError on corrupt, truncated or inconsistent files.
ModelState load_checkpoint(const std::filesystem::path& path);

// Exact (bit-level) equality of every backbone parameter.
bool backbone_identical(const Backbone& a, const Backbone& b);
// Largest absolute element-wise difference between two backbones.
double backbone_max_abs_diff(const Backbone& a, const Backbone& b);

} // namespace capt
