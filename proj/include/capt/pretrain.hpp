#pragma once

// Contrastive image-caption pretraining of the dual encoder: the stand-in
// for a large-scale pretrained checkpoint.

#include <cstdint>
#include <functional>
#include <vector>

#include "capt/encoder.hpp"
#include "capt/synth.hpp"

namespace capt {

struct PretrainConfig {
    std::size_t epochs = 8;
    std::size_t batch_size = 64;
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t num_templates = 4;
    std::uint64_t seed = 0;

    void validate() const;
};

struct PretrainResult {
    ModelState state;                // backbone frozen (requires_grad = false)
    std::vector<double> epoch_loss;  // mean contrastive loss per epoch
};

// Symmetric multi-positive InfoNCE over a batch: an image's positives are all
// captions of its class. `on_epoch` (optional) receives (epoch, mean loss).
PretrainResult pretrain_contrastive(const Dataset& data, const EncoderConfig& config, const PretrainConfig& cfg,
                                    const std::function<void(std::size_t, double)>& on_epoch = {});

// Loss of one batch; exposed for gradient checks.
Tensor contrastive_loss(const Tensor& z_img, const Tensor& z_txt, std::span<const std::size_t> labels, double tau);

// Zero-shot accuracy with the prompt-free template captions.
double zero_shot_accuracy(const ModelState& state, const Dataset& data);

} // namespace capt
