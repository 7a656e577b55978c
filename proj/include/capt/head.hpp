#pragma once

// Zero-shot probability head and the scalar losses built on it.
//
// Logits are cos(z_img, z_txt) / tau; with unit-norm features the cosine is
// a plain dot product. Every loss is a batch mean.

#include <cstddef>
#include <span>
#include <vector>

#include "capt/tensor.hpp"

namespace capt {

using Labels = std::vector<std::size_t>;

// [B,d] x [C,d] -> [B,C]. Rows must have unit norm within 1e-6; tau > 0.
Tensor similarity_logits(const Tensor& z_img, const Tensor& z_txt, double tau);
Tensor class_probs(const Tensor& z_img, const Tensor& z_txt, double tau);

Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes);

// Probability form: mean of -log p[y]. A zero probability at a label is an error.
Tensor cross_entropy(const Tensor& probs, std::span<const std::size_t> labels);
// Log-sum-exp form used by every objective.
Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::size_t> labels);
// Per-example CE, shape [B].
Tensor cross_entropy_per_example(const Tensor& logits, std::span<const std::size_t> labels);

// mean_b sum_c p log(p / q), with 0 log 0 = 0 and q clamped at 1e-12 in the log.
// Rows of p and q must be distributions (non-negative, summing to 1 within 1e-6).
Tensor kl_div(const Tensor& p, const Tensor& q);
// KL(softmax(logits_p) || softmax(logits_q)); gradients reach both arguments.
Tensor kl_div_logits(const Tensor& logits_p, const Tensor& logits_q);

std::vector<std::size_t> argmax_rows(const Tensor& scores);

} // namespace capt
