#include "capt/head.hpp"

#include <cmath>
#include <stdexcept>

namespace capt {

namespace {

void require_unit_rows(const Tensor& z, const char* what)
{
    if (z.rank() != 2) {
        throw ShapeError(std::string(what) + ": expected a [rows, d] matrix");
    }
    const std::size_t d = z.dim(1);
    for (std::size_t r = 0; r < z.dim(0); ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            s += z.at(r * d + i) * z.at(r * d + i);
        }
        if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
            throw std::invalid_argument(std::string(what) + ": row " + std::to_string(r) + " is not unit-norm");
        }
    }
}

void require_distribution(const Tensor& p, const char* what)
{
    if (p.rank() != 2) {
        throw ShapeError(std::string(what) + ": expected [B, C] probabilities");
    }
    const std::size_t C = p.dim(1);
    for (std::size_t r = 0; r < p.dim(0); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            const double v = p.at(r * C + c);
            if (v < 0.0) {
                throw std::invalid_argument(std::string(what) + ": negative probability");
            }
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6) {
            throw std::invalid_argument(std::string(what) + ": row " + std::to_string(r) + " does not sum to 1");
        }
    }
}

void require_labels(std::span<const std::size_t> labels, std::size_t batch, std::size_t classes)
{
    if (labels.size() != batch) {
        throw ShapeError("labels: expected " + std::to_string(batch) + " labels, got " + std::to_string(labels.size()));
    }
    for (std::size_t y : labels) {
        if (y >= classes) {
            throw std::invalid_argument("labels: class id " + std::to_string(y) + " out of range");
        }
    }
}

} // namespace

Tensor similarity_logits(const Tensor& z_img, const Tensor& z_txt, double tau)
{
    if (!(tau > 0.0)) {
        throw std::invalid_argument("temperature must be positive");
    }
    require_unit_rows(z_img, "image features");
    require_unit_rows(z_txt, "text features");
    if (z_img.dim(1) != z_txt.dim(1)) {
        throw ShapeError("image/text feature widths differ");
    }
    return scale(matmul(z_img, transpose(z_txt)), 1.0 / tau);
}

Tensor class_probs(const Tensor& z_img, const Tensor& z_txt, double tau)
{
    return softmax(similarity_logits(z_img, z_txt, tau));
}

Tensor one_hot(std::span<const std::size_t> labels, std::size_t num_classes)
{
    std::vector<double> v(labels.size() * num_classes, 0.0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] >= num_classes) {
            throw std::invalid_argument("one_hot: label out of range");
        }
        v[i * num_classes + labels[i]] = 1.0;
    }
    return Tensor::from({labels.size(), num_classes}, std::move(v));
}

Tensor cross_entropy(const Tensor& probs, std::span<const std::size_t> labels)
{
    require_distribution(probs, "cross_entropy");
    const std::size_t C = probs.dim(1);
    require_labels(labels, probs.dim(0), C);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (probs.at(i * C + labels[i]) <= 0.0) {
            throw NumericError("cross_entropy: zero probability at the label");
        }
    }
    std::vector<std::size_t> idx(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        idx[i] = i * C + labels[i];
    }
    Tensor picked = gather(probs, std::move(idx), {labels.size()});
    return scale(mean(log(picked)), -1.0);
}

Tensor cross_entropy_per_example(const Tensor& logits, std::span<const std::size_t> labels)
{
    if (logits.rank() != 2) {
        throw ShapeError("cross_entropy: expected [B, C] logits");
    }
    const std::size_t C = logits.dim(1);
    require_labels(labels, logits.dim(0), C);
    std::vector<std::size_t> idx(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        idx[i] = i * C + labels[i];
    }
    return scale(gather(log_softmax(logits), std::move(idx), {labels.size()}), -1.0);
}

Tensor cross_entropy_logits(const Tensor& logits, std::span<const std::size_t> labels)
{
    return mean(cross_entropy_per_example(logits, labels));
}

Tensor kl_div(const Tensor& p, const Tensor& q)
{
    require_distribution(p, "kl_div(p)");
    require_distribution(q, "kl_div(q)");
    if (p.shape() != q.shape()) {
        throw ShapeError("kl_div: shape mismatch");
    }
    // clamp(p) only matters where p == 0, where the product is 0 anyway.
    Tensor log_p = log(clamp(p, 1e-300, 1.0));
    Tensor log_q = log(clamp(q, 1e-12, 1.0));
    Tensor rows = sum(mul(p, sub(log_p, log_q)), 1);
    return mean(rows);
}

Tensor kl_div_logits(const Tensor& logits_p, const Tensor& logits_q)
{
    if (logits_p.shape() != logits_q.shape() || logits_p.rank() != 2) {
        throw ShapeError("kl_div: logits must share a [B, C] shape");
    }
    Tensor log_p = log_softmax(logits_p);
    Tensor log_q = log_softmax(logits_q);
    Tensor p = softmax(logits_p);
    return mean(sum(mul(p, sub(log_p, log_q)), 1));
}

std::vector<std::size_t> argmax_rows(const Tensor& scores)
{
    if (scores.rank() != 2) {
        throw ShapeError("argmax_rows: expected a matrix");
    }
    const std::size_t C = scores.dim(1);
    std::vector<std::size_t> out(scores.dim(0));
    for (std::size_t r = 0; r < out.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < C; ++c) {
            if (scores.at(r * C + c) > scores.at(r * C + best)) {
                best = c;
            }
        }
        out[r] = best;
    }
    return out;
}

} // namespace capt
