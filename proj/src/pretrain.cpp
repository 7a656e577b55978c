#include "capt/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "capt/head.hpp"

namespace capt {

namespace {

struct Adam {
    std::vector<Tensor> params;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::size_t t = 0;

    explicit Adam(std::vector<Tensor> p) : params(std::move(p))
    {
        for (const auto& x : params) {
            m.emplace_back(x.numel(), 0.0);
            v.emplace_back(x.numel(), 0.0);
        }
    }

    void step(const PretrainConfig& cfg)
    {
        ++t;
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = params[i];
            if (!p.has_grad()) {
                continue;
            }
            auto g = p.grad();
            std::vector<double> next(p.data().begin(), p.data().end());
            for (std::size_t k = 0; k < next.size(); ++k) {
                m[i][k] = cfg.beta1 * m[i][k] + (1.0 - cfg.beta1) * g[k];
                v[i][k] = cfg.beta2 * v[i][k] + (1.0 - cfg.beta2) * g[k] * g[k];
                next[k] -= cfg.lr * (m[i][k] / c1) / (std::sqrt(v[i][k] / c2) + cfg.adam_eps);
            }
            p.assign(next);
            p.zero_grad();
        }
    }
};

} // namespace

void PretrainConfig::validate() const
{
    if (batch_size < 2) {
        throw ConfigError("pretrain batch_size must be at least 2");
    }
    if (!(lr > 0.0)) {
        throw ConfigError("pretrain lr must be positive");
    }
    if (num_templates == 0) {
        throw ConfigError("pretrain needs at least one caption template");
    }
}

Tensor contrastive_loss(const Tensor& z_img, const Tensor& z_txt, std::span<const std::size_t> labels, double tau)
{
    const std::size_t n = labels.size();
    if (z_img.dim(0) != n || z_txt.dim(0) != n) {
        throw ShapeError("contrastive_loss: batch size mismatch");
    }
    std::vector<double> mask(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            mask[i * n + j] = labels[i] == labels[j] ? 1.0 : 0.0;
        }
    }
    Tensor pos = Tensor::from({n, n}, std::move(mask));
    Tensor logits = similarity_logits(z_img, z_txt, tau);
    // -log sum_{j in pos(i)} softmax_ij, for both directions.
    Tensor i2t = mean(log(sum(mul(softmax(logits), pos), 1)));
    Tensor t2i = mean(log(sum(mul(softmax(transpose(logits)), pos), 1)));
    return scale(add(i2t, t2i), -0.5);
}

PretrainResult pretrain_contrastive(const Dataset& data, const EncoderConfig& config, const PretrainConfig& cfg,
                                    const std::function<void(std::size_t, double)>& on_epoch)
{
    config.validate();
    cfg.validate();
    if (data.num_classes < 2 || data.size() == 0) {
        throw ConfigError("pretraining needs a dataset with at least 2 classes");
    }
    if (data.num_classes != config.num_classes || data.image_size != config.image_size ||
        data.channels != config.channels) {
        throw ConfigError("pretraining: dataset does not match the encoder config");
    }
    std::mt19937_64 rng(cfg.seed);
    PretrainResult result;
    result.state.config = config;
    result.state.theta = init_backbone(config, rng);

    std::vector<Tensor> params;
    result.state.theta.for_each([&](const std::string&, Tensor& t) { params.push_back(t); });
    Adam opt(params);
    const auto templates = caption_templates(config, cfg.num_templates);

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start + 1 < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
            Labels y = data.labels_at(idx);
            std::vector<std::vector<std::size_t>> captions;
            std::uniform_int_distribution<std::size_t> pick(0, templates.size() - 1);
            for (std::size_t label : y) {
                std::vector<std::size_t> seq = templates[pick(rng)];
                seq.push_back(config.class_token(label));
                seq.push_back(config.eot_token());
                captions.push_back(std::move(seq));
            }
            Tape tape;
            TapeScope scope(tape);
            Tensor zi = encode_image(data.images(idx), result.state, false);
            Tensor zt = encode_tokens(captions, result.state);
            Tensor loss = contrastive_loss(zi, zt, y, config.temperature);
            if (!std::isfinite(loss.item())) {
                throw NumericError("pretraining diverged at epoch " + std::to_string(epoch));
            }
            tape.backward(loss);
            opt.step(cfg);
            total += loss.item();
            ++batches;
        }
        result.epoch_loss.push_back(total / static_cast<double>(std::max<std::size_t>(1, batches)));
        if (on_epoch) {
            on_epoch(epoch, result.epoch_loss.back());
        }
    }
    result.state.theta.set_requires_grad(false);
    return result;
}

double zero_shot_accuracy(const ModelState& state, const Dataset& data)
{
    if (data.size() == 0) {
        return 0.0;
    }
    NoGradScope ng;
    Tensor zt = encode_text(all_classes(state.config), state, false);
    std::size_t correct = 0;
    constexpr std::size_t chunk = 128;
    for (std::size_t start = 0; start < data.size(); start += chunk) {
        const std::size_t end = std::min(data.size(), start + chunk);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        Tensor zi = encode_image(data.images(idx), state, false);
        auto pred = argmax_rows(similarity_logits(zi, zt, state.temperature()));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            correct += pred[k] == data.labels[idx[k]] ? 1 : 0;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

} // namespace capt
