#include "capt/objectives.hpp"

#include <cmath>

namespace capt {

std::string to_string(Method m)
{
    switch (m) {
    case Method::capt: return "capt";
    case Method::apt_uc: return "apt-uc";
    case Method::apt_csc: return "apt-csc";
    case Method::avp: return "avp";
    case Method::paft: return "paft";
    case Method::hep: return "hep";
    }
    return "?";
}

Method parse_method(const std::string& text)
{
    for (auto m : {Method::capt, Method::apt_uc, Method::apt_csc, Method::avp, Method::paft, Method::hep}) {
        if (text == to_string(m)) {
            return m;
        }
    }
    throw ConfigError("unknown method '" + text + "' (expected capt, apt-uc, apt-csc, avp, paft or hep)");
}

void ObjectiveConfig::validate() const
{
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw ConfigError("lambda must be a finite non-negative number");
    }
    if (alpha_mode == AlphaMode::fixed && !(fixed_alpha >= 0.0 && fixed_alpha <= 1.0)) {
        throw ConfigError("fixed alpha must lie in [0, 1]");
    }
    if (method == Method::capt && !(mask.ce_adv || mask.ce_clean || mask.cons_train || mask.cons_frz)) {
        throw ConfigError("ablation mask disables every loss term");
    }
}

double adaptive_alpha(double ce_frz, double ce_train)
{
    if (!std::isfinite(ce_frz) || !std::isfinite(ce_train)) {
        throw NumericError("adaptive_alpha: non-finite cross-entropy");
    }
    const double d = ce_frz - ce_train;
    if (d >= 0.0) {
        return 1.0 / (1.0 + std::exp(-d));
    }
    const double e = std::exp(d);
    return e / (1.0 + e);
}

Tensor adaptive_alpha(const Tensor& ce_frz, const Tensor& ce_train)
{
    Tensor both = concat({reshape(ce_frz, {1}), reshape(ce_train, {1})}, 0);
    return reshape(split(softmax(both), {1, 1}, 0)[0], {});
}

Tensor cons_train(const Tensor& logits_adv, const Tensor& logits_clean) { return kl_div_logits(logits_adv, logits_clean); }

Tensor cons_frz(const Tensor& logits_adv, const Tensor& logits_frz_clean)
{
    return kl_div_logits(logits_adv, logits_frz_clean.detach());
}

LossBreakdown capt_loss(const BatchOutputs& out, const ObjectiveConfig& cfg)
{
    cfg.validate();
    const AblationMask& m = cfg.mask;
    LossBreakdown r;
    Tensor total = Tensor::scalar(0.0);
    Tensor ce_clean = cross_entropy_logits(out.logits_clean, out.labels);
    r.ce_clean = ce_clean.item();
    if (m.ce_adv) {
        Tensor ce_adv = cross_entropy_logits(out.logits_adv, out.labels);
        r.ce_adv = ce_adv.item();
        total = ce_adv;
    }
    if (m.ce_clean) {
        total = m.ce_adv ? add(total, ce_clean) : ce_clean;
    }

    Tensor cons;
    if (m.cons_train && m.cons_frz) {
        Tensor lt = cons_train(out.logits_adv, out.logits_clean);
        Tensor lf = cons_frz(out.logits_adv, out.logits_frz);
        r.l_cons_train = lt.item();
        r.l_cons_frz = lf.item();
        Tensor alpha;
        if (cfg.alpha_mode == AlphaMode::fixed) {
            alpha = Tensor::scalar(cfg.fixed_alpha);
        } else {
            Tensor ce_frz = cross_entropy_logits(out.logits_frz.detach(), out.labels);
            alpha = adaptive_alpha(ce_frz, cfg.alpha_grad ? ce_clean : ce_clean.detach());
        }
        r.alpha_cons = alpha.item();
        cons = add(mul(add_scalar(scale(alpha, -1.0), 1.0), lt), mul(alpha, lf));
    } else if (m.cons_train) {
        cons = cons_train(out.logits_adv, out.logits_clean);
        r.l_cons_train = cons.item();
        r.alpha_cons = 0.0;
    } else if (m.cons_frz) {
        cons = cons_frz(out.logits_adv, out.logits_frz);
        r.l_cons_frz = cons.item();
        r.alpha_cons = 1.0;
    }
    if (cons.defined()) {
        total = (m.ce_adv || m.ce_clean) ? add(total, scale(cons, cfg.lambda)) : scale(cons, cfg.lambda);
    }
    r.total = total;
    return r;
}

Tensor trades_loss(const BatchOutputs& out, double lambda)
{
    if (!(lambda >= 0.0)) {
        throw ConfigError("lambda must be non-negative");
    }
    return add(cross_entropy_logits(out.logits_clean, out.labels),
               scale(cons_train(out.logits_adv, out.logits_clean), lambda));
}

Tensor apt_loss(const Tensor& logits_adv, std::span<const std::size_t> labels)
{
    return cross_entropy_logits(logits_adv, labels);
}

Tensor avp_loss(const Tensor& logits_clean_prompted, const Tensor& logits_adv_prompted,
                std::span<const std::size_t> labels)
{
    return add(cross_entropy_logits(logits_clean_prompted, labels), cross_entropy_logits(logits_adv_prompted, labels));
}

Tensor paft_loss(const Tensor& probe_logits_adv, std::span<const std::size_t> labels)
{
    return cross_entropy_logits(probe_logits_adv, labels);
}

Tensor apply_pixel_prompt(const Tensor& x, const PixelPrompt& pp)
{
    return clamp(add(x, mul(pp.phi, pp.mask)), 0.0, 1.0);
}

PixelPrompt make_pixel_prompt(const EncoderConfig& config, std::size_t border)
{
    const std::size_t s = config.image_size;
    const std::size_t ch = config.channels;
    if (border == 0 || 2 * border >= s) {
        throw ConfigError("pixel prompt border must be in [1, image_size/2)");
    }
    std::vector<double> mask(s * s * ch, 0.0);
    for (std::size_t r = 0; r < s; ++r) {
        for (std::size_t c = 0; c < s; ++c) {
            const bool edge = r < border || c < border || r >= s - border || c >= s - border;
            for (std::size_t k = 0; k < ch; ++k) {
                mask[(r * s + c) * ch + k] = edge ? 1.0 : 0.0;
            }
        }
    }
    return PixelPrompt{Tensor::param({s, s, ch}, std::vector<double>(s * s * ch, 0.0)),
                       Tensor::from({s, s, ch}, std::move(mask))};
}

Linear make_probe(const ModelState& state)
{
    const auto& c = state.config;
    Tensor zt;
    {
        NoGradScope ng;
        zt = encode_text(all_classes(c), state, false);
    }
    const std::size_t d = c.embed_dim;
    const std::size_t k = c.num_classes;
    std::vector<double> w(d * k);
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
            w[i * k + j] = zt.at(j * d + i) / c.temperature;
        }
    }
    return Linear{Tensor::param({d, k}, std::move(w)), Tensor::param({k}, std::vector<double>(k, 0.0))};
}

Tensor probe_logits(const ModelState& state, const Tensor& z_img)
{
    if (!state.probe) {
        throw std::logic_error("probe_logits: state has no linear probe");
    }
    return add(matmul(z_img, state.probe->weight), state.probe->bias);
}

Tensor predict_logits(const ModelState& state, const Tensor& x, const Tensor& z_txt)
{
    Tensor xi = state.pixel_prompt ? apply_pixel_prompt(x, *state.pixel_prompt) : x;
    if (state.probe) {
        return probe_logits(state, encode_image(xi, state, false));
    }
    Tensor zt = z_txt.defined() ? z_txt : encode_text(all_classes(state.config), state, true);
    return similarity_logits(encode_image(xi, state, true), zt, state.temperature());
}

Tensor hep_predict(const Tensor& x, const ModelState& state)
{
    Tensor zt = encode_text(all_classes(state.config), state, false);
    return class_probs(encode_image(x, state, false), zt, state.temperature());
}

ModelState detached_copy(const ModelState& state)
{
    ModelState s = state.clone();
    s.theta.set_requires_grad(false);
    for (auto* group : {&s.prompts.visual, &s.prompts.textual}) {
        for (auto& t : *group) {
            t.set_requires_grad(false);
        }
    }
    if (s.prompts.has_context()) {
        s.prompts.text_context.set_requires_grad(false);
    }
    if (s.pixel_prompt) {
        s.pixel_prompt->phi.set_requires_grad(false);
    }
    if (s.probe) {
        s.probe->weight.set_requires_grad(false);
        s.probe->bias.set_requires_grad(false);
    }
    return s;
}

} // namespace capt
