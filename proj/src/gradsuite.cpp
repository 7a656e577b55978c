#include "capt/gradsuite.hpp"

#include <random>

#include "capt/attack.hpp"
#include "capt/gradcheck.hpp"
#include "capt/objectives.hpp"
#include "capt/pretrain.hpp"

namespace capt {

namespace {

constexpr double kPrimitiveTol = 1e-4;
constexpr double kObjectiveTol = 1e-3;

std::vector<double> uniform(std::size_t n, double lo, double hi, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(n);
    for (double& x : v) {
        x = u(rng);
    }
    return v;
}

// Values in [lo, hi] that stay at least `gap` away from `kink`.
std::vector<double> away_from(std::size_t n, double kink, double gap, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(gap, 1.0);
    std::bernoulli_distribution side(0.5);
    std::vector<double> v(n);
    for (double& x : v) {
        x = kink + (side(rng) ? u(rng) : -u(rng));
    }
    return v;
}

// Prompt blocks at the default 0.02 scale sit where layer norm is sharply
// curved, so an h = 1e-3 central difference carries O(1e-2) truncation error.
// The fixture rescales them to std ~0.5.
void rescale(const std::vector<Tensor>& leaves, double factor)
{
    for (Tensor t : leaves) {
        std::vector<double> v(t.data().begin(), t.data().end());
        for (double& x : v) {
            x *= factor;
        }
        t.assign(v);
    }
}

} // namespace

std::vector<GradCheckResult> primitive_grad_checks(std::uint64_t seed, double h)
{
    std::mt19937_64 rng(seed);
    std::vector<GradCheckResult> out;
    auto check = [&](const std::string& name, const Shape& shape, std::vector<double> values, auto op) {
        // Contract every output with fixed random weights so no coordinate is trivial.
        Tensor x = Tensor::from(shape, std::move(values));
        Tensor probe_out;
        {
            NoGradScope ng;
            probe_out = op(x);
        }
        Tensor w = Tensor::from(probe_out.shape(), uniform(probe_out.numel(), -1.0, 1.0, rng));
        const double err = grad_check([&](const Tensor& t) { return sum(mul(op(t), w)); }, x, h);
        out.push_back({name, err, kPrimitiveTol});
    };
    const Shape s34{3, 4};
    const std::size_t n = 12;
    Tensor b34 = Tensor::from(s34, uniform(n, -1.0, 1.0, rng));
    Tensor b4 = Tensor::from({4}, uniform(4, -1.0, 1.0, rng));
    Tensor gap34 = Tensor::from(s34, away_from(n, 0.0, 0.05, rng));

    check("add", s34, uniform(n, -1, 1, rng), [&](const Tensor& t) { return add(t, b34); });
    check("add (broadcast)", {4}, uniform(4, -1, 1, rng), [&](const Tensor& t) { return add(b34, t); });
    check("sub", s34, uniform(n, -1, 1, rng), [&](const Tensor& t) { return sub(b34, t); });
    check("mul", s34, uniform(n, -1, 1, rng), [&](const Tensor& t) { return mul(t, b34); });
    check("mul (self)", s34, uniform(n, -1, 1, rng), [&](const Tensor& t) { return mul(t, t); });
    {
        // Keep operands apart so the selection never flips under perturbation.
        auto base = b34.data();
        auto off = gap34.data();
        std::vector<double> v(n);
        for (std::size_t i = 0; i < n; ++i) {
            v[i] = base[i] + off[i];
        }
        check("minimum", s34, v, [&](const Tensor& t) { return minimum(t, b34); });
        check("maximum", s34, v, [&](const Tensor& t) { return maximum(t, b34); });
    }
    check("scale", s34, uniform(n, -1, 1, rng), [&](const Tensor& t) { return scale(t, -2.5); });
    check("add_scalar", s34, uniform(n, -1, 1, rng), [&](const Tensor& t) { return add_scalar(t, 0.75); });
    {
        Tensor rhs = Tensor::from({4, 5}, uniform(20, -1, 1, rng));
        check("matmul (lhs)", s34, uniform(n, -1, 1, rng), [&](const Tensor& t) { return matmul(t, rhs); });
        Tensor lhs = Tensor::from({2, 3, 4}, uniform(24, -1, 1, rng));
        check("matmul (rhs)", {4, 5}, uniform(20, -1, 1, rng), [&](const Tensor& t) { return matmul(lhs, t); });
        Tensor blhs = Tensor::from({2, 3, 4}, uniform(24, -1, 1, rng));
        check("matmul (batched)", {2, 4, 2}, uniform(16, -1, 1, rng),
              [&](const Tensor& t) { return matmul(blhs, t); });
    }
    check("transpose", {2, 3, 4}, uniform(24, -1, 1, rng), [](const Tensor& t) { return transpose(t); });
    check("reshape", s34, uniform(n, -1, 1, rng), [](const Tensor& t) { return reshape(t, {2, 6}); });
    check("concat", s34, uniform(n, -1, 1, rng), [&](const Tensor& t) { return concat({b34, t, b34}, 1); });
    check("split", s34, uniform(n, -1, 1, rng), [](const Tensor& t) { return split(t, {1, 3}, 1)[1]; });
    check("gather", s34, uniform(n, -1, 1, rng),
          [](const Tensor& t) { return gather(t, {0, 5, 5, 11, 2}, {5}); });
    check("exp", s34, uniform(n, -2, 2, rng), [](const Tensor& t) { return exp(t); });
    check("log", s34, uniform(n, 0.2, 3, rng), [](const Tensor& t) { return log(t); });
    check("relu", s34, away_from(n, 0.0, 0.05, rng), [](const Tensor& t) { return relu(t); });
    check("gelu", s34, uniform(n, -3, 3, rng), [](const Tensor& t) { return gelu(t); });
    check("sign (locally constant)", s34, away_from(n, 0.0, 0.05, rng),
          [](const Tensor& t) { return mul(sign(t), t); });
    {
        auto v = away_from(n, 0.5, 0.05, rng);
        check("clamp", s34, v, [](const Tensor& t) { return clamp(t, -0.5, 0.5); });
    }
    {
        Tensor gamma = Tensor::from({4}, uniform(4, 0.5, 1.5, rng));
        check("layer_norm (x)", s34, uniform(n, -1, 1, rng),
              [&](const Tensor& t) { return layer_norm(t, gamma, b4); });
        Tensor x = Tensor::from(s34, uniform(n, -1, 1, rng));
        check("layer_norm (gamma)", {4}, uniform(4, 0.5, 1.5, rng),
              [&](const Tensor& t) { return layer_norm(x, t, b4); });
        check("layer_norm (beta)", {4}, uniform(4, -1, 1, rng),
              [&](const Tensor& t) { return layer_norm(x, gamma, t); });
    }
    check("softmax", s34, uniform(n, -3, 3, rng), [](const Tensor& t) { return softmax(t); });
    check("log_softmax", s34, uniform(n, -3, 3, rng), [](const Tensor& t) { return log_softmax(t); });
    check("l2_normalize", s34, uniform(n, -1, 1, rng), [](const Tensor& t) { return l2_normalize(t); });
    check("sum", s34, uniform(n, -1, 1, rng), [](const Tensor& t) { return sum(t); });
    check("sum (axis 0)", s34, uniform(n, -1, 1, rng), [](const Tensor& t) { return sum(t, 0); });
    check("sum (axis 1)", s34, uniform(n, -1, 1, rng), [](const Tensor& t) { return sum(t, 1); });
    check("mean", s34, uniform(n, -1, 1, rng), [](const Tensor& t) { return mean(t); });
    {
        Tensor w = Tensor::from({4, 4}, uniform(16, -1, 1, rng));
        const Labels y{2};
        out.push_back({"cross_entropy(softmax(Wx))",
                       grad_check([&](const Tensor& t) { return cross_entropy(softmax(matmul(t, w)), y); },
                                  Tensor::from({1, 4}, uniform(4, -1, 1, rng)), h),
                       kPrimitiveTol});
        out.push_back({"logsumexp",
                       grad_check([](const Tensor& t) { return log(sum(exp(t))); },
                                  Tensor::from({8}, uniform(8, -2, 2, rng)), h),
                       kPrimitiveTol});
    }
    return out;
}

EncoderConfig toy_grad_config()
{
    EncoderConfig c;
    c.image_size = 8;
    c.patch_size = 4;
    c.channels = 3;
    c.embed_dim = 8;
    c.num_layers = 2;
    c.num_heads = 2;
    c.mlp_ratio = 2;
    c.num_classes = 2;
    c.template_words = 4;
    c.prompt_depth = 2;
    c.prompt_len = 2;
    c.text_context_len = 2;
    c.temperature = 0.5;
    return c;
}

std::vector<GradCheckResult> objective_grad_checks(std::uint64_t seed, double h, double prompt_scale)
{
    std::mt19937_64 rng(seed);
    std::vector<GradCheckResult> out;
    ModelState base;
    base.config = toy_grad_config();
    base.theta = init_backbone(base.config, rng);
    base.theta.set_requires_grad(false);
    const ModelState frozen = base.frozen_copy();

    const std::size_t B = 3;
    Tensor x = Tensor::from({B, 8, 8, 3}, uniform(B * 192, 0.1, 0.9, rng));
    const Labels y{0, 1, 1};
    AttackConfig ac = AttackConfig::train_default(8.0 / 255.0);
    ac.seed = seed;

    ModelState capt_state = base.clone();
    capt_state.prompts = init_prompts(capt_state, true, true, ContextMode::unified, rng, true);
    rescale(capt_state.prompts.learnables(), prompt_scale);
    const Tensor x_adv = pgd_attack(x, y, capt_state, ac).x_adv;
    Tensor logits_frz;
    {
        NoGradScope ng;
        logits_frz = similarity_logits(encode_image(x, frozen, false),
                                       encode_text(all_classes(frozen.config), frozen, false),
                                       frozen.temperature());
    }
    auto outputs = [&](const ModelState& s) {
        Tensor zt = encode_text(all_classes(s.config), s, true);
        BatchOutputs o;
        o.labels = y;
        o.logits_clean = similarity_logits(encode_image(x, s, true), zt, s.temperature());
        o.logits_adv = similarity_logits(encode_image(x_adv, s, true), zt, s.temperature());
        o.logits_frz = logits_frz;
        return o;
    };
    auto worst_over = [&](const std::vector<Tensor>& leaves, const std::function<Tensor()>& f) {
        double worst = 0.0;
        for (const auto& leaf : leaves) {
            worst = std::max(worst, grad_check_leaf(f, leaf, h));
        }
        return worst;
    };
    const auto prompts = capt_state.prompts.learnables();

    ObjectiveConfig full;
    full.alpha_grad = true;
    out.push_back({"capt (adaptive alpha, full derivative)",
                   worst_over(prompts, [&] { return capt_loss(outputs(capt_state), full).total; }), kObjectiveTol});
    ObjectiveConfig fixed;
    fixed.alpha_mode = AlphaMode::fixed;
    fixed.fixed_alpha = 0.3;
    out.push_back({"capt (fixed alpha)",
                   worst_over(prompts, [&] { return capt_loss(outputs(capt_state), fixed).total; }), kObjectiveTol});
    out.push_back({"trades", worst_over(prompts, [&] { return trades_loss(outputs(capt_state), 100.0); }),
                   kObjectiveTol});
    out.push_back({"cons_frz", worst_over(prompts, [&] {
                       BatchOutputs o = outputs(capt_state);
                       return cons_frz(o.logits_adv, o.logits_frz);
                   }),
                   kObjectiveTol});

    for (auto mode : {ContextMode::unified, ContextMode::class_specific}) {
        ModelState s = base.clone();
        s.prompts = init_prompts(s, false, true, mode, rng, true);
        rescale(s.prompts.learnables(), prompt_scale);
        const Tensor xa = pgd_attack(x, y, s, ac).x_adv;
        out.push_back({mode == ContextMode::unified ? "apt-uc" : "apt-csc",
                       worst_over(s.prompts.learnables(), [&] { return apt_loss(predict_logits(s, xa), y); }),
                       kObjectiveTol});
    }
    {
        ModelState s = base.clone();
        s.pixel_prompt = make_pixel_prompt(s.config, 2);
        s.pixel_prompt->phi.assign(uniform(192, -0.05, 0.05, rng));
        ModelState bare = base.clone();
        const Tensor delta = pgd_attack(x, y, bare, ac).delta;
        const Tensor xd = clamp(add(x, delta), 0.0, 1.0);
        out.push_back({"avp", worst_over({s.pixel_prompt->phi}, [&] {
                           return avp_loss(predict_logits(s, x), predict_logits(s, xd), y);
                       }),
                       kObjectiveTol});
    }
    {
        ModelState s = base.clone();
        s.probe = make_probe(s);
        const Tensor xa = pgd_attack(x, y, s, ac).x_adv;
        out.push_back({"paft", worst_over({s.probe->weight, s.probe->bias},
                                          [&] { return paft_loss(predict_logits(s, xa), y); }),
                       kObjectiveTol});
    }
    {
        ModelState s = base.clone();
        s.theta.set_requires_grad(true);
        const auto tmpl = caption_templates(s.config, 2);
        std::vector<std::vector<std::size_t>> caps;
        for (std::size_t i = 0; i < B; ++i) {
            auto seq = tmpl[i % tmpl.size()];
            seq.push_back(s.config.class_token(y[i]));
            seq.push_back(s.config.eot_token());
            caps.push_back(seq);
        }
        out.push_back({"contrastive pretraining", worst_over({s.theta.image.proj, s.theta.text.proj}, [&] {
                           return contrastive_loss(encode_image(x, s, false), encode_tokens(caps, s), y,
                                                   s.temperature());
                       }),
                       kObjectiveTol});
    }
    return out;
}

} // namespace capt
