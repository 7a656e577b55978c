#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "capt/errors.hpp"
#include "capt/gradsuite.hpp"
#include "capt/objectives.hpp"

using namespace capt;

namespace {

Tensor random_logits(std::size_t b, std::size_t c, std::mt19937_64& rng, double sd = 2.0)
{
    std::normal_distribution<double> nd(0.0, sd);
    std::vector<double> v(b * c);
    for (double& x : v) {
        x = nd(rng);
    }
    return Tensor::from({b, c}, v);
}

BatchOutputs random_batch(std::mt19937_64& rng, std::size_t b = 6, std::size_t c = 4)
{
    BatchOutputs out{random_logits(b, c, rng), random_logits(b, c, rng), random_logits(b, c, rng), {}};
    for (std::size_t i = 0; i < b; ++i) {
        out.labels.push_back(rng() % c);
    }
    return out;
}

// Scalar re-implementations used as oracles.
std::vector<double> softmax_row(const Tensor& t, std::size_t r)
{
    const std::size_t c = t.dim(1);
    double m = -1e300;
    for (std::size_t k = 0; k < c; ++k) {
        m = std::max(m, t.at(r * c + k));
    }
    std::vector<double> p(c);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
        p[k] = std::exp(t.at(r * c + k) - m);
        s += p[k];
    }
    for (double& x : p) {
        x /= s;
    }
    return p;
}

double ce_oracle(const Tensor& logits, const Labels& y)
{
    double s = 0.0;
    for (std::size_t r = 0; r < y.size(); ++r) {
        s -= std::log(softmax_row(logits, r)[y[r]]);
    }
    return s / static_cast<double>(y.size());
}

double kl_oracle(const Tensor& a, const Tensor& b)
{
    double s = 0.0;
    for (std::size_t r = 0; r < a.dim(0); ++r) {
        const auto p = softmax_row(a, r);
        const auto q = softmax_row(b, r);
        for (std::size_t k = 0; k < p.size(); ++k) {
            s += p[k] * (std::log(p[k]) - std::log(q[k]));
        }
    }
    return s / static_cast<double>(a.dim(0));
}

ModelState toy_state(std::uint64_t seed)
{
    const EncoderConfig c = toy_grad_config();
    std::mt19937_64 rng(seed);
    ModelState s;
    s.config = c;
    s.theta = init_backbone(c, rng);
    s.theta.set_requires_grad(false);
    return s;
}

Tensor toy_images(const EncoderConfig& c, std::size_t n, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.1, 0.9);
    std::vector<double> v(n * c.pixels_per_image());
    for (double& x : v) {
        x = u(rng);
    }
    return Tensor::from({n, c.image_size, c.image_size, c.channels}, v);
}

} // namespace

TEST_CASE("adaptive alpha contract")
{
    CHECK(adaptive_alpha(1.3, 1.3) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(adaptive_alpha(0.0, std::log(3.0)) == doctest::Approx(0.25));
    for (double a = 0.0; a <= 10.0; a += 0.37) {
        for (double b = 0.0; b <= 10.0; b += 0.41) {
            const double v = adaptive_alpha(a, b);
            CHECK(v > 0.0);
            CHECK(v < 1.0);
            CHECK(std::abs(v + adaptive_alpha(b, a) - 1.0) <= 1e-12);
            CHECK(adaptive_alpha(a + 0.1, b) > v);
            CHECK(adaptive_alpha(a, b + 0.1) < v);
        }
    }
    // Extreme gaps stay finite and inside the open interval only up to rounding.
    CHECK(std::isfinite(adaptive_alpha(1000.0, 0.0)));
    CHECK_THROWS_AS(adaptive_alpha(std::nan(""), 0.0), NumericError);
    NoGradScope ng;
    CHECK(adaptive_alpha(Tensor::scalar(2.0), Tensor::scalar(0.5)).item() ==
          doctest::Approx(adaptive_alpha(2.0, 0.5)).epsilon(1e-15));
}

TEST_CASE("objective identities")
{
    std::mt19937_64 rng(1);
    for (int t = 0; t < 20; ++t) {
        const BatchOutputs out = random_batch(rng);
        NoGradScope ng;
        ObjectiveConfig zero;
        zero.lambda = 0.0;
        CHECK(std::abs(capt_loss(out, zero).total.item() - cross_entropy_logits(out.logits_clean, out.labels).item()) <=
              1e-12);
        ObjectiveConfig fixed0;
        fixed0.alpha_mode = AlphaMode::fixed;
        fixed0.fixed_alpha = 0.0;
        CHECK(std::abs(capt_loss(out, fixed0).total.item() - trades_loss(out, fixed0.lambda).item()) <= 1e-12);
        ObjectiveConfig fixed1 = fixed0;
        fixed1.fixed_alpha = 1.0;
        const auto l1 = capt_loss(out, fixed1);
        CHECK(std::abs(l1.total.item() - (l1.ce_clean + 100.0 * l1.l_cons_frz)) <= 1e-10);
    }
}

TEST_CASE("capt loss matches an independent scalar recomposition")
{
    std::mt19937_64 rng(2);
    for (int t = 0; t < 10; ++t) {
        const BatchOutputs out = random_batch(rng, 5, 3);
        NoGradScope ng;
        ObjectiveConfig cfg;
        const auto l = capt_loss(out, cfg);
        const double ce = ce_oracle(out.logits_clean, out.labels);
        const double lt = kl_oracle(out.logits_adv, out.logits_clean);
        const double lf = kl_oracle(out.logits_adv, out.logits_frz);
        const double a = 1.0 / (1.0 + std::exp(ce - ce_oracle(out.logits_frz, out.labels)));
        const double total = ce + 100.0 * ((1.0 - a) * lt + a * lf);
        CHECK(std::abs(l.total.item() - total) <= 1e-12 * std::max(1.0, std::abs(total)));
        CHECK(std::abs(l.ce_clean - ce) <= 1e-12);
        CHECK(std::abs(l.l_cons_train - lt) <= 1e-12);
        CHECK(std::abs(l.l_cons_frz - lf) <= 1e-12);
        CHECK(std::abs(l.alpha_cons - a) <= 1e-12);
        CHECK(std::abs(trades_loss(out, 1.0).item() - (ce + lt)) <= 1e-12);
    }
}

TEST_CASE("ablation masks compose the documented terms")
{
    std::mt19937_64 rng(3);
    const BatchOutputs out = random_batch(rng);
    NoGradScope ng;
    ObjectiveConfig cfg;
    cfg.mask = {true, false, false, false};
    const auto adv = capt_loss(out, cfg);
    CHECK(std::abs(adv.total.item() - ce_oracle(out.logits_adv, out.labels)) <= 1e-12);
    cfg.mask = {false, true, true, false};
    const auto ct = capt_loss(out, cfg);
    CHECK(std::abs(ct.total.item() - (ct.ce_clean + 100.0 * ct.l_cons_train)) <= 1e-10);
    CHECK(ct.alpha_cons == 0.0);
    cfg.mask = {false, true, false, true};
    const auto cf = capt_loss(out, cfg);
    CHECK(std::abs(cf.total.item() - (cf.ce_clean + 100.0 * cf.l_cons_frz)) <= 1e-10);
    CHECK(cf.alpha_cons == 1.0);
    cfg.mask = {false, false, false, false};
    CHECK_THROWS_AS(capt_loss(out, cfg), ConfigError);
    ObjectiveConfig neg;
    neg.lambda = -1.0;
    CHECK_THROWS_AS(neg.validate(), ConfigError);
    ObjectiveConfig badalpha;
    badalpha.alpha_mode = AlphaMode::fixed;
    badalpha.fixed_alpha = 1.5;
    CHECK_THROWS_AS(badalpha.validate(), ConfigError);
}

TEST_CASE("consistency terms")
{
    std::mt19937_64 rng(4);
    const Tensor a = random_logits(5, 4, rng);
    const Tensor b = random_logits(5, 4, rng);
    NoGradScope ng;
    CHECK(std::abs(cons_train(a, a).item()) <= 1e-10);
    CHECK(cons_train(a, b).item() > 0.0);
    // Temperature changes the value: scaling both logits is not a no-op.
    CHECK(std::abs(cons_train(scale(a, 0.5), scale(b, 0.5)).item() - cons_train(a, b).item()) > 1e-6);
    CHECK(std::abs(cons_frz(a, b).item() - kl_oracle(a, b)) <= 1e-12);
}

TEST_CASE("cons_frz sends no gradient into the frozen branch")
{
    std::mt19937_64 rng(5);
    const Tensor init = random_logits(3, 4, rng);
    Tensor adv = Tensor::param({3, 4}, std::vector<double>(init.data().begin(), init.data().end()));
    Tensor frz = Tensor::param({3, 4}, std::vector<double>(12, 0.3));
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(cons_frz(adv, mul(frz, Tensor::scalar(2.0))));
    }
    bool nonzero = false;
    for (double g : adv.grad()) {
        nonzero |= g != 0.0;
    }
    CHECK(nonzero);
    if (frz.has_grad()) {
        for (double g : frz.grad()) {
            CHECK(g == 0.0);
        }
    }
}

TEST_CASE("cons_train on a tuned model: zero at eps = 0, positive under attack")
{
    ModelState s = toy_state(6);
    std::mt19937_64 rng(7);
    s.prompts = init_prompts(s, true, true, ContextMode::unified, rng);
    const Tensor x = toy_images(s.config, 4, 8);
    std::vector<double> d(x.numel());
    std::normal_distribution<double> nd(0.0, 0.03);
    for (double& v : d) {
        v = nd(rng);
    }
    const Tensor x_adv = clamp(add(x, Tensor::from(x.shape(), d)), 0.0, 1.0);
    NoGradScope ng;
    const Tensor clean = predict_logits(s, x);
    CHECK(std::abs(cons_train(predict_logits(s, x), clean).item()) <= 1e-10);
    CHECK(cons_train(predict_logits(s, x_adv), clean).item() > 0.0);
}

TEST_CASE("baseline objectives: AVP, PAFT, APT")
{
    const ModelState base = toy_state(9);
    const Tensor x = toy_images(base.config, 4, 10);
    const Labels y{0, 1, 1, 0};
    NoGradScope ng;

    ModelState avp = base.clone();
    avp.pixel_prompt = make_pixel_prompt(avp.config, 2);
    // phi = 0 and delta = 0: the loss is twice the clean cross-entropy.
    const Tensor logits = predict_logits(avp, x);
    const double ce = cross_entropy_logits(predict_logits(base, x), y).item();
    CHECK(std::abs(avp_loss(logits, logits, y).item() - 2.0 * ce) <= 1e-12);

    ModelState paft = base.clone();
    paft.probe = make_probe(paft);
    CHECK(paft.probe->weight.shape() == Shape{base.config.embed_dim, base.config.num_classes});
    paft.probe->weight = Tensor::zeros(paft.probe->weight.shape());
    paft.probe->bias = Tensor::zeros(paft.probe->bias.shape());
    CHECK(std::abs(paft_loss(predict_logits(paft, x), y).item() - std::log(2.0)) <= 1e-12);

    const Tensor adv_logits = predict_logits(base, x);
    CHECK(apt_loss(adv_logits, y).item() == cross_entropy_logits(adv_logits, y).item());
}

TEST_CASE("the zero-shot probe init reproduces the zero-shot head")
{
    ModelState s = toy_state(11);
    const Tensor x = toy_images(s.config, 3, 12);
    NoGradScope ng;
    const Tensor zs = predict_logits(s, x);
    s.probe = make_probe(s);
    const Tensor pr = predict_logits(s, x);
    for (std::size_t i = 0; i < zs.numel(); ++i) {
        CHECK(std::abs(zs.at(i) - pr.at(i)) <= 1e-10);
    }
}

TEST_CASE("pixel prompt touches only the border and stays in range")
{
    EncoderConfig c = toy_grad_config();
    PixelPrompt pp = make_pixel_prompt(c, 2);
    std::size_t on = 0;
    for (std::size_t i = 0; i < c.image_size; ++i) {
        for (std::size_t j = 0; j < c.image_size; ++j) {
            const bool border = i < 2 || j < 2 || i >= c.image_size - 2 || j >= c.image_size - 2;
            for (std::size_t k = 0; k < c.channels; ++k) {
                const double m = pp.mask.at((i * c.image_size + j) * c.channels + k);
                CHECK(m == (border ? 1.0 : 0.0));
                on += m == 1.0 ? 1 : 0;
            }
        }
    }
    CHECK(on == (64 - 16) * 3);
    pp.phi = Tensor::full(pp.phi.shape(), 0.7);
    NoGradScope ng;
    const Tensor out = apply_pixel_prompt(toy_images(c, 2, 13), pp);
    for (double v : out.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("HEP prediction is deterministic and depends on the template order")
{
    const ModelState s = toy_state(14);
    const Tensor x = toy_images(s.config, 3, 15);
    NoGradScope ng;
    const Tensor p1 = hep_predict(x, s);
    const Tensor p2 = hep_predict(x, s);
    CHECK(std::equal(p1.data().begin(), p1.data().end(), p2.data().begin()));

    auto probs_for = [&](std::vector<std::size_t> tmpl) {
        std::vector<std::vector<std::size_t>> seqs;
        for (std::size_t k = 0; k < s.config.num_classes; ++k) {
            auto seq = tmpl;
            seq.push_back(s.config.class_token(k));
            seq.push_back(s.config.eot_token());
            seqs.push_back(seq);
        }
        return class_probs(encode_image(x, s, false), encode_tokens(seqs, s), s.temperature());
    };
    auto tmpl = caption_templates(s.config).front();
    const Tensor same = probs_for(tmpl);
    for (std::size_t i = 0; i < same.numel(); ++i) {
        CHECK(same.at(i) == doctest::Approx(p1.at(i)).epsilon(1e-14));
    }
    std::vector<std::size_t> ordered(s.config.text_context_len);
    for (std::size_t i = 0; i < ordered.size(); ++i) {
        ordered[i] = i;
    }
    auto reversed = ordered;
    std::reverse(reversed.begin(), reversed.end());
    const Tensor a = probs_for(ordered);
    const Tensor b = probs_for(reversed);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        diff = std::max(diff, std::abs(a.at(i) - b.at(i)));
    }
    CHECK(diff > 1e-9);
}

TEST_CASE("APT class-specific context with equal rows equals unified context")
{
    ModelState uc = toy_state(16);
    std::mt19937_64 rng(17);
    uc.prompts = init_prompts(uc, false, true, ContextMode::unified, rng, true);
    ModelState csc = uc.clone();
    std::vector<double> rows;
    for (std::size_t k = 0; k < uc.config.num_classes; ++k) {
        rows.insert(rows.end(), uc.prompts.text_context.data().begin(), uc.prompts.text_context.data().end());
    }
    csc.prompts.mode = ContextMode::class_specific;
    csc.prompts.text_context =
        Tensor::from({uc.config.num_classes, uc.config.text_context_len, uc.config.embed_dim}, rows);
    const Tensor x = toy_images(uc.config, 4, 18);
    const Labels y{1, 0, 1, 1};
    NoGradScope ng;
    CHECK(std::abs(apt_loss(predict_logits(uc, x), y).item() - apt_loss(predict_logits(csc, x), y).item()) <= 1e-12);
}

TEST_CASE("method names round-trip")
{
    for (Method m : {Method::capt, Method::apt_uc, Method::apt_csc, Method::avp, Method::paft, Method::hep}) {
        CHECK(parse_method(to_string(m)) == m);
    }
    CHECK_THROWS_AS(parse_method("tecoa"), ConfigError);
}
