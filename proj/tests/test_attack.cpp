#include <doctest.h>

#include <cmath>
#include <random>

#include "capt/attack.hpp"
#include "capt/errors.hpp"
#include "capt/objectives.hpp"

using namespace capt;

namespace {

ModelState small_model(std::uint64_t seed)
{
    EncoderConfig c;
    c.image_size = 8;
    c.embed_dim = 16;
    c.num_layers = 2;
    c.num_classes = 4;
    std::mt19937_64 rng(seed);
    ModelState s;
    s.config = c;
    s.theta = init_backbone(c, rng);
    s.theta.set_requires_grad(false);
    return s;
}

Tensor random_images(std::size_t n, std::size_t side, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> v(n * side * side * 3);
    for (double& x : v) {
        x = u(rng);
    }
    return Tensor::from({n, side, side, 3}, v);
}

} // namespace

TEST_CASE("default attack configurations")
{
    const auto t = AttackConfig::train_default(4.0 / 255.0);
    CHECK(t.steps == 3);
    CHECK(t.step_size == doctest::Approx(2.0 * 4.0 / 255.0 / 3.0));
    CHECK(t.random_start);
    const auto e = AttackConfig::eval_default(4.0 / 255.0);
    CHECK(e.steps == 100);
    CHECK(e.step_size == doctest::Approx(1.0 / 255.0));
    AttackConfig bad;
    bad.epsilon = 0.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = {};
    bad.steps = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("project_linf matches a scalar loop and leaves inside entries untouched")
{
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd(0.0, 0.1);
    std::vector<double> v(200);
    for (double& x : v) {
        x = nd(rng);
    }
    const double eps = 0.08;
    const Tensor p = project_linf(Tensor::from({200}, v), eps);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double oracle = v[i] > eps ? eps : (v[i] < -eps ? -eps : v[i]);
        CHECK(p.at(i) == oracle);
        if (std::abs(v[i]) <= eps) {
            CHECK(p.at(i) == v[i]);
        }
    }
    CHECK_THROWS_AS(project_linf(Tensor::from({1}, {0.0}), 0.0), ConfigError);
}

TEST_CASE("one zero-init step on a linear loss hits the best sign corner")
{
    std::mt19937_64 rng(9);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (std::size_t d = 1; d <= 10; ++d) {
        std::vector<double> w(d);
        for (double& x : w) {
            x = nd(rng);
        }
        const Tensor wt = Tensor::from({d, 1}, w);
        AttackConfig cfg;
        cfg.epsilon = 0.03;
        cfg.step_size = 0.06;
        cfg.steps = 1;
        cfg.init_zero = true;
        const auto adv =
            pgd_attack(Tensor::full({1, d}, 0.5), [&](const Tensor& x) { return reshape(matmul(x, wt), {1}); }, cfg);
        double best = -1e9;
        std::size_t best_mask = 0;
        for (std::size_t m = 0; m < (std::size_t{1} << d); ++m) {
            double v = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                v += w[i] * ((m >> i & 1U) ? 0.03 : -0.03);
            }
            if (v > best) {
                best = v;
                best_mask = m;
            }
        }
        for (std::size_t i = 0; i < d; ++i) {
            CHECK(adv.delta.at(i) == ((best_mask >> i & 1U) ? 0.03 : -0.03));
        }
    }
}

TEST_CASE("init_zero on a convex quadratic gives a non-decreasing loss trace")
{
    // loss = sum((x - c)^2) per example, maximised by moving away from c.
    const std::size_t d = 6;
    std::vector<double> c{0.1, 0.9, 0.45, 0.55, 0.3, 0.7};
    const Tensor ct = Tensor::from({d}, c);
    AttackConfig cfg;
    cfg.epsilon = 0.1;
    cfg.step_size = 0.01;
    cfg.steps = 15;
    cfg.init_zero = true;
    const Tensor x = Tensor::from({1, d}, {0.2, 0.8, 0.5, 0.5, 0.35, 0.6});
    const auto adv = pgd_attack(
        x,
        [&](const Tensor& xi) {
            Tensor diff = sub(xi, ct);
            return sum(mul(diff, diff), 1);
        },
        cfg);
    REQUIRE(adv.loss_trace.size() == cfg.steps);
    for (std::size_t k = 1; k < adv.loss_trace.size(); ++k) {
        CHECK(adv.loss_trace[k] >= adv.loss_trace[k - 1]);
    }
}

TEST_CASE("budget and range hold after the attack; clamping binds at the borders")
{
    const ModelState s = small_model(1);
    Tensor x = random_images(6, 8, 2);
    std::vector<double> v(x.data().begin(), x.data().end());
    v[0] = 0.0;
    v[1] = 1.0;
    x = Tensor::from(x.shape(), v);
    AttackConfig cfg = AttackConfig::eval_default(8.0 / 255.0);
    cfg.steps = 10;
    AttackAudit audit;
    const auto adv = pgd_attack(x, Labels{0, 1, 2, 3, 0, 1}, s, cfg, &audit);
    CHECK(audit.calls == 1);
    CHECK(audit.budget_violations == 0);
    CHECK(audit.range_violations == 0);
    CHECK(audit.max_abs_delta <= cfg.epsilon);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        CHECK(std::abs(adv.delta.at(i)) <= cfg.epsilon);
        CHECK(adv.x_adv.at(i) >= 0.0);
        CHECK(adv.x_adv.at(i) <= 1.0);
        CHECK(std::abs(adv.x_adv.at(i) - x.at(i)) <= cfg.epsilon + 1e-15);
    }
}

TEST_CASE("a vanishing budget leaves the input unchanged")
{
    const ModelState s = small_model(4);
    const Tensor x = random_images(3, 8, 5);
    AttackConfig cfg = AttackConfig::eval_default(1e-12);
    cfg.steps = 5;
    const auto adv = pgd_attack(x, Labels{0, 1, 2}, s, cfg);
    for (std::size_t i = 0; i < x.numel(); ++i) {
        CHECK(std::abs(adv.x_adv.at(i) - x.at(i)) <= 1e-12 + 1e-15);
    }
}

TEST_CASE("zero-init attack never lowers any example's loss on the toy model")
{
    const ModelState s = small_model(6);
    const Tensor x = random_images(8, 8, 7);
    const Labels y{0, 1, 2, 3, 3, 2, 1, 0};
    AttackConfig cfg = AttackConfig::eval_default(8.0 / 255.0);
    cfg.init_zero = true;
    cfg.steps = 20;
    const auto adv = pgd_attack(x, y, s, cfg);
    NoGradScope ng;
    const Tensor clean = cross_entropy_per_example(predict_logits(s, x), y);
    const Tensor robust = cross_entropy_per_example(predict_logits(s, adv.x_adv), y);
    for (std::size_t i = 0; i < y.size(); ++i) {
        CHECK(robust.at(i) >= clean.at(i));
    }
}

TEST_CASE("attack is deterministic in its seed and touches no model gradients")
{
    ModelState s = small_model(8);
    std::mt19937_64 rng(9);
    s.prompts = init_prompts(s, true, true, ContextMode::unified, rng);
    const Tensor x = random_images(4, 8, 10);
    AttackConfig cfg = AttackConfig::train_default(8.0 / 255.0);
    cfg.seed = 42;
    const auto a = pgd_attack(x, Labels{0, 1, 2, 3}, s, cfg);
    const auto b = pgd_attack(x, Labels{0, 1, 2, 3}, s, cfg);
    CHECK(std::equal(a.delta.data().begin(), a.delta.data().end(), b.delta.data().begin()));
    cfg.seed = 43;
    const auto c = pgd_attack(x, Labels{0, 1, 2, 3}, s, cfg);
    CHECK_FALSE(std::equal(a.delta.data().begin(), a.delta.data().end(), c.delta.data().begin()));
    for (const auto& t : s.prompts.learnables()) {
        CHECK_FALSE(t.has_grad());
    }
    bool any = false;
    s.theta.for_each([&](const std::string&, const Tensor& t) { any |= t.has_grad(); });
    CHECK_FALSE(any);
}

TEST_CASE("inputs outside the pixel range are rejected")
{
    AttackConfig cfg;
    cfg.steps = 1;
    CHECK_THROWS(pgd_attack(
        Tensor::from({1, 2}, {0.5, 1.5}), [](const Tensor& x) { return sum(x, 1); }, cfg));
}
