#include "capt/attack.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "capt/objectives.hpp"

namespace capt {

namespace {

std::vector<double> per_example_values(const Tensor& losses, std::size_t batch)
{
    if (losses.shape() != Shape{batch}) {
        throw ShapeError("attack loss must return one value per example, got " + to_string(losses.shape()));
    }
    return {losses.data().begin(), losses.data().end()};
}

double mean_of(const std::vector<double>& v)
{
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

} // namespace

void AttackConfig::validate() const
{
    if (!(epsilon > 0.0) || epsilon > 1.0) {
        throw ConfigError("attack epsilon must lie in (0, 1]");
    }
    if (!(step_size > 0.0)) {
        throw ConfigError("attack step size must be positive");
    }
    if (steps < 1) {
        throw ConfigError("attack needs at least one step");
    }
    if (!(clamp_lo < clamp_hi)) {
        throw ConfigError("attack clamp range is empty");
    }
}

AttackConfig AttackConfig::train_default(double epsilon)
{
    AttackConfig c;
    c.epsilon = epsilon;
    c.step_size = 2.0 * epsilon / 3.0;
    c.steps = 3;
    c.random_start = true;
    return c;
}

AttackConfig AttackConfig::eval_default(double epsilon)
{
    AttackConfig c;
    c.epsilon = epsilon;
    c.step_size = epsilon / 4.0;
    c.steps = 100;
    c.random_start = true;
    return c;
}

Tensor project_linf(const Tensor& delta, double epsilon)
{
    if (!(epsilon > 0.0)) {
        throw ConfigError("project_linf: epsilon must be positive");
    }
    std::vector<double> v(delta.data().begin(), delta.data().end());
    for (double& x : v) {
        x = std::clamp(x, -epsilon, epsilon);
    }
    return Tensor::from(delta.shape(), std::move(v));
}

AdvBatch pgd_attack(const Tensor& x, const PerExampleLoss& loss, const AttackConfig& cfg, AttackAudit* audit)
{
    cfg.validate();
    for (double v : x.data()) {
        if (v < cfg.clamp_lo || v > cfg.clamp_hi) {
            throw std::invalid_argument("pgd_attack: input outside the clamp range");
        }
    }
    const std::size_t batch = x.rank() == 0 ? 1 : x.dim(0);
    const std::size_t n = x.numel();
    const double eps = cfg.epsilon;
    const Tensor x0 = x.detach();

    std::vector<double> delta(n, 0.0);
    if (cfg.random_start && !cfg.init_zero) {
        std::mt19937_64 rng(cfg.seed);
        std::uniform_real_distribution<double> u(-eps, eps);
        for (double& d : delta) {
            d = u(rng);
        }
    }

    // Returns per-example losses at x0 + delta; fills `grad` when requested.
    auto evaluate = [&](const std::vector<double>& d, std::vector<double>* grad) {
        Tape tape;
        TapeScope scope(tape);
        Tensor leaf = Tensor::param(x0.shape(), d);
        Tensor x_in = clamp(add(x0, leaf), cfg.clamp_lo, cfg.clamp_hi);
        Tensor per = loss(x_in);
        std::vector<double> values = per_example_values(per, batch);
        if (grad != nullptr) {
            tape.backward(mean(per));
            auto g = leaf.grad();
            for (double v : g) {
                if (!std::isfinite(v)) {
                    throw NumericError("pgd_attack: non-finite input gradient");
                }
            }
            grad->assign(g.begin(), g.end());
        }
        return values;
    };

    std::vector<double> clean_losses;
    AdvBatch out;
    std::vector<double> grad;
    for (std::size_t k = 0; k < cfg.steps; ++k) {
        std::vector<double> values = evaluate(delta, &grad);
        if (k == 0 && cfg.init_zero) {
            clean_losses = values;
        }
        if (k > 0) {
            out.loss_trace.push_back(mean_of(values));
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double g = grad[i];
            const double s = g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0);
            delta[i] = std::clamp(delta[i] + cfg.step_size * s, -eps, eps);
        }
        // Budget and range invariants after every iteration.
        std::size_t budget_bad = 0;
        std::size_t range_bad = 0;
        double max_abs = 0.0;
        const auto xd = x0.data();
        for (std::size_t i = 0; i < n; ++i) {
            const double a = std::abs(delta[i]);
            max_abs = std::max(max_abs, a);
            budget_bad += a > eps + 1e-12 ? 1 : 0;
            const double xa = std::clamp(xd[i] + delta[i], cfg.clamp_lo, cfg.clamp_hi);
            range_bad += (xa < cfg.clamp_lo || xa > cfg.clamp_hi) ? 1 : 0;
        }
        if (audit != nullptr) {
            audit->budget_violations += budget_bad;
            audit->range_violations += range_bad;
            audit->max_abs_delta = std::max(audit->max_abs_delta, max_abs);
        }
        if (budget_bad > 0) {
            throw InvariantViolation("pgd_attack: |delta| exceeded epsilon at step " + std::to_string(k));
        }
        if (range_bad > 0) {
            throw InvariantViolation("pgd_attack: adversarial pixel left the clamp range at step " +
                                     std::to_string(k));
        }
    }
    std::vector<double> final_values;
    {
        NoGradScope ng;
        Tensor x_in = clamp(add(x0, Tensor::from(x0.shape(), delta)), cfg.clamp_lo, cfg.clamp_hi);
        final_values = per_example_values(loss(x_in), batch);
    }
    out.loss_trace.push_back(mean_of(final_values));
    if (cfg.init_zero) {
        for (std::size_t b = 0; b < batch; ++b) {
            if (final_values[b] < clean_losses[b]) {
                throw InvariantViolation("pgd_attack: attack lowered the loss of example " + std::to_string(b));
            }
        }
    }
    out.delta = Tensor::from(x0.shape(), delta);
    out.x_adv = clamp(add(x0, out.delta), cfg.clamp_lo, cfg.clamp_hi);
    if (audit != nullptr) {
        ++audit->calls;
    }
    return out;
}

AdvBatch pgd_attack(const Tensor& x, std::span<const std::size_t> y, const ModelState& state, const AttackConfig& cfg,
                    AttackAudit* audit)
{
    // Gradients must reach the input only, so attack a fully detached copy.
    const ModelState view = detached_copy(state);
    const Labels labels(y.begin(), y.end());
    Tensor z_txt;
    if (!view.probe) {
        NoGradScope ng;
        z_txt = encode_text(all_classes(view.config), view, true);
    }
    auto loss = [&](const Tensor& xi) { return cross_entropy_per_example(predict_logits(view, xi, z_txt), labels); };
    return pgd_attack(x, loss, cfg, audit);
}

} // namespace capt
