#include "capt/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

#include <json.hpp>

#include "capt/checkpoint.hpp"
#include "capt/eval.hpp"

namespace capt {

namespace {

std::vector<Tensor> learnables_of(const ModelState& s, Method method)
{
    switch (method) {
    case Method::capt:
    case Method::apt_uc:
    case Method::apt_csc: return s.prompts.learnables();
    case Method::avp: return {s.pixel_prompt->phi};
    case Method::paft: return {s.probe->weight, s.probe->bias};
    case Method::hep: return {};
    }
    return {};
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b)
{
    std::uint64_t z = a * 0x9e3779b97f4a7c15ULL + b + 0x632be59bd9b4e019ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

} // namespace

double default_lr(Method m) { return (m == Method::avp || m == Method::paft) ? 0.1 : 0.0025; }

double TrainConfig::learning_rate() const { return lr0.value_or(default_lr(objective.method)); }

void TrainConfig::validate() const
{
    if (batch_size < 1) {
        throw ConfigError("batch_size must be at least 1");
    }
    if (!(learning_rate() > 0.0)) {
        throw ConfigError("learning rate must be positive");
    }
    if (!(grad_clip >= 0.0)) {
        throw ConfigError("grad_clip must be non-negative");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw ConfigError("momentum must lie in [0, 1)");
    }
    attack.validate();
    objective.validate();
}

double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double lr0)
{
    if (warmup_steps > 0 && step < warmup_steps) {
        return lr0 * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (total_steps <= warmup_steps + 1) {
        return lr0;
    }
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - 1 - warmup_steps);
    return std::max(0.0, lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, progress))));
}

void sgd_momentum_step(std::vector<double>& params, std::span<const double> grads, std::vector<double>& velocity,
                       double lr, double momentum)
{
    if (params.size() != grads.size() || params.size() != velocity.size()) {
        throw ShapeError("sgd_momentum_step: parameter, gradient and velocity sizes differ");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

std::vector<std::size_t> nshot_sample(const Dataset& data, std::size_t shots, std::uint64_t seed)
{
    std::vector<std::vector<std::size_t>> by_class(data.num_classes);
    for (std::size_t i = 0; i < data.size(); ++i) {
        by_class.at(data.labels[i]).push_back(i);
    }
    std::mt19937_64 rng(mix(seed, 0x5107));
    std::vector<std::size_t> out;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
        auto& pool = by_class[c];
        if (shots == 0) {
            out.insert(out.end(), pool.begin(), pool.end());
            continue;
        }
        if (pool.size() < shots) {
            throw ConfigError("class " + std::to_string(c) + " has " + std::to_string(pool.size()) +
                              " examples, fewer than " + std::to_string(shots) + " shots");
        }
        std::shuffle(pool.begin(), pool.end(), rng);
        std::vector<std::size_t> pick(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(shots));
        std::sort(pick.begin(), pick.end());
        out.insert(out.end(), pick.begin(), pick.end());
    }
    return out;
}

TestSplit split_test_pool(const Dataset& test, double fraction)
{
    if (!(fraction >= 0.0 && fraction < 1.0)) {
        throw ConfigError("validation fraction must lie in [0, 1)");
    }
    std::vector<std::vector<std::size_t>> by_class(test.num_classes);
    for (std::size_t i = 0; i < test.size(); ++i) {
        by_class.at(test.labels[i]).push_back(i);
    }
    TestSplit s;
    for (const auto& pool : by_class) {
        const auto nval = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(pool.size())));
        s.validation.insert(s.validation.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(nval));
        s.evaluation.insert(s.evaluation.end(), pool.begin() + static_cast<std::ptrdiff_t>(nval), pool.end());
    }
    return s;
}

std::vector<std::size_t> eval_subset(const Dataset& test, const std::vector<std::size_t>& pool, std::size_t per_class)
{
    std::vector<std::size_t> taken(test.num_classes, 0);
    std::vector<std::size_t> out;
    for (std::size_t i : pool) {
        const std::size_t c = test.labels.at(i);
        if (per_class == 0 || taken[c] < per_class) {
            out.push_back(i);
            ++taken[c];
        }
    }
    return out;
}

void RunRecord::write_ndjson(std::ostream& os) const
{
    for (const auto& s : steps) {
        nlohmann::json j = {{"type", "step"},          {"step", s.step},
                            {"epoch", s.epoch},        {"lr", s.lr},
                            {"total", s.total},        {"ce_clean", s.ce_clean},
                            {"ce_adv", s.ce_adv},      {"l_cons_train", s.l_cons_train},
                            {"l_cons_frz", s.l_cons_frz}, {"alpha_cons", s.alpha_cons}, {"grad_norm", s.grad_norm}};
        os << j.dump() << '\n';
    }
    for (const auto& e : epochs) {
        nlohmann::json j = {{"type", "epoch"}, {"epoch", e.epoch}, {"val_clean", e.val_clean}, {"val_robust", e.val_robust}};
        os << j.dump() << '\n';
    }
    nlohmann::json j = {{"type", "run"},
                        {"method", method},
                        {"seed", seed},
                        {"shot_indices", shot_indices},
                        {"steps", steps.size()},
                        {"attack_calls", audit.calls},
                        {"budget_violations", audit.budget_violations},
                        {"range_violations", audit.range_violations},
                        {"max_abs_delta", audit.max_abs_delta},
                        {"checkpoint", checkpoint}};
    os << j.dump() << '\n';
}

ModelState prepare_method(const ModelState& pretrained, Method method, const TrainConfig& cfg)
{
    ModelState s = pretrained.frozen_copy();
    std::mt19937_64 rng(mix(cfg.seed, 0x9a11));
    switch (method) {
    case Method::capt:
        s.prompts = init_prompts(s, true, true, ContextMode::unified, rng, cfg.random_context);
        break;
    case Method::apt_uc:
        s.prompts = init_prompts(s, false, true, ContextMode::unified, rng, cfg.random_context);
        break;
    case Method::apt_csc:
        s.prompts = init_prompts(s, false, true, ContextMode::class_specific, rng, cfg.random_context);
        s.config.context_mode = ContextMode::class_specific;
        break;
    case Method::avp: s.pixel_prompt = make_pixel_prompt(s.config, cfg.objective.avp_border); break;
    case Method::paft: s.probe = make_probe(s); break;
    case Method::hep: break;
    }
    return s;
}

TuneResult tune(const ModelState& state, const ModelState& frozen, const Dataset& train, const Dataset& val,
                const TrainConfig& cfg)
{
    cfg.validate();
    const Method method = cfg.objective.method;
    if (!frozen.prompts.empty() || frozen.pixel_prompt || frozen.probe) {
        throw InvariantViolation("frozen guidance model must be prompt-free");
    }
    bool backbone_trainable = false;
    state.theta.for_each([&](const std::string&, const Tensor& t) { backbone_trainable |= t.requires_grad(); });
    if (backbone_trainable) {
        throw InvariantViolation("tuning requires a frozen backbone");
    }
    if (train.size() == 0) {
        throw ConfigError("empty training set");
    }

    TuneResult result;
    result.state = state.clone();
    ModelState& s = result.state;
    const Backbone reference = state.theta.clone();
    RunRecord& rec = result.record;
    rec.method = to_string(method);
    rec.seed = cfg.seed;

    std::vector<Tensor> params = learnables_of(s, method);
    if (method != Method::hep && params.empty()) {
        throw ConfigError("state carries no learnables for method " + rec.method);
    }
    std::vector<std::vector<double>> velocity;
    for (const auto& p : params) {
        velocity.emplace_back(p.numel(), 0.0);
    }

    const std::size_t per_epoch = (train.size() + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = method == Method::hep ? 0 : cfg.epochs * per_epoch;
    const std::size_t warmup = cfg.warmup_epochs * per_epoch;
    const double lr0 = cfg.learning_rate();

    Tensor zt_frz;
    {
        NoGradScope ng;
        zt_frz = encode_text(all_classes(frozen.config), frozen, false);
    }

    std::mt19937_64 rng(mix(cfg.seed, 0x7a1e));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t step = 0;
    const std::size_t epochs = method == Method::hep ? 0 : cfg.epochs;
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(end));
            Tensor x = train.images(idx);
            Labels y = train.labels_at(idx);

            AttackConfig acfg = cfg.attack;
            acfg.seed = mix(cfg.seed, step);
            AdvBatch adv;
            if (method == Method::avp) {
                // The perturbation is generated without the pixel prompt.
                ModelState bare = s;
                bare.pixel_prompt.reset();
                adv = pgd_attack(x, y, bare, acfg, &rec.audit);
            } else {
                adv = pgd_attack(x, y, s, acfg, &rec.audit);
            }

            Tape tape;
            TapeScope scope(tape);
            StepRecord sr;
            Tensor loss;
            switch (method) {
            case Method::capt: {
                Tensor zt = encode_text(all_classes(s.config), s, true);
                BatchOutputs out;
                out.labels = y;
                out.logits_clean = similarity_logits(encode_image(x, s, true), zt, s.temperature());
                out.logits_adv = similarity_logits(encode_image(adv.x_adv, s, true), zt, s.temperature());
                {
                    NoGradScope ng;
                    out.logits_frz = similarity_logits(encode_image(x, frozen, false), zt_frz, frozen.temperature());
                }
                LossBreakdown b = capt_loss(out, cfg.objective);
                loss = b.total;
                sr.ce_clean = b.ce_clean;
                sr.ce_adv = b.ce_adv;
                sr.l_cons_train = b.l_cons_train;
                sr.l_cons_frz = b.l_cons_frz;
                sr.alpha_cons = b.alpha_cons;
                break;
            }
            case Method::apt_uc:
            case Method::apt_csc:
                loss = apt_loss(predict_logits(s, adv.x_adv), y);
                sr.ce_adv = loss.item();
                break;
            case Method::avp: {
                Tensor lc = predict_logits(s, x, zt_frz);
                Tensor la = predict_logits(s, adv.x_adv, zt_frz);
                loss = avp_loss(lc, la, y);
                break;
            }
            case Method::paft:
                loss = paft_loss(predict_logits(s, adv.x_adv), y);
                sr.ce_adv = loss.item();
                break;
            case Method::hep: break;
            }
            if (!std::isfinite(loss.item())) {
                throw NumericError("non-finite loss at step " + std::to_string(step));
            }
            tape.backward(loss);

            sr.step = step;
            sr.epoch = epoch;
            sr.lr = cosine_lr(step, total_steps, warmup, lr0);
            sr.total = loss.item();
            std::vector<std::vector<double>> grads;
            double sq = 0.0;
            for (Tensor& p : params) {
                std::vector<double> g(p.numel(), 0.0);
                if (p.has_grad()) {
                    auto pg = p.grad();
                    g.assign(pg.begin(), pg.end());
                }
                for (double v : g) {
                    if (!std::isfinite(v)) {
                        throw NumericError("non-finite gradient at step " + std::to_string(step));
                    }
                    sq += v * v;
                }
                grads.push_back(std::move(g));
            }
            sr.grad_norm = std::sqrt(sq);
            const double factor =
                cfg.grad_clip > 0.0 && sr.grad_norm > cfg.grad_clip ? cfg.grad_clip / sr.grad_norm : 1.0;
            for (std::size_t i = 0; i < params.size(); ++i) {
                Tensor& p = params[i];
                std::vector<double> values(p.data().begin(), p.data().end());
                if (factor != 1.0) {
                    for (double& v : grads[i]) {
                        v *= factor;
                    }
                }
                sgd_momentum_step(values, grads[i], velocity[i], sr.lr, cfg.momentum);
                p.assign(values);
                p.zero_grad();
            }
            rec.steps.push_back(sr);
        }
        if (cfg.val_every > 0 && val.size() > 0 && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == epochs)) {
            AttackConfig vcfg = AttackConfig::eval_default(cfg.attack.epsilon);
            vcfg.steps = cfg.val_attack_steps;
            vcfg.seed = mix(cfg.seed, 0xe7a1 + epoch);
            std::vector<std::size_t> all(val.size());
            std::iota(all.begin(), all.end(), 0);
            AccuracyPair acc = evaluate_accuracy(s, val, all, vcfg);
            rec.epochs.push_back({epoch, acc.clean, acc.robust});
        }
    }
    if (!backbone_identical(reference, s.theta)) {
        throw InvariantViolation("backbone parameters changed during tuning");
    }
    return result;
}

} // namespace capt
