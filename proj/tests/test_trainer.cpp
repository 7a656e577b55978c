#include <doctest.h>

#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "capt/checkpoint.hpp"
#include "capt/errors.hpp"
#include "capt/gradsuite.hpp"
#include "capt/pretrain.hpp"
#include "capt/trainer.hpp"

using namespace capt;

namespace {

SynthSpec toy_data_spec()
{
    SynthSpec s;
    s.num_classes = 2;
    s.image_size = 8;
    s.train_per_class = 6;
    s.test_per_class = 5;
    return s;
}

ModelState toy_model(std::uint64_t seed)
{
    const EncoderConfig c = toy_grad_config();
    std::mt19937_64 rng(seed);
    ModelState s;
    s.config = c;
    s.theta = init_backbone(c, rng);
    s.theta.set_requires_grad(false);
    return s;
}

TrainConfig quick_config(Method m)
{
    TrainConfig tc;
    tc.objective.method = m;
    tc.epochs = 2;
    tc.batch_size = 4;
    tc.shots = 2;
    tc.attack.steps = 2;
    tc.objective.avp_border = 2;
    return tc;
}

std::vector<double> flat(const std::vector<Tensor>& ts)
{
    std::vector<double> v;
    for (const auto& t : ts) {
        v.insert(v.end(), t.data().begin(), t.data().end());
    }
    return v;
}

std::vector<Tensor> learnables(const ModelState& s)
{
    std::vector<Tensor> out = s.prompts.learnables();
    if (s.pixel_prompt) {
        out.push_back(s.pixel_prompt->phi);
    }
    if (s.probe) {
        out.push_back(s.probe->weight);
        out.push_back(s.probe->bias);
    }
    return out;
}

} // namespace

TEST_CASE("cosine schedule")
{
    const double lr0 = 0.0025;
    CHECK(cosine_lr(10, 110, 10, lr0) == lr0);
    CHECK(cosine_lr(0, 110, 10, lr0) == 0.0);
    CHECK(cosine_lr(5, 110, 10, lr0) == doctest::Approx(lr0 / 2));
    CHECK(cosine_lr(109, 110, 10, lr0) == doctest::Approx(0.0).epsilon(1e-18));
    CHECK(std::abs(cosine_lr(109, 110, 10, lr0)) < 1e-15);
    // Post-warmup midpoint: progress 1/2.
    CHECK(cosine_lr(60, 111, 10, lr0) == doctest::Approx(lr0 / 2).epsilon(1e-12));
    CHECK(cosine_lr(0, 100, 0, lr0) == lr0);
    double prev = lr0;
    for (std::size_t s = 10; s < 110; ++s) {
        const double v = cosine_lr(s, 110, 10, lr0);
        CHECK(v <= prev + 1e-18);
        CHECK(v >= 0.0);
        prev = v;
    }
    CHECK(cosine_lr(0, 1, 0, lr0) == lr0);
}

TEST_CASE("SGD momentum: two constant-gradient steps")
{
    std::vector<double> p{1.0, -2.0};
    std::vector<double> v(2, 0.0);
    const std::vector<double> g{0.5, -1.5};
    const double lr = 0.1;
    const double mu = 0.9;
    sgd_momentum_step(p, g, v, lr, mu);
    sgd_momentum_step(p, g, v, lr, mu);
    CHECK(p[0] == doctest::Approx(1.0 - lr * 0.5 * (2.0 + mu)));
    CHECK(p[1] == doctest::Approx(-2.0 + lr * 1.5 * (2.0 + mu)));
    std::vector<double> bad(3);
    CHECK_THROWS_AS(sgd_momentum_step(bad, g, v, lr, mu), ShapeError);
}

TEST_CASE("N-shot sampling")
{
    const auto data = generate(SynthSpec{}).train;
    const auto one = nshot_sample(data, 1, 0);
    CHECK(one.size() == 8);
    std::set<std::size_t> classes;
    for (std::size_t i : one) {
        classes.insert(data.labels[i]);
    }
    CHECK(classes.size() == 8);
    const auto a = nshot_sample(data, 16, 3);
    CHECK(a == nshot_sample(data, 16, 3));
    CHECK(a != nshot_sample(data, 16, 4));
    CHECK(a.size() == 128);
    CHECK(std::set<std::size_t>(a.begin(), a.end()).size() == 128);
    CHECK(nshot_sample(data, 0, 0).size() == data.size());
    CHECK_THROWS_AS(nshot_sample(data, 10000, 0), ConfigError);
}

TEST_CASE("test pool split is disjoint and class balanced")
{
    const auto test = generate(SynthSpec{}).test;
    const auto split = split_test_pool(test);
    CHECK(split.validation.size() == 8 * 20);
    CHECK(split.evaluation.size() == 8 * 80);
    std::set<std::size_t> v(split.validation.begin(), split.validation.end());
    for (std::size_t i : split.evaluation) {
        CHECK(v.count(i) == 0);
    }
    const auto sub = eval_subset(test, split.evaluation, 10);
    CHECK(sub.size() == 80);
}

TEST_CASE("zero epochs leaves the learnables untouched")
{
    const ModelState pre = toy_model(1);
    const auto data = generate(toy_data_spec());
    TrainConfig tc = quick_config(Method::capt);
    tc.epochs = 0;
    const ModelState st = prepare_method(pre, Method::capt, tc);
    const auto r = tune(st, pre.frozen_copy(), data.train.subset(nshot_sample(data.train, 2, 0)), {}, tc);
    CHECK(r.record.steps.empty());
    CHECK(flat(learnables(r.state)) == flat(learnables(st)));
}

TEST_CASE("one step with lambda = 0 and no warmup follows a hand-stepped oracle")
{
    const ModelState pre = toy_model(2);
    const auto data = generate(toy_data_spec());
    TrainConfig tc = quick_config(Method::capt);
    tc.epochs = 1;
    tc.batch_size = 64;
    tc.warmup_epochs = 0;
    tc.grad_clip = 0.0;
    tc.objective.lambda = 0.0;
    tc.lr0 = 0.01;
    const Dataset train = data.train.subset(nshot_sample(data.train, 2, 0));
    const ModelState st = prepare_method(pre, Method::capt, tc);
    const auto r = tune(st, pre.frozen_copy(), train, {}, tc);
    REQUIRE(r.record.steps.size() == 1);

    ModelState manual = st.clone();
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(cross_entropy_logits(predict_logits(manual, train.images()), train.labels));
    }
    std::vector<double> expect;
    for (const auto& t : manual.prompts.learnables()) {
        const auto g = t.grad();
        for (std::size_t i = 0; i < t.numel(); ++i) {
            expect.push_back(t.at(i) - 0.01 * g[i]);
        }
    }
    const auto got = flat(r.state.prompts.learnables());
    REQUIRE(got.size() == expect.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i] == doctest::Approx(expect[i]).epsilon(1e-10));
    }
}

TEST_CASE("each method trains exactly its own parameters and never the backbone")
{
    const ModelState pre = toy_model(3);
    const auto data = generate(toy_data_spec());
    const Dataset train = data.train.subset(nshot_sample(data.train, 2, 0));
    for (Method m : {Method::capt, Method::apt_uc, Method::apt_csc, Method::avp, Method::paft, Method::hep}) {
        INFO(to_string(m));
        const TrainConfig tc = quick_config(m);
        const ModelState st = prepare_method(pre, m, tc);
        const auto r = tune(st, pre.frozen_copy(), train, {}, tc);
        CHECK(backbone_identical(pre.theta, r.state.theta));
        const auto before = flat(learnables(st));
        const auto after = flat(learnables(r.state));
        CHECK(before.size() == after.size());
        if (m == Method::hep) {
            CHECK(before.empty());
            CHECK(r.record.steps.empty());
        } else {
            CHECK(before != after);
            CHECK(r.record.steps.size() == tc.epochs);
            CHECK(r.record.audit.calls == r.record.steps.size());
        }
        CHECK(r.state.prompts.deep() == (m == Method::capt));
        CHECK(r.state.pixel_prompt.has_value() == (m == Method::avp));
        CHECK(r.state.probe.has_value() == (m == Method::paft));
    }
}

TEST_CASE("step records: adaptive alpha inside (0, 1), finite losses, learning rates on schedule")
{
    const ModelState pre = toy_model(4);
    const auto data = generate(toy_data_spec());
    TrainConfig tc = quick_config(Method::capt);
    tc.epochs = 3;
    tc.batch_size = 2;
    const auto r = tune(prepare_method(pre, Method::capt, tc), pre.frozen_copy(),
                        data.train.subset(nshot_sample(data.train, 2, 1)), {}, tc);
    const std::size_t total = r.record.steps.size();
    CHECK(total == 6);
    for (const auto& s : r.record.steps) {
        CHECK(s.alpha_cons > 0.0);
        CHECK(s.alpha_cons < 1.0);
        CHECK(std::isfinite(s.total));
        CHECK(s.lr == doctest::Approx(cosine_lr(s.step, total, 2, tc.learning_rate())));
    }
}

TEST_CASE("tuning is deterministic and validation records per epoch")
{
    const ModelState pre = toy_model(5);
    const auto data = generate(toy_data_spec());
    TrainConfig tc = quick_config(Method::capt);
    tc.val_every = 1;
    tc.val_attack_steps = 2;
    const Dataset train = data.train.subset(nshot_sample(data.train, 2, 0));
    const ModelState st = prepare_method(pre, Method::capt, tc);
    const auto a = tune(st, pre.frozen_copy(), train, data.test, tc);
    const auto b = tune(st, pre.frozen_copy(), train, data.test, tc);
    CHECK(flat(learnables(a.state)) == flat(learnables(b.state)));
    CHECK(a.record.epochs.size() == tc.epochs);
    std::ostringstream sa, sb;
    a.record.write_ndjson(sa);
    b.record.write_ndjson(sb);
    CHECK(sa.str() == sb.str());
    std::istringstream in(sa.str());
    std::string line;
    std::size_t lines = 0;
    while (std::getline(in, line)) {
        const auto j = nlohmann::json::parse(line);
        CHECK(j.contains("type"));
        ++lines;
    }
    CHECK(lines == a.record.steps.size() + a.record.epochs.size() + 1);
}

TEST_CASE("tuning preconditions")
{
    const ModelState pre = toy_model(6);
    const auto data = generate(toy_data_spec());
    const TrainConfig tc = quick_config(Method::capt);
    const ModelState st = prepare_method(pre, Method::capt, tc);
    CHECK_THROWS_AS(tune(st, st, data.train, {}, tc), InvariantViolation);
    ModelState open = st.clone();
    open.theta.set_requires_grad(true);
    CHECK_THROWS_AS(tune(open, pre.frozen_copy(), data.train, {}, tc), InvariantViolation);
    CHECK_THROWS_AS(tune(st, pre.frozen_copy(), Dataset{}, {}, tc), ConfigError);
    TrainConfig bad = tc;
    bad.momentum = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK(default_lr(Method::avp) == 0.1);
    CHECK(default_lr(Method::capt) == 0.0025);
}

TEST_CASE("pretraining: zero epochs is the random init, a fixed seed is bit-reproducible")
{
    const auto data = generate(toy_data_spec());
    const EncoderConfig c = toy_grad_config();
    PretrainConfig p;
    p.epochs = 0;
    const auto zero = pretrain_contrastive(data.train, c, p);
    std::mt19937_64 rng(p.seed);
    const Backbone init = init_backbone(c, rng);
    CHECK(backbone_identical(zero.state.theta, init));
    p.epochs = 2;
    p.batch_size = 6;
    const auto a = pretrain_contrastive(data.train, c, p);
    const auto b = pretrain_contrastive(data.train, c, p);
    CHECK(backbone_identical(a.state.theta, b.state.theta));
    CHECK_FALSE(backbone_identical(a.state.theta, init));
    CHECK(a.epoch_loss == b.epoch_loss);
    CHECK(a.epoch_loss.size() == 2);
    bool frozen = true;
    a.state.theta.for_each([&](const std::string&, const Tensor& t) { frozen &= !t.requires_grad(); });
    CHECK(frozen);
    const double acc = zero_shot_accuracy(a.state, data.test);
    CHECK(acc >= 0.0);
    CHECK(acc <= 1.0);
}
