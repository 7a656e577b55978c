#include <doctest.h>

#include <cmath>
#include <random>

#include "capt/head.hpp"

using namespace capt;

namespace {

Tensor unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng)
{
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> v(n * d);
    for (double& x : v) {
        x = g(rng);
    }
    return l2_normalize(Tensor::from({n, d}, v));
}

Tensor random_dist(std::size_t n, std::size_t c, std::mt19937_64& rng)
{
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    std::vector<double> v(n * c);
    for (double& x : v) {
        x = u(rng);
    }
    return softmax(Tensor::from({n, c}, v));
}

} // namespace

TEST_CASE("two-class probabilities for cos (0.5, 0.3) at tau 0.1")
{
    // Image feature e1; text features chosen so that cos = 0.5 and 0.3.
    Tensor zi = Tensor::from({1, 2}, {1.0, 0.0});
    Tensor zt = Tensor::from({2, 2}, {0.5, std::sqrt(0.75), 0.3, std::sqrt(0.91)});
    Tensor p = class_probs(zi, zt, 0.1);
    const double s2 = 1.0 / (1.0 + std::exp(-2.0));
    CHECK(p.at(0) == doctest::Approx(s2).epsilon(1e-12));
    CHECK(p.at(1) == doctest::Approx(1.0 - s2).epsilon(1e-12));
    CHECK(p.at(0) == doctest::Approx(0.8808).epsilon(1e-4));
}

TEST_CASE("identical text features give a uniform distribution")
{
    std::mt19937_64 rng(1);
    Tensor zi = unit_rows(3, 5, rng);
    Tensor one = unit_rows(1, 5, rng);
    Tensor zt = concat({one, one, one, one}, 0);
    Tensor p = class_probs(zi, zt, 0.07);
    for (double v : p.data()) {
        CHECK(v == doctest::Approx(0.25).epsilon(1e-12));
    }
}

TEST_CASE("a single class has probability one")
{
    std::mt19937_64 rng(2);
    Tensor p = class_probs(unit_rows(4, 6, rng), unit_rows(1, 6, rng), 0.07);
    for (double v : p.data()) {
        CHECK(v == 1.0);
    }
}

TEST_CASE("logit range is [-1/tau, 1/tau]")
{
    std::mt19937_64 rng(3);
    Tensor l = similarity_logits(unit_rows(8, 6, rng), unit_rows(5, 6, rng), 0.07);
    for (double v : l.data()) {
        CHECK(std::abs(v) <= 1.0 / 0.07 + 1e-12);
    }
}

TEST_CASE("class_probs errors")
{
    std::mt19937_64 rng(4);
    Tensor zi = unit_rows(2, 4, rng);
    Tensor zt = unit_rows(3, 4, rng);
    CHECK_THROWS_AS(class_probs(zi, zt, 0.0), std::invalid_argument);
    CHECK_THROWS_AS(class_probs(zi, zt, -1.0), std::invalid_argument);
    CHECK_THROWS_AS(class_probs(scale(zi, 1.01), zt, 0.1), std::invalid_argument);
}

TEST_CASE("cross-entropy examples")
{
    CHECK(cross_entropy(Tensor::from({1, 3}, {0.0, 1.0, 0.0}), Labels{1}).item() == 0.0);
    Tensor u = Tensor::full({1, 4}, 0.25);
    CHECK(cross_entropy(u, Labels{2}).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
    CHECK(cross_entropy(u, Labels{2}).item() == doctest::Approx(1.3863).epsilon(1e-4));
    Tensor two = Tensor::from({2, 2}, {0.8, 0.2, 0.4, 0.6});
    const double a = -std::log(0.8);
    const double b = -std::log(0.6);
    CHECK(cross_entropy(two, Labels{0, 1}).item() == doctest::Approx((a + b) / 2.0).epsilon(1e-14));
    CHECK_THROWS(cross_entropy(Tensor::from({1, 2}, {1.0, 0.0}), Labels{1}));
    CHECK_THROWS(cross_entropy(u, Labels{4}));
}

TEST_CASE("KL examples")
{
    Tensor p = Tensor::from({1, 2}, {1.0, 0.0});
    Tensor q = Tensor::from({1, 2}, {0.5, 0.5});
    CHECK(kl_div(p, p).item() == 0.0);
    CHECK(kl_div(p, q).item() == doctest::Approx(std::log(2.0)).epsilon(1e-14));
    Tensor a = Tensor::from({1, 2}, {0.9, 0.1});
    const double ab = kl_div(a, q).item();
    const double ba = kl_div(q, a).item();
    CHECK(ab == doctest::Approx(0.9 * std::log(1.8) + 0.1 * std::log(0.2)).epsilon(1e-14));
    CHECK(ab == doctest::Approx(0.3681).epsilon(1e-4));
    CHECK(ba == doctest::Approx(0.5108).epsilon(1e-4));
    CHECK(ab != ba);
    CHECK_THROWS(kl_div(Tensor::from({1, 2}, {0.7, 0.7}), q));
    CHECK_THROWS(kl_div(Tensor::from({1, 2}, {1.2, -0.2}), q));
}

TEST_CASE("Gibbs inequality on random pairs")
{
    std::mt19937_64 rng(5);
    for (int t = 0; t < 50; ++t) {
        Tensor p = random_dist(4, 6, rng);
        Tensor q = random_dist(4, 6, rng);
        CHECK(kl_div(p, q).item() >= 0.0);
        CHECK(std::abs(kl_div(p, p).item()) < 1e-12);
    }
}

TEST_CASE("CE equals KL from the one-hot label distribution")
{
    std::mt19937_64 rng(6);
    std::uniform_int_distribution<std::size_t> cls(0, 4);
    for (int t = 0; t < 20; ++t) {
        Tensor p = random_dist(3, 5, rng);
        Labels y{cls(rng), cls(rng), cls(rng)};
        CHECK(std::abs(cross_entropy(p, y).item() - kl_div(one_hot(y, 5), p).item()) < 1e-9);
    }
}

TEST_CASE("argmax is invariant to tau")
{
    std::mt19937_64 rng(7);
    for (int t = 0; t < 20; ++t) {
        Tensor zi = unit_rows(6, 8, rng);
        Tensor zt = unit_rows(5, 8, rng);
        CHECK(argmax_rows(class_probs(zi, zt, 0.01)) == argmax_rows(class_probs(zi, zt, 3.0)));
    }
}

TEST_CASE("gradient of CE w.r.t. logits is (softmax - onehot) / batch")
{
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<double> u(-4.0, 4.0);
    std::vector<double> v(12);
    for (double& x : v) {
        x = u(rng);
    }
    Tensor logits = Tensor::param({3, 4}, v);
    const Labels y{0, 3, 1};
    Tape tape;
    {
        TapeScope scope(tape);
        tape.backward(cross_entropy_logits(logits, y));
    }
    Tensor p = softmax(logits.detach());
    for (std::size_t r = 0; r < 3; ++r) {
        for (std::size_t c = 0; c < 4; ++c) {
            const double expect = (p.at(r * 4 + c) - (c == y[r] ? 1.0 : 0.0)) / 3.0;
            CHECK(std::abs(logits.grad()[r * 4 + c] - expect) < 1e-9);
        }
    }
}

TEST_CASE("logit-form losses agree with probability forms")
{
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(-4.0, 4.0);
    std::vector<double> a(10);
    std::vector<double> b(10);
    for (std::size_t i = 0; i < 10; ++i) {
        a[i] = u(rng);
        b[i] = u(rng);
    }
    Tensor la = Tensor::from({2, 5}, a);
    Tensor lb = Tensor::from({2, 5}, b);
    const Labels y{4, 0};
    CHECK(std::abs(cross_entropy_logits(la, y).item() - cross_entropy(softmax(la), y).item()) < 1e-12);
    CHECK(std::abs(kl_div_logits(la, lb).item() - kl_div(softmax(la), softmax(lb)).item()) < 1e-12);
}
