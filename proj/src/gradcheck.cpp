#include "capt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace capt {

namespace {

double eval_scalar(const std::function<Tensor()>& f)
{
    Tape scratch;
    TapeScope scope(scratch);
    NoGradScope no_grad;
    Tensor y = f();
    if (y.numel() != 1) {
        throw ShapeError("grad_check: function is not scalar-valued");
    }
    const double v = y.item();
    if (!std::isfinite(v)) {
        throw NumericError("grad_check: non-finite value at a perturbed point");
    }
    return v;
}

double compare(std::span<const double> analytic, const std::function<double(std::size_t, double)>& probe, double h)
{
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double fp = probe(i, h);
        const double fm = probe(i, -h);
        const double central = (fp - fm) / (2.0 * h);
        worst = std::max(worst, std::abs(analytic[i] - central) / std::max(1.0, std::abs(central)));
    }
    return worst;
}

} // namespace

double grad_check(const ScalarFn& f, const Tensor& point, double h)
{
    if (!(h > 0.0)) {
        throw ConfigError("grad_check: h must be positive");
    }
    Tensor x = point.detach();
    x.set_requires_grad(true);
    std::vector<double> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor y = f(x);
        if (y.numel() != 1) {
            throw ShapeError("grad_check: function is not scalar-valued");
        }
        tape.backward(y);
        auto g = x.grad();
        analytic.assign(g.begin(), g.end());
    }
    const std::vector<double> base(point.data().begin(), point.data().end());
    return compare(
        analytic,
        [&](std::size_t i, double step) {
            std::vector<double> moved = base;
            moved[i] += step;
            Tensor xp = Tensor::from(point.shape(), std::move(moved));
            return eval_scalar([&] { return f(xp); });
        },
        h);
}

double grad_check_leaf(const std::function<Tensor()>& f, Tensor leaf, double h)
{
    if (!(h > 0.0)) {
        throw ConfigError("grad_check: h must be positive");
    }
    if (!leaf.requires_grad()) {
        throw TapeError("grad_check_leaf: leaf does not require gradients");
    }
    leaf.zero_grad();
    std::vector<double> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor y = f();
        tape.backward(y);
        auto g = leaf.grad();
        analytic.assign(g.begin(), g.end());
    }
    leaf.zero_grad();
    const std::vector<double> base(leaf.data().begin(), leaf.data().end());
    const double err = compare(
        analytic,
        [&](std::size_t i, double step) {
            std::vector<double> moved = base;
            moved[i] += step;
            leaf.assign(moved);
            return eval_scalar(f);
        },
        h);
    leaf.assign(base);
    return err;
}

} // namespace capt
