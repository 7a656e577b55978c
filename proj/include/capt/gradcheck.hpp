#pragma once

#include <functional>

#include "capt/tensor.hpp"

namespace capt {

using ScalarFn = std::function<Tensor(const Tensor&)>;

// Max over coordinates of |analytic - central difference| / max(1, |central
// difference|). `f` must return a scalar; the analytic gradient is taken
// w.r.t. a fresh copy of `point`. Other leaves reachable from `f` may require
// gradients; they are evaluated on a scratch tape for the perturbed points.
double grad_check(const ScalarFn& f, const Tensor& point, double h = 1e-3);

// Same check against an existing leaf that `f` reads implicitly (e.g. a
// prompt block inside a model). The leaf's values are restored afterwards.
double grad_check_leaf(const std::function<Tensor()>& f, Tensor leaf, double h = 1e-3);

} // namespace capt
