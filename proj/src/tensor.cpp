#include "capt/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace capt {

namespace {

thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const RowMat>;
using Map = Eigen::Map<RowMat>;

void check_finite(const std::vector<double>& v, const char* op)
{
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw NumericError(std::string(op) + ": non-finite value produced");
        }
    }
}

bool tracks(const Tensor& t) { return t.requires_grad(); }

template <class... Ts>
bool any_tracks(const Ts&... ts)
{
    return g_grad_enabled && (tracks(ts) || ...);
}

// Builds the output tensor and, when tracking, registers its backward pass.
Tensor emit(const char* op, Shape shape, std::vector<double> data, bool track, Tape::BackwardFn fn = {})
{
    check_finite(data, op);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    if (track) {
        Tape* tape = g_active_tape;
        if (tape == nullptr) {
            throw TapeError(std::string(op) + ": gradient-tracked operation without an active Tape");
        }
        impl->requires_grad = true;
        impl->is_leaf = false;
        tape->record(impl, std::move(fn));
    }
    return Tensor(impl);
}

bool is_suffix(const Shape& small, const Shape& big)
{
    if (small.size() > big.size()) {
        return false;
    }
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op)
{
    if (is_suffix(b.shape(), a.shape())) {
        return a.shape();
    }
    if (is_suffix(a.shape(), b.shape())) {
        return b.shape();
    }
    throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a.shape()) + " with " +
                     to_string(b.shape()));
}

// f(x, y) forward; da/db give the partials given (x, y, out).
template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db)
{
    Shape shape = broadcast_shape(a, b, op);
    const std::size_t n = numel(shape);
    const std::size_t na = a.numel();
    const std::size_t nb = b.numel();
    const auto& ad = a.impl().data;
    const auto& bd = b.impl().data;
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = f(ad[i % na], bd[i % nb]);
    }
    const bool track = any_tracks(a, b);
    if (!track) {
        return emit(op, std::move(shape), std::move(out), false);
    }
    auto ai = a.handle();
    auto bi = b.handle();
    return emit(op, std::move(shape), std::move(out), true, [ai, bi, n, na, nb, da, db](const std::vector<double>& g) {
        const auto& x = ai->data;
        const auto& y = bi->data;
        if (ai->requires_grad) {
            auto& ga = ai->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                ga[i % na] += g[i] * da(x[i % na], y[i % nb]);
            }
        }
        if (bi->requires_grad) {
            auto& gb = bi->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                gb[i % nb] += g[i] * db(x[i % na], y[i % nb]);
            }
        }
    });
}

template <class F, class D>
Tensor unary(const char* op, const Tensor& a, F f, D d)
{
    const auto& ad = a.impl().data;
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) {
        out[i] = f(ad[i]);
    }
    if (!any_tracks(a)) {
        return emit(op, a.shape(), std::move(out), false);
    }
    auto ai = a.handle();
    // d receives (x, y) so exp/log can reuse the forward value.
    auto saved = std::make_shared<std::vector<double>>(out);
    return emit(op, a.shape(), std::move(out), true, [ai, saved, d](const std::vector<double>& g) {
        auto& ga = ai->ensure_grad();
        const auto& x = ai->data;
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * d(x[i], (*saved)[i]);
        }
    });
}

std::size_t last_dim(const Tensor& a, const char* op)
{
    if (a.rank() == 0 || a.shape().back() == 0) {
        throw ShapeError(std::string(op) + ": needs a non-empty last axis");
    }
    return a.shape().back();
}

} // namespace

std::size_t numel(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

// ---- Tensor ------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value)
{
    const std::size_t n = capt::numel(shape);
    return from(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return from({}, {value}); }

Tensor Tensor::from(Shape shape, std::vector<double> data)
{
    if (capt::numel(shape) != data.size()) {
        throw ShapeError("Tensor::from: shape " + to_string(shape) + " does not hold " +
                         std::to_string(data.size()) + " values");
    }
    check_finite(data, "Tensor::from");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(impl);
}

Tensor Tensor::param(Shape shape, std::vector<double> data)
{
    Tensor t = from(std::move(shape), std::move(data));
    t.impl_->requires_grad = true;
    return t;
}

TensorImpl& Tensor::impl() const
{
    if (!impl_) {
        throw TapeError("use of an undefined Tensor");
    }
    return *impl_;
}

const Shape& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const
{
    if (axis >= rank()) {
        throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(shape()));
    }
    return shape()[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }
std::span<const double> Tensor::data() const { return impl().data; }

double Tensor::item() const
{
    if (numel() != 1) {
        throw ShapeError("item() on tensor of shape " + to_string(shape()));
    }
    return impl().data[0];
}

void Tensor::assign(std::span<const double> values)
{
    if (values.size() != numel()) {
        throw ShapeError("assign: size mismatch");
    }
    if (!impl().is_leaf) {
        throw TapeError("assign: only leaves can be overwritten");
    }
    for (double v : values) {
        if (!std::isfinite(v)) {
            throw NumericError("assign: non-finite value");
        }
    }
    std::copy(values.begin(), values.end(), impl_->data.begin());
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

void Tensor::set_requires_grad(bool on)
{
    if (!impl().is_leaf) {
        throw TapeError("set_requires_grad on a non-leaf tensor");
    }
    impl_->requires_grad = on;
    if (!on) {
        impl_->grad.clear();
    }
}

bool Tensor::is_leaf() const { return impl().is_leaf; }
bool Tensor::has_grad() const { return !impl().grad.empty(); }

std::span<const double> Tensor::grad() const
{
    if (!impl().requires_grad) {
        throw TapeError("grad() requested for a tensor that does not require gradients");
    }
    if (impl_->grad.empty()) {
        impl_->grad.assign(impl_->data.size(), 0.0);
    }
    return impl_->grad;
}

void Tensor::zero_grad()
{
    if (impl_ && !impl_->grad.empty()) {
        std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
    }
}

Tensor Tensor::clone() const
{
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->requires_grad = impl_->requires_grad;
    return Tensor(impl);
}

Tensor Tensor::detach() const
{
    Tensor t = clone();
    t.impl_->requires_grad = false;
    return t;
}

// ---- Tape --------------------------------------------------------------------

void Tape::record(const std::shared_ptr<TensorImpl>& output, BackwardFn fn)
{
    if (consumed_) {
        throw TapeError("recording on a tape that already ran backward; reset() it first");
    }
    entries_.push_back(Entry{output, std::move(fn)});
}

void Tape::backward(const Tensor& loss)
{
    if (consumed_) {
        throw TapeError("backward called twice on the same tape without reset()");
    }
    if (loss.numel() != 1) {
        throw TapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
    }
    if (!loss.requires_grad() || loss.is_leaf()) {
        throw TapeError("backward: loss was not produced on a tape");
    }
    const auto* target = loss.handle().get();
    const bool on_tape = std::any_of(entries_.begin(), entries_.end(),
                                     [target](const Entry& e) { return e.output.get() == target; });
    if (!on_tape) {
        throw TapeError("backward: loss was recorded on a different tape");
    }
    consumed_ = true;
    loss.impl().ensure_grad()[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        if (!it->output->grad.empty()) {
            it->backward(it->output->grad);
        }
    }
}

void Tape::reset()
{
    entries_.clear();
    consumed_ = false;
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradScope::~NoGradScope() { g_grad_enabled = previous_; }

Tape* active_tape() { return g_active_tape; }
bool grad_enabled() { return g_grad_enabled; }

// ---- element-wise ----------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b)
{
    return binary(
        "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b)
{
    return binary(
        "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b)
{
    return binary(
        "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Tensor minimum(const Tensor& a, const Tensor& b)
{
    return binary(
        "minimum", a, b, [](double x, double y) { return std::min(x, y); },
        [](double x, double y) { return x <= y ? 1.0 : 0.0; }, [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b)
{
    return binary(
        "maximum", a, b, [](double x, double y) { return std::max(x, y); },
        [](double x, double y) { return x >= y ? 1.0 : 0.0; }, [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& a, double s)
{
    return unary(
        "scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s)
{
    return unary(
        "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a)
{
    return unary(
        "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a)
{
    return unary(
        "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor relu(const Tensor& a)
{
    return unary(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a)
{
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return unary(
        "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
}

Tensor sign(const Tensor& a)
{
    const auto& ad = a.impl().data;
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) {
        out[i] = ad[i] > 0.0 ? 1.0 : (ad[i] < 0.0 ? -1.0 : 0.0);
    }
    return emit("sign", a.shape(), std::move(out), false);
}

Tensor clamp(const Tensor& a, double lo, double hi)
{
    if (lo > hi) {
        throw ShapeError("clamp: lo > hi");
    }
    return unary(
        "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ---- structural ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b)
{
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2");
    }
    const std::size_t K = a.shape().back();
    const std::size_t M = a.shape()[a.rank() - 2];
    const std::size_t N = b.shape().back();
    if (b.shape()[b.rank() - 2] != K) {
        throw ShapeError("matmul: inner dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    out_shape.push_back(N);

    std::size_t batches = 1;
    std::size_t rows = M;
    bool shared_rhs = b.rank() == 2;
    if (shared_rhs) {
        rows = a.numel() / K;
    } else {
        if (a.rank() != b.rank() || !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
            throw ShapeError("matmul: batch dimensions differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
        }
        batches = a.numel() / (M * K);
    }

    std::vector<double> out(batches * rows * N);
    for (std::size_t s = 0; s < batches; ++s) {
        MapC A(a.impl().data.data() + s * rows * K, rows, K);
        MapC B(b.impl().data.data() + (shared_rhs ? 0 : s * K * N), K, N);
        Map C(out.data() + s * rows * N, rows, N);
        C.noalias() = A * B;
    }
    if (!any_tracks(a, b)) {
        return emit("matmul", std::move(out_shape), std::move(out), false);
    }
    auto ai = a.handle();
    auto bi = b.handle();
    return emit("matmul", std::move(out_shape), std::move(out), true,
                [ai, bi, batches, rows, K, N, shared_rhs](const std::vector<double>& g) {
                    for (std::size_t s = 0; s < batches; ++s) {
                        MapC G(g.data() + s * rows * N, rows, N);
                        const std::size_t boff = shared_rhs ? 0 : s * K * N;
                        if (ai->requires_grad) {
                            auto& ga = ai->ensure_grad();
                            MapC B(bi->data.data() + boff, K, N);
                            Map GA(ga.data() + s * rows * K, rows, K);
                            GA.noalias() += G * B.transpose();
                        }
                        if (bi->requires_grad) {
                            auto& gb = bi->ensure_grad();
                            MapC A(ai->data.data() + s * rows * K, rows, K);
                            Map GB(gb.data() + boff, K, N);
                            GB.noalias() += A.transpose() * G;
                        }
                    }
                });
}

Tensor transpose(const Tensor& a)
{
    if (a.rank() < 2) {
        throw ShapeError("transpose: rank < 2");
    }
    const std::size_t R = a.shape()[a.rank() - 2];
    const std::size_t C = a.shape().back();
    const std::size_t batches = a.numel() / std::max<std::size_t>(R * C, 1);
    Shape shape = a.shape();
    std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
    const auto& ad = a.impl().data;
    std::vector<double> out(ad.size());
    for (std::size_t s = 0; s < batches; ++s) {
        for (std::size_t i = 0; i < R; ++i) {
            for (std::size_t j = 0; j < C; ++j) {
                out[s * R * C + j * R + i] = ad[s * R * C + i * C + j];
            }
        }
    }
    if (!any_tracks(a)) {
        return emit("transpose", std::move(shape), std::move(out), false);
    }
    auto ai = a.handle();
    return emit("transpose", std::move(shape), std::move(out), true, [ai, batches, R, C](const std::vector<double>& g) {
        auto& ga = ai->ensure_grad();
        for (std::size_t s = 0; s < batches; ++s) {
            for (std::size_t i = 0; i < R; ++i) {
                for (std::size_t j = 0; j < C; ++j) {
                    ga[s * R * C + i * C + j] += g[s * R * C + j * R + i];
                }
            }
        }
    });
}

Tensor reshape(const Tensor& a, Shape shape)
{
    if (numel(shape) != a.numel()) {
        throw ShapeError("reshape: " + to_string(a.shape()) + " -> " + to_string(shape));
    }
    std::vector<double> out = a.impl().data;
    if (!any_tracks(a)) {
        return emit("reshape", std::move(shape), std::move(out), false);
    }
    auto ai = a.handle();
    return emit("reshape", std::move(shape), std::move(out), true, [ai](const std::vector<double>& g) {
        auto& ga = ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i];
        }
    });
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis)
{
    if (parts.empty()) {
        throw ShapeError("concat: no operands");
    }
    const Shape& ref = parts.front().shape();
    if (axis >= ref.size()) {
        throw ShapeError("concat: axis out of range");
    }
    Shape shape = ref;
    shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != ref.size()) {
            throw ShapeError("concat: rank mismatch");
        }
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != ref[d]) {
                throw ShapeError("concat: shape mismatch " + to_string(s) + " vs " + to_string(ref));
            }
        }
        shape[axis] += s[axis];
    }
    const std::size_t outer = numel(Shape(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(axis)));
    const std::size_t inner = numel(Shape(ref.begin() + static_cast<std::ptrdiff_t>(axis) + 1, ref.end()));
    const std::size_t row = shape[axis] * inner;

    std::vector<double> out(numel(shape));
    std::vector<std::size_t> offsets;
    std::size_t off = 0;
    for (const auto& p : parts) {
        offsets.push_back(off);
        const std::size_t chunk = p.shape()[axis] * inner;
        const auto& pd = p.impl().data;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(o * chunk), chunk,
                        out.begin() + static_cast<std::ptrdiff_t>(o * row + off));
        }
        off += chunk;
    }
    bool track = false;
    for (const auto& p : parts) {
        track = track || any_tracks(p);
    }
    if (!track) {
        return emit("concat", std::move(shape), std::move(out), false);
    }
    std::vector<std::shared_ptr<TensorImpl>> handles;
    for (const auto& p : parts) {
        handles.push_back(p.handle());
    }
    return emit("concat", std::move(shape), std::move(out), true,
                [handles, offsets, outer, row, inner, axis](const std::vector<double>& g) {
                    for (std::size_t k = 0; k < handles.size(); ++k) {
                        auto& h = handles[k];
                        if (!h->requires_grad) {
                            continue;
                        }
                        auto& gp = h->ensure_grad();
                        const std::size_t chunk = h->shape[axis] * inner;
                        for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t i = 0; i < chunk; ++i) {
                                gp[o * chunk + i] += g[o * row + offsets[k] + i];
                            }
                        }
                    }
                });
}

std::vector<Tensor> split(const Tensor& a, const std::vector<std::size_t>& sizes, std::size_t axis)
{
    const Shape& ref = a.shape();
    if (axis >= ref.size()) {
        throw ShapeError("split: axis out of range");
    }
    if (std::accumulate(sizes.begin(), sizes.end(), std::size_t{0}) != ref[axis]) {
        throw ShapeError("split: sizes do not cover axis of " + to_string(ref));
    }
    const std::size_t outer = numel(Shape(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(axis)));
    const std::size_t inner = numel(Shape(ref.begin() + static_cast<std::ptrdiff_t>(axis) + 1, ref.end()));
    const std::size_t row = ref[axis] * inner;
    const bool track = any_tracks(a);
    auto ai = a.handle();

    std::vector<Tensor> result;
    std::size_t off = 0;
    for (std::size_t size : sizes) {
        Shape shape = ref;
        shape[axis] = size;
        const std::size_t chunk = size * inner;
        std::vector<double> out(outer * chunk);
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(ai->data.begin() + static_cast<std::ptrdiff_t>(o * row + off), chunk,
                        out.begin() + static_cast<std::ptrdiff_t>(o * chunk));
        }
        if (!track) {
            result.push_back(emit("split", std::move(shape), std::move(out), false));
        } else {
            result.push_back(emit("split", std::move(shape), std::move(out), true,
                                  [ai, outer, row, chunk, off](const std::vector<double>& g) {
                                      auto& ga = ai->ensure_grad();
                                      for (std::size_t o = 0; o < outer; ++o) {
                                          for (std::size_t i = 0; i < chunk; ++i) {
                                              ga[o * row + off + i] += g[o * chunk + i];
                                          }
                                      }
                                  }));
        }
        off += chunk;
    }
    return result;
}

Tensor gather(const Tensor& a, std::vector<std::size_t> indices, Shape out_shape)
{
    if (numel(out_shape) != indices.size()) {
        throw ShapeError("gather: index count does not match output shape");
    }
    const auto& ad = a.impl().data;
    std::vector<double> out(indices.size());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= ad.size()) {
            throw ShapeError("gather: index out of range");
        }
        out[i] = ad[indices[i]];
    }
    if (!any_tracks(a)) {
        return emit("gather", std::move(out_shape), std::move(out), false);
    }
    auto ai = a.handle();
    auto idx = std::make_shared<std::vector<std::size_t>>(std::move(indices));
    return emit("gather", std::move(out_shape), std::move(out), true, [ai, idx](const std::vector<double>& g) {
        auto& ga = ai->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[(*idx)[i]] += g[i];
        }
    });
}

// ---- normalizations ----------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps)
{
    const std::size_t d = last_dim(x, "layer_norm");
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ShapeError("layer_norm: gamma/beta must have shape [" + std::to_string(d) + "]");
    }
    const std::size_t rows = x.numel() / d;
    const auto& xd = x.impl().data;
    const auto& gd = gamma.impl().data;
    const auto& bd = beta.impl().data;
    auto xhat = std::make_shared<std::vector<double>>(xd.size());
    auto rstd = std::make_shared<std::vector<double>>(rows);
    std::vector<double> out(xd.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = xd.data() + r * d;
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            mu += row[i];
        }
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            var += (row[i] - mu) * (row[i] - mu);
        }
        var /= static_cast<double>(d);
        const double rs = 1.0 / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (std::size_t i = 0; i < d; ++i) {
            const double h = (row[i] - mu) * rs;
            (*xhat)[r * d + i] = h;
            out[r * d + i] = h * gd[i] + bd[i];
        }
    }
    if (!any_tracks(x, gamma, beta)) {
        return emit("layer_norm", x.shape(), std::move(out), false);
    }
    auto xi = x.handle();
    auto gi = gamma.handle();
    auto bi = beta.handle();
    return emit("layer_norm", x.shape(), std::move(out), true,
                [xi, gi, bi, xhat, rstd, rows, d](const std::vector<double>& g) {
                    const auto& gam = gi->data;
                    if (gi->requires_grad || bi->requires_grad) {
                        for (std::size_t r = 0; r < rows; ++r) {
                            for (std::size_t i = 0; i < d; ++i) {
                                if (gi->requires_grad) {
                                    gi->ensure_grad()[i] += g[r * d + i] * (*xhat)[r * d + i];
                                }
                                if (bi->requires_grad) {
                                    bi->ensure_grad()[i] += g[r * d + i];
                                }
                            }
                        }
                    }
                    if (!xi->requires_grad) {
                        return;
                    }
                    auto& gx = xi->ensure_grad();
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                        double m1 = 0.0;
                        double m2 = 0.0;
                        for (std::size_t i = 0; i < d; ++i) {
                            const double dh = g[r * d + i] * gam[i];
                            m1 += dh;
                            m2 += dh * (*xhat)[r * d + i];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for (std::size_t i = 0; i < d; ++i) {
                            const double dh = g[r * d + i] * gam[i];
                            gx[r * d + i] += (*rstd)[r] * (dh - m1 - (*xhat)[r * d + i] * m2);
                        }
                    }
                });
}

Tensor softmax(const Tensor& a)
{
    const std::size_t d = last_dim(a, "softmax");
    const std::size_t rows = a.numel() / d;
    const auto& ad = a.impl().data;
    std::vector<double> out(ad.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = ad.data() + r * d;
        const double m = *std::max_element(row, row + d);
        double z = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            out[r * d + i] = std::exp(row[i] - m);
            z += out[r * d + i];
        }
        for (std::size_t i = 0; i < d; ++i) {
            out[r * d + i] /= z;
        }
    }
    if (!any_tracks(a)) {
        return emit("softmax", a.shape(), std::move(out), false);
    }
    auto ai = a.handle();
    auto y = std::make_shared<std::vector<double>>(out);
    return emit("softmax", a.shape(), std::move(out), true, [ai, y, rows, d](const std::vector<double>& g) {
        auto& ga = ai->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                dot += g[r * d + i] * (*y)[r * d + i];
            }
            for (std::size_t i = 0; i < d; ++i) {
                ga[r * d + i] += (*y)[r * d + i] * (g[r * d + i] - dot);
            }
        }
    });
}

Tensor log_softmax(const Tensor& a)
{
    const std::size_t d = last_dim(a, "log_softmax");
    const std::size_t rows = a.numel() / d;
    const auto& ad = a.impl().data;
    std::vector<double> out(ad.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* row = ad.data() + r * d;
        const double m = *std::max_element(row, row + d);
        double z = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            z += std::exp(row[i] - m);
        }
        const double lse = m + std::log(z);
        for (std::size_t i = 0; i < d; ++i) {
            out[r * d + i] = row[i] - lse;
        }
    }
    if (!any_tracks(a)) {
        return emit("log_softmax", a.shape(), std::move(out), false);
    }
    auto ai = a.handle();
    auto y = std::make_shared<std::vector<double>>(out);
    return emit("log_softmax", a.shape(), std::move(out), true, [ai, y, rows, d](const std::vector<double>& g) {
        auto& ga = ai->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            double gs = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                gs += g[r * d + i];
            }
            for (std::size_t i = 0; i < d; ++i) {
                ga[r * d + i] += g[r * d + i] - std::exp((*y)[r * d + i]) * gs;
            }
        }
    });
}

Tensor l2_normalize(const Tensor& a)
{
    const std::size_t d = last_dim(a, "l2_normalize");
    const std::size_t rows = a.numel() / d;
    const auto& ad = a.impl().data;
    std::vector<double> out(ad.size());
    auto norms = std::make_shared<std::vector<double>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            s += ad[r * d + i] * ad[r * d + i];
        }
        const double n = std::sqrt(s);
        if (n == 0.0) {
            throw NumericError("l2_normalize: zero-norm row " + std::to_string(r));
        }
        (*norms)[r] = n;
        for (std::size_t i = 0; i < d; ++i) {
            out[r * d + i] = ad[r * d + i] / n;
        }
    }
    if (!any_tracks(a)) {
        return emit("l2_normalize", a.shape(), std::move(out), false);
    }
    auto ai = a.handle();
    auto y = std::make_shared<std::vector<double>>(out);
    return emit("l2_normalize", a.shape(), std::move(out), true, [ai, y, norms, rows, d](const std::vector<double>& g) {
        auto& ga = ai->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                dot += g[r * d + i] * (*y)[r * d + i];
            }
            for (std::size_t i = 0; i < d; ++i) {
                ga[r * d + i] += (g[r * d + i] - (*y)[r * d + i] * dot) / (*norms)[r];
            }
        }
    });
}

// ---- reductions ------------------------------------------------------------------

Tensor sum(const Tensor& a)
{
    const auto& ad = a.impl().data;
    double s = 0.0;
    for (double v : ad) {
        s += v;
    }
    if (!any_tracks(a)) {
        return emit("sum", {}, {s}, false);
    }
    auto ai = a.handle();
    return emit("sum", {}, {s}, true, [ai](const std::vector<double>& g) {
        auto& ga = ai->ensure_grad();
        for (double& v : ga) {
            v += g[0];
        }
    });
}

Tensor sum(const Tensor& a, std::size_t axis)
{
    const Shape& ref = a.shape();
    if (axis >= ref.size()) {
        throw ShapeError("sum: axis out of range");
    }
    const std::size_t outer = numel(Shape(ref.begin(), ref.begin() + static_cast<std::ptrdiff_t>(axis)));
    const std::size_t inner = numel(Shape(ref.begin() + static_cast<std::ptrdiff_t>(axis) + 1, ref.end()));
    const std::size_t len = ref[axis];
    Shape shape = ref;
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    const auto& ad = a.impl().data;
    std::vector<double> out(outer * inner, 0.0);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < len; ++k) {
            for (std::size_t i = 0; i < inner; ++i) {
                out[o * inner + i] += ad[(o * len + k) * inner + i];
            }
        }
    }
    if (!any_tracks(a)) {
        return emit("sum_axis", std::move(shape), std::move(out), false);
    }
    auto ai = a.handle();
    return emit("sum_axis", std::move(shape), std::move(out), true, [ai, outer, inner, len](const std::vector<double>& g) {
        auto& ga = ai->ensure_grad();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t k = 0; k < len; ++k) {
                for (std::size_t i = 0; i < inner; ++i) {
                    ga[(o * len + k) * inner + i] += g[o * inner + i];
                }
            }
        }
    });
}

Tensor mean(const Tensor& a)
{
    if (a.numel() == 0) {
        throw ShapeError("mean of an empty tensor");
    }
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

} // namespace capt
