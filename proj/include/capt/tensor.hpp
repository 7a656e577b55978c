#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a shared handle (copying it aliases the same storage); use
// clone() for an independent copy. Operations whose operands require
// gradients are recorded on the thread's active Tape, which must be installed
// with a TapeScope. NoGradScope suppresses recording entirely.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "capt/errors.hpp"

namespace capt {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad; // empty until a gradient reaches this tensor
    bool requires_grad = false;
    bool is_leaf = true;

    void accumulate_grad(std::size_t i, double v)
    {
        if (grad.empty()) {
            grad.assign(data.size(), 0.0);
        }
        grad[i] += v;
    }
    std::vector<double>& ensure_grad()
    {
        if (grad.empty()) {
            grad.assign(data.size(), 0.0);
        }
        return grad;
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);
    // Throws NumericError on non-finite data and ShapeError on size mismatch.
    static Tensor from(Shape shape, std::vector<double> data);
    // Leaf that participates in differentiation.
    static Tensor param(Shape shape, std::vector<double> data);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    double item() const;
    double at(std::size_t flat) const { return data()[flat]; }

    // Overwrites the values of a leaf (optimizer updates); checks finiteness.
    void assign(std::span<const double> values);

    bool requires_grad() const;
    void set_requires_grad(bool on);
    bool is_leaf() const;

    bool has_grad() const;
    // Throws TapeError when the tensor does not require gradients.
    std::span<const double> grad() const;
    void zero_grad();

    Tensor clone() const;  // deep copy, same requires_grad, no grad buffer
    Tensor detach() const; // deep copy, requires_grad = false

    TensorImpl& impl() const;
    const std::shared_ptr<TensorImpl>& handle() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

// Ordered record of differentiable operations executed while it is active.
class Tape {
public:
    using BackwardFn = std::function<void(const std::vector<double>& out_grad)>;

    struct Entry {
        std::shared_ptr<TensorImpl> output;
        BackwardFn backward;
    };

    void record(const std::shared_ptr<TensorImpl>& output, BackwardFn fn);

    // Seeds d(loss)/d(loss) = 1 and propagates through every entry once, in
    // reverse order. A second call without reset() is a TapeError.
    void backward(const Tensor& loss);
    void reset();

    std::size_t size() const { return entries_.size(); }
    bool consumed() const { return consumed_; }

private:
    std::vector<Entry> entries_;
    bool consumed_ = false;
};

class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

class NoGradScope {
public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

private:
    bool previous_;
};

Tape* active_tape();
bool grad_enabled();

// ---- primitives ------------------------------------------------------------
//
// Binary element-wise ops broadcast when one operand's shape is a suffix of
// the other's (e.g. [B,T,d] + [d], [B,T,d] + [T,d], anything + scalar []).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

// [..,M,K] x [K,N] -> [..,M,N]; or batched [B..,M,K] x [B..,K,N].
Tensor matmul(const Tensor& a, const Tensor& b);
// Swaps the last two axes.
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
std::vector<Tensor> split(const Tensor& a, const std::vector<std::size_t>& sizes, std::size_t axis);
// out.flat[i] = a.flat[indices[i]]; the backward pass scatter-adds.
Tensor gather(const Tensor& a, std::vector<std::size_t> indices, Shape out_shape);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a); // exact erf form
Tensor sign(const Tensor& a); // sign(0) = 0, never differentiable
Tensor clamp(const Tensor& a, double lo, double hi);

// Normalizations over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
// Throws NumericError when a row has zero norm.
Tensor l2_normalize(const Tensor& a);

Tensor sum(const Tensor& a);                   // -> scalar
Tensor sum(const Tensor& a, std::size_t axis); // removes axis
Tensor mean(const Tensor& a);                  // -> scalar

} // namespace capt
