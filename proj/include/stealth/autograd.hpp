#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "stealth/tensor.hpp"

namespace stealth::ad {

// Reverse-mode autodiff over Tensor. Graphs are built dynamically per forward
// pass and freed when the last Var handle drops; long-lived parameter leaves
// survive across graphs and accumulate gradients until zeroed.
struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;  // accumulates into parents' grads

    Tensor& ensure_grad() {
        if (!grad.same_shape(value)) grad = Tensor(value.shape());
        return grad;
    }
};

class Var {
   public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Var leaf(Tensor value, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }
    static Var constant(Tensor value) { return leaf(std::move(value), false); }

    bool valid() const { return n_ != nullptr; }
    const Tensor& value() const { return n_->value; }
    Tensor& value() { return n_->value; }
    const Tensor& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    void zero_grad() {
        if (n_->grad.same_shape(n_->value))
            std::fill(n_->grad.raw().begin(), n_->grad.raw().end(), 0.0);
    }
    std::shared_ptr<Node> node() const { return n_; }

   private:
    std::shared_ptr<Node> n_;
};

// Runs reverse-mode accumulation from a scalar root (numel == 1).
void backward(const Var& root);

// --- elementwise / scalar ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_scalar(const Var& x, double s);
Var mul_scalar(const Var& x, double s);
Var mul_const(const Var& x, const Tensor& c);
Var relu(const Var& x);
Var silu(const Var& x);
Var sigmoid(const Var& x);
Var softplus(const Var& x);
Var exp(const Var& x);
Var sqrt(const Var& x);  // gradient guarded near zero
Var square(const Var& x);
Var absval(const Var& x);
Var clamp01(const Var& x);

// --- shape / reductions ---
Var reshape(const Var& x, std::vector<int> shape);
Var sum_all(const Var& x);
Var mean_all(const Var& x);
Var sum_except_dim0(const Var& x);  // [N,...] -> [N]
Var gap(const Var& x);              // [N,C,H,W] -> [N,C] spatial mean

// --- linear algebra ---
Var matmul(const Var& a, const Var& b);                 // [m,k]x[k,n]
Var linear(const Var& x, const Var& w, const Var& b);   // x[N,F], w[O,F], b[O]
Var bmm(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var softmax_lastdim(const Var& x);
// Constant-matrix products applied to the trailing [H,W] planes of an n-d
// tensor, batched over all leading dims. Used by the DFT composition.
Var mat_left_const(const Tensor& m, const Var& x);    // y = m * x_plane
Var mat_right_constT(const Var& x, const Tensor& m);  // y = x_plane * m^T

// --- convolution / image ops ---
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var conv2d_nobias(const Var& x, const Var& w, int stride, int pad);
Var depthwise_conv_valid(const Var& x, const Var& kernel);  // kernel [kh,kw], shared
Var pad_replicate(const Var& x, int p);
Var pixel_shuffle2(const Var& x);  // [N,4C,H,W] -> [N,C,2H,2W]

// --- bias broadcast ---
Var add_channel_bias(const Var& x, const Var& b);             // b[C] over [N,C,H,W]
Var add_sample_channel_bias(const Var& x, const Var& b);      // b[N,C]
Var channel_affine(const Var& x, const Tensor& scale, const Tensor& shift);

}  // namespace stealth::ad
