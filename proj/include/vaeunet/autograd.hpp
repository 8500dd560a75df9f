#pragma once

// Minimal reverse-mode differentiation over NCHW tensors.
//
// A Var is a handle to a node in a dynamically recorded graph. Operations
// record their parents and a backward closure unless a NoGradGuard is active.
// backward() walks the graph in reverse topological order and accumulates
// gradients into every node that requires them.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "vaeunet/tensor.hpp"

namespace vaeunet::ag {

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    Tensor& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    /// Leaf that does not require gradients.
    static Var constant(Tensor value);
    /// Leaf that accumulates gradients (trainable parameter or probe input).
    static Var leaf(Tensor value);

    [[nodiscard]] bool valid() const { return node_ != nullptr; }
    [[nodiscard]] const Tensor& value() const { return node_->value; }
    [[nodiscard]] Tensor& mutable_value() { return node_->value; }
    [[nodiscard]] const Shape& shape() const { return node_->value.shape(); }
    [[nodiscard]] bool requires_grad() const { return node_->requires_grad; }
    [[nodiscard]] double item() const { return node_->value.item(); }

    /// Gradient accumulated by backward(); zeros when nothing reached this node.
    [[nodiscard]] Tensor grad() const;
    void zero_grad();

    [[nodiscard]] const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

[[nodiscard]] bool grad_enabled();

/// Seeds d(root)/d(root) = 1 and propagates. `root` must hold one element.
void backward(const Var& root);

// Elementwise and reductions.
Var add(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double factor);
Var divide(const Var& a, double divisor);
Var relu(const Var& x);
Var clamp(const Var& x, double lo, double hi);
Var sum(const Var& x);
Var mean(const Var& x);
/// Weighted sum of scalar Vars: sum_i weights[i] * terms[i].
Var weighted_sum(std::span<const Var> terms, std::span<const double> weights);

// Spatial.
/// Stride-1 convolution, square kernel, zero padding keeping the spatial size (odd kernel).
/// weight: [c_out, c_in, k, k]; bias: [1, c_out, 1, 1].
Var conv2d(const Var& x, const Var& weight, const Var& bias);
/// 2x2 stride-2 transposed convolution. weight: [c_in, c_out, 2, 2]; bias: [1, c_out, 1, 1].
Var conv_transpose2x2(const Var& x, const Var& weight, const Var& bias);
Var max_pool2(const Var& x);
Var avg_pool2(const Var& x);
/// Bilinear resampling with half-pixel centres (align_corners = false).
Var resize_bilinear(const Var& x, int out_h, int out_w);
Var concat_channels(std::span<const Var> parts);

// Fused probabilistic primitives.
/// z = mean + exp(0.5 * log_var) * noise.
Var reparameterize(const Var& mean, const Var& log_var, const Tensor& noise);
/// Closed-form KL[N(mq, e^lq) || N(mp, e^lp)] summed over channels, averaged over n*h*w.
Var diag_gaussian_kl(const Var& q_mean, const Var& q_log_var, const Var& p_mean,
                     const Var& p_log_var);
/// Categorical cross entropy of softmax(logits) against one-hot targets, averaged over n*h*w.
Var softmax_cross_entropy(const Var& logits, const Tensor& target_onehot);
/// 1 - mean over classes [first_class, C) of soft Dice between softmax(logits) and target.
Var soft_dice_loss(const Var& logits, const Tensor& target_onehot, int first_class, double smooth);

// Value-level helpers shared by the ops and their callers.
Tensor softmax_channels(const Tensor& logits);
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

}  // namespace vaeunet::ag
