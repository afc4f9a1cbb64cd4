#pragma once

// Minimal reverse-mode automatic differentiation over float64 tensors.
//
// Every op allocates a Node holding its forward value and a closure that
// pushes the node's gradient into its parents. Nodes that do not depend on
// any variable are constants and are skipped during backward, so frozen
// weights cost nothing beyond the forward pass.

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "pmg/tensor.hpp"

namespace pmg::ad {

struct Node {
    Tensor value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<double>& grad_buffer() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Tensor& value() const { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    std::size_t size() const { return node_->value.size(); }
    bool requires_grad() const { return node_->requires_grad; }

    // Gradient after backward(); zeros if the node was never reached.
    Tensor grad() const;

    double item() const { return node_->value.data.at(0); }

    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& ptr() const { return node_; }
    explicit operator bool() const { return static_cast<bool>(node_); }

private:
    std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var variable(Tensor value);

// Reverse sweep from a scalar output; seeds d(out)/d(out) = 1.
void backward(const Var& out);

// Elementwise / broadcast arithmetic.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_row(const Var& a, const Var& row);  // a: [m, n], row: n elements
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var reshape(const Var& a, Shape shape);

// Matrices ([rows, cols]).
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t count);
Var gather_rows(const Var& table, std::span<const std::size_t> ids);
Var mean_rows(const Var& a);  // -> [1, cols]
Var sum_rows(const Var& a);   // -> [1, cols]
Var layer_norm_rows(const Var& a, const Var& gain, const Var& bias, double eps = 1e-5);
Var normalize_rows(const Var& a);
// x / sqrt(mean(x^2) + eps) per row; zero rows stay zero.
Var rms_normalize_rows(const Var& a, double eps = 1e-6);

// Row softmax where row i may only see columns j < visible_prefix + i + 1.
// visible_prefix = a.cols() - a.rows() gives standard causal attention with
// a block of always-visible leading columns.
Var causal_softmax_rows(const Var& a, std::size_t visible_prefix);

// Images ([channels, height, width]).
Var conv2d(const Var& x, const Var& weight, const Var& bias);  // weight: [o, c, k, k], same padding
Var avg_pool2(const Var& x);
Var upsample2(const Var& x);
Var concat_channels(std::span<const Var> parts);
Var film(const Var& x, const Var& gamma, const Var& beta);  // x * (1 + gamma_c) + beta_c

// Scalar reductions.
Var mse(const Var& a, const Var& b);
Var sum(const Var& a);
Var cross_entropy_rows(const Var& logits, std::span<const std::size_t> targets);

}  // namespace pmg::ad
