#pragma once

#include <vector>

#include "pmg/tensor.hpp"

namespace pmg {

// Plain SGD: p -= lr * g.
void sgd_step(std::vector<Tensor*> params, const std::vector<Tensor>& grads, double learning_rate);

class Adam {
public:
    explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    // Parameter order must be stable across calls.
    void step(std::vector<Tensor*> params, const std::vector<Tensor>& grads);

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Tensor> m_, v_;
};

double grad_norm(const std::vector<Tensor>& grads);

}  // namespace pmg
