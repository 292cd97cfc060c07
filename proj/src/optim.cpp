// SPDX-License-Identifier: Apache-2.0

#include "optim.hpp"

#include <cmath>

namespace can {

AdamState::AdamState(std::span<Parameter* const> params, AdamConfig cfg) : cfg_(cfg) {
    m_.reserve(params.size());
    v_.reserve(params.size());
    for (const Parameter* p : params) {
        m_.push_back(Tensor::zeros(p->value.shape()));
        v_.push_back(Tensor::zeros(p->value.shape()));
    }
}

void AdamState::step(std::span<Parameter* const> params, double lr) {
    require(lr > 0.0, ErrorKind::invalid_argument, "adam: learning rate must be positive");
    require(params.size() == m_.size(), ErrorKind::invalid_argument,
            "adam: parameter list size changed");
    t_ += 1;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        require(p.grad.same_shape(m_[i]), ErrorKind::invalid_argument,
                "adam: gradient shape does not match moments for " + p.name);
        Tensor& m = m_[i];
        Tensor& v = v_[i];
        for (int64_t j = 0; j < p.value.numel(); ++j) {
            const double g = p.grad[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p.value[j] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
        }
    }
}

} // namespace can
