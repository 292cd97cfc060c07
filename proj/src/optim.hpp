// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "autodiff.hpp"

namespace can {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Moments are laid out to match the parameter
/// list used at construction; the same list (same order) must be passed to
/// every step. Gradients are read, never cleared — callers zero them.
class AdamState {
public:
    AdamState(std::span<Parameter* const> params, AdamConfig cfg = {});

    void step(std::span<Parameter* const> params, double lr);

    int64_t step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    int64_t t_ = 0;
    AdamConfig cfg_;
};

} // namespace can
