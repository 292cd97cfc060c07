// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>

#include "autodiff.hpp"

namespace can {

/// Rebuilds the forward pass on a fresh tape; must return a scalar loss
/// computed from the current parameter values.
using LossBuilder = std::function<Var(Tape&)>;

struct GradCheckResult {
    double max_rel_err = 0.0;
    int64_t elements = 0;
};

/// Central finite differences against the tape gradient, element by element
/// over every parameter:  err = |analytic - numeric| / max(1, |a|, |n|).
/// The numeric path never touches backward(), so the two sides stay
/// independent.
GradCheckResult finite_diff_check(const LossBuilder& build,
                                  std::span<Parameter* const> params, double step = 1e-5);

struct SuiteEntry {
    std::string op;
    double max_rel_err;
};

struct SuiteReport {
    std::vector<SuiteEntry> entries;
    double worst = 0.0;

    bool pass(double tolerance) const { return worst < tolerance; }
    std::string to_json(double tolerance) const;
};

/// Gradient checks for every differentiable op on seeded random inputs
/// (`repeats` draws per op) plus the full composite loss on a toy model.
SuiteReport gradcheck_suite(uint64_t seed = 20240901, int64_t repeats = 100);

} // namespace can
