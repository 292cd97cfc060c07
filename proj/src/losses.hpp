// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "autodiff.hpp"

namespace can {

/// -sum(p_i log q_i) against a one-hot target; q is clamped at 1e-12 inside
/// the log. Accepts a vector against one target row, or a [B,k] batch with
/// one-hot rows in `target` — the batch form averages over rows. Rows that
/// do not sum to 1 within 1e-6 are rejected.
Var cross_entropy(Tape& t, Var probs, const Tensor& target);

/// Batch-hard triplet over [B,d] features: per anchor, the farthest positive
/// and nearest negative by squared Euclidean distance (ties to the lowest
/// index), hinged at `margin`, averaged over anchors. Every anchor needs at
/// least one positive and one negative in the batch.
Var batch_hard_triplet(Tape& t, Var features, const std::vector<int64_t>& labels,
                       double margin);

/// 0.5 * sum_i ||x_i - c_{y_i}||^2 against a fixed center bank
/// [num_classes, d]. Gradients flow to the features only. `unsquared`
/// switches to the literal 0.5 * sum ||x_i - c_{y_i}|| form.
Var center_loss(Tape& t, Var features, const std::vector<int64_t>& labels,
                const Tensor& bank, bool unsquared = false);

/// Move each center touched by the batch toward the mean of its class
/// features: c += lr * (mean - c).
void center_update(Tensor& bank, const Tensor& features, const std::vector<int64_t>& labels,
                   double center_lr);

struct CompositeConfig {
    double margin = 0.3;
    double center_weight = 0.0005; // lambda
    bool use_triplet = true;
    bool use_center = true;
    bool supervise_local = true; // clustering losses on local streams too
    bool center_unsquared = false;
};

struct CompositeTerms {
    Var total;
    double total_value;
    double ce;
    double triplet;
    double center;
};

/// CE averaged over every stream head; triplet and center averaged over the
/// supervised streams (all of them, or the globals only). Streams without a
/// positive weight in the active terms contribute nothing.
/// total = CE + Trip + lambda * Center.
CompositeTerms composite_loss(Tape& t, std::span<const Var> logits,
                              std::span<const Var> features,
                              std::span<const uint8_t> stream_is_global,
                              const std::vector<int64_t>& labels,
                              std::span<const Tensor* const> center_banks,
                              const CompositeConfig& cfg);

/// One-hot rows for integer labels.
Tensor one_hot(const std::vector<int64_t>& labels, int64_t num_classes);

} // namespace can
