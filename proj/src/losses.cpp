// SPDX-License-Identifier: Apache-2.0

#include "losses.hpp"

#include <cmath>

#include "nn.hpp"

namespace can {

namespace {

constexpr double kLogClamp = 1e-12;

} // namespace

Tensor one_hot(const std::vector<int64_t>& labels, int64_t num_classes) {
    Tensor out({static_cast<int64_t>(labels.size()), num_classes});
    for (size_t i = 0; i < labels.size(); ++i) {
        require(labels[i] >= 0 && labels[i] < num_classes, ErrorKind::invalid_argument,
                "label " + std::to_string(labels[i]) + " out of range [0, " +
                    std::to_string(num_classes) + ")");
        out[static_cast<int64_t>(i) * num_classes + labels[i]] = 1.0;
    }
    return out;
}

Var cross_entropy(Tape& t, Var probs, const Tensor& target) {
    const Tensor& q = t.value(probs);
    require(q.same_shape(target), ErrorKind::invalid_argument,
            "cross_entropy: probs " + q.shape_str() + " vs target " + target.shape_str());
    require(q.ndim() == 1 || q.ndim() == 2, ErrorKind::invalid_argument,
            "cross_entropy: expected a vector or [B,k] matrix");
    const int64_t cols = q.shape().back();
    const int64_t rows = q.numel() / cols;
    for (int64_t r = 0; r < rows; ++r) {
        double qsum = 0.0, tsum = 0.0;
        int64_t ones = 0;
        for (int64_t j = 0; j < cols; ++j) {
            const double qv = q[r * cols + j];
            const double tv = target[r * cols + j];
            require(qv >= 0.0, ErrorKind::invalid_argument,
                    "cross_entropy: negative probability");
            require(tv == 0.0 || tv == 1.0, ErrorKind::invalid_argument,
                    "cross_entropy: target must be one-hot");
            qsum += qv;
            tsum += tv;
            ones += tv == 1.0 ? 1 : 0;
        }
        require(std::abs(qsum - 1.0) <= 1e-6, ErrorKind::invalid_argument,
                "cross_entropy: probabilities sum to " + std::to_string(qsum));
        require(ones == 1 && tsum == 1.0, ErrorKind::invalid_argument,
                "cross_entropy: target must have exactly one hot entry per row");
    }

    double loss = 0.0;
    for (int64_t r = 0; r < rows; ++r) {
        for (int64_t j = 0; j < cols; ++j) {
            if (target[r * cols + j] == 1.0) {
                loss -= std::log(std::max(q[r * cols + j], kLogClamp));
            }
        }
    }
    loss /= static_cast<double>(rows);

    const Var in[] = {probs};
    return t.make_node(Tensor::scalar(loss), in,
                       [probs, target, rows, cols](Tape& tape, const Tensor& g) {
                           const Tensor& qv = tape.value(probs);
                           const double gs = g.item() / static_cast<double>(rows);
                           Tensor gq = Tensor::zeros(qv.shape());
                           for (int64_t r = 0; r < rows; ++r) {
                               for (int64_t j = 0; j < cols; ++j) {
                                   if (target[r * cols + j] == 1.0) {
                                       const double p = qv[r * cols + j];
                                       if (p > kLogClamp) {
                                           gq[r * cols + j] = -gs / p;
                                       }
                                   }
                               }
                           }
                           tape.accumulate(probs, std::move(gq));
                       });
}

namespace {

struct HardPair {
    int64_t positive;
    int64_t negative;
};

std::vector<HardPair> mine_batch_hard(const Tensor& feats,
                                      const std::vector<int64_t>& labels) {
    const int64_t b = feats.dim(0);
    const int64_t d = feats.dim(1);
    require(static_cast<int64_t>(labels.size()) == b, ErrorKind::invalid_argument,
            "batch_hard_triplet: labels length does not match batch");
    std::vector<HardPair> out(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
        const double* fi = feats.data().data() + i * d;
        double worst_pos = -1.0, best_neg = 0.0;
        int64_t pos = -1, neg = -1;
        for (int64_t j = 0; j < b; ++j) {
            if (j == i) {
                continue;
            }
            const double dist =
                ops::squared_distance({fi, static_cast<size_t>(d)},
                                      {feats.data().data() + j * d, static_cast<size_t>(d)});
            if (labels[static_cast<size_t>(j)] == labels[static_cast<size_t>(i)]) {
                if (dist > worst_pos) { // strict: lowest index wins ties
                    worst_pos = dist;
                    pos = j;
                }
            } else {
                if (neg < 0 || dist < best_neg) {
                    best_neg = dist;
                    neg = j;
                }
            }
        }
        require(pos >= 0, ErrorKind::invalid_argument,
                "batch_hard_triplet: anchor " + std::to_string(i) + " has no positive");
        require(neg >= 0, ErrorKind::invalid_argument,
                "batch_hard_triplet: anchor " + std::to_string(i) + " has no negative");
        out[static_cast<size_t>(i)] = {pos, neg};
    }
    return out;
}

// sum((a - b)^2) over two row slices of a [B,d] feature var
Var row_sqdist(Tape& t, Var rows, int64_t i, int64_t j) {
    Var ri = t.slice(rows, 0, i, 1);
    Var rj = t.slice(rows, 0, j, 1);
    Var diff = t.sub(ri, rj);
    return t.sum_all(t.mul(diff, diff));
}

} // namespace

Var batch_hard_triplet(Tape& t, Var features, const std::vector<int64_t>& labels,
                       double margin) {
    const Tensor& fv = t.value(features);
    require(fv.ndim() == 2, ErrorKind::invalid_argument,
            "batch_hard_triplet: features must be [B,d], got " + fv.shape_str());
    require(std::isfinite(margin), ErrorKind::invalid_argument,
            "batch_hard_triplet: margin must be finite");
    const int64_t b = fv.dim(0);
    const auto pairs = mine_batch_hard(fv, labels);

    std::vector<Var> terms;
    terms.reserve(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
        Var d_ap = row_sqdist(t, features, i, pairs[static_cast<size_t>(i)].positive);
        Var d_an = row_sqdist(t, features, i, pairs[static_cast<size_t>(i)].negative);
        terms.push_back(t.relu(t.add_scalar(t.sub(d_ap, d_an), margin)));
    }
    return t.scale(t.add_n(terms), 1.0 / static_cast<double>(b));
}

Var center_loss(Tape& t, Var features, const std::vector<int64_t>& labels,
                const Tensor& bank, bool unsquared) {
    const Tensor& fv = t.value(features);
    require(fv.ndim() == 2, ErrorKind::invalid_argument,
            "center_loss: features must be [B,d], got " + fv.shape_str());
    require(bank.ndim() == 2 && bank.dim(1) == fv.dim(1), ErrorKind::invalid_argument,
            "center_loss: bank must be [num_classes,d] with matching d");
    const int64_t b = fv.dim(0);
    const int64_t d = fv.dim(1);
    require(static_cast<int64_t>(labels.size()) == b, ErrorKind::invalid_argument,
            "center_loss: labels length does not match batch");

    Tensor selected({b, d});
    for (int64_t i = 0; i < b; ++i) {
        const int64_t y = labels[static_cast<size_t>(i)];
        require(y >= 0 && y < bank.dim(0), ErrorKind::invalid_argument,
                "center_loss: label " + std::to_string(y) + " out of range");
        std::copy_n(bank.data().data() + y * d, d, selected.data().data() + i * d);
    }

    Var centers = t.constant(std::move(selected));
    Var diff = t.sub(features, centers);
    Var sq = t.mul(diff, diff);
    if (!unsquared) {
        return t.scale(t.sum_all(sq), 0.5);
    }
    // per-row norm: sqrt(mean * d + eps), summed
    Var row_mean = t.reduce_mean(sq, 1);
    Var row_sumsq = t.scale(row_mean, static_cast<double>(d));
    Var row_norm = t.sqrt(t.add_scalar(row_sumsq, 1e-12));
    return t.scale(t.sum_all(row_norm), 0.5);
}

void center_update(Tensor& bank, const Tensor& features, const std::vector<int64_t>& labels,
                   double center_lr) {
    require(features.ndim() == 2 && bank.ndim() == 2 && features.dim(1) == bank.dim(1),
            ErrorKind::invalid_argument, "center_update: shape mismatch");
    const int64_t b = features.dim(0);
    const int64_t d = features.dim(1);
    // batch mean per touched class, then c += lr * (mean - c)
    std::vector<int64_t> counts(static_cast<size_t>(bank.dim(0)), 0);
    std::vector<double> sums(static_cast<size_t>(bank.numel()), 0.0);
    for (int64_t i = 0; i < b; ++i) {
        const int64_t y = labels[static_cast<size_t>(i)];
        require(y >= 0 && y < bank.dim(0), ErrorKind::invalid_argument,
                "center_update: label out of range");
        counts[static_cast<size_t>(y)] += 1;
        for (int64_t j = 0; j < d; ++j) {
            sums[static_cast<size_t>(y * d + j)] += features[i * d + j];
        }
    }
    for (int64_t y = 0; y < bank.dim(0); ++y) {
        if (counts[static_cast<size_t>(y)] == 0) {
            continue;
        }
        const double inv = 1.0 / static_cast<double>(counts[static_cast<size_t>(y)]);
        for (int64_t j = 0; j < d; ++j) {
            const double mean = sums[static_cast<size_t>(y * d + j)] * inv;
            bank[y * d + j] += center_lr * (mean - bank[y * d + j]);
        }
    }
}

CompositeTerms composite_loss(Tape& t, std::span<const Var> logits,
                              std::span<const Var> features,
                              std::span<const uint8_t> stream_is_global,
                              const std::vector<int64_t>& labels,
                              std::span<const Tensor* const> center_banks,
                              const CompositeConfig& cfg) {
    require(logits.size() == features.size() && logits.size() == stream_is_global.size(),
            ErrorKind::invalid_argument, "composite_loss: stream lists disagree");
    require(!logits.empty(), ErrorKind::invalid_argument, "composite_loss: no streams");
    const int64_t num_classes = t.value(logits[0]).dim(1);
    const Tensor target = one_hot(labels, num_classes);

    std::vector<Var> ce_terms;
    ce_terms.reserve(logits.size());
    for (Var lg : logits) {
        ce_terms.push_back(cross_entropy(t, softmax(t, lg), target));
    }
    Var ce = t.scale(t.add_n(ce_terms), 1.0 / static_cast<double>(ce_terms.size()));

    std::vector<size_t> supervised;
    for (size_t i = 0; i < features.size(); ++i) {
        if (cfg.supervise_local || stream_is_global[i] != 0) {
            supervised.push_back(i);
        }
    }

    Var total = ce;
    double trip_value = 0.0, center_value = 0.0;
    if (cfg.use_triplet) {
        std::vector<Var> terms;
        terms.reserve(supervised.size());
        for (size_t i : supervised) {
            terms.push_back(batch_hard_triplet(t, features[i], labels, cfg.margin));
        }
        Var trip = t.scale(t.add_n(terms), 1.0 / static_cast<double>(terms.size()));
        trip_value = t.value(trip).item();
        total = t.add(total, trip);
    }
    if (cfg.use_center) {
        require(center_banks.size() == features.size(), ErrorKind::invalid_argument,
                "composite_loss: need one center bank per stream");
        std::vector<Var> terms;
        terms.reserve(supervised.size());
        for (size_t i : supervised) {
            require(center_banks[i] != nullptr, ErrorKind::invalid_argument,
                    "composite_loss: missing center bank for supervised stream");
            terms.push_back(
                center_loss(t, features[i], labels, *center_banks[i], cfg.center_unsquared));
        }
        Var center = t.scale(t.add_n(terms), 1.0 / static_cast<double>(terms.size()));
        center_value = t.value(center).item();
        total = t.add(total, t.scale(center, cfg.center_weight));
    }

    CompositeTerms out;
    out.total = total;
    out.total_value = t.value(total).item();
    out.ce = t.value(ce).item();
    out.triplet = trip_value;
    out.center = center_value;
    return out;
}

} // namespace can
