// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "tensor.hpp"

namespace can {

struct ItemMeta {
    int64_t person_id;
    int64_t camera_id;
};

struct DistanceMatrix {
    Tensor values; // [num_query, num_gallery], cosine distance in [0, 2]
    std::vector<ItemMeta> query;
    std::vector<ItemMeta> gallery;
};

/// Entry (i,j) = 1 - cos(q_i, g_j). Rows with zero norm are rejected.
DistanceMatrix cosine_distance_matrix(const Tensor& q, const Tensor& g,
                                      std::vector<ItemMeta> query_meta,
                                      std::vector<ItemMeta> gallery_meta);

/// Gallery indices by ascending distance; ties break toward the lower
/// index; excluded entries are dropped before ranking.
std::vector<int64_t> rank_gallery(std::span<const double> distances,
                                  std::span<const uint8_t> excluded);

struct EvalReport {
    double mean_ap = 0.0;
    std::vector<double> cmc; // rank 1..max_rank
    int64_t queries_evaluated = 0;
    int64_t queries_skipped = 0;

    std::string to_json() const;
};

/// Standard protocol: per query, drop gallery items that share both id and
/// camera plus all junk (id == -1); queries left without a positive are
/// skipped but counted. AP accumulates precision at each relevant hit over
/// the full ranking; CMC_k is the fraction with a hit in the top k.
EvalReport evaluate(const DistanceMatrix& dist, int64_t max_rank);

} // namespace can
