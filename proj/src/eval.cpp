// SPDX-License-Identifier: Apache-2.0

#include "eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace can {

DistanceMatrix cosine_distance_matrix(const Tensor& q, const Tensor& g,
                                      std::vector<ItemMeta> query_meta,
                                      std::vector<ItemMeta> gallery_meta) {
    require(q.ndim() == 2 && g.ndim() == 2 && q.dim(1) == g.dim(1),
            ErrorKind::invalid_argument,
            "cosine_distance_matrix: need [nq,d] and [ng,d] with matching d");
    const int64_t nq = q.dim(0), ng = g.dim(0), d = q.dim(1);
    require(static_cast<int64_t>(query_meta.size()) == nq &&
                static_cast<int64_t>(gallery_meta.size()) == ng,
            ErrorKind::invalid_argument, "cosine_distance_matrix: metadata length mismatch");

    auto normalized = [d](const Tensor& m, const char* side) {
        Tensor out(m.shape());
        for (int64_t r = 0; r < m.dim(0); ++r) {
            const double* row = m.data().data() + r * d;
            double sq = 0.0;
            for (int64_t j = 0; j < d; ++j) {
                sq += row[j] * row[j];
            }
            require(sq > 0.0, ErrorKind::invalid_argument,
                    std::string("cosine_distance_matrix: zero-norm ") + side + " row " +
                        std::to_string(r));
            const double inv = 1.0 / std::sqrt(sq);
            double* orow = out.data().data() + r * d;
            for (int64_t j = 0; j < d; ++j) {
                orow[j] = row[j] * inv;
            }
        }
        return out;
    };
    const Tensor qn = normalized(q, "query");
    const Tensor gn = normalized(g, "gallery");

    DistanceMatrix out;
    out.values = Tensor({nq, ng});
    out.query = std::move(query_meta);
    out.gallery = std::move(gallery_meta);
    for (int64_t i = 0; i < nq; ++i) {
        const double* qi = qn.data().data() + i * d;
        double* row = out.values.data().data() + i * ng;
        for (int64_t j = 0; j < ng; ++j) {
            const double* gj = gn.data().data() + j * d;
            double dot = 0.0;
            for (int64_t k = 0; k < d; ++k) {
                dot += qi[k] * gj[k];
            }
            row[j] = std::clamp(1.0 - dot, 0.0, 2.0);
        }
    }
    return out;
}

std::vector<int64_t> rank_gallery(std::span<const double> distances,
                                  std::span<const uint8_t> excluded) {
    require(excluded.empty() || excluded.size() == distances.size(),
            ErrorKind::invalid_argument, "rank_gallery: exclusion mask length mismatch");
    std::vector<int64_t> order;
    order.reserve(distances.size());
    for (size_t j = 0; j < distances.size(); ++j) {
        require(std::isfinite(distances[j]), ErrorKind::invalid_argument,
                "rank_gallery: non-finite distance");
        if (excluded.empty() || excluded[j] == 0) {
            order.push_back(static_cast<int64_t>(j));
        }
    }
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
        return distances[static_cast<size_t>(a)] < distances[static_cast<size_t>(b)];
    });
    return order;
}

EvalReport evaluate(const DistanceMatrix& dist, int64_t max_rank) {
    const int64_t nq = dist.values.dim(0);
    const int64_t ng = dist.values.dim(1);
    require(max_rank >= 1, ErrorKind::invalid_argument, "evaluate: max_rank >= 1");
    require(ng >= 1, ErrorKind::invalid_argument, "evaluate: empty gallery");

    EvalReport report;
    report.cmc.assign(static_cast<size_t>(max_rank), 0.0);
    double ap_sum = 0.0;

    std::vector<uint8_t> excluded(static_cast<size_t>(ng));
    for (int64_t i = 0; i < nq; ++i) {
        const ItemMeta& qm = dist.query[static_cast<size_t>(i)];
        int64_t kept = 0;
        for (int64_t j = 0; j < ng; ++j) {
            const ItemMeta& gm = dist.gallery[static_cast<size_t>(j)];
            const bool junk = gm.person_id == -1;
            const bool same_id_cam =
                gm.person_id == qm.person_id && gm.camera_id == qm.camera_id;
            excluded[static_cast<size_t>(j)] = (junk || same_id_cam) ? 1 : 0;
            kept += excluded[static_cast<size_t>(j)] ? 0 : 1;
        }
        require(kept >= 1, ErrorKind::invalid_argument,
                "evaluate: gallery is empty after exclusion for query " + std::to_string(i));

        const auto order = rank_gallery(
            {dist.values.data().data() + i * ng, static_cast<size_t>(ng)}, excluded);

        int64_t relevant = 0;
        for (int64_t j : order) {
            if (dist.gallery[static_cast<size_t>(j)].person_id == qm.person_id) {
                ++relevant;
            }
        }
        if (relevant == 0) {
            ++report.queries_skipped;
            continue;
        }
        ++report.queries_evaluated;

        int64_t hits = 0;
        double ap = 0.0;
        int64_t first_hit_rank = -1;
        for (size_t pos = 0; pos < order.size(); ++pos) {
            const int64_t j = order[pos];
            if (dist.gallery[static_cast<size_t>(j)].person_id == qm.person_id) {
                ++hits;
                ap += static_cast<double>(hits) / static_cast<double>(pos + 1);
                if (first_hit_rank < 0) {
                    first_hit_rank = static_cast<int64_t>(pos) + 1;
                }
            }
        }
        ap_sum += ap / static_cast<double>(relevant);
        if (first_hit_rank >= 1) {
            for (int64_t k = first_hit_rank; k <= max_rank; ++k) {
                report.cmc[static_cast<size_t>(k - 1)] += 1.0;
            }
        }
    }

    require(report.queries_evaluated >= 1, ErrorKind::invalid_argument,
            "evaluate: no query had a valid positive");
    report.mean_ap = ap_sum / static_cast<double>(report.queries_evaluated);
    for (auto& v : report.cmc) {
        v /= static_cast<double>(report.queries_evaluated);
    }
    return report;
}

std::string EvalReport::to_json() const {
    std::ostringstream os;
    os.precision(17);
    os << "{\"mAP\": " << mean_ap << ", \"cmc\": [";
    for (size_t i = 0; i < cmc.size(); ++i) {
        if (i) {
            os << ", ";
        }
        os << cmc[i];
    }
    os << "], \"queries_evaluated\": " << queries_evaluated
       << ", \"queries_skipped\": " << queries_skipped << "}";
    return os.str();
}

} // namespace can
