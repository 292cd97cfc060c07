// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "eval.hpp"
#include "rng.hpp"

using namespace can;

namespace {

// Independent brute-force recomputation of mAP / CMC with the same protocol:
// drop junk and same-id+same-camera items, skip queries without positives,
// precision accumulated at each relevant hit.
struct OracleResult {
    double mean_ap = 0.0;
    std::vector<double> cmc;
    int64_t evaluated = 0;
    int64_t skipped = 0;
};

OracleResult brute_force_eval(const DistanceMatrix& dist, int64_t max_rank) {
    const int64_t nq = dist.values.dim(0);
    const int64_t ng = dist.values.dim(1);
    OracleResult r;
    r.cmc.assign(static_cast<size_t>(max_rank), 0.0);
    double ap_sum = 0.0;
    for (int64_t i = 0; i < nq; ++i) {
        const auto& qm = dist.query[static_cast<size_t>(i)];
        std::vector<int64_t> kept;
        for (int64_t j = 0; j < ng; ++j) {
            const auto& gm = dist.gallery[static_cast<size_t>(j)];
            if (gm.person_id == -1) {
                continue;
            }
            if (gm.person_id == qm.person_id && gm.camera_id == qm.camera_id) {
                continue;
            }
            kept.push_back(j);
        }
        // selection sort by (distance, index): an intentionally different
        // route than the implementation's stable_sort
        std::vector<int64_t> order;
        std::vector<char> used(kept.size(), 0);
        for (size_t n = 0; n < kept.size(); ++n) {
            int64_t best = -1;
            for (size_t c = 0; c < kept.size(); ++c) {
                if (used[c]) {
                    continue;
                }
                if (best < 0 ||
                    dist.values[i * ng + kept[c]] < dist.values[i * ng + best] ||
                    (dist.values[i * ng + kept[c]] == dist.values[i * ng + best] &&
                     kept[c] < best)) {
                    best = kept[c];
                    // remember position to mark used
                }
            }
            for (size_t c = 0; c < kept.size(); ++c) {
                if (!used[c] && kept[c] == best) {
                    used[c] = 1;
                    break;
                }
            }
            order.push_back(best);
        }

        int64_t relevant = 0;
        for (int64_t j : order) {
            if (dist.gallery[static_cast<size_t>(j)].person_id == qm.person_id) {
                ++relevant;
            }
        }
        if (relevant == 0) {
            ++r.skipped;
            continue;
        }
        ++r.evaluated;
        int64_t hits = 0;
        double ap = 0.0;
        int64_t first = -1;
        for (size_t pos = 0; pos < order.size(); ++pos) {
            if (dist.gallery[static_cast<size_t>(order[pos])].person_id == qm.person_id) {
                ++hits;
                ap += static_cast<double>(hits) / static_cast<double>(pos + 1);
                if (first < 0) {
                    first = static_cast<int64_t>(pos) + 1;
                }
            }
        }
        ap_sum += ap / static_cast<double>(relevant);
        for (int64_t k = first; k <= max_rank; ++k) {
            r.cmc[static_cast<size_t>(k - 1)] += 1.0;
        }
    }
    r.mean_ap = ap_sum / static_cast<double>(r.evaluated);
    for (auto& v : r.cmc) {
        v /= static_cast<double>(r.evaluated);
    }
    return r;
}

} // namespace

TEST_CASE("cosine distances: identical, orthogonal, opposite") {
    Tensor q({3, 2}, {1, 0, 1, 0, 1, 0});
    Tensor g({3, 2}, {2, 0, 0, 5, -1, 0});
    auto dist = cosine_distance_matrix(q, g, {{0, 0}, {1, 0}, {2, 0}},
                                       {{0, 1}, {1, 1}, {2, 1}});
    CHECK(dist.values[0 * 3 + 0] == doctest::Approx(0.0).epsilon(1e-12)); // same direction
    CHECK(dist.values[0 * 3 + 1] == doctest::Approx(1.0).epsilon(1e-12)); // orthogonal
    CHECK(dist.values[0 * 3 + 2] == doctest::Approx(2.0).epsilon(1e-12)); // opposite

    Tensor zero({1, 2}, {0, 0});
    CHECK_THROWS_AS(cosine_distance_matrix(zero, g, {{0, 0}}, dist.gallery), Error);
}

TEST_CASE("rank_gallery ordering, ties and exclusions") {
    const std::vector<double> row{0.5, 0.1, 0.9};
    auto order = rank_gallery(row, {});
    CHECK(order == std::vector<int64_t>{1, 0, 2});

    const std::vector<double> tie{0.5, 0.5};
    CHECK(rank_gallery(tie, {}) == std::vector<int64_t>{0, 1});

    const std::vector<uint8_t> excl{0, 1, 0};
    CHECK(rank_gallery(row, excl) == std::vector<int64_t>{0, 2});
}

TEST_CASE("evaluate: perfect ranking gives mAP 1 and flat CMC 1") {
    // queries are exact copies of their gallery mates, different camera
    Tensor q({2, 2}, {1, 0, 0, 1});
    Tensor g({4, 2}, {1, 0, 0, 1, 0.5, 0.5, -0.7, 0.1});
    auto dist = cosine_distance_matrix(
        q, g, {{0, 0}, {1, 0}}, {{0, 1}, {1, 1}, {2, 1}, {3, 1}});
    auto report = evaluate(dist, 4);
    CHECK(report.mean_ap == doctest::Approx(1.0));
    for (double c : report.cmc) {
        CHECK(c == doctest::Approx(1.0));
    }
    CHECK(report.queries_evaluated == 2);
    CHECK(report.queries_skipped == 0);
}

TEST_CASE("evaluate: the AP of hits at ranks 1 and 3 of 5 is 5/6") {
    // craft distances directly: one query, five gallery items
    DistanceMatrix dist;
    dist.values = Tensor({1, 5}, {0.1, 0.2, 0.3, 0.4, 0.5});
    dist.query = {{7, 0}};
    // relevant at positions 0 and 2 (ranks 1 and 3), all different camera
    dist.gallery = {{7, 1}, {1, 1}, {7, 1}, {2, 1}, {3, 1}};
    auto report = evaluate(dist, 5);
    CHECK(report.mean_ap == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-12));
    CHECK(report.cmc[0] == doctest::Approx(1.0));
}

TEST_CASE("evaluate: same-id same-camera positives are excluded; lone ones skip the query") {
    DistanceMatrix dist;
    dist.values = Tensor({2, 3}, {0.1, 0.2, 0.3, 0.1, 0.2, 0.3});
    dist.query = {{1, 0}, {2, 0}};
    // query 0: its only positive shares the camera -> skipped
    // query 1: positive on another camera -> evaluated
    dist.gallery = {{1, 0}, {2, 1}, {3, 1}};
    auto report = evaluate(dist, 2);
    CHECK(report.queries_evaluated == 1);
    CHECK(report.queries_skipped == 1);

    // junk (-1) never ranks
    DistanceMatrix with_junk;
    with_junk.values = Tensor({1, 3}, {0.01, 0.5, 0.9});
    with_junk.query = {{4, 0}};
    with_junk.gallery = {{-1, 1}, {4, 1}, {9, 1}};
    auto r2 = evaluate(with_junk, 2);
    CHECK(r2.mean_ap == doctest::Approx(1.0)); // junk at the best distance is ignored
}

TEST_CASE("evaluate: empty gallery after exclusion is an error") {
    DistanceMatrix dist;
    dist.values = Tensor({1, 1}, {0.2});
    dist.query = {{1, 0}};
    dist.gallery = {{-1, 0}};
    CHECK_THROWS_AS(evaluate(dist, 1), Error);
}

TEST_CASE("evaluate matches the brute-force oracle on 500 random instances") {
    Rng rng(83);
    for (int rep = 0; rep < 500; ++rep) {
        const int64_t nq = 1 + rng.below(6);
        const int64_t ng = 2 + rng.below(19); // <= 20
        const int64_t num_ids = 1 + rng.below(6);
        const int64_t num_cams = 1 + rng.below(3);

        DistanceMatrix dist;
        dist.values = Tensor({nq, ng});
        for (int64_t i = 0; i < dist.values.numel(); ++i) {
            dist.values[i] = rng.uniform(0.0, 2.0);
        }
        for (int64_t i = 0; i < nq; ++i) {
            dist.query.push_back({rng.below(num_ids), rng.below(num_cams)});
        }
        for (int64_t j = 0; j < ng; ++j) {
            // ~10% junk
            const int64_t id = rng.below(10) == 0 ? -1 : rng.below(num_ids);
            dist.gallery.push_back({id, rng.below(num_cams)});
        }

        // keep only instances where the protocol is satisfiable
        bool ok = true;
        int64_t with_positive = 0;
        for (int64_t i = 0; i < nq && ok; ++i) {
            int64_t kept = 0, positives = 0;
            for (int64_t j = 0; j < ng; ++j) {
                const auto& gm = dist.gallery[static_cast<size_t>(j)];
                const auto& qm = dist.query[static_cast<size_t>(i)];
                const bool excluded =
                    gm.person_id == -1 ||
                    (gm.person_id == qm.person_id && gm.camera_id == qm.camera_id);
                kept += excluded ? 0 : 1;
                positives += (!excluded && gm.person_id == qm.person_id) ? 1 : 0;
            }
            if (kept == 0) {
                ok = false;
            }
            with_positive += positives > 0 ? 1 : 0;
        }
        if (!ok || with_positive == 0) {
            continue;
        }

        const int64_t max_rank = 1 + rng.below(ng);
        const auto report = evaluate(dist, max_rank);
        const auto oracle = brute_force_eval(dist, max_rank);

        CHECK(report.mean_ap == oracle.mean_ap); // exact
        CHECK(report.queries_evaluated == oracle.evaluated);
        CHECK(report.queries_skipped == oracle.skipped);
        REQUIRE(report.cmc.size() == oracle.cmc.size());
        for (size_t k = 0; k < report.cmc.size(); ++k) {
            CHECK(report.cmc[k] == oracle.cmc[k]);
        }
        // CMC is a cumulative curve
        for (size_t k = 1; k < report.cmc.size(); ++k) {
            CHECK(report.cmc[k] >= report.cmc[k - 1]);
        }
    }
}

TEST_CASE("feature scaling leaves distances, ranking and the report unchanged") {
    Rng rng(84);
    Tensor q({3, 4});
    Tensor g({6, 4});
    for (int64_t i = 0; i < q.numel(); ++i) q[i] = rng.uniform(-1, 1);
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = rng.uniform(-1, 1);
    std::vector<ItemMeta> qm{{0, 0}, {1, 0}, {2, 0}};
    std::vector<ItemMeta> gm{{0, 1}, {1, 1}, {2, 1}, {0, 1}, {1, 1}, {2, 1}};

    auto d1 = cosine_distance_matrix(q, g, qm, gm);
    Tensor q2 = ops::scale(q, 37.5);
    Tensor g2 = ops::scale(g, 0.003);
    auto d2 = cosine_distance_matrix(q2, g2, qm, gm);
    for (int64_t i = 0; i < d1.values.numel(); ++i) {
        CHECK(d1.values[i] == doctest::Approx(d2.values[i]).epsilon(1e-12));
    }
    auto r1 = evaluate(d1, 5);
    auto r2 = evaluate(d2, 5);
    CHECK(r1.mean_ap == doctest::Approx(r2.mean_ap).epsilon(1e-12));
}

TEST_CASE("gallery permutation leaves mAP unchanged for distinct distances") {
    Rng rng(85);
    for (int rep = 0; rep < 30; ++rep) {
        const int64_t nq = 2, ng = 8;
        DistanceMatrix dist;
        dist.values = Tensor({nq, ng});
        // strictly distinct distances
        std::vector<double> pool;
        for (int64_t i = 0; i < nq * ng; ++i) {
            pool.push_back(0.001 * static_cast<double>(i) + rng.uniform(0.0, 0.0005));
        }
        rng.shuffle(pool);
        for (int64_t i = 0; i < nq * ng; ++i) {
            dist.values[i] = pool[static_cast<size_t>(i)];
        }
        dist.query = {{0, 0}, {1, 0}};
        for (int64_t j = 0; j < ng; ++j) {
            dist.gallery.push_back({j % 3, 1});
        }

        std::vector<int64_t> perm{0, 1, 2, 3, 4, 5, 6, 7};
        rng.shuffle(perm);
        DistanceMatrix permuted;
        permuted.values = Tensor({nq, ng});
        permuted.query = dist.query;
        permuted.gallery.resize(static_cast<size_t>(ng));
        for (int64_t j = 0; j < ng; ++j) {
            permuted.gallery[static_cast<size_t>(j)] =
                dist.gallery[static_cast<size_t>(perm[static_cast<size_t>(j)])];
            for (int64_t i = 0; i < nq; ++i) {
                permuted.values[i * ng + j] =
                    dist.values[i * ng + perm[static_cast<size_t>(j)]];
            }
        }
        auto r1 = evaluate(dist, 5);
        auto r2 = evaluate(permuted, 5);
        CHECK(r1.mean_ap == doctest::Approx(r2.mean_ap).epsilon(1e-12));
        for (size_t k = 0; k < r1.cmc.size(); ++k) {
            CHECK(r1.cmc[k] == doctest::Approx(r2.cmc[k]).epsilon(1e-12));
        }
    }
}

TEST_CASE("report serializes to the documented JSON shape") {
    EvalReport r;
    r.mean_ap = 0.5;
    r.cmc = {0.25, 0.75};
    r.queries_evaluated = 4;
    r.queries_skipped = 1;
    const std::string j = r.to_json();
    CHECK(j.find("\"mAP\"") != std::string::npos);
    CHECK(j.find("\"cmc\"") != std::string::npos);
    CHECK(j.find("\"queries_evaluated\": 4") != std::string::npos);
    CHECK(j.find("\"queries_skipped\": 1") != std::string::npos);
}
