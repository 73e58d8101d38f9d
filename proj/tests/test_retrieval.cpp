// Copyright 2026 The polyembed Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <catch_amalgamated.hpp>

#include "polyembed/retrieval.hpp"
#include "test_util.hpp"

#include <cmath>
#include <cstdio>
#include <random>

using namespace polyembed;
using namespace polyembed::testing;

namespace {

std::vector<std::string> make_ids(std::size_t n, std::mt19937_64& rng) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "id%05zu", i);
        ids.emplace_back(buf);
    }
    // Insertion order differs from id order so tie-breaking is exercised.
    std::shuffle(ids.begin(), ids.end(), rng);
    return ids;
}

// Exhaustive double loop: ids ordered by (min pairwise distance, id).
std::vector<std::string> oracle_order(const std::vector<std::string>& ids, const std::vector<Mat>& db,
                                      const Mat& q) {
    std::vector<std::pair<double, std::string>> scored;
    for (std::size_t i = 0; i < db.size(); ++i) {
        double best = 1e300;
        for (std::size_t a = 0; a < q.rows(); ++a) {
            for (std::size_t b = 0; b < db[i].rows(); ++b) {
                best = std::min(best, naive_cosine_distance(&q.data()[a * q.cols()],
                                                            &db[i].data()[b * q.cols()], q.cols()));
            }
        }
        scored.emplace_back(best, ids[i]);
    }
    std::sort(scored.begin(), scored.end());
    std::vector<std::string> out;
    for (auto& s : scored) {
        out.push_back(s.second);
    }
    return out;
}

} // namespace

TEST_CASE("query matches an exhaustive oracle", "[retrieval]") {
    std::mt19937_64 rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t m = 10 + static_cast<std::size_t>(trial) * 90 / 49;
        const std::size_t k = 1 + static_cast<std::size_t>(trial) % 8;
        const auto ids = make_ids(m, rng);
        const auto db = random_sets(m, k, 6, rng);
        const RetrievalIndex index(ids, db);
        const Mat q = random_mat(1 + trial % 4, 6, rng);
        const auto hits = query(index, q, m);
        const auto expect = oracle_order(ids, db, q);
        REQUIRE(hits.size() == m);
        for (std::size_t i = 0; i < m; ++i) {
            CHECK(hits[i].id == expect[i]);
        }
        for (std::size_t i = 1; i < m; ++i) {
            CHECK(hits[i - 1].distance <= hits[i].distance);
        }
    }
}

TEST_CASE("query basics", "[retrieval]") {
    std::mt19937_64 rng(42);
    const auto ids = make_ids(30, rng);
    const auto db = random_sets(30, 3, 5, rng);
    const RetrievalIndex index(ids, db);

    SECTION("an indexed set finds itself at distance zero") {
        for (std::size_t i = 0; i < 30; ++i) {
            const auto hits = index.query(db[i], 1);
            CHECK(hits[0].id == ids[i]);
            CHECK(std::abs(hits[0].distance) < 1e-12);
        }
    }
    SECTION("scores are invariant to row scaling") {
        Mat q = random_mat(2, 5, rng);
        const auto a = index.score_all(q);
        scale_inplace(q.row(0), 4.0);
        scale_inplace(q.row(1), 0.01);
        const auto b = index.score_all(q);
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(std::abs(a[i] - b[i]) < 1e-12);
        }
    }
    SECTION("ties resolve by id") {
        const std::vector<Mat> same(3, Mat{{1.0, 0.0}});
        const RetrievalIndex tied({"c", "a", "b"}, same);
        const auto hits = tied.query(Mat{{0.0, 1.0}}, 3);
        CHECK(hits[0].id == "a");
        CHECK(hits[1].id == "b");
        CHECK(hits[2].id == "c");
    }
    SECTION("K = 1 is plain cosine nearest neighbour") {
        const auto single = random_sets(20, 1, 5, rng);
        const RetrievalIndex one(std::vector<std::string>(ids.begin(), ids.begin() + 20), single);
        const Mat q = random_mat(1, 5, rng);
        const auto scores = one.score_all(q);
        for (std::size_t i = 0; i < 20; ++i) {
            CHECK(std::abs(scores[i] - naive_cosine_distance(q.data().data(), single[i].data().data(), 5)) <
                  1e-12);
        }
    }
    SECTION("errors") {
        CHECK_THROWS_AS(index.score_all(random_mat(1, 4, rng)), DimensionError);
        CHECK_THROWS_AS(RetrievalIndex({"a", "a"}, random_sets(2, 3, 5, rng)), std::invalid_argument);
        CHECK_THROWS_AS(RetrievalIndex({"a", "b"}, {Mat(1, 2), Mat{{1, 2}}}), DomainError);
        CHECK_THROWS_AS(RetrievalIndex().score_all(Mat{{1.0}}), std::out_of_range);
    }
}

TEST_CASE("inserting one instance moves an existing rank by at most one", "[retrieval][property]") {
    std::mt19937_64 rng(43);
    for (int trial = 0; trial < 100; ++trial) {
        auto ids = make_ids(25, rng);
        auto db = random_sets(25, 2, 4, rng);
        const Mat q = random_mat(2, 4, rng);
        const RetrievalIndex before(std::vector<std::string>(ids.begin(), ids.end() - 1),
                                    std::vector<Mat>(db.begin(), db.end() - 1));
        const RetrievalIndex after(ids, db);
        const auto sb = before.score_all(q);
        const auto sa = after.score_all(q);
        for (std::size_t pos = 0; pos + 1 < ids.size(); ++pos) {
            const std::size_t rb = before.rank_of(sb, pos);
            const std::size_t ra = after.rank_of(sa, pos);
            CHECK(ra >= rb);
            CHECK(ra <= rb + 1);
        }
    }
}

TEST_CASE("metrics_from_ranks", "[retrieval]") {
    SECTION("all first") {
        const auto r = metrics_from_ranks({1, 1, 1}, 40);
        CHECK(r.r_at(1) == 1.0);
        CHECK(r.med_r == 1.0);
        CHECK(r.nmr == 1.0 / 40.0);
        CHECK(r.rsum == 300.0);
    }
    SECTION("hand count") {
        const auto r = metrics_from_ranks({2, 6, 11}, 100);
        CHECK(r.r_at(1) == 0.0);
        CHECK(r.r_at(5) == 1.0 / 3.0);
        CHECK(r.r_at(10) == 2.0 / 3.0);
        CHECK(r.med_r == 6.0);
    }
    SECTION("even count takes the lower middle") {
        CHECK(metrics_from_ranks({9, 1, 4, 7}, 10).med_r == 4.0);
    }
    SECTION("recall is monotone in k") {
        std::mt19937_64 rng(44);
        std::uniform_int_distribution<std::size_t> u(1, 30);
        for (int trial = 0; trial < 100; ++trial) {
            std::vector<std::size_t> ranks(1 + trial % 17);
            for (auto& v : ranks) v = u(rng);
            const auto r = metrics_from_ranks(ranks, 30);
            CHECK(r.recall[0] <= r.recall[1]);
            CHECK(r.recall[1] <= r.recall[2]);
            CHECK(r.med_r >= 1.0);
            CHECK(r.nmr == r.med_r / 30.0);
        }
    }
    SECTION("empty") {
        CHECK_THROWS_AS(metrics_from_ranks({}, 5), std::invalid_argument);
    }
    SECTION("unknown k") {
        CHECK_THROWS_AS(metrics_from_ranks({1}, 5).r_at(3), std::out_of_range);
    }
}

TEST_CASE("evaluate", "[retrieval]") {
    std::mt19937_64 rng(45);

    SECTION("queries identical to the index give perfect recall") {
        const auto ids = make_ids(40, rng);
        const auto db = random_sets(40, 3, 6, rng);
        const auto rep = evaluate_bidirectional(ids, db, db);
        CHECK(rep.rsum == 600.0);
        CHECK(rep.x_to_y.med_r == 1.0);
        CHECK(rep.mean_r1() == 1.0);
    }
    SECTION("best rank over several ground truths") {
        const std::vector<Mat> db{Mat{{1, 0}}, Mat{{0.8, 0.6}}, Mat{{0, 1}}};
        const RetrievalIndex index({"a", "b", "c"}, db);
        const auto rep = evaluate(index, {{"q", Mat{{0.0, 1.0}}, {"a", "c"}}});
        CHECK(rep.ranks == std::vector<std::size_t>{1});
    }
    SECTION("missing ground truth is reported, not ranked") {
        const RetrievalIndex index({"a", "b"}, {Mat{{1, 0}}, Mat{{0, 1}}});
        const auto rep = evaluate(index, {{"q1", Mat{{1.0, 0.0}}, {"a"}}, {"q2", Mat{{1.0, 0.0}}, {"zz"}}});
        CHECK(rep.num_queries == 1);
        REQUIRE(rep.errors.size() == 1);
        CHECK(rep.errors[0].find("zz") != std::string::npos);
        CHECK_THROWS_AS(evaluate(index, {{"q2", Mat{{1.0, 0.0}}, {"zz"}}}), std::invalid_argument);
    }
    SECTION("rsum is the sum of the six recalls") {
        const auto ids = make_ids(60, rng);
        const auto rep = evaluate_bidirectional(ids, random_sets(60, 2, 4, rng), random_sets(60, 2, 4, rng));
        const double sum = 100.0 * (rep.x_to_y.recall[0] + rep.x_to_y.recall[1] + rep.x_to_y.recall[2]) +
                           100.0 * (rep.y_to_x.recall[0] + rep.y_to_x.recall[1] + rep.y_to_x.recall[2]);
        CHECK(rep.rsum == sum);
    }
    SECTION("directions are independent") {
        const auto ids = make_ids(50, rng);
        const auto zx = random_sets(50, 2, 4, rng);
        const auto zy = random_sets(50, 2, 4, rng);
        const auto base = evaluate_bidirectional(ids, zx, zy);
        // Reordering the y database (ids move with their sets) leaves x->y untouched.
        RetrievalIndex shuffled;
        {
            std::vector<std::size_t> perm(50);
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng);
            std::vector<std::string> pid;
            std::vector<Mat> pz;
            for (std::size_t p : perm) {
                pid.push_back(ids[p]);
                pz.push_back(zy[p]);
            }
            shuffled = RetrievalIndex(pid, pz);
        }
        std::vector<EvalQuery> qs;
        for (std::size_t i = 0; i < 50; ++i) {
            qs.push_back({ids[i], zx[i], {ids[i]}});
        }
        CHECK(evaluate(shuffled, qs).ranks == base.x_to_y.ranks);
    }
}

TEST_CASE("random embeddings retrieve at chance", "[retrieval][statistical]") {
    // R@1 over M queries against M random sets is Binomial(M, 1/M) / M.
    std::mt19937_64 rng(46);
    const std::size_t m = 500;
    const auto ids = make_ids(m, rng);
    double total = 0.0;
    const int trials = 20;
    for (int t = 0; t < trials; ++t) {
        const auto rep = evaluate_bidirectional(ids, random_sets(m, 2, 8, rng), random_sets(m, 2, 8, rng));
        total += rep.x_to_y.recall[0];
    }
    const double mean = total / trials;
    const double p = 1.0 / static_cast<double>(m);
    const double sigma = std::sqrt(p * (1.0 - p) / (static_cast<double>(m) * trials));
    CHECK(std::abs(mean - p) <= 3.0 * sigma);
}
