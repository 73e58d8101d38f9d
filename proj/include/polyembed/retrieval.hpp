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

#ifndef POLYEMBED_RETRIEVAL_HPP
#define POLYEMBED_RETRIEVAL_HPP

#include "polyembed/numerics.hpp"

#include <algorithm>
#include <array>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

/**
 * @file retrieval.hpp
 *
 * @brief Set-to-set nearest neighbour search and the recall / median-rank metrics.
 *
 * Each indexed instance owns K embeddings. The distance between a query set and an instance
 * is the smallest cosine distance over all query-row x instance-row pairs.
 */

namespace polyembed {

struct Hit {
    std::string id;
    std::size_t position = 0; ///< insertion position in the index
    double distance = 0.0;
};

class RetrievalIndex {
public:
    /// Instances scored per matrix product in query().
    static constexpr std::size_t kBlock = 256;

    RetrievalIndex() = default;

    RetrievalIndex(std::vector<std::string> ids, const std::vector<Mat>& embeddings)
        : ids_(std::move(ids)) {
        if (ids_.size() != embeddings.size()) {
            throw DimensionError("RetrievalIndex: id count does not match embedding count");
        }
        if (embeddings.empty()) {
            return;
        }
        k_ = embeddings.front().rows();
        h_ = embeddings.front().cols();
        normed_ = Mat(ids_.size() * k_, h_);
        for (std::size_t i = 0; i < embeddings.size(); ++i) {
            const Mat& e = embeddings[i];
            if (e.rows() != k_ || e.cols() != h_) {
                throw DimensionError("RetrievalIndex: every instance needs the same K x H shape");
            }
            if (!all_finite(e.span())) {
                throw DomainError("RetrievalIndex: non-finite embedding for id " + ids_[i]);
            }
            for (std::size_t r = 0; r < k_; ++r) {
                const double n = norm2(e.row(r));
                if (n < kNormEps) {
                    throw DomainError("RetrievalIndex: zero-norm embedding row for id " + ids_[i]);
                }
                auto dst = normed_.row(i * k_ + r);
                for (std::size_t c = 0; c < h_; ++c) {
                    dst[c] = e(r, c) / n;
                }
            }
        }
        std::vector<std::size_t> order(ids_.size());
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(),
                  [this](std::size_t a, std::size_t b) { return ids_[a] < ids_[b]; });
        id_rank_.resize(ids_.size());
        for (std::size_t r = 0; r < order.size(); ++r) {
            id_rank_[order[r]] = r;
            if (r > 0 && ids_[order[r]] == ids_[order[r - 1]]) {
                throw std::invalid_argument("RetrievalIndex: duplicate id " + ids_[order[r]]);
            }
        }
        for (std::size_t i = 0; i < ids_.size(); ++i) {
            position_.emplace(ids_[i], i);
        }
    }

    std::size_t size() const { return ids_.size(); }
    std::size_t k() const { return k_; }
    std::size_t h() const { return h_; }
    const std::vector<std::string>& ids() const { return ids_; }

    /// Position of `id`, or size() when absent.
    std::size_t find(const std::string& id) const {
        auto it = position_.find(id);
        return it == position_.end() ? ids_.size() : it->second;
    }

    /**
     * @brief Distance from the query set to every indexed instance, in insertion order.
     *
     * Scoring is blocked: one (Kq x H) * (H x kBlock*K) product per block of instances.
     */
    std::vector<double> score_all(const Mat& query) const {
        if (ids_.empty()) {
            throw std::out_of_range("RetrievalIndex: query on an empty index");
        }
        if (query.cols() != h_ || query.rows() == 0) {
            throw DimensionError("RetrievalIndex: query width does not match index H");
        }
        const Mat qn = l2_normalize_rows(query);
        for (std::size_t r = 0; r < qn.rows(); ++r) {
            if (norm2(query.row(r)) < kNormEps) {
                throw DomainError("RetrievalIndex: zero-norm query row");
            }
        }
        std::vector<double> out(ids_.size());
        for (std::size_t start = 0; start < ids_.size(); start += kBlock) {
            const std::size_t stop = std::min(ids_.size(), start + kBlock);
            const std::size_t rows = (stop - start) * k_;
            Mat block(rows, h_,
                      std::vector<double>(normed_.data().begin() +
                                              static_cast<std::ptrdiff_t>(start * k_ * h_),
                                          normed_.data().begin() +
                                              static_cast<std::ptrdiff_t>(stop * k_ * h_)));
            const Mat sim = matmul_nt(qn, block);
            for (std::size_t inst = start; inst < stop; ++inst) {
                double best = std::numeric_limits<double>::infinity();
                for (std::size_t qr = 0; qr < sim.rows(); ++qr) {
                    for (std::size_t r = 0; r < k_; ++r) {
                        best = std::min(best, 1.0 - sim(qr, (inst - start) * k_ + r));
                    }
                }
                out[inst] = best;
            }
        }
        return out;
    }

    /// True when instance a ranks ahead of instance b for these scores.
    bool ahead(const std::vector<double>& scores, std::size_t a, std::size_t b) const {
        if (scores[a] != scores[b]) {
            return scores[a] < scores[b];
        }
        return id_rank_[a] < id_rank_[b];
    }

    /// Ascending distance; ties broken by id.
    std::vector<Hit> query(const Mat& q, std::size_t top_k) const {
        const auto scores = score_all(q);
        std::vector<std::size_t> order(ids_.size());
        std::iota(order.begin(), order.end(), 0);
        const std::size_t keep = std::min(top_k, order.size());
        std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep),
                          order.end(),
                          [&](std::size_t a, std::size_t b) { return ahead(scores, a, b); });
        std::vector<Hit> hits;
        hits.reserve(keep);
        for (std::size_t i = 0; i < keep; ++i) {
            hits.push_back({ids_[order[i]], order[i], scores[order[i]]});
        }
        return hits;
    }

    /// 1-based rank of the instance at `position` for these scores.
    std::size_t rank_of(const std::vector<double>& scores, std::size_t position) const {
        std::size_t rank = 1;
        for (std::size_t i = 0; i < scores.size(); ++i) {
            if (i != position && ahead(scores, i, position)) {
                ++rank;
            }
        }
        return rank;
    }

private:
    std::vector<std::string> ids_;
    std::vector<std::size_t> id_rank_;
    std::unordered_map<std::string, std::size_t> position_;
    std::size_t k_ = 0;
    std::size_t h_ = 0;
    Mat normed_;
};

inline std::vector<Hit> query(const RetrievalIndex& index, const Mat& q, std::size_t top_k) {
    return index.query(q, top_k);
}

struct EvalQuery {
    std::string id;
    Mat embeddings;
    std::vector<std::string> ground_truth;
};

struct MetricsReport {
    std::string direction;
    std::size_t database_size = 0;
    std::size_t num_queries = 0;
    std::array<std::size_t, 3> ks{1, 5, 10};
    std::array<double, 3> recall{};
    double med_r = 0.0;
    double nmr = 0.0;
    double rsum = 0.0; ///< sum of the recalls, in percent
    std::vector<std::size_t> ranks;
    std::vector<std::string> errors;

    double r_at(std::size_t k) const {
        for (std::size_t i = 0; i < ks.size(); ++i) {
            if (ks[i] == k) {
                return recall[i];
            }
        }
        throw std::out_of_range("MetricsReport: recall not computed for k=" + std::to_string(k));
    }
};

/**
 * @brief Recall@{1,5,10}, median rank and normalized median rank from best ground-truth ranks.
 *
 * The median of an even-length list is its lower middle value.
 */
inline MetricsReport metrics_from_ranks(std::vector<std::size_t> ranks, std::size_t database_size,
                                        std::string direction = {}) {
    if (ranks.empty()) {
        throw std::invalid_argument("metrics_from_ranks: no ranked queries");
    }
    MetricsReport rep;
    rep.direction = std::move(direction);
    rep.database_size = database_size;
    rep.num_queries = ranks.size();
    for (std::size_t i = 0; i < rep.ks.size(); ++i) {
        const auto hits = std::count_if(ranks.begin(), ranks.end(),
                                        [&](std::size_t r) { return r <= rep.ks[i]; });
        rep.recall[i] = static_cast<double>(hits) / static_cast<double>(ranks.size());
    }
    std::vector<std::size_t> sorted = ranks;
    std::sort(sorted.begin(), sorted.end());
    rep.med_r = static_cast<double>(sorted[(sorted.size() - 1) / 2]);
    rep.nmr = rep.med_r / static_cast<double>(database_size);
    rep.rsum = 100.0 * (rep.recall[0] + rep.recall[1] + rep.recall[2]);
    rep.ranks = std::move(ranks);
    return rep;
}

/**
 * @brief Ranks every query against the index.
 *
 * A query's rank is the best rank among its ground-truth ids. Queries whose ground truth is
 * missing from the index are listed in `errors` and excluded from the metrics.
 */
inline MetricsReport evaluate(const RetrievalIndex& index, const std::vector<EvalQuery>& queries,
                              std::string direction = {}) {
    std::vector<std::size_t> ranks;
    std::vector<std::string> errors;
    for (const EvalQuery& q : queries) {
        std::vector<std::size_t> positions;
        for (const std::string& gt : q.ground_truth) {
            const std::size_t pos = index.find(gt);
            if (pos == index.size()) {
                errors.push_back("query " + q.id + ": ground truth " + gt + " not in index");
            } else {
                positions.push_back(pos);
            }
        }
        if (positions.empty()) {
            if (q.ground_truth.empty()) {
                errors.push_back("query " + q.id + ": no ground truth given");
            }
            continue;
        }
        const auto scores = index.score_all(q.embeddings);
        std::size_t best = std::numeric_limits<std::size_t>::max();
        for (std::size_t pos : positions) {
            best = std::min(best, index.rank_of(scores, pos));
        }
        ranks.push_back(best);
    }
    if (ranks.empty()) {
        throw std::invalid_argument("evaluate: no query has ground truth in the index");
    }
    MetricsReport rep = metrics_from_ranks(std::move(ranks), index.size(), std::move(direction));
    rep.errors = std::move(errors);
    return rep;
}

struct BidirectionalReport {
    MetricsReport x_to_y;
    MetricsReport y_to_x;
    double rsum = 0.0;

    double mean_r1() const { return 0.5 * (x_to_y.recall[0] + y_to_x.recall[0]); }
};

/**
 * @brief Paired evaluation in both directions: x queries against a y database and vice versa.
 *
 * `ids[i]` names pair i on both sides; its partner is the only ground truth.
 */
inline BidirectionalReport evaluate_bidirectional(const std::vector<std::string>& ids,
                                                  const std::vector<Mat>& zx,
                                                  const std::vector<Mat>& zy) {
    if (ids.size() != zx.size() || ids.size() != zy.size()) {
        throw DimensionError("evaluate_bidirectional: ids and both sides must align");
    }
    auto run = [&ids](const std::vector<Mat>& db, const std::vector<Mat>& qs, const char* dir) {
        RetrievalIndex index(ids, db);
        std::vector<EvalQuery> queries;
        queries.reserve(qs.size());
        for (std::size_t i = 0; i < qs.size(); ++i) {
            queries.push_back({ids[i], qs[i], {ids[i]}});
        }
        return evaluate(index, queries, dir);
    };
    BidirectionalReport rep{run(zy, zx, "x_to_y"), run(zx, zy, "y_to_x"), 0.0};
    rep.rsum = rep.x_to_y.rsum + rep.y_to_x.rsum;
    return rep;
}

} // namespace polyembed

#endif
