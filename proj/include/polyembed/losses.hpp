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

#ifndef POLYEMBED_LOSSES_HPP
#define POLYEMBED_LOSSES_HPP

#include "polyembed/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

/**
 * @file losses.hpp
 *
 * @brief Training objectives over a batch of paired K x H embedding sets.
 *
 * All distances are cosine distances (1 - cosine similarity). Every loss returns its value
 * together with analytic gradients. Subgradients: a hinge exactly at zero contributes nothing,
 * and min/max ties resolve to the lexicographically smallest index.
 */

namespace polyembed {

class NoNegativesError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// N paired instances; each entry is a K x H matrix.
struct BatchEmbeddings {
    std::vector<Mat> zx;
    std::vector<Mat> zy;
    std::vector<Mat> ux;
    std::vector<Mat> uy;
};

struct LossWeights {
    double lambda1 = 0.1;
    double lambda2 = 0.1;
    double rho = 0.2;
    /// RBF bandwidth, used when gamma_median_heuristic is off.
    double gamma = 1.0;
    /// Weights are multiplied by (L_mil / L_term) before use; the ratio is not differentiated.
    bool relative_mode = false;
    /// gamma = 1 / (2 median^2) of pooled pairwise distances, recomputed per batch.
    bool gamma_median_heuristic = true;
    /// Average the x-anchored MIL loss with its y-anchored mirror.
    bool symmetric_mil = true;

    void validate() const {
        if (!(rho >= 0.0)) {
            throw std::invalid_argument("LossWeights: rho must be >= 0");
        }
        if (!(gamma > 0.0)) {
            throw std::invalid_argument("LossWeights: gamma must be > 0");
        }
        if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) {
            throw std::invalid_argument("LossWeights: lambdas must be >= 0");
        }
    }
};

/// Which ranking term drives the embeddings.
enum class RankingObjective {
    mil,            ///< min over K x K embedding pairs
    concat_triplet, ///< K embeddings concatenated, plain triplet hinge
};

struct PairLoss {
    double value = 0.0;
    std::vector<Mat> dx;
    std::vector<Mat> dy;
};

struct FlatLoss {
    double value = 0.0;
    Mat dx; // N x H
    Mat dy;
};

struct LossBundle {
    double total = 0.0;
    double mil = 0.0;
    double div = 0.0;
    double mmd = 0.0;
    double lambda1_eff = 0.0;
    double lambda2_eff = 0.0;
    double gamma = 0.0;
    std::vector<Mat> d_zx;
    std::vector<Mat> d_zy;
    std::vector<Mat> d_ux;
    std::vector<Mat> d_uy;
};

namespace detail {

inline std::vector<Mat> zeros_like(const std::vector<Mat>& v) {
    std::vector<Mat> out;
    out.reserve(v.size());
    for (const Mat& m : v) {
        out.emplace_back(m.rows(), m.cols());
    }
    return out;
}

inline void check_paired(const std::vector<Mat>& a, const std::vector<Mat>& b, const char* what) {
    if (a.size() != b.size()) {
        throw DimensionError(std::string(what) + ": both sides need the same instance count");
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        require_same_shape(a[i], a.front(), what);
        require_same_shape(b[i], a.front(), what);
    }
}

struct PairMin {
    double dist = 0.0;
    std::size_t p = 0;
    std::size_t q = 0;
};

/// min over (p, q) of d(a_p, b_q); first minimum in row-major (p, q) order wins.
inline PairMin min_pair_distance(const Mat& a, const Mat& b) {
    PairMin best{std::numeric_limits<double>::infinity(), 0, 0};
    for (std::size_t p = 0; p < a.rows(); ++p) {
        for (std::size_t q = 0; q < b.rows(); ++q) {
            const double d = cosine_distance(a.row(p), b.row(q));
            if (d < best.dist) {
                best = {d, p, q};
            }
        }
    }
    return best;
}

inline double hinge(double v) { return v > 0.0 ? v : 0.0; }

} // namespace detail

/**
 * @brief Multiple-instance triplet loss.
 *
 * For each ordered pair i != j (x anchored):
 *     max(0, rho + min_{p,q} d(zx_ip, zy_iq) - min_{p,q} d(zx_ip, zy_jq))
 * summed and divided by N^2. The symmetric form averages this with the y-anchored mirror
 * (negatives zx_j against zy_i).
 */
inline PairLoss mil_loss(const std::vector<Mat>& zx, const std::vector<Mat>& zy, double rho,
                         bool symmetric = true) {
    const std::size_t n = zx.size();
    if (n < 2) {
        throw NoNegativesError("mil_loss: need at least 2 pairs in the batch");
    }
    detail::check_paired(zx, zy, "mil_loss");

    std::vector<detail::PairMin> dmin(n * n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            dmin[i * n + j] = detail::min_pair_distance(zx[i], zy[j]);
        }
    }

    const double scale = (symmetric ? 0.5 : 1.0) / static_cast<double>(n * n);
    // coef[i*n+j]: d loss / d dmin(i, j)
    std::vector<double> coef(n * n, 0.0);
    double sum_x = 0.0;
    double sum_y = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pos = dmin[i * n + i].dist;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) {
                continue;
            }
            const double tx = rho + pos - dmin[i * n + j].dist;
            if (tx > 0.0) {
                sum_x += tx;
                coef[i * n + i] += scale;
                coef[i * n + j] -= scale;
            }
            if (symmetric) {
                const double ty = rho + pos - dmin[j * n + i].dist;
                if (ty > 0.0) {
                    sum_y += ty;
                    coef[i * n + i] += scale;
                    coef[j * n + i] -= scale;
                }
            }
        }
    }

    PairLoss out{(sum_x + sum_y) * scale, detail::zeros_like(zx), detail::zeros_like(zy)};
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double c = coef[i * n + j];
            if (c == 0.0) {
                continue;
            }
            const detail::PairMin& m = dmin[i * n + j];
            cosine_distance_backward(zx[i].row(m.p), zy[j].row(m.q), c, out.dx[i].row(m.p),
                                     out.dy[j].row(m.q));
        }
    }
    return out;
}

/**
 * @brief Gram-matrix diversity penalty on the locally-guided features.
 *
 * Per instance and modality the K rows are l2-normalized, G = U U^T, and the penalty is the
 * Frobenius norm ||G - I||. The two modalities are summed, averaged over the batch and divided
 * by K^2.
 */
inline PairLoss diversity_loss(const std::vector<Mat>& ux, const std::vector<Mat>& uy) {
    detail::check_paired(ux, uy, "diversity_loss");
    PairLoss out{0.0, detail::zeros_like(ux), detail::zeros_like(uy)};
    if (ux.empty()) {
        return out;
    }
    const std::size_t k = ux.front().rows();
    const double scale = 1.0 / (static_cast<double>(k * k) * static_cast<double>(ux.size()));

    auto one = [scale](const Mat& u, Mat& du) {
        const Mat un = l2_normalize_rows(u);
        Mat e = matmul_nt(un, un);
        for (std::size_t i = 0; i < e.rows(); ++i) {
            e(i, i) -= 1.0;
        }
        const double f = norm2(e.span());
        if (f > 0.0) {
            // d||E||/dU_n = 2 (E / ||E||) U_n since E is symmetric.
            scale_inplace(e.span(), 2.0 * scale / f);
            du = l2_normalize_rows_backward(u, matmul(e, un));
        }
        return f;
    };

    double total = 0.0;
    for (std::size_t i = 0; i < ux.size(); ++i) {
        total += one(ux[i], out.dx[i]);
        total += one(uy[i], out.dy[i]);
    }
    out.value = total * scale;
    return out;
}

namespace detail {

inline std::vector<std::span<const double>> pooled_rows(const std::vector<Mat>& z) {
    std::vector<std::span<const double>> rows;
    for (const Mat& m : z) {
        for (std::size_t r = 0; r < m.rows(); ++r) {
            rows.push_back(m.row(r));
        }
    }
    return rows;
}

inline double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

} // namespace detail

/// gamma = 1 / (2 m^2), m the lower median of all pooled pairwise Euclidean distances.
inline double median_heuristic_gamma(const std::vector<Mat>& zx, const std::vector<Mat>& zy) {
    auto rows = detail::pooled_rows(zx);
    const auto ry = detail::pooled_rows(zy);
    rows.insert(rows.end(), ry.begin(), ry.end());
    std::vector<double> d2;
    d2.reserve(rows.size() * (rows.size() - 1) / 2);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = i + 1; j < rows.size(); ++j) {
            d2.push_back(detail::sq_dist(rows[i], rows[j]));
        }
    }
    if (d2.empty()) {
        return 1.0;
    }
    const auto mid = d2.begin() + static_cast<std::ptrdiff_t>((d2.size() - 1) / 2);
    std::nth_element(d2.begin(), mid, d2.end());
    // Degenerate or overflowing distances fall back to gamma = 1.
    const double g = 1.0 / (2.0 * *mid);
    return *mid > 0.0 && g > 0.0 && std::isfinite(g) ? g : 1.0;
}

/**
 * @brief Squared maximum mean discrepancy between the pooled x and y embeddings.
 *
 * Biased (V-statistic) estimator with kernel exp(-gamma ||a - b||^2), summed over all
 * K^2 N^2 pairs of each block and divided by K^2 N^2.
 */
inline PairLoss mmd_loss(const std::vector<Mat>& zx, const std::vector<Mat>& zy, double gamma) {
    if (!(gamma > 0.0)) {
        throw std::invalid_argument("mmd_loss: gamma must be > 0");
    }
    detail::check_paired(zx, zy, "mmd_loss");
    PairLoss out{0.0, detail::zeros_like(zx), detail::zeros_like(zy)};
    const auto xs = detail::pooled_rows(zx);
    const auto ys = detail::pooled_rows(zy);
    const std::size_t m = xs.size();
    if (m == 0) {
        return out;
    }
    const std::size_t h = xs.front().size();
    const double inv = 1.0 / static_cast<double>(m * m);

    std::vector<double> gx(m * h, 0.0);
    std::vector<double> gy(m * h, 0.0);
    // Adds c * d kappa(a, b) / da to ga and the matching term to gb.
    auto block = [&](const auto& as, const auto& bs, double c, std::vector<double>& ga,
                     std::vector<double>& gb) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < m; ++j) {
                const double kv = std::exp(-gamma * detail::sq_dist(as[i], bs[j]));
                s += kv;
                const double w = -2.0 * gamma * kv * c * inv;
                for (std::size_t t = 0; t < h; ++t) {
                    const double diff = as[i][t] - bs[j][t];
                    ga[i * h + t] += w * diff;
                    gb[j * h + t] -= w * diff;
                }
            }
        }
        return s;
    };
    const double sxx = block(xs, xs, 1.0, gx, gx);
    const double sxy = block(xs, ys, -2.0, gx, gy);
    const double syy = block(ys, ys, 1.0, gy, gy);
    out.value = std::max(0.0, (sxx - 2.0 * sxy + syy) * inv);

    std::size_t r = 0;
    for (std::size_t n = 0; n < zx.size(); ++n) {
        for (std::size_t p = 0; p < zx[n].rows(); ++p, ++r) {
            for (std::size_t t = 0; t < h; ++t) {
                out.dx[n](p, t) = gx[r * h + t];
                out.dy[n](p, t) = gy[r * h + t];
            }
        }
    }
    return out;
}

namespace detail {

/// One hinge term of the flat triplet losses: anchor pair (i, i), negative pair (a, b).
struct TripletTerm {
    std::size_t i;
    std::size_t a;
    std::size_t b;
    double value;
};

/// All terms with (i = a or i = b) and a != b, in order: for each anchor i, x-anchored
/// negatives (i, k) then y-anchored negatives (j, i).
inline std::vector<TripletTerm> triplet_terms(const Mat& px, const Mat& py, double rho) {
    const std::size_t n = px.rows();
    std::vector<double> d(n * n);
    for (std::size_t a = 0; a < n; ++a) {
        for (std::size_t b = 0; b < n; ++b) {
            d[a * n + b] = cosine_distance(px.row(a), py.row(b));
        }
    }
    std::vector<TripletTerm> terms;
    terms.reserve(2 * n * (n - 1));
    for (std::size_t i = 0; i < n; ++i) {
        const double pos = d[i * n + i];
        for (std::size_t k = 0; k < n; ++k) {
            if (k != i) {
                terms.push_back({i, i, k, hinge(rho + pos - d[i * n + k])});
            }
        }
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) {
                terms.push_back({i, j, i, hinge(rho + pos - d[j * n + i])});
            }
        }
    }
    return terms;
}

inline void check_flat(const Mat& px, const Mat& py, std::size_t min_n, const char* what) {
    require_same_shape(px, py, what);
    if (px.rows() < min_n) {
        throw NoNegativesError(std::string(what) + ": need at least " + std::to_string(min_n) +
                               " pairs in the batch");
    }
}

inline void add_term_grad(const Mat& px, const Mat& py, const TripletTerm& t, double c,
                          FlatLoss& out) {
    if (t.value <= 0.0 || c == 0.0) {
        return;
    }
    cosine_distance_backward(px.row(t.i), py.row(t.i), c, out.dx.row(t.i), out.dy.row(t.i));
    cosine_distance_backward(px.row(t.a), py.row(t.b), -c, out.dx.row(t.a), out.dy.row(t.b));
}

} // namespace detail

/**
 * @brief Plain triplet hinge loss over single embeddings (rows of px / py).
 *
 * Sums max(0, rho + d(x_i, y_i) - d(x_a, y_b)) over every negative pair sharing an anchor and
 * divides by 2 N^2, so a batch of K = 1 embedding sets gives exactly the symmetric MIL value.
 */
inline FlatLoss devise_loss(const Mat& px, const Mat& py, double rho) {
    detail::check_flat(px, py, 2, "devise_loss");
    const std::size_t n = px.rows();
    const auto terms = detail::triplet_terms(px, py, rho);
    const double scale = 0.5 / static_cast<double>(n * n);
    FlatLoss out{0.0, Mat(px.rows(), px.cols()), Mat(py.rows(), py.cols())};
    // Same accumulation order as mil_loss: x-anchored and y-anchored sums kept apart.
    double sum_x = 0.0;
    double sum_y = 0.0;
    for (const auto& t : terms) {
        (t.a == t.i ? sum_x : sum_y) += t.value;
        detail::add_term_grad(px, py, t, scale, out);
    }
    out.value = (sum_x + sum_y) * scale;
    return out;
}

struct VseppLoss : FlatLoss {
    bool fallback = false;
    std::size_t selected = 0;
};

/**
 * @brief Hard-negative triplet loss with a z-score filter.
 *
 * All hinge terms of devise_loss are standardized; terms with |z| >= 3 are averaged. With no
 * qualifying term (or zero spread) the loss falls back to the hardest negative per anchor and
 * direction, averaged over anchors.
 */
inline VseppLoss vsepp_loss(const Mat& px, const Mat& py, double rho, double z_threshold = 3.0) {
    detail::check_flat(px, py, 4, "vsepp_loss");
    const std::size_t n = px.rows();
    const auto terms = detail::triplet_terms(px, py, rho);
    VseppLoss out;
    out.dx = Mat(px.rows(), px.cols());
    out.dy = Mat(py.rows(), py.cols());

    double mean = 0.0;
    for (const auto& t : terms) {
        mean += t.value;
    }
    mean /= static_cast<double>(terms.size());
    double var = 0.0;
    for (const auto& t : terms) {
        var += (t.value - mean) * (t.value - mean);
    }
    const double sd = std::sqrt(var / static_cast<double>(terms.size()));

    if (sd > 0.0) {
        std::vector<const detail::TripletTerm*> kept;
        for (const auto& t : terms) {
            if (std::abs((t.value - mean) / sd) >= z_threshold) {
                kept.push_back(&t);
            }
        }
        if (!kept.empty()) {
            const double c = 1.0 / static_cast<double>(kept.size());
            double s = 0.0;
            for (const auto* t : kept) {
                s += t->value;
                detail::add_term_grad(px, py, *t, c, out);
            }
            out.value = s * c;
            out.selected = kept.size();
            return out;
        }
    }

    out.fallback = true;
    const double c = 1.0 / static_cast<double>(n);
    double s = 0.0;
    // terms are grouped per anchor: n-1 x-anchored then n-1 y-anchored.
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t dir = 0; dir < 2; ++dir) {
            const auto first = terms.begin() + static_cast<std::ptrdiff_t>((2 * i + dir) * (n - 1));
            const auto best = std::max_element(
                first, first + static_cast<std::ptrdiff_t>(n - 1),
                [](const auto& l, const auto& r) { return l.value < r.value; });
            s += best->value;
            detail::add_term_grad(px, py, *best, c, out);
            out.selected += best->value > 0.0 ? 1 : 0;
        }
    }
    out.value = s * c;
    return out;
}

/// Stacks each K x H set into one row of length K*H.
inline Mat concat_rows(const std::vector<Mat>& z) {
    if (z.empty()) {
        return {};
    }
    const std::size_t w = z.front().size();
    Mat out(z.size(), w);
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (z[i].size() != w) {
            throw DimensionError("concat_rows: ragged embedding sets");
        }
        std::copy(z[i].data().begin(), z[i].data().end(), out.row(i).begin());
    }
    return out;
}

inline std::vector<Mat> split_rows(const Mat& flat, std::size_t k, std::size_t h) {
    std::vector<Mat> out;
    out.reserve(flat.rows());
    for (std::size_t i = 0; i < flat.rows(); ++i) {
        out.emplace_back(k, h, std::vector<double>(flat.row(i).begin(), flat.row(i).end()));
    }
    return out;
}

/**
 * @brief Full objective: ranking + lambda1 * diversity + lambda2 * MMD.
 *
 * In relative mode each lambda is first multiplied by (ranking value / term value); that ratio
 * is a constant for the gradient.
 */
inline LossBundle combined_loss(const BatchEmbeddings& batch, const LossWeights& w,
                                RankingObjective objective = RankingObjective::mil) {
    w.validate();
    detail::check_paired(batch.zx, batch.zy, "combined_loss");
    detail::check_paired(batch.ux, batch.uy, "combined_loss");
    LossBundle b;

    if (objective == RankingObjective::mil) {
        PairLoss mil = mil_loss(batch.zx, batch.zy, w.rho, w.symmetric_mil);
        b.mil = mil.value;
        b.d_zx = std::move(mil.dx);
        b.d_zy = std::move(mil.dy);
    } else {
        const std::size_t k = batch.zx.front().rows();
        const std::size_t h = batch.zx.front().cols();
        FlatLoss flat = devise_loss(concat_rows(batch.zx), concat_rows(batch.zy), w.rho);
        b.mil = flat.value;
        b.d_zx = split_rows(flat.dx, k, h);
        b.d_zy = split_rows(flat.dy, k, h);
    }

    b.d_ux = detail::zeros_like(batch.ux);
    b.d_uy = detail::zeros_like(batch.uy);
    constexpr double eps = 1e-12;

    if (w.lambda1 > 0.0) {
        PairLoss div = diversity_loss(batch.ux, batch.uy);
        b.div = div.value;
        b.lambda1_eff = w.relative_mode ? w.lambda1 * b.mil / std::max(div.value, eps) : w.lambda1;
        for (std::size_t i = 0; i < b.d_ux.size(); ++i) {
            scale_inplace(div.dx[i].span(), b.lambda1_eff);
            scale_inplace(div.dy[i].span(), b.lambda1_eff);
        }
        b.d_ux = std::move(div.dx);
        b.d_uy = std::move(div.dy);
    }

    if (w.lambda2 > 0.0) {
        b.gamma = w.gamma_median_heuristic ? median_heuristic_gamma(batch.zx, batch.zy) : w.gamma;
        PairLoss mmd = mmd_loss(batch.zx, batch.zy, b.gamma);
        b.mmd = mmd.value;
        b.lambda2_eff = w.relative_mode ? w.lambda2 * b.mil / std::max(mmd.value, eps) : w.lambda2;
        for (std::size_t i = 0; i < b.d_zx.size(); ++i) {
            for (std::size_t t = 0; t < b.d_zx[i].size(); ++t) {
                b.d_zx[i].data()[t] += b.lambda2_eff * mmd.dx[i].data()[t];
                b.d_zy[i].data()[t] += b.lambda2_eff * mmd.dy[i].data()[t];
            }
        }
    }

    b.total = b.mil + b.lambda1_eff * b.div + b.lambda2_eff * b.mmd;
    return b;
}

} // namespace polyembed

#endif
