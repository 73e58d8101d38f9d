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

#include "polyembed/losses.hpp"
#include "test_util.hpp"

#include <cmath>
#include <random>

using namespace polyembed;
using namespace polyembed::testing;
using Catch::Approx;

namespace {

double naive_d(const Mat& a, std::size_t p, const Mat& b, std::size_t q) {
    return naive_cosine_distance(&a.data()[p * a.cols()], &b.data()[q * b.cols()], a.cols());
}

double brute_min(const Mat& a, const Mat& b) {
    double best = 1e300;
    for (std::size_t p = 0; p < a.rows(); ++p) {
        for (std::size_t q = 0; q < b.rows(); ++q) {
            best = std::min(best, naive_d(a, p, b, q));
        }
    }
    return best;
}

// Direct enumeration of the MIL objective.
double mil_oracle(const std::vector<Mat>& zx, const std::vector<Mat>& zy, double rho, bool symmetric) {
    const std::size_t n = zx.size();
    double sx = 0.0, sy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pos = brute_min(zx[i], zy[i]);
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) {
                continue;
            }
            sx += std::max(0.0, rho + pos - brute_min(zx[i], zy[j]));
            sy += std::max(0.0, rho + pos - brute_min(zx[j], zy[i]));
        }
    }
    const double nn = static_cast<double>(n * n);
    return symmetric ? 0.5 * (sx + sy) / nn : sx / nn;
}

double mmd_oracle(const std::vector<Mat>& zx, const std::vector<Mat>& zy, double gamma) {
    std::vector<std::vector<double>> xs, ys;
    for (const Mat& m : zx) {
        for (std::size_t r = 0; r < m.rows(); ++r) {
            xs.emplace_back(m.row(r).begin(), m.row(r).end());
        }
    }
    for (const Mat& m : zy) {
        for (std::size_t r = 0; r < m.rows(); ++r) {
            ys.emplace_back(m.row(r).begin(), m.row(r).end());
        }
    }
    auto kern = [gamma](const std::vector<double>& a, const std::vector<double>& b) {
        double s = 0.0;
        for (std::size_t t = 0; t < a.size(); ++t) {
            s += (a[t] - b[t]) * (a[t] - b[t]);
        }
        return std::exp(-gamma * s);
    };
    double kxx = 0.0, kxy = 0.0, kyy = 0.0;
    for (const auto& a : xs) {
        for (const auto& b : xs) kxx += kern(a, b);
        for (const auto& b : ys) kxy += kern(a, b);
    }
    for (const auto& a : ys) {
        for (const auto& b : ys) kyy += kern(a, b);
    }
    const double m2 = static_cast<double>(xs.size() * xs.size());
    return kxx / m2 - 2.0 * kxy / m2 + kyy / m2;
}

double devise_oracle(const Mat& px, const Mat& py, double rho) {
    const std::size_t n = px.rows();
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < n; ++a) {
            for (std::size_t b = 0; b < n; ++b) {
                if (a == b || (a != i && b != i)) {
                    continue;
                }
                s += std::max(0.0, rho + naive_d(px, i, py, i) - naive_d(px, a, py, b));
            }
        }
    }
    return s / (2.0 * static_cast<double>(n * n));
}

// Numeric check of a loss over sets: f(x, y) with analytic gradients.
template <class F>
double set_grad_error(const std::vector<Mat>& x, const std::vector<Mat>& y, const std::vector<Mat>& dx,
                      const std::vector<Mat>& dy, F f) {
    const std::vector<double> fx = flatten(x);
    const std::vector<double> fy = flatten(y);
    const double ex = finite_diff_check(
        [&](std::span<const double> v) { return f(unflatten(v, x), y); }, fx, flatten(dx));
    const double ey = finite_diff_check(
        [&](std::span<const double> v) { return f(x, unflatten(v, y)); }, fy, flatten(dy));
    return std::max(ex, ey);
}

template <class F>
double flat_grad_error(const Mat& x, const Mat& y, const Mat& dx, const Mat& dy, F f) {
    auto rebuild = [](const Mat& like, std::span<const double> v) {
        return Mat(like.rows(), like.cols(), std::vector<double>(v.begin(), v.end()));
    };
    const double ex = finite_diff_check([&](std::span<const double> v) { return f(rebuild(x, v), y); },
                                        x.span(), dx.span());
    const double ey = finite_diff_check([&](std::span<const double> v) { return f(x, rebuild(y, v)); },
                                        y.span(), dy.span());
    return std::max(ex, ey);
}

std::vector<Mat> singles(std::initializer_list<std::initializer_list<double>> rows) {
    std::vector<Mat> out;
    for (auto r : rows) {
        out.push_back(Mat{r});
    }
    return out;
}

} // namespace

TEST_CASE("mil_loss: hand-computed values", "[losses]") {
    const auto zx = singles({{1, 0}, {1, 0}});
    const auto zy = singles({{0, 1}, {1, 0}});
    // x-anchored: (0,1) -> 0.2 + 1 - 0 = 1.2 and (1,0) -> 0.2 + 0 - 1 < 0.
    CHECK(mil_loss(zx, zy, 0.2, false).value == Approx(0.3).epsilon(1e-14));
    // y-anchored adds 0.2 + 1 - 1 and 0.2 + 0 - 0.
    CHECK(mil_loss(zx, zy, 0.2, true).value == Approx(0.2).epsilon(1e-14));

    const auto ex = singles({{1, 0}, {0, 1}});
    CHECK(mil_loss(ex, ex, 0.2).value == 0.0);
    CHECK(mil_loss(ex, ex, 0.0).value == 0.0);
    // Margin 1 exactly equals the gap: hinge sits at 0 and no gradient flows.
    const PairLoss at_kink = mil_loss(ex, ex, 1.0);
    CHECK(at_kink.value == 0.0);
    for (double v : flatten(at_kink.dx)) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("mil_loss: the closest pair of each set decides", "[losses]") {
    // Set 0 contains a perfect match in its second row; its other row is far from everything.
    const std::vector<Mat> zx{Mat{{-1, -1}, {1, 0}}, Mat{{0, 1}, {0, 1}}};
    const std::vector<Mat> zy{Mat{{1, 0}, {1, 0}}, Mat{{0, 1}, {-1, 0}}};
    const PairLoss l = mil_loss(zx, zy, 0.2, false);
    CHECK(l.value == Approx(mil_oracle(zx, zy, 0.2, false)).margin(1e-15));
    CHECK(l.value == 0.0);
}

TEST_CASE("mil_loss: ties go to the first row pair", "[losses]") {
    // Identical rows tie; only row 0 of each set may receive gradient.
    const std::vector<Mat> zx{Mat{{1, 0.2}, {1, 0.2}}, Mat{{0.3, 1}, {0.3, 1}}};
    const std::vector<Mat> zy{Mat{{0.9, 0.5}, {0.9, 0.5}}, Mat{{1, 0.1}, {1, 0.1}}};
    const PairLoss l = mil_loss(zx, zy, 0.5);
    REQUIRE(l.value > 0.0);
    for (const auto* sets : {&l.dx, &l.dy}) {
        for (const Mat& g : *sets) {
            CHECK(norm2(g.row(0)) > 0.0);
            CHECK(norm2(g.row(1)) == 0.0);
        }
    }
}

TEST_CASE("mil_loss: enumeration oracle and properties", "[losses][property]") {
    std::mt19937_64 rng(31);
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t n = 2 + trial % 5;
        const std::size_t k = 1 + trial % 4;
        const auto zx = random_sets(n, k, 3, rng);
        const auto zy = random_sets(n, k, 3, rng);
        for (bool sym : {false, true}) {
            const double v = mil_loss(zx, zy, 0.2, sym).value;
            CHECK(v == Approx(mil_oracle(zx, zy, 0.2, sym)).margin(1e-12));
            CHECK(v >= 0.0);
            // Each hinge is at most rho + 2.
            CHECK(v <= 2.2);
        }
        // Scale invariance of the cosine distance.
        auto scaled = zx;
        for (Mat& m : scaled) {
            scale_inplace(m.span(), 3.5);
        }
        CHECK(mil_loss(scaled, zy, 0.2).value == Approx(mil_loss(zx, zy, 0.2).value).margin(1e-12));
        // Loss is nondecreasing in the margin.
        CHECK(mil_loss(zx, zy, 0.4).value >= mil_loss(zx, zy, 0.2).value);
    }
}

TEST_CASE("mil_loss: errors", "[losses]") {
    std::mt19937_64 rng(32);
    CHECK_THROWS_AS(mil_loss(random_sets(1, 2, 3, rng), random_sets(1, 2, 3, rng), 0.2), NoNegativesError);
    CHECK_THROWS_AS(mil_loss(random_sets(3, 2, 3, rng), random_sets(2, 2, 3, rng), 0.2), DimensionError);
    CHECK_THROWS_AS(mil_loss(singles({{0, 0}, {1, 0}}), singles({{1, 0}, {0, 1}}), 0.2), DomainError);
}

TEST_CASE("diversity_loss", "[losses]") {
    SECTION("identical rows") {
        const std::vector<Mat> u{Mat{{1, 0}, {1, 0}}};
        // G - I = [[0, 1], [1, 0]]: norm sqrt(2), / K^2 per modality, two modalities.
        CHECK(diversity_loss(u, u).value == Approx(std::sqrt(2.0) / 2.0).epsilon(1e-14));
    }
    SECTION("orthonormal rows give zero") {
        const std::vector<Mat> u{Mat{{2, 0, 0}, {0, 0.5, 0}, {0, 0, 7}}};
        CHECK(diversity_loss(u, u).value == 0.0);
    }
    SECTION("scale invariant per row and bounded") {
        std::mt19937_64 rng(33);
        for (int trial = 0; trial < 100; ++trial) {
            const auto ux = random_sets(3, 4, 5, rng);
            const auto uy = random_sets(3, 4, 5, rng);
            const double v = diversity_loss(ux, uy).value;
            auto s = ux;
            for (Mat& m : s) {
                for (std::size_t r = 0; r < m.rows(); ++r) {
                    for (double& e : m.row(r)) e *= 0.5 + static_cast<double>(r);
                }
            }
            CHECK(diversity_loss(s, uy).value == Approx(v).margin(1e-12));
            CHECK(v >= 0.0);
            // ||G - I||_F <= sqrt(K^2 - K) for unit rows.
            CHECK(v <= 2.0 * std::sqrt(12.0) / 16.0 + 1e-12);
        }
    }
}

TEST_CASE("median_heuristic_gamma", "[losses]") {
    // Points 0, 1, 3, 5: squared distances 1, 9, 25, 4, 16, 4; lower median 4.
    const std::vector<Mat> zx{Mat{{0}, {1}}};
    const std::vector<Mat> zy{Mat{{3}, {5}}};
    CHECK(median_heuristic_gamma(zx, zy) == 1.0 / 8.0);
}

TEST_CASE("mmd_loss", "[losses]") {
    std::mt19937_64 rng(34);
    SECTION("identical sets give exactly zero") {
        for (int trial = 0; trial < 50; ++trial) {
            const auto z = random_sets(4, 3, 5, rng);
            CHECK(mmd_loss(z, z, 0.7).value == 0.0);
        }
    }
    SECTION("singletons") {
        const std::vector<Mat> x{Mat{{1, 2}}};
        const std::vector<Mat> y{Mat{{0, 0.5}}};
        const double g = 0.3;
        CHECK(mmd_loss(x, y, g).value == Approx(2.0 - 2.0 * std::exp(-g * 3.25)).epsilon(1e-14));
    }
    SECTION("symmetric, nonnegative, matches the double loop") {
        for (int trial = 0; trial < 100; ++trial) {
            const auto zx = random_sets(1 + trial % 4, 1 + trial % 3, 4, rng);
            const auto zy = random_sets(1 + trial % 4, 1 + trial % 3, 4, rng);
            const double g = 0.05 + 0.01 * trial;
            const double v = mmd_loss(zx, zy, g).value;
            CHECK(v >= 0.0);
            CHECK(v == Approx(mmd_loss(zy, zx, g).value).margin(1e-12));
            CHECK(v == Approx(mmd_oracle(zx, zy, g)).margin(1e-12));
        }
    }
    SECTION("bad gamma") {
        const auto z = random_sets(2, 2, 2, rng);
        CHECK_THROWS_AS(mmd_loss(z, z, 0.0), std::invalid_argument);
    }
}

TEST_CASE("devise_loss", "[losses]") {
    std::mt19937_64 rng(35);
    SECTION("triple-loop oracle") {
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t n = 2 + trial % 6;
            const Mat px = random_mat(n, 4, rng);
            const Mat py = random_mat(n, 4, rng);
            CHECK(devise_loss(px, py, 0.2).value == Approx(devise_oracle(px, py, 0.2)).margin(1e-12));
        }
    }
    SECTION("K = 1 MIL gives the same value") {
        for (int trial = 0; trial < 100; ++trial) {
            const std::size_t n = 2 + trial % 6;
            const auto zx = random_sets(n, 1, 4, rng);
            const auto zy = random_sets(n, 1, 4, rng);
            CHECK(devise_loss(concat_rows(zx), concat_rows(zy), 0.2).value == mil_loss(zx, zy, 0.2).value);
        }
    }
    SECTION("needs negatives") {
        CHECK_THROWS_AS(devise_loss(random_mat(1, 3, rng), random_mat(1, 3, rng), 0.2), NoNegativesError);
    }
}

TEST_CASE("vsepp_loss", "[losses]") {
    SECTION("a single outlier term is the whole loss") {
        // Matched pairs on the axes; x0 leans toward y1, which makes one hinge positive:
        // 0.2 + (1 - 1/sqrt 2) - (1 - 1/sqrt 2) = 0.2. Its z-score is sqrt(23) > 3.
        Mat px{{1, 1, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
        Mat py{{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}};
        const VseppLoss l = vsepp_loss(px, py, 0.2);
        CHECK_FALSE(l.fallback);
        CHECK(l.selected == 1);
        CHECK(l.value == Approx(0.2).epsilon(1e-12));
        CHECK(norm2(l.dx.row(0)) > 0.0);
        CHECK(norm2(l.dy.row(1)) > 0.0);
        CHECK(norm2(l.dx.row(2)) == 0.0);
        CHECK(norm2(l.dy.row(3)) == 0.0);
    }
    SECTION("all hinges zero falls back") {
        const Mat e = Mat::identity(4);
        const VseppLoss l = vsepp_loss(e, e, 0.2);
        CHECK(l.fallback);
        CHECK(l.value == 0.0);
        CHECK(l.selected == 0);
    }
    SECTION("four equal outliers are not extreme enough") {
        // x3 and y3 collide with pair 0: four positive terms of 0.2, z = sqrt(5) < 3.
        Mat px{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 0}};
        const VseppLoss l = vsepp_loss(px, px, 0.2);
        CHECK(l.fallback);
        // Hardest negative per anchor and direction: anchors 0 and 3 both directions.
        CHECK(l.selected == 4);
        CHECK(l.value == Approx(4 * 0.2 / 4.0).epsilon(1e-12));
    }
    SECTION("needs four pairs") {
        CHECK_THROWS_AS(vsepp_loss(Mat::identity(3), Mat::identity(3), 0.2), NoNegativesError);
    }
}

TEST_CASE("combined_loss", "[losses]") {
    std::mt19937_64 rng(36);
    BatchEmbeddings b{random_sets(4, 3, 5, rng), random_sets(4, 3, 5, rng), random_sets(4, 3, 5, rng),
                      random_sets(4, 3, 5, rng)};

    SECTION("absolute weights") {
        LossWeights w;
        w.lambda1 = 0.3;
        w.lambda2 = 0.7;
        const LossBundle l = combined_loss(b, w);
        CHECK(l.total == Approx(l.mil + 0.3 * l.div + 0.7 * l.mmd).epsilon(1e-14));
        CHECK(l.gamma == median_heuristic_gamma(b.zx, b.zy));
    }
    SECTION("relative weights scale each term to the ranking loss") {
        LossWeights w;
        w.lambda1 = 0.1;
        w.lambda2 = 0.25;
        w.relative_mode = true;
        const LossBundle l = combined_loss(b, w);
        REQUIRE(l.div > 0.0);
        REQUIRE(l.mmd > 0.0);
        CHECK(l.lambda1_eff * l.div == Approx(0.1 * l.mil).epsilon(1e-12));
        CHECK(l.total == Approx(l.mil * 1.35).epsilon(1e-12));
    }
    SECTION("zero weights reduce to the ranking loss") {
        LossWeights w;
        w.lambda1 = 0.0;
        w.lambda2 = 0.0;
        const LossBundle l = combined_loss(b, w);
        CHECK(l.total == mil_loss(b.zx, b.zy, w.rho).value);
        for (double v : flatten(l.d_ux)) {
            CHECK(v == 0.0);
        }
    }
    SECTION("concat objective") {
        LossWeights w;
        w.lambda1 = 0.0;
        w.lambda2 = 0.0;
        const LossBundle l = combined_loss(b, w, RankingObjective::concat_triplet);
        CHECK(l.mil == devise_loss(concat_rows(b.zx), concat_rows(b.zy), w.rho).value);
    }
}

TEST_CASE("loss gradients match finite differences", "[losses][gradient]") {
    std::mt19937_64 rng(37);
    const std::size_t n = 4, k = 3, h = 5;
    for (int trial = 0; trial < 5; ++trial) {
        const auto zx = random_sets(n, k, h, rng);
        const auto zy = random_sets(n, k, h, rng);
        // Large margin keeps most hinges active and away from their kinks.
        for (bool sym : {false, true}) {
            const PairLoss l = mil_loss(zx, zy, 0.8, sym);
            CHECK(set_grad_error(zx, zy, l.dx, l.dy, [&](const auto& a, const auto& b) {
                      return mil_loss(a, b, 0.8, sym).value;
                  }) < 1e-4);
        }
        const PairLoss dv = diversity_loss(zx, zy);
        CHECK(set_grad_error(zx, zy, dv.dx, dv.dy,
                             [](const auto& a, const auto& b) { return diversity_loss(a, b).value; }) < 1e-4);
        const PairLoss mm = mmd_loss(zx, zy, 0.2);
        CHECK(set_grad_error(zx, zy, mm.dx, mm.dy,
                             [](const auto& a, const auto& b) { return mmd_loss(a, b, 0.2).value; }) < 1e-4);

        const Mat px = concat_rows(zx), py = concat_rows(zy);
        const FlatLoss dl = devise_loss(px, py, 0.8);
        CHECK(flat_grad_error(px, py, dl.dx, dl.dy,
                              [](const Mat& a, const Mat& b) { return devise_loss(a, b, 0.8).value; }) < 1e-4);
        const VseppLoss vl = vsepp_loss(px, py, 0.8);
        CHECK(flat_grad_error(px, py, vl.dx, vl.dy,
                              [](const Mat& a, const Mat& b) { return vsepp_loss(a, b, 0.8).value; }) < 1e-4);
    }

    SECTION("combined objective with fixed gamma") {
        BatchEmbeddings b{random_sets(n, k, h, rng), random_sets(n, k, h, rng), random_sets(n, k, h, rng),
                          random_sets(n, k, h, rng)};
        LossWeights w;
        w.rho = 0.8;
        w.lambda1 = 0.3;
        w.lambda2 = 0.5;
        w.gamma = 0.15;
        w.gamma_median_heuristic = false;
        const LossBundle l = combined_loss(b, w);
        CHECK(set_grad_error(b.zx, b.zy, l.d_zx, l.d_zy, [&](const auto& a, const auto& c) {
                  BatchEmbeddings t = b;
                  t.zx = a;
                  t.zy = c;
                  return combined_loss(t, w).total;
              }) < 1e-4);
        CHECK(set_grad_error(b.ux, b.uy, l.d_ux, l.d_uy, [&](const auto& a, const auto& c) {
                  BatchEmbeddings t = b;
                  t.ux = a;
                  t.uy = c;
                  return combined_loss(t, w).total;
              }) < 1e-4);
    }
}
