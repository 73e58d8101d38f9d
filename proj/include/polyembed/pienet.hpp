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

#ifndef POLYEMBED_PIENET_HPP
#define POLYEMBED_PIENET_HPP

#include "polyembed/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <random>
#include <string>
#include <type_traits>
#include <vector>

/**
 * @file pienet.hpp
 *
 * @brief One-to-many instance embedding network.
 *
 * An instance is a B x D matrix of local features (regions, frames or words). The network
 * produces K embeddings of dimension H by combining a global feature (mean-pool + affine)
 * with K attention-pooled, sigmoid-projected local features:
 *
 *     alpha    = softmax_rows(w2 tanh(w1 psi^T))           K x B
 *     upsilon  = sigmoid((alpha psi) w3 + b3)               K x H
 *     z        = LayerNorm(repeat_K(phi) + upsilon)         K x H
 *
 * The "concat" fusion replaces the residual sum with LayerNorm([phi, upsilon_k] wc + bc).
 */

namespace polyembed {

using LocalFeatureSet = Mat; ///< B x D
using EmbeddingSet = Mat;    ///< K x H

class EmptyInstanceError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class FusionMode { residual, concat };

inline const char* to_string(FusionMode m) {
    return m == FusionMode::residual ? "residual" : "concat";
}

struct PieNetConfig {
    std::size_t K = 1;
    std::size_t D = 1;
    std::size_t H = 1;
    /// Attention hidden size; 0 selects D/2 (at least 1).
    std::size_t A = 0;
    FusionMode fusion = FusionMode::residual;

    std::size_t attention_dim() const { return A != 0 ? A : std::max<std::size_t>(1, D / 2); }

    void validate() const {
        if (K < 1 || D < 1 || H < 1) {
            throw std::invalid_argument("PieNetConfig: K, D and H must all be >= 1");
        }
    }

    bool operator==(const PieNetConfig&) const = default;
};

/**
 * @brief Every trainable tensor of one network.
 *
 * `wc`/`bc` are only populated for FusionMode::concat.
 */
struct PieNetParams {
    Mat w1;      // A x D
    Mat w2;      // K x A
    Mat w3;      // D x H
    Vec b3;      // H
    Vec ln_gain; // H
    Vec ln_bias; // H
    Mat wg;      // D x H
    Vec bg;      // H
    Mat wc;      // 2H x H
    Vec bc;      // H

    /// All-zero tensors of the right shapes (gradient accumulators).
    static PieNetParams zeros(const PieNetConfig& cfg) {
        cfg.validate();
        const std::size_t a = cfg.attention_dim();
        PieNetParams p;
        p.w1 = Mat(a, cfg.D);
        p.w2 = Mat(cfg.K, a);
        p.w3 = Mat(cfg.D, cfg.H);
        p.b3 = Vec(cfg.H);
        p.ln_gain = Vec(cfg.H);
        p.ln_bias = Vec(cfg.H);
        p.wg = Mat(cfg.D, cfg.H);
        p.bg = Vec(cfg.H);
        if (cfg.fusion == FusionMode::concat) {
            p.wc = Mat(2 * cfg.H, cfg.H);
            p.bc = Vec(cfg.H);
        }
        return p;
    }

    /// Uniform(-s, s) with s = sqrt(6 / (fan_in + fan_out)) for matrices; zero biases;
    /// unit layer-norm gain.
    template <class Rng>
    static PieNetParams init(const PieNetConfig& cfg, Rng& rng) {
        PieNetParams p = zeros(cfg);
        auto fill = [&rng](Mat& m, std::size_t fan_in, std::size_t fan_out) {
            const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
            std::uniform_real_distribution<double> dist(-s, s);
            for (double& v : m.data()) {
                v = dist(rng);
            }
        };
        const std::size_t a = cfg.attention_dim();
        fill(p.w1, cfg.D, a);
        fill(p.w2, a, cfg.K);
        fill(p.w3, cfg.D, cfg.H);
        fill(p.wg, cfg.D, cfg.H);
        if (cfg.fusion == FusionMode::concat) {
            fill(p.wc, 2 * cfg.H, cfg.H);
        }
        std::fill(p.ln_gain.data.begin(), p.ln_gain.data.end(), 1.0);
        return p;
    }

    bool operator==(const PieNetParams&) const = default;
};

/// Calls `f(name, span)` for every non-empty tensor, in a fixed order.
template <class Params, class F>
    requires std::same_as<std::remove_const_t<Params>, PieNetParams>
void for_each_tensor(Params& p, F&& f) {
    f("w1", p.w1.span());
    f("w2", p.w2.span());
    f("w3", p.w3.span());
    f("b3", p.b3.span());
    f("ln_gain", p.ln_gain.span());
    f("ln_bias", p.ln_bias.span());
    f("wg", p.wg.span());
    f("bg", p.bg.span());
    if (!p.wc.empty()) {
        f("wc", p.wc.span());
        f("bc", p.bc.span());
    }
}

struct PieNet {
    PieNetConfig config;
    PieNetParams params;

    template <class Rng>
    static PieNet create(const PieNetConfig& cfg, Rng& rng) {
        return PieNet{cfg, PieNetParams::init(cfg, rng)};
    }
};

struct PieNetCache {
    LocalFeatureSet psi;
    Mat mean_psi;  // 1 x D
    Mat hidden;    // tanh(w1 psi^T), A x B
    Mat pooled;    // alpha psi, K x D
    Mat fused_in;  // concat fusion only: [phi, upsilon], K x 2H
    LayerNormCache ln;
};

struct PieNetOutput {
    EmbeddingSet z;  // K x H
    Mat upsilon;     // K x H
    Mat alpha;       // K x B
    Vec phi;         // H
    PieNetCache cache;
};

struct PieNetGrads {
    PieNetParams params;
    LocalFeatureSet dpsi;
};

namespace detail {

inline void check_instance(const LocalFeatureSet& psi, const PieNetConfig& cfg) {
    if (psi.rows() == 0) {
        throw EmptyInstanceError("instance has no local features (B == 0)");
    }
    if (psi.cols() != cfg.D) {
        throw DimensionError("local feature dimension " + std::to_string(psi.cols()) +
                             " does not match network D=" + std::to_string(cfg.D));
    }
}

/// Column means. Each column is summed in sorted order, so any row permutation of `m` gives a
/// bit-identical result.
inline Mat mean_rows(const Mat& m) {
    Mat out(1, m.cols());
    std::vector<double> col(m.rows());
    for (std::size_t c = 0; c < m.cols(); ++c) {
        for (std::size_t r = 0; r < m.rows(); ++r) {
            col[r] = m(r, c);
        }
        std::sort(col.begin(), col.end());
        double s = 0.0;
        for (double v : col) {
            s += v;
        }
        out(0, c) = s / static_cast<double>(m.rows());
    }
    return out;
}

inline Mat add_row_bias(Mat m, const Vec& b) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            m(r, c) += b[c];
        }
    }
    return m;
}

inline Vec column_sums(const Mat& m) {
    Vec out(m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            out[c] += m(r, c);
        }
    }
    return out;
}

} // namespace detail

/// phi = mean_rows(psi) wg + bg
inline Vec global_encode(const LocalFeatureSet& psi, const PieNetParams& params) {
    if (psi.rows() == 0) {
        throw EmptyInstanceError("global_encode: instance has no local features (B == 0)");
    }
    const Mat proj = matmul(detail::mean_rows(psi), params.wg);
    Vec phi(proj.cols());
    for (std::size_t c = 0; c < proj.cols(); ++c) {
        phi[c] = proj(0, c) + params.bg[c];
    }
    return phi;
}

/// alpha = softmax_rows(w2 tanh(w1 psi^T)); K x B.
inline Mat compute_attention(const LocalFeatureSet& psi, const PieNetParams& params,
                             Mat* hidden_out = nullptr) {
    Mat hidden = tanh_elem(matmul_nt(params.w1, psi));
    Mat alpha = row_softmax(matmul(params.w2, hidden));
    if (hidden_out != nullptr) {
        *hidden_out = std::move(hidden);
    }
    return alpha;
}

/// upsilon = sigmoid((alpha psi) w3 + b3); K x H.
inline Mat locally_guided(const Mat& alpha, const LocalFeatureSet& psi, const PieNetParams& params,
                          Mat* pooled_out = nullptr) {
    Mat pooled = matmul(alpha, psi);
    Mat upsilon = sigmoid_elem(detail::add_row_bias(matmul(pooled, params.w3), params.b3));
    if (pooled_out != nullptr) {
        *pooled_out = std::move(pooled);
    }
    return upsilon;
}

/**
 * @brief Combines the global feature with the K locally-guided features.
 *
 * Residual fusion: z = LayerNorm(repeat_K(phi) + upsilon). With upsilon == 0 every row of z is
 * the same, i.e. the network degenerates to a single (injective) embedding.
 */
inline Mat fuse(const Vec& phi, const Mat& upsilon, const PieNetParams& params,
                FusionMode mode = FusionMode::residual, PieNetCache* cache = nullptr) {
    const std::size_t k = upsilon.rows();
    const std::size_t h = upsilon.cols();
    if (phi.size() != h) {
        throw DimensionError("fuse: phi length does not match upsilon width");
    }
    Mat pre;
    if (mode == FusionMode::residual) {
        pre = upsilon;
        for (std::size_t r = 0; r < k; ++r) {
            for (std::size_t c = 0; c < h; ++c) {
                pre(r, c) += phi[c];
            }
        }
    } else {
        if (params.wc.rows() != 2 * h || params.wc.cols() != h) {
            throw DimensionError("fuse: concat fusion needs a 2H x H projection");
        }
        Mat joined(k, 2 * h);
        for (std::size_t r = 0; r < k; ++r) {
            for (std::size_t c = 0; c < h; ++c) {
                joined(r, c) = phi[c];
                joined(r, h + c) = upsilon(r, c);
            }
        }
        pre = detail::add_row_bias(matmul(joined, params.wc), params.bc);
        if (cache != nullptr) {
            cache->fused_in = std::move(joined);
        }
    }
    return layer_norm_rows(pre, params.ln_gain, params.ln_bias, kLayerNormEps,
                           cache != nullptr ? &cache->ln : nullptr);
}

inline PieNetOutput forward(const PieNet& net, const LocalFeatureSet& psi) {
    const PieNetParams& p = net.params;
    detail::check_instance(psi, net.config);
    PieNetOutput out;
    out.cache.psi = psi;
    out.cache.mean_psi = detail::mean_rows(psi);
    out.phi = global_encode(psi, p);
    out.alpha = compute_attention(psi, p, &out.cache.hidden);
    out.upsilon = locally_guided(out.alpha, psi, p, &out.cache.pooled);
    out.z = fuse(out.phi, out.upsilon, p, net.config.fusion, &out.cache);
    return out;
}

/**
 * @brief Hand-derived backward pass.
 *
 * `dz` is the gradient with respect to the final embeddings; `d_upsilon` is an extra gradient
 * injected directly at the locally-guided features (the diversity loss), which therefore never
 * reaches the global branch (wg, bg).
 */
inline PieNetGrads backward(const PieNet& net, const PieNetOutput& out, const Mat& dz,
                            const Mat& d_upsilon) {
    const PieNetConfig& cfg = net.config;
    const PieNetParams& p = net.params;
    const PieNetCache& c = out.cache;
    const std::size_t k = out.z.rows();
    const std::size_t h = out.z.cols();
    detail::require_same_shape(out.z, dz, "backward(dz)");
    detail::require_same_shape(out.upsilon, d_upsilon, "backward(d_upsilon)");
    if (c.psi.rows() != out.alpha.cols() || c.ln.normalized.rows() != k) {
        throw DimensionError("backward: cache does not match this forward output");
    }

    PieNetGrads g{PieNetParams::zeros(cfg), Mat(c.psi.rows(), c.psi.cols())};

    LayerNormGrads ln = layer_norm_rows_backward(c.ln, p.ln_gain, dz);
    g.params.ln_gain = std::move(ln.dgain);
    g.params.ln_bias = std::move(ln.dbias);

    Vec dphi(h);
    Mat dups = d_upsilon;
    if (cfg.fusion == FusionMode::residual) {
        dphi = detail::column_sums(ln.dx);
        add_inplace(dups, ln.dx);
    } else {
        auto [djoined, dwc] = matmul_backward(c.fused_in, p.wc, ln.dx);
        g.params.wc = std::move(dwc);
        g.params.bc = detail::column_sums(ln.dx);
        for (std::size_t r = 0; r < k; ++r) {
            for (std::size_t col = 0; col < h; ++col) {
                dphi[col] += djoined(r, col);
                dups(r, col) += djoined(r, h + col);
            }
        }
    }

    // Global branch: phi = mean(psi) wg + bg.
    Mat dphi_row(1, h, dphi.data);
    g.params.wg = matmul_tn(c.mean_psi, dphi_row);
    g.params.bg = dphi;
    const Mat dmean = matmul_nt(dphi_row, p.wg); // 1 x D
    const double inv_b = 1.0 / static_cast<double>(c.psi.rows());
    for (std::size_t r = 0; r < c.psi.rows(); ++r) {
        for (std::size_t col = 0; col < c.psi.cols(); ++col) {
            g.dpsi(r, col) += dmean(0, col) * inv_b;
        }
    }

    // Locally-guided branch.
    const Mat dq = sigmoid_backward(out.upsilon, dups);
    auto [dpooled, dw3] = matmul_backward(c.pooled, p.w3, dq);
    g.params.w3 = std::move(dw3);
    g.params.b3 = detail::column_sums(dq);
    auto [dalpha, dpsi_pool] = matmul_backward(out.alpha, c.psi, dpooled);
    add_inplace(g.dpsi, dpsi_pool);

    // Attention: alpha = softmax(w2 hidden), hidden = tanh(w1 psi^T).
    const Mat dlogits = row_softmax_backward(out.alpha, dalpha);
    auto [dw2, dhidden] = matmul_backward(p.w2, c.hidden, dlogits);
    g.params.w2 = std::move(dw2);
    const Mat dpre = tanh_backward(c.hidden, dhidden); // A x B
    g.params.w1 = matmul(dpre, c.psi);
    add_inplace(g.dpsi, matmul_tn(dpre, p.w1));
    return g;
}

} // namespace polyembed

#endif
