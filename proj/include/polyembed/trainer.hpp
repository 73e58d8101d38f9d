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

#ifndef POLYEMBED_TRAINER_HPP
#define POLYEMBED_TRAINER_HPP

#include "polyembed/dataio.hpp"
#include "polyembed/losses.hpp"
#include "polyembed/numerics.hpp"
#include "polyembed/pienet.hpp"
#include "polyembed/retrieval.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

/**
 * @file trainer.hpp
 *
 * @brief Two-network model, AMSGrad optimizer and the mini-batch training loop.
 */

namespace polyembed {

enum class Ablation { full, no_residual, no_mil };

inline const char* to_string(Ablation a) {
    switch (a) {
    case Ablation::full: return "full";
    case Ablation::no_residual: return "no_residual";
    case Ablation::no_mil: return "no_mil";
    }
    return "?";
}

/// One network per modality; they share no weights.
struct Model {
    PieNet x;
    PieNet y;
    RankingObjective objective = RankingObjective::mil;

    bool operator==(const Model& o) const {
        return x.config == o.x.config && x.params == o.x.params && y.config == o.y.config &&
               y.params == o.y.params && objective == o.objective;
    }
};

struct ModelGrads {
    PieNetParams x;
    PieNetParams y;
};

/// Calls `f(name, span)` over every parameter tensor of both networks in a fixed order.
template <class M, class F>
void for_each_model_tensor(M& x_params, M& y_params, F&& f) {
    for_each_tensor(x_params, [&](const std::string& n, auto s) { f("x." + n, s); });
    for_each_tensor(y_params, [&](const std::string& n, auto s) { f("y." + n, s); });
}

// ---------------------------------------------------------------------------
// AMSGrad

class NonFiniteGradient : public std::runtime_error {
public:
    NonFiniteGradient(const std::string& param, std::size_t step)
        : std::runtime_error("non-finite gradient for parameter " + param + " at step " +
                             std::to_string(step)),
          param_(param), step_(step) {}

    const std::string& param() const { return param_; }
    std::size_t step() const { return step_; }

private:
    std::string param_;
    std::size_t step_;
};

struct Moments {
    std::vector<double> m;
    std::vector<double> v;
    std::vector<double> v_hat;
};

/**
 * @brief AMSGrad state. No bias correction:
 *
 *     m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2;  v_hat <- max(v_hat, v)
 *     theta <- theta - lr m / (sqrt(v_hat) + eps)
 */
struct OptimState {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    std::vector<Moments> moments; ///< one per tensor, created lazily
};

/// Updates one tensor. `state.step` is not advanced here.
inline void amsgrad_update(std::span<double> theta, std::span<const double> grad, Moments& mo,
                           const OptimState& state) {
    if (mo.m.empty()) {
        mo.m.assign(theta.size(), 0.0);
        mo.v.assign(theta.size(), 0.0);
        mo.v_hat.assign(theta.size(), 0.0);
    }
    if (mo.m.size() != theta.size() || grad.size() != theta.size()) {
        throw DimensionError("amsgrad_update: parameter/gradient/state shapes differ");
    }
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad[i];
        mo.m[i] = state.beta1 * mo.m[i] + (1.0 - state.beta1) * g;
        mo.v[i] = state.beta2 * mo.v[i] + (1.0 - state.beta2) * g * g;
        mo.v_hat[i] = std::max(mo.v_hat[i], mo.v[i]);
        theta[i] -= state.lr * mo.m[i] / (std::sqrt(mo.v_hat[i]) + state.eps);
    }
}

/// Single flat parameter vector.
inline void amsgrad_step(std::span<double> theta, std::span<const double> grad, OptimState& state) {
    if (!all_finite(grad)) {
        throw NonFiniteGradient("theta", state.step + 1);
    }
    state.moments.resize(1);
    amsgrad_update(theta, grad, state.moments[0], state);
    ++state.step;
}

inline void amsgrad_step(Model& model, const ModelGrads& grads, OptimState& state) {
    std::vector<std::pair<std::string, std::span<const double>>> gs;
    for_each_model_tensor(grads.x, grads.y,
                          [&](const std::string& n, std::span<const double> s) { gs.emplace_back(n, s); });
    for (const auto& [name, g] : gs) {
        if (!all_finite(g)) {
            throw NonFiniteGradient(name, state.step + 1);
        }
    }
    state.moments.resize(gs.size());
    std::size_t t = 0;
    for_each_model_tensor(model.x.params, model.y.params,
                          [&](const std::string&, std::span<double> theta) {
                              amsgrad_update(theta, gs[t].second, state.moments[t], state);
                              ++t;
                          });
    ++state.step;
}

// ---------------------------------------------------------------------------
// Configuration

struct TrainConfig {
    std::size_t epochs = 20;
    std::size_t batch_size = 128;
    double lr = 2e-4;
    std::size_t lr_halving_patience = 5;
    std::size_t max_halvings = 4;
    /// Relative improvement of the validation loss that resets the patience counter.
    double stagnation_tol = 1e-4;
    double clip_norm = 10.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    Ablation ablation = Ablation::full;
    LossWeights weights;
    std::size_t K = 4;
    std::size_t H = 16;
    std::size_t A = 0; ///< 0: D/2

    void validate() const {
        if (epochs < 1) {
            throw ConfigError("epochs", "must be >= 1");
        }
        if (batch_size < 2) {
            throw ConfigError("batch_size", "must be >= 2 (the ranking loss needs negatives)");
        }
        if (!(lr > 0.0)) {
            throw ConfigError("lr", "must be > 0");
        }
        if (K < 1 || H < 1) {
            throw ConfigError("K", "K and H must be >= 1");
        }
        weights.validate();
    }
};

inline Model make_model(const TrainConfig& cfg, std::size_t dx, std::size_t dy) {
    cfg.validate();
    const FusionMode fusion =
        cfg.ablation == Ablation::no_residual ? FusionMode::concat : FusionMode::residual;
    std::seed_seq seq{cfg.seed, std::uint64_t{0x5eed}};
    std::mt19937_64 rng(seq);
    Model m;
    m.x = PieNet::create({cfg.K, dx, cfg.H, cfg.A, fusion}, rng);
    m.y = PieNet::create({cfg.K, dy, cfg.H, cfg.A, fusion}, rng);
    m.objective =
        cfg.ablation == Ablation::no_mil ? RankingObjective::concat_triplet : RankingObjective::mil;
    return m;
}

// ---------------------------------------------------------------------------
// Encoding

/// Retrieval embeddings for one side: K x H, or 1 x KH for the concatenated objective.
inline Mat retrieval_embedding(const Mat& z, RankingObjective objective) {
    if (objective == RankingObjective::concat_triplet) {
        return Mat(1, z.size(), z.data());
    }
    return z;
}

inline std::vector<Mat> encode(const PieNet& net, const std::vector<FeatureRecord>& records,
                               const std::vector<std::size_t>& indices,
                               RankingObjective objective) {
    std::vector<Mat> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) {
        out.push_back(retrieval_embedding(forward(net, records[i].features).z, objective));
    }
    return out;
}

inline BidirectionalReport evaluate_model(const Model& model, const PairedDataset& ds,
                                          const std::vector<std::size_t>& indices) {
    std::vector<std::string> ids;
    ids.reserve(indices.size());
    for (std::size_t i : indices) {
        ids.push_back(ds.x[i].id);
    }
    return evaluate_bidirectional(ids, encode(model.x, ds.x, indices, model.objective),
                                  encode(model.y, ds.y, indices, model.objective));
}

// ---------------------------------------------------------------------------
// Training

struct BatchResult {
    LossBundle loss;
    ModelGrads grads;
};

/// Forward both networks over one batch, evaluate the objective, back-propagate.
inline BatchResult batch_step(const Model& model, const PairedDataset& ds,
                              std::span<const std::size_t> batch, const LossWeights& weights,
                              bool with_grads = true) {
    std::vector<PieNetOutput> ox;
    std::vector<PieNetOutput> oy;
    ox.reserve(batch.size());
    oy.reserve(batch.size());
    BatchEmbeddings be;
    for (std::size_t i : batch) {
        ox.push_back(forward(model.x, ds.x[i].features));
        oy.push_back(forward(model.y, ds.y[i].features));
        be.zx.push_back(ox.back().z);
        be.zy.push_back(oy.back().z);
        be.ux.push_back(ox.back().upsilon);
        be.uy.push_back(oy.back().upsilon);
    }
    BatchResult r{combined_loss(be, weights, model.objective),
                  {PieNetParams::zeros(model.x.config), PieNetParams::zeros(model.y.config)}};
    if (!with_grads) {
        return r;
    }
    auto accumulate = [](PieNetParams& acc, const PieNetParams& g) {
        std::vector<std::span<const double>> src;
        for_each_tensor(g, [&](const std::string&, std::span<const double> s) { src.push_back(s); });
        std::size_t t = 0;
        for_each_tensor(acc, [&](const std::string&, std::span<double> s) {
            for (std::size_t i = 0; i < s.size(); ++i) {
                s[i] += src[t][i];
            }
            ++t;
        });
    };
    for (std::size_t b = 0; b < batch.size(); ++b) {
        accumulate(r.grads.x, backward(model.x, ox[b], r.loss.d_zx[b], r.loss.d_ux[b]).params);
        accumulate(r.grads.y, backward(model.y, oy[b], r.loss.d_zy[b], r.loss.d_uy[b]).params);
    }
    return r;
}

/// Scales the gradients so their global l2 norm is at most `max_norm`; returns the prior norm.
inline double clip_global_norm(ModelGrads& g, double max_norm) {
    double sq = 0.0;
    for_each_model_tensor(g.x, g.y, [&](const std::string&, std::span<double> s) {
        for (double v : s) {
            sq += v * v;
        }
    });
    const double norm = std::sqrt(sq);
    if (norm > max_norm && max_norm > 0.0) {
        const double c = max_norm / norm;
        for_each_model_tensor(g.x, g.y,
                              [&](const std::string&, std::span<double> s) { scale_inplace(s, c); });
    }
    return norm;
}

struct EpochRecord {
    std::size_t epoch = 0;
    std::size_t steps = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double train_mil = 0.0;
    double train_div = 0.0;
    double train_mmd = 0.0;
    double val_loss = 0.0;
    double val_rsum = 0.0;
    double val_r1 = 0.0;
};

struct TrainResult {
    Model model; ///< checkpoint with the best validation rsum
    OptimState optimizer;
    std::vector<EpochRecord> log;
    std::size_t best_epoch = 0;
    double best_val_rsum = -1.0;
    bool diverged = false;
    std::string status = "ok";
};

inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order,
                                                          std::size_t batch_size) {
    std::vector<std::vector<std::size_t>> batches;
    for (std::size_t s = 0; s < order.size(); s += batch_size) {
        const std::size_t e = std::min(order.size(), s + batch_size);
        if (e - s < 2) {
            // A single leftover pair has no negatives; it is dropped for this epoch.
            break;
        }
        batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                             order.begin() + static_cast<std::ptrdiff_t>(e));
    }
    return batches;
}

inline double validation_loss(const Model& model, const PairedDataset& ds,
                              const std::vector<std::size_t>& val, const TrainConfig& cfg) {
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& b : make_batches(val, cfg.batch_size)) {
        total += batch_step(model, ds, b, cfg.weights, false).loss.total * static_cast<double>(b.size());
        count += b.size();
    }
    return count > 0 ? total / static_cast<double>(count) : 0.0;
}

/**
 * @brief Mini-batch training with validation-based model selection.
 *
 * Each epoch: seeded shuffle, batches, forward/backward, global-norm clipping, AMSGrad.
 * After each epoch the validation loss and rsum are computed; the learning rate halves when the
 * validation loss has not improved (relatively, by stagnation_tol) for lr_halving_patience
 * epochs. The returned model is the epoch checkpoint with the highest validation rsum.
 */
inline TrainResult train(const PairedDataset& ds, const TrainConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
    cfg.validate();
    ds.validate();
    const auto train_idx = ds.indices(Split::train);
    const auto val_idx = ds.indices(Split::val);
    if (train_idx.size() < 2) {
        throw ConfigError("train", "training split needs at least 2 pairs");
    }
    if (val_idx.empty()) {
        throw ConfigError("val", "validation split is empty");
    }

    Model model = make_model(cfg, ds.x[train_idx.front()].features.cols(),
                             ds.y[train_idx.front()].features.cols());
    OptimState opt;
    opt.lr = cfg.lr;
    opt.beta1 = cfg.beta1;
    opt.beta2 = cfg.beta2;
    opt.eps = cfg.adam_eps;

    TrainResult result;
    result.model = model;
    result.optimizer = opt;

    std::mt19937_64 rng(cfg.seed);
    double best_val_loss = std::numeric_limits<double>::infinity();
    std::size_t stale = 0;
    std::size_t halvings = 0;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        std::shuffle(order.begin(), order.end(), rng);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = opt.lr;
        std::size_t seen = 0;
        try {
            for (const auto& b : make_batches(order, cfg.batch_size)) {
                BatchResult br = batch_step(model, ds, b, cfg.weights);
                if (!std::isfinite(br.loss.total)) {
                    throw std::runtime_error("non-finite training loss at step " +
                                             std::to_string(opt.step + 1));
                }
                clip_global_norm(br.grads, cfg.clip_norm);
                amsgrad_step(model, br.grads, opt);
                const double w = static_cast<double>(b.size());
                rec.train_loss += br.loss.total * w;
                rec.train_mil += br.loss.mil * w;
                rec.train_div += br.loss.div * w;
                rec.train_mmd += br.loss.mmd * w;
                seen += b.size();
                ++rec.steps;
            }
        } catch (const std::runtime_error& e) {
            result.diverged = true;
            result.status = std::string("diverged in epoch ") + std::to_string(epoch) + ": " + e.what();
            break;
        }
        const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(seen, 1));
        rec.train_loss *= inv;
        rec.train_mil *= inv;
        rec.train_div *= inv;
        rec.train_mmd *= inv;
        rec.val_loss = validation_loss(model, ds, val_idx, cfg);
        const BidirectionalReport rep = evaluate_model(model, ds, val_idx);
        rec.val_rsum = rep.rsum;
        rec.val_r1 = rep.mean_r1();
        result.log.push_back(rec);
        if (on_epoch) {
            on_epoch(rec);
        }

        if (rec.val_rsum > result.best_val_rsum) {
            result.best_val_rsum = rec.val_rsum;
            result.best_epoch = epoch;
            result.model = model;
            result.optimizer = opt;
        }
        if (rec.val_loss < best_val_loss * (1.0 - cfg.stagnation_tol)) {
            best_val_loss = rec.val_loss;
            stale = 0;
        } else if (++stale >= cfg.lr_halving_patience && halvings < cfg.max_halvings) {
            opt.lr *= 0.5;
            ++halvings;
            stale = 0;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Grid search

struct Grid {
    std::vector<std::size_t> K;
    std::vector<std::size_t> H;
    std::vector<double> rho;
    std::vector<double> lambda1;
    std::vector<double> lambda2;
};

struct GridRow {
    TrainConfig config;
    double val_rsum = 0.0;
    std::size_t best_epoch = 0;
};

struct GridResult {
    std::vector<GridRow> rows;
    std::size_t best = 0;

    const TrainConfig& best_config() const { return rows.at(best).config; }
};

/// Trains every combination (empty axes keep the base value); picks the highest val rsum.
inline GridResult grid_search(const PairedDataset& ds, const TrainConfig& base, const Grid& grid) {
    auto axis = [](const auto& values, auto fallback) {
        using T = typename std::decay_t<decltype(values)>::value_type;
        return values.empty() ? std::vector<T>{static_cast<T>(fallback)} : values;
    };
    const auto ks = axis(grid.K, base.K);
    const auto hs = axis(grid.H, base.H);
    const auto rhos = axis(grid.rho, base.weights.rho);
    const auto l1s = axis(grid.lambda1, base.weights.lambda1);
    const auto l2s = axis(grid.lambda2, base.weights.lambda2);
    GridResult out;
    for (std::size_t k : ks) {
        for (std::size_t h : hs) {
            for (double rho : rhos) {
                for (double l1 : l1s) {
                    for (double l2 : l2s) {
                        TrainConfig c = base;
                        c.K = k;
                        c.H = h;
                        c.weights.rho = rho;
                        c.weights.lambda1 = l1;
                        c.weights.lambda2 = l2;
                        const TrainResult r = train(ds, c);
                        out.rows.push_back({c, r.best_val_rsum, r.best_epoch});
                        if (out.rows.back().val_rsum > out.rows[out.best].val_rsum) {
                            out.best = out.rows.size() - 1;
                        }
                    }
                }
            }
        }
    }
    return out;
}

} // namespace polyembed

#endif
