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

#ifndef POLYEMBED_NUMERICS_HPP
#define POLYEMBED_NUMERICS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

/**
 * @file numerics.hpp
 *
 * @brief Dense row-major matrices and the forward/vector-Jacobian rules used by the
 * embedding network and the losses.
 *
 * Every reduction runs in a fixed left-to-right order, so repeated evaluations on one
 * platform are bit-identical.
 */

namespace polyembed {

class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class DomainError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kNormEps = 1e-12;

/**
 * @brief Real vector of fixed length.
 */
struct Vec {
    std::vector<double> data;

    Vec() = default;
    explicit Vec(std::size_t n, double value = 0.0) : data(n, value) {}
    Vec(std::initializer_list<double> values) : data(values) {}
    explicit Vec(std::vector<double> values) : data(std::move(values)) {}

    std::size_t size() const { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }
    std::span<double> span() { return data; }
    std::span<const double> span() const { return data; }

    bool operator==(const Vec&) const = default;
};

/**
 * @brief Real matrix stored row-major in double precision.
 */
class Mat {
public:
    Mat() = default;
    Mat(std::size_t rows, std::size_t cols, double value = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, value) {}
    Mat(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("Mat: data length does not match rows*cols");
        }
    }
    Mat(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ == 0 ? 0 : rows.begin()->size();
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) {
                throw DimensionError("Mat: ragged initializer");
            }
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Mat identity(std::size_t n) {
        Mat m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m(i, i) = 1.0;
        }
        return m;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }
    std::span<double> span() { return data_; }
    std::span<const double> span() const { return data_; }

    bool operator==(const Mat&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

namespace detail {

inline std::string shape_str(const Mat& m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

inline void require_same_shape(const Mat& a, const Mat& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a) + " vs " +
                             shape_str(b));
    }
}

} // namespace detail

inline bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw DimensionError("dot: length mismatch");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline Mat transpose(const Mat& m) {
    Mat t(m.cols(), m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) {
            t(c, r) = m(r, c);
        }
    }
    return t;
}

/// a += b
inline void add_inplace(Mat& a, const Mat& b) {
    detail::require_same_shape(a, b, "add_inplace");
    for (std::size_t i = 0; i < a.size(); ++i) {
        a.data()[i] += b.data()[i];
    }
}

inline void add_inplace(Vec& a, const Vec& b) {
    if (a.size() != b.size()) {
        throw DimensionError("add_inplace: length mismatch");
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        a[i] += b[i];
    }
}

inline void scale_inplace(std::span<double> a, double s) {
    for (double& v : a) {
        v *= s;
    }
}

// ---------------------------------------------------------------------------
// Matrix product

/**
 * @brief Standard matrix product `a * b`.
 *
 * Each output cell is accumulated over the inner index in increasing order.
 */
inline Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: " + detail::shape_str(a) + " * " + detail::shape_str(b));
    }
    Mat out(a.rows(), b.cols());
    const std::size_t n = a.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) {
                s += a(i, k) * b(k, j);
            }
            out(i, j) = s;
        }
    }
    return out;
}

/// `a * b^T` without materializing the transpose.
inline Mat matmul_nt(const Mat& a, const Mat& b) {
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: " + detail::shape_str(a) + " * " +
                             detail::shape_str(b) + "^T");
    }
    Mat out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto ar = a.row(i);
        for (std::size_t j = 0; j < b.rows(); ++j) {
            out(i, j) = dot(ar, b.row(j));
        }
    }
    return out;
}

/// `a^T * b` without materializing the transpose.
inline Mat matmul_tn(const Mat& a, const Mat& b) {
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: " + detail::shape_str(a) + "^T * " +
                             detail::shape_str(b));
    }
    Mat out(a.cols(), b.cols());
    for (std::size_t i = 0; i < a.cols(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.rows(); ++k) {
                s += a(k, i) * b(k, j);
            }
            out(i, j) = s;
        }
    }
    return out;
}

/// Vector-Jacobian product of `c = a * b`: returns {dA, dB}.
inline std::pair<Mat, Mat> matmul_backward(const Mat& a, const Mat& b, const Mat& dc) {
    if (dc.rows() != a.rows() || dc.cols() != b.cols()) {
        throw DimensionError("matmul_backward: upstream gradient has wrong shape");
    }
    return {matmul_nt(dc, b), matmul_tn(a, dc)};
}

// ---------------------------------------------------------------------------
// Softmax

inline Mat row_softmax(const Mat& m) {
    Mat out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto in = m.row(r);
        auto o = out.row(r);
        if (in.empty()) {
            continue;
        }
        const double mx = *std::max_element(in.begin(), in.end());
        double s = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            o[c] = std::exp(in[c] - mx);
            s += o[c];
        }
        for (double& v : o) {
            v /= s;
        }
    }
    return out;
}

/// dL = y * (dy - <dy, y>) per row, where y is the softmax output.
inline Mat row_softmax_backward(const Mat& y, const Mat& dy) {
    detail::require_same_shape(y, dy, "row_softmax_backward");
    Mat dx(y.rows(), y.cols());
    for (std::size_t r = 0; r < y.rows(); ++r) {
        const double inner = dot(y.row(r), dy.row(r));
        for (std::size_t c = 0; c < y.cols(); ++c) {
            dx(r, c) = y(r, c) * (dy(r, c) - inner);
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Elementwise activations

inline double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Mat tanh_elem(const Mat& m) {
    Mat out(m.rows(), m.cols());
    std::transform(m.data().begin(), m.data().end(), out.data().begin(),
                   [](double v) { return std::tanh(v); });
    return out;
}

inline Mat sigmoid_elem(const Mat& m) {
    Mat out(m.rows(), m.cols());
    std::transform(m.data().begin(), m.data().end(), out.data().begin(),
                   [](double v) { return sigmoid(v); });
    return out;
}

/// Takes the tanh output y; dx = dy * (1 - y^2).
inline Mat tanh_backward(const Mat& y, const Mat& dy) {
    detail::require_same_shape(y, dy, "tanh_backward");
    Mat dx(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double t = y.data()[i];
        dx.data()[i] = dy.data()[i] * (1.0 - t * t);
    }
    return dx;
}

/// Takes the sigmoid output y; dx = dy * y * (1 - y).
inline Mat sigmoid_backward(const Mat& y, const Mat& dy) {
    detail::require_same_shape(y, dy, "sigmoid_backward");
    Mat dx(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double s = y.data()[i];
        dx.data()[i] = dy.data()[i] * s * (1.0 - s);
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Layer normalization

/**
 * @brief Saved state of a row-wise layer normalization, needed by the backward pass.
 */
struct LayerNormCache {
    Mat normalized;           // (x - mean) / sqrt(var + eps), before the affine map
    std::vector<double> inv_std;
};

inline Mat layer_norm_rows(const Mat& m, const Vec& gain, const Vec& bias, double eps,
                           LayerNormCache* cache = nullptr) {
    if (gain.size() != m.cols() || bias.size() != m.cols()) {
        throw DimensionError("layer_norm_rows: gain/bias length must equal column count");
    }
    if (!(eps > 0.0)) {
        throw DomainError("layer_norm_rows: eps must be positive");
    }
    const std::size_t n = m.cols();
    Mat out(m.rows(), n);
    Mat normalized(m.rows(), n);
    std::vector<double> inv_std(m.rows());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const auto x = m.row(r);
        double mean = 0.0;
        for (double v : x) {
            mean += v;
        }
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (double v : x) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<double>(n);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < n; ++c) {
            const double xh = (x[c] - mean) * is;
            normalized(r, c) = xh;
            out(r, c) = xh * gain[c] + bias[c];
        }
    }
    if (cache != nullptr) {
        cache->normalized = std::move(normalized);
        cache->inv_std = std::move(inv_std);
    }
    return out;
}

struct LayerNormGrads {
    Mat dx;
    Vec dgain;
    Vec dbias;
};

inline LayerNormGrads layer_norm_rows_backward(const LayerNormCache& cache, const Vec& gain,
                                               const Mat& dy) {
    const Mat& xh = cache.normalized;
    detail::require_same_shape(xh, dy, "layer_norm_rows_backward");
    const std::size_t n = xh.cols();
    LayerNormGrads g{Mat(xh.rows(), n), Vec(n), Vec(n)};
    std::vector<double> dxh(n);
    for (std::size_t r = 0; r < xh.rows(); ++r) {
        double mean_dxh = 0.0;
        double mean_dxh_xh = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            g.dgain[c] += dy(r, c) * xh(r, c);
            g.dbias[c] += dy(r, c);
            dxh[c] = dy(r, c) * gain[c];
            mean_dxh += dxh[c];
            mean_dxh_xh += dxh[c] * xh(r, c);
        }
        mean_dxh /= static_cast<double>(n);
        mean_dxh_xh /= static_cast<double>(n);
        for (std::size_t c = 0; c < n; ++c) {
            g.dx(r, c) = cache.inv_std[r] * (dxh[c] - mean_dxh - xh(r, c) * mean_dxh_xh);
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Row normalization

/// Each row divided by max(||row||, eps).
inline Mat l2_normalize_rows(const Mat& m, double eps = kNormEps) {
    Mat out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        const double n = std::max(norm2(m.row(r)), eps);
        auto o = out.row(r);
        const auto x = m.row(r);
        for (std::size_t c = 0; c < m.cols(); ++c) {
            o[c] = x[c] / n;
        }
    }
    return out;
}

inline Mat l2_normalize_rows_backward(const Mat& x, const Mat& dy, double eps = kNormEps) {
    detail::require_same_shape(x, dy, "l2_normalize_rows_backward");
    Mat dx(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double nrm = norm2(x.row(r));
        if (nrm <= eps) {
            // Below the guard the map is linear: y = x / eps.
            for (std::size_t c = 0; c < x.cols(); ++c) {
                dx(r, c) = dy(r, c) / eps;
            }
            continue;
        }
        const double proj = dot(x.row(r), dy.row(r)) / (nrm * nrm);
        for (std::size_t c = 0; c < x.cols(); ++c) {
            dx(r, c) = (dy(r, c) - x(r, c) * proj) / nrm;
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Cosine distance

/**
 * @brief Cosine distance `1 - a.b / (|a| |b|)`, in [0, 2].
 *
 * Smaller means closer. Throws DomainError when either input has norm below kNormEps.
 */
inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw DimensionError("cosine_distance: length mismatch");
    }
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na < kNormEps || nb < kNormEps) {
        throw DomainError("cosine_distance: near-zero-norm input");
    }
    return 1.0 - dot(a, b) / (na * nb);
}

inline double cosine_distance(const Vec& a, const Vec& b) {
    return cosine_distance(a.span(), b.span());
}

/// Gradients of cosine_distance with respect to a and b, scaled by `upstream`, added into da/db.
inline void cosine_distance_backward(std::span<const double> a, std::span<const double> b,
                                     double upstream, std::span<double> da,
                                     std::span<double> db) {
    const double na = norm2(a);
    const double nb = norm2(b);
    if (na < kNormEps || nb < kNormEps) {
        throw DomainError("cosine_distance_backward: near-zero-norm input");
    }
    const double sim = dot(a, b) / (na * nb);
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double ah = a[i] / na;
        const double bh = b[i] / nb;
        da[i] -= upstream * (bh - sim * ah) / na;
        db[i] -= upstream * (ah - sim * bh) / nb;
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

/**
 * @brief Compares an analytic gradient against central finite differences.
 *
 * Returns the largest componentwise relative error |a - n| / max(1e-8, |a| + |n|).
 * `f` is evaluated at theta +- h e_i; theta itself is restored before returning.
 */
inline double finite_diff_check(const std::function<double(std::span<const double>)>& f,
                                std::span<const double> theta,
                                std::span<const double> analytic_grad, double h = 1e-5) {
    if (theta.size() != analytic_grad.size()) {
        throw DimensionError("finite_diff_check: gradient length mismatch");
    }
    std::vector<double> probe(theta.begin(), theta.end());
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = f(probe);
        probe[i] = orig - h;
        const double fm = f(probe);
        probe[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            throw DomainError("finite_diff_check: objective is not finite at component " +
                              std::to_string(i));
        }
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic_grad[i];
        const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace polyembed

#endif
