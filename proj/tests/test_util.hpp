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

// Shared helpers for the test suites: random tensors and naive reference implementations.
// Nothing here calls into the code paths it is used to check.

#ifndef POLYEMBED_TESTS_TEST_UTIL_HPP
#define POLYEMBED_TESTS_TEST_UTIL_HPP

#include "polyembed/numerics.hpp"

#include <cmath>
#include <random>
#include <vector>

namespace polyembed::testing {

inline Mat random_mat(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Mat m(rows, cols);
    for (double& v : m.data()) {
        v = g(rng);
    }
    return m;
}

inline std::vector<Mat> random_sets(std::size_t n, std::size_t k, std::size_t h,
                                    std::mt19937_64& rng, double scale = 1.0) {
    std::vector<Mat> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(random_mat(k, h, rng, scale));
    }
    return out;
}

/// Independent triple loop, accumulated in k-order per cell.
inline Mat naive_matmul(const Mat& a, const Mat& b) {
    Mat c(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < b.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols(); ++k) {
                acc += a.data()[i * a.cols() + k] * b.data()[k * b.cols() + j];
            }
            c.data()[i * c.cols() + j] = acc;
        }
    }
    return c;
}

/// 1 - cos, written out without the library helpers.
inline double naive_cosine_distance(const double* a, const double* b, std::size_t n) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    return 1.0 - ab / (std::sqrt(aa) * std::sqrt(bb));
}

/// Flattens a list of matrices into one parameter vector and back.
inline std::vector<double> flatten(const std::vector<Mat>& ms) {
    std::vector<double> out;
    for (const Mat& m : ms) {
        out.insert(out.end(), m.data().begin(), m.data().end());
    }
    return out;
}

inline std::vector<Mat> unflatten(std::span<const double> flat, const std::vector<Mat>& like) {
    std::vector<Mat> out;
    std::size_t off = 0;
    for (const Mat& m : like) {
        out.emplace_back(m.rows(), m.cols(),
                         std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(off),
                                             flat.begin() + static_cast<std::ptrdiff_t>(off + m.size())));
        off += m.size();
    }
    return out;
}

} // namespace polyembed::testing

#endif
