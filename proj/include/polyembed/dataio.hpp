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

#ifndef POLYEMBED_DATAIO_HPP
#define POLYEMBED_DATAIO_HPP

#include "polyembed/numerics.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

/**
 * @file dataio.hpp
 *
 * @brief PVSF feature container, synthetic paired data and dataset splits.
 *
 * PVSF layout (all integers little-endian):
 *
 *     "PVSF"            4 bytes magic
 *     version           u32 (currently 1)
 *     N                 u64 record count
 *     N x record:
 *         id_len        u32
 *         id            id_len bytes
 *         B             u32 rows
 *         D             u32 cols
 *         values        B*D IEEE-754 binary64, row-major
 *
 * The file must end exactly after the last record.
 */

namespace polyembed {

inline constexpr std::uint32_t kPvsfVersion = 1;

/// Malformed PVSF payload. `record()` is -1 for header errors.
class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::uint64_t offset, std::int64_t record)
        : std::runtime_error("PVSF parse error at byte " + std::to_string(offset) +
                             (record >= 0 ? " (record " + std::to_string(record) + ")" : "") +
                             ": " + what),
          offset_(offset), record_(record) {}

    std::uint64_t offset() const { return offset_; }
    std::int64_t record() const { return record_; }

private:
    std::uint64_t offset_;
    std::int64_t record_;
};

/// Invalid generator or split settings; `field()` names the offending setting.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string field, const std::string& what)
        : std::invalid_argument(field + ": " + what), field_(std::move(field)) {}

    const std::string& field() const { return field_; }

private:
    std::string field_;
};

struct FeatureRecord {
    std::string id;
    Mat features; // B x D

    bool operator==(const FeatureRecord&) const = default;
};

namespace detail {

class ByteWriter {
public:
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) {
            bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
        }
    }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void raw(std::string_view s) { bytes_.insert(bytes_.end(), s.begin(), s.end()); }

    std::vector<std::uint8_t> take() { return std::move(bytes_); }

private:
    std::vector<std::uint8_t> bytes_;
};

class ByteReader {
public:
    explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint64_t offset() const { return pos_; }
    std::uint64_t remaining() const { return bytes_.size() - pos_; }
    void set_record(std::int64_t r) { record_ = r; }

    [[noreturn]] void fail(const std::string& what) const { throw FormatError(what, pos_, record_); }

    void need(std::uint64_t n, const char* what) const {
        if (remaining() < n) {
            fail(std::string("truncated payload reading ") + what + " (need " +
                 std::to_string(n) + " bytes, " + std::to_string(remaining()) + " left)");
        }
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        }
        pos_ += 8;
        return v;
    }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    std::string str(std::uint64_t n, const char* what) {
        need(n, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
        pos_ += n;
        return s;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::uint64_t pos_ = 0;
    std::int64_t record_ = -1;
};

} // namespace detail

inline std::vector<std::uint8_t> encode_features(const std::vector<FeatureRecord>& records) {
    detail::ByteWriter w;
    w.raw("PVSF");
    w.u32(kPvsfVersion);
    w.u64(records.size());
    for (const FeatureRecord& r : records) {
        if (r.id.size() > UINT32_MAX || r.features.rows() > UINT32_MAX ||
            r.features.cols() > UINT32_MAX) {
            throw std::length_error("encode_features: record too large for PVSF: " + r.id);
        }
        w.u32(static_cast<std::uint32_t>(r.id.size()));
        w.raw(r.id);
        w.u32(static_cast<std::uint32_t>(r.features.rows()));
        w.u32(static_cast<std::uint32_t>(r.features.cols()));
        for (double v : r.features.data()) {
            w.f64(v);
        }
    }
    return w.take();
}

/**
 * @brief Parses a PVSF payload.
 *
 * Every size field is checked against the bytes that remain before anything is allocated;
 * non-finite values and trailing bytes are rejected.
 */
inline std::vector<FeatureRecord> decode_features(std::span<const std::uint8_t> bytes) {
    detail::ByteReader r(bytes);
    if (r.str(4, "magic") != "PVSF") {
        throw FormatError("bad magic (expected \"PVSF\")", 0, -1);
    }
    const std::uint32_t version = r.u32("version");
    if (version != kPvsfVersion) {
        throw FormatError("unsupported version " + std::to_string(version), 4, -1);
    }
    const std::uint64_t n = r.u64("record count");
    // Smallest record: id_len + B + D with empty id and payload.
    constexpr std::uint64_t kMinRecord = 12;
    if (n > r.remaining() / kMinRecord) {
        r.fail("record count " + std::to_string(n) + " exceeds what the payload can hold");
    }
    std::vector<FeatureRecord> out;
    out.reserve(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        r.set_record(static_cast<std::int64_t>(i));
        FeatureRecord rec;
        const std::uint32_t id_len = r.u32("id length");
        rec.id = r.str(id_len, "id");
        const std::uint64_t rows = r.u32("row count");
        const std::uint64_t cols = r.u32("column count");
        // rows, cols < 2^32, so the product cannot overflow 64 bits; the byte count can.
        const std::uint64_t count = rows * cols;
        if (count > r.remaining() / 8) {
            r.fail("declared " + std::to_string(rows) + "x" + std::to_string(cols) +
                   " matrix exceeds remaining payload");
        }
        std::vector<double> values(count);
        for (std::uint64_t v = 0; v < count; ++v) {
            values[v] = r.f64("value");
            if (!std::isfinite(values[v])) {
                r.fail("non-finite value at element " + std::to_string(v));
            }
        }
        rec.features = Mat(rows, cols, std::move(values));
        out.push_back(std::move(rec));
    }
    r.set_record(-1);
    if (r.remaining() != 0) {
        r.fail(std::to_string(r.remaining()) + " trailing bytes after last record");
    }
    return out;
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw std::runtime_error("cannot open " + path.string() + " for writing");
    }
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) {
        throw std::runtime_error("write failed: " + path.string());
    }
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_features(const std::filesystem::path& path,
                           const std::vector<FeatureRecord>& records) {
    write_bytes(path, encode_features(records));
}

inline std::vector<FeatureRecord> read_features(const std::filesystem::path& path) {
    return decode_features(read_bytes(path));
}

// ---------------------------------------------------------------------------
// Synthetic polysemous pairs

struct SynthConfig {
    std::size_t concepts = 10;  ///< C
    std::size_t dim = 16;       ///< D, shared by both sides
    std::size_t senses_min = 2;
    std::size_t senses_max = 3;
    std::size_t shared_min = 1; ///< senses common to x and y
    std::size_t shared_max = 1;
    std::size_t distractors = 0; ///< extra rows per side from concepts neither side uses
    double sigma = 0.1;          ///< per-side observation noise
    /// Per-pair perturbation of each sense, common to both sides of a shared sense. It is what
    /// identifies a particular pair beyond its concept labels.
    double detail = 0.35;
    std::size_t pairs = 3000;
    std::uint64_t seed = 1;

    void validate() const {
        if (dim < 1) {
            throw ConfigError("dim", "must be >= 1");
        }
        if (senses_min < 1 || senses_min > senses_max) {
            throw ConfigError("senses_min", "need 1 <= senses_min <= senses_max");
        }
        if (senses_max > concepts) {
            throw ConfigError("senses_max", "exceeds the concept count");
        }
        if (shared_min < 1 || shared_min > shared_max) {
            throw ConfigError("shared_min", "need 1 <= shared_min <= shared_max");
        }
        if (shared_max > senses_min) {
            throw ConfigError("shared_max", "infeasible overlap: more shared senses than "
                                            "senses_min");
        }
        if (2 * senses_max - shared_min > concepts) {
            throw ConfigError("concepts", "too few concepts for disjoint unshared senses");
        }
        if (distractors > 0 && 2 * senses_max - shared_min >= concepts) {
            throw ConfigError("distractors", "no unused concept left to draw distractors from");
        }
        if (!(sigma >= 0.0)) {
            throw ConfigError("sigma", "must be >= 0");
        }
        if (!(detail >= 0.0)) {
            throw ConfigError("detail", "must be >= 0");
        }
    }
};

struct SenseAnnotation {
    std::vector<std::size_t> x_senses;
    std::vector<std::size_t> y_senses;
    std::vector<std::size_t> shared;
    std::vector<std::size_t> x_distractors;
    std::vector<std::size_t> y_distractors;

    bool operator==(const SenseAnnotation&) const = default;
};

enum class Split : std::uint8_t { train, val, test };

inline const char* to_string(Split s) {
    switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    }
    return "?";
}

struct PairedDataset {
    std::vector<FeatureRecord> x;
    std::vector<FeatureRecord> y;
    std::vector<SenseAnnotation> senses; ///< empty for non-synthetic data
    std::vector<Split> split;            ///< empty until split() is applied

    std::size_t size() const { return x.size(); }

    std::vector<std::size_t> indices(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < split.size(); ++i) {
            if (split[i] == s) {
                out.push_back(i);
            }
        }
        return out;
    }

    void validate() const {
        if (x.size() != y.size()) {
            throw std::invalid_argument("PairedDataset: sides have different instance counts");
        }
        if (!split.empty() && split.size() != x.size()) {
            throw std::invalid_argument("PairedDataset: split labels do not cover every pair");
        }
    }
};

inline std::string pair_id(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "p%07zu", i);
    return buf;
}

/// Expected |shared| / |x senses u y senses| under the generator's sampling scheme.
inline double expected_overlap_fraction(const SynthConfig& cfg) {
    // shared_max <= senses_min, so the sense counts never depend on h.
    double total = 0.0;
    for (std::size_t h = cfg.shared_min; h <= cfg.shared_max; ++h) {
        for (std::size_t sx = cfg.senses_min; sx <= cfg.senses_max; ++sx) {
            for (std::size_t sy = cfg.senses_min; sy <= cfg.senses_max; ++sy) {
                total += static_cast<double>(h) / static_cast<double>(sx + sy - h);
            }
        }
    }
    const double span = static_cast<double>(cfg.senses_max - cfg.senses_min + 1);
    return total / (static_cast<double>(cfg.shared_max - cfg.shared_min + 1) * span * span);
}

/**
 * @brief Draws paired instances with partially overlapping sense sets.
 *
 * C unit-norm concept prototypes are drawn first. For each pair: h shared senses, then
 * s_x - h and s_y - h further senses for each side, all distinct. Every sense row is
 * prototype + pair-specific detail + per-side noise; shared senses use the same detail draw on
 * both sides. Distractor rows come from concepts in neither sense set. Rows are shuffled.
 */
inline PairedDataset generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(cfg.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);

    Mat prototypes(cfg.concepts, cfg.dim);
    for (std::size_t c = 0; c < cfg.concepts; ++c) {
        auto row = prototypes.row(c);
        for (double& v : row) {
            v = gauss(rng);
        }
        const double n = std::max(norm2(row), kNormEps);
        scale_inplace(row, 1.0 / n);
    }

    auto uniform_count = [&rng](std::size_t lo, std::size_t hi) {
        return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    };
    auto draw_detail = [&]() {
        std::vector<double> d(cfg.dim);
        for (double& v : d) {
            v = cfg.detail * gauss(rng);
        }
        return d;
    };
    auto make_row = [&](std::size_t concept_id, const std::vector<double>& det,
                        std::span<double> out) {
        for (std::size_t t = 0; t < cfg.dim; ++t) {
            out[t] = prototypes(concept_id, t) + det[t] + cfg.sigma * gauss(rng);
        }
    };

    PairedDataset ds;
    ds.x.reserve(cfg.pairs);
    ds.y.reserve(cfg.pairs);
    ds.senses.reserve(cfg.pairs);
    std::vector<std::size_t> pool(cfg.concepts);
    for (std::size_t i = 0; i < cfg.pairs; ++i) {
        const std::size_t h = uniform_count(cfg.shared_min, cfg.shared_max);
        const std::size_t sx = uniform_count(std::max(cfg.senses_min, h), cfg.senses_max);
        const std::size_t sy = uniform_count(std::max(cfg.senses_min, h), cfg.senses_max);
        std::iota(pool.begin(), pool.end(), 0);
        std::shuffle(pool.begin(), pool.end(), rng);

        SenseAnnotation ann;
        auto it = pool.begin();
        ann.shared.assign(it, it + static_cast<std::ptrdiff_t>(h));
        it += static_cast<std::ptrdiff_t>(h);
        ann.x_senses = ann.shared;
        ann.x_senses.insert(ann.x_senses.end(), it, it + static_cast<std::ptrdiff_t>(sx - h));
        it += static_cast<std::ptrdiff_t>(sx - h);
        ann.y_senses = ann.shared;
        ann.y_senses.insert(ann.y_senses.end(), it, it + static_cast<std::ptrdiff_t>(sy - h));
        it += static_cast<std::ptrdiff_t>(sy - h);
        const std::vector<std::size_t> unused(it, pool.end());
        for (std::size_t d = 0; d < cfg.distractors; ++d) {
            ann.x_distractors.push_back(unused[uniform_count(0, unused.size() - 1)]);
        }
        for (std::size_t d = 0; d < cfg.distractors; ++d) {
            ann.y_distractors.push_back(unused[uniform_count(0, unused.size() - 1)]);
        }

        std::vector<std::vector<double>> shared_detail;
        for (std::size_t s = 0; s < h; ++s) {
            shared_detail.push_back(draw_detail());
        }
        auto build = [&](const std::vector<std::size_t>& senses,
                         const std::vector<std::size_t>& distract) {
            Mat f(senses.size() + distract.size(), cfg.dim);
            std::size_t r = 0;
            for (std::size_t s = 0; s < senses.size(); ++s, ++r) {
                make_row(senses[s], s < h ? shared_detail[s] : draw_detail(), f.row(r));
            }
            for (std::size_t concept_id : distract) {
                make_row(concept_id, draw_detail(), f.row(r++));
            }
            // Row order carries no information.
            std::vector<std::size_t> perm(f.rows());
            std::iota(perm.begin(), perm.end(), 0);
            std::shuffle(perm.begin(), perm.end(), rng);
            Mat shuffled(f.rows(), f.cols());
            for (std::size_t q = 0; q < perm.size(); ++q) {
                std::copy(f.row(perm[q]).begin(), f.row(perm[q]).end(), shuffled.row(q).begin());
            }
            return shuffled;
        };
        ds.x.push_back({pair_id(i), build(ann.x_senses, ann.x_distractors)});
        ds.y.push_back({pair_id(i), build(ann.y_senses, ann.y_distractors)});
        ds.senses.push_back(std::move(ann));
    }
    return ds;
}

struct SplitFractions {
    double train = 2.0 / 3.0;
    double val = 1.0 / 6.0;
    double test = 1.0 / 6.0;
};

/**
 * @brief Seeded permutation followed by contiguous train / val / test assignment.
 *
 * Sizes are round(f * N) for train and val; test takes the rest. A split with a positive
 * fraction that ends up empty is an error.
 */
inline PairedDataset split(PairedDataset ds, const SplitFractions& f, std::uint64_t seed) {
    ds.validate();
    if (f.train < 0 || f.val < 0 || f.test < 0 || std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
        throw ConfigError("split", "fractions must be non-negative and sum to 1");
    }
    const std::size_t n = ds.size();
    const auto n_train = static_cast<std::size_t>(std::llround(f.train * static_cast<double>(n)));
    const auto n_val = std::min(
        n - std::min(n, n_train),
        static_cast<std::size_t>(std::llround(f.val * static_cast<double>(n))));
    const std::size_t n_tr = std::min(n, n_train);
    const std::size_t n_test = n - n_tr - n_val;
    if ((f.train > 0 && n_tr == 0) || (f.val > 0 && n_val == 0) || (f.test > 0 && n_test == 0)) {
        throw ConfigError("split", "a split with a positive fraction is empty");
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    ds.split.assign(n, Split::test);
    for (std::size_t r = 0; r < n; ++r) {
        ds.split[perm[r]] = r < n_tr ? Split::train : (r < n_tr + n_val ? Split::val : Split::test);
    }
    return ds;
}

} // namespace polyembed

#endif
