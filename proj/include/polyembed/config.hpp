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

#ifndef POLYEMBED_CONFIG_HPP
#define POLYEMBED_CONFIG_HPP

#include "polyembed/dataio.hpp"
#include "polyembed/trainer.hpp"

#include "json.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <type_traits>
#include <vector>

// Run configuration documents and model checkpoints.
//
// A RunConfig is one JSON object with the sections "synth", "split", "train" and "loss".
// Missing keys keep their defaults; unknown sections or keys are errors.

namespace polyembed {

using Json = nlohmann::ordered_json;

struct RunConfig {
    SynthConfig synth;
    SplitFractions split;
    std::uint64_t split_seed = 0;
    TrainConfig train;

    void validate() const {
        synth.validate();
        train.validate();
    }
};

namespace detail {

// Reads keys from one section and remembers which were consumed.
class SectionReader {
public:
    SectionReader(const Json& doc, std::string section) : section_(std::move(section)) {
        if (doc.contains(section_)) {
            obj_ = &doc.at(section_);
            if (!obj_->is_object()) {
                throw ConfigError(section_, "must be an object");
            }
        }
    }

    template <class T>
        requires(std::is_unsigned_v<T> && !std::is_same_v<T, bool>)
    void read(const char* key, T& out) {
        if (const Json* v = take(key)) {
            if (!v->is_number_integer() ||
                (!v->is_number_unsigned() && v->get<std::int64_t>() < 0)) {
                throw ConfigError(field(key), "expected a non-negative integer");
            }
            out = v->get<T>();
        }
    }
    void read(const char* key, double& out) {
        if (const Json* v = take(key)) {
            if (!v->is_number()) {
                throw ConfigError(field(key), "expected a number");
            }
            out = v->get<double>();
        }
    }
    void read(const char* key, bool& out) {
        if (const Json* v = take(key)) {
            if (!v->is_boolean()) {
                throw ConfigError(field(key), "expected true or false");
            }
            out = v->get<bool>();
        }
    }
    void read(const char* key, Ablation& out) {
        if (const Json* v = take(key)) {
            const std::string s = v->is_string() ? v->get<std::string>() : "";
            if (s == "full") {
                out = Ablation::full;
            } else if (s == "no_residual") {
                out = Ablation::no_residual;
            } else if (s == "no_mil") {
                out = Ablation::no_mil;
            } else {
                throw ConfigError(field(key), "expected one of full, no_residual, no_mil");
            }
        }
    }

    void finish() const {
        if (obj_ == nullptr) {
            return;
        }
        for (const auto& [k, v] : obj_->items()) {
            if (!seen_.count(k)) {
                throw ConfigError(section_ + "." + k, "unknown key");
            }
        }
    }

private:
    std::string field(const char* key) const { return section_ + "." + key; }

    const Json* take(const char* key) {
        seen_.insert(key);
        if (obj_ == nullptr || !obj_->contains(key)) {
            return nullptr;
        }
        return &obj_->at(key);
    }

    std::string section_;
    const Json* obj_ = nullptr;
    std::set<std::string> seen_;
};

} // namespace detail

inline RunConfig run_config_from_json(const Json& doc) {
    if (!doc.is_object()) {
        throw ConfigError("config", "top level must be an object");
    }
    for (const auto& [k, v] : doc.items()) {
        if (k != "synth" && k != "split" && k != "train" && k != "loss") {
            throw ConfigError(k, "unknown section");
        }
    }
    RunConfig c;
    detail::SectionReader s(doc, "synth");
    s.read("concepts", c.synth.concepts);
    s.read("dim", c.synth.dim);
    s.read("senses_min", c.synth.senses_min);
    s.read("senses_max", c.synth.senses_max);
    s.read("shared_min", c.synth.shared_min);
    s.read("shared_max", c.synth.shared_max);
    s.read("distractors", c.synth.distractors);
    s.read("sigma", c.synth.sigma);
    s.read("detail", c.synth.detail);
    s.read("pairs", c.synth.pairs);
    s.read("seed", c.synth.seed);
    s.finish();

    detail::SectionReader sp(doc, "split");
    sp.read("train", c.split.train);
    sp.read("val", c.split.val);
    sp.read("test", c.split.test);
    sp.read("seed", c.split_seed);
    sp.finish();

    detail::SectionReader t(doc, "train");
    TrainConfig& tc = c.train;
    t.read("epochs", tc.epochs);
    t.read("batch_size", tc.batch_size);
    t.read("lr", tc.lr);
    t.read("lr_halving_patience", tc.lr_halving_patience);
    t.read("max_halvings", tc.max_halvings);
    t.read("stagnation_tol", tc.stagnation_tol);
    t.read("clip_norm", tc.clip_norm);
    t.read("beta1", tc.beta1);
    t.read("beta2", tc.beta2);
    t.read("adam_eps", tc.adam_eps);
    t.read("seed", tc.seed);
    t.read("ablation", tc.ablation);
    t.read("K", tc.K);
    t.read("H", tc.H);
    t.read("A", tc.A);
    t.finish();

    detail::SectionReader l(doc, "loss");
    LossWeights& w = tc.weights;
    l.read("lambda1", w.lambda1);
    l.read("lambda2", w.lambda2);
    l.read("rho", w.rho);
    l.read("gamma", w.gamma);
    l.read("relative_mode", w.relative_mode);
    l.read("gamma_median_heuristic", w.gamma_median_heuristic);
    l.read("symmetric_mil", w.symmetric_mil);
    l.finish();
    return c;
}

inline Json to_json(const RunConfig& c) {
    const TrainConfig& t = c.train;
    const LossWeights& w = t.weights;
    Json doc;
    doc["synth"] = {{"concepts", c.synth.concepts},     {"dim", c.synth.dim},
                    {"senses_min", c.synth.senses_min}, {"senses_max", c.synth.senses_max},
                    {"shared_min", c.synth.shared_min}, {"shared_max", c.synth.shared_max},
                    {"distractors", c.synth.distractors}, {"sigma", c.synth.sigma},
                    {"detail", c.synth.detail},         {"pairs", c.synth.pairs},
                    {"seed", c.synth.seed}};
    doc["split"] = {{"train", c.split.train}, {"val", c.split.val}, {"test", c.split.test},
                    {"seed", c.split_seed}};
    doc["train"] = {{"epochs", t.epochs},
                    {"batch_size", t.batch_size},
                    {"lr", t.lr},
                    {"lr_halving_patience", t.lr_halving_patience},
                    {"max_halvings", t.max_halvings},
                    {"stagnation_tol", t.stagnation_tol},
                    {"clip_norm", t.clip_norm},
                    {"beta1", t.beta1},
                    {"beta2", t.beta2},
                    {"adam_eps", t.adam_eps},
                    {"seed", t.seed},
                    {"ablation", to_string(t.ablation)},
                    {"K", t.K},
                    {"H", t.H},
                    {"A", t.A}};
    doc["loss"] = {{"lambda1", w.lambda1},
                   {"lambda2", w.lambda2},
                   {"rho", w.rho},
                   {"gamma", w.gamma},
                   {"relative_mode", w.relative_mode},
                   {"gamma_median_heuristic", w.gamma_median_heuristic},
                   {"symmetric_mil", w.symmetric_mil}};
    return doc;
}

/// Applies "section.key=value". The value is parsed as JSON when possible, else taken as a string.
inline void apply_override(Json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    const auto dot = assignment.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq || dot == 0 || dot + 1 == eq) {
        throw ConfigError(assignment, "override must look like section.key=value");
    }
    const std::string section = assignment.substr(0, dot);
    const std::string key = assignment.substr(dot + 1, eq - dot - 1);
    const std::string text = assignment.substr(eq + 1);
    Json value = Json::parse(text, nullptr, false);
    if (value.is_discarded()) {
        value = text;
    }
    if (!doc.is_object()) {
        doc = Json::object();
    }
    doc[section][key] = std::move(value);
}

inline Json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open " + path.string());
    }
    Json doc = Json::parse(in, nullptr, false);
    if (doc.is_discarded()) {
        throw ConfigError(path.string(), "not valid JSON");
    }
    return doc;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
    if (!out) {
        throw std::runtime_error("cannot write " + path.string());
    }
}

inline void write_json(const std::filesystem::path& path, const Json& doc) {
    write_text(path, doc.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Checkpoints: params.pvsf, optimizer.pvsf and manifest.json in one directory.

inline constexpr const char* kCheckpointFormat = "polyembed-checkpoint";

struct Checkpoint {
    Model model;
    OptimState optimizer;
    Json info = Json::object(); ///< free-form training summary
};

namespace detail {

inline Json net_config_json(const PieNetConfig& c) {
    return {{"K", c.K},
            {"D", c.D},
            {"H", c.H},
            {"A", c.A},
            {"fusion", c.fusion == FusionMode::concat ? "concat" : "residual"}};
}

inline PieNetConfig net_config_from(const Json& j) {
    PieNetConfig c;
    c.K = j.at("K").get<std::size_t>();
    c.D = j.at("D").get<std::size_t>();
    c.H = j.at("H").get<std::size_t>();
    c.A = j.at("A").get<std::size_t>();
    const std::string f = j.at("fusion").get<std::string>();
    if (f != "concat" && f != "residual") {
        throw ConfigError("fusion", "unknown fusion mode " + f);
    }
    c.fusion = f == "concat" ? FusionMode::concat : FusionMode::residual;
    return c;
}

inline Mat as_row(std::span<const double> s) {
    return Mat(1, s.size(), std::vector<double>(s.begin(), s.end()));
}

} // namespace detail

inline void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
    std::filesystem::create_directories(dir);
    std::vector<FeatureRecord> params;
    std::vector<std::string> names;
    for_each_model_tensor(ck.model.x.params, ck.model.y.params,
                          [&](const std::string& n, std::span<const double> s) {
                              params.push_back({n, detail::as_row(s)});
                              names.push_back(n);
                          });
    write_features(dir / "params.pvsf", params);

    std::vector<FeatureRecord> moments;
    for (std::size_t t = 0; t < ck.optimizer.moments.size() && t < names.size(); ++t) {
        const Moments& m = ck.optimizer.moments[t];
        moments.push_back({"m/" + names[t], detail::as_row(m.m)});
        moments.push_back({"v/" + names[t], detail::as_row(m.v)});
        moments.push_back({"v_hat/" + names[t], detail::as_row(m.v_hat)});
    }
    write_features(dir / "optimizer.pvsf", moments);

    const OptimState& o = ck.optimizer;
    Json manifest;
    manifest["format"] = kCheckpointFormat;
    manifest["version"] = 1;
    manifest["objective"] = ck.model.objective == RankingObjective::mil ? "mil" : "concat_triplet";
    manifest["x"] = detail::net_config_json(ck.model.x.config);
    manifest["y"] = detail::net_config_json(ck.model.y.config);
    manifest["optimizer"] = {{"lr", o.lr},
                             {"beta1", o.beta1},
                             {"beta2", o.beta2},
                             {"eps", o.eps},
                             {"step", o.step}};
    manifest["info"] = ck.info;
    write_json(dir / "manifest.json", manifest);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    const Json manifest = read_json(dir / "manifest.json");
    if (manifest.value("format", "") != kCheckpointFormat || manifest.value("version", 0) != 1) {
        throw ConfigError((dir / "manifest.json").string(), "not a version 1 checkpoint manifest");
    }
    Checkpoint ck;
    try {
        const std::string obj = manifest.at("objective").get<std::string>();
        ck.model.objective = obj == "mil" ? RankingObjective::mil : RankingObjective::concat_triplet;
        ck.model.x.config = detail::net_config_from(manifest.at("x"));
        ck.model.y.config = detail::net_config_from(manifest.at("y"));
        const Json& o = manifest.at("optimizer");
        ck.optimizer.lr = o.at("lr").get<double>();
        ck.optimizer.beta1 = o.at("beta1").get<double>();
        ck.optimizer.beta2 = o.at("beta2").get<double>();
        ck.optimizer.eps = o.at("eps").get<double>();
        ck.optimizer.step = o.at("step").get<std::size_t>();
        ck.info = manifest.value("info", Json::object());
    } catch (const Json::exception& e) {
        throw ConfigError("manifest", e.what());
    }
    ck.model.x.config.validate();
    ck.model.y.config.validate();
    ck.model.x.params = PieNetParams::zeros(ck.model.x.config);
    ck.model.y.params = PieNetParams::zeros(ck.model.y.config);

    const auto params = read_features(dir / "params.pvsf");
    std::size_t t = 0;
    std::vector<std::string> names;
    for_each_model_tensor(ck.model.x.params, ck.model.y.params,
                          [&](const std::string& n, std::span<double> s) {
                              if (t >= params.size() || params[t].id != n ||
                                  params[t].features.size() != s.size()) {
                                  throw ConfigError(n, "checkpoint tensor missing or misshapen");
                              }
                              std::copy(params[t].features.data().begin(),
                                        params[t].features.data().end(), s.begin());
                              names.push_back(n);
                              ++t;
                          });
    if (t != params.size()) {
        throw ConfigError("params", "checkpoint holds unexpected extra tensors");
    }

    const auto moments = read_features(dir / "optimizer.pvsf");
    if (moments.size() % 3 != 0 || moments.size() / 3 > names.size()) {
        throw ConfigError("optimizer", "optimizer state does not match the model");
    }
    for (std::size_t i = 0; i < moments.size() / 3; ++i) {
        Moments m;
        const char* kinds[] = {"m/", "v/", "v_hat/"};
        std::vector<double>* dst[] = {&m.m, &m.v, &m.v_hat};
        for (int k = 0; k < 3; ++k) {
            const FeatureRecord& r = moments[3 * i + static_cast<std::size_t>(k)];
            if (r.id != kinds[k] + names[i]) {
                throw ConfigError(r.id, "unexpected optimizer record");
            }
            *dst[k] = r.features.data();
        }
        ck.optimizer.moments.push_back(std::move(m));
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Dataset directories: x.pvsf, y.pvsf and manifest.json with optional split labels.

inline constexpr const char* kDatasetFormat = "polyembed-dataset";

inline void save_dataset(const std::filesystem::path& dir, const PairedDataset& ds,
                         const Json& config = Json::object()) {
    ds.validate();
    std::filesystem::create_directories(dir);
    write_features(dir / "x.pvsf", ds.x);
    write_features(dir / "y.pvsf", ds.y);
    Json manifest;
    manifest["format"] = kDatasetFormat;
    manifest["version"] = 1;
    manifest["pairs"] = ds.size();
    manifest["config"] = config;
    Json labels = Json::array();
    for (Split s : ds.split) {
        labels.push_back(to_string(s));
    }
    manifest["split"] = std::move(labels);
    write_json(dir / "manifest.json", manifest);
}

/// Reads a dataset directory. Split labels come from manifest.json when present.
inline PairedDataset load_dataset(const std::filesystem::path& dir) {
    PairedDataset ds;
    ds.x = read_features(dir / "x.pvsf");
    ds.y = read_features(dir / "y.pvsf");
    if (ds.x.size() != ds.y.size()) {
        throw ConfigError(dir.string(), "x.pvsf and y.pvsf hold different numbers of records");
    }
    for (std::size_t i = 0; i < ds.x.size(); ++i) {
        if (ds.x[i].id != ds.y[i].id) {
            throw ConfigError(dir.string(), "record " + std::to_string(i) + " has id " +
                                                ds.x[i].id + " in x.pvsf but " + ds.y[i].id +
                                                " in y.pvsf");
        }
    }
    const auto manifest_path = dir / "manifest.json";
    if (std::filesystem::exists(manifest_path)) {
        const Json manifest = read_json(manifest_path);
        if (manifest.contains("split") && !manifest.at("split").empty()) {
            const Json& labels = manifest.at("split");
            if (!labels.is_array() || labels.size() != ds.size()) {
                throw ConfigError("split", "manifest split labels do not cover every pair");
            }
            for (const Json& l : labels) {
                const std::string s = l.is_string() ? l.get<std::string>() : "";
                if (s == "train") {
                    ds.split.push_back(Split::train);
                } else if (s == "val") {
                    ds.split.push_back(Split::val);
                } else if (s == "test") {
                    ds.split.push_back(Split::test);
                } else {
                    throw ConfigError("split", "unknown split label '" + s + "'");
                }
            }
        }
    }
    return ds;
}

} // namespace polyembed

#endif
