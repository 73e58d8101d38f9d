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

// polyembed: generate synthetic data, train, embed and evaluate from the command line.
//
//   polyembed gen-synth --out data/
//   polyembed train --data data/ --out run/
//   polyembed embed --model run/ --data data/ --out emb/
//   polyembed eval  --model run/ --data data/ --report report.json

#include "polyembed/config.hpp"

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

namespace fs = std::filesystem;
using namespace polyembed;

namespace {

// Removes everything a failed command wrote.
class OutputGuard {
public:
    /// Directory output. Created if missing; removed on failure only if we created it.
    void dir(const fs::path& d) {
        if (!fs::exists(d)) {
            fs::create_directories(d);
            created_dirs_.push_back(d);
        } else if (!fs::is_directory(d)) {
            throw std::runtime_error(d.string() + " exists and is not a directory");
        }
    }
    /// Registers a file that this command is about to write.
    fs::path file(const fs::path& f) {
        files_.push_back(f);
        return f;
    }
    void commit() { committed_ = true; }

    ~OutputGuard() {
        if (committed_) {
            return;
        }
        std::error_code ec;
        for (const auto& f : files_) {
            fs::remove(f, ec);
        }
        for (auto it = created_dirs_.rbegin(); it != created_dirs_.rend(); ++it) {
            fs::remove_all(*it, ec);
        }
    }

private:
    std::vector<fs::path> files_;
    std::vector<fs::path> created_dirs_;
    bool committed_ = false;
};

struct ConfigArgs {
    std::string config;
    std::vector<std::string> sets;
    std::optional<std::uint64_t> seed;
};

void add_config_flags(CLI::App* cmd, ConfigArgs& a) {
    cmd->add_option("--config", a.config, "JSON run configuration (sections synth, split, train, loss)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--set", a.sets, "Override one setting, e.g. --set train.lr=0.001 (repeatable)");
}

Json load_config_doc(const ConfigArgs& a) {
    Json doc = a.config.empty() ? Json::object() : read_json(a.config);
    for (const auto& s : a.sets) {
        apply_override(doc, s);
    }
    return doc;
}

fs::path checkpoint_dir(const fs::path& p) {
    if (fs::exists(p / "params.pvsf")) {
        return p;
    }
    if (fs::exists(p / "checkpoint" / "params.pvsf")) {
        return p / "checkpoint";
    }
    throw std::runtime_error(p.string() + " holds no checkpoint (expected params.pvsf)");
}

std::vector<std::size_t> select(const PairedDataset& ds, const std::string& which) {
    if (which == "all") {
        std::vector<std::size_t> all(ds.size());
        for (std::size_t i = 0; i < all.size(); ++i) {
            all[i] = i;
        }
        return all;
    }
    if (ds.split.empty()) {
        throw ConfigError("split", "dataset has no split labels; use --split all");
    }
    const Split s = which == "train" ? Split::train : which == "val" ? Split::val : Split::test;
    auto idx = ds.indices(s);
    if (idx.empty()) {
        throw ConfigError("split", "split '" + which + "' is empty");
    }
    return idx;
}

Json report_json(const MetricsReport& r) {
    return {{"database_size", r.database_size},
            {"num_queries", r.num_queries},
            {"R@1", r.recall[0]},
            {"R@5", r.recall[1]},
            {"R@10", r.recall[2]},
            {"med_r", r.med_r},
            {"nmr", r.nmr},
            {"errors", r.errors}};
}

void print_table(const BidirectionalReport& rep) {
    std::printf("%-8s %8s %8s %8s %8s %8s\n", "dir", "R@1", "R@5", "R@10", "MedR", "nMR");
    for (const MetricsReport* r : {&rep.x_to_y, &rep.y_to_x}) {
        std::printf("%-8s %8.2f %8.2f %8.2f %8.0f %8.4f\n", r->direction.c_str(), 100 * r->recall[0],
                    100 * r->recall[1], 100 * r->recall[2], r->med_r, r->nmr);
    }
    std::printf("rsum %.2f\n", rep.rsum);
}

// ---------------------------------------------------------------------------

int cmd_gen_synth(const ConfigArgs& a, const std::string& out) {
    Json doc = load_config_doc(a);
    RunConfig cfg = run_config_from_json(doc);
    if (a.seed) {
        cfg.synth.seed = *a.seed;
    }
    cfg.synth.validate();
    OutputGuard guard;
    guard.dir(out);
    guard.file(fs::path(out) / "x.pvsf");
    guard.file(fs::path(out) / "y.pvsf");
    guard.file(fs::path(out) / "manifest.json");
    const PairedDataset ds = split(generate_synthetic(cfg.synth), cfg.split, cfg.split_seed);
    save_dataset(out, ds, to_json(cfg));
    guard.commit();
    std::fprintf(stderr, "wrote %zu pairs (train %zu, val %zu, test %zu) to %s\n", ds.size(),
                 ds.indices(Split::train).size(), ds.indices(Split::val).size(),
                 ds.indices(Split::test).size(), out.c_str());
    return 0;
}

int cmd_train(const ConfigArgs& a, const std::string& data, const std::string& out) {
    Json doc = load_config_doc(a);
    RunConfig cfg = run_config_from_json(doc);
    if (a.seed) {
        cfg.train.seed = *a.seed;
    }
    cfg.train.validate();
    PairedDataset ds = load_dataset(data);
    if (ds.split.empty()) {
        ds = split(std::move(ds), cfg.split, cfg.split_seed);
    }

    OutputGuard guard;
    guard.dir(out);
    const fs::path dir(out);
    write_json(guard.file(dir / "config.json"), to_json(cfg));
    std::ofstream log(guard.file(dir / "train_log.jsonl"), std::ios::binary);
    const TrainResult r = train(ds, cfg.train, [&](const EpochRecord& e) {
        const Json rec = {{"epoch", e.epoch},         {"steps", e.steps},
                          {"lr", e.lr},               {"train_loss", e.train_loss},
                          {"train_mil", e.train_mil}, {"train_div", e.train_div},
                          {"train_mmd", e.train_mmd}, {"val_loss", e.val_loss},
                          {"val_rsum", e.val_rsum},   {"val_r1", e.val_r1}};
        log << rec.dump() << "\n";
        log.flush();
        std::fprintf(stderr, "epoch %3zu  lr %.2e  loss %.5f  val_loss %.5f  val_rsum %.2f\n", e.epoch,
                     e.lr, e.train_loss, e.val_loss, e.val_rsum);
    });
    log.close();
    if (!log) {
        throw std::runtime_error("cannot write training log");
    }
    if (r.log.empty()) {
        throw std::runtime_error("training produced no usable epoch: " + r.status);
    }
    guard.dir(dir / "checkpoint");
    for (const char* f : {"params.pvsf", "optimizer.pvsf", "manifest.json"}) {
        guard.file(dir / "checkpoint" / f);
    }
    Checkpoint ck{r.model, r.optimizer, Json::object()};
    ck.info["best_epoch"] = r.best_epoch;
    ck.info["best_val_rsum"] = r.best_val_rsum;
    ck.info["epochs_run"] = r.log.size();
    ck.info["status"] = r.status;
    save_checkpoint(dir / "checkpoint", ck);
    guard.commit();
    std::fprintf(stderr, "best epoch %zu, val rsum %.2f%s\n", r.best_epoch, r.best_val_rsum,
                 r.diverged ? " (training diverged; kept the last good checkpoint)" : "");
    return r.diverged ? 3 : 0;
}

int cmd_embed(const std::string& model_path, const std::string& data, const std::string& out,
              const std::string& which, bool attention) {
    const Checkpoint ck = load_checkpoint(checkpoint_dir(model_path));
    const PairedDataset ds = load_dataset(data);
    const auto idx = select(ds, which);

    OutputGuard guard;
    guard.dir(out);
    const fs::path dir(out);
    auto side = [&](const PieNet& net, const std::vector<FeatureRecord>& recs, const char* name) {
        std::vector<FeatureRecord> emb;
        std::vector<FeatureRecord> att;
        for (std::size_t i : idx) {
            const PieNetOutput o = forward(net, recs[i].features);
            emb.push_back({recs[i].id, retrieval_embedding(o.z, ck.model.objective)});
            if (attention) {
                att.push_back({recs[i].id, o.alpha});
            }
        }
        write_features(guard.file(dir / (std::string(name) + ".pvsf")), emb);
        if (attention) {
            write_features(guard.file(dir / (std::string(name) + "_attention.pvsf")), att);
        }
    };
    side(ck.model.x, ds.x, "x");
    side(ck.model.y, ds.y, "y");
    guard.commit();
    std::fprintf(stderr, "embedded %zu pairs into %s\n", idx.size(), out.c_str());
    return 0;
}

int cmd_eval(const std::string& model_path, const std::string& emb_path, const std::string& data,
             const std::string& report, const std::string& which) {
    std::vector<std::string> ids;
    std::vector<Mat> zx;
    std::vector<Mat> zy;
    if (!model_path.empty()) {
        if (data.empty()) {
            throw ConfigError("--data", "required with --model");
        }
        const Checkpoint ck = load_checkpoint(checkpoint_dir(model_path));
        const PairedDataset ds = load_dataset(data);
        const auto idx = select(ds, which);
        for (std::size_t i : idx) {
            ids.push_back(ds.x[i].id);
        }
        zx = encode(ck.model.x, ds.x, idx, ck.model.objective);
        zy = encode(ck.model.y, ds.y, idx, ck.model.objective);
    } else {
        const auto ex = read_features(fs::path(emb_path) / "x.pvsf");
        const auto ey = read_features(fs::path(emb_path) / "y.pvsf");
        std::unordered_map<std::string, std::size_t> ypos;
        for (std::size_t i = 0; i < ey.size(); ++i) {
            ypos.emplace(ey[i].id, i);
        }
        std::set<std::string> keep;
        if (!data.empty() && which != "all") {
            const PairedDataset ds = load_dataset(data);
            for (std::size_t i : select(ds, which)) {
                keep.insert(ds.x[i].id);
            }
        }
        for (const auto& r : ex) {
            if (!keep.empty() && !keep.count(r.id)) {
                continue;
            }
            auto it = ypos.find(r.id);
            if (it == ypos.end()) {
                throw ConfigError(r.id, "x embedding has no y partner");
            }
            ids.push_back(r.id);
            zx.push_back(r.features);
            zy.push_back(ey[it->second].features);
        }
        if (ids.empty()) {
            throw ConfigError("--embeddings", "no embeddings selected");
        }
    }
    const BidirectionalReport rep = evaluate_bidirectional(ids, zx, zy);

    OutputGuard guard;
    const fs::path rp(report);
    if (rp.has_parent_path()) {
        guard.dir(rp.parent_path());
    }
    Json doc;
    doc["source"] = model_path.empty() ? "embeddings" : "model";
    doc["split"] = which;
    doc["x_to_y"] = report_json(rep.x_to_y);
    doc["y_to_x"] = report_json(rep.y_to_x);
    doc["rsum"] = rep.rsum;
    write_json(guard.file(rp), doc);
    guard.commit();
    print_table(rep);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"polyembed: polysemous set embeddings for cross-modal retrieval"};
    app.require_subcommand(1);

    ConfigArgs gen_args;
    std::string gen_out;
    auto* gen = app.add_subcommand("gen-synth", "Generate a synthetic paired dataset with a split");
    add_config_flags(gen, gen_args);
    gen->add_option("--seed", gen_args.seed, "Generator seed (overrides synth.seed)");
    gen->add_option("--out", gen_out, "Output directory")->required();

    ConfigArgs train_args;
    std::string train_data, train_out;
    auto* tr = app.add_subcommand("train", "Train both networks; writes config, log and checkpoint");
    add_config_flags(tr, train_args);
    tr->add_option("--seed", train_args.seed, "Training seed (overrides train.seed)");
    tr->add_option("--data", train_data, "Dataset directory (x.pvsf, y.pvsf, manifest.json)")
        ->required()
        ->check(CLI::ExistingDirectory);
    tr->add_option("--out", train_out, "Run output directory")->required();

    std::string emb_model, emb_data, emb_out, emb_split = "all";
    bool emb_attention = false;
    auto* em = app.add_subcommand("embed", "Write per-instance embeddings as PVSF");
    em->add_option("--model", emb_model, "Run or checkpoint directory")->required();
    em->add_option("--data", emb_data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
    em->add_option("--out", emb_out, "Output directory (x.pvsf, y.pvsf)")->required();
    em->add_option("--split", emb_split, "Which pairs to embed")
        ->check(CLI::IsMember({"all", "train", "val", "test"}))
        ->capture_default_str();
    em->add_flag("--attention", emb_attention, "Also write K x B attention maps");

    std::string ev_model, ev_emb, ev_data, ev_report, ev_split = "test";
    auto* ev = app.add_subcommand("eval", "Bidirectional retrieval metrics");
    auto* om = ev->add_option("--model", ev_model, "Run or checkpoint directory");
    auto* oe = ev->add_option("--embeddings", ev_emb, "Directory with x.pvsf and y.pvsf embeddings")
                   ->check(CLI::ExistingDirectory);
    om->excludes(oe);
    ev->add_option("--data", ev_data, "Dataset directory (required with --model)")
        ->check(CLI::ExistingDirectory);
    ev->add_option("--report", ev_report, "JSON report path")->required();
    ev->add_option("--split", ev_split, "Which pairs to evaluate")
        ->check(CLI::IsMember({"all", "train", "val", "test"}))
        ->capture_default_str();

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            return cmd_gen_synth(gen_args, gen_out);
        }
        if (*tr) {
            return cmd_train(train_args, train_data, train_out);
        }
        if (*em) {
            return cmd_embed(emb_model, emb_data, emb_out, emb_split, emb_attention);
        }
        if (ev_model.empty() && ev_emb.empty()) {
            throw ConfigError("eval", "one of --model or --embeddings is required");
        }
        return cmd_eval(ev_model, ev_emb, ev_data, ev_report, ev_split);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "error: invalid setting %s\n", e.what());
        return 2;
    } catch (const FormatError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
