#pragma once

// Run configuration shared by the command-line subcommands. Every key is optional;
// unknown keys are rejected at every nesting level.
//
// {
//   "seed": 1,
//   "input": "residualized" | "raw",
//   "k": 10, "fold": 0, "jobs": 1,
//   "region": "Hippocampus",
//   "bind": "127.0.0.1:8080",
//   "phantom":   {"dims": [32,32,40], "voxel_size_mm": 4.5, "counts": [150,130,110],
//                 "noise_sd": 0.05, "anatomical_sd": 0.05, "lesion_gain": 0.5},
//   "train":     {"learning_rate": 1e-4, "batch_size": 20, "epochs": 10, "l2_coefficient": 0.01,
//                 "augmentation": true, "checkpoint": "best-on-test" | "fixed-epochs"},
//   "lrp":       {"conv_rule": "alpha1beta0", "dense_rule": "epsilon", "epsilon": 1e-10, "init": "logit"},
//   "occlusion": {"cube": 0, "reduction": 0.5, "stride": 4},
//   "paths":     {"cohort": "", "model": "", "residualizer": "", "out": "", "catalog": ""}
// }

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "errors.hpp"
#include "lrp.hpp"
#include "nn/train.hpp"
#include "phantom.hpp"

namespace relevis {

struct RunConfig {
    std::uint64_t seed = 1;
    std::string input = "residualized";
    std::size_t k = 10;
    std::size_t fold = 0;
    std::size_t jobs = 1;
    std::string region = "Hippocampus";
    std::string bind = "127.0.0.1:8080";

    PhantomSpec phantom;
    GroupCounts counts{150, 130, 110};

    nn::TrainConfig train;
    std::optional<std::size_t> epochs; // unset: 10 residualized, 20 raw

    lrp::RuleConfig rules;

    std::size_t cube = 0; // 0: default edge from dims
    double reduction = 0.5;
    std::size_t stride = 4;

    std::string cohort, model, residualizer, out, catalog;
};

namespace config_detail {

inline void only_keys(const nlohmann::json &j, const std::set<std::string> &allowed, const std::string &where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto &[k, v] : j.items())
        if (!allowed.count(k)) throw ConfigError("unknown config key '" + (where.empty() ? k : where + "." + k) + "'");
}

template <class T>
void read(const nlohmann::json &j, const char *key, T &dst, const std::string &where) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const nlohmann::json::exception &) {
        throw ConfigError("config key '" + where + key + "' has the wrong type");
    }
}

} // namespace config_detail

inline std::string to_string(nn::CheckpointPolicy p) {
    return p == nn::CheckpointPolicy::BestOnTest ? "best-on-test" : "fixed-epochs";
}

inline nn::CheckpointPolicy parse_checkpoint(const std::string &s) {
    if (s == "best-on-test") return nn::CheckpointPolicy::BestOnTest;
    if (s == "fixed-epochs") return nn::CheckpointPolicy::FixedEpochs;
    throw ConfigError("checkpoint must be 'best-on-test' or 'fixed-epochs'");
}

inline RunConfig run_config_from_json(const nlohmann::json &j) {
    using namespace config_detail;
    only_keys(j, {"seed", "input", "k", "fold", "jobs", "region", "bind", "phantom", "train", "lrp", "occlusion", "paths"},
              "");
    RunConfig c;
    read(j, "seed", c.seed, "");
    read(j, "input", c.input, "");
    read(j, "k", c.k, "");
    read(j, "fold", c.fold, "");
    read(j, "jobs", c.jobs, "");
    read(j, "region", c.region, "");
    read(j, "bind", c.bind, "");
    if (j.contains("phantom")) {
        const auto &p = j.at("phantom");
        only_keys(p, {"dims", "voxel_size_mm", "counts", "noise_sd", "anatomical_sd", "lesion_gain"}, "phantom");
        std::optional<std::array<std::size_t, 3>> dims, counts;
        if (p.contains("dims")) dims.emplace(), read(p, "dims", *dims, "phantom.");
        if (p.contains("counts")) counts.emplace(), read(p, "counts", *counts, "phantom.");
        if (dims) c.phantom.dims = {(*dims)[0], (*dims)[1], (*dims)[2]};
        if (counts) c.counts = {(*counts)[0], (*counts)[1], (*counts)[2]};
        read(p, "voxel_size_mm", c.phantom.voxel_size_mm, "phantom.");
        read(p, "noise_sd", c.phantom.noise_sd, "phantom.");
        read(p, "anatomical_sd", c.phantom.anatomical_sd, "phantom.");
        read(p, "lesion_gain", c.phantom.lesion_gain, "phantom.");
    }
    if (j.contains("train")) {
        const auto &t = j.at("train");
        only_keys(t, {"learning_rate", "batch_size", "epochs", "l2_coefficient", "augmentation", "checkpoint"}, "train");
        read(t, "learning_rate", c.train.learning_rate, "train.");
        read(t, "batch_size", c.train.batch_size, "train.");
        if (t.contains("epochs")) c.epochs.emplace(), read(t, "epochs", *c.epochs, "train.");
        read(t, "l2_coefficient", c.train.l2_coefficient, "train.");
        read(t, "augmentation", c.train.augmentation, "train.");
        if (t.contains("checkpoint")) {
            std::string s;
            read(t, "checkpoint", s, "train.");
            c.train.checkpoint = parse_checkpoint(s);
        }
    }
    if (j.contains("lrp")) c.rules = lrp::rule_config_from_json(j.at("lrp"));
    if (j.contains("occlusion")) {
        const auto &o = j.at("occlusion");
        only_keys(o, {"cube", "reduction", "stride"}, "occlusion");
        read(o, "cube", c.cube, "occlusion.");
        read(o, "reduction", c.reduction, "occlusion.");
        read(o, "stride", c.stride, "occlusion.");
    }
    if (j.contains("paths")) {
        const auto &p = j.at("paths");
        only_keys(p, {"cohort", "model", "residualizer", "out", "catalog"}, "paths");
        read(p, "cohort", c.cohort, "paths.");
        read(p, "model", c.model, "paths.");
        read(p, "residualizer", c.residualizer, "paths.");
        read(p, "out", c.out, "paths.");
        read(p, "catalog", c.catalog, "paths.");
    }
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    try {
        return run_config_from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::parse_error &e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
}

inline nlohmann::json to_json(const RunConfig &c) {
    const auto &d = c.phantom.dims;
    nlohmann::json train{{"learning_rate", c.train.learning_rate},
                         {"batch_size", c.train.batch_size},
                         {"l2_coefficient", c.train.l2_coefficient},
                         {"augmentation", c.train.augmentation},
                         {"checkpoint", to_string(c.train.checkpoint)}};
    if (c.epochs) train["epochs"] = *c.epochs;
    auto rules = lrp::to_json(c.rules);
    rules.erase("batchnorm");
    return {{"seed", c.seed},
            {"input", c.input},
            {"k", c.k},
            {"fold", c.fold},
            {"jobs", c.jobs},
            {"region", c.region},
            {"bind", c.bind},
            {"phantom",
             {{"dims", {d.nx, d.ny, d.nz}},
              {"voxel_size_mm", c.phantom.voxel_size_mm},
              {"counts", {c.counts.cn, c.counts.mci, c.counts.ad}},
              {"noise_sd", c.phantom.noise_sd},
              {"anatomical_sd", c.phantom.anatomical_sd},
              {"lesion_gain", c.phantom.lesion_gain}}},
            {"train", train},
            {"lrp", rules},
            {"occlusion", {{"cube", c.cube}, {"reduction", c.reduction}, {"stride", c.stride}}},
            {"paths",
             {{"cohort", c.cohort},
              {"model", c.model},
              {"residualizer", c.residualizer},
              {"out", c.out},
              {"catalog", c.catalog}}}};
}

/// FNV-1a over the canonical JSON text, as 16 hex digits.
inline std::string config_hash(const RunConfig &c) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char ch : to_json(c).dump()) {
        h ^= ch;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

} // namespace relevis
