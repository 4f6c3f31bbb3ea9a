#pragma once

// Training and evaluation protocol on a cohort: optional residualization fitted on the training
// controls, class-weighted training, test-set contrasts, the region-volume baseline and the
// relevance/volume correlation.

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "analyze.hpp"
#include "eval.hpp"
#include "lrp.hpp"
#include "nn/train.hpp"
#include "phantom.hpp"
#include "residualize.hpp"

namespace relevis::pipeline {

enum class InputKind { Raw, Residualized };

inline InputKind parse_input_kind(const std::string &s) {
    if (s == "raw") return InputKind::Raw;
    if (s == "residualized") return InputKind::Residualized;
    throw ConfigError("input must be 'raw' or 'residualized', got '" + s + "'");
}

inline std::string to_string(InputKind k) { return k == InputKind::Raw ? "raw" : "residualized"; }

/// Epoch default: 10 for residualized input, 20 for raw input (slower convergence).
inline std::size_t default_epochs(InputKind k) { return k == InputKind::Raw ? 20 : 10; }

/// Fit the voxel-wise residualizer on the controls among `train`.
inline ResidualModel fit_on_controls(const Cohort &cohort, std::span<const std::size_t> train) {
    std::vector<Volume3D> vols;
    std::vector<SubjectRecord> recs;
    for (std::size_t i : train)
        if (cohort.subjects[i].record.group == Group::CN)
            vols.push_back(cohort.subjects[i].volume), recs.push_back(cohort.subjects[i].record);
    return fit_residualizer(std::span<const Volume3D>(vols), std::span<const SubjectRecord>(recs));
}

inline std::vector<Volume3D> model_inputs(const Cohort &cohort, const std::optional<ResidualModel> &residualizer) {
    std::vector<Volume3D> out;
    out.reserve(cohort.subjects.size());
    for (const auto &s : cohort.subjects)
        out.push_back(residualizer ? apply_residualizer(*residualizer, s.volume, s.record) : s.volume);
    return out;
}

inline std::vector<double> region_volumes(const Cohort &cohort, int region) {
    std::vector<double> v;
    for (const auto &s : cohort.subjects) v.push_back(analyze::region_volume(s.volume, cohort.atlas, region));
    return v;
}

/// Region volumes with covariate effects removed (scalar OLS fitted on the controls among `fit`).
inline std::vector<double> residual_region_volumes(const Cohort &cohort, int region, std::span<const std::size_t> fit) {
    const auto vol = region_volumes(cohort, region);
    std::vector<double> fv;
    std::vector<SubjectRecord> fr;
    for (std::size_t i : fit)
        if (cohort.subjects[i].record.group == Group::CN) fv.push_back(vol[i]), fr.push_back(cohort.subjects[i].record);
    const auto model = fit_scalar_residualizer(fv, fr);
    std::vector<double> out;
    for (std::size_t i = 0; i < vol.size(); ++i) out.push_back(apply_scalar(model, vol[i], cohort.subjects[i].record));
    return out;
}

struct FoldConfig {
    nn::TrainConfig train;
    InputKind input = InputKind::Residualized;
    std::uint64_t model_seed = 0;
    int target_region = 1;
};

struct FoldResult {
    nn::Model<float> model;
    std::vector<nn::EpochRecord> history;
    std::size_t selected_epoch = 0;
    std::optional<ResidualModel> residualizer;
    std::vector<Volume3D> inputs; // model inputs of every cohort subject
    std::vector<std::size_t> train, test;
    std::vector<double> test_scores; // disease probability per test subject
    std::vector<eval::ContrastResult> contrasts;       // MCI vs CN, AD vs CN, MCI+AD vs CN
    std::vector<eval::ContrastResult> volume_baseline; // same contrasts from residual region volume
};

inline std::vector<eval::ContrastResult> model_contrasts(std::span<const double> scores, std::span<const Group> groups) {
    std::vector<eval::ContrastResult> out;
    out.push_back(eval::evaluate_contrast(scores, groups, Group::MCI));
    out.push_back(eval::evaluate_contrast(scores, groups, Group::AD));
    std::vector<int> labels;
    for (Group g : groups) labels.push_back(disease_label(g));
    out.push_back(eval::evaluate_binary("MCI+AD vs CN", scores, labels));
    return out;
}

/// Region-volume classifier per contrast: Youden threshold on the training residual volumes.
inline std::vector<eval::ContrastResult> baseline_contrasts(const Cohort &cohort, std::span<const double> residual_volume,
                                                           std::span<const std::size_t> train,
                                                           std::span<const std::size_t> test) {
    std::vector<eval::ContrastResult> out;
    auto run = [&](const std::string &name, auto positive) {
        std::vector<eval::LabelledValue> tr, te;
        for (std::size_t i : train) {
            const Group g = cohort.subjects[i].record.group;
            if (g == Group::CN || positive(g)) tr.push_back({residual_volume[i], g == Group::CN ? 0 : 1});
        }
        for (std::size_t i : test) {
            const Group g = cohort.subjects[i].record.group;
            if (g == Group::CN || positive(g)) te.push_back({residual_volume[i], g == Group::CN ? 0 : 1});
        }
        const auto b = eval::volume_baseline(tr, te);
        out.push_back({name, te.size(), b.roc.auc, b.metrics});
    };
    run("MCI vs CN", [](Group g) { return g == Group::MCI; });
    run("AD vs CN", [](Group g) { return g == Group::AD; });
    run("MCI+AD vs CN", [](Group g) { return g != Group::CN; });
    return out;
}

inline FoldResult run_fold(const Cohort &cohort, std::span<const std::size_t> test, const FoldConfig &cfg,
                           const nn::EpochCallback &on_epoch = {}) {
    FoldResult r;
    r.test.assign(test.begin(), test.end());
    r.train = eval::training_indices(cohort.subjects.size(), test);
    if (cfg.input == InputKind::Residualized) r.residualizer = fit_on_controls(cohort, r.train);
    r.inputs = model_inputs(cohort, r.residualizer);

    std::vector<nn::Example> train_set, test_set;
    std::size_t negatives = 0, positives = 0;
    for (std::size_t i : r.train) {
        const int y = disease_label(cohort.subjects[i].record.group);
        train_set.push_back({cohort.subjects[i].record.id, &r.inputs[i], y});
        (y ? positives : negatives) += 1;
    }
    for (std::size_t i : r.test)
        test_set.push_back({cohort.subjects[i].record.id, &r.inputs[i], disease_label(cohort.subjects[i].record.group)});

    nn::TrainConfig tc = cfg.train;
    tc.class_weights = nn::class_weights(negatives, positives);
    auto trained = nn::train(nn::build_model<float>(cohort.atlas.dims(), cfg.model_seed), train_set, test_set, tc,
                             on_epoch);
    r.model = std::move(trained.model);
    r.history = std::move(trained.history);
    r.selected_epoch = trained.selected_epoch;

    if (r.test.empty()) return r; // whole-sample model: nothing held out to evaluate
    std::vector<const Volume3D *> vols;
    std::vector<Group> groups;
    for (std::size_t i : r.test) vols.push_back(&r.inputs[i]), groups.push_back(cohort.subjects[i].record.group);
    for (const auto &p : nn::predict(r.model, std::span<const Volume3D *const>(vols))) r.test_scores.push_back(p[1]);
    r.contrasts = model_contrasts(r.test_scores, groups);
    r.volume_baseline =
        baseline_contrasts(cohort, residual_region_volumes(cohort, cfg.target_region, r.train), r.train, r.test);
    return r;
}

struct ScatterRow {
    std::string id;
    Group group = Group::CN;
    double region_relevance = 0.0;
    double region_volume = 0.0;
    double residual_volume = 0.0;
};

struct CorrelationResult {
    eval::PearsonResult pearson;
    std::vector<ScatterRow> rows;
};

/// Pearson correlation between region relevance (disease-class maps) and residual region volume
/// over `subjects`. `inputs` are the model inputs of every cohort subject.
template <class T>
CorrelationResult correlate_relevance_volume(const Cohort &cohort, std::span<const Volume3D> inputs,
                                             const nn::Model<T> &model, int region,
                                             std::span<const double> residual_volume,
                                             std::span<const std::size_t> subjects, const lrp::RuleConfig &rules = {}) {
    CorrelationResult out;
    std::vector<double> rel, vol;
    for (std::size_t i : subjects) {
        const auto rm = lrp::relevance_map(model, inputs[i], 1, rules);
        ScatterRow row{cohort.subjects[i].record.id, cohort.subjects[i].record.group,
                       analyze::region_sum(rm.map, cohort.atlas, region),
                       analyze::region_volume(cohort.subjects[i].volume, cohort.atlas, region), residual_volume[i]};
        rel.push_back(row.region_relevance);
        vol.push_back(row.residual_volume);
        out.rows.push_back(std::move(row));
    }
    out.pearson = eval::pearson_r(rel, vol);
    return out;
}

} // namespace relevis::pipeline
