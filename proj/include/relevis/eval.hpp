#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <boost/math/special_functions/beta.hpp>
#include <json.hpp>

#include "errors.hpp"
#include "phantom.hpp"
#include "seed.hpp"

namespace relevis::eval {

// ---------------------------------------------------------------------------
// ROC

/// Operating points over candidate thresholds: -inf, midpoints between adjacent distinct
/// scores, +inf (ascending). A case is called positive when score >= threshold, or
/// score <= threshold when `inverted` (lower score means disease, e.g. volumes).
struct ROCCurve {
    std::vector<double> thresholds;
    std::vector<double> sensitivity;
    std::vector<double> specificity;
    double auc = 0.5;
    bool inverted = false;

    double youden(std::size_t i) const { return sensitivity[i] + specificity[i] - 1.0; }
};

namespace detail {

inline void check_binary(std::span<const double> scores, std::span<const int> labels, std::size_t &pos,
                         std::size_t &neg) {
    if (scores.size() != labels.size()) throw DataError("scores and labels differ in length");
    pos = neg = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw DataError("labels must be 0 or 1");
        if (std::isnan(scores[i])) throw DataError("score " + std::to_string(i) + " is NaN");
        (labels[i] ? pos : neg) += 1;
    }
    if (pos == 0 || neg == 0) throw DegenerateLabelsError("both classes must be present");
}

} // namespace detail

inline ROCCurve roc_auc(std::span<const double> scores, std::span<const int> labels, bool inverted = false) {
    std::size_t P = 0, N = 0;
    detail::check_binary(scores, labels, P, N);
    const double sign = inverted ? -1.0 : 1.0;
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return sign * scores[a] < sign * scores[b]; });

    // Sweep ascending in oriented score; twice the Mann-Whitney count stays integral.
    ROCCurve roc;
    roc.inverted = inverted;
    std::uint64_t twice_wins = 0, neg_below = 0;
    std::size_t pos_below = 0;
    std::vector<double> cut{-std::numeric_limits<double>::infinity()};
    std::vector<std::size_t> pos_at{0}, neg_at{0}; // counts strictly below each cut
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i, gp = 0, gn = 0;
        const double v = sign * scores[order[i]];
        for (; j < order.size() && sign * scores[order[j]] == v; ++j) (labels[order[j]] ? gp : gn) += 1;
        twice_wins += 2 * std::uint64_t(gp) * neg_below + std::uint64_t(gp) * gn;
        neg_below += gn;
        pos_below += gp;
        if (j < order.size()) cut.push_back(0.5 * (v + sign * scores[order[j]]));
        else cut.push_back(std::numeric_limits<double>::infinity());
        pos_at.push_back(pos_below);
        neg_at.push_back(std::size_t(neg_below));
        i = j;
    }
    roc.auc = double(twice_wins) / (2.0 * double(P) * double(N));
    // Positive iff oriented score >= cut: sensitivity = pos above / P, specificity = neg below / N.
    std::vector<std::size_t> idx(cut.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (inverted) std::reverse(idx.begin(), idx.end());
    for (std::size_t k : idx) {
        roc.thresholds.push_back(sign * cut[k]);
        roc.sensitivity.push_back(double(P - pos_at[k]) / double(P));
        roc.specificity.push_back(double(neg_at[k]) / double(N));
    }
    return roc;
}

/// Threshold with the largest Youden index; ties go to the smallest threshold.
inline double youden_threshold(const ROCCurve &roc) {
    if (roc.thresholds.empty()) throw DataError("empty ROC curve");
    std::size_t best = 0;
    for (std::size_t i = 1; i < roc.thresholds.size(); ++i) {
        const double j = roc.youden(i), b = roc.youden(best);
        if (j > b || (j == b && roc.thresholds[i] < roc.thresholds[best])) best = i;
    }
    return roc.thresholds[best];
}

inline std::vector<int> apply_threshold(std::span<const double> scores, double threshold, bool inverted = false) {
    std::vector<int> out;
    out.reserve(scores.size());
    for (double s : scores) out.push_back(inverted ? (s <= threshold ? 1 : 0) : (s >= threshold ? 1 : 0));
    return out;
}

// ---------------------------------------------------------------------------
// Confusion-matrix metrics

struct Metrics {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    double sensitivity = 0.0, specificity = 0.0, balanced_accuracy = 0.0;
    double ppv = 0.0, npv = 0.0, f1 = 0.0;
};

namespace detail {
inline double ratio(std::size_t num, std::size_t den) { return den ? double(num) / double(den) : 0.0; }
} // namespace detail

/// Rates with an empty denominator are reported as 0.
inline Metrics metrics_from_counts(std::size_t tp, std::size_t fp, std::size_t tn, std::size_t fn) {
    Metrics m{tp, fp, tn, fn};
    m.sensitivity = detail::ratio(tp, tp + fn);
    m.specificity = detail::ratio(tn, tn + fp);
    m.balanced_accuracy = 0.5 * (m.sensitivity + m.specificity);
    m.ppv = detail::ratio(tp, tp + fp);
    m.npv = detail::ratio(tn, tn + fn);
    m.f1 = detail::ratio(2 * tp, 2 * tp + fp + fn);
    return m;
}

inline Metrics classification_metrics(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size()) throw DataError("predictions and labels differ in length");
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if ((labels[i] != 0 && labels[i] != 1) || (predictions[i] != 0 && predictions[i] != 1))
            throw DataError("predictions and labels must be 0 or 1");
        if (labels[i]) (predictions[i] ? tp : fn) += 1;
        else (predictions[i] ? fp : tn) += 1;
    }
    if (tp + fn == 0 || tn + fp == 0) throw DegenerateLabelsError("both label classes must be present");
    return metrics_from_counts(tp, fp, tn, fn);
}

// ---------------------------------------------------------------------------
// Correlation

struct PearsonResult {
    double r = 0.0;
    std::size_t n = 0;
    double t = 0.0;
    double p = 1.0; // two-sided
};

inline PearsonResult pearson_r(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw DataError("x and y differ in length");
    const std::size_t n = x.size();
    if (n < 3) throw DataError("correlation needs at least 3 pairs");
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / double(n);
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / double(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (!(sxx > 0.0) || !(syy > 0.0)) throw DegenerateInputError("correlation needs nonzero variance in both inputs");
    PearsonResult res;
    res.n = n;
    res.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    const double df = double(n - 2);
    const double one_minus = 1.0 - res.r * res.r;
    if (one_minus <= 0.0) {
        res.t = std::copysign(std::numeric_limits<double>::infinity(), res.r);
        res.p = 0.0;
    } else {
        res.t = res.r * std::sqrt(df / one_minus);
        res.p = boost::math::ibeta(0.5 * df, 0.5, df / (df + res.t * res.t));
    }
    return res;
}

// ---------------------------------------------------------------------------
// Cross-validation partitions

/// k disjoint test partitions (indices into `records`). Each group is shuffled with the seed;
/// groups are concatenated CN, MCI, AD and position i goes to fold i mod k.
inline std::vector<std::vector<std::size_t>> stratified_kfold(std::span<const SubjectRecord> records, std::size_t k,
                                                              std::uint64_t seed) {
    if (k < 2) throw ConfigError("k must be at least 2");
    std::array<std::vector<std::size_t>, 3> groups;
    for (std::size_t i = 0; i < records.size(); ++i) groups[std::size_t(records[i].group)].push_back(i);
    for (std::size_t g = 0; g < 3; ++g) {
        if (!groups[g].empty() && groups[g].size() < k)
            throw DataError(std::string("group ") + to_string(Group(g)) + " has " + std::to_string(groups[g].size()) +
                            " members, fewer than k = " + std::to_string(k));
        std::mt19937_64 rng(mix_seed(seed, g));
        std::shuffle(groups[g].begin(), groups[g].end(), rng);
    }
    std::vector<std::vector<std::size_t>> folds(k);
    std::size_t pos = 0;
    for (const auto &g : groups)
        for (std::size_t i : g) folds[pos++ % k].push_back(i);
    for (auto &f : folds) std::sort(f.begin(), f.end());
    return folds;
}

/// Complement of a test partition.
inline std::vector<std::size_t> training_indices(std::size_t n, std::span<const std::size_t> test) {
    std::vector<char> in_test(n, 0);
    for (std::size_t i : test) in_test.at(i) = 1;
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < n; ++i)
        if (!in_test[i]) out.push_back(i);
    return out;
}

// ---------------------------------------------------------------------------
// Volume baseline and contrasts

struct LabelledValue {
    double value = 0.0;
    int label = 0;
};

struct BaselineResult {
    double threshold = 0.0;
    Metrics metrics;
    ROCCurve roc;
};

/// Youden threshold fitted on training volumes (lower volume => disease), applied to test.
inline BaselineResult volume_baseline(std::span<const LabelledValue> train, std::span<const LabelledValue> test) {
    auto split = [](std::span<const LabelledValue> s, std::vector<double> &v, std::vector<int> &l) {
        for (const auto &x : s) v.push_back(x.value), l.push_back(x.label);
    };
    std::vector<double> tv, sv;
    std::vector<int> tl, sl;
    split(train, tv, tl);
    split(test, sv, sl);
    BaselineResult r;
    r.threshold = youden_threshold(roc_auc(tv, tl, true));
    r.metrics = classification_metrics(apply_threshold(sv, r.threshold, true), sl);
    r.roc = roc_auc(sv, sl, true);
    return r;
}

/// One diagnostic contrast (e.g. AD vs CN) over model scores of the disease class.
struct ContrastResult {
    std::string name;
    std::size_t n = 0;
    double auc = 0.5;
    Metrics metrics;
};

inline ContrastResult evaluate_binary(std::string name, std::span<const double> scores, std::span<const int> labels,
                                      double threshold = 0.5, bool inverted = false) {
    ContrastResult c;
    c.name = std::move(name);
    c.n = scores.size();
    c.auc = roc_auc(scores, labels, inverted).auc;
    c.metrics = classification_metrics(apply_threshold(scores, threshold, inverted), labels);
    return c;
}

/// Scores and groups of the same subjects; keeps CN and `positive` cases only.
/// Predictions use `threshold` on the score (0.5 for class probabilities).
inline ContrastResult evaluate_contrast(std::span<const double> scores, std::span<const Group> groups, Group positive,
                                        double threshold = 0.5, bool inverted = false) {
    if (scores.size() != groups.size()) throw DataError("scores and groups differ in length");
    std::vector<double> s;
    std::vector<int> l;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (groups[i] == Group::CN || groups[i] == positive) s.push_back(scores[i]), l.push_back(groups[i] != Group::CN);
    return evaluate_binary(std::string(to_string(positive)) + " vs CN", s, l, threshold, inverted);
}

struct MeanSd {
    double mean = 0.0, sd = 0.0;
};

/// Sample standard deviation (n - 1); sd is 0 for a single value.
inline MeanSd mean_sd(std::span<const double> v) {
    MeanSd r;
    if (v.empty()) return r;
    r.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v) ss += (x - r.mean) * (x - r.mean);
        r.sd = std::sqrt(ss / double(v.size() - 1));
    }
    return r;
}

inline nlohmann::json to_json(const Metrics &m) {
    return {{"tp", m.tp},
            {"fp", m.fp},
            {"tn", m.tn},
            {"fn", m.fn},
            {"balanced_accuracy", m.balanced_accuracy},
            {"sensitivity", m.sensitivity},
            {"specificity", m.specificity},
            {"f1", m.f1},
            {"ppv", m.ppv},
            {"npv", m.npv}};
}

inline nlohmann::json to_json(const ContrastResult &c) {
    return {{"contrast", c.name}, {"n", c.n}, {"auc", c.auc}, {"metrics", to_json(c.metrics)}};
}

inline nlohmann::json to_json(const PearsonResult &p) {
    return {{"r", p.r}, {"n", p.n}, {"t", p.t}, {"p", p.p}};
}

/// Aligned text table: one row per contrast, columns mean +- SD over folds.
/// `folds[f]` holds the contrasts of fold f in a fixed order.
inline std::string format_fold_table(const std::vector<std::vector<ContrastResult>> &folds) {
    if (folds.empty()) return {};
    std::string out;
    char line[256];
    std::snprintf(line, sizeof(line), "%-12s %-15s %-15s %-15s %-15s %-15s %-15s %-15s\n", "contrast", "bal.acc",
                  "sensitivity", "specificity", "auc", "f1", "ppv", "npv");
    out += line;
    for (std::size_t c = 0; c < folds.front().size(); ++c) {
        auto column = [&](auto get) {
            std::vector<double> v;
            for (const auto &f : folds) v.push_back(get(f[c]));
            const auto ms = mean_sd(v);
            char cell[32];
            std::snprintf(cell, sizeof(cell), "%.3f +- %.3f", ms.mean, ms.sd);
            return std::string(cell);
        };
        std::snprintf(line, sizeof(line), "%-12s %-15s %-15s %-15s %-15s %-15s %-15s %-15s\n",
                      folds.front()[c].name.c_str(),
                      column([](const ContrastResult &r) { return r.metrics.balanced_accuracy; }).c_str(),
                      column([](const ContrastResult &r) { return r.metrics.sensitivity; }).c_str(),
                      column([](const ContrastResult &r) { return r.metrics.specificity; }).c_str(),
                      column([](const ContrastResult &r) { return r.auc; }).c_str(),
                      column([](const ContrastResult &r) { return r.metrics.f1; }).c_str(),
                      column([](const ContrastResult &r) { return r.metrics.ppv; }).c_str(),
                      column([](const ContrastResult &r) { return r.metrics.npv; }).c_str());
        out += line;
    }
    return out;
}

} // namespace relevis::eval
