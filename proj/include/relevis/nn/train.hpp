#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "../errors.hpp"
#include "../seed.hpp"
#include "augment.hpp"
#include "model.hpp"

namespace relevis::nn {

/// w_i = 0.5 * n / n_i.
inline std::vector<double> class_weights(std::span<const std::size_t> counts) {
    double n = 0.0;
    for (std::size_t c : counts) {
        if (c == 0) throw DegenerateClassError("class weights need at least one sample per class");
        n += double(c);
    }
    std::vector<double> w;
    for (std::size_t c : counts) w.push_back(0.5 * n / double(c));
    return w;
}

inline std::array<double, 2> class_weights(std::size_t negatives, std::size_t positives) {
    const std::array<std::size_t, 2> c{negatives, positives};
    const auto w = class_weights(std::span<const std::size_t>(c));
    return {w[0], w[1]};
}

template <class T>
struct Adam {
    double learning_rate = 1e-4;
    double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
    std::size_t step = 0;
    Gradients<T> first, second;

    explicit Adam(const Model<T> &m, double lr = 1e-4)
        : learning_rate(lr), first(zero_gradients(m)), second(zero_gradients(m)) {}

    void apply(Model<T> &m, const Gradients<T> &grads) {
        ++step;
        const double c1 = 1.0 - std::pow(beta1, double(step));
        const double c2 = 1.0 - std::pow(beta2, double(step));
        auto params = parameters(m);
        for (std::size_t p = 0; p < params.size(); ++p) {
            auto w = params[p].values;
            auto &mo = first[p];
            auto &ve = second[p];
            const auto &g = grads[p];
            for (std::size_t k = 0; k < w.size(); ++k) {
                mo[k] = T(beta1 * mo[k] + (1.0 - beta1) * g[k]);
                ve[k] = T(beta2 * ve[k] + (1.0 - beta2) * double(g[k]) * g[k]);
                const double mhat = mo[k] / c1, vhat = ve[k] / c2;
                w[k] = T(w[k] - learning_rate * mhat / (std::sqrt(vhat) + epsilon));
            }
        }
    }
};

/// Fold the batch statistics of a train-mode pass into the moving averages.
template <class T>
void update_moving_statistics(Model<T> &m, const Trace<T> &t) {
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        auto *bn = std::get_if<BatchNorm<T>>(&m.layers[i]);
        if (!bn || t.cache[i].mean.empty()) continue;
        for (std::size_t c = 0; c < bn->channels; ++c) {
            bn->moving_mean[c] = T(bn->momentum * bn->moving_mean[c] + (1.0 - bn->momentum) * t.cache[i].mean[c]);
            bn->moving_var[c] = T(bn->momentum * bn->moving_var[c] + (1.0 - bn->momentum) * t.cache[i].var[c]);
        }
    }
}

enum class CheckpointPolicy { BestOnTest, FixedEpochs };

struct TrainConfig {
    double learning_rate = 1e-4;
    std::size_t batch_size = 20;
    std::size_t epochs = 10;
    std::array<double, 2> class_weights{1.0, 1.0};
    std::uint64_t seed = 0;
    double l2_coefficient = 0.01;
    bool augmentation = true;
    CheckpointPolicy checkpoint = CheckpointPolicy::BestOnTest;
    std::optional<std::array<long, 3>> shifts; // default: scaled from the input dims

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be > 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(class_weights[0] > 0.0) || !(class_weights[1] > 0.0)) throw ConfigError("class weights must be > 0");
        if (!(l2_coefficient >= 0.0)) throw ConfigError("l2_coefficient must be >= 0");
    }
};

/// One labelled volume; label 0 = CN, 1 = MCI/AD.
struct Example {
    std::string id;
    const Volume3D *volume = nullptr;
    int label = 0;
};

struct EpochRecord {
    std::size_t epoch = 0; // 1-based
    double train_loss = 0.0;
    double test_balanced_accuracy = 0.0;
    double seconds = 0.0;
};

template <class T>
struct TrainResult {
    Model<T> model;
    std::vector<EpochRecord> history;
    std::size_t selected_epoch = 0; // 0 when no epoch ran
};

/// Mean per-class recall of thresholded (p >= 0.5) predictions over the classes present.
template <class T>
double balanced_accuracy_of(const Model<T> &m, std::span<const Example> set) {
    std::vector<const Volume3D *> vols;
    for (const auto &e : set) vols.push_back(e.volume);
    const auto probs = predict(m, std::span<const Volume3D *const>(vols));
    std::array<double, 2> hit{}, total{};
    for (std::size_t i = 0; i < set.size(); ++i) {
        const int pred = probs[i][1] >= 0.5 ? 1 : 0;
        total[set[i].label] += 1;
        hit[set[i].label] += pred == set[i].label ? 1 : 0;
    }
    double sum = 0.0, classes = 0.0;
    for (int c = 0; c < 2; ++c)
        if (total[c] > 0) sum += hit[c] / total[c], classes += 1;
    return sum / classes;
}

using EpochCallback = std::function<void(const EpochRecord &)>;

/// Mini-batch ADAM training with class-weighted cross-entropy.
/// Under BestOnTest the returned model is the epoch with the highest test balanced accuracy
/// (earliest on ties); under FixedEpochs it is the last epoch, and the test set may be empty
/// (test balanced accuracy is then NaN).
template <class T>
TrainResult<T> train(Model<T> model, std::span<const Example> train_set, std::span<const Example> test_set,
                     const TrainConfig &cfg, const EpochCallback &on_epoch = {}) {
    cfg.validate();
    if (train_set.empty()) throw DataError("training partition is empty");
    if (test_set.empty() && cfg.checkpoint == CheckpointPolicy::BestOnTest)
        throw DataError("test partition is empty; best-on-test checkpointing needs one");
    std::set<std::string> train_ids;
    for (const auto &e : train_set) {
        if (!e.volume) throw DataError("example " + e.id + " has no volume");
        if (e.label != 0 && e.label != 1) throw DataError("example " + e.id + " has label outside {0,1}");
        train_ids.insert(e.id);
    }
    for (const auto &e : test_set) {
        if (!e.volume) throw DataError("example " + e.id + " has no volume");
        if (e.label != 0 && e.label != 1) throw DataError("example " + e.id + " has label outside {0,1}");
        if (train_ids.count(e.id)) throw DataError("subject " + e.id + " is in both train and test partitions");
    }

    TrainResult<T> result{model, {}, 0};
    if (cfg.epochs == 0) return result;

    const auto shifts = cfg.shifts.value_or(default_shifts(model.input_dims));
    const std::size_t variants = cfg.augmentation ? kVariants : 1;
    const LossConfig loss_cfg{cfg.class_weights, cfg.l2_coefficient};
    Adam<T> adam(model, cfg.learning_rate);

    std::vector<std::pair<std::size_t, std::size_t>> items; // (example, variant)
    for (std::size_t i = 0; i < train_set.size(); ++i)
        for (std::size_t k = 0; k < variants; ++k) items.emplace_back(i, k);

    double best = -1.0;
    std::size_t step = 0;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto start = std::chrono::steady_clock::now();
        std::mt19937_64 rng(mix_seed(cfg.seed, epoch));
        std::shuffle(items.begin(), items.end(), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t b = 0; b < items.size(); b += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, items.size() - b);
            Tensor<T> batch(n, model.input_shape());
            std::vector<int> labels(n);
            for (std::size_t s = 0; s < n; ++s) {
                const auto [i, k] = items[b + s];
                const Volume3D &src = *train_set[i].volume;
                auto dst = batch.sample(s);
                if (k == 0) {
                    for (std::size_t v = 0; v < dst.size(); ++v) dst[v] = T(src[v]);
                } else {
                    const Volume3D aug = augment_variant(src, k, shifts);
                    for (std::size_t v = 0; v < dst.size(); ++v) dst[v] = T(aug[v]);
                }
                labels[s] = train_set[i].label;
            }
            auto lg = loss_and_grads(model, std::move(batch), labels, loss_cfg, mix_seed(cfg.seed ^ 0xd20f, step++));
            adam.apply(model, lg.grads);
            update_moving_statistics(model, lg.trace);
            loss_sum += lg.loss;
            ++batches;
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / double(batches);
        rec.test_balanced_accuracy =
            test_set.empty() ? std::numeric_limits<double>::quiet_NaN() : balanced_accuracy_of(model, test_set);
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.history.push_back(rec);
        if (on_epoch) on_epoch(rec);
        const bool take = cfg.checkpoint == CheckpointPolicy::FixedEpochs ? epoch == cfg.epochs
                                                                           : rec.test_balanced_accuracy > best;
        if (take) {
            best = rec.test_balanced_accuracy;
            result.model = model;
            result.selected_epoch = epoch;
        }
    }
    return result;
}

} // namespace relevis::nn
