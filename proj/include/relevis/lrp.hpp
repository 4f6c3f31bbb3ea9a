#pragma once

// Layer-wise relevance propagation through the standard network.
//
// Convolutions use the alpha=1/beta=0 rule, dense layers the epsilon rule (both configurable).
// A batchnorm layer y = s*x + t is folded into the next linear layer (conv or dense, possibly
// behind flatten/dropout): its contributions become x*(s*w) and the shift terms t*w join the
// bias. Biases and shift terms enter the denominators, so they absorb relevance.
// Propagation runs in double precision on a converted copy of the model.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "nn/kernels.hpp"
#include "nn/model.hpp"
#include "volume.hpp"

namespace relevis::lrp {

enum class Rule { Alpha1Beta0, Epsilon };
enum class Init { Logit, Probability };

inline std::string to_string(Rule r) { return r == Rule::Alpha1Beta0 ? "alpha1beta0" : "epsilon"; }
inline std::string to_string(Init i) { return i == Init::Logit ? "logit" : "probability"; }

inline Rule parse_rule(const std::string &s) {
    if (s == "alpha1beta0") return Rule::Alpha1Beta0;
    if (s == "epsilon") return Rule::Epsilon;
    throw ConfigError("unknown LRP rule '" + s + "'");
}

inline Init parse_init(const std::string &s) {
    if (s == "logit") return Init::Logit;
    if (s == "probability") return Init::Probability;
    throw ConfigError("unknown relevance initialization '" + s + "'");
}

struct RuleConfig {
    Rule conv_rule = Rule::Alpha1Beta0;
    Rule dense_rule = Rule::Epsilon;
    double epsilon = 1e-10;
    Init init = Init::Logit;

    void validate() const {
        if (!(epsilon > 0.0) || !std::isfinite(epsilon)) throw ConfigError("epsilon must be > 0");
    }

    /// alpha=1/beta=0 on every linear layer.
    static RuleConfig pure() {
        RuleConfig c;
        c.dense_rule = Rule::Alpha1Beta0;
        return c;
    }

    std::string key() const {
        char eps[32];
        std::snprintf(eps, sizeof(eps), "%.17g", epsilon);
        return to_string(conv_rule) + "/" + to_string(dense_rule) + "/" + eps + "/" + to_string(init);
    }

    friend bool operator==(const RuleConfig &, const RuleConfig &) = default;
};

inline nlohmann::json to_json(const RuleConfig &c) {
    return {{"conv_rule", to_string(c.conv_rule)},
            {"dense_rule", to_string(c.dense_rule)},
            {"epsilon", c.epsilon},
            {"init", to_string(c.init)},
            {"batchnorm", "fold-into-next-linear"}};
}

inline RuleConfig rule_config_from_json(const nlohmann::json &j) {
    if (!j.is_object()) throw ConfigError("rule config must be a JSON object");
    RuleConfig c;
    for (const auto &[k, v] : j.items()) {
        try {
            if (k == "conv_rule") c.conv_rule = parse_rule(v.get<std::string>());
            else if (k == "dense_rule") c.dense_rule = parse_rule(v.get<std::string>());
            else if (k == "epsilon") c.epsilon = v.get<double>();
            else if (k == "init") c.init = parse_init(v.get<std::string>());
            else if (k != "batchnorm") throw ConfigError("unknown rule config key '" + k + "'");
        } catch (const nlohmann::json::exception &) {
            throw ConfigError("rule config key '" + k + "' has the wrong type");
        }
    }
    c.validate();
    return c;
}

struct RelevanceMap {
    Volume3D map;
    int target_class = 1;
    double total_output_relevance = 0.0;
    RuleConfig rules;
    std::array<double, 2> probabilities{};
    std::array<double, 2> logits{};
};

/// Relevance total after each propagation step, from the output down to the input.
struct LayerTotal {
    std::size_t layer;
    std::string name;
    double total;
};

struct Propagation {
    std::vector<double> input_relevance;
    std::vector<LayerTotal> totals;
};

namespace detail {

using nn::kernels::accumulate_shifted;
using nn::kernels::kTaps;
using nn::kernels::tap_offset;

inline double stabilize(double z, double eps) { return z + (z >= 0.0 ? eps : -eps); }

// Per-input-channel affine map of a batchnorm folded into the following layer.
struct Fold {
    std::vector<double> scale, shift; // per channel; empty when no batchnorm precedes
};

inline Fold make_fold(const nn::BatchNorm<double> &bn) {
    Fold f;
    for (std::size_t c = 0; c < bn.channels; ++c) {
        const double var = bn.moving_var[c] + bn.epsilon;
        if (!(var > 0.0)) throw NumericError("batchnorm variance + epsilon must be > 0");
        f.scale.push_back(bn.gamma[c] / std::sqrt(var));
        f.shift.push_back(bn.beta[c] - bn.moving_mean[c] * f.scale.back());
    }
    return f;
}

inline std::vector<double> dense_rule(const nn::Dense<double> &d, const std::vector<double> &x, const Fold &fold,
                                      std::size_t plane, const std::vector<double> &rout, Rule rule, double eps) {
    const std::size_t n = d.in_features;
    std::vector<double> s(n, 1.0), t(n, 0.0);
    if (!fold.scale.empty())
        for (std::size_t j = 0; j < n; ++j) s[j] = fold.scale[j / plane], t[j] = fold.shift[j / plane];
    std::vector<double> xs(n), rin(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) xs[j] = x[j] * s[j];
    for (std::size_t k = 0; k < d.out_features; ++k) {
        if (rout[k] == 0.0) continue;
        const double *w = d.weight.data() + k * n;
        if (rule == Rule::Alpha1Beta0) {
            double den = std::max(0.0, d.bias[k]);
            for (std::size_t j = 0; j < n; ++j) den += std::max(0.0, xs[j] * w[j]) + std::max(0.0, t[j] * w[j]);
            if (!(den > 0.0)) continue;
            const double q = rout[k] / den;
            for (std::size_t j = 0; j < n; ++j) rin[j] += q * std::max(0.0, xs[j] * w[j]);
        } else {
            double z = d.bias[k];
            for (std::size_t j = 0; j < n; ++j) z += (xs[j] + t[j]) * w[j];
            const double q = rout[k] / stabilize(z, eps);
            for (std::size_t j = 0; j < n; ++j) rin[j] += q * xs[j] * w[j];
        }
    }
    return rin;
}

inline std::vector<double> conv_rule(const nn::Conv3D<double> &c, const std::vector<double> &x, const Fold &fold,
                                     const Dims &g, const std::vector<double> &rout, Rule rule, double eps) {
    const std::size_t ic = c.in_channels, oc = c.out_channels, plane = g.voxels();
    std::vector<double> sw(c.weight.size()), tw(c.weight.size());
    for (std::size_t o = 0; o < oc; ++o)
        for (std::size_t i = 0; i < ic; ++i)
            for (std::size_t t = 0; t < kTaps; ++t) {
                const std::size_t k = (o * ic + i) * kTaps + t;
                const double s = fold.scale.empty() ? 1.0 : fold.scale[i];
                const double sh = fold.shift.empty() ? 0.0 : fold.shift[i];
                sw[k] = c.weight[k] * s;
                tw[k] = c.weight[k] * sh;
            }
    auto filtered = [](const std::vector<double> &w, int sign) {
        std::vector<double> out(w.size());
        for (std::size_t k = 0; k < w.size(); ++k) out[k] = sign > 0 ? std::max(0.0, w[k]) : std::min(0.0, w[k]);
        return out;
    };
    // out[o] += sum_i w[o][i] (*) in[i]
    auto accumulate = [&](const std::vector<double> &in, const std::vector<double> &w, std::vector<double> &out) {
        for (std::size_t o = 0; o < oc; ++o)
            for (std::size_t i = 0; i < ic; ++i)
                for (std::size_t t = 0; t < kTaps; ++t) {
                    const double wk = w[(o * ic + i) * kTaps + t];
                    if (wk != 0.0) accumulate_shifted(in.data() + i * plane, out.data() + o * plane, g, tap_offset(t), wk);
                }
    };
    const std::vector<double> ones(ic * plane, 1.0);
    std::vector<double> den(oc * plane, 0.0), q(oc * plane, 0.0), rin(ic * plane, 0.0);

    if (rule == Rule::Alpha1Beta0) {
        std::vector<double> xpos(x.size()), xneg(x.size());
        for (std::size_t k = 0; k < x.size(); ++k) xpos[k] = std::max(0.0, x[k]), xneg[k] = std::min(0.0, x[k]);
        const auto swp = filtered(sw, 1), swn = filtered(sw, -1), twp = filtered(tw, 1);
        for (std::size_t o = 0; o < oc; ++o)
            std::fill(den.begin() + long(o * plane), den.begin() + long((o + 1) * plane), std::max(0.0, c.bias[o]));
        accumulate(xpos, swp, den);
        accumulate(xneg, swn, den);
        accumulate(ones, twp, den);
        for (std::size_t k = 0; k < den.size(); ++k) q[k] = den[k] > 0.0 ? rout[k] / den[k] : 0.0;
        std::vector<double> a(ic * plane, 0.0), b(ic * plane, 0.0);
        nn::kernels::conv_backward_input(q.data(), oc, a.data(), ic, g, swp.data());
        nn::kernels::conv_backward_input(q.data(), oc, b.data(), ic, g, swn.data());
        for (std::size_t k = 0; k < rin.size(); ++k) rin[k] = xpos[k] * a[k] + xneg[k] * b[k];
    } else {
        for (std::size_t o = 0; o < oc; ++o)
            std::fill(den.begin() + long(o * plane), den.begin() + long((o + 1) * plane), c.bias[o]);
        accumulate(x, sw, den);
        accumulate(ones, tw, den);
        for (std::size_t k = 0; k < den.size(); ++k) q[k] = rout[k] / stabilize(den[k], eps);
        std::vector<double> a(ic * plane, 0.0);
        nn::kernels::conv_backward_input(q.data(), oc, a.data(), ic, g, sw.data());
        for (std::size_t k = 0; k < rin.size(); ++k) rin[k] = x[k] * a[k];
    }
    return rin;
}

inline bool transparent(const nn::Layer<double> &l) {
    return std::holds_alternative<nn::Flatten>(l) || std::holds_alternative<nn::Dropout>(l);
}

} // namespace detail

/// Propagate `output_relevance` (one value per logit) from the pre-softmax layer to the input.
/// `trace` must come from an inference-mode forward pass of `m`.
inline Propagation propagate(const nn::Model<double> &m, const nn::Trace<double> &trace,
                             std::vector<double> output_relevance, const RuleConfig &cfg) {
    cfg.validate();
    if (m.layers.size() < 2 || !std::holds_alternative<nn::Softmax>(m.layers.back()))
        throw ShapeError("model must end in a softmax layer");
    const auto shapes = m.shapes();
    if (output_relevance.size() != trace.logits().data.size())
        throw ShapeError("output relevance must have one entry per logit");

    Propagation out;
    std::vector<double> r = std::move(output_relevance);
    auto total = [](const std::vector<double> &v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s;
    };
    out.totals.push_back({m.layers.size() - 1, "output", total(r)});

    long k = long(m.layers.size()) - 2;
    while (k >= 0) {
        const auto &layer = m.layers[std::size_t(k)];
        const std::string name = nn::layer_name(layer);
        long next = k - 1;
        std::visit(nn::overloaded{
                       [&](const nn::Dense<double> &d) {
                           long j = k - 1;
                           while (j >= 0 && detail::transparent(m.layers[std::size_t(j)])) --j;
                           detail::Fold fold;
                           std::size_t src = std::size_t(k), plane = 1;
                           if (j >= 0) {
                               if (const auto *bn = std::get_if<nn::BatchNorm<double>>(&m.layers[std::size_t(j)])) {
                                   fold = detail::make_fold(*bn);
                                   src = std::size_t(j);
                                   plane = shapes[src].plane();
                                   next = j - 1;
                               }
                           }
                           r = detail::dense_rule(d, trace.acts[src].data, fold, plane, r, cfg.dense_rule, cfg.epsilon);
                       },
                       [&](const nn::Conv3D<double> &c) {
                           detail::Fold fold;
                           std::size_t src = std::size_t(k);
                           if (k >= 1)
                               if (const auto *bn = std::get_if<nn::BatchNorm<double>>(&m.layers[std::size_t(k - 1)])) {
                                   fold = detail::make_fold(*bn);
                                   src = std::size_t(k - 1);
                                   next = k - 2;
                               }
                           r = detail::conv_rule(c, trace.acts[src].data, fold, shapes[src].spatial, r, cfg.conv_rule,
                                                 cfg.epsilon);
                       },
                       [&](const nn::MaxPool3D &) {
                           const auto &in = shapes[std::size_t(k)];
                           const std::size_t oplane = shapes[std::size_t(k) + 1].plane();
                           std::vector<double> rin(in.size(), 0.0);
                           const auto &win = trace.cache[std::size_t(k)].argmax;
                           for (std::size_t c = 0; c < in.channels; ++c)
                               for (std::size_t p = 0; p < oplane; ++p)
                                   rin[c * in.plane() + win[c * oplane + p]] += r[c * oplane + p];
                           r = std::move(rin);
                       },
                       [&](const nn::BatchNorm<double> &bn) {
                           // Not followed by a linear layer: treat as a diagonal linear layer.
                           const auto fold = detail::make_fold(bn);
                           const auto &x = trace.acts[std::size_t(k)].data;
                           const std::size_t plane = shapes[std::size_t(k)].plane();
                           for (std::size_t p = 0; p < x.size(); ++p) {
                               const double s = fold.scale[p / plane], t = fold.shift[p / plane];
                               if (cfg.conv_rule == Rule::Alpha1Beta0) {
                                   const double num = std::max(0.0, s * x[p]);
                                   const double den = num + std::max(0.0, t);
                                   r[p] = den > 0.0 ? r[p] * num / den : 0.0;
                               } else {
                                   r[p] = r[p] * s * x[p] / detail::stabilize(s * x[p] + t, cfg.epsilon);
                               }
                           }
                       },
                       [&](const nn::Softmax &) { throw ShapeError("softmax inside the network is not supported"); },
                       [](const auto &) {}, // relu, dropout, flatten: relevance passes through unchanged
                   },
                   layer);
        for (double v : r)
            if (!std::isfinite(v))
                throw NumericError("non-finite relevance at layer " + std::to_string(k) + " (" + name + ")");
        out.totals.push_back({std::size_t(k), name, total(r)});
        k = next;
    }
    out.input_relevance = std::move(r);
    return out;
}

/// Relevance of every input voxel for `target_class` (0 = CN, 1 = MCI/AD).
template <class T>
RelevanceMap relevance_map(const nn::Model<T> &model, const Volume3D &v, int target_class,
                           const RuleConfig &cfg = {}) {
    cfg.validate();
    if (target_class != 0 && target_class != 1) throw ConfigError("target class must be 0 or 1");
    const nn::Model<double> m = nn::convert<double>(model);
    const auto fr = nn::forward(m, v, nn::Mode::Infer);
    const auto &logits = fr.trace.logits().data;
    std::vector<double> init(logits.size(), 0.0);
    const auto t = std::size_t(target_class);
    init[t] = cfg.init == Init::Logit ? logits[t] : fr.probabilities[t];
    const double start = init[t];
    auto prop = propagate(m, fr.trace, std::move(init), cfg);

    bool all_zero = true;
    for (double x : prop.input_relevance) all_zero = all_zero && x == 0.0;
    if (start < 0.0 && all_zero)
        throw DegenerateRelevanceError("target logit is negative and no positive contribution reaches the input");

    std::vector<float> data(prop.input_relevance.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = float(prop.input_relevance[i]);
    RelevanceMap rm{v.with_data(std::move(data)), target_class, start, cfg, fr.probabilities,
                    {logits[0], logits[1]}};
    return rm;
}

/// Fold an inference-mode batchnorm into the convolution feeding it:
/// W' = W * g, b' = (b - mean) * g + beta with g = gamma / sqrt(var + eps) per output channel.
template <class T>
nn::Conv3D<T> fold_batchnorm(const nn::Conv3D<T> &conv, const nn::BatchNorm<T> &bn) {
    if (bn.channels != conv.out_channels) throw ShapeError("batchnorm channels must equal conv output channels");
    nn::Conv3D<T> out = conv;
    const std::size_t per = conv.in_channels * nn::kernels::kTaps;
    for (std::size_t o = 0; o < conv.out_channels; ++o) {
        const double var = double(bn.moving_var[o]) + bn.epsilon;
        if (!(var > 0.0)) throw NumericError("batchnorm variance + epsilon must be > 0");
        const double g = double(bn.gamma[o]) / std::sqrt(var);
        for (std::size_t k = 0; k < per; ++k) out.weight[o * per + k] = T(double(conv.weight[o * per + k]) * g);
        out.bias[o] = T((double(conv.bias[o]) - double(bn.moving_mean[o])) * g + double(bn.beta[o]));
    }
    return out;
}

struct ConservationReport {
    double sum_input = 0.0;
    double ratio = 0.0;
    double absorbed_share = 0.0; // 1 - ratio: relevance taken up by biases and stabilizers
};

inline ConservationReport conservation_report(const RelevanceMap &rm) {
    if (rm.total_output_relevance == 0.0) throw DegenerateRelevanceError("total output relevance is zero");
    ConservationReport r;
    for (float x : rm.map.data()) r.sum_input += x;
    r.ratio = r.sum_input / rm.total_output_relevance;
    r.absorbed_share = 1.0 - r.ratio;
    return r;
}

} // namespace relevis::lrp
