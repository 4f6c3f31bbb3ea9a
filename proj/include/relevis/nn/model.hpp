#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "../errors.hpp"
#include "kernels.hpp"
#include "layers.hpp"
#include "tensor.hpp"

namespace relevis::nn {

enum class Mode { Train, Infer };

template <class T>
struct Model {
    using value_type = T;
    Dims input_dims{};
    std::uint64_t seed = 0;
    std::vector<Layer<T>> layers;

    FeatureShape input_shape() const { return {1, input_dims}; }

    /// shapes()[i] is the per-sample input shape of layer i; the last entry is the output shape.
    std::vector<FeatureShape> shapes() const {
        std::vector<FeatureShape> s{input_shape()};
        for (const auto &l : layers) s.push_back(output_shape(l, s.back()));
        return s;
    }
};

/// Reference to one trainable parameter array.
template <class T>
struct ParamRef {
    std::span<T> values;
    std::size_t layer;
    std::string name;
    bool l2;
};

/// Trainable parameters in declared order: conv (weight, bias), batchnorm (gamma, beta), dense (weight, bias).
template <class M>
auto parameters(M &model) {
    using T = typename std::remove_const_t<M>::value_type;
    using V = std::conditional_t<std::is_const_v<M>, const T, T>;
    std::vector<ParamRef<V>> out;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        auto &layer = model.layers[i];
        if (auto *c = std::get_if<Conv3D<T>>(&layer)) {
            out.push_back({std::span<V>(c->weight), i, "conv3d.weight", false});
            out.push_back({std::span<V>(c->bias), i, "conv3d.bias", false});
        } else if (auto *b = std::get_if<BatchNorm<T>>(&layer)) {
            out.push_back({std::span<V>(b->gamma), i, "batchnorm.gamma", false});
            out.push_back({std::span<V>(b->beta), i, "batchnorm.beta", false});
        } else if (auto *d = std::get_if<Dense<T>>(&layer)) {
            out.push_back({std::span<V>(d->weight), i, "dense.weight", d->l2});
            out.push_back({std::span<V>(d->bias), i, "dense.bias", false});
        }
    }
    return out;
}

template <class T>
std::size_t trainable_parameter_count(const Model<T> &m) {
    std::size_t n = 0;
    for (const auto &p : parameters(m)) n += p.values.size();
    return n;
}

/// Closed-form trainable parameter count of the standard architecture at the given input dims.
inline std::size_t expected_parameter_count(const Dims &input) {
    constexpr std::size_t ch = 5, taps = 27;
    const std::size_t conv = (1 * ch * taps + ch) + 2 * (ch * ch * taps + ch);
    const std::size_t bn = 3 * 2 * ch;
    const Dims last = pooled(pooled(pooled(input)));
    const std::size_t flat = ch * last.voxels();
    const std::size_t dense = (flat * 64 + 64) + (64 * 32 + 32) + (32 * 2 + 2);
    return conv + bn + dense;
}

/// Build the standard network:
///   3 x [Conv3D(5, 3^3, same) -> ReLU -> MaxPool(2^3) -> BatchNorm]
///   -> Flatten -> [Dropout(0.1) -> Dense(64) -> ReLU] -> [Dropout -> Dense(32) -> ReLU]
///   -> [Dropout -> Dense(2)] -> Softmax
/// Weights use Glorot-uniform bounds, biases start at zero.
template <class T = float>
Model<T> build_model(const Dims &input_dims, std::uint64_t seed) {
    if (input_dims.nx < 8 || input_dims.ny < 8 || input_dims.nz < 8)
        throw ShapeError("input dims " + to_string(input_dims) + " too small; each axis needs at least 8 voxels");
    Model<T> m;
    m.input_dims = input_dims;
    m.seed = seed;
    std::mt19937_64 rng(seed);
    auto glorot = [&](std::vector<T> &w, std::size_t n, double fan_in, double fan_out) {
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> u(-bound, bound);
        w.resize(n);
        for (auto &v : w) v = static_cast<T>(u(rng));
    };
    constexpr std::size_t ch = 5;
    for (std::size_t block = 0; block < 3; ++block) {
        Conv3D<T> c;
        c.in_channels = block == 0 ? 1 : ch;
        c.out_channels = ch;
        glorot(c.weight, c.out_channels * c.in_channels * kernels::kTaps, double(c.in_channels * kernels::kTaps),
               double(c.out_channels * kernels::kTaps));
        c.bias.assign(ch, T(0));
        m.layers.push_back(std::move(c));
        m.layers.push_back(ReLU{});
        m.layers.push_back(MaxPool3D{});
        BatchNorm<T> bn;
        bn.channels = ch;
        bn.gamma.assign(ch, T(1));
        bn.beta.assign(ch, T(0));
        bn.moving_mean.assign(ch, T(0));
        bn.moving_var.assign(ch, T(1));
        m.layers.push_back(std::move(bn));
    }
    m.layers.push_back(Flatten{});
    std::size_t features = ch * pooled(pooled(pooled(input_dims))).voxels();
    const std::array<std::size_t, 3> widths{64, 32, 2};
    for (std::size_t k = 0; k < widths.size(); ++k) {
        m.layers.push_back(Dropout{0.1});
        Dense<T> d;
        d.in_features = features;
        d.out_features = widths[k];
        glorot(d.weight, d.in_features * d.out_features, double(d.in_features), double(d.out_features));
        d.bias.assign(d.out_features, T(0));
        d.l2 = k > 0;
        m.layers.push_back(std::move(d));
        if (k + 1 < widths.size()) m.layers.push_back(ReLU{});
        features = widths[k];
    }
    m.layers.push_back(Softmax{});
    return m;
}

/// Check a model against the standard layer sequence; throws FormatError on mismatch.
template <class T>
void validate_architecture(const Model<T> &m) {
    const std::vector<std::string> expected{
        "conv3d", "relu", "maxpool3d", "batchnorm", "conv3d", "relu", "maxpool3d", "batchnorm",
        "conv3d", "relu", "maxpool3d", "batchnorm", "flatten", "dropout", "dense", "relu",
        "dropout", "dense", "relu", "dropout", "dense", "softmax"};
    if (m.layers.size() != expected.size()) throw FormatError("unexpected layer count");
    for (std::size_t i = 0; i < expected.size(); ++i)
        if (layer_name(m.layers[i]) != expected[i])
            throw FormatError("layer " + std::to_string(i) + " is " + layer_name(m.layers[i]) + ", expected " +
                              expected[i]);
    auto shapes = m.shapes();
    if (shapes.back().channels != 2) throw FormatError("network must end in two classes");
}

template <class U, class T>
Model<U> convert(const Model<T> &m) {
    auto cast = [](const std::vector<T> &v) { return std::vector<U>(v.begin(), v.end()); };
    Model<U> out;
    out.input_dims = m.input_dims;
    out.seed = m.seed;
    for (const auto &layer : m.layers)
        out.layers.push_back(std::visit(
            overloaded{
                [&](const Conv3D<T> &c) -> Layer<U> {
                    return Conv3D<U>{c.in_channels, c.out_channels, cast(c.weight), cast(c.bias)};
                },
                [&](const BatchNorm<T> &b) -> Layer<U> {
                    return BatchNorm<U>{b.channels,         cast(b.gamma),    cast(b.beta), cast(b.moving_mean),
                                        cast(b.moving_var), b.momentum,       b.epsilon};
                },
                [&](const Dense<T> &d) -> Layer<U> {
                    return Dense<U>{d.in_features, d.out_features, cast(d.weight), cast(d.bias), d.l2};
                },
                [](const ReLU &l) -> Layer<U> { return l; },
                [](const MaxPool3D &l) -> Layer<U> { return l; },
                [](const Dropout &l) -> Layer<U> { return l; },
                [](const Flatten &l) -> Layer<U> { return l; },
                [](const Softmax &l) -> Layer<U> { return l; },
            },
            layer));
    return out;
}

// ---------------------------------------------------------------------------
// Forward pass

template <class T>
struct LayerCache {
    std::vector<std::uint32_t> argmax; // pooling winners, index into the input channel plane
    std::vector<T> mean, var;          // batch statistics (train-mode batchnorm)
    std::vector<T> mask;               // dropout multipliers (train mode)
};

/// Activations of one forward pass: acts[i] is the input of layer i, acts.back() the network output.
template <class T>
struct Trace {
    Mode mode = Mode::Infer;
    std::vector<Tensor<T>> acts;
    std::vector<LayerCache<T>> cache;

    const Tensor<T> &input() const { return acts.front(); }
    const Tensor<T> &output() const { return acts.back(); }
    /// Pre-softmax class scores.
    const Tensor<T> &logits() const { return acts[acts.size() - 2]; }
};

namespace detail {

inline std::uint64_t layer_seed(std::uint64_t seed, std::size_t layer) {
    std::uint64_t z = seed ^ (0x9e3779b97f4a7c15ull * (layer + 1));
    z = (z ^ (z >> 31)) * 0xbf58476d1ce4e5b9ull;
    return z ^ (z >> 29);
}

template <class T>
void forward_layer(const Layer<T> &layer, std::size_t index, const Tensor<T> &in, Tensor<T> &out,
                   LayerCache<T> &cache, Mode mode, std::uint64_t dropout_seed) {
    const std::size_t n = in.batch;
    out = Tensor<T>(n, output_shape(layer, in.shape));
    std::visit(
        overloaded{
            [&](const Conv3D<T> &c) {
                if (in.shape.channels != c.in_channels) throw ShapeError("conv3d input channel mismatch");
                for (std::size_t s = 0; s < n; ++s)
                    kernels::conv_forward(in.sample(s).data(), c.in_channels, out.sample(s).data(), c.out_channels,
                                          in.shape.spatial, c.weight.data(), c.bias.data());
            },
            [&](const ReLU &) {
                for (std::size_t k = 0; k < in.data.size(); ++k) out.data[k] = in.data[k] > T(0) ? in.data[k] : T(0);
            },
            [&](const MaxPool3D &) {
                const Dims &g = in.shape.spatial;
                const Dims o = out.shape.spatial;
                if (o.voxels() == 0) throw ShapeError("pooling input too small");
                cache.argmax.assign(out.data.size(), 0);
                for (std::size_t s = 0; s < n; ++s)
                    for (std::size_t c = 0; c < in.shape.channels; ++c) {
                        const T *src = in.channel(s, c);
                        T *dst = out.channel(s, c);
                        std::uint32_t *win = cache.argmax.data() + (s * out.shape.channels + c) * o.voxels();
                        for (std::size_t z = 0; z < o.nz; ++z)
                            for (std::size_t y = 0; y < o.ny; ++y)
                                for (std::size_t x = 0; x < o.nx; ++x) {
                                    std::size_t best = g.index(2 * x, 2 * y, 2 * z);
                                    for (std::size_t dz = 0; dz < 2; ++dz)
                                        for (std::size_t dy = 0; dy < 2; ++dy)
                                            for (std::size_t dx = 0; dx < 2; ++dx) {
                                                const std::size_t k = g.index(2 * x + dx, 2 * y + dy, 2 * z + dz);
                                                if (src[k] > src[best]) best = k;
                                            }
                                    const std::size_t oi = o.index(x, y, z);
                                    dst[oi] = src[best];
                                    win[oi] = static_cast<std::uint32_t>(best);
                                }
                    }
            },
            [&](const BatchNorm<T> &b) {
                const std::size_t plane = in.shape.plane();
                if (mode == Mode::Train) {
                    cache.mean.assign(b.channels, T(0));
                    cache.var.assign(b.channels, T(0));
                    const double count = double(n * plane);
                    for (std::size_t c = 0; c < b.channels; ++c) {
                        double sum = 0.0;
                        for (std::size_t s = 0; s < n; ++s) {
                            const T *p = in.channel(s, c);
                            for (std::size_t k = 0; k < plane; ++k) sum += p[k];
                        }
                        const double mean = sum / count;
                        double ss = 0.0;
                        for (std::size_t s = 0; s < n; ++s) {
                            const T *p = in.channel(s, c);
                            for (std::size_t k = 0; k < plane; ++k) ss += (p[k] - mean) * (p[k] - mean);
                        }
                        cache.mean[c] = T(mean);
                        cache.var[c] = T(ss / count);
                    }
                }
                for (std::size_t c = 0; c < b.channels; ++c) {
                    const T mean = mode == Mode::Train ? cache.mean[c] : b.moving_mean[c];
                    const T var = mode == Mode::Train ? cache.var[c] : b.moving_var[c];
                    const T scale = b.gamma[c] / std::sqrt(var + T(b.epsilon));
                    const T shift = b.beta[c] - mean * scale;
                    for (std::size_t s = 0; s < n; ++s) {
                        const T *p = in.channel(s, c);
                        T *q = out.channel(s, c);
                        for (std::size_t k = 0; k < plane; ++k) q[k] = p[k] * scale + shift;
                    }
                }
            },
            [&](const Dropout &d) {
                if (mode == Mode::Infer || d.rate <= 0.0) {
                    out.data = in.data;
                    return;
                }
                std::mt19937_64 rng(layer_seed(dropout_seed, index));
                std::bernoulli_distribution keep(1.0 - d.rate);
                const T scale = T(1.0 / (1.0 - d.rate));
                cache.mask.resize(in.data.size());
                for (std::size_t k = 0; k < in.data.size(); ++k) {
                    cache.mask[k] = keep(rng) ? scale : T(0);
                    out.data[k] = in.data[k] * cache.mask[k];
                }
            },
            [&](const Flatten &) { out.data = in.data; },
            [&](const Dense<T> &d) {
                if (in.shape.size() != d.in_features) throw ShapeError("dense input size mismatch");
                for (std::size_t s = 0; s < n; ++s) {
                    const T *x = in.sample(s).data();
                    T *y = out.sample(s).data();
                    for (std::size_t o = 0; o < d.out_features; ++o) {
                        const T *w = d.weight.data() + o * d.in_features;
                        T acc = d.bias[o];
                        for (std::size_t i = 0; i < d.in_features; ++i) acc += w[i] * x[i];
                        y[o] = acc;
                    }
                }
            },
            [&](const Softmax &) {
                const std::size_t k = in.shape.size();
                for (std::size_t s = 0; s < n; ++s) {
                    const T *x = in.sample(s).data();
                    T *y = out.sample(s).data();
                    const T mx = *std::max_element(x, x + k);
                    T sum = T(0);
                    for (std::size_t j = 0; j < k; ++j) sum += (y[j] = std::exp(x[j] - mx));
                    for (std::size_t j = 0; j < k; ++j) y[j] /= sum;
                }
            },
        },
        layer);
}

} // namespace detail

template <class T>
Trace<T> forward(const Model<T> &m, Tensor<T> input, Mode mode = Mode::Infer, std::uint64_t dropout_seed = 0) {
    if (input.shape != m.input_shape())
        throw ShapeError("input shape " + to_string(input.shape) + " does not match model input " +
                         to_string(m.input_shape()));
    Trace<T> t;
    t.mode = mode;
    t.acts.reserve(m.layers.size() + 1);
    t.acts.push_back(std::move(input));
    t.cache.resize(m.layers.size());
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        Tensor<T> out;
        detail::forward_layer(m.layers[i], i, t.acts[i], out, t.cache[i], mode, dropout_seed);
        for (T v : out.data)
            if (!std::isfinite(v))
                throw NumericError("non-finite activation in layer " + std::to_string(i) + " (" +
                                   layer_name(m.layers[i]) + ")");
        t.acts.push_back(std::move(out));
    }
    return t;
}

template <class T>
struct ForwardResult {
    std::array<double, 2> probabilities{};
    Trace<T> trace;
};

/// Single-volume forward pass returning class probabilities (CN, disease) and the trace.
template <class T>
ForwardResult<T> forward(const Model<T> &m, const Volume3D &v, Mode mode = Mode::Infer, std::uint64_t dropout_seed = 0) {
    if (v.dims() != m.input_dims)
        throw ShapeError("volume dims " + to_string(v.dims()) + " do not match model input " + to_string(m.input_dims));
    ForwardResult<T> r;
    r.trace = forward(m, to_tensor<T>(v), mode, dropout_seed);
    const auto &out = r.trace.output();
    r.probabilities = {double(out.data[0]), double(out.data[1])};
    return r;
}

/// Inference-mode probabilities for many volumes, evaluated in chunks.
template <class T>
std::vector<std::array<double, 2>> predict(const Model<T> &m, std::span<const Volume3D *const> volumes,
                                           std::size_t chunk = 16) {
    std::vector<std::array<double, 2>> out;
    out.reserve(volumes.size());
    for (std::size_t start = 0; start < volumes.size(); start += chunk) {
        const auto part = volumes.subspan(start, std::min(chunk, volumes.size() - start));
        for (const auto *v : part)
            if (v->dims() != m.input_dims) throw ShapeError("volume dims do not match model input");
        const auto trace = forward(m, to_tensor<T>(part), Mode::Infer);
        const auto &o = trace.output();
        for (std::size_t s = 0; s < part.size(); ++s) out.push_back({double(o.sample(s)[0]), double(o.sample(s)[1])});
    }
    return out;
}

template <class T>
std::array<double, 2> predict(const Model<T> &m, const Volume3D &v) {
    const Volume3D *p = &v;
    return predict(m, std::span<const Volume3D *const>(&p, 1)).front();
}

// ---------------------------------------------------------------------------
// Backward pass

template <class T>
using Gradients = std::vector<std::vector<T>>;

template <class T>
Gradients<T> zero_gradients(const Model<T> &m) {
    Gradients<T> g;
    for (const auto &p : parameters(m)) g.emplace_back(p.values.size(), T(0));
    return g;
}

/// Back-propagate `d_last` (gradient w.r.t. the output of layer `from`) down to the input.
/// Parameter gradients are accumulated into `grads` (layout of parameters()).
template <class T>
void backward(const Model<T> &m, const Trace<T> &t, std::size_t from, Tensor<T> d_last, Gradients<T> &grads) {
    std::vector<std::size_t> first_param(m.layers.size(), 0);
    {
        std::size_t k = 0;
        for (std::size_t i = 0; i < m.layers.size(); ++i) {
            first_param[i] = k;
            const auto &l = m.layers[i];
            if (std::holds_alternative<Conv3D<T>>(l) || std::holds_alternative<BatchNorm<T>>(l) ||
                std::holds_alternative<Dense<T>>(l))
                k += 2;
        }
    }
    std::vector<T> row;
    Tensor<T> dout = std::move(d_last);
    for (std::size_t i = from + 1; i-- > 0;) {
        const Tensor<T> &in = t.acts[i];
        const auto &cache = t.cache[i];
        const bool need_input = i > 0;
        Tensor<T> din(in.batch, in.shape);
        const std::size_t n = in.batch;
        std::visit(
            overloaded{
                [&](const Conv3D<T> &c) {
                    T *dw = grads[first_param[i]].data();
                    T *db = grads[first_param[i] + 1].data();
                    for (std::size_t s = 0; s < n; ++s) {
                        kernels::conv_backward_weights(in.sample(s).data(), c.in_channels, dout.sample(s).data(),
                                                       c.out_channels, in.shape.spatial, dw, db, row);
                        if (need_input)
                            kernels::conv_backward_input(dout.sample(s).data(), c.out_channels, din.sample(s).data(),
                                                         c.in_channels, in.shape.spatial, c.weight.data());
                    }
                },
                [&](const ReLU &) {
                    for (std::size_t k = 0; k < in.data.size(); ++k)
                        din.data[k] = in.data[k] > T(0) ? dout.data[k] : T(0);
                },
                [&](const MaxPool3D &) {
                    const std::size_t oplane = dout.shape.plane();
                    for (std::size_t s = 0; s < n; ++s)
                        for (std::size_t c = 0; c < in.shape.channels; ++c) {
                            const T *g = dout.channel(s, c);
                            T *d = din.channel(s, c);
                            const std::uint32_t *win = cache.argmax.data() + (s * in.shape.channels + c) * oplane;
                            for (std::size_t k = 0; k < oplane; ++k) d[win[k]] += g[k];
                        }
                },
                [&](const BatchNorm<T> &b) {
                    T *dgamma = grads[first_param[i]].data();
                    T *dbeta = grads[first_param[i] + 1].data();
                    const std::size_t plane = in.shape.plane();
                    const double count = double(n * plane);
                    for (std::size_t c = 0; c < b.channels; ++c) {
                        const bool train = t.mode == Mode::Train;
                        const T mean = train ? cache.mean[c] : b.moving_mean[c];
                        const T var = train ? cache.var[c] : b.moving_var[c];
                        const T inv_std = T(1) / std::sqrt(var + T(b.epsilon));
                        double sum_dy = 0.0, sum_dy_xhat = 0.0;
                        for (std::size_t s = 0; s < n; ++s) {
                            const T *x = in.channel(s, c);
                            const T *dy = dout.channel(s, c);
                            for (std::size_t k = 0; k < plane; ++k) {
                                sum_dy += dy[k];
                                sum_dy_xhat += dy[k] * (x[k] - mean) * inv_std;
                            }
                        }
                        dgamma[c] += T(sum_dy_xhat);
                        dbeta[c] += T(sum_dy);
                        for (std::size_t s = 0; s < n; ++s) {
                            const T *x = in.channel(s, c);
                            const T *dy = dout.channel(s, c);
                            T *dx = din.channel(s, c);
                            if (train) {
                                const T a = b.gamma[c] * inv_std;
                                const T mdy = T(sum_dy / count), mdyx = T(sum_dy_xhat / count);
                                for (std::size_t k = 0; k < plane; ++k)
                                    dx[k] = a * (dy[k] - mdy - (x[k] - mean) * inv_std * mdyx);
                            } else {
                                for (std::size_t k = 0; k < plane; ++k) dx[k] = dy[k] * b.gamma[c] * inv_std;
                            }
                        }
                    }
                },
                [&](const Dropout &) {
                    if (cache.mask.empty())
                        din.data = dout.data;
                    else
                        for (std::size_t k = 0; k < din.data.size(); ++k) din.data[k] = dout.data[k] * cache.mask[k];
                },
                [&](const Flatten &) { din.data = dout.data; },
                [&](const Dense<T> &d) {
                    T *dw = grads[first_param[i]].data();
                    T *db = grads[first_param[i] + 1].data();
                    for (std::size_t s = 0; s < n; ++s) {
                        const T *x = in.sample(s).data();
                        const T *dy = dout.sample(s).data();
                        T *dx = din.sample(s).data();
                        for (std::size_t o = 0; o < d.out_features; ++o) {
                            const T g = dy[o];
                            db[o] += g;
                            if (g == T(0)) continue;
                            T *wrow = dw + o * d.in_features;
                            const T *w = d.weight.data() + o * d.in_features;
                            for (std::size_t k = 0; k < d.in_features; ++k) wrow[k] += g * x[k];
                            if (need_input)
                                for (std::size_t k = 0; k < d.in_features; ++k) dx[k] += g * w[k];
                        }
                    }
                },
                [&](const Softmax &) {
                    const std::size_t k = in.shape.size();
                    const Tensor<T> &y = t.acts[i + 1];
                    for (std::size_t s = 0; s < n; ++s) {
                        const T *p = y.sample(s).data();
                        const T *g = dout.sample(s).data();
                        T dot = T(0);
                        for (std::size_t j = 0; j < k; ++j) dot += p[j] * g[j];
                        T *dx = din.sample(s).data();
                        for (std::size_t j = 0; j < k; ++j) dx[j] = p[j] * (g[j] - dot);
                    }
                },
            },
            m.layers[i]);
        dout = std::move(din);
    }
}

struct LossConfig {
    std::array<double, 2> class_weights{1.0, 1.0};
    double l2_coefficient = 0.01;
};

template <class T>
struct LossAndGrads {
    double loss = 0.0;
    double data_loss = 0.0;
    Gradients<T> grads;
    Trace<T> trace;
};

/// Class-weighted cross-entropy (batch mean) plus the L2 penalty on flagged dense weights,
/// with exact gradients. The network's final Softmax is folded into the loss gradient.
template <class T>
LossAndGrads<T> loss_and_grads(const Model<T> &m, Tensor<T> batch, std::span<const int> labels,
                               const LossConfig &cfg, std::uint64_t dropout_seed = 0, Mode mode = Mode::Train) {
    if (batch.batch == 0) throw DataError("empty batch");
    if (labels.size() != batch.batch) throw DataError("label count does not match batch size");
    for (int y : labels)
        if (y != 0 && y != 1) throw DataError("labels must be 0 (CN) or 1 (MCI/AD)");
    if (m.layers.empty() || !std::holds_alternative<Softmax>(m.layers.back()))
        throw ShapeError("model must end in a softmax layer");

    LossAndGrads<T> r;
    r.trace = forward(m, std::move(batch), mode, dropout_seed);
    const Tensor<T> &logits = r.trace.logits();
    const std::size_t n = logits.batch, k = logits.shape.size();
    Tensor<T> dlogits(n, logits.shape);
    double loss = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        const T *z = logits.sample(s).data();
        const double mx = double(*std::max_element(z, z + k));
        double sum = 0.0;
        for (std::size_t j = 0; j < k; ++j) sum += std::exp(double(z[j]) - mx);
        const double lse = mx + std::log(sum);
        const auto y = static_cast<std::size_t>(labels[s]);
        const double w = cfg.class_weights[y];
        loss += w * (lse - double(z[y]));
        T *g = dlogits.sample(s).data();
        for (std::size_t j = 0; j < k; ++j) {
            const double p = std::exp(double(z[j]) - lse);
            g[j] = T(w * (p - (j == y ? 1.0 : 0.0)) / double(n));
        }
    }
    r.data_loss = loss / double(n);

    r.grads = zero_gradients(m);
    backward(m, r.trace, m.layers.size() - 2, std::move(dlogits), r.grads);

    double penalty = 0.0;
    const auto params = parameters(m);
    for (std::size_t p = 0; p < params.size(); ++p) {
        if (!params[p].l2 || cfg.l2_coefficient == 0.0) continue;
        for (std::size_t k2 = 0; k2 < params[p].values.size(); ++k2) {
            const T w = params[p].values[k2];
            penalty += double(w) * double(w);
            r.grads[p][k2] += T(2.0 * cfg.l2_coefficient) * w;
        }
    }
    r.loss = r.data_loss + cfg.l2_coefficient * penalty;
    return r;
}

/// ReLU signs and pooling winners of a trace; equal patterns mean the same linear piece.
template <class T>
std::vector<std::uint32_t> activation_pattern(const Model<T> &m, const Trace<T> &t) {
    std::vector<std::uint32_t> out;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        if (std::holds_alternative<ReLU>(m.layers[i]))
            for (T v : t.acts[i].data) out.push_back(v > T(0) ? 1u : 0u);
        else if (std::holds_alternative<MaxPool3D>(m.layers[i]))
            out.insert(out.end(), t.cache[i].argmax.begin(), t.cache[i].argmax.end());
    }
    return out;
}

} // namespace relevis::nn
