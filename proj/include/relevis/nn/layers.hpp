#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "tensor.hpp"

namespace relevis::nn {

/// 3x3x3 convolution, zero "same" padding, stride 1. Weights are [out][in][27].
template <class T>
struct Conv3D {
    std::size_t in_channels = 1, out_channels = 5;
    std::vector<T> weight, bias;
};

struct ReLU {};

/// 2x2x2 max pooling, stride 2; odd trailing planes are dropped.
struct MaxPool3D {};

/// Per-channel batch normalization. Trainable: gamma, beta. Moving statistics are state.
template <class T>
struct BatchNorm {
    std::size_t channels = 5;
    std::vector<T> gamma, beta, moving_mean, moving_var;
    double momentum = 0.99;
    double epsilon = 1e-3;

    /// Inference-mode affine map y = scale * x + shift for channel c.
    T scale(std::size_t c) const { return gamma[c] / std::sqrt(moving_var[c] + T(epsilon)); }
    T shift(std::size_t c) const { return beta[c] - moving_mean[c] * scale(c); }
};

/// Inverted dropout: train-mode survivors are scaled by 1/(1-rate); identity at inference.
struct Dropout {
    double rate = 0.1;
};

struct Flatten {};

/// Fully connected layer, weights [out][in]. `l2` marks weights included in the L2 penalty.
template <class T>
struct Dense {
    std::size_t in_features = 0, out_features = 0;
    std::vector<T> weight, bias;
    bool l2 = false;
};

struct Softmax {};

template <class T>
using Layer = std::variant<Conv3D<T>, ReLU, MaxPool3D, BatchNorm<T>, Dropout, Flatten, Dense<T>, Softmax>;

template <class... Fs>
struct overloaded : Fs... {
    using Fs::operator()...;
};
template <class... Fs>
overloaded(Fs...) -> overloaded<Fs...>;

template <class T>
std::string layer_name(const Layer<T> &layer) {
    return std::visit(overloaded{
                          [](const Conv3D<T> &) { return std::string("conv3d"); },
                          [](const ReLU &) { return std::string("relu"); },
                          [](const MaxPool3D &) { return std::string("maxpool3d"); },
                          [](const BatchNorm<T> &) { return std::string("batchnorm"); },
                          [](const Dropout &) { return std::string("dropout"); },
                          [](const Flatten &) { return std::string("flatten"); },
                          [](const Dense<T> &) { return std::string("dense"); },
                          [](const Softmax &) { return std::string("softmax"); },
                      },
                      layer);
}

inline Dims pooled(const Dims &d) { return {d.nx / 2, d.ny / 2, d.nz / 2}; }

template <class T>
FeatureShape output_shape(const Layer<T> &layer, const FeatureShape &in) {
    return std::visit(overloaded{
                          [&](const Conv3D<T> &c) { return FeatureShape{c.out_channels, in.spatial}; },
                          [&](const MaxPool3D &) { return FeatureShape{in.channels, pooled(in.spatial)}; },
                          [&](const Flatten &) { return FeatureShape{in.size(), Dims{1, 1, 1}}; },
                          [&](const Dense<T> &d) { return FeatureShape{d.out_features, Dims{1, 1, 1}}; },
                          [&](const auto &) { return in; },
                      },
                      layer);
}

} // namespace relevis::nn
