#pragma once

#include <random>

#include "relevis/nn/model.hpp"

namespace relevis::test {

/// Standard network with randomized batchnorm scales. Without `biases` every bias and every
/// batchnorm shift is zero, so alpha=1/beta=0 propagation conserves relevance exactly.
template <class T = float>
nn::Model<T> random_network(const Dims &d, std::uint64_t seed, bool biases, double bias_scale = 0.1) {
    auto m = nn::build_model<T>(d, seed);
    std::mt19937_64 rng(seed ^ 0x5eed);
    std::uniform_real_distribution<double> gamma(0.5, 1.5), var(0.5, 2.0), b(-bias_scale, bias_scale);
    for (auto &layer : m.layers) {
        if (auto *bn = std::get_if<nn::BatchNorm<T>>(&layer)) {
            for (std::size_t c = 0; c < bn->channels; ++c) {
                bn->gamma[c] = T(gamma(rng));
                bn->moving_var[c] = T(var(rng));
                if (biases) bn->beta[c] = T(b(rng)), bn->moving_mean[c] = T(b(rng));
            }
        } else if (biases) {
            if (auto *c = std::get_if<nn::Conv3D<T>>(&layer))
                for (auto &x : c->bias) x = T(b(rng));
            else if (auto *dn = std::get_if<nn::Dense<T>>(&layer))
                for (auto &x : dn->bias) x = T(b(rng));
        }
    }
    return m;
}

} // namespace relevis::test
