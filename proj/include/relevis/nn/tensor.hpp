#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "../volume.hpp"

namespace relevis::nn {

/// Per-sample feature layout: channels x spatial grid. Dense features use a 1x1x1 grid.
struct FeatureShape {
    std::size_t channels = 1;
    Dims spatial{1, 1, 1};

    std::size_t plane() const noexcept { return spatial.voxels(); }
    std::size_t size() const noexcept { return channels * plane(); }
    friend bool operator==(const FeatureShape &, const FeatureShape &) = default;
};

inline std::string to_string(const FeatureShape &s) {
    return std::to_string(s.channels) + "@" + relevis::to_string(s.spatial);
}

/// Batch of samples, sample-major, channel-major within a sample, x-fastest within a channel.
template <class T>
struct Tensor {
    std::size_t batch = 0;
    FeatureShape shape;
    std::vector<T> data;

    Tensor() = default;
    Tensor(std::size_t n, FeatureShape s, T fill = T(0)) : batch(n), shape(s), data(n * s.size(), fill) {}

    std::size_t sample_size() const noexcept { return shape.size(); }
    std::span<T> sample(std::size_t i) noexcept { return {data.data() + i * sample_size(), sample_size()}; }
    std::span<const T> sample(std::size_t i) const noexcept { return {data.data() + i * sample_size(), sample_size()}; }
    T *channel(std::size_t i, std::size_t c) noexcept { return data.data() + i * sample_size() + c * shape.plane(); }
    const T *channel(std::size_t i, std::size_t c) const noexcept {
        return data.data() + i * sample_size() + c * shape.plane();
    }
};

/// Stack single-channel volumes into a batch tensor.
template <class T>
Tensor<T> to_tensor(std::span<const Volume3D *const> volumes) {
    if (volumes.empty()) return {};
    Tensor<T> t(volumes.size(), FeatureShape{1, volumes.front()->dims()});
    for (std::size_t i = 0; i < volumes.size(); ++i) {
        require_same_dims(volumes[i]->dims(), volumes.front()->dims(), "batch volumes differ in dims");
        auto dst = t.sample(i);
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = static_cast<T>((*volumes[i])[k]);
    }
    return t;
}

template <class T>
Tensor<T> to_tensor(const Volume3D &v) {
    const Volume3D *p = &v;
    return to_tensor<T>(std::span<const Volume3D *const>(&p, 1));
}

} // namespace relevis::nn
