#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "errors.hpp"

namespace relevis {

/// Grid extent of a volume. Linear index is x-fastest: x + nx * (y + ny * z).
struct Dims {
    std::size_t nx = 0, ny = 0, nz = 0;

    constexpr std::size_t voxels() const noexcept { return nx * ny * nz; }
    constexpr std::size_t operator[](std::size_t axis) const noexcept {
        return axis == 0 ? nx : (axis == 1 ? ny : nz);
    }
    constexpr std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept {
        return x + nx * (y + ny * z);
    }
    constexpr std::array<std::size_t, 3> coords(std::size_t linear) const noexcept {
        return {linear % nx, (linear / nx) % ny, linear / (nx * ny)};
    }
    constexpr bool contains(long x, long y, long z) const noexcept {
        return x >= 0 && y >= 0 && z >= 0 && static_cast<std::size_t>(x) < nx &&
               static_cast<std::size_t>(y) < ny && static_cast<std::size_t>(z) < nz;
    }

    friend constexpr bool operator==(const Dims &, const Dims &) = default;
};

inline std::string to_string(const Dims &d) {
    return std::to_string(d.nx) + "x" + std::to_string(d.ny) + "x" + std::to_string(d.nz);
}

/// Row-major 3x4 spatial transform (NIfTI srow_x/y/z). Carried opaquely.
using Affine = std::array<float, 12>;

inline Affine scaling_affine(float voxel_size_mm, std::array<float, 3> origin_mm) {
    return {voxel_size_mm, 0.f, 0.f, origin_mm[0], //
            0.f, voxel_size_mm, 0.f, origin_mm[1], //
            0.f, 0.f, voxel_size_mm, origin_mm[2]};
}

/// Dense scalar field on an isotropic grid, stored as 32-bit floats.
class Volume3D {
public:
    Volume3D() = default;

    Volume3D(Dims dims, float voxel_size_mm, std::array<float, 3> origin_mm = {0.f, 0.f, 0.f})
        : Volume3D(dims, voxel_size_mm, scaling_affine(voxel_size_mm, origin_mm),
                   std::vector<float>(dims.voxels(), 0.f)) {}

    Volume3D(Dims dims, float voxel_size_mm, Affine transform, std::vector<float> data)
        : dims_(dims), voxel_size_mm_(voxel_size_mm), transform_(transform), data_(std::move(data)) {
        if (dims.nx == 0 || dims.ny == 0 || dims.nz == 0)
            throw DimsError("volume dims must be positive, got " + to_string(dims));
        if (!(voxel_size_mm > 0.f) || !std::isfinite(voxel_size_mm))
            throw RejectedError("voxel size must be positive and finite");
        if (data_.size() != dims.voxels())
            throw DimsError("data length " + std::to_string(data_.size()) + " does not match dims " +
                            to_string(dims));
    }

    const Dims &dims() const noexcept { return dims_; }
    float voxel_size_mm() const noexcept { return voxel_size_mm_; }
    double voxel_volume_ml() const noexcept {
        const double v = voxel_size_mm_;
        return v * v * v / 1000.0;
    }
    const Affine &transform() const noexcept { return transform_; }
    std::array<float, 3> origin_mm() const noexcept { return {transform_[3], transform_[7], transform_[11]}; }

    std::size_t size() const noexcept { return data_.size(); }
    std::span<const float> data() const noexcept { return data_; }
    std::span<float> data() noexcept { return data_; }

    float operator[](std::size_t i) const noexcept { return data_[i]; }
    float &operator[](std::size_t i) noexcept { return data_[i]; }
    float at(std::size_t x, std::size_t y, std::size_t z) const noexcept { return data_[dims_.index(x, y, z)]; }
    float &at(std::size_t x, std::size_t y, std::size_t z) noexcept { return data_[dims_.index(x, y, z)]; }

    bool all_finite() const noexcept {
        for (float v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    /// Same grid and geometry, new values.
    Volume3D with_data(std::vector<float> data) const {
        return Volume3D(dims_, voxel_size_mm_, transform_, std::move(data));
    }
    Volume3D zeros_like() const { return with_data(std::vector<float>(data_.size(), 0.f)); }

    double sum() const noexcept {
        double s = 0.0;
        for (float v : data_) s += v;
        return s;
    }

    friend bool operator==(const Volume3D &, const Volume3D &) = default;

private:
    Dims dims_{};
    float voxel_size_mm_ = 1.f;
    Affine transform_{};
    std::vector<float> data_;
};

inline void require_same_dims(const Dims &a, const Dims &b, const std::string &what) {
    if (a != b) throw DimsError(what + ": " + to_string(a) + " vs " + to_string(b));
}

} // namespace relevis
