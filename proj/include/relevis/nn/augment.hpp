#pragma once

// Fourteen-fold training augmentation: {identity, L/R flip} x {no shift, +-x, +-y, +-z}.

#include <array>
#include <cmath>
#include <cstddef>
#include <vector>

#include "../errors.hpp"
#include "../volume.hpp"

namespace relevis::nn {

inline constexpr std::size_t kVariants = 14;

/// Translation magnitude per axis: 10 voxels at 100x100x120, scaled proportionally to the grid.
inline std::array<long, 3> default_shifts(const Dims &d) {
    constexpr std::array<double, 3> reference{100.0, 100.0, 120.0};
    std::array<long, 3> s{};
    for (std::size_t a = 0; a < 3; ++a) s[a] = std::lround(10.0 * double(d[a]) / reference[a]);
    return s;
}

/// Mirror along the first (left/right) axis.
inline Volume3D flip_x(const Volume3D &v) {
    Volume3D out = v.zeros_like();
    const Dims d = v.dims();
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y) {
            const std::size_t row = d.index(0, y, z);
            for (std::size_t x = 0; x < d.nx; ++x) out[row + x] = v[row + d.nx - 1 - x];
        }
    return out;
}

/// out(p) = in(p - offset along axis); vacated voxels are zero.
inline Volume3D shift(const Volume3D &v, std::size_t axis, long offset) {
    const Dims d = v.dims();
    if (axis > 2) throw ShapeError("axis must be 0, 1 or 2");
    if (static_cast<std::size_t>(std::labs(offset)) >= d[axis])
        throw ShapeError("shift " + std::to_string(offset) + " does not fit axis " + std::to_string(axis) + " of " +
                         to_string(d));
    Volume3D out = v.zeros_like();
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                std::array<long, 3> src{long(x), long(y), long(z)};
                src[axis] -= offset;
                if (src[axis] < 0 || src[axis] >= long(d[axis])) continue;
                out.at(x, y, z) = v.at(std::size_t(src[0]), std::size_t(src[1]), std::size_t(src[2]));
            }
    return out;
}

/// Variant k in [0, 14): k / 7 selects the flip, k % 7 the shift (none, +x, -x, +y, -y, +z, -z).
inline Volume3D augment_variant(const Volume3D &v, std::size_t k, const std::array<long, 3> &shifts) {
    if (k >= kVariants) throw ShapeError("augmentation variant out of range");
    for (std::size_t a = 0; a < 3; ++a)
        if (shifts[a] < 0 || static_cast<std::size_t>(shifts[a]) >= v.dims()[a])
            throw ShapeError("shift " + std::to_string(shifts[a]) + " does not fit dims " + to_string(v.dims()));
    Volume3D out = k / 7 ? flip_x(v) : v;
    const std::size_t s = k % 7;
    if (s == 0) return out;
    const std::size_t axis = (s - 1) / 2;
    const long sign = (s - 1) % 2 == 0 ? 1 : -1;
    return shift(out, axis, sign * shifts[axis]);
}

inline Volume3D augment_variant(const Volume3D &v, std::size_t k) {
    return augment_variant(v, k, default_shifts(v.dims()));
}

inline std::vector<Volume3D> augment(const Volume3D &v, const std::array<long, 3> &shifts) {
    std::vector<Volume3D> out;
    out.reserve(kVariants);
    for (std::size_t k = 0; k < kVariants; ++k) out.push_back(augment_variant(v, k, shifts));
    return out;
}

inline std::vector<Volume3D> augment(const Volume3D &v) { return augment(v, default_shifts(v.dims())); }

} // namespace relevis::nn
