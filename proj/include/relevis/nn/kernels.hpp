#pragma once

// 3x3x3 "same" convolution primitives on single-channel planes. Every routine
// walks a tap's valid overlap row by row so the innermost loop is contiguous.

#include <algorithm>
#include <array>
#include <cstddef>
#include <vector>

#include "../volume.hpp"

namespace relevis::nn::kernels {

inline constexpr std::size_t kTaps = 27;

struct Offset {
    long dx, dy, dz;
};

/// Tap t = kx + 3*(ky + 3*kz) reads the input at (x+kx-1, y+ky-1, z+kz-1).
inline constexpr Offset tap_offset(std::size_t t) {
    return {static_cast<long>(t % 3) - 1, static_cast<long>((t / 3) % 3) - 1, static_cast<long>(t / 9) - 1};
}

namespace detail {
inline std::pair<long, long> overlap(long n, long d) { return {std::max(0L, -d), std::min(n, n - d)}; }
} // namespace detail

/// out[p] += w * in[p + d] wherever p + d is inside the grid.
template <class T>
void accumulate_shifted(const T *in, T *out, const Dims &g, Offset d, T w) {
    const long nx = long(g.nx), ny = long(g.ny), nz = long(g.nz);
    const auto [x0, x1] = detail::overlap(nx, d.dx);
    const auto [y0, y1] = detail::overlap(ny, d.dy);
    const auto [z0, z1] = detail::overlap(nz, d.dz);
    for (long z = z0; z < z1; ++z)
        for (long y = y0; y < y1; ++y) {
            T *o = out + (z * ny + y) * nx;
            const T *i = in + ((z + d.dz) * ny + (y + d.dy)) * nx + d.dx;
            for (long x = x0; x < x1; ++x) o[x] += w * i[x];
        }
}

/// sum_p a[p] * b[p + d] over the valid overlap.
template <class T>
T dot_shifted(const T *a, const T *b, const Dims &g, Offset d, std::vector<T> &row) {
    const long nx = long(g.nx), ny = long(g.ny), nz = long(g.nz);
    const auto [x0, x1] = detail::overlap(nx, d.dx);
    const auto [y0, y1] = detail::overlap(ny, d.dy);
    const auto [z0, z1] = detail::overlap(nz, d.dz);
    row.assign(g.nx, T(0));
    T *r = row.data();
    for (long z = z0; z < z1; ++z)
        for (long y = y0; y < y1; ++y) {
            const T *pa = a + (z * ny + y) * nx;
            const T *pb = b + ((z + d.dz) * ny + (y + d.dy)) * nx + d.dx;
            for (long x = x0; x < x1; ++x) r[x] += pa[x] * pb[x];
        }
    T s = T(0);
    for (T v : row) s += v;
    return s;
}

/// Forward correlation of `in` (in_ch planes) with weights [oc][ic][27] into `out` (out_ch planes).
/// `out` is overwritten with the bias (or zero when bias is null) before accumulation.
template <class T>
void conv_forward(const T *in, std::size_t in_ch, T *out, std::size_t out_ch, const Dims &g, const T *weight,
                  const T *bias) {
    const std::size_t plane = g.voxels();
    for (std::size_t oc = 0; oc < out_ch; ++oc) {
        T *o = out + oc * plane;
        std::fill(o, o + plane, bias ? bias[oc] : T(0));
        for (std::size_t ic = 0; ic < in_ch; ++ic) {
            const T *w = weight + (oc * in_ch + ic) * kTaps;
            for (std::size_t t = 0; t < kTaps; ++t)
                if (w[t] != T(0)) accumulate_shifted(in + ic * plane, o, g, tap_offset(t), w[t]);
        }
    }
}

/// Transpose of conv_forward: din[ic] += sum_oc W[oc][ic] (*) dout[oc].
template <class T>
void conv_backward_input(const T *dout, std::size_t out_ch, T *din, std::size_t in_ch, const Dims &g,
                         const T *weight) {
    const std::size_t plane = g.voxels();
    for (std::size_t ic = 0; ic < in_ch; ++ic) {
        T *di = din + ic * plane;
        for (std::size_t oc = 0; oc < out_ch; ++oc) {
            const T *w = weight + (oc * in_ch + ic) * kTaps;
            for (std::size_t t = 0; t < kTaps; ++t) {
                if (w[t] == T(0)) continue;
                const Offset d = tap_offset(t);
                accumulate_shifted(dout + oc * plane, di, g, Offset{-d.dx, -d.dy, -d.dz}, w[t]);
            }
        }
    }
}

/// dW[oc][ic][t] += sum_p dout[oc][p] * in[ic][p + d_t]; db[oc] += sum_p dout[oc][p].
template <class T>
void conv_backward_weights(const T *in, std::size_t in_ch, const T *dout, std::size_t out_ch, const Dims &g,
                           T *dweight, T *dbias, std::vector<T> &row) {
    const std::size_t plane = g.voxels();
    for (std::size_t oc = 0; oc < out_ch; ++oc) {
        const T *d = dout + oc * plane;
        if (dbias) {
            T s = T(0);
            for (std::size_t p = 0; p < plane; ++p) s += d[p];
            dbias[oc] += s;
        }
        for (std::size_t ic = 0; ic < in_ch; ++ic)
            for (std::size_t t = 0; t < kTaps; ++t)
                dweight[(oc * in_ch + ic) * kTaps + t] += dot_shifted(d, in + ic * plane, g, tap_offset(t), row);
    }
}

} // namespace relevis::nn::kernels
