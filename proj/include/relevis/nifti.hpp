#pragma once

// NIfTI-1 single-file (.nii) reader/writer restricted to 3D float32
// little-endian volumes. Anything else is rejected.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "volume.hpp"

namespace relevis {

namespace nifti {

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kDataOffset = 352;
inline constexpr std::int16_t kFloat32 = 16;

namespace detail {

template <class T>
T load_le(const unsigned char *p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
        auto *b = reinterpret_cast<unsigned char *>(&v);
        std::reverse(b, b + sizeof(T));
    }
    return v;
}

template <class T>
void store_le(unsigned char *p, T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto *b = reinterpret_cast<unsigned char *>(&v);
        std::reverse(b, b + sizeof(T));
    }
    std::memcpy(p, &v, sizeof(T));
}

// Byte offsets of the header fields we touch.
enum Offset : std::size_t {
    sizeof_hdr = 0,
    dim = 40,
    datatype = 70,
    bitpix = 72,
    pixdim = 76,
    vox_offset = 108,
    scl_slope = 112,
    xyzt_units = 123,
    descrip = 148,
    qform_code = 252,
    sform_code = 254,
    qoffset_x = 268,
    srow_x = 280,
    magic = 344,
};

} // namespace detail

/// Serialize a volume (header + 4 zero extension bytes + payload).
inline std::vector<unsigned char> encode(const Volume3D &v) {
    using namespace detail;
    if (!v.all_finite()) throw RejectedError("refusing to write non-finite voxel values");
    for (std::size_t axis = 0; axis < 3; ++axis)
        if (v.dims()[axis] > 32767) throw RejectedError("dimension exceeds the NIfTI-1 int16 limit");

    std::vector<unsigned char> buf(kDataOffset + v.size() * sizeof(float), 0);
    unsigned char *h = buf.data();
    store_le<std::int32_t>(h + sizeof_hdr, static_cast<std::int32_t>(kHeaderSize));
    const std::int16_t dims[8] = {3,
                                  static_cast<std::int16_t>(v.dims().nx),
                                  static_cast<std::int16_t>(v.dims().ny),
                                  static_cast<std::int16_t>(v.dims().nz),
                                  1, 1, 1, 1};
    for (int i = 0; i < 8; ++i) store_le<std::int16_t>(h + dim + 2 * i, dims[i]);
    store_le<std::int16_t>(h + datatype, kFloat32);
    store_le<std::int16_t>(h + bitpix, 32);
    const float vs = v.voxel_size_mm();
    const float pix[8] = {1.f, vs, vs, vs, 0.f, 0.f, 0.f, 0.f};
    for (int i = 0; i < 8; ++i) store_le<float>(h + pixdim + 4 * i, pix[i]);
    store_le<float>(h + vox_offset, static_cast<float>(kDataOffset));
    store_le<float>(h + scl_slope, 0.f);
    h[xyzt_units] = 2; // mm
    const char desc[] = "relevis";
    std::memcpy(h + descrip, desc, sizeof(desc) - 1);
    store_le<std::int16_t>(h + qform_code, 0);
    store_le<std::int16_t>(h + sform_code, 2); // aligned to a reference space
    const auto &a = v.transform();
    for (int i = 0; i < 3; ++i) store_le<float>(h + qoffset_x + 4 * i, a[4 * i + 3]);
    for (int i = 0; i < 12; ++i) store_le<float>(h + srow_x + 4 * i, a[i]);
    std::memcpy(h + magic, "n+1\0", 4);

    unsigned char *payload = h + kDataOffset;
    for (std::size_t i = 0; i < v.size(); ++i) store_le<float>(payload + 4 * i, v[i]);
    return buf;
}

/// Parse a volume from raw file bytes.
inline Volume3D decode(std::span<const unsigned char> bytes) {
    using namespace detail;
    if (bytes.size() < kHeaderSize) throw FormatError("file shorter than the 348-byte header");
    const unsigned char *h = bytes.data();

    if (std::memcmp(h + magic, "n+1\0", 4) != 0) throw FormatError("bad magic, expected \"n+1\\0\"");
    const auto hdr = load_le<std::int32_t>(h + sizeof_hdr);
    if (hdr != static_cast<std::int32_t>(kHeaderSize)) {
        const auto u = static_cast<std::uint32_t>(hdr);
        const std::uint32_t swapped = (u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24);
        if (swapped == kHeaderSize)
            throw UnsupportedError("big-endian files are not supported");
        throw FormatError("sizeof_hdr is " + std::to_string(hdr) + ", expected 348");
    }

    std::int16_t d[8];
    for (int i = 0; i < 8; ++i) d[i] = load_le<std::int16_t>(h + dim + 2 * i);
    if (d[0] != 3)
        throw UnsupportedError("only 3 spatial dimensions are supported (dim[0]=" + std::to_string(d[0]) + ")");
    if (d[1] <= 0 || d[2] <= 0 || d[3] <= 0) throw FormatError("non-positive dimension in header");

    const auto dtype = load_le<std::int16_t>(h + datatype);
    if (dtype != kFloat32)
        throw UnsupportedError("datatype code " + std::to_string(dtype) + " (only float32 = 16 is supported)");

    const float vs = load_le<float>(h + pixdim + 4);
    if (!(vs > 0.f) || !std::isfinite(vs)) throw FormatError("pixdim[1] must be positive");

    const float off_f = load_le<float>(h + vox_offset);
    if (!(off_f >= static_cast<float>(kDataOffset)) || off_f != std::floor(off_f))
        throw FormatError("vox_offset must be an integer >= 352");
    const auto off = static_cast<std::size_t>(off_f);

    const float slope = load_le<float>(h + scl_slope);
    if (slope != 0.f && slope != 1.f) throw UnsupportedError("intensity scaling (scl_slope) is not supported");

    const Dims dims{static_cast<std::size_t>(d[1]), static_cast<std::size_t>(d[2]), static_cast<std::size_t>(d[3])};
    const std::size_t need = off + dims.voxels() * sizeof(float);
    if (bytes.size() < need)
        throw FormatError("truncated payload: " + std::to_string(bytes.size()) + " bytes, need " + std::to_string(need));
    if (bytes.size() != need)
        throw FormatError("payload length does not match header dims " + to_string(dims));

    Affine a{};
    if (load_le<std::int16_t>(h + sform_code) > 0) {
        for (int i = 0; i < 12; ++i) a[i] = load_le<float>(h + srow_x + 4 * i);
    } else {
        a = scaling_affine(vs, {load_le<float>(h + qoffset_x), load_le<float>(h + qoffset_x + 4),
                                load_le<float>(h + qoffset_x + 8)});
    }

    std::vector<float> data(dims.voxels());
    const unsigned char *payload = h + off;
    for (std::size_t i = 0; i < data.size(); ++i) {
        data[i] = load_le<float>(payload + 4 * i);
        if (!std::isfinite(data[i])) throw FormatError("non-finite voxel value at index " + std::to_string(i));
    }
    return Volume3D(dims, vs, a, std::move(data));
}

} // namespace nifti

inline Volume3D read_volume(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return nifti::decode(bytes);
    } catch (const FormatError &e) {
        throw FormatError(path.string() + ": " + e.detail());
    }
}

inline void write_volume(const Volume3D &v, const std::filesystem::path &path) {
    const auto bytes = nifti::encode(v);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char *>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed for " + path.string());
}

} // namespace relevis
