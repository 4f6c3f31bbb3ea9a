#include <cstring>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "relevis/atlas.hpp"
#include "relevis/nifti.hpp"
#include "support.hpp"

using namespace relevis;

namespace {

void write_bytes(const std::filesystem::path &p, const std::vector<unsigned char> &b) {
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char *>(b.data()), std::streamsize(b.size()));
}

bool bit_identical(const Volume3D &a, const Volume3D &b) {
    return a.dims() == b.dims() && a.voxel_size_mm() == b.voxel_size_mm() && a.transform() == b.transform() &&
           std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)) == 0;
}

} // namespace

TEST(Volume, RejectsBadConstruction) {
    EXPECT_THROW(Volume3D({0, 2, 2}, 1.f), DimsError);
    EXPECT_THROW(Volume3D({2, 2, 2}, 0.f), RejectedError);
    EXPECT_THROW(Volume3D({2, 2, 2}, 1.f, scaling_affine(1.f, {}), std::vector<float>(7)), DimsError);
}

TEST(Volume, XFastestIndexing) {
    const Dims d{3, 4, 5};
    EXPECT_EQ(d.index(1, 0, 0), 1u);
    EXPECT_EQ(d.index(0, 1, 0), 3u);
    EXPECT_EQ(d.index(0, 0, 1), 12u);
    EXPECT_EQ(d.voxels(), 60u);
}

TEST(Nifti, ZeroVolumeRoundTrip) {
    test::TempDir dir;
    Volume3D v({4, 4, 4}, 2.f);
    write_volume(v, dir / "z.nii");
    const auto r = read_volume(dir / "z.nii");
    EXPECT_EQ(r.dims(), (Dims{4, 4, 4}));
    ASSERT_EQ(r.size(), 64u);
    for (float x : r.data()) EXPECT_EQ(x, 0.f);
    EXPECT_EQ(r.voxel_size_mm(), 2.f);
}

TEST(Nifti, RoundTripBitIdentical) {
    test::TempDir dir;
    std::mt19937_64 rng(42);
    for (int i = 0; i < 50; ++i) {
        std::uniform_int_distribution<std::size_t> dim(1, 9);
        auto v = test::random_volume({dim(rng), dim(rng), dim(rng)}, rng(), -1e6f, 1e6f, 0.5f + float(i % 4));
        v[0] = -0.0f;
        v[v.size() - 1] = std::numeric_limits<float>::denorm_min();
        write_volume(v, dir / "v.nii");
        EXPECT_TRUE(bit_identical(v, read_volume(dir / "v.nii")));
    }
}

TEST(Nifti, HeaderLayout) {
    Volume3D v({100, 100, 120}, 1.5f);
    const auto bytes = nifti::encode(v);
    EXPECT_EQ(bytes.size(), 100u * 100u * 120u * 4u + 352u);
    EXPECT_EQ(std::memcmp(bytes.data() + 344, "n+1\0", 4), 0);
    float off;
    std::memcpy(&off, bytes.data() + 108, 4);
    EXPECT_EQ(off, 352.f);
    for (int i = 348; i < 352; ++i) EXPECT_EQ(bytes[i], 0);
    std::int16_t dtype;
    std::memcpy(&dtype, bytes.data() + 70, 2);
    EXPECT_EQ(dtype, 16);
}

TEST(Nifti, RejectsMalformed) {
    const auto good = nifti::encode(test::random_volume({3, 3, 3}, 1));
    auto bad_magic = good;
    bad_magic[345] = 'x';
    EXPECT_THROW(nifti::decode(bad_magic), FormatError);

    auto truncated = good;
    truncated.resize(truncated.size() - 4);
    EXPECT_THROW(nifti::decode(truncated), FormatError);

    auto short_header = good;
    short_header.resize(100);
    EXPECT_THROW(nifti::decode(short_header), FormatError);

    auto int16 = good;
    const std::int16_t code = 4;
    std::memcpy(int16.data() + 70, &code, 2);
    EXPECT_THROW(nifti::decode(int16), UnsupportedError);

    auto four_d = good;
    const std::int16_t ndim = 4;
    std::memcpy(four_d.data() + 40, &ndim, 2);
    EXPECT_THROW(nifti::decode(four_d), UnsupportedError);

    auto nan_payload = good;
    const float nan = std::numeric_limits<float>::quiet_NaN();
    std::memcpy(nan_payload.data() + 352, &nan, 4);
    EXPECT_THROW(nifti::decode(nan_payload), FormatError);

    auto dims_mismatch = good;
    const std::int16_t nx = 4;
    std::memcpy(dims_mismatch.data() + 42, &nx, 2);
    EXPECT_THROW(nifti::decode(dims_mismatch), FormatError);

    auto extra = good;
    extra.push_back(0);
    EXPECT_THROW(nifti::decode(extra), FormatError);
}

TEST(Nifti, FileErrors) {
    test::TempDir dir;
    EXPECT_THROW(read_volume(dir / "missing.nii"), IoError);
    EXPECT_THROW(write_volume(Volume3D({2, 2, 2}, 1.f), dir / "no" / "such" / "dir.nii"), IoError);
    write_bytes(dir / "bad.nii", std::vector<unsigned char>(400, 0));
    EXPECT_THROW(read_volume(dir / "bad.nii"), FormatError);
}

TEST(Nifti, WriterRejectsNonFinite) {
    test::TempDir dir;
    auto v = test::random_volume({2, 2, 2}, 3);
    v[3] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(write_volume(v, dir / "nan.nii"), RejectedError);
    EXPECT_FALSE(std::filesystem::exists(dir / "nan.nii"));
}

TEST(Nifti, PreservesAffineOpaquely) {
    test::TempDir dir;
    Volume3D w({3, 4, 5}, 1.5f, Affine{0.f, -1.5f, 0.f, 10.f, 1.5f, 0.f, 0.f, -20.f, 0.f, 0.f, 1.5f, 30.f},
               std::vector<float>(60, 1.f));
    write_volume(w, dir / "a.nii");
    EXPECT_EQ(read_volume(dir / "a.nii").transform(), w.transform());
}

TEST(Atlas, AllBackgroundLookup) {
    Atlas a(Volume3D({4, 4, 4}, 1.f), {});
    for (std::size_t z = 0; z < 4; ++z)
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t x = 0; x < 4; ++x) EXPECT_EQ(a.lookup(x, y, z), "background");
}

TEST(Atlas, SingleVoxelRegion) {
    test::TempDir dir;
    Volume3D labels({16, 16, 16}, 1.5f);
    labels.at(10, 12, 8) = 1.f;
    write_volume(labels, dir / "labels.nii");
    std::ofstream(dir / "names.tsv") << "1\tHippocampus_L\n";
    const auto a = load_atlas(dir / "labels.nii", dir / "names.tsv");
    EXPECT_EQ(a.lookup(10, 12, 8), "Hippocampus_L");
    EXPECT_EQ(a.lookup(10, 12, 9), "background");
    EXPECT_EQ(a.id_of("Hippocampus_L"), 1);
    EXPECT_THROW(a.lookup(16, 0, 0), ShapeError);
}

TEST(Atlas, MissingNameRejected) {
    Volume3D labels({2, 2, 2}, 1.f);
    labels[5] = 7.f;
    EXPECT_THROW(Atlas(labels, {{1, "A"}}), AtlasError);
}

TEST(Atlas, NonIntegerOrNegativeLabelsRejected) {
    Volume3D labels({2, 2, 2}, 1.f);
    labels[0] = 1.5f;
    EXPECT_THROW(Atlas(labels, {{1, "A"}, {2, "B"}}), AtlasError);
    labels[0] = -1.f;
    EXPECT_THROW(Atlas(labels, {{1, "A"}}), AtlasError);
}

TEST(Atlas, DimsMismatchAgainstReference) {
    test::TempDir dir;
    write_volume(Volume3D({2, 2, 2}, 1.f), dir / "l.nii");
    std::ofstream(dir / "n.tsv") << "1\tA\n";
    EXPECT_THROW(load_atlas(dir / "l.nii", dir / "n.tsv", Dims{3, 2, 2}), DimsError);
    EXPECT_NO_THROW(load_atlas(dir / "l.nii", dir / "n.tsv", Dims{2, 2, 2}));
}

TEST(Atlas, NamesParsing) {
    std::istringstream ok("# comment\n1\tA\r\n\n2\tB with space\n");
    const auto names = parse_region_names(ok);
    EXPECT_EQ(names.at(1), "A");
    EXPECT_EQ(names.at(2), "B with space");
    std::istringstream dup("1\tA\n1\tB\n");
    EXPECT_THROW(parse_region_names(dup), AtlasError);
    std::istringstream notab("1 A\n");
    EXPECT_THROW(parse_region_names(notab), AtlasError);
}
