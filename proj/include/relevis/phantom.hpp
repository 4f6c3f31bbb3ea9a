#pragma once

// Synthetic brain-like cohorts with a controllable atrophy lesion in one
// atlas region. Every image is a pure function of (spec, record, seed).

#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "atlas.hpp"
#include "errors.hpp"
#include "seed.hpp"
#include "volume.hpp"

namespace relevis {

enum class Group { CN = 0, MCI = 1, AD = 2 };

inline const char *to_string(Group g) {
    switch (g) {
    case Group::CN: return "CN";
    case Group::MCI: return "MCI";
    case Group::AD: return "AD";
    }
    return "?";
}

inline Group parse_group(const std::string &s) {
    if (s == "CN") return Group::CN;
    if (s == "MCI") return Group::MCI;
    if (s == "AD") return Group::AD;
    throw DataError("unknown diagnostic group '" + s + "'");
}

/// Binary training label: 0 for controls, 1 for MCI and AD combined.
inline int disease_label(Group g) { return g == Group::CN ? 0 : 1; }

enum class Amyloid { Negative, Positive };

struct SubjectRecord {
    std::string id;
    Group group = Group::CN;
    double age = 70.0;             // years
    int sex = 0;                   // 0 = F, 1 = M
    double tiv = 1450.0;           // ml
    double field_strength = 3.0;   // tesla, 1.5 or 3.0
    std::optional<Amyloid> amyloid;
    double lesion_severity = 0.0;  // phantom ground truth in [0,1]

    /// Field strength as the {0,1} regressor: 1.5 T -> 0, 3 T -> 1.
    double field_strength_code() const { return field_strength >= 2.25 ? 1.0 : 0.0; }

    void validate() const {
        if (!(age > 0.0)) throw DataError(id + ": age must be positive");
        if (!(tiv > 0.0)) throw DataError(id + ": tiv must be positive");
        if (sex != 0 && sex != 1) throw DataError(id + ": sex must be 0 (F) or 1 (M)");
        if (field_strength != 1.5 && field_strength != 3.0) throw DataError(id + ": field strength must be 1.5 or 3.0");
        if (lesion_severity < 0.0 || lesion_severity > 1.0) throw DataError(id + ": lesion severity outside [0,1]");
        if (group == Group::CN && lesion_severity != 0.0) throw DataError(id + ": CN subjects carry no lesion");
    }
};

struct CovariateDistribution {
    double age_mean = 75.0, age_sd = 7.0;
    double female_fraction = 0.5;
    double low_field_fraction = 0.25; // share scanned at 1.5 T
    double amyloid_positive_fraction = 0.5;
};

struct PhantomSpec {
    Dims dims{32, 32, 40};
    float voxel_size_mm = 4.5f;
    int target_region_id = 1;
    std::array<double, 2> severity_mci{0.2, 0.5};
    std::array<double, 2> severity_ad{0.5, 0.9};
    double lesion_gain = 0.5;          // k: target intensity scales by (1 - severity * k)
    double noise_sd = 0.05;
    double anatomical_sd = 0.05;       // per-subject, per-region multiplicative spread

    // Additive trend inside the brain mask:
    //   age_slope*(age-age_ref) + tiv_slope*(tiv-tiv_ref) + sex_shift*sex + field_shift*fs_code
    double age_slope = -0.003, age_ref = 73.0;
    double tiv_slope = 0.0002, tiv_ref = 1450.0;
    double sex_shift = 0.01;
    double field_shift = 0.015;

    // Group covariates default to the training-cohort proportions (CN, MCI, AD).
    std::array<CovariateDistribution, 3> covariates{{
        {75.4, 6.6, 130.0 / 254.0, 71.0 / 254.0, 77.0 / 254.0},
        {74.1, 8.1, 93.0 / 220.0, 49.0 / 220.0, 141.0 / 220.0},
        {75.0, 8.0, 80.0 / 189.0, 35.0 / 189.0, 161.0 / 189.0},
    }};
    double tiv_female_mean = 1390.0, tiv_male_mean = 1540.0, tiv_sd = 120.0;

    std::array<double, 2> severity_range(Group g) const {
        switch (g) {
        case Group::CN: return {0.0, 0.0};
        case Group::MCI: return severity_mci;
        case Group::AD: return severity_ad;
        }
        return {0.0, 0.0};
    }

    void validate() const {
        if (dims.nx < 8 || dims.ny < 8 || dims.nz < 8) throw ConfigError("phantom dims must be at least 8 per axis");
        if (!(voxel_size_mm > 0.f)) throw ConfigError("voxel size must be positive");
        auto in_unit = [](const std::array<double, 2> &r) { return 0.0 <= r[0] && r[0] <= r[1] && r[1] <= 1.0; };
        if (!in_unit(severity_mci) || !in_unit(severity_ad))
            throw ConfigError("severity ranges must be ordered sub-intervals of [0,1]");
        if (severity_mci[0] <= 0.0) throw ConfigError("MCI severity range must lie above the CN value 0");
        if (severity_mci[0] > severity_ad[0] || severity_mci[1] > severity_ad[1])
            throw ConfigError("MCI severity range must not exceed the AD range");
        if (noise_sd < 0.0 || anatomical_sd < 0.0) throw ConfigError("noise levels must be non-negative");
        if (lesion_gain < 0.0 || lesion_gain > 1.0) throw ConfigError("lesion gain must lie in [0,1]");
    }
};

namespace phantom_detail {

// Normalized voxel-center coordinate in (0,1).
inline double unit(std::size_t i, std::size_t n) { return (static_cast<double>(i) + 0.5) / static_cast<double>(n); }

inline double ellipsoid(double ux, double uy, double uz, std::array<double, 3> c, std::array<double, 3> r) {
    const double dx = (ux - c[0]) / r[0], dy = (uy - c[1]) / r[1], dz = (uz - c[2]) / r[2];
    return dx * dx + dy * dy + dz * dz;
}

inline constexpr std::array<double, 5> kRegionLevel{0.0, 0.75, 0.55, 0.5, 0.5};

using relevis::mix_seed;

} // namespace phantom_detail

/// Four-region phantom atlas: 1 Hippocampus (bilateral), 2 Temporal, 3 Frontal, 4 Parietal_Occipital.
inline Atlas make_phantom_atlas(const PhantomSpec &spec) {
    using namespace phantom_detail;
    Volume3D labels(spec.dims, spec.voxel_size_mm);
    const Dims &d = spec.dims;
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const double ux = unit(x, d.nx), uy = unit(y, d.ny), uz = unit(z, d.nz);
                float id = 0.f;
                if (ellipsoid(ux, uy, uz, {0.5, 0.5, 0.5}, {0.42, 0.45, 0.42}) <= 1.0) {
                    if (ellipsoid(ux, uy, uz, {0.33, 0.5, 0.4}, {0.07, 0.13, 0.08}) <= 1.0 ||
                        ellipsoid(ux, uy, uz, {0.67, 0.5, 0.4}, {0.07, 0.13, 0.08}) <= 1.0)
                        id = 1.f;
                    else if (uy > 0.62)
                        id = 3.f;
                    else if (uy < 0.38)
                        id = 4.f;
                    else
                        id = 2.f;
                }
                labels.at(x, y, z) = id;
            }
    return Atlas(std::move(labels), {{1, "Hippocampus"}, {2, "Temporal"}, {3, "Frontal"}, {4, "Parietal_Occipital"}});
}

/// Covariate trend added to every brain voxel; zero at the reference covariates.
inline double covariate_trend(const PhantomSpec &spec, const SubjectRecord &r) {
    return spec.age_slope * (r.age - spec.age_ref) + spec.tiv_slope * (r.tiv - spec.tiv_ref) +
           spec.sex_shift * r.sex + spec.field_shift * r.field_strength_code();
}

inline Volume3D generate_phantom(const PhantomSpec &spec, const Atlas &atlas, const SubjectRecord &record,
                                 std::uint64_t seed) {
    using namespace phantom_detail;
    spec.validate();
    record.validate();
    require_same_dims(atlas.dims(), spec.dims, "phantom atlas dims differ from spec dims");
    if (!atlas.has_region(spec.target_region_id))
        throw AtlasError("target region " + std::to_string(spec.target_region_id) + " not in phantom atlas");
    const auto range = spec.severity_range(record.group);
    if (record.lesion_severity < range[0] || record.lesion_severity > range[1])
        throw DataError(record.id + ": lesion severity outside the " + to_string(record.group) + " range");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::array<double, 5> region_scale{};
    for (auto &s : region_scale) s = 1.0 + spec.anatomical_sd * gauss(rng);

    const double trend = covariate_trend(spec, record);
    const double lesion = 1.0 - spec.lesion_gain * record.lesion_severity;
    const Dims &d = spec.dims;
    constexpr double two_pi = 6.283185307179586;

    Volume3D v(d, spec.voxel_size_mm);
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::size_t i = d.index(x, y, z);
                const int id = atlas.id_at(i);
                if (id == 0) continue;
                const double ux = unit(x, d.nx), uy = unit(y, d.ny), uz = unit(z, d.nz);
                const double blobs =
                    1.0 + 0.1 * std::cos(two_pi * 2.0 * ux) * std::cos(two_pi * 2.0 * uy) * std::cos(two_pi * 1.5 * uz);
                const double level = id < static_cast<int>(kRegionLevel.size()) ? kRegionLevel[id] : 0.5;
                const double scale = region_scale[static_cast<std::size_t>(id) % region_scale.size()];
                double value = level * blobs * scale + trend;
                if (id == spec.target_region_id) value *= lesion;
                if (spec.noise_sd > 0.0) value += spec.noise_sd * gauss(rng);
                v[i] = static_cast<float>(value);
            }
    return v;
}

inline Volume3D generate_phantom(const PhantomSpec &spec, const SubjectRecord &record, std::uint64_t seed) {
    return generate_phantom(spec, make_phantom_atlas(spec), record, seed);
}

struct GroupCounts {
    std::size_t cn = 0, mci = 0, ad = 0;
    std::size_t total() const { return cn + mci + ad; }
};

struct Subject {
    SubjectRecord record;
    Volume3D volume;
};

struct Cohort {
    std::vector<Subject> subjects;
    Atlas atlas;
};

/// Draw covariates and lesion severity for one subject.
inline SubjectRecord draw_record(const PhantomSpec &spec, Group g, std::string id, std::mt19937_64 &rng) {
    const auto &cov = spec.covariates[static_cast<std::size_t>(g)];
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    SubjectRecord r;
    r.id = std::move(id);
    r.group = g;
    r.age = std::max(50.0, cov.age_mean + cov.age_sd * gauss(rng));
    r.sex = u01(rng) < cov.female_fraction ? 0 : 1;
    r.tiv = std::max(900.0, (r.sex == 0 ? spec.tiv_female_mean : spec.tiv_male_mean) + spec.tiv_sd * gauss(rng));
    r.field_strength = u01(rng) < cov.low_field_fraction ? 1.5 : 3.0;
    r.amyloid = u01(rng) < cov.amyloid_positive_fraction ? Amyloid::Positive : Amyloid::Negative;
    const auto range = spec.severity_range(g);
    const double t = u01(rng);
    r.lesion_severity = g == Group::CN ? 0.0 : range[0] + t * (range[1] - range[0]);
    return r;
}

inline Cohort generate_cohort(const PhantomSpec &spec, GroupCounts counts, std::uint64_t seed) {
    spec.validate();
    Cohort cohort{{}, make_phantom_atlas(spec)};
    std::mt19937_64 rng(seed);
    const std::array<std::pair<Group, std::size_t>, 3> plan{
        {{Group::CN, counts.cn}, {Group::MCI, counts.mci}, {Group::AD, counts.ad}}};
    std::size_t index = 0;
    cohort.subjects.reserve(counts.total());
    for (const auto &[group, n] : plan)
        for (std::size_t k = 0; k < n; ++k, ++index) {
            char id[32];
            std::snprintf(id, sizeof(id), "sub-%04zu", index + 1);
            SubjectRecord rec = draw_record(spec, group, id, rng);
            Volume3D vol = generate_phantom(spec, cohort.atlas, rec, phantom_detail::mix_seed(seed, index));
            cohort.subjects.push_back({std::move(rec), std::move(vol)});
        }
    return cohort;
}

} // namespace relevis
