#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "atlas.hpp"
#include "errors.hpp"
#include "lrp.hpp"
#include "nn/model.hpp"
#include "volume.hpp"

namespace relevis::analyze {

// ---------------------------------------------------------------------------
// Clusters

struct Cluster {
    std::vector<std::size_t> voxels; // linear indices, ascending
    std::size_t size = 0;
    double volume_ml = 0.0;
    double sum_relevance = 0.0;
    double peak_value = 0.0;
    std::size_t peak_index = 0;
    std::array<std::size_t, 3> peak{};
};

struct ClusterSet {
    std::vector<Cluster> clusters;
    double threshold = 0.0;
    std::size_t min_size = 1;
    int connectivity = 6;

    double total_relevance() const {
        double s = 0.0;
        for (const auto &c : clusters) s += c.sum_relevance;
        return s;
    }
};

inline std::vector<std::array<long, 3>> neighbourhood(int connectivity) {
    if (connectivity != 6 && connectivity != 26) throw ConfigError("connectivity must be 6 or 26");
    std::vector<std::array<long, 3>> out;
    for (long dz = -1; dz <= 1; ++dz)
        for (long dy = -1; dy <= 1; ++dy)
            for (long dx = -1; dx <= 1; ++dx) {
                const long manhattan = std::labs(dx) + std::labs(dy) + std::labs(dz);
                if (manhattan == 0 || (connectivity == 6 && manhattan != 1)) continue;
                out.push_back({dx, dy, dz});
            }
    return out;
}

/// Connected components of {value >= threshold}; components below min_size are dropped.
/// Sorted by relevance sum, descending (ties: lowest first voxel).
inline ClusterSet extract_clusters(const Volume3D &map, double threshold, std::size_t min_size = 1,
                                   int connectivity = 6) {
    if (min_size < 1) throw ConfigError("min_size must be >= 1");
    const auto offsets = neighbourhood(connectivity);
    const Dims d = map.dims();
    ClusterSet cs{{}, threshold, min_size, connectivity};
    std::vector<char> seen(map.size(), 0);
    std::vector<std::size_t> queue;
    for (std::size_t seed = 0; seed < map.size(); ++seed) {
        if (seen[seed] || !(double(map[seed]) >= threshold)) continue;
        queue.assign(1, seed);
        seen[seed] = 1;
        for (std::size_t head = 0; head < queue.size(); ++head) {
            const auto [x, y, z] = d.coords(queue[head]);
            for (const auto &o : offsets) {
                const long nx = long(x) + o[0], ny = long(y) + o[1], nz = long(z) + o[2];
                if (!d.contains(nx, ny, nz)) continue;
                const std::size_t n = d.index(std::size_t(nx), std::size_t(ny), std::size_t(nz));
                if (seen[n] || !(double(map[n]) >= threshold)) continue;
                seen[n] = 1;
                queue.push_back(n);
            }
        }
        if (queue.size() < min_size) continue;
        Cluster c;
        c.voxels = queue;
        std::sort(c.voxels.begin(), c.voxels.end());
        c.size = c.voxels.size();
        c.volume_ml = double(c.size) * map.voxel_volume_ml();
        c.peak_index = c.voxels.front();
        c.peak_value = map[c.peak_index];
        for (std::size_t v : c.voxels) {
            c.sum_relevance += map[v];
            if (map[v] > c.peak_value) c.peak_value = map[v], c.peak_index = v;
        }
        const auto [px, py, pz] = d.coords(c.peak_index);
        c.peak = {px, py, pz};
        cs.clusters.push_back(std::move(c));
    }
    std::stable_sort(cs.clusters.begin(), cs.clusters.end(),
                     [](const Cluster &a, const Cluster &b) { return a.sum_relevance > b.sum_relevance; });
    return cs;
}

inline ClusterSet extract_clusters(const lrp::RelevanceMap &rm, double threshold, std::size_t min_size = 1,
                                   int connectivity = 6) {
    return extract_clusters(rm.map, threshold, min_size, connectivity);
}

/// Equal-width size bins starting at size 1; bin b holds sizes [1 + b*width, 1 + (b+1)*width).
struct Histogram {
    std::size_t bin_width = 1;
    std::vector<std::size_t> counts;

    std::size_t total() const {
        std::size_t s = 0;
        for (auto c : counts) s += c;
        return s;
    }
};

inline Histogram cluster_size_histogram(const ClusterSet &cs, std::size_t bins) {
    if (bins < 1) throw ConfigError("histogram needs at least one bin");
    std::size_t largest = 0;
    for (const auto &c : cs.clusters) largest = std::max(largest, c.size);
    Histogram h;
    h.bin_width = std::max<std::size_t>(1, (largest + bins - 1) / bins);
    h.counts.assign(bins, 0);
    for (const auto &c : cs.clusters) h.counts[std::min(bins - 1, (c.size - 1) / h.bin_width)] += 1;
    return h;
}

// ---------------------------------------------------------------------------
// Slice profiles and region sums

struct SliceProfile {
    int axis = 2;
    std::vector<double> positive; // per slice, sum of values > 0
    std::vector<double> negative; // per slice, sum of values < 0 (never positive)
};

inline SliceProfile slice_profile(const Volume3D &map, int axis) {
    if (axis < 0 || axis > 2) throw ConfigError("axis must be 0, 1 or 2");
    const Dims d = map.dims();
    SliceProfile p{axis, std::vector<double>(d[std::size_t(axis)], 0.0), std::vector<double>(d[std::size_t(axis)], 0.0)};
    for (std::size_t i = 0; i < map.size(); ++i) {
        const auto c = d.coords(i);
        const std::size_t s = c[std::size_t(axis)];
        const double v = map[i];
        if (v > 0.0) p.positive[s] += v;
        else p.negative[s] += v;
    }
    return p;
}

inline SliceProfile slice_profile(const lrp::RelevanceMap &rm, int axis) { return slice_profile(rm.map, axis); }

struct RegionSums {
    std::map<std::string, double> regions; // regions present in the atlas
    double background = 0.0;
    double total = 0.0;
};

inline RegionSums region_relevance(const Volume3D &map, const Atlas &atlas) {
    require_same_dims(map.dims(), atlas.dims(), "relevance map and atlas");
    std::map<int, double> by_id;
    RegionSums out;
    for (std::size_t i = 0; i < map.size(); ++i) {
        const double v = map[i];
        const int id = atlas.id_at(i);
        if (id == 0) out.background += v;
        else by_id[id] += v;
        out.total += v;
    }
    for (const auto &[id, s] : by_id) out.regions[atlas.name_of(id)] = s;
    return out;
}

inline RegionSums region_relevance(const lrp::RelevanceMap &rm, const Atlas &atlas) {
    return region_relevance(rm.map, atlas);
}

/// Sum of relevance over one region id.
inline double region_sum(const Volume3D &map, const Atlas &atlas, int region) {
    require_same_dims(map.dims(), atlas.dims(), "map and atlas");
    if (!atlas.has_region(region)) throw AtlasError("unknown region id " + std::to_string(region));
    double s = 0.0;
    for (std::size_t i = 0; i < map.size(); ++i)
        if (atlas.id_at(i) == region) s += map[i];
    return s;
}

/// Sum of intensities inside the region times the voxel volume, in ml.
inline double region_volume(const Volume3D &v, const Atlas &atlas, int region) {
    return region_sum(v, atlas, region) * v.voxel_volume_ml();
}

inline double region_volume(const Volume3D &v, const Atlas &atlas, const std::string &region) {
    const auto id = atlas.id_of(region);
    if (!id) throw AtlasError("unknown region '" + region + "'");
    return region_volume(v, atlas, *id);
}

// ---------------------------------------------------------------------------
// Occlusion

struct OcclusionConfig {
    std::size_t cube_edge = 0; // 0: round(0.2 * largest dim)
    double reduction = 0.5;
    std::size_t stride = 4;
    bool relevance = true; // also record the total relevance of each occluded input
    int target_class = 1;
    lrp::RuleConfig rules;
    /// Applied to every occluded image before the forward pass (e.g. residualization).
    std::function<Volume3D(const Volume3D &)> preprocess;
};

inline std::size_t default_cube_edge(const Dims &d) {
    return std::size_t(std::lround(0.2 * double(std::max({d.nx, d.ny, d.nz}))));
}

struct OcclusionResult {
    Volume3D probability;
    Volume3D total_relevance; // empty when relevance was not requested
    std::size_t cube_edge = 0;
    double reduction = 0.0;
    std::size_t stride = 1;
    double baseline_probability = 0.0;
    double baseline_relevance = 0.0;
};

/// Multiply the cube of edge `edge` centred at `c` (start c - edge/2, clipped) by (1 - reduction).
inline Volume3D occlude(const Volume3D &v, std::array<std::size_t, 3> c, std::size_t edge, double reduction) {
    Volume3D out = v;
    const Dims d = v.dims();
    std::array<std::size_t, 3> lo{}, hi{};
    for (std::size_t a = 0; a < 3; ++a) {
        const long start = long(c[a]) - long(edge / 2);
        lo[a] = std::size_t(std::max(0L, start));
        hi[a] = std::size_t(std::min(long(d[a]), start + long(edge)));
    }
    const float keep = float(1.0 - reduction);
    for (std::size_t z = lo[2]; z < hi[2]; ++z)
        for (std::size_t y = lo[1]; y < hi[1]; ++y)
            for (std::size_t x = lo[0]; x < hi[0]; ++x) out.at(x, y, z) *= keep;
    return out;
}

template <class T>
OcclusionResult occlusion_scan(const nn::Model<T> &m, const Volume3D &v, const OcclusionConfig &cfg) {
    const Dims d = v.dims();
    const std::size_t edge = cfg.cube_edge ? cfg.cube_edge : default_cube_edge(d);
    if (edge > d.nx || edge > d.ny || edge > d.nz)
        throw ShapeError("cube edge " + std::to_string(edge) + " exceeds dims " + to_string(d));
    if (!(cfg.reduction >= 0.0 && cfg.reduction <= 1.0)) throw ConfigError("reduction must lie in [0,1]");
    if (cfg.stride < 1) throw ConfigError("stride must be >= 1");
    cfg.rules.validate();

    auto prepare = [&](const Volume3D &x) { return cfg.preprocess ? cfg.preprocess(x) : x; };
    auto evaluate = [&](const Volume3D &x, double &prob, double &rel) {
        const Volume3D in = prepare(x);
        prob = nn::predict(m, in)[1];
        rel = 0.0;
        if (cfg.relevance) {
            const auto rm = lrp::relevance_map(m, in, cfg.target_class, cfg.rules);
            for (float r : rm.map.data()) rel += r;
        }
    };

    OcclusionResult out{v.zeros_like(), cfg.relevance ? v.zeros_like() : Volume3D(), edge, cfg.reduction,
                        cfg.stride, 0.0, 0.0};
    evaluate(v, out.baseline_probability, out.baseline_relevance);

    std::array<std::vector<std::size_t>, 3> grid;
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t p = 0; p < d[a]; p += cfg.stride) grid[a].push_back(p);
    const std::size_t gx = grid[0].size(), gy = grid[1].size(), gz = grid[2].size();
    std::vector<double> prob(gx * gy * gz), rel(gx * gy * gz);

#pragma omp parallel for schedule(dynamic)
    for (long g = 0; g < long(prob.size()); ++g) {
        const std::size_t ix = std::size_t(g) % gx, iy = (std::size_t(g) / gx) % gy, iz = std::size_t(g) / (gx * gy);
        const Volume3D occluded = occlude(v, {grid[0][ix], grid[1][iy], grid[2][iz]}, edge, cfg.reduction);
        evaluate(occluded, prob[std::size_t(g)], rel[std::size_t(g)]);
    }

    // Nearest grid point per voxel (ties to the lower grid point).
    auto nearest = [&](std::size_t a, std::size_t p) {
        const std::size_t k = (p + (cfg.stride - 1) / 2) / cfg.stride;
        return std::min(k, grid[a].size() - 1);
    };
    for (std::size_t z = 0; z < d.nz; ++z)
        for (std::size_t y = 0; y < d.ny; ++y)
            for (std::size_t x = 0; x < d.nx; ++x) {
                const std::size_t g = nearest(0, x) + gx * (nearest(1, y) + gy * nearest(2, z));
                out.probability.at(x, y, z) = float(prob[g]);
                if (cfg.relevance) out.total_relevance.at(x, y, z) = float(rel[g]);
            }
    return out;
}

/// Voxel maximizing (probability - baseline); ties go to the lowest linear index.
inline std::size_t occlusion_peak(const OcclusionResult &r) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < r.probability.size(); ++i)
        if (r.probability[i] > r.probability[best]) best = i;
    return best;
}

/// Binary mask of `region` grown by `radius` voxels in every direction (Chebyshev distance).
inline std::vector<char> dilated_region(const Atlas &atlas, int region, std::size_t radius) {
    const Dims d = atlas.dims();
    std::vector<char> mask(d.voxels(), 0);
    for (std::size_t i : atlas.voxels_of(region)) {
        const auto [x, y, z] = d.coords(i);
        for (long dz = -long(radius); dz <= long(radius); ++dz)
            for (long dy = -long(radius); dy <= long(radius); ++dy)
                for (long dx = -long(radius); dx <= long(radius); ++dx) {
                    const long px = long(x) + dx, py = long(y) + dy, pz = long(z) + dz;
                    if (d.contains(px, py, pz)) mask[d.index(std::size_t(px), std::size_t(py), std::size_t(pz))] = 1;
                }
    }
    return mask;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const Cluster &c) {
    return {{"size", c.size},
            {"volume_ml", c.volume_ml},
            {"sum_relevance", c.sum_relevance},
            {"peak_value", c.peak_value},
            {"peak", c.peak}};
}

inline nlohmann::json to_json(const ClusterSet &cs) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto &c : cs.clusters) list.push_back(to_json(c));
    return {{"threshold", cs.threshold},
            {"min_size", cs.min_size},
            {"connectivity", cs.connectivity},
            {"total_relevance", cs.total_relevance()},
            {"clusters", list}};
}

inline nlohmann::json to_json(const Histogram &h) { return {{"bin_width", h.bin_width}, {"counts", h.counts}}; }

inline nlohmann::json to_json(const SliceProfile &p) {
    return {{"axis", p.axis}, {"positive", p.positive}, {"negative", p.negative}};
}

inline nlohmann::json to_json(const RegionSums &r) {
    return {{"regions", r.regions}, {"background", r.background}, {"total", r.total}};
}

} // namespace relevis::analyze
