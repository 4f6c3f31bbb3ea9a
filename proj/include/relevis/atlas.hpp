#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "errors.hpp"
#include "nifti.hpp"
#include "volume.hpp"

namespace relevis {

/// Integer region labels on the working grid plus a name table. Id 0 is background.
class Atlas {
public:
    static constexpr const char *kBackground = "background";

    Atlas() = default;

    Atlas(Volume3D labels, std::map<int, std::string> names) : labels_(std::move(labels)), names_(std::move(names)) {
        ids_.resize(labels_.size());
        for (std::size_t i = 0; i < labels_.size(); ++i) {
            const float v = labels_[i];
            const double r = std::round(static_cast<double>(v));
            if (v < 0.f || std::abs(v - r) >= 1e-6)
                throw AtlasError("label value " + std::to_string(v) + " at voxel " + std::to_string(i) +
                                 " is not a non-negative integer");
            const int id = static_cast<int>(r);
            if (id != 0 && !names_.count(id))
                throw AtlasError("region id " + std::to_string(id) + " has no entry in the names table");
            ids_[i] = id;
        }
    }

    const Volume3D &labels() const noexcept { return labels_; }
    const Dims &dims() const noexcept { return labels_.dims(); }
    const std::map<int, std::string> &names() const noexcept { return names_; }

    int id_at(std::size_t linear) const { return ids_.at(linear); }
    int id_at(std::size_t x, std::size_t y, std::size_t z) const {
        if (!dims().contains(long(x), long(y), long(z)))
            throw ShapeError("coordinate (" + std::to_string(x) + "," + std::to_string(y) + "," + std::to_string(z) +
                             ") outside atlas dims " + to_string(dims()));
        return ids_[dims().index(x, y, z)];
    }

    std::string lookup(std::size_t x, std::size_t y, std::size_t z) const { return name_of(id_at(x, y, z)); }

    std::string name_of(int id) const {
        if (id == 0) return kBackground;
        auto it = names_.find(id);
        if (it == names_.end()) throw AtlasError("unknown region id " + std::to_string(id));
        return it->second;
    }

    std::optional<int> id_of(const std::string &name) const {
        for (const auto &[id, n] : names_)
            if (n == name) return id;
        return std::nullopt;
    }

    bool has_region(int id) const { return id != 0 && names_.count(id) != 0; }

    /// Region ids that actually occur in the label volume, ascending.
    std::set<int> present_ids() const {
        std::set<int> out;
        for (int id : ids_)
            if (id != 0) out.insert(id);
        return out;
    }

    std::vector<std::size_t> voxels_of(int id) const {
        std::vector<std::size_t> out;
        for (std::size_t i = 0; i < ids_.size(); ++i)
            if (ids_[i] == id) out.push_back(i);
        return out;
    }

private:
    Volume3D labels_;
    std::map<int, std::string> names_;
    std::vector<int> ids_;
};

/// Parse "id<TAB>name" lines. Blank lines and lines starting with '#' are skipped.
inline std::map<int, std::string> parse_region_names(std::istream &in) {
    std::map<int, std::string> names;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw AtlasError("names line " + std::to_string(lineno) + ": missing TAB");
        int id = 0;
        try {
            std::size_t used = 0;
            id = std::stoi(line.substr(0, tab), &used);
            if (used != tab) throw std::invalid_argument("trailing");
        } catch (const std::exception &) {
            throw AtlasError("names line " + std::to_string(lineno) + ": bad region id");
        }
        if (id <= 0) throw AtlasError("names line " + std::to_string(lineno) + ": region ids must be positive");
        if (!names.emplace(id, line.substr(tab + 1)).second)
            throw AtlasError("duplicate region id " + std::to_string(id));
    }
    return names;
}

inline void write_region_names(std::ostream &out, const std::map<int, std::string> &names) {
    for (const auto &[id, name] : names) out << id << '\t' << name << '\n';
}

inline Atlas load_atlas(const std::filesystem::path &labels_path, const std::filesystem::path &names_path,
                        std::optional<Dims> reference = std::nullopt) {
    Volume3D labels = read_volume(labels_path);
    if (reference) require_same_dims(labels.dims(), *reference, "atlas dims differ from working dims");
    std::ifstream in(names_path);
    if (!in) throw IoError("cannot open " + names_path.string());
    return Atlas(std::move(labels), parse_region_names(in));
}

inline void save_atlas(const Atlas &atlas, const std::filesystem::path &labels_path,
                       const std::filesystem::path &names_path) {
    write_volume(atlas.labels(), labels_path);
    std::ofstream out(names_path);
    if (!out) throw IoError("cannot open " + names_path.string() + " for writing");
    write_region_names(out, atlas.names());
}

} // namespace relevis
