#pragma once

// Cohort directory layout:
//   participants.tsv   id, group, age, sex, tiv, field_strength, amyloid, lesion_severity, volume
//   volumes/<id>.nii
//   atlas/labels.nii, atlas/regions.tsv

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "atlas.hpp"
#include "errors.hpp"
#include "nifti.hpp"
#include "phantom.hpp"

namespace relevis {

inline const std::vector<std::string> &participant_columns() {
    static const std::vector<std::string> cols{"id",  "group",          "age",     "sex",
                                               "tiv", "field_strength", "amyloid", "lesion_severity"};
    return cols;
}

struct ParticipantRow {
    SubjectRecord record;
    std::string volume; // path relative to the table's directory; may be empty
};

inline void write_participants(std::ostream &out, const std::vector<ParticipantRow> &rows) {
    for (const auto &c : participant_columns()) out << c << '\t';
    out << "volume\n";
    out.precision(17);
    for (const auto &row : rows) {
        const auto &r = row.record;
        out << r.id << '\t' << to_string(r.group) << '\t' << r.age << '\t' << (r.sex ? "M" : "F") << '\t' << r.tiv
            << '\t' << r.field_strength << '\t'
            << (r.amyloid ? (*r.amyloid == Amyloid::Positive ? "positive" : "negative") : "n/a") << '\t'
            << r.lesion_severity << '\t' << row.volume << '\n';
    }
}

inline std::vector<ParticipantRow> read_participants(std::istream &in) {
    auto split = [](const std::string &line) {
        std::vector<std::string> out;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, '\t')) out.push_back(cell);
        if (!line.empty() && line.back() == '\t') out.push_back("");
        return out;
    };
    std::string line;
    if (!std::getline(in, line)) throw DataError("participants table is empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const auto &c : {"id", "group", "age", "sex", "tiv", "field_strength"})
        if (!col.count(c)) throw DataError(std::string("participants table lacks column '") + c + "'");

    std::vector<ParticipantRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto cells = split(line);
        auto get = [&](const std::string &name) -> std::string {
            auto it = col.find(name);
            if (it == col.end() || it->second >= cells.size()) return {};
            return cells[it->second];
        };
        auto number = [&](const std::string &name) {
            try {
                return std::stod(get(name));
            } catch (const std::exception &) {
                throw DataError("participants line " + std::to_string(lineno) + ": bad " + name);
            }
        };
        ParticipantRow row;
        auto &r = row.record;
        r.id = get("id");
        if (r.id.empty()) throw DataError("participants line " + std::to_string(lineno) + ": empty id");
        try {
            r.group = parse_group(get("group"));
        } catch (const Error &) {
            throw DataError("participants line " + std::to_string(lineno) + ": bad group '" + get("group") + "'");
        }
        r.age = number("age");
        const auto sex = get("sex");
        if (sex == "F" || sex == "0") r.sex = 0;
        else if (sex == "M" || sex == "1") r.sex = 1;
        else throw DataError("participants line " + std::to_string(lineno) + ": sex must be F or M");
        r.tiv = number("tiv");
        r.field_strength = number("field_strength");
        const auto amyloid = get("amyloid");
        if (amyloid == "positive") r.amyloid = Amyloid::Positive;
        else if (amyloid == "negative") r.amyloid = Amyloid::Negative;
        if (!get("lesion_severity").empty()) r.lesion_severity = number("lesion_severity");
        row.volume = get("volume");
        r.validate();
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::vector<ParticipantRow> read_participants(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    return read_participants(in);
}

/// Write a cohort in the directory layout above.
inline void save_cohort(const Cohort &cohort, const std::filesystem::path &dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "volumes");
    fs::create_directories(dir / "atlas");
    std::vector<ParticipantRow> rows;
    for (const auto &s : cohort.subjects) {
        const std::string rel = "volumes/" + s.record.id + ".nii";
        write_volume(s.volume, dir / rel);
        rows.push_back({s.record, rel});
    }
    std::ofstream out(dir / "participants.tsv");
    if (!out) throw IoError("cannot write " + (dir / "participants.tsv").string());
    write_participants(out, rows);
    save_atlas(cohort.atlas, dir / "atlas" / "labels.nii", dir / "atlas" / "regions.tsv");
}

inline Cohort load_cohort(const std::filesystem::path &dir) {
    const auto rows = read_participants(dir / "participants.tsv");
    Cohort c;
    for (const auto &row : rows) {
        if (row.volume.empty()) throw DataError(row.record.id + ": no volume path");
        c.subjects.push_back({row.record, read_volume(dir / row.volume)});
    }
    std::optional<Dims> dims;
    if (!c.subjects.empty()) dims = c.subjects.front().volume.dims();
    for (const auto &s : c.subjects)
        require_same_dims(s.volume.dims(), *dims, "cohort volumes differ in dims");
    c.atlas = load_atlas(dir / "atlas" / "labels.nii", dir / "atlas" / "regions.tsv", dims);
    return c;
}

} // namespace relevis
