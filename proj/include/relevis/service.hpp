#pragma once

// HTTP backend for the relevance viewer.
//
// Catalog JSON:
//   { "atlas":    {"labels": "atlas/labels.nii", "names": "atlas/regions.tsv"},
//     "subjects": [{"id", "group", "covariates": {age, sex, tiv, field_strength},
//                   "volume": model input .nii, "background": optional display .nii}],
//     "models":   [{"id", "path"}],
//     "static_dir": optional directory served at / }
// Relative paths resolve against the catalog file's directory.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <future>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "analyze.hpp"
#include "atlas.hpp"
#include "errors.hpp"
#include "lrp.hpp"
#include "nifti.hpp"
#include "nn/model.hpp"
#include "nn/serialize.hpp"
#include "phantom.hpp"

namespace relevis::service {

using nlohmann::json;

struct CatalogSubject {
    SubjectRecord record;
    Volume3D volume;     // model input
    Volume3D background; // display image
};

struct CatalogModel {
    std::string id;
    std::filesystem::path path;
    nn::Model<float> model;
};

struct Catalog {
    Atlas atlas;
    std::vector<CatalogSubject> subjects;
    std::vector<CatalogModel> models;
    std::optional<std::filesystem::path> static_dir;

    const CatalogSubject *subject(const std::string &id) const {
        for (const auto &s : subjects)
            if (s.record.id == id) return &s;
        return nullptr;
    }
    const CatalogModel *model(const std::string &id) const {
        for (const auto &m : models)
            if (m.id == id) return &m;
        return nullptr;
    }
};

inline std::shared_ptr<const Catalog> load_catalog(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open catalog " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception &e) {
        throw ConfigError("catalog " + path.string() + " is not valid JSON: " + e.what());
    }
    const auto base = path.parent_path();
    auto resolve = [&](const std::string &p) {
        const std::filesystem::path q(p);
        return q.is_absolute() ? q : base / q;
    };
    auto cat = std::make_shared<Catalog>();
    try {
        const auto &a = j.at("atlas");
        cat->atlas = load_atlas(resolve(a.at("labels").get<std::string>()), resolve(a.at("names").get<std::string>()));
        for (const auto &s : j.at("subjects")) {
            CatalogSubject cs;
            auto &r = cs.record;
            r.id = s.at("id").get<std::string>();
            r.group = parse_group(s.at("group").get<std::string>());
            const auto &c = s.at("covariates");
            r.age = c.at("age").get<double>();
            r.sex = c.at("sex").get<int>();
            r.tiv = c.at("tiv").get<double>();
            r.field_strength = c.at("field_strength").get<double>();
            cs.volume = read_volume(resolve(s.at("volume").get<std::string>()));
            cs.background = s.contains("background") ? read_volume(resolve(s.at("background").get<std::string>()))
                                                     : cs.volume;
            require_same_dims(cs.volume.dims(), cat->atlas.dims(), "subject " + r.id + " volume vs atlas");
            require_same_dims(cs.background.dims(), cat->atlas.dims(), "subject " + r.id + " background vs atlas");
            if (cat->subject(r.id)) throw ConfigError("duplicate subject id " + r.id);
            cat->subjects.push_back(std::move(cs));
        }
        for (const auto &m : j.at("models")) {
            CatalogModel cm;
            cm.id = m.at("id").get<std::string>();
            cm.path = resolve(m.at("path").get<std::string>());
            cm.model = nn::load_model(cm.path);
            require_same_dims(cm.model.input_dims, cat->atlas.dims(), "model " + cm.id + " input vs atlas");
            if (cat->model(cm.id)) throw ConfigError("duplicate model id " + cm.id);
            cat->models.push_back(std::move(cm));
        }
        if (j.contains("static_dir")) cat->static_dir = resolve(j.at("static_dir").get<std::string>());
    } catch (const json::exception &e) {
        throw ConfigError("catalog " + path.string() + ": " + e.what());
    }
    return cat;
}

// ---------------------------------------------------------------------------
// Slices

struct Slice {
    std::size_t rows = 0, cols = 0;
    std::vector<float> values; // row-major
};

/// Axis 2 (axial): rows y, cols x. Axis 1 (coronal): rows z, cols x. Axis 0 (sagittal): rows z, cols y.
inline Slice extract_slice(const Volume3D &v, int axis, std::size_t index) {
    const Dims d = v.dims();
    if (axis < 0 || axis > 2) throw ConfigError("axis must be 0, 1 or 2");
    if (index >= d[std::size_t(axis)])
        throw ShapeError("slice index " + std::to_string(index) + " out of range for axis " + std::to_string(axis));
    Slice s;
    if (axis == 2) {
        s.rows = d.ny, s.cols = d.nx;
        for (std::size_t r = 0; r < s.rows; ++r)
            for (std::size_t c = 0; c < s.cols; ++c) s.values.push_back(v.at(c, r, index));
    } else if (axis == 1) {
        s.rows = d.nz, s.cols = d.nx;
        for (std::size_t r = 0; r < s.rows; ++r)
            for (std::size_t c = 0; c < s.cols; ++c) s.values.push_back(v.at(c, index, r));
    } else {
        s.rows = d.nz, s.cols = d.ny;
        for (std::size_t r = 0; r < s.rows; ++r)
            for (std::size_t c = 0; c < s.cols; ++c) s.values.push_back(v.at(index, c, r));
    }
    return s;
}

inline std::string slice_bytes(const Slice &s) {
    static_assert(std::endian::native == std::endian::little, "slice payloads are little-endian");
    std::string out(s.values.size() * sizeof(float), '\0');
    std::memcpy(out.data(), s.values.data(), out.size());
    return out;
}

// ---------------------------------------------------------------------------
// Relevance cache

struct CacheKey {
    std::string subject, model, rules;
    int target = 1;

    std::string str() const { return subject + "|" + model + "|" + rules + "|" + std::to_string(target); }
};

struct RelevanceEntry {
    lrp::RelevanceMap map;
    std::array<analyze::SliceProfile, 3> profiles;
    std::string body; // JSON response of POST /api/relevance
};

/// Bounded LRU cache; concurrent requests for one key share a single computation.
class RelevanceCache {
public:
    using Ptr = std::shared_ptr<const RelevanceEntry>;

    explicit RelevanceCache(std::size_t capacity = 32) : capacity_(std::max<std::size_t>(1, capacity)) {}

    /// Returns the entry and whether it was already cached (or in flight).
    template <class F>
    std::pair<Ptr, bool> get_or_compute(const CacheKey &key, F &&compute) {
        const std::string k = key.str();
        std::shared_future<Ptr> fut;
        std::promise<Ptr> promise;
        bool owner = false;
        {
            std::lock_guard lock(mu_);
            auto it = index_.find(k);
            if (it != index_.end()) {
                order_.splice(order_.begin(), order_, it->second.pos);
                fut = it->second.future;
            } else {
                owner = true;
                fut = promise.get_future().share();
                order_.push_front(k);
                index_[k] = {fut, order_.begin()};
                while (index_.size() > capacity_) {
                    index_.erase(order_.back());
                    order_.pop_back();
                }
            }
        }
        if (owner) {
            try {
                promise.set_value(std::make_shared<const RelevanceEntry>(compute()));
            } catch (...) {
                promise.set_exception(std::current_exception());
                std::lock_guard lock(mu_);
                if (auto it = index_.find(k); it != index_.end() && it->second.future.valid()) {
                    order_.erase(it->second.pos);
                    index_.erase(it);
                }
            }
        }
        return {fut.get(), !owner};
    }

    /// Completed entry for the key, if cached.
    Ptr peek(const CacheKey &key) const {
        std::shared_future<Ptr> fut;
        {
            std::lock_guard lock(mu_);
            auto it = index_.find(key.str());
            if (it == index_.end()) return nullptr;
            fut = it->second.future;
        }
        try {
            return fut.get();
        } catch (...) {
            return nullptr;
        }
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return index_.size();
    }

private:
    struct Slot {
        std::shared_future<Ptr> future;
        std::list<std::string>::iterator pos;
    };
    std::size_t capacity_;
    mutable std::mutex mu_;
    std::list<std::string> order_; // most recent first
    std::unordered_map<std::string, Slot> index_;
};

// ---------------------------------------------------------------------------
// Routes

/// Error carrying an HTTP status; rendered as {"error", "detail"}.
struct HttpError {
    int status;
    std::string error;
    std::string detail;
};

inline const char *kFallbackIndex =
    "<!doctype html><html><head><meta charset=\"utf-8\"><title>relevis</title></head>"
    "<body><h1>relevis</h1><p>Viewer assets are not installed. The API is served under /api.</p></body></html>";

class Service {
public:
    explicit Service(std::shared_ptr<const Catalog> catalog, std::size_t cache_capacity = 32)
        : catalog_(std::move(catalog)), cache_(cache_capacity) {
        if (!catalog_) throw ConfigError("service needs a catalog");
    }

    const Catalog &catalog() const { return *catalog_; }
    const RelevanceCache &cache() const { return cache_; }

    void mount(httplib::Server &server) {
        auto wrap = [](auto handler) {
            return [handler](const httplib::Request &req, httplib::Response &res) {
                try {
                    handler(req, res);
                } catch (const HttpError &e) {
                    respond_error(res, e.status, e.error, e.detail);
                } catch (const ShapeError &e) {
                    respond_error(res, 404, "out of range", e.what());
                } catch (const Error &e) {
                    respond_error(res, 400, e.kind(), e.what());
                } catch (const json::exception &e) {
                    respond_error(res, 400, "bad request", e.what());
                } catch (const std::exception &e) {
                    respond_error(res, 500, "internal", e.what());
                }
            };
        };
        server.Get("/api/participants", wrap([this](const auto &q, auto &r) { participants(q, r); }));
        server.Get("/api/models", wrap([this](const auto &q, auto &r) { models(q, r); }));
        server.Post("/api/relevance", wrap([this](const auto &q, auto &r) { relevance(q, r); }));
        server.Get("/api/slice/:subject/:kind/:axis/:index", wrap([this](const auto &q, auto &r) { slice(q, r); }));
        server.Get("/api/clusters/:subject/:model", wrap([this](const auto &q, auto &r) { clusters(q, r); }));
        server.Get("/api/atlas/lookup", wrap([this](const auto &q, auto &r) { lookup(q, r); }));
        server.Get("/api/atlas/mask/:region/:axis/:index", wrap([this](const auto &q, auto &r) { mask(q, r); }));
        server.Get("/api/prediction/:subject", wrap([this](const auto &q, auto &r) { prediction(q, r); }));
        if (catalog_->static_dir && std::filesystem::is_directory(*catalog_->static_dir)) {
            server.set_mount_point("/", catalog_->static_dir->string());
        } else {
            server.Get("/", [](const httplib::Request &, httplib::Response &res) {
                res.set_content(kFallbackIndex, "text/html; charset=utf-8");
            });
        }
    }

    static void respond_error(httplib::Response &res, int status, const std::string &error, const std::string &detail) {
        res.status = status;
        res.set_content(json{{"error", error}, {"detail", detail}}.dump(), "application/json");
    }

    /// Relevance for (subject, model, rules, target), computed once and cached.
    std::pair<RelevanceCache::Ptr, bool> relevance_entry(const std::string &subject, const std::string &model,
                                                         int target, const lrp::RuleConfig &rules) {
        const auto &s = need_subject(subject);
        const auto &m = need_model(model);
        if (target != 0 && target != 1) throw HttpError{400, "bad request", "target_class must be 0 or 1"};
        const CacheKey key{subject, model, rules.key(), target};
        return cache_.get_or_compute(key, [&] {
            RelevanceEntry e{lrp::relevance_map(m.model, s.volume, target, rules), {}, {}};
            json profiles = json::object();
            for (int a = 0; a < 3; ++a) {
                e.profiles[std::size_t(a)] = analyze::slice_profile(e.map.map, a);
                profiles[std::to_string(a)] = analyze::to_json(e.profiles[std::size_t(a)]);
            }
            double max_abs = 0.0;
            for (float v : e.map.map.data()) max_abs = std::max(max_abs, double(std::abs(v)));
            e.body = json{{"map_id", key.str()},
                          {"subject_id", subject},
                          {"model_id", model},
                          {"target_class", target},
                          {"total_relevance", e.map.total_output_relevance},
                          {"input_relevance", std::accumulate(e.map.map.data().begin(), e.map.map.data().end(), 0.0)},
                          {"max_abs", max_abs},
                          {"probabilities", {{"p_cn", e.map.probabilities[0]}, {"p_ad", e.map.probabilities[1]}}},
                          {"rules", lrp::to_json(rules)},
                          {"slice_profiles", profiles}}
                         .dump();
            return e;
        });
    }

private:
    const CatalogSubject &need_subject(const std::string &id) const {
        const auto *s = catalog_->subject(id);
        if (!s) throw HttpError{404, "not found", "unknown subject '" + id + "'"};
        return *s;
    }
    const CatalogModel &need_model(const std::string &id) const {
        const auto *m = catalog_->model(id);
        if (!m) throw HttpError{404, "not found", "unknown model '" + id + "'"};
        return *m;
    }
    const CatalogModel *model_param(const httplib::Request &req, bool required) const {
        if (req.has_param("model")) return &need_model(req.get_param_value("model"));
        if (required && catalog_->models.empty()) throw HttpError{404, "not found", "catalog has no models"};
        if (required) return &catalog_->models.front();
        return catalog_->models.empty() ? nullptr : &catalog_->models.front();
    }
    static long int_param(const std::string &text, const std::string &name) {
        try {
            std::size_t used = 0;
            const long v = std::stol(text, &used);
            if (used != text.size()) throw std::invalid_argument(name);
            return v;
        } catch (const std::exception &) {
            throw HttpError{400, "bad request", name + " must be an integer"};
        }
    }
    static double real_param(const std::string &text, const std::string &name) {
        try {
            std::size_t used = 0;
            const double v = std::stod(text, &used);
            if (used != text.size()) throw std::invalid_argument(name);
            return v;
        } catch (const std::exception &) {
            throw HttpError{400, "bad request", name + " must be a number"};
        }
    }
    static int target_param(const httplib::Request &req) {
        return req.has_param("target") ? int(int_param(req.get_param_value("target"), "target")) : 1;
    }
    static void send_slice(httplib::Response &res, const Slice &s, int axis, std::size_t index) {
        res.set_header("X-Rows", std::to_string(s.rows));
        res.set_header("X-Cols", std::to_string(s.cols));
        res.set_header("X-Axis", std::to_string(axis));
        res.set_header("X-Index", std::to_string(index));
        res.set_content(slice_bytes(s), "application/octet-stream");
    }
    static std::pair<int, std::size_t> axis_index(const httplib::Request &req) {
        const long axis = int_param(req.path_params.at("axis"), "axis");
        const long index = int_param(req.path_params.at("index"), "index");
        if (axis < 0 || axis > 2) throw HttpError{400, "bad request", "axis must be 0, 1 or 2"};
        if (index < 0) throw HttpError{404, "out of range", "negative slice index"};
        return {int(axis), std::size_t(index)};
    }

    void participants(const httplib::Request &req, httplib::Response &res) {
        const auto *m = model_param(req, false);
        json list = json::array();
        for (const auto &s : catalog_->subjects) {
            const auto &r = s.record;
            json item{{"id", r.id},
                      {"group", to_string(r.group)},
                      {"covariates",
                       {{"age", r.age}, {"sex", r.sex ? "M" : "F"}, {"tiv", r.tiv}, {"field_strength", r.field_strength}}}};
            if (m) item["p_ad"] = nn::predict(m->model, s.volume)[1];
            list.push_back(std::move(item));
        }
        res.set_content(list.dump(), "application/json");
    }

    void models(const httplib::Request &, httplib::Response &res) {
        json list = json::array();
        for (const auto &m : catalog_->models) {
            const auto &d = m.model.input_dims;
            list.push_back({{"id", m.id},
                            {"input_dims", {d.nx, d.ny, d.nz}},
                            {"parameters", nn::trainable_parameter_count(m.model)}});
        }
        res.set_content(list.dump(), "application/json");
    }

    void relevance(const httplib::Request &req, httplib::Response &res) {
        json body;
        try {
            body = json::parse(req.body);
        } catch (const json::exception &e) {
            throw HttpError{400, "bad request", std::string("body is not valid JSON: ") + e.what()};
        }
        auto field = [&](const char *a, const char *b) -> std::string {
            if (body.contains(a)) return body.at(a).get<std::string>();
            if (body.contains(b)) return body.at(b).get<std::string>();
            throw HttpError{400, "bad request", std::string("missing field ") + a};
        };
        const auto subject = field("subject_id", "subject");
        const auto model = field("model_id", "model");
        const int target = body.value("target_class", 1);
        const auto rules = body.contains("rules") ? lrp::rule_config_from_json(body.at("rules")) : lrp::RuleConfig{};
        const auto [entry, hit] = relevance_entry(subject, model, target, rules);
        res.set_header("X-Cache", hit ? "hit" : "miss");
        res.set_content(entry->body, "application/json");
    }

    void slice(const httplib::Request &req, httplib::Response &res) {
        const auto &s = need_subject(req.path_params.at("subject"));
        const auto kind = req.path_params.at("kind");
        const auto [axis, index] = axis_index(req);
        if (kind == "background") return send_slice(res, extract_slice(s.background, axis, index), axis, index);
        if (kind == "input") return send_slice(res, extract_slice(s.volume, axis, index), axis, index);
        if (kind != "relevance") throw HttpError{400, "bad request", "kind must be background, input or relevance"};
        const auto *m = model_param(req, true);
        const auto entry = cache_.peek({s.record.id, m->id, lrp::RuleConfig{}.key(), target_param(req)});
        if (!entry)
            throw HttpError{409, "not computed", "POST /api/relevance for this subject and model first"};
        send_slice(res, extract_slice(entry->map.map, axis, index), axis, index);
    }

    void clusters(const httplib::Request &req, httplib::Response &res) {
        const auto &s = need_subject(req.path_params.at("subject"));
        const auto &m = need_model(req.path_params.at("model"));
        const auto entry = cache_.peek({s.record.id, m.id, lrp::RuleConfig{}.key(), target_param(req)});
        if (!entry)
            throw HttpError{409, "not computed", "POST /api/relevance for this subject and model first"};
        double threshold = req.has_param("threshold") ? real_param(req.get_param_value("threshold"), "threshold") : 0.0;
        const long min_size = req.has_param("min_size") ? int_param(req.get_param_value("min_size"), "min_size") : 1;
        const long conn =
            req.has_param("connectivity") ? int_param(req.get_param_value("connectivity"), "connectivity") : 6;
        const long bins = req.has_param("bins") ? int_param(req.get_param_value("bins"), "bins") : 20;
        if (min_size < 1) throw HttpError{400, "bad request", "min_size must be >= 1"};
        if (bins < 1) throw HttpError{400, "bad request", "bins must be >= 1"};
        if (conn != 6 && conn != 26) throw HttpError{400, "bad request", "connectivity must be 6 or 26"};
        const bool normalized = req.has_param("normalized") && req.get_param_value("normalized") == "1";
        if (normalized) {
            double max_abs = 0.0;
            for (float v : entry->map.map.data()) max_abs = std::max(max_abs, double(std::abs(v)));
            threshold *= max_abs;
        }
        const auto cs = analyze::extract_clusters(entry->map.map, threshold, std::size_t(min_size), int(conn));
        json profiles = json::object();
        for (int a = 0; a < 3; ++a) profiles[std::to_string(a)] = analyze::to_json(entry->profiles[std::size_t(a)]);
        json out = analyze::to_json(cs);
        out["histogram"] = analyze::to_json(analyze::cluster_size_histogram(cs, std::size_t(bins)));
        out["slice_profiles"] = profiles;
        res.set_content(out.dump(), "application/json");
    }

    void lookup(const httplib::Request &req, httplib::Response &res) {
        for (const char *p : {"x", "y", "z"})
            if (!req.has_param(p)) throw HttpError{400, "bad request", std::string("missing coordinate ") + p};
        const long x = int_param(req.get_param_value("x"), "x");
        const long y = int_param(req.get_param_value("y"), "y");
        const long z = int_param(req.get_param_value("z"), "z");
        const auto &atlas = catalog_->atlas;
        if (!atlas.dims().contains(x, y, z)) throw HttpError{404, "out of range", "coordinate outside atlas dims"};
        const int id = atlas.id_at(std::size_t(x), std::size_t(y), std::size_t(z));
        res.set_content(json{{"region", atlas.name_of(id)}, {"id", id}}.dump(), "application/json");
    }

    void mask(const httplib::Request &req, httplib::Response &res) {
        const auto &atlas = catalog_->atlas;
        const auto region = req.path_params.at("region");
        std::optional<int> id = atlas.id_of(region);
        if (!id) {
            try {
                std::size_t used = 0;
                const int v = std::stoi(region, &used);
                if (used == region.size() && atlas.has_region(v)) id = v;
            } catch (const std::exception &) {
            }
        }
        if (!id) throw HttpError{404, "not found", "unknown region '" + region + "'"};
        const auto [axis, index] = axis_index(req);
        Volume3D m = atlas.labels().zeros_like();
        for (std::size_t i : atlas.voxels_of(*id)) m[i] = 1.f;
        send_slice(res, extract_slice(m, axis, index), axis, index);
    }

    void prediction(const httplib::Request &req, httplib::Response &res) {
        const auto &s = need_subject(req.path_params.at("subject"));
        const auto *m = model_param(req, true);
        const auto p = nn::predict(m->model, s.volume);
        res.set_content(json{{"subject_id", s.record.id}, {"model_id", m->id}, {"p_cn", p[0]}, {"p_ad", p[1]}}.dump(),
                        "application/json");
    }

    std::shared_ptr<const Catalog> catalog_;
    RelevanceCache cache_;
};

/// "host:port" -> (host, port); a bare port binds 127.0.0.1.
inline std::pair<std::string, int> parse_bind(const std::string &bind) {
    const auto colon = bind.rfind(':');
    std::string host = colon == std::string::npos ? "127.0.0.1" : bind.substr(0, colon);
    const std::string port = colon == std::string::npos ? bind : bind.substr(colon + 1);
    try {
        std::size_t used = 0;
        const int p = std::stoi(port, &used);
        if (used != port.size() || p < 0 || p > 65535) throw std::invalid_argument("port");
        return {host.empty() ? "127.0.0.1" : host, p};
    } catch (const std::exception &) {
        throw ConfigError("bad bind address '" + bind + "'");
    }
}

} // namespace relevis::service
