// relevis: batch entry points (cohort generation, residualization, training, cross-validation,
// evaluation, relevance export, region statistics, occlusion) and the viewer backend.

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "relevis/analyze.hpp"
#include "relevis/config.hpp"
#include "relevis/dataset.hpp"
#include "relevis/eval.hpp"
#include "relevis/lrp.hpp"
#include "relevis/nifti.hpp"
#include "relevis/nn/serialize.hpp"
#include "relevis/phantom.hpp"
#include "relevis/pipeline.hpp"
#include "relevis/residualize.hpp"
#include "relevis/service.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace relevis;

namespace {

// Seeds derived from the run seed, one stream per purpose.
struct Seeds {
    std::uint64_t split, model, train;
    explicit Seeds(std::uint64_t s) : split(mix_seed(s, 1)), model(mix_seed(s, 2)), train(mix_seed(s, 3)) {}
    json to_json() const { return {{"split", split}, {"model", model}, {"train", train}}; }
};

class Manifest {
public:
    Manifest(std::string command, const RunConfig &cfg) : command_(std::move(command)), cfg_(cfg) {}

    void artifact(const fs::path &p) { artifacts_.push_back(fs::relative(p, cfg_.out).generic_string()); }

    template <class F>
    auto timed(const std::string &phase, F &&f) {
        const auto t0 = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(f())>) {
            f();
            timings_[phase] += since(t0);
        } else {
            auto r = f();
            timings_[phase] += since(t0);
            return r;
        }
    }

    void write(const json &extra = json::object()) {
        std::sort(artifacts_.begin(), artifacts_.end());
        json j{{"command", command_},
               {"config_hash", config_hash(cfg_)},
               {"config", to_json(cfg_)},
               {"seed", cfg_.seed},
               {"seeds", Seeds(cfg_.seed).to_json()},
               {"artifacts", artifacts_},
               {"timings", timings_}};
        j.update(extra);
        std::ofstream out(fs::path(cfg_.out) / "manifest.json");
        out << j.dump(2) << '\n';
    }

private:
    static double since(std::chrono::steady_clock::time_point t0) {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    std::string command_;
    const RunConfig &cfg_;
    std::vector<std::string> artifacts_;
    std::map<std::string, double> timings_;
};

void write_json(Manifest &m, const fs::path &path, const json &j) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
    m.artifact(path);
}

void write_text(Manifest &m, const fs::path &path, const std::string &text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    m.artifact(path);
}

void write_nii(Manifest &m, const Volume3D &v, const fs::path &path) {
    write_volume(v, path);
    m.artifact(path);
}

std::string require_path(const std::string &value, const char *flag) {
    if (value.empty()) throw ConfigError(std::string(flag) + " is required");
    return value;
}

fs::path prepare_out(const RunConfig &cfg) {
    const fs::path out = require_path(cfg.out, "--out");
    fs::create_directories(out);
    return out;
}

pipeline::InputKind input_kind(const RunConfig &cfg) { return pipeline::parse_input_kind(cfg.input); }

nn::TrainConfig train_config(const RunConfig &cfg) {
    nn::TrainConfig tc = cfg.train;
    tc.epochs = cfg.epochs.value_or(pipeline::default_epochs(input_kind(cfg)));
    tc.seed = Seeds(cfg.seed).train;
    return tc;
}

int target_region(const RunConfig &cfg, const Atlas &atlas) {
    if (const auto id = atlas.id_of(cfg.region)) return *id;
    throw ConfigError("unknown region '" + cfg.region + "'");
}

std::vector<SubjectRecord> records_of(const Cohort &c) {
    std::vector<SubjectRecord> r;
    for (const auto &s : c.subjects) r.push_back(s.record);
    return r;
}

// Test partition of the configured split; k < 2 selects every subject.
std::vector<std::size_t> test_partition(const Cohort &c, const RunConfig &cfg) {
    if (cfg.k < 2) {
        std::vector<std::size_t> all(c.subjects.size());
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        return all;
    }
    const auto recs = records_of(c);
    auto folds = eval::stratified_kfold(recs, cfg.k, Seeds(cfg.seed).split);
    if (cfg.fold >= folds.size()) throw ConfigError("fold must be < k");
    return folds[cfg.fold];
}

std::vector<std::size_t> train_partition(const Cohort &c, const RunConfig &cfg) {
    if (cfg.k < 2) return test_partition(c, cfg);
    return eval::training_indices(c.subjects.size(), test_partition(c, cfg));
}

std::optional<ResidualModel> residualizer_of(const RunConfig &cfg) {
    if (cfg.residualizer.empty()) return std::nullopt;
    return load_residual_model(cfg.residualizer);
}

std::size_t subject_index(const Cohort &c, const std::string &id) {
    for (std::size_t i = 0; i < c.subjects.size(); ++i)
        if (c.subjects[i].record.id == id) return i;
    throw DataError("unknown subject '" + id + "'");
}

json history_json(const std::vector<nn::EpochRecord> &h) {
    json a = json::array();
    for (const auto &e : h)
        a.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"test_balanced_accuracy", e.test_balanced_accuracy}});
    return a;
}

json contrasts_json(const std::vector<eval::ContrastResult> &cs) {
    json a = json::array();
    for (const auto &c : cs) a.push_back(eval::to_json(c));
    return a;
}

json fold_report(const Cohort &cohort, const pipeline::FoldResult &r) {
    json scores = json::array();
    for (std::size_t i = 0; i < r.test.size(); ++i) {
        const auto &rec = cohort.subjects[r.test[i]].record;
        scores.push_back({{"id", rec.id}, {"group", to_string(rec.group)}, {"p_disease", r.test_scores[i]}});
    }
    return {{"selected_epoch", r.selected_epoch},
            {"n_train", r.train.size()},
            {"n_test", r.test.size()},
            {"contrasts", contrasts_json(r.contrasts)},
            {"volume_baseline", contrasts_json(r.volume_baseline)},
            {"test_scores", scores}};
}

// Writes the model, residualizer, inputs and a viewer catalog for one trained fold.
void write_fold(Manifest &m, const Cohort &cohort, const fs::path &cohort_dir, const pipeline::FoldResult &r,
                const fs::path &dir) {
    fs::create_directories(dir);
    nn::save_model(r.model, dir / "model.rvm");
    m.artifact(dir / "model.rvm");
    if (r.residualizer) {
        save_residual_model(*r.residualizer, dir / "residualizer.rvr");
        m.artifact(dir / "residualizer.rvr");
    }
    write_json(m, dir / "history.json", history_json(r.history));
    write_json(m, dir / "report.json", fold_report(cohort, r));

    json subjects = json::array();
    for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
        const auto &rec = cohort.subjects[i].record;
        const fs::path background = fs::absolute(cohort_dir / "volumes" / (rec.id + ".nii"));
        fs::path input = background;
        if (r.residualizer) {
            fs::create_directories(dir / "inputs");
            input = dir / "inputs" / (rec.id + ".nii");
            write_nii(m, r.inputs[i], input);
            input = fs::relative(input, dir);
        }
        subjects.push_back({{"id", rec.id},
                            {"group", to_string(rec.group)},
                            {"covariates",
                             {{"age", rec.age}, {"sex", rec.sex}, {"tiv", rec.tiv}, {"field_strength", rec.field_strength}}},
                            {"volume", input.generic_string()},
                            {"background", background.generic_string()}});
    }
    json catalog{{"atlas",
                  {{"labels", fs::absolute(cohort_dir / "atlas" / "labels.nii").generic_string()},
                   {"names", fs::absolute(cohort_dir / "atlas" / "regions.tsv").generic_string()}}},
                 {"subjects", subjects},
                 {"models", json::array({{{"id", "model"}, {"path", "model.rvm"}}})}};
    write_json(m, dir / "catalog.json", catalog);
}

// ---------------------------------------------------------------------------
// Subcommands

void cmd_phantom_gen(const RunConfig &cfg) {
    Manifest m("phantom-gen", cfg);
    const auto out = prepare_out(cfg);
    const auto cohort = m.timed("generate", [&] { return generate_cohort(cfg.phantom, cfg.counts, cfg.seed); });
    m.timed("write", [&] { save_cohort(cohort, out); });
    m.artifact(out / "participants.tsv");
    m.artifact(out / "atlas" / "labels.nii");
    m.artifact(out / "atlas" / "regions.tsv");
    for (const auto &s : cohort.subjects) m.artifact(out / "volumes" / (s.record.id + ".nii"));
    m.write();
    std::cout << "wrote " << cohort.subjects.size() << " subjects to " << out.string() << '\n';
}

void cmd_fit_residualizer(const RunConfig &cfg) {
    Manifest m("fit-residualizer", cfg);
    const auto out = prepare_out(cfg);
    const auto cohort = load_cohort(require_path(cfg.cohort, "--cohort"));
    const auto train = train_partition(cohort, cfg);
    const auto model = m.timed("fit", [&] { return pipeline::fit_on_controls(cohort, train); });
    save_residual_model(model, out / "residualizer.rvr");
    m.artifact(out / "residualizer.rvr");
    std::size_t controls = 0;
    for (std::size_t i : train) controls += cohort.subjects[i].record.group == Group::CN;
    m.write({{"controls", controls}});
    std::cout << "fitted on " << controls << " controls\n";
}

void cmd_residualize(const RunConfig &cfg) {
    Manifest m("residualize", cfg);
    const auto out = prepare_out(cfg);
    const auto cohort = load_cohort(require_path(cfg.cohort, "--cohort"));
    const auto model = load_residual_model(require_path(cfg.residualizer, "--residualizer"));
    Cohort res;
    res.atlas = cohort.atlas;
    m.timed("apply", [&] {
        for (const auto &s : cohort.subjects)
            res.subjects.push_back({s.record, apply_residualizer(model, s.volume, s.record)});
    });
    m.timed("write", [&] { save_cohort(res, out); });
    m.artifact(out / "participants.tsv");
    m.artifact(out / "atlas" / "labels.nii");
    m.artifact(out / "atlas" / "regions.tsv");
    for (const auto &s : res.subjects) m.artifact(out / "volumes" / (s.record.id + ".nii"));
    m.write();
}

pipeline::FoldConfig fold_config(const RunConfig &cfg, const Cohort &cohort) {
    pipeline::FoldConfig fc;
    fc.train = train_config(cfg);
    fc.input = input_kind(cfg);
    fc.model_seed = Seeds(cfg.seed).model;
    fc.target_region = target_region(cfg, cohort.atlas);
    return fc;
}

void print_epoch(std::size_t fold, const nn::EpochRecord &e) {
    static std::mutex mu;
    std::lock_guard lock(mu);
    std::cout << "fold " << fold << " epoch " << e.epoch << " loss " << e.train_loss << " test bacc "
              << e.test_balanced_accuracy << '\n'
              << std::flush;
}

void cmd_train(const RunConfig &cfg) {
    Manifest m("train", cfg);
    const auto out = prepare_out(cfg);
    const bool whole_sample = cfg.k < 2;
    if (whole_sample && cfg.train.checkpoint != nn::CheckpointPolicy::FixedEpochs)
        throw ConfigError("whole-sample training (k < 2) has no test fold; use --checkpoint fixed-epochs");
    const fs::path cohort_dir = require_path(cfg.cohort, "--cohort");
    const auto cohort = load_cohort(cohort_dir);
    const auto test = whole_sample ? std::vector<std::size_t>{} : test_partition(cohort, cfg);
    const auto fc = fold_config(cfg, cohort);
    const auto r = m.timed("train", [&] {
        return pipeline::run_fold(cohort, test, fc, [&](const nn::EpochRecord &e) { print_epoch(cfg.fold, e); });
    });
    m.timed("write", [&] { write_fold(m, cohort, cohort_dir, r, out); });
    m.write(whole_sample ? json{{"whole_sample", true}} : json{{"fold", cfg.fold}, {"k", cfg.k}});
    for (const auto &c : r.contrasts) std::cout << c.name << " auc " << c.auc << '\n';
}

void cmd_cross_validate(const RunConfig &cfg) {
    Manifest m("cross-validate", cfg);
    const auto out = prepare_out(cfg);
    const fs::path cohort_dir = require_path(cfg.cohort, "--cohort");
    const auto cohort = load_cohort(cohort_dir);
    const auto recs = records_of(cohort);
    const auto folds = eval::stratified_kfold(recs, cfg.k, Seeds(cfg.seed).split);
    const auto fc = fold_config(cfg, cohort);

    std::vector<std::optional<pipeline::FoldResult>> results(folds.size());
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr failure;
    auto worker = [&] {
        for (std::size_t f; (f = next++) < folds.size();) {
            try {
                results[f] = pipeline::run_fold(cohort, folds[f], fc,
                                                [&](const nn::EpochRecord &e) { print_epoch(f, e); });
            } catch (...) {
                std::lock_guard lock(err_mu);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    m.timed("train", [&] {
        const std::size_t jobs = std::max<std::size_t>(1, std::min(cfg.jobs, folds.size()));
        std::vector<std::thread> pool;
        for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
        worker();
        for (auto &t : pool) t.join();
    });
    if (failure) std::rethrow_exception(failure);

    std::vector<std::vector<eval::ContrastResult>> model_rows, baseline_rows;
    json fold_reports = json::array();
    m.timed("write", [&] {
        for (std::size_t f = 0; f < folds.size(); ++f) {
            write_fold(m, cohort, cohort_dir, *results[f], out / ("fold-" + std::to_string(f)));
            model_rows.push_back(results[f]->contrasts);
            baseline_rows.push_back(results[f]->volume_baseline);
            auto rep = fold_report(cohort, *results[f]);
            rep["fold"] = f;
            fold_reports.push_back(rep);
        }
    });

    auto summary = [](const std::vector<std::vector<eval::ContrastResult>> &rows) {
        json s = json::array();
        for (std::size_t c = 0; c < rows.front().size(); ++c) {
            auto stat = [&](auto get) {
                std::vector<double> v;
                for (const auto &r : rows) v.push_back(get(r[c]));
                const auto ms = eval::mean_sd(v);
                return json{{"mean", ms.mean}, {"sd", ms.sd}};
            };
            s.push_back({{"contrast", rows.front()[c].name},
                         {"balanced_accuracy", stat([](const auto &r) { return r.metrics.balanced_accuracy; })},
                         {"sensitivity", stat([](const auto &r) { return r.metrics.sensitivity; })},
                         {"specificity", stat([](const auto &r) { return r.metrics.specificity; })},
                         {"auc", stat([](const auto &r) { return r.auc; })},
                         {"f1", stat([](const auto &r) { return r.metrics.f1; })},
                         {"ppv", stat([](const auto &r) { return r.metrics.ppv; })},
                         {"npv", stat([](const auto &r) { return r.metrics.npv; })}});
        }
        return s;
    };
    write_json(m, out / "report.json",
               {{"k", cfg.k},
                {"input", cfg.input},
                {"folds", fold_reports},
                {"summary", summary(model_rows)},
                {"volume_baseline_summary", summary(baseline_rows)}});
    const std::string text = "CNN (" + cfg.input + " input), mean +- SD over " + std::to_string(folds.size()) +
                             " folds\n" + eval::format_fold_table(model_rows) + "\n" + cfg.region +
                             " volume baseline\n" + eval::format_fold_table(baseline_rows);
    write_text(m, out / "report.txt", text);
    m.write({{"k", cfg.k}, {"jobs", cfg.jobs}});
    std::cout << text;
}

struct Inputs {
    Cohort cohort;
    std::optional<ResidualModel> residualizer;
    std::vector<Volume3D> volumes;
};

Inputs load_inputs(const RunConfig &cfg) {
    Inputs in;
    in.cohort = load_cohort(require_path(cfg.cohort, "--cohort"));
    in.residualizer = residualizer_of(cfg);
    in.volumes = pipeline::model_inputs(in.cohort, in.residualizer);
    return in;
}

void cmd_evaluate(const RunConfig &cfg) {
    Manifest m("evaluate", cfg);
    const auto out = prepare_out(cfg);
    const auto model = nn::load_model(require_path(cfg.model, "--model"));
    const auto in = load_inputs(cfg);
    const auto test = test_partition(in.cohort, cfg);
    std::vector<const Volume3D *> vols;
    std::vector<Group> groups;
    for (std::size_t i : test) vols.push_back(&in.volumes[i]), groups.push_back(in.cohort.subjects[i].record.group);
    std::vector<double> scores;
    m.timed("predict", [&] {
        for (const auto &p : nn::predict(model, std::span<const Volume3D *const>(vols))) scores.push_back(p[1]);
    });
    const auto contrasts = pipeline::model_contrasts(scores, groups);
    write_json(m, out / "evaluation.json", {{"n", test.size()}, {"contrasts", contrasts_json(contrasts)}});
    write_text(m, out / "evaluation.txt", eval::format_fold_table({contrasts}));
    m.write();
    std::cout << eval::format_fold_table({contrasts});
}

void cmd_relevance(const RunConfig &cfg, const std::vector<std::string> &subjects, int target) {
    Manifest m("relevance", cfg);
    const auto out = prepare_out(cfg);
    const auto model = nn::convert<double>(nn::load_model(require_path(cfg.model, "--model")));
    const auto in = load_inputs(cfg);
    std::vector<std::size_t> idx;
    if (subjects.empty())
        for (std::size_t i = 0; i < in.cohort.subjects.size(); ++i) idx.push_back(i);
    for (const auto &s : subjects) idx.push_back(subject_index(in.cohort, s));
    fs::create_directories(out / "relevance");
    json rows = json::array();
    m.timed("relevance", [&] {
        for (std::size_t i : idx) {
            const auto &id = in.cohort.subjects[i].record.id;
            const auto rm = lrp::relevance_map(model, in.volumes[i], target, cfg.rules);
            write_nii(m, rm.map, out / "relevance" / (id + ".nii"));
            double sum = 0.0;
            for (float v : rm.map.data()) sum += v;
            rows.push_back({{"id", id},
                            {"target_class", target},
                            {"probabilities", rm.probabilities},
                            {"total_output_relevance", rm.total_output_relevance},
                            {"sum_input_relevance", sum},
                            {"regions", analyze::to_json(analyze::region_relevance(rm, in.cohort.atlas))}});
        }
    });
    write_json(m, out / "relevance.json", {{"rules", lrp::to_json(cfg.rules)}, {"subjects", rows}});
    m.write();
}

void cmd_region_stats(const RunConfig &cfg) {
    Manifest m("region-stats", cfg);
    const auto out = prepare_out(cfg);
    const auto model = nn::convert<double>(nn::load_model(require_path(cfg.model, "--model")));
    const auto in = load_inputs(cfg);
    const int region = target_region(cfg, in.cohort.atlas);
    const auto train = train_partition(in.cohort, cfg);
    const auto test = test_partition(in.cohort, cfg);
    const auto residual = pipeline::residual_region_volumes(in.cohort, region, train);
    const auto corr = m.timed("relevance", [&] {
        return pipeline::correlate_relevance_volume(in.cohort, std::span<const Volume3D>(in.volumes), model, region,
                                                    residual, test, cfg.rules);
    });
    std::ostringstream csv;
    csv.precision(10);
    csv << "id,group,region_relevance,region_volume,residual_volume\n";
    for (const auto &r : corr.rows)
        csv << r.id << ',' << to_string(r.group) << ',' << r.region_relevance << ',' << r.region_volume << ','
            << r.residual_volume << '\n';
    write_text(m, out / "scatter.csv", csv.str());
    write_json(m, out / "correlation.json",
               {{"region", cfg.region}, {"pearson", eval::to_json(corr.pearson)}, {"rules", lrp::to_json(cfg.rules)}});
    m.write();
    std::cout << "r = " << corr.pearson.r << " (n = " << corr.pearson.n << ", p = " << corr.pearson.p << ")\n";
}

void cmd_occlusion(const RunConfig &cfg, const std::string &subject) {
    Manifest m("occlusion", cfg);
    const auto out = prepare_out(cfg);
    const auto model = nn::load_model(require_path(cfg.model, "--model"));
    const auto cohort = load_cohort(require_path(cfg.cohort, "--cohort"));
    const auto residualizer = residualizer_of(cfg);
    const auto &s = cohort.subjects[subject_index(cohort, require_path(subject, "--subject"))];
    analyze::OcclusionConfig oc;
    oc.cube_edge = cfg.cube;
    oc.reduction = cfg.reduction;
    oc.stride = cfg.stride;
    oc.rules = cfg.rules;
    if (residualizer)
        oc.preprocess = [&](const Volume3D &v) { return apply_residualizer(*residualizer, v, s.record); };
    const auto r = m.timed("scan", [&] { return analyze::occlusion_scan(model, s.volume, oc); });
    write_nii(m, r.probability, out / "probability.nii");
    write_nii(m, r.total_relevance, out / "relevance.nii");
    const auto peak = analyze::occlusion_peak(r);
    const auto &d = r.probability.dims();
    const std::size_t px = peak % d.nx, py = peak / d.nx % d.ny, pz = peak / (d.nx * d.ny);
    write_json(m, out / "occlusion.json",
               {{"subject", subject},
                {"cube_edge", r.cube_edge},
                {"reduction", r.reduction},
                {"stride", r.stride},
                {"baseline_probability", r.baseline_probability},
                {"baseline_relevance", r.baseline_relevance},
                {"peak_voxel", {px, py, pz}},
                {"peak_region", cohort.atlas.name_of(cohort.atlas.id_at(peak))}});
    m.write();
}

void cmd_serve(const RunConfig &cfg) {
    std::string catalog = cfg.catalog;
    if (catalog.empty())
        if (const char *env = std::getenv("RELEVIS_CATALOG")) catalog = env;
    if (catalog.empty()) throw ConfigError("--catalog or RELEVIS_CATALOG is required");
    service::Service svc(service::load_catalog(catalog));
    httplib::Server server;
    svc.mount(server);
    const auto [host, port] = service::parse_bind(cfg.bind);
    if (!server.bind_to_port(host, port)) throw IoError("cannot bind " + cfg.bind);
    std::cout << "listening on " << host << ':' << port << '\n' << std::flush;
    server.listen_after_bind();
}

// ---------------------------------------------------------------------------
// Flags: every flag overrides the matching config key when given.

struct Flags {
    std::string config;
    std::vector<std::pair<CLI::Option *, std::function<void(RunConfig &)>>> overrides;

    template <class T, class Apply>
    void add(CLI::App *app, const std::string &name, const std::string &help, Apply apply) {
        auto value = std::make_shared<T>();
        auto *opt = app->add_option(name, *value, help);
        overrides.emplace_back(opt, [value, apply](RunConfig &c) { apply(c, *value); });
    }

    RunConfig resolve() const {
        RunConfig c = config.empty() ? RunConfig{} : load_run_config(config);
        for (const auto &[opt, apply] : overrides)
            if (opt->count() > 0) apply(c);
        for (auto *p : {&c.cohort, &c.model, &c.residualizer, &c.out, &c.catalog})
            if (!p->empty()) *p = fs::absolute(*p).lexically_normal().string();
        return c;
    }
};

void add_paths(CLI::App *sub, Flags &f, std::initializer_list<const char *> which) {
    for (std::string w : which) {
        if (w == "cohort") f.add<std::string>(sub, "--cohort", "cohort directory", [](RunConfig &c, auto v) { c.cohort = v; });
        if (w == "model") f.add<std::string>(sub, "--model", "model file (.rvm)", [](RunConfig &c, auto v) { c.model = v; });
        if (w == "residualizer")
            f.add<std::string>(sub, "--residualizer", "residualizer file (.rvr)",
                               [](RunConfig &c, auto v) { c.residualizer = v; });
        if (w == "out") f.add<std::string>(sub, "--out", "output directory", [](RunConfig &c, auto v) { c.out = v; });
    }
}

void add_split(CLI::App *sub, Flags &f) {
    f.add<std::size_t>(sub, "--k", "number of folds", [](RunConfig &c, auto v) { c.k = v; });
    f.add<std::size_t>(sub, "--fold", "test fold index", [](RunConfig &c, auto v) { c.fold = v; });
}

void add_rules(CLI::App *sub, Flags &f) {
    f.add<std::string>(sub, "--conv-rule", "alpha1beta0 | epsilon",
                       [](RunConfig &c, auto v) { c.rules.conv_rule = lrp::parse_rule(v); });
    f.add<std::string>(sub, "--dense-rule", "alpha1beta0 | epsilon",
                       [](RunConfig &c, auto v) { c.rules.dense_rule = lrp::parse_rule(v); });
    f.add<double>(sub, "--epsilon", "epsilon stabilizer", [](RunConfig &c, auto v) { c.rules.epsilon = v; });
    f.add<std::string>(sub, "--init", "logit | probability",
                       [](RunConfig &c, auto v) { c.rules.init = lrp::parse_init(v); });
}

void add_training(CLI::App *sub, Flags &f) {
    f.add<std::string>(sub, "--input", "raw | residualized", [](RunConfig &c, auto v) { c.input = v; });
    f.add<std::size_t>(sub, "--epochs", "training epochs", [](RunConfig &c, auto v) { c.epochs = v; });
    f.add<double>(sub, "--learning-rate", "Adam learning rate", [](RunConfig &c, auto v) { c.train.learning_rate = v; });
    f.add<std::size_t>(sub, "--batch-size", "mini-batch size", [](RunConfig &c, auto v) { c.train.batch_size = v; });
    f.add<std::string>(sub, "--checkpoint", "best-on-test | fixed-epochs",
                       [](RunConfig &c, auto v) { c.train.checkpoint = parse_checkpoint(v); });
    f.add<bool>(sub, "--augmentation", "flip/shift augmentation", [](RunConfig &c, auto v) { c.train.augmentation = v; });
    f.add<std::string>(sub, "--region", "target region name", [](RunConfig &c, auto v) { c.region = v; });
}

int run(int argc, char **argv) {
    CLI::App app{"relevis: 3D CNN training, relevance maps and their validation"};
    app.require_subcommand(1);
    app.fallthrough();
    app.failure_message(CLI::FailureMessage::help);
    Flags f;
    app.add_option("--config", f.config, "JSON run configuration")->check(CLI::ExistingFile);
    f.add<std::uint64_t>(&app, "--seed", "run seed", [](RunConfig &c, auto v) { c.seed = v; });

    auto *gen = app.add_subcommand("phantom-gen", "generate a synthetic cohort");
    add_paths(gen, f, {"out"});
    f.add<std::vector<std::size_t>>(gen, "--counts", "subjects per group CN,MCI,AD", [](RunConfig &c, auto v) {
        if (v.size() != 3) throw ConfigError("--counts needs three values");
        c.counts = {v[0], v[1], v[2]};
    });
    f.add<std::vector<std::size_t>>(gen, "--dims", "volume dims NX,NY,NZ", [](RunConfig &c, auto v) {
        if (v.size() != 3) throw ConfigError("--dims needs three values");
        c.phantom.dims = {v[0], v[1], v[2]};
    });
    f.add<double>(gen, "--noise-sd", "voxel noise SD", [](RunConfig &c, auto v) { c.phantom.noise_sd = v; });
    f.add<double>(gen, "--lesion-gain", "target-region intensity loss at severity 1",
                  [](RunConfig &c, auto v) { c.phantom.lesion_gain = v; });
    for (auto *o : gen->get_options())
        if (o->get_name() == "--counts" || o->get_name() == "--dims") o->delimiter(',');

    auto *fit = app.add_subcommand("fit-residualizer", "fit the voxel-wise covariate model on training controls");
    add_paths(fit, f, {"cohort", "out"});
    add_split(fit, f);

    auto *res = app.add_subcommand("residualize", "apply a residualizer to every subject of a cohort");
    add_paths(res, f, {"cohort", "residualizer", "out"});

    auto *train = app.add_subcommand("train", "train one fold (k < 2: whole sample) and write a viewer catalog");
    add_paths(train, f, {"cohort", "out"});
    add_split(train, f);
    add_training(train, f);

    auto *cv = app.add_subcommand("cross-validate", "k-fold cross-validation with a mean +- SD report");
    add_paths(cv, f, {"cohort", "out"});
    add_split(cv, f);
    add_training(cv, f);
    f.add<std::size_t>(cv, "--jobs", "folds trained in parallel", [](RunConfig &c, auto v) { c.jobs = v; });

    auto *ev = app.add_subcommand("evaluate", "contrasts of a trained model on a fold (k < 2: all subjects)");
    add_paths(ev, f, {"cohort", "model", "residualizer", "out"});
    add_split(ev, f);

    std::vector<std::string> subjects;
    int target = 1;
    auto *rel = app.add_subcommand("relevance", "export relevance maps as .nii");
    add_paths(rel, f, {"cohort", "model", "residualizer", "out"});
    add_rules(rel, f);
    rel->add_option("--subject", subjects, "subject id (repeatable; default all)");
    rel->add_option("--target", target, "explained class (0 CN, 1 disease)")->check(CLI::Range(0, 1));

    auto *rs = app.add_subcommand("region-stats", "region relevance vs residual region volume on the test fold");
    add_paths(rs, f, {"cohort", "model", "residualizer", "out"});
    add_split(rs, f);
    add_rules(rs, f);
    f.add<std::string>(rs, "--region", "target region name", [](RunConfig &c, auto v) { c.region = v; });

    std::string occ_subject;
    auto *occ = app.add_subcommand("occlusion", "occlusion maps of one subject");
    add_paths(occ, f, {"cohort", "model", "residualizer", "out"});
    add_rules(occ, f);
    occ->add_option("--subject", occ_subject, "subject id")->required();
    f.add<std::size_t>(occ, "--cube", "cube edge in voxels (0: default)", [](RunConfig &c, auto v) { c.cube = v; });
    f.add<double>(occ, "--reduction", "intensity reduction inside the cube",
                  [](RunConfig &c, auto v) { c.reduction = v; });
    f.add<std::size_t>(occ, "--stride", "grid stride in voxels", [](RunConfig &c, auto v) { c.stride = v; });

    auto *serve = app.add_subcommand("serve", "HTTP backend for the viewer");
    f.add<std::string>(serve, "--catalog", "catalog JSON (default: $RELEVIS_CATALOG)",
                       [](RunConfig &c, auto v) { c.catalog = v; });
    f.add<std::string>(serve, "--bind", "host:port", [](RunConfig &c, auto v) { c.bind = v; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    const RunConfig cfg = f.resolve();
    if (gen->parsed()) cmd_phantom_gen(cfg);
    else if (fit->parsed()) cmd_fit_residualizer(cfg);
    else if (res->parsed()) cmd_residualize(cfg);
    else if (train->parsed()) cmd_train(cfg);
    else if (cv->parsed()) cmd_cross_validate(cfg);
    else if (ev->parsed()) cmd_evaluate(cfg);
    else if (rel->parsed()) cmd_relevance(cfg, subjects, target);
    else if (rs->parsed()) cmd_region_stats(cfg);
    else if (occ->parsed()) cmd_occlusion(cfg, occ_subject);
    else if (serve->parsed()) cmd_serve(cfg);
    return 0;
}

} // namespace

int main(int argc, char **argv) {
    try {
        return run(argc, argv);
    } catch (const Error &e) {
        std::cerr << "error: " << e.what() << '\n';
    } catch (const std::exception &e) {
        std::cerr << "error: internal: " << e.what() << '\n';
    }
    return 1;
}
