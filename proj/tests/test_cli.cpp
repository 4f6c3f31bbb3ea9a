#include <csignal>
#include <fstream>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>
#include <json.hpp>

#include "relevis/dataset.hpp"
#include "relevis/nifti.hpp"
#include "relevis/nn/serialize.hpp"
#include "support.hpp"

using namespace relevis;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char *const kCli = RELEVIS_CLI;

struct Run {
    int code;
    std::string output;
};

Run cli(const std::string &args) {
    static test::TempDir logs;
    static int n = 0;
    const auto log = logs / ("run" + std::to_string(n++) + ".log");
    const int status = std::system((std::string(kCli) + " " + args + " > " + log.string() + " 2>&1").c_str());
    std::ostringstream text;
    text << std::ifstream(log).rdbuf();
    return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, text.str()};
}

json read_json(const fs::path &p) {
    json j;
    std::ifstream(p) >> j;
    return j;
}

std::string read_file(const fs::path &p) {
    std::ostringstream s;
    s << std::ifstream(p, std::ios::binary).rdbuf();
    return s.str();
}

/// Cohort, trained fold and residualizer shared by the pipeline tests.
struct Pipeline {
    test::TempDir dir;
    fs::path cohort = dir / "cohort", run = dir / "run";
    Run gen, train;

    Pipeline() {
        gen = cli("--seed 3 phantom-gen --out " + cohort.string() + " --dims 16,16,20 --counts 10,8,8");
        train = cli("--seed 3 train --cohort " + cohort.string() + " --out " + run.string() +
                    " --k 3 --fold 0 --epochs 2 --batch-size 8");
    }
};

Pipeline &pipeline() {
    static Pipeline p;
    return p;
}

} // namespace

TEST(Cli, HelpExitsZero) {
    const auto r = cli("--help");
    EXPECT_EQ(r.code, 0);
    for (const char *sub : {"phantom-gen", "fit-residualizer", "residualize", "train", "cross-validate", "evaluate",
                            "relevance", "region-stats", "occlusion", "serve"})
        EXPECT_NE(r.output.find(sub), std::string::npos) << sub;
}

TEST(Cli, ParseErrorsExitTwo) {
    EXPECT_EQ(cli("").code, 2);
    EXPECT_EQ(cli("frobnicate").code, 2);
    EXPECT_EQ(cli("phantom-gen --out x --nonsense 1").code, 2);
    EXPECT_EQ(cli("phantom-gen --out x --noise-sd abc").code, 2);
    EXPECT_EQ(cli("--config /nonexistent/cfg.json phantom-gen").code, 2);
    EXPECT_EQ(cli("relevance --target 3").code, 2);
}

TEST(Cli, RuntimeErrorsExitOne) {
    test::TempDir tmp;
    const auto r = cli("phantom-gen");
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("--out is required"), std::string::npos);
    EXPECT_EQ(cli("train --cohort " + (tmp / "none").string() + " --out " + (tmp / "o").string()).code, 1);
    EXPECT_EQ(cli("phantom-gen --out " + (tmp / "o").string() + " --counts 1,2").code, 1);
    EXPECT_EQ(cli("serve").code, 1);
}

TEST(Cli, ConfigFileRejectsUnknownKeys) {
    test::TempDir tmp;
    std::ofstream(tmp / "bad.json") << R"({"train": {"epochz": 3}})";
    const auto r = cli("--config " + (tmp / "bad.json").string() + " phantom-gen --out " + (tmp / "o").string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("train.epochz"), std::string::npos) << r.output;
}

TEST(Cli, ConfigFileAndFlagsCombine) {
    test::TempDir tmp;
    std::ofstream(tmp / "cfg.json") << R"({"seed": 8, "phantom": {"dims": [16, 16, 20], "counts": [2, 2, 2]}})";
    const auto r = cli("--config " + (tmp / "cfg.json").string() + " phantom-gen --out " + (tmp / "o").string() +
                       " --counts 3,1,1");
    ASSERT_EQ(r.code, 0) << r.output;
    const auto m = read_json(tmp / "o" / "manifest.json");
    EXPECT_EQ(m["seed"], 8);
    EXPECT_EQ(m["config"]["phantom"]["counts"], json::array({3, 1, 1}));
    EXPECT_EQ(load_cohort(tmp / "o").subjects.size(), 5u);
}

TEST(Cli, PhantomGenIsDeterministic) {
    test::TempDir tmp;
    const std::string args = " --seed 21 phantom-gen --dims 16,16,20 --counts 3,2,2 --out ";
    const auto out = (tmp / "out").string();
    ASSERT_EQ(cli(args + out).code, 0);
    fs::rename(tmp / "out", tmp / "a");
    ASSERT_EQ(cli(args + out).code, 0);
    fs::rename(tmp / "out", tmp / "b");
    auto ma = read_json(tmp / "a" / "manifest.json"), mb = read_json(tmp / "b" / "manifest.json");
    EXPECT_EQ(ma["config_hash"], mb["config_hash"]);
    EXPECT_EQ(ma["artifacts"], mb["artifacts"]);
    ASSERT_EQ(ma["artifacts"].size(), 3u + 7u);
    for (const auto &a : ma["artifacts"]) {
        const auto rel = a.get<std::string>();
        EXPECT_EQ(read_file(tmp / "a" / rel), read_file(tmp / "b" / rel)) << rel;
    }
    ASSERT_EQ(cli(" --seed 22 phantom-gen --dims 16,16,20 --counts 3,2,2 --out " + (tmp / "c").string()).code, 0);
    EXPECT_NE(read_file(tmp / "a" / "participants.tsv"), read_file(tmp / "c" / "participants.tsv"));
}

TEST(Cli, TrainWritesFoldArtifacts) {
    const auto &p = pipeline();
    ASSERT_EQ(p.gen.code, 0) << p.gen.output;
    ASSERT_EQ(p.train.code, 0) << p.train.output;
    EXPECT_NE(p.train.output.find("epoch 2"), std::string::npos);
    for (const char *f : {"model.rvm", "residualizer.rvr", "history.json", "report.json", "catalog.json", "manifest.json"})
        EXPECT_TRUE(fs::exists(p.run / f)) << f;
    const auto m = read_json(p.run / "manifest.json");
    EXPECT_EQ(m["command"], "train");
    EXPECT_EQ(m["k"], 3);
    for (const auto &a : m["artifacts"]) EXPECT_TRUE(fs::exists(p.run / a.get<std::string>())) << a;
    EXPECT_EQ(read_json(p.run / "history.json").size(), 2u);
    EXPECT_EQ(nn::load_model(p.run / "model.rvm").input_dims, (Dims{16, 16, 20}));
}

TEST(Cli, EvaluateRelevanceAndRegionStats) {
    const auto &p = pipeline();
    ASSERT_EQ(p.train.code, 0) << p.train.output;
    const std::string common = " --cohort " + p.cohort.string() + " --model " + (p.run / "model.rvm").string() +
                               " --residualizer " + (p.run / "residualizer.rvr").string();

    auto r = cli("--seed 3 evaluate" + common + " --k 3 --fold 0 --out " + (p.dir / "eval").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const auto ev = read_json(p.dir / "eval" / "evaluation.json");
    EXPECT_GT(ev["n"].get<int>(), 0);

    const auto ids = load_cohort(p.cohort).subjects;
    r = cli("relevance" + common + " --subject " + ids[0].record.id + " --subject " + ids[1].record.id +
            " --dense-rule alpha1beta0 --out " + (p.dir / "rel").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const auto rel = read_json(p.dir / "rel" / "relevance.json");
    ASSERT_EQ(rel["subjects"].size(), 2u);
    EXPECT_EQ(rel["rules"]["dense_rule"], "alpha1beta0");
    const auto map = read_volume(p.dir / "rel" / "relevance" / (ids[0].record.id + ".nii"));
    double sum = 0.0;
    for (float v : map.data()) sum += v;
    EXPECT_NEAR(sum, rel["subjects"][0]["sum_input_relevance"].get<double>(), 1e-6 * (1.0 + std::abs(sum)));

    r = cli("--seed 3 region-stats" + common + " --k 3 --fold 0 --out " + (p.dir / "rs").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const auto corr = read_json(p.dir / "rs" / "correlation.json");
    EXPECT_EQ(corr["region"], "Hippocampus");
    EXPECT_LE(std::abs(corr["pearson"]["r"].get<double>()), 1.0);
    EXPECT_TRUE(fs::exists(p.dir / "rs" / "scatter.csv"));

    EXPECT_EQ(cli("relevance" + common + " --subject nobody --out " + (p.dir / "x").string()).code, 1);
}

TEST(Cli, Occlusion) {
    const auto &p = pipeline();
    ASSERT_EQ(p.train.code, 0) << p.train.output;
    const auto id = load_cohort(p.cohort).subjects[0].record.id;
    const auto r = cli("occlusion --cohort " + p.cohort.string() + " --model " + (p.run / "model.rvm").string() +
                       " --residualizer " + (p.run / "residualizer.rvr").string() + " --subject " + id +
                       " --stride 4 --out " + (p.dir / "occ").string());
    ASSERT_EQ(r.code, 0) << r.output;
    const auto j = read_json(p.dir / "occ" / "occlusion.json");
    EXPECT_EQ(j["subject"], id);
    EXPECT_EQ(j["stride"], 4);
    EXPECT_EQ(read_volume(p.dir / "occ" / "probability.nii").dims(), (Dims{16, 16, 20}));
}

TEST(Cli, WholeSampleTraining) {
    const auto &p = pipeline();
    ASSERT_EQ(p.gen.code, 0) << p.gen.output;
    const std::string args = "--seed 3 train --cohort " + p.cohort.string() + " --k 1 --epochs 1 --batch-size 13 --out ";
    auto r = cli(args + (p.dir / "whole").string());
    EXPECT_EQ(r.code, 1);
    EXPECT_NE(r.output.find("fixed-epochs"), std::string::npos) << r.output;
    r = cli(args + (p.dir / "whole").string() + " --checkpoint fixed-epochs");
    ASSERT_EQ(r.code, 0) << r.output;
    const auto report = read_json(p.dir / "whole" / "report.json");
    EXPECT_EQ(report["n_train"], 26);
    EXPECT_EQ(report["n_test"], 0);
    EXPECT_EQ(read_json(p.dir / "whole" / "manifest.json")["whole_sample"], true);
    EXPECT_TRUE(fs::exists(p.dir / "whole" / "catalog.json"));
}

TEST(Cli, FitAndApplyResidualizer) {
    const auto &p = pipeline();
    ASSERT_EQ(p.gen.code, 0) << p.gen.output;
    auto r = cli("--seed 3 fit-residualizer --cohort " + p.cohort.string() + " --k 3 --fold 0 --out " +
                 (p.dir / "fit").string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(read_file(p.dir / "fit" / "residualizer.rvr"), read_file(p.run / "residualizer.rvr"));
    r = cli("residualize --cohort " + p.cohort.string() + " --residualizer " + (p.dir / "fit" / "residualizer.rvr").string() +
            " --out " + (p.dir / "resid").string());
    ASSERT_EQ(r.code, 0) << r.output;
    EXPECT_EQ(load_cohort(p.dir / "resid").subjects.size(), 26u);
}

TEST(Cli, ServeAnswersOnBoundPort) {
    const auto &p = pipeline();
    ASSERT_EQ(p.train.code, 0) << p.train.output;
    int port = 0;
    {
        httplib::Server probe;
        port = probe.bind_to_any_port("127.0.0.1");
    }
    const auto pidfile = p.dir / "serve.pid";
    const std::string cmd = std::string(kCli) + " serve --catalog " + (p.run / "catalog.json").string() +
                            " --bind 127.0.0.1:" + std::to_string(port) + " > " + (p.dir / "serve.log").string() +
                            " 2>&1 & echo $! > " + pidfile.string();
    ASSERT_EQ(std::system(cmd.c_str()), 0);
    pid_t pid = 0;
    std::ifstream(pidfile) >> pid;
    ASSERT_GT(pid, 0);

    httplib::Client c("127.0.0.1", port);
    httplib::Result res;
    for (int i = 0; i < 100 && !res; ++i) {
        res = c.Get("/api/models");
        if (!res) std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
    ::kill(pid, SIGTERM);
    ASSERT_TRUE(res) << read_file(p.dir / "serve.log");
    EXPECT_EQ(res->status, 200);
    EXPECT_EQ(json::parse(res->body)[0]["id"], "model");
}
