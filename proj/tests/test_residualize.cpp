#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "relevis/residualize.hpp"
#include "support.hpp"

using namespace relevis;

namespace {

std::vector<SubjectRecord> random_controls(std::size_t n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<SubjectRecord> out;
    for (std::size_t i = 0; i < n; ++i) {
        SubjectRecord r;
        r.id = "c" + std::to_string(i);
        r.age = 70.0 + 6.0 * g(rng);
        r.sex = int(i % 2);
        r.tiv = 1450.0 + 120.0 * g(rng);
        r.field_strength = i % 3 == 0 ? 1.5 : 3.0;
        out.push_back(r);
    }
    return out;
}

// Normal-equation OLS in Eigen: [1, age, sex, tiv, fs] -> coefficients.
Eigen::VectorXd oracle_ols(const std::vector<SubjectRecord> &recs, const std::vector<double> &y) {
    Eigen::MatrixXd X(recs.size(), 5);
    Eigen::VectorXd Y(recs.size());
    for (std::size_t j = 0; j < recs.size(); ++j) {
        X.row(Eigen::Index(j)) << 1.0, recs[j].age, double(recs[j].sex), recs[j].tiv, recs[j].field_strength_code();
        Y(Eigen::Index(j)) = y[j];
    }
    return (X.transpose() * X).ldlt().solve(X.transpose() * Y);
}

double correlation(const std::vector<double> &a, const std::vector<double> &b) {
    const double n = double(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) ma += a[i] / n, mb += b[i] / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

} // namespace

TEST(Residualize, ThreePointScalarClosedForm) {
    std::vector<SubjectRecord> recs(3);
    for (int i = 0; i < 3; ++i) recs[i].age = i + 1;
    const std::vector<double> y{1, 2, 4};
    const auto m = fit_scalar_residualizer(y, recs, {"age"});
    EXPECT_NEAR(m.betas[0], -2.0 / 3.0, 1e-12);
    EXPECT_NEAR(m.betas[1], 1.5, 1e-12);
    const double expected[3] = {1.0 / 6.0, -1.0 / 3.0, 1.0 / 6.0};
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(apply_scalar(m, y[i], recs[i]), expected[i], 1e-12);
}

TEST(Residualize, ExactLinearTivSignal) {
    const auto recs = random_controls(12, 1);
    std::vector<Volume3D> vols;
    for (const auto &r : recs) vols.push_back(Volume3D({2, 2, 2}, 1.f).with_data(std::vector<float>(8, float(0.001 * r.tiv))));
    const auto m = fit_residualizer(vols, recs);
    for (std::size_t v = 0; v < 8; ++v) {
        const auto b = m.coefficients(v);
        EXPECT_NEAR(b[3], 0.001, 1e-7);
        EXPECT_NEAR(b[1], 0.0, 1e-6);
        EXPECT_NEAR(b[2], 0.0, 1e-5);
        EXPECT_NEAR(b[4], 0.0, 1e-5);
    }
    for (std::size_t j = 0; j < recs.size(); ++j) {
        const auto residual = apply_residualizer(m, vols[j], recs[j]);
        for (float x : residual.data()) EXPECT_NEAR(x, 0.0, 1e-5);
    }
}

TEST(Residualize, ConstantVoxel) {
    const auto recs = random_controls(8, 2);
    std::vector<double> y(8, 2.5);
    const auto m = fit_scalar_residualizer(y, recs);
    EXPECT_NEAR(m.betas[0], 2.5, 1e-9);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(apply_scalar(m, y[j], recs[j]), 0.0, 1e-9);
}

TEST(Residualize, AgeOnlySignal) {
    const auto recs = random_controls(9, 3);
    std::vector<double> y;
    for (const auto &r : recs) y.push_back(3.0 * r.age + 1.0);
    const auto m = fit_scalar_residualizer(y, recs);
    for (std::size_t j = 0; j < y.size(); ++j) EXPECT_NEAR(apply_scalar(m, y[j], recs[j]), 0.0, 1e-9);
}

TEST(Residualize, MatchesNormalEquationOracle) {
    const auto recs = random_controls(10, 4);
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> y;
    for (const auto &r : recs) y.push_back(0.3 - 0.01 * r.age + 0.2 * r.sex + 0.0004 * r.tiv + g(rng));
    const auto m = fit_scalar_residualizer(y, recs);
    const auto ref = oracle_ols(recs, y);
    for (int c = 0; c < 5; ++c) EXPECT_NEAR(m.betas[c], ref(c), 1e-10 * std::max(1.0, std::abs(ref(c))));
}

TEST(Residualize, OrderInvariant) {
    auto recs = random_controls(10, 6);
    std::vector<double> y;
    for (std::size_t i = 0; i < recs.size(); ++i) y.push_back(std::sin(double(i)) + 0.001 * recs[i].tiv);
    const auto a = fit_scalar_residualizer(y, recs);
    std::vector<std::size_t> perm(recs.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), std::mt19937_64(7));
    std::vector<SubjectRecord> r2;
    std::vector<double> y2;
    for (std::size_t p : perm) r2.push_back(recs[p]), y2.push_back(y[p]);
    const auto b = fit_scalar_residualizer(y2, r2);
    for (int c = 0; c < 5; ++c) EXPECT_NEAR(a.betas[c], b.betas[c], 1e-9 * std::max(1.0, std::abs(a.betas[c])));
}

TEST(Residualize, FitSetResidualsAreOrthogonalToCovariates) {
    const auto recs = random_controls(30, 8);
    std::mt19937_64 rng(9);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> y;
    for (const auto &r : recs) y.push_back(0.002 * r.tiv - 0.01 * r.age + g(rng));
    const auto m = fit_scalar_residualizer(y, recs);
    std::vector<double> res;
    double mean = 0;
    for (std::size_t j = 0; j < y.size(); ++j) res.push_back(apply_scalar(m, y[j], recs[j])), mean += res.back();
    EXPECT_NEAR(mean / double(y.size()), 0.0, 1e-9);
    for (const auto &name : default_covariates()) {
        std::vector<double> col;
        for (const auto &r : recs) col.push_back(covariate_value(r, name));
        EXPECT_LT(std::abs(correlation(res, col)), 1e-6) << name;
    }
}

TEST(Residualize, RefitOnResidualsIsNearZero) {
    const auto recs = random_controls(20, 10);
    std::mt19937_64 rng(11);
    std::normal_distribution<double> g(0.0, 1.0);
    std::vector<double> y;
    for (const auto &r : recs) y.push_back(0.001 * r.tiv + g(rng));
    const auto m = fit_scalar_residualizer(y, recs);
    std::vector<double> res;
    for (std::size_t j = 0; j < y.size(); ++j) res.push_back(apply_scalar(m, y[j], recs[j]));
    const auto again = fit_scalar_residualizer(res, recs);
    for (double b : again.betas) EXPECT_NEAR(b, 0.0, 1e-8);
}

TEST(Residualize, ThresholdAnchorScalar) {
    // A subject sitting 0.95 ml below the control prediction has residual -0.95 ml.
    const auto recs = random_controls(12, 12);
    std::vector<double> y;
    for (const auto &r : recs) y.push_back(7.0 + 0.001 * r.tiv - 0.02 * r.age);
    const auto m = fit_scalar_residualizer(y, recs);
    SubjectRecord probe = recs[0];
    probe.group = Group::AD;
    probe.lesion_severity = 0.5;
    const double predicted = 7.0 + 0.001 * probe.tiv - 0.02 * probe.age;
    EXPECT_NEAR(apply_scalar(m, predicted - 0.95, probe), -0.95, 1e-9);
}

TEST(Residualize, ZeroModelIsIdentity) {
    ResidualModel m;
    m.dims = Dims{3, 3, 3};
    m.betas.assign(27 * 5, 0.0);
    const auto v = test::random_volume({3, 3, 3}, 13);
    EXPECT_EQ(apply_residualizer(m, v, SubjectRecord{}), v);
}

TEST(Residualize, VoxelwiseMeanResidualIsZeroOnFitSet) {
    const auto recs = random_controls(15, 14);
    std::vector<Volume3D> vols;
    for (std::size_t j = 0; j < recs.size(); ++j) vols.push_back(test::random_volume({4, 3, 2}, 100 + j));
    const auto m = fit_residualizer(vols, recs);
    std::vector<double> mean(24, 0.0);
    for (std::size_t j = 0; j < recs.size(); ++j) {
        const auto r = apply_residualizer(m, vols[j], recs[j]);
        for (std::size_t i = 0; i < 24; ++i) mean[i] += r[i] / double(recs.size());
    }
    for (double x : mean) EXPECT_NEAR(x, 0.0, 1e-6);
}

TEST(Residualize, Errors) {
    auto recs = random_controls(10, 15);
    for (auto &r : recs) r.sex = 0, r.field_strength = 3.0;
    std::vector<double> y(10, 1.0);
    try {
        fit_scalar_residualizer(y, recs);
        FAIL() << "expected SingularDesignError";
    } catch (const SingularDesignError &e) {
        EXPECT_NE(std::string(e.what()).find("sex"), std::string::npos);
        EXPECT_NE(std::string(e.what()).find("field_strength"), std::string::npos);
    }
    EXPECT_THROW(fit_scalar_residualizer(std::vector<double>(4, 1.0), random_controls(4, 16)), SingularDesignError);

    auto mixed = random_controls(10, 17);
    mixed[3].group = Group::MCI;
    mixed[3].lesion_severity = 0.3;
    std::vector<Volume3D> vols(10, Volume3D({2, 2, 2}, 1.f));
    EXPECT_THROW(fit_residualizer(vols, mixed), DataError);

    const auto m = fit_residualizer(vols, random_controls(10, 18));
    EXPECT_THROW(apply_residualizer(m, Volume3D({2, 2, 3}, 1.f), SubjectRecord{}), DimsError);
}

TEST(Residualize, SerializationRoundTrip) {
    test::TempDir dir;
    const auto recs = random_controls(10, 19);
    std::vector<Volume3D> vols;
    for (std::size_t j = 0; j < recs.size(); ++j) vols.push_back(test::random_volume({3, 2, 2}, 200 + j));
    const auto m = fit_residualizer(vols, recs);
    save_residual_model(m, dir / "m.rvr");
    const auto back = load_residual_model(dir / "m.rvr");
    EXPECT_EQ(back.dims, m.dims);
    EXPECT_EQ(back.fit_count, 10u);
    EXPECT_EQ(back.covariate_names, m.covariate_names);
    for (std::size_t i = 0; i < m.betas.size(); ++i) EXPECT_EQ(back.betas[i], double(float(m.betas[i])));

    std::ofstream(dir / "bad.rvr") << "not a model";
    EXPECT_THROW(load_residual_model(dir / "bad.rvr"), FormatError);
}
