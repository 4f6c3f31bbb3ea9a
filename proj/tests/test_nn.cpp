#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <utility>

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "relevis/nn/augment.hpp"
#include "relevis/nn/serialize.hpp"
#include "relevis/nn/train.hpp"
#include "support.hpp"

using namespace relevis;
using namespace relevis::nn;

namespace {

template <class T>
Tensor<T> random_batch(const Dims &d, std::size_t n, std::uint64_t seed) {
    std::vector<Volume3D> vols;
    for (std::size_t i = 0; i < n; ++i) vols.push_back(test::random_volume(d, seed + i));
    std::vector<const Volume3D *> ptrs;
    for (const auto &v : vols) ptrs.push_back(&v);
    return to_tensor<T>(std::span<const Volume3D *const>(ptrs));
}

void expect_gradients_match(const std::vector<test::LayerGradReport> &reports, double tol, std::size_t probes) {
    ASSERT_FALSE(reports.empty());
    for (const auto &r : reports) {
        EXPECT_GE(r.probes, probes) << r.name << " layer " << r.layer;
        EXPECT_LT(r.max_rel, tol) << r.name << " layer " << r.layer;
    }
}

// Single conv -> relu -> pool -> batchnorm -> flatten -> dropout -> dense head.
template <class T>
Model<T> small_model(const Dims &d, std::uint64_t seed) {
    Model<T> m;
    m.input_dims = d;
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    auto fill = [&](std::size_t n) {
        std::vector<T> v(n);
        for (auto &x : v) x = T(u(rng));
        return v;
    };
    m.layers.push_back(Conv3D<T>{1, 3, fill(3 * 27), fill(3)});
    m.layers.push_back(ReLU{});
    m.layers.push_back(MaxPool3D{});
    m.layers.push_back(BatchNorm<T>{3, fill(3), fill(3), fill(3), std::vector<T>(3, T(0.7))});
    m.layers.push_back(Flatten{});
    m.layers.push_back(Dropout{0.25});
    const std::size_t features = 3 * pooled(d).voxels();
    m.layers.push_back(Dense<T>{features, 2, fill(2 * features), fill(2), true});
    m.layers.push_back(Softmax{});
    return m;
}

} // namespace

TEST(Architecture, ParameterCountAtFullResolution) {
    EXPECT_EQ(expected_parameter_count({100, 100, 120}), 694'940u);
    // Layer by layer: conv 140 + 680 + 680, batchnorm 3 x 10, flatten 5*12*12*15 = 10800,
    // dense 10800*64+64, 64*32+32, 32*2+2.
    EXPECT_EQ(140u + 680u + 680u + 30u + (10'800u * 64u + 64u) + (64u * 32u + 32u) + (32u * 2u + 2u), 694'940u);
    EXPECT_EQ(trainable_parameter_count(build_model<float>({100, 100, 120}, 1)), 694'940u);
}

TEST(Architecture, ParameterCountAtPhantomResolution) {
    // Flatten: 5 channels x 4*4*5 = 400 features.
    EXPECT_EQ(pooled(pooled(pooled(Dims{32, 32, 40}))), (Dims{4, 4, 5}));
    EXPECT_EQ(expected_parameter_count({32, 32, 40}), 29'340u);
    EXPECT_EQ(trainable_parameter_count(build_model<float>({32, 32, 40}, 1)), 29'340u);
}

TEST(Architecture, FloorPoolingOnOddDims) {
    EXPECT_EQ(pooled(Dims{9, 11, 17}), (Dims{4, 5, 8}));
    const auto m = build_model<float>({9, 11, 17}, 2);
    EXPECT_EQ(trainable_parameter_count(m), expected_parameter_count({9, 11, 17}));
    EXPECT_NO_THROW(validate_architecture(m));
}

TEST(Architecture, RejectsTinyInputs) {
    EXPECT_THROW(build_model<float>({7, 16, 16}, 1), ShapeError);
    EXPECT_THROW(build_model<float>({16, 16, 4}, 1), ShapeError);
}

TEST(Architecture, SeedDeterminism) {
    const auto a = build_model<float>({8, 8, 8}, 5), b = build_model<float>({8, 8, 8}, 5),
               c = build_model<float>({8, 8, 8}, 6);
    const auto pa = parameters(a), pb = parameters(b), pc = parameters(c);
    bool differs = false;
    for (std::size_t p = 0; p < pa.size(); ++p) {
        EXPECT_TRUE(std::equal(pa[p].values.begin(), pa[p].values.end(), pb[p].values.begin()));
        differs |= !std::equal(pa[p].values.begin(), pa[p].values.end(), pc[p].values.begin());
    }
    EXPECT_TRUE(differs);
}

TEST(Architecture, L2OnlyOnLastTwoDenseLayers) {
    const auto m = build_model<float>({8, 8, 8}, 1);
    std::vector<bool> flags;
    for (const auto &l : m.layers)
        if (const auto *d = std::get_if<Dense<float>>(&l)) flags.push_back(d->l2);
    EXPECT_EQ(flags, (std::vector<bool>{false, true, true}));
}

TEST(Forward, ZeroOutputLayerGivesEvenOdds) {
    auto m = build_model<float>({8, 8, 8}, 3);
    auto &last = std::get<Dense<float>>(m.layers[m.layers.size() - 2]);
    std::fill(last.weight.begin(), last.weight.end(), 0.f);
    std::fill(last.bias.begin(), last.bias.end(), 0.f);
    const auto p = predict(m, test::random_volume({8, 8, 8}, 4));
    EXPECT_DOUBLE_EQ(p[0], 0.5);
    EXPECT_DOUBLE_EQ(p[1], 0.5);
}

TEST(Forward, InferenceIsDeterministicAndNormalized) {
    const auto m = build_model<float>({12, 10, 9}, 7);
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto v = test::random_volume({12, 10, 9}, 100 + s);
        const auto a = predict(m, v), b = predict(m, v);
        EXPECT_EQ(a, b);
        EXPECT_NEAR(a[0] + a[1], 1.0, 1e-6);
        EXPECT_GE(a[0], 0.0);
        EXPECT_GE(a[1], 0.0);
    }
}

TEST(Forward, BatchedMatchesSingle) {
    const auto m = build_model<float>({8, 8, 8}, 8);
    std::vector<Volume3D> vols;
    for (int i = 0; i < 5; ++i) vols.push_back(test::random_volume({8, 8, 8}, 200 + i));
    std::vector<const Volume3D *> ptrs;
    for (const auto &v : vols) ptrs.push_back(&v);
    const auto batched = predict(m, std::span<const Volume3D *const>(ptrs), 2);
    for (int i = 0; i < 5; ++i) {
        const auto single = predict(m, vols[i]);
        EXPECT_NEAR(batched[i][1], single[1], 1e-6);
    }
}

TEST(Forward, DeltaKernelIsIdentity) {
    Model<double> m;
    m.input_dims = {5, 6, 7};
    std::vector<double> w(27, 0.0);
    w[13] = 1.0; // centre tap
    m.layers.push_back(Conv3D<double>{1, 1, w, {0.0}});
    const auto v = test::random_volume({5, 6, 7}, 9);
    const auto t = forward(m, to_tensor<double>(v));
    for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(t.output().data[i], double(v[i]));
}

TEST(Forward, ShapeAndFinitenessChecks) {
    const auto m = build_model<float>({8, 8, 8}, 1);
    EXPECT_THROW(predict(m, Volume3D({8, 8, 9}, 1.f)), ShapeError);
    auto bad = test::random_volume({8, 8, 8}, 1);
    bad[0] = std::numeric_limits<float>::infinity();
    EXPECT_THROW(predict(m, bad), NumericError);
}

TEST(Forward, DropoutIsIdentityAtInference) {
    const auto m = build_model<float>({8, 8, 8}, 2);
    const auto v = test::random_volume({8, 8, 8}, 3);
    const auto a = forward(m, v, Mode::Infer, 1), b = forward(m, v, Mode::Infer, 99);
    EXPECT_EQ(a.probabilities, b.probabilities);
}

TEST(Gradients, SmallModelEveryLayerTypeTrainMode) {
    const Dims d{6, 5, 4};
    const auto m = small_model<double>(d, 1);
    const auto batch = random_batch<double>(d, 3, 10);
    const auto reports =
        test::check_gradients(m, batch, {0, 1, 1}, LossConfig{{0.75, 1.5}, 0.01}, 17, Mode::Train, 20, 1, 1e-5);
    expect_gradients_match(reports, 1e-6, 20);
}

TEST(Gradients, SmallModelInferMode) {
    const Dims d{6, 5, 4};
    const auto m = small_model<double>(d, 2);
    const auto reports = test::check_gradients(m, random_batch<double>(d, 2, 20), {1, 0}, LossConfig{{1.0, 1.0}, 0.0},
                                               0, Mode::Infer, 20, 2, 1e-5);
    expect_gradients_match(reports, 1e-6, 20);
}

TEST(Gradients, FullNetworkFloat32) {
    const Dims d{16, 16, 20};
    const auto m = build_model<float>(d, 3);
    const auto reports = test::check_gradients(m, random_batch<float>(d, 4, 30), {0, 1, 0, 1},
                                               LossConfig{{0.8, 1.3}, 0.01}, 5, Mode::Train, 20, 3);
    EXPECT_EQ(reports.size(), 9u);
    expect_gradients_match(reports, 1e-3, 20);
}

TEST(Loss, PerfectPredictionHasNearZeroDataLoss) {
    auto m = small_model<double>({4, 4, 4}, 3);
    auto &last = std::get<Dense<double>>(m.layers[6]);
    std::fill(last.weight.begin(), last.weight.end(), 0.0);
    last.bias = {-40.0, 40.0};
    const auto r = loss_and_grads(m, random_batch<double>({4, 4, 4}, 2, 1), std::vector<int>{1, 1}, LossConfig{}, 0,
                                  Mode::Infer);
    EXPECT_LT(r.data_loss, 1e-30);
}

TEST(Loss, ClassWeightScalesContribution) {
    const auto m = small_model<double>({4, 4, 4}, 4);
    const auto batch = random_batch<double>({4, 4, 4}, 1, 2);
    const std::vector<int> y{1};
    const auto a = loss_and_grads(m, batch, y, LossConfig{{1.0, 1.0}, 0.0}, 0, Mode::Infer);
    const auto b = loss_and_grads(m, batch, y, LossConfig{{1.0, 2.0}, 0.0}, 0, Mode::Infer);
    EXPECT_NEAR(b.data_loss, 2.0 * a.data_loss, 1e-12);
    for (std::size_t p = 0; p < a.grads.size(); ++p)
        for (std::size_t k = 0; k < a.grads[p].size(); ++k) EXPECT_NEAR(b.grads[p][k], 2.0 * a.grads[p][k], 1e-12);
}

TEST(Loss, L2PenaltyAddsToLoss) {
    const auto m = small_model<double>({4, 4, 4}, 5);
    const auto batch = random_batch<double>({4, 4, 4}, 2, 3);
    const std::vector<int> y{0, 1};
    const auto r = loss_and_grads(m, batch, y, LossConfig{{1.0, 1.0}, 0.05}, 0, Mode::Infer);
    const auto &w = std::get<Dense<double>>(m.layers[6]).weight;
    const double sq = std::inner_product(w.begin(), w.end(), w.begin(), 0.0);
    EXPECT_NEAR(r.loss - r.data_loss, 0.05 * sq, 1e-12);
}

TEST(Loss, RejectsBadLabels) {
    const auto m = small_model<double>({4, 4, 4}, 6);
    const auto batch = random_batch<double>({4, 4, 4}, 2, 4);
    EXPECT_THROW(loss_and_grads(m, batch, std::vector<int>{0, 2}, LossConfig{}), DataError);
    EXPECT_THROW(loss_and_grads(m, batch, std::vector<int>{0}, LossConfig{}), DataError);
}

TEST(ClassWeights, TrainingCohortCounts) {
    const auto w = class_weights(254, 409);
    EXPECT_NEAR(w[0], 663.0 / 508.0, 1e-12);
    EXPECT_NEAR(w[1], 663.0 / 818.0, 1e-12);
    EXPECT_EQ(std::round(w[0] * 100) / 100, 1.31);
    EXPECT_EQ(std::round(w[1] * 100) / 100, 0.81);
}

TEST(ClassWeights, BalancedAndSkewed) {
    for (std::size_t k : {1u, 7u, 100u}) {
        const auto w = class_weights(k, k);
        EXPECT_DOUBLE_EQ(w[0], 1.0);
        EXPECT_DOUBLE_EQ(w[1], 1.0);
    }
    const auto w = class_weights(1, 3);
    EXPECT_DOUBLE_EQ(w[0], 2.0);
    EXPECT_DOUBLE_EQ(w[1], 2.0 / 3.0);
    // Each class contributes n/2 in total weight.
    EXPECT_DOUBLE_EQ(1 * w[0], 3 * w[1]);
    EXPECT_THROW(class_weights(0, 5), DegenerateClassError);
    EXPECT_THROW(class_weights(5, 0), DegenerateClassError);
}

TEST(Augment, FourteenVariantsFirstIsInput) {
    const auto v = test::random_volume({10, 10, 12}, 1);
    const auto all = augment(v);
    ASSERT_EQ(all.size(), kVariants);
    EXPECT_EQ(all[0], v);
    EXPECT_EQ(all[7], flip_x(v));
    for (std::size_t a = 0; a < all.size(); ++a)
        for (std::size_t b = a + 1; b < all.size(); ++b) EXPECT_NE(all[a], all[b]) << a << " vs " << b;
}

TEST(Augment, DefaultShiftsScaleWithGrid) {
    EXPECT_EQ(default_shifts({100, 100, 120}), (std::array<long, 3>{10, 10, 10}));
    EXPECT_EQ(default_shifts({32, 32, 40}), (std::array<long, 3>{3, 3, 3}));
}

TEST(Augment, FlipIsInvolution) {
    for (std::uint64_t s = 0; s < 5; ++s) {
        const auto v = test::random_volume({7, 4, 3}, s);
        EXPECT_EQ(flip_x(flip_x(v)), v);
        EXPECT_EQ(flip_x(v).at(0, 2, 1), v.at(6, 2, 1));
    }
}

TEST(Augment, ShiftRoundTripBookkeeping) {
    const Dims d{9, 8, 10};
    const auto v = test::random_volume(d, 3, 1.f, 2.f); // strictly nonzero
    for (std::size_t axis = 0; axis < 3; ++axis)
        for (long s : {1L, 2L, 3L}) {
            const auto back = shift(shift(v, axis, s), axis, -s);
            std::size_t changed = 0;
            for (std::size_t z = 0; z < d.nz; ++z)
                for (std::size_t y = 0; y < d.ny; ++y)
                    for (std::size_t x = 0; x < d.nx; ++x) {
                        const long c = long(std::array<std::size_t, 3>{x, y, z}[axis]);
                        const bool border = c >= long(d[axis]) - s;
                        if (border) {
                            EXPECT_EQ(back.at(x, y, z), 0.f);
                            ++changed;
                        } else {
                            EXPECT_EQ(back.at(x, y, z), v.at(x, y, z));
                        }
                    }
            EXPECT_EQ(changed, std::size_t(s) * d.voxels() / d[axis]);
            // +s then -s, and -s then +s, together clear both border slabs (2s slabs).
            const auto other = shift(shift(v, axis, -s), axis, s);
            std::size_t zeros = 0;
            for (std::size_t i = 0; i < v.size(); ++i) zeros += (back[i] == 0.f) + (other[i] == 0.f);
            EXPECT_EQ(zeros, 2 * std::size_t(s) * d.voxels() / d[axis]);
        }
}

TEST(Augment, ShiftsThatDoNotFitAreRejected) {
    const auto v = test::random_volume({4, 4, 4}, 1);
    EXPECT_THROW(shift(v, 0, 4), ShapeError);
    EXPECT_THROW(shift(v, 3, 1), ShapeError);
    EXPECT_THROW(augment(v, {1, 4, 1}), ShapeError);
    EXPECT_THROW(augment_variant(v, 14), ShapeError);
}

namespace {

struct ToySet {
    std::vector<Volume3D> vols;
    std::vector<Example> train, test;
};

// Class 1 volumes are dimmer in one octant.
ToySet toy_set(std::size_t n, std::uint64_t seed) {
    ToySet s;
    for (std::size_t i = 0; i < n; ++i) {
        auto v = test::random_volume({8, 8, 8}, seed + i, 0.f, 0.2f);
        const int y = int(i % 2);
        for (std::size_t z = 0; z < 4; ++z)
            for (std::size_t yy = 0; yy < 4; ++yy)
                for (std::size_t x = 0; x < 4; ++x) v.at(x, yy, z) += y ? 0.1f : 1.0f;
        s.vols.push_back(std::move(v));
    }
    for (std::size_t i = 0; i < n; ++i)
        (i < n * 3 / 4 ? s.train : s.test).push_back({"s" + std::to_string(i), &s.vols[i], int(i % 2)});
    return s;
}

} // namespace

TEST(Train, ZeroEpochsReturnsInitialModel) {
    auto toy = toy_set(8, 1);
    TrainConfig cfg;
    cfg.epochs = 0;
    const auto m = build_model<float>({8, 8, 8}, 1);
    const auto r = train(m, std::span<const Example>(toy.train), std::span<const Example>(toy.test), cfg);
    EXPECT_EQ(r.selected_epoch, 0u);
    EXPECT_TRUE(r.history.empty());
    EXPECT_EQ(predict(r.model, toy.vols[0]), predict(m, toy.vols[0]));
}

TEST(Train, LossDecreasesOnToyProblem) {
    auto toy = toy_set(16, 2);
    TrainConfig cfg;
    cfg.epochs = 6;
    cfg.learning_rate = 1e-2;
    cfg.batch_size = 8;
    cfg.augmentation = false;
    cfg.seed = 3;
    const auto r = train(build_model<float>({8, 8, 8}, 2), std::span<const Example>(toy.train),
                         std::span<const Example>(toy.test), cfg);
    ASSERT_EQ(r.history.size(), 6u);
    EXPECT_LT(r.history.back().train_loss, r.history.front().train_loss);
    for (std::size_t e = 0; e < 6; ++e) EXPECT_EQ(r.history[e].epoch, e + 1);
}

TEST(Train, BestOnTestPicksEarliestMaximum) {
    auto toy = toy_set(16, 3);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 4;
    cfg.seed = 4;
    cfg.shifts = std::array<long, 3>{1, 1, 1};
    const auto r = train(build_model<float>({8, 8, 8}, 3), std::span<const Example>(toy.train),
                         std::span<const Example>(toy.test), cfg);
    std::size_t expect = 1;
    for (std::size_t e = 1; e < r.history.size(); ++e)
        if (r.history[e].test_balanced_accuracy > r.history[expect - 1].test_balanced_accuracy) expect = e + 1;
    EXPECT_EQ(r.selected_epoch, expect);
    EXPECT_DOUBLE_EQ(balanced_accuracy_of(r.model, std::span<const Example>(toy.test)),
                     r.history[expect - 1].test_balanced_accuracy);
}

TEST(Train, FixedEpochsTakesLast) {
    auto toy = toy_set(8, 4);
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.checkpoint = CheckpointPolicy::FixedEpochs;
    cfg.augmentation = false;
    const auto r = train(build_model<float>({8, 8, 8}, 4), std::span<const Example>(toy.train),
                         std::span<const Example>(toy.test), cfg);
    EXPECT_EQ(r.selected_epoch, 4u);
}

TEST(Train, FixedEpochsWithoutTestSet) {
    auto toy = toy_set(8, 4);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.checkpoint = CheckpointPolicy::FixedEpochs;
    cfg.augmentation = false;
    const auto r = train(build_model<float>({8, 8, 8}, 4), std::span<const Example>(toy.train), {}, cfg);
    EXPECT_EQ(r.selected_epoch, 2u);
    ASSERT_EQ(r.history.size(), 2u);
    EXPECT_TRUE(std::isnan(r.history[1].test_balanced_accuracy));
}

TEST(Train, SameSeedSameModel) {
    auto toy = toy_set(8, 5);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 9;
    cfg.shifts = std::array<long, 3>{1, 1, 1};
    const auto a = train(build_model<float>({8, 8, 8}, 5), std::span<const Example>(toy.train),
                         std::span<const Example>(toy.test), cfg);
    const auto b = train(build_model<float>({8, 8, 8}, 5), std::span<const Example>(toy.train),
                         std::span<const Example>(toy.test), cfg);
    const auto pa = parameters(a.model), pb = parameters(b.model);
    for (std::size_t p = 0; p < pa.size(); ++p)
        EXPECT_TRUE(std::equal(pa[p].values.begin(), pa[p].values.end(), pb[p].values.begin()));
}

TEST(Train, RejectsBadInputs) {
    auto toy = toy_set(8, 6);
    const auto m = build_model<float>({8, 8, 8}, 6);
    TrainConfig cfg;
    cfg.epochs = 1;
    EXPECT_THROW(train(m, {}, std::span<const Example>(toy.test), cfg), DataError);
    EXPECT_THROW(train(m, std::span<const Example>(toy.train), {}, cfg), DataError);
    auto leaked = toy.test;
    leaked.push_back(toy.train[0]);
    EXPECT_THROW(train(m, std::span<const Example>(toy.train), std::span<const Example>(leaked), cfg), DataError);
    cfg.batch_size = 0;
    EXPECT_THROW(train(m, std::span<const Example>(toy.train), std::span<const Example>(toy.test), cfg), ConfigError);
}

TEST(Serialize, RoundTrip) {
    test::TempDir dir;
    auto m = build_model<float>({9, 8, 10}, 11);
    std::get<BatchNorm<float>>(m.layers[3]).moving_mean = {0.1f, 0.2f, 0.3f, 0.4f, 0.5f};
    save_model(m, dir / "m.rvm");
    const auto back = load_model(dir / "m.rvm");
    EXPECT_EQ(back.input_dims, m.input_dims);
    EXPECT_EQ(back.seed, m.seed);
    const auto pa = parameters(std::as_const(m));
    const auto pb = parameters(back);
    ASSERT_EQ(pa.size(), pb.size());
    for (std::size_t p = 0; p < pa.size(); ++p)
        EXPECT_TRUE(std::equal(pa[p].values.begin(), pa[p].values.end(), pb[p].values.begin()));
    EXPECT_EQ(std::get<BatchNorm<float>>(back.layers[3]).moving_mean,
              std::get<BatchNorm<float>>(m.layers[3]).moving_mean);
    const auto v = test::random_volume({9, 8, 10}, 1);
    EXPECT_EQ(predict(back, v), predict(m, v));
}

TEST(Serialize, RejectsGarbage) {
    test::TempDir dir;
    std::ofstream(dir / "bad.rvm") << "RVMODEL0 definitely not a model";
    EXPECT_THROW(load_model(dir / "bad.rvm"), FormatError);
    EXPECT_THROW(load_model(dir / "missing.rvm"), IoError);
}
