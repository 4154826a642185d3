#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "freqback/models.hpp"
#include "testing.hpp"

using namespace freqback;
using fbtest::tiny_spec;

namespace {

const Architecture kArchs[] = {Architecture::BiRNN, Architecture::LSTM, Architecture::CNN, Architecture::TCN};

class PerArch : public ::testing::TestWithParam<Architecture> {};

std::string arch_name(const ::testing::TestParamInfo<Architecture>& i) { return to_string(i.param); }

/// Two classes separated by the sign of the mean value.
TimeSeriesDataset separable(std::size_t n, std::size_t T, std::uint64_t seed) {
    auto ds = fbtest::random_dataset(n, T, 1, 2, seed);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t t = 0; t < T; ++t) ds.at(i, t, 0) = 0.3 * ds.at(i, t, 0) + (ds.labels[i] ? 1.0 : -1.0);
    return ds;
}

}  // namespace

TEST_P(PerArch, ParameterGradientsMatchFiniteDifferences) {
    auto spec = tiny_spec(GetParam());
    spec.layers = GetParam() == Architecture::CNN ? 2 : 1;
    auto model = build(spec);
    auto x = fbtest::random_tensor({3, spec.length, spec.channels}, 31, false);
    std::vector<int> y{0, 2, 1};
    auto& ps = model.params();
    auto loss = [&](const std::vector<Tensor>&) { return mean(cross_entropy_per_sample(model.forward(x), y)); };
    EXPECT_LT(fbtest::gradient_error(loss, ps.tensors(), 1e-5, 1e-3), 1e-4);
}

TEST_P(PerArch, InputGradientsMatchFiniteDifferences) {
    auto spec = tiny_spec(GetParam());
    auto model = build(spec);
    for (auto& t : model.params().tensors()) t.set_requires_grad(false);
    auto x = fbtest::random_tensor({2, spec.length, spec.channels}, 32);
    std::vector<int> y{1, 0};
    auto loss = [&](const std::vector<Tensor>& v) { return sum(cross_entropy_per_sample(model.forward(v[0]), y)); };
    EXPECT_LT(fbtest::gradient_error(loss, {x}, 1e-5, 1e-3), 1e-4);
}

TEST_P(PerArch, StackedLayersGradients) {
    if (GetParam() == Architecture::TCN) GTEST_SKIP() << "depth set by dilations";
    auto spec = tiny_spec(GetParam(), 5, 2, 2);
    spec.layers = 2;
    auto model = build(spec);
    auto x = fbtest::random_tensor({2, 5, 2}, 33, false);
    std::vector<int> y{1, 0};
    auto loss = [&](const std::vector<Tensor>&) { return sum(cross_entropy_per_sample(model.forward(x), y)); };
    EXPECT_LT(fbtest::gradient_error(loss, model.params().tensors(), 1e-5, 1e-3), 1e-4);
}

TEST_P(PerArch, OutputShapeAndEmptyBatch) {
    auto spec = tiny_spec(GetParam(), 7, 3, 4);
    auto model = build(spec);
    NoGradGuard g;
    EXPECT_EQ(model.forward(fbtest::random_tensor({5, 7, 3}, 34, false)).shape(), (Shape{5, 4}));
    EXPECT_EQ(model.forward(Tensor({0, 7, 3}, {})).shape(), (Shape{0, 4}));
    EXPECT_THROW(model.forward(fbtest::random_tensor({1, 6, 3}, 35, false)), ShapeError);
}

TEST_P(PerArch, BuildIsDeterministicInSeed) {
    auto spec = tiny_spec(GetParam());
    auto a = build(spec), b = build(spec);
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
    spec.seed += 1;
    EXPECT_NE(a.fingerprint(), build(spec).fingerprint());
}

TEST_P(PerArch, LearnsSeparableToy) {
    auto spec = tiny_spec(GetParam(), 8, 1, 2);
    spec.hidden = 6;
    auto model = build(spec);
    auto tr = separable(80, 8, 1), te = separable(40, 8, 2);
    TrainConfig tc;
    tc.max_epochs = 40;
    tc.batch_size = 16;
    tc.seed = 3;
    train(model, tr, tc);
    EXPECT_GE(model.accuracy(te), 0.95);
}

TEST_P(PerArch, CheckpointRoundTrip) {
    auto spec = tiny_spec(GetParam());
    auto model = build(spec);
    model.record().epochs_run = 3;
    const auto path = (std::filesystem::temp_directory_path() / ("ckpt_" + to_string(GetParam()) + ".json")).string();
    save_checkpoint(model, path);
    auto back = load_checkpoint(path);
    std::filesystem::remove(path);
    EXPECT_EQ(back.fingerprint(), model.fingerprint());
    EXPECT_EQ(back.record().epochs_run, 3);
    auto x = fbtest::random_tensor({2, spec.length, spec.channels}, 36, false);
    NoGradGuard g;
    auto za = model.forward(x), zb = back.forward(x);
    for (std::size_t i = 0; i < za.size(); ++i) EXPECT_EQ(za[i], zb[i]);
}

INSTANTIATE_TEST_SUITE_P(Archs, PerArch, ::testing::ValuesIn(kArchs), arch_name);

TEST(Tcn, ReceptiveFieldIsFifteenForDefaultDilations) {
    ModelSpec s;
    s.arch = Architecture::TCN;
    EXPECT_EQ(s.receptive_field(), 15u);
}

TEST(Tcn, OutputIgnoresInputsOutsideReceptiveField) {
    auto spec = tiny_spec(Architecture::TCN, 20, 1, 2);
    spec.dilations = {1, 2, 4};
    auto model = build(spec);
    auto x = fbtest::random_tensor({1, 20, 1}, 37, false);
    auto y = x.detach();
    y.mutable_values()[0] += 5.0;  // t = 0, outside the last 15 steps
    auto z = x.detach();
    z.mutable_values()[10] += 5.0;  // inside
    NoGradGuard g;
    auto a = model.forward(x), b = model.forward(y), c = model.forward(z);
    for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(a[i], b[i]);
    EXPECT_NE(a[0], c[0]);
}

TEST(Cnn, ShiftedInputGivesSameLogitsUpToBoundary) {
    // Global average pooling: a one-step shift only changes the boundary terms.
    auto spec = tiny_spec(Architecture::CNN, 64, 1, 2);
    auto model = build(spec);
    std::vector<double> a(64), b(64);
    for (std::size_t t = 0; t < 64; ++t) {
        a[t] = std::sin(0.3 * t);
        b[t] = std::sin(0.3 * (t + 1.0));
    }
    NoGradGuard g;
    auto za = model.forward(Tensor({1, 64, 1}, a)), zb = model.forward(Tensor({1, 64, 1}, b));
    EXPECT_NEAR(za[0], zb[0], 0.1);
}

TEST(Train, ZeroEpochsLeavesModelUntouched) {
    auto model = build(tiny_spec(Architecture::CNN, 8, 1, 2));
    const auto fp = model.fingerprint();
    TrainConfig tc;
    tc.max_epochs = 0;
    auto rec = train(model, separable(10, 8, 1), tc);
    EXPECT_EQ(rec.epochs_run, 0);
    EXPECT_EQ(model.fingerprint(), fp);
}

TEST(Train, DeterministicAndEarlyStops) {
    auto ds = separable(40, 8, 4);
    TrainConfig tc;
    tc.max_epochs = 200;
    tc.patience = 3;
    tc.min_delta = 0.5;  // nothing improves by this much after the first epochs
    tc.seed = 2;
    auto a = build(tiny_spec(Architecture::CNN, 8, 1, 2)), b = build(tiny_spec(Architecture::CNN, 8, 1, 2));
    auto ra = train(a, ds, tc);
    train(b, ds, tc);
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
    EXPECT_LT(ra.epochs_run, 200);
    EXPECT_EQ(ra.loss_curve.size(), static_cast<std::size_t>(ra.epochs_run));
    EXPECT_EQ(ra.best_loss, *std::min_element(ra.loss_curve.begin(), ra.loss_curve.end()));
}

TEST(Train, DivergenceRaisesTrainingError) {
    auto model = build(tiny_spec(Architecture::CNN, 8, 1, 2));
    auto ds = separable(20, 8, 5);
    ds.values[3] = 1e308;
    TrainConfig tc;
    tc.max_epochs = 3;
    tc.optimizer = OptimizerConfig::sgd(1e6);
    EXPECT_THROW(train(model, ds, tc), TrainingError);
}

TEST(Train, Errors) {
    auto model = build(tiny_spec(Architecture::LSTM, 8, 1, 2));
    TimeSeriesDataset empty{8, 1, 2, {}, {}};
    EXPECT_THROW(train(model, empty), ContractError);
    EXPECT_THROW(train(model, separable(4, 9, 1)), ShapeError);
    auto bad = separable(4, 8, 1);
    bad.labels[0] = 5;
    EXPECT_THROW(train(model, bad), ContractError);
}

TEST(Spec, Validation) {
    auto s = tiny_spec(Architecture::TCN);
    s.dilations = {2, 1};
    EXPECT_THROW(build(s), ValidationError);
    s = tiny_spec(Architecture::BiRNN);
    s.hidden = 0;
    EXPECT_THROW(build(s), ValidationError);
    s = tiny_spec(Architecture::CNN);
    s.classes = 1;
    EXPECT_THROW(build(s), ValidationError);
    EXPECT_THROW(architecture_from_string("gru"), ValidationError);
}

TEST(Head, ReinitChangesOnlyHead) {
    auto model = build(tiny_spec(Architecture::CNN));
    auto before = model.params().clone();
    reinit_head(model, 77);
    for (std::size_t i = 0; i < before.size(); ++i) {
        const auto& name = before.names()[i];
        const bool same = std::equal(before.tensors()[i].values().begin(), before.tensors()[i].values().end(),
                                     model.params()[name].values().begin());
        EXPECT_EQ(same, name != Classifier::head_weight && name != Classifier::head_bias) << name;
    }
}

TEST(TrainConfigJson, RoundTripAndValidation) {
    TrainConfig c;
    c.max_epochs = 7;
    c.clip_norm = 1.0;
    c.optimizer = OptimizerConfig::sgd(0.5);
    auto back = train_config_from_json(to_json(c));
    EXPECT_EQ(back.max_epochs, 7);
    EXPECT_EQ(back.clip_norm, 1.0);
    ASSERT_TRUE(back.optimizer);
    EXPECT_EQ(back.optimizer->kind, OptimizerKind::SGD);
    EXPECT_THROW(train_config_from_json({{"batch_size", 0}}), ValidationError);
    EXPECT_THROW(train_config_from_json({{"patience", 0}}), ValidationError);
}
