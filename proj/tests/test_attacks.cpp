#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "freqback/attacks.hpp"
#include "testing.hpp"

using namespace freqback;

namespace {

struct Fixture {
    Classifier model;
    TimeSeriesDataset x;
    std::vector<int> targets;
};

Fixture make_fixture(Architecture arch = Architecture::CNN, std::size_t n = 6, std::size_t T = 8, std::size_t M = 2) {
    auto spec = fbtest::tiny_spec(arch, T, M, 3);
    Fixture f{build(spec), fbtest::random_dataset(n, T, M, 3, 101), {}};
    for (std::size_t i = 0; i < n; ++i) f.targets.push_back((f.x.labels[i] + 1) % 3);
    return f;
}

double targeted_loss(const Classifier& m, std::span<const double> v, std::size_t n, std::span<const int> y) {
    NoGradGuard g;
    const auto& s = m.spec();
    auto l = cross_entropy_per_sample(m.forward(Tensor({n, s.length, s.channels}, {v.begin(), v.end()})), y);
    double acc = 0.0;
    for (double e : l.values()) acc += e;
    return acc;
}

Matrix random_heatmap(std::size_t T, std::size_t M, std::uint64_t seed) {
    Matrix h(T, M);
    h.data = fbtest::random_values(T * M, seed, -0.2, 1.0);
    for (std::size_t t = 1; t < T; ++t)
        for (std::size_t m = 0; m < M; ++m) h(T - t, m) = h(t, m);
    return h;
}

/// A classifier whose logits ignore the input: zero weights, bias favoring `cls`.
Classifier constant_model(std::size_t T, int cls) {
    auto m = build(fbtest::tiny_spec(Architecture::CNN, T, 1, 3));
    for (auto& t : m.params().tensors())
        for (double& v : t.mutable_values()) v = 0.0;
    m.params()[Classifier::head_bias].mutable_values()[static_cast<std::size_t>(cls)] = 1.0;
    return m;
}

}  // namespace

TEST(InputGradient, MatchesFiniteDifferences) {
    auto f = make_fixture(Architecture::LSTM, 2, 5, 2);
    auto g = input_gradient(f.model, f.x.values, 2, f.targets);
    auto v = f.x.values;
    const double h = 1e-6;
    for (std::size_t k = 0; k < v.size(); ++k) {
        const double x0 = v[k];
        v[k] = x0 + h;
        const double up = targeted_loss(f.model, v, 2, f.targets);
        v[k] = x0 - h;
        const double dn = targeted_loss(f.model, v, 2, f.targets);
        v[k] = x0;
        EXPECT_NEAR(g.grad[k], (up - dn) / (2 * h), 1e-6);
    }
    EXPECT_TRUE(Tape::current().empty());
    for (const auto& t : f.model.params().tensors()) {
        EXPECT_TRUE(t.requires_grad());
        EXPECT_FALSE(t.has_grad());
    }
}

TEST(Static, SegmentBudgetIsExact) {
    auto f = make_fixture(Architecture::CNN, 9, 20, 2);
    const std::size_t seg = 5;
    auto b = static_trigger(f.x, f.targets, seg, 3);
    auto pos = static_positions(3, 20, seg, 3);
    for (std::size_t i = 0; i < f.x.size(); ++i) {
        const auto p = pos[static_cast<std::size_t>(f.targets[i])];
        for (std::size_t t = 0; t < 20; ++t)
            for (std::size_t m = 0; m < 2; ++m) {
                const double d = b.triggers[(i * 20 + t) * 2 + m];
                const bool inside = t >= p && t < p + seg;
                if (inside)
                    EXPECT_NE(d, 0.0);
                else
                    EXPECT_EQ(d, 0.0);
            }
    }
    auto again = static_trigger(f.x, f.targets, seg, 3);
    EXPECT_EQ(again.poisoned, b.poisoned);
    EXPECT_THROW(static_trigger(f.x, f.targets, 21, 3), ContractError);
}

TEST(Fgsm, StepsAgainstFiniteDifferenceSign) {
    auto f = make_fixture(Architecture::BiRNN, 2, 5, 1);
    const double eps = 0.1;
    auto b = fgsm_trigger(f.model, f.x, f.targets, eps);
    auto v = f.x.values;
    const double h = 1e-6;
    for (std::size_t k = 0; k < v.size(); ++k) {
        const double x0 = v[k];
        v[k] = x0 + h;
        const double up = targeted_loss(f.model, v, 2, f.targets);
        v[k] = x0 - h;
        const double dn = targeted_loss(f.model, v, 2, f.targets);
        v[k] = x0;
        const double fd = (up - dn) / (2 * h);
        if (std::abs(fd) < 1e-8) continue;
        EXPECT_DOUBLE_EQ(b.triggers[k], fd > 0 ? -eps : eps) << k;
    }
}

TEST(Pgd, StaysInBallAndLowersTargetLoss) {
    auto f = make_fixture(Architecture::TCN, 6, 10, 2);
    const double eps = 0.2;
    auto b = pgd_trigger(f.model, f.x, f.targets, eps, 10, 4);
    for (double d : b.triggers) EXPECT_LE(std::abs(d), eps + 1e-15);
    EXPECT_LT(targeted_loss(f.model, b.poisoned, 6, f.targets), targeted_loss(f.model, f.x.values, 6, f.targets));
    // Batching does not change the result.
    auto whole = pgd_trigger(f.model, f.x, f.targets, eps, 10, 128);
    EXPECT_EQ(whole.poisoned, b.poisoned);
}

TEST(Jsma, PositionBudgetAndFirstPickIsGradientArgmax) {
    auto f = make_fixture(Architecture::CNN, 4, 8, 2);
    JsmaTrace trace;
    auto b = jsma_trigger(f.model, f.x, f.targets, 3, 0.5, 128, &trace);
    auto g0 = input_gradient(f.model, f.x.values, 4, f.targets);
    const std::size_t K = 16;
    for (std::size_t i = 0; i < 4; ++i) {
        std::size_t changed = 0;
        for (std::size_t k = 0; k < K; ++k)
            if (b.triggers[i * K + k] != 0.0) {
                ++changed;
                EXPECT_NEAR(std::abs(b.triggers[i * K + k]), 0.5, 1e-12);
            }
        EXPECT_EQ(changed, 3u);
        ASSERT_EQ(trace[i].size(), 3u);
        EXPECT_EQ(std::set<std::size_t>(trace[i].begin(), trace[i].end()).size(), 3u);
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k)
            if (std::abs(g0.grad[i * K + k]) > std::abs(g0.grad[i * K + best])) best = k;
        EXPECT_EQ(trace[i][0], best);
    }
}

TEST(Realize, SpectrumSupportedWhereCoefficientsAre) {
    const std::size_t T = 10, M = 2;
    auto basis = build_basis(T);
    std::vector<double> q(T * M, 0.0);
    q[3 * M + 0] = 0.7;   // band 3, channel 0
    q[7 * M + 0] = -0.7;  // mirror of band 3 cancels it
    q[2 * M + 1] = 0.4;   // band 2, channel 1
    q[0 * M + 1] = -1.1;  // DC, channel 1
    auto trig = realize_triggers(basis, q, 1, M);
    for (std::size_t m = 0; m < M; ++m) {
        std::vector<double> ch(T);
        for (std::size_t t = 0; t < T; ++t) ch[t] = trig[t * M + m];
        auto s = dft(ch);
        for (std::size_t f = 0; f < T; ++f) {
            const double combined = q[f * M + m] + (f == 0 || 2 * f == T ? 0.0 : q[((T - f) % T) * M + m]);
            if (combined == 0.0)
                EXPECT_LT(std::abs(s.coeff[f]), 1e-9) << m << ":" << f;
            else
                EXPECT_GT(std::abs(s.coeff[f]), 1e-3) << m << ":" << f;
        }
    }
}

TEST(FreqBack, TriggerIsRealizationOfReturnedCoefficients) {
    auto f = make_fixture(Architecture::CNN, 5, 12, 2);
    AttackConfig cfg;
    cfg.freq_steps = 5;
    auto b = freqback_trigger(f.model, f.x, f.targets, random_heatmap(12, 2, 5), cfg);
    auto again = realize_triggers(build_basis(12), b.coefficients, 5, 2);
    for (std::size_t k = 0; k < again.size(); ++k) {
        EXPECT_NEAR(b.triggers[k], again[k], 1e-12);
        EXPECT_NEAR(b.poisoned[k], f.x.values[k] + b.triggers[k], 1e-12);
    }
}

TEST(FreqBack, ReturnsBestIterateAndItsObjective) {
    auto f = make_fixture(Architecture::LSTM, 5, 8, 1);
    AttackConfig cfg;
    cfg.freq_steps = 12;
    cfg.trigger_lr = 0.3;  // large enough that some steps overshoot
    cfg.batch_size = 2;
    const auto hm = random_heatmap(8, 1, 6);
    FreqBackTrace trace;
    auto b = freqback_trigger(f.model, f.x, f.targets, hm, cfg, &trace);
    ASSERT_EQ(trace.mean_objective.size(), 13u);

    const auto S = normalize_heatmap(hm);
    std::vector<double> tgt, init;
    for (std::size_t i = 0; i < 5; ++i)
        for (double v : S.data) {
            tgt.push_back(v);
            init.push_back(0.1 * v);
        }
    NoGradGuard ng;
    auto objective = [&](const std::vector<double>& q) {
        return detail::freq_objective(f.model, f.x.all(), Tensor({5, 8, 1}, q), build_basis(8).as_tensor(),
                                      Tensor({5, 8, 1}, tgt), f.targets, cfg)
            .total;
    };
    auto at_best = objective(b.coefficients);
    auto at_init = objective(init);
    for (std::size_t i = 0; i < 5; ++i) {
        EXPECT_NEAR(at_best[i], trace.best_objective[i], 1e-9);
        EXPECT_LE(trace.best_objective[i], at_init[i] + 1e-12);
    }
}

TEST(FreqBack, FrequencyTermAloneDrivesMagnitudesToHeatmap) {
    auto f = make_fixture(Architecture::CNN, 2, 8, 1);
    AttackConfig cfg;
    cfg.ce_weight = 0.0;
    cfg.beta = 0.0;
    cfg.alpha = 30.0;
    cfg.freq_steps = 600;
    cfg.trigger_optimizer = TriggerOptimizer::GradientDescent;
    const auto hm = random_heatmap(8, 1, 7);
    auto b = freqback_trigger(f.model, f.x, f.targets, hm, cfg);
    const auto S = normalize_heatmap(hm);
    for (std::size_t i = 0; i < 2; ++i)
        for (std::size_t t = 0; t < 8; ++t) EXPECT_NEAR(std::abs(b.coefficients[i * 8 + t]), S.data[t], 1e-6);
}

TEST(FreqBack, Deterministic) {
    auto f = make_fixture(Architecture::TCN, 4, 8, 2);
    AttackConfig cfg;
    cfg.freq_steps = 4;
    const auto hm = random_heatmap(8, 2, 8);
    auto a = freqback_trigger(f.model, f.x, f.targets, hm, cfg);
    auto b = freqback_trigger(f.model, f.x, f.targets, hm, cfg);
    EXPECT_EQ(a.triggers, b.triggers);
}

TEST(FreqBack, Errors) {
    auto f = make_fixture();
    EXPECT_THROW(freqback_trigger(f.model, f.x, f.targets, Matrix(5, 2)), ShapeError);
    AttackConfig cfg;
    cfg.alpha = 1e300;
    cfg.trigger_optimizer = TriggerOptimizer::GradientDescent;
    cfg.trigger_lr = 1e10;
    cfg.freq_steps = 2;
    EXPECT_THROW(freqback_trigger(f.model, f.x, f.targets, random_heatmap(8, 2, 9), cfg), OptimizationError);
    EXPECT_TRUE(Tape::current().empty());
    EXPECT_THROW(generate_triggers(f.model, f.x, f.targets, AttackConfig{}), ContractError);
}

TEST(Evaluate, ConstantModelChanceLevels) {
    // Always predicting class 0 on balanced C = 3: ACC = 1/3; a random-label
    // target is 0 only when the truth is not 0 and then with probability 1/2,
    // so ASR = 2/3 * 1/2 = 1/3.
    const std::size_t n = 1500, T = 6;
    auto model = constant_model(T, 0);
    auto clean = fbtest::random_dataset(n, T, 1, 3, 3);
    auto plan = assign_targets(clean.labels, 3, LabelMode::RandomLabel, 11, 1.0);
    auto b = static_trigger(clean, plan.targets, 2, 1);
    auto m = evaluate(model, clean, b, LabelMode::RandomLabel);
    EXPECT_NEAR(m.acc, 1.0 / 3.0, 1e-12);
    const double sd = std::sqrt((1.0 / 3.0) * (2.0 / 3.0) / n);
    EXPECT_NEAR(m.asr, 1.0 / 3.0, 3 * sd);
    EXPECT_EQ(m.asr_count, n);
}

TEST(Evaluate, SingleLabelExcludesTargetClass) {
    const std::size_t T = 6;
    auto model = constant_model(T, 2);
    auto clean = fbtest::random_dataset(30, T, 1, 3, 4);
    auto plan = assign_targets(clean.labels, 3, LabelMode::SingleLabel, 1, 1.0, 2);
    auto b = static_trigger(clean, plan.targets, 2, 1);
    auto m = evaluate(model, clean, b, LabelMode::SingleLabel);
    EXPECT_EQ(m.asr_count, 20u);
    EXPECT_DOUBLE_EQ(m.asr, 1.0);
    EXPECT_THROW(evaluate(model, TimeSeriesDataset{T, 1, 3, {}, {}}, b, LabelMode::SingleLabel), ContractError);
}

TEST(Evaluate, IdentityTriggersOnPerfectModel) {
    auto model = constant_model(6, 1);
    auto clean = fbtest::random_dataset(5, 6, 1, 3, 5);
    clean.labels.assign(5, 1);
    auto b = static_trigger(clean, clean.labels, 1, 1);
    b.poisoned = clean.values;
    auto m = evaluate(model, clean, b, LabelMode::RandomLabel);
    EXPECT_DOUBLE_EQ(m.acc, 1.0);
    EXPECT_DOUBLE_EQ(m.asr, 1.0);
}

TEST(BackdoorTrain, EmptyPlanIsPlainFinetuning) {
    auto spec = fbtest::tiny_spec(Architecture::CNN, 8, 1, 3);
    auto data = fbtest::random_dataset(30, 8, 1, 3, 6);
    AttackConfig cfg;
    cfg.kind = AttackKind::PGD;
    cfg.iterations = 2;
    cfg.finetune.max_epochs = 2;
    cfg.finetune.seed = 40;
    auto a = build(spec), b = build(spec);
    auto plan = assign_targets(data.labels, 3, LabelMode::RandomLabel, 1, 0.0);
    auto r = backdoor_train(a, data, plan, cfg);
    EXPECT_EQ(r.iterations.size(), 2u);
    for (int it = 0; it < 2; ++it) {
        TrainConfig tc = cfg.finetune;
        tc.seed = cfg.finetune.seed + static_cast<std::uint64_t>(it) * 7919u;
        train(b, data, tc);
    }
    EXPECT_EQ(a.fingerprint(), b.fingerprint());
}

TEST(BackdoorTrain, RecordsHeatmapOnlyForFrequencyAttack) {
    auto spec = fbtest::tiny_spec(Architecture::CNN, 8, 1, 3);
    auto data = fbtest::random_dataset(12, 8, 1, 3, 7);
    auto plan = assign_targets(data.labels, 3, LabelMode::RandomLabel, 2, 0.5);
    for (auto kind : {AttackKind::FreqBack, AttackKind::FGSM}) {
        AttackConfig cfg;
        cfg.kind = kind;
        cfg.iterations = 1;
        cfg.freq_steps = 2;
        cfg.finetune.max_epochs = 1;
        auto m = build(spec);
        auto r = backdoor_train(m, data, plan, cfg);
        EXPECT_EQ(r.iterations[0].heatmap.has_value(), kind == AttackKind::FreqBack);
        EXPECT_EQ(r.iterations[0].triggers.source, plan.indices);
        EXPECT_EQ(r.iterations[0].triggers.targets, plan.targets);
    }
}

TEST(AttackConfigJson, RoundTripAndValidation) {
    AttackConfig c;
    c.kind = AttackKind::JSMA;
    c.trigger_optimizer = TriggerOptimizer::GradientDescent;
    c.norm_reduction = NormReduction::Sum;
    c.finetune.max_epochs = 9;
    auto back = attack_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_THROW(attack_config_from_json({{"kind", "tsba"}}), ValidationError);
    EXPECT_THROW(attack_config_from_json({{"trigger_optimizer", "lbfgs"}}), ValidationError);
    EXPECT_THROW(attack_config_from_json({{"epsilon", -1.0}}), ValidationError);
}
