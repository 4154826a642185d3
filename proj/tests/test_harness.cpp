#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "freqback/harness.hpp"
#include "testing.hpp"

using namespace freqback;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json tiny_config(const std::string& out) {
    auto j = json::parse(R"({
      "name": "tiny", "seed": 3,
      "data": {"synthetic": {"n_train": 90, "n_test": 30, "length": 16}},
      "model": {"arch": "cnn", "hidden": 4, "layers": 1},
      "train": {"max_epochs": 3},
      "attack": {"kind": "freqback", "iterations": 1, "freq_steps": 3, "finetune": {"max_epochs": 1}},
      "defenses": {"fineprune": {"epochs": 1}, "neural_cleanse": {"steps": 5}, "fst": {"epochs": 1, "clean_fraction": 0.1}},
      "heatmap_samples": 20,
      "saliency_samples": 1, "saliency_steps": 4
    })");
    j["output_dir"] = out;
    return j;
}

/// CNN with kernel 1, one layer and positive weights and biases: on
/// non-negative inputs every unit stays in the linear part of relu.
Classifier linear_cnn(std::size_t T, std::size_t M) {
    auto spec = fbtest::tiny_spec(Architecture::CNN, T, M, 2);
    spec.kernel = 1;
    auto model = build(spec);
    for (auto& name : {"conv0.W", "conv0.b"})
        for (double& v : model.params()[name].mutable_values()) v = std::abs(v) + 0.1;
    return model;
}

}  // namespace

TEST(Saliency, LinearModelClosedForm) {
    const std::size_t T = 5, M = 2;
    auto model = linear_cnn(T, M);
    auto x = fbtest::random_values(T * M, 4, 0.1, 1.0);
    auto attr = saliency(model, x, 8);
    int c = 0;
    {
        NoGradGuard g;
        auto z = model.forward(Tensor({1, T, M}, x));
        c = z[1] > z[0] ? 1 : 0;
    }
    const auto& W = model.params()["conv0.W"];  // (H, M, 1)
    const auto& V = model.params()[Classifier::head_weight];  // (H, 2)
    const std::size_t H = W.dim(0);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t m = 0; m < M; ++m) {
            double w = 0.0;
            for (std::size_t h = 0; h < H; ++h) w += W[h * M + m] * V[h * 2 + static_cast<std::size_t>(c)];
            EXPECT_NEAR(attr(t, m), x[t * M + m] * w / T, 1e-12);
        }
}

TEST(Saliency, CompletenessWithinTwoPercent) {
    auto spec = fbtest::tiny_spec(Architecture::LSTM, 10, 2, 3);
    auto model = build(spec);
    auto x = fbtest::random_values(20, 5, -2.0, 2.0);
    auto attr = saliency(model, x, 400);
    NoGradGuard g;
    auto fx = model.forward(Tensor({1, 10, 2}, x)), f0 = model.forward(Tensor::zeros({1, 10, 2}));
    auto zx = fx.values(), z0 = f0.values();
    const auto c = static_cast<std::size_t>(std::max_element(zx.begin(), zx.end()) - zx.begin());
    double total = 0.0;
    for (double a : attr.data) total += a;
    const double delta = zx[c] - z0[c];
    EXPECT_NEAR(total, delta, 0.02 * std::abs(delta));
}

TEST(ReportTables, AverageRowPerGroup) {
    std::vector<ReportRow> rows{
        {"syn", "cnn", "freqback", "random-label", {{"acc", 80.0}, {"asr", 90.0}}},
        {"syn", "lstm", "freqback", "random-label", {{"acc", 70.0}, {"asr", 100.0}}},
        {"syn", "cnn", "pgd", "random-label", {{"acc", 75.0}, {"asr", 50.0}}},
    };
    EXPECT_EQ(report_tables(rows),
              "dataset,model,attack,label_mode,acc,asr\n"
              "syn,cnn,freqback,random-label,80,90\n"
              "syn,lstm,freqback,random-label,70,100\n"
              "syn,average,freqback,random-label,75,95\n"
              "syn,cnn,pgd,random-label,75,50\n");
    rows[2].metrics.pop_back();
    EXPECT_THROW(report_tables(rows), SchemaError);
    EXPECT_THROW(report_tables({}), ContractError);
}

TEST(Config, ParsesDefaultsAndRejectsUnknownKeys) {
    auto c = experiment_config_from_json(json::parse(R"({"model": {"arch": "cnn"}, "seed": 9})"));
    EXPECT_EQ(c.model.layers, 3u);
    EXPECT_EQ(c.data.synthetic.seed, 9u);
    EXPECT_FALSE(c.attack);
    auto l = experiment_config_from_json(json::parse(R"({"model": {"arch": "lstm"}})"));
    EXPECT_EQ(l.model.layers, 1u);
    EXPECT_THROW(experiment_config_from_json(json::parse(R"({"model": {"arch": "cnn"}, "bogus": 1})")), SchemaError);
    EXPECT_THROW(experiment_config_from_json(json::parse(R"({"model": {"arch": "cnn", "width": 3}})")), SchemaError);
    EXPECT_THROW(experiment_config_from_json(json::parse(R"({"seed": 1})")), ValidationError);
    EXPECT_THROW(experiment_config_from_json(json::parse(R"({"model": {"arch": "cnn"}, "label_mode": "x"})")),
                 ValidationError);
}

TEST(Config, RoundTripKeepsHash) {
    auto c = experiment_config_from_json(tiny_config("a"));
    auto back = experiment_config_from_json(to_json(c));
    EXPECT_EQ(config_hash(back), config_hash(c));
    back.output_dir = "elsewhere";
    EXPECT_EQ(config_hash(back), config_hash(c));
    back.seed += 1;
    EXPECT_NE(config_hash(back), config_hash(c));
}

TEST(Seeds, StagesAreIndependent) {
    EXPECT_NE(derive_seed(1, "model"), derive_seed(1, "train"));
    EXPECT_NE(derive_seed(1, "model"), derive_seed(2, "model"));
    EXPECT_EQ(derive_seed(5, "attack"), derive_seed(5, "attack"));
}

TEST(Run, WritesArtifactsAndIsDeterministic) {
    const auto base = fs::temp_directory_path() / "freqback_run_test";
    fs::remove_all(base);
    auto a = run(experiment_config_from_json(tiny_config((base / "a").string())));
    auto b = run(experiment_config_from_json(tiny_config((base / "b").string())));
    for (const char* f : {"summary.csv", "heatmap.csv", "test_triggers.csv", "perturbation_scale.csv"})
        EXPECT_EQ(slurp(base / "a" / f), slurp(base / "b" / f)) << f;
    for (const auto& f : a.files) EXPECT_TRUE(fs::exists(base / "a" / f)) << f;
    auto ja = a.body, jb = b.body;
    ja.erase("config");
    jb.erase("config");  // differs only in output_dir
    EXPECT_EQ(ja, jb);
    ASSERT_TRUE(a.body.contains("defenses"));
    for (const char* d : {"fineprune", "neural_cleanse", "fst"}) EXPECT_TRUE(a.body["defenses"].contains(d)) << d;
    auto report = json::parse(slurp(base / "a" / "report.json"));
    EXPECT_TRUE(report.contains("timing_seconds"));
    EXPECT_EQ(report_row_from_json(report).metrics, a.row.metrics);
    fs::remove_all(base);
}

TEST(Run, StageErrorNamesTheStage) {
    auto j = tiny_config("");
    j["data"] = {{"source", "csv"}, {"train_csv", "/nonexistent/train.csv"}, {"test_csv", "/nonexistent/test.csv"}};
    try {
        run(experiment_config_from_json(j));
        FAIL();
    } catch (const StageError& e) {
        EXPECT_EQ(e.stage(), "data");
    }
}

TEST(Run, SuppliedCleanModelMustMatchSpec) {
    auto cfg = experiment_config_from_json(tiny_config(""));
    cfg.attack.reset();
    cfg.defenses = {};
    auto data = load_data(cfg.data);
    Classifier wrong = build(fbtest::tiny_spec(Architecture::LSTM, 16, 1, 3));
    RunOptions opts{&wrong, &data};
    EXPECT_THROW(run(cfg, opts), StageError);
}
