#pragma once

// Experiment orchestration: JSON configs, the end-to-end attack pipeline,
// integrated-gradients saliency, and Table-style summaries.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "freqback/attacks.hpp"
#include "freqback/data.hpp"
#include "freqback/defenses.hpp"
#include "freqback/models.hpp"
#include "freqback/spectral.hpp"
#include "freqback/util.hpp"

namespace freqback {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Saliency

/// Integrated gradients against a zero baseline for the predicted class:
/// x * mean_k d f_c(k/steps * x) / dx, k = 1..steps. `x` is one (T, M) sample.
inline Matrix saliency(const Classifier& model, std::span<const double> x, int steps = 32) {
    const auto& s = model.spec();
    const std::size_t T = s.length, M = s.channels, K = T * M;
    if (x.size() != K) throw ShapeError("saliency: expected one (T, M) sample");
    if (steps < 1) throw ContractError("saliency: steps must be positive");
    int c = 0;
    {
        NoGradGuard g;
        const auto logits = model.forward(Tensor({1, T, M}, {x.begin(), x.end()}));
        const auto z = logits.values();
        c = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    }
    const auto n = static_cast<std::size_t>(steps);
    std::vector<double> scaled(n * K);
    for (std::size_t k = 0; k < n; ++k)
        for (std::size_t j = 0; j < K; ++j)
            scaled[k * K + j] = static_cast<double>(k + 1) / static_cast<double>(n) * x[j];
    detail::FreezeParams frozen(model);
    Tensor xs({n, T, M}, std::move(scaled), true);
    std::vector<int> cls(n, c);
    backward(sum(gather(model.forward(xs), cls)));
    Matrix out(T, M);
    if (!xs.has_grad()) return out;
    auto g = xs.grad();
    for (std::size_t j = 0; j < K; ++j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < n; ++k) acc += g[k * K + j];
        out.data[j] = x[j] * acc / static_cast<double>(n);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct DataConfig {
    std::string source = "synthetic";  // or "csv"
    SyntheticConfig synthetic;
    std::string train_csv, test_csv;
    int classes = 0;  // csv only; 0 infers from labels
    bool zscore = true;
    std::string name = "synthetic";
};

struct DefenseSuite {
    std::optional<FinepruneConfig> fineprune;
    std::optional<NcConfig> neural_cleanse;
    std::optional<FstConfig> fst;
};

struct ExperimentConfig {
    std::string name = "experiment";
    std::uint64_t seed = 0;
    DataConfig data;
    ModelSpec model;
    TrainConfig train;
    std::optional<AttackConfig> attack;
    LabelMode label_mode = LabelMode::RandomLabel;
    int target = 0;  // single-label target
    DefenseSuite defenses;
    std::size_t heatmap_samples = 0;
    int saliency_samples = 2;
    int saliency_steps = 32;
    std::string output_dir;
};

namespace detail {

template <class T>
void read_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

inline void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    if (!j.is_object()) throw SchemaError(where + ": expected an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool ok = false;
        for (auto k : keys) ok = ok || it.key() == k;
        if (!ok) throw SchemaError(where + ": unknown key '" + it.key() + "'");
    }
}

}  // namespace detail

inline json to_json(const SyntheticConfig& c) {
    return {{"seed", c.seed},
            {"n_train", c.n_train},
            {"n_test", c.n_test},
            {"length", c.length},
            {"channels", c.channels},
            {"classes", c.classes},
            {"frequencies", c.frequencies},
            {"amplitudes", c.amplitudes},
            {"harmonic_ratio", c.harmonic_ratio},
            {"noise_std", c.noise_std},
            {"confusion", c.confusion}};
}

inline SyntheticConfig synthetic_config_from_json(const json& j, SyntheticConfig c = {}) {
    detail::read_if(j, "seed", c.seed);
    detail::read_if(j, "n_train", c.n_train);
    detail::read_if(j, "n_test", c.n_test);
    detail::read_if(j, "length", c.length);
    detail::read_if(j, "channels", c.channels);
    detail::read_if(j, "classes", c.classes);
    detail::read_if(j, "frequencies", c.frequencies);
    detail::read_if(j, "amplitudes", c.amplitudes);
    detail::read_if(j, "harmonic_ratio", c.harmonic_ratio);
    detail::read_if(j, "noise_std", c.noise_std);
    detail::read_if(j, "confusion", c.confusion);
    return c;
}

inline json to_json(const FinepruneConfig& c) {
    return {{"ratio", c.ratio}, {"epochs", c.epochs}, {"activation_samples", c.activation_samples}};
}

inline json to_json(const NcConfig& c) {
    return {{"asr_threshold", c.asr_threshold}, {"anomaly_threshold", c.anomaly_threshold},
            {"steps", c.steps},                 {"lr", c.lr},
            {"kappa_init", c.kappa_init},       {"batch_size", c.batch_size},
            {"samples", c.samples},             {"adaptive", c.adaptive},
            {"mu", c.mu},                       {"unlearn_epochs", c.unlearn_epochs},
            {"unlearn_fraction", c.unlearn_fraction}};
}

inline json to_json(const FstConfig& c) { return {{"clean_fraction", c.clean_fraction}, {"epochs", c.epochs}}; }

inline json to_json(const ExperimentConfig& c) {
    json data = {{"source", c.data.source}, {"zscore", c.data.zscore}, {"name", c.data.name}};
    if (c.data.source == "synthetic") data["synthetic"] = to_json(c.data.synthetic);
    else data.update({{"train_csv", c.data.train_csv}, {"test_csv", c.data.test_csv}, {"classes", c.data.classes}});
    json model = {{"arch", to_string(c.model.arch)}, {"hidden", c.model.hidden}, {"layers", c.model.layers},
                  {"kernel", c.model.kernel},        {"dilations", c.model.dilations}};
    json defenses = json::object();
    if (c.defenses.fineprune) defenses["fineprune"] = to_json(*c.defenses.fineprune);
    if (c.defenses.neural_cleanse) defenses["neural_cleanse"] = to_json(*c.defenses.neural_cleanse);
    if (c.defenses.fst) defenses["fst"] = to_json(*c.defenses.fst);
    json j = {{"name", c.name},
              {"seed", c.seed},
              {"data", data},
              {"model", model},
              {"train", to_json(c.train)},
              {"attack", c.attack ? to_json(*c.attack) : json(nullptr)},
              {"label_mode", to_string(c.label_mode)},
              {"target", c.target},
              {"defenses", defenses},
              {"heatmap_samples", c.heatmap_samples},
              {"saliency_samples", c.saliency_samples},
              {"saliency_steps", c.saliency_steps},
              {"output_dir", c.output_dir}};
    return j;
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
    detail::reject_unknown(j,
                           {"name", "seed", "data", "model", "train", "attack", "label_mode", "target", "defenses",
                            "heatmap_samples", "saliency_samples", "saliency_steps", "output_dir"},
                           "config");
    ExperimentConfig c;
    detail::read_if(j, "name", c.name);
    detail::read_if(j, "seed", c.seed);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        detail::reject_unknown(d, {"source", "synthetic", "train_csv", "test_csv", "classes", "zscore", "name"},
                               "config.data");
        detail::read_if(d, "source", c.data.source);
        if (c.data.source != "synthetic" && c.data.source != "csv")
            throw ValidationError("config.data.source must be synthetic or csv");
        c.data.synthetic.seed = c.seed;
        if (d.contains("synthetic")) c.data.synthetic = synthetic_config_from_json(d.at("synthetic"), c.data.synthetic);
        detail::read_if(d, "train_csv", c.data.train_csv);
        detail::read_if(d, "test_csv", c.data.test_csv);
        detail::read_if(d, "classes", c.data.classes);
        detail::read_if(d, "zscore", c.data.zscore);
        c.data.name = c.data.source == "synthetic" ? "synthetic" : "csv";
        detail::read_if(d, "name", c.data.name);
        if (c.data.source == "csv" && (c.data.train_csv.empty() || c.data.test_csv.empty()))
            throw ValidationError("config.data: csv source needs train_csv and test_csv");
    } else {
        c.data.synthetic.seed = c.seed;
    }
    if (!j.contains("model")) throw ValidationError("config: missing model block");
    {
        const auto& m = j.at("model");
        detail::reject_unknown(m, {"arch", "hidden", "layers", "kernel", "dilations"}, "config.model");
        c.model.arch = architecture_from_string(m.at("arch").get<std::string>());
        if (c.model.arch == Architecture::CNN) c.model.layers = 3;
        detail::read_if(m, "hidden", c.model.hidden);
        detail::read_if(m, "layers", c.model.layers);
        detail::read_if(m, "kernel", c.model.kernel);
        detail::read_if(m, "dilations", c.model.dilations);
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("attack") && !j.at("attack").is_null()) c.attack = attack_config_from_json(j.at("attack"));
    if (j.contains("label_mode")) c.label_mode = label_mode_from_string(j.at("label_mode").get<std::string>());
    detail::read_if(j, "target", c.target);
    if (j.contains("defenses")) {
        const auto& d = j.at("defenses");
        detail::reject_unknown(d, {"fineprune", "neural_cleanse", "fst"}, "config.defenses");
        if (d.contains("fineprune")) {
            FinepruneConfig f;
            const auto& x = d.at("fineprune");
            detail::read_if(x, "ratio", f.ratio);
            detail::read_if(x, "epochs", f.epochs);
            detail::read_if(x, "activation_samples", f.activation_samples);
            c.defenses.fineprune = f;
        }
        if (d.contains("neural_cleanse")) {
            NcConfig n;
            const auto& x = d.at("neural_cleanse");
            detail::read_if(x, "asr_threshold", n.asr_threshold);
            detail::read_if(x, "anomaly_threshold", n.anomaly_threshold);
            detail::read_if(x, "steps", n.steps);
            detail::read_if(x, "lr", n.lr);
            detail::read_if(x, "kappa_init", n.kappa_init);
            detail::read_if(x, "batch_size", n.batch_size);
            detail::read_if(x, "samples", n.samples);
            detail::read_if(x, "adaptive", n.adaptive);
            detail::read_if(x, "mu", n.mu);
            detail::read_if(x, "unlearn_epochs", n.unlearn_epochs);
            detail::read_if(x, "unlearn_fraction", n.unlearn_fraction);
            c.defenses.neural_cleanse = n;
        }
        if (d.contains("fst")) {
            FstConfig f;
            const auto& x = d.at("fst");
            detail::read_if(x, "clean_fraction", f.clean_fraction);
            detail::read_if(x, "epochs", f.epochs);
            c.defenses.fst = f;
        }
    }
    detail::read_if(j, "heatmap_samples", c.heatmap_samples);
    detail::read_if(j, "saliency_samples", c.saliency_samples);
    detail::read_if(j, "saliency_steps", c.saliency_steps);
    detail::read_if(j, "output_dir", c.output_dir);
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open config '" + path + "'");
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw SchemaError("config '" + path + "': " + e.what());
    }
    try {
        return experiment_config_from_json(j);
    } catch (const json::exception& e) {
        throw SchemaError("config '" + path + "': " + e.what());
    }
}

inline std::string config_hash(const ExperimentConfig& c) {
    auto j = to_json(c);
    j.erase("output_dir");
    return hex64(fnv1a(j.dump()));
}

/// Independent seed per pipeline stage, derived from the master seed.
inline std::uint64_t derive_seed(std::uint64_t master, const std::string& stage) {
    return fnv1a(stage, fnv1a(&master, sizeof master));
}

// ---------------------------------------------------------------------------
// Summary tables

struct ReportRow {
    std::string dataset, model, attack, label_mode;
    std::vector<std::pair<std::string, double>> metrics;  // ordered columns
};

/// One row per (dataset, model, attack, label mode), plus an "average" row
/// per (dataset, attack, label mode) group spanning two or more models.
inline std::string report_tables(const std::vector<ReportRow>& rows) {
    if (rows.empty()) throw ContractError("report_tables: no reports");
    std::vector<std::string> keys;
    for (const auto& [k, v] : rows.front().metrics) keys.push_back(k);
    for (const auto& r : rows) {
        std::vector<std::string> ks;
        for (const auto& [k, v] : r.metrics) ks.push_back(k);
        if (ks != keys) throw SchemaError("report_tables: reports carry different metric sets");
    }
    std::string out = "dataset,model,attack,label_mode";
    for (const auto& k : keys) out += ',' + k;
    out += '\n';
    auto emit = [&](const std::string& d, const std::string& m, const std::string& a, const std::string& l,
                    const std::vector<double>& vals) {
        out += d + ',' + m + ',' + a + ',' + l;
        for (double v : vals) out += ',' + format_double(v);
        out += '\n';
    };
    std::vector<std::tuple<std::string, std::string, std::string>> groups;
    for (const auto& r : rows) {
        std::tuple<std::string, std::string, std::string> g{r.dataset, r.attack, r.label_mode};
        if (std::find(groups.begin(), groups.end(), g) == groups.end()) groups.push_back(g);
    }
    for (const auto& g : groups) {
        std::vector<double> sum(keys.size(), 0.0);
        std::size_t n = 0;
        for (const auto& r : rows) {
            if (std::tuple{r.dataset, r.attack, r.label_mode} != g) continue;
            std::vector<double> vals;
            for (std::size_t k = 0; k < keys.size(); ++k) {
                vals.push_back(r.metrics[k].second);
                sum[k] += r.metrics[k].second;
            }
            emit(r.dataset, r.model, r.attack, r.label_mode, vals);
            ++n;
        }
        if (n >= 2) {
            for (auto& v : sum) v /= static_cast<double>(n);
            emit(std::get<0>(g), "average", std::get<1>(g), std::get<2>(g), sum);
        }
    }
    return out;
}

inline ReportRow report_row_from_json(const json& report) {
    ReportRow r;
    r.dataset = report.at("dataset").get<std::string>();
    r.model = report.at("model").get<std::string>();
    r.attack = report.at("attack").get<std::string>();
    r.label_mode = report.at("label_mode").get<std::string>();
    for (const auto& m : report.at("summary")) r.metrics.emplace_back(m.at(0).get<std::string>(), m.at(1).get<double>());
    return r;
}

// ---------------------------------------------------------------------------
// Pipeline

struct LoadedData {
    TimeSeriesDataset train, test;
};

inline LoadedData load_data(const DataConfig& cfg) {
    LoadedData d;
    if (cfg.source == "synthetic") {
        auto [tr, te] = gen_synthetic(cfg.synthetic);
        d.train = std::move(tr);
        d.test = std::move(te);
    } else {
        d.train = load_csv(cfg.train_csv, cfg.classes);
        d.test = load_csv(cfg.test_csv, cfg.classes == 0 ? d.train.classes : cfg.classes);
        d.test.split = Split::Test;
        const int c = std::max(d.train.classes, d.test.classes);
        d.train.classes = d.test.classes = c;
    }
    if (d.train.length != d.test.length || d.train.channels != d.test.channels)
        throw SchemaError("train and test splits differ in shape");
    if (cfg.zscore) {
        auto z = zscore(d.train, d.test);
        d.train = std::move(z.train);
        d.test = std::move(z.test);
    }
    return d;
}

inline ModelSpec resolved_spec(const ExperimentConfig& cfg, const TimeSeriesDataset& train_set) {
    ModelSpec s = cfg.model;
    s.length = train_set.length;
    s.channels = train_set.channels;
    s.classes = train_set.classes;
    s.seed = derive_seed(cfg.seed, "model");
    s.validate();
    return s;
}

inline TrainConfig resolved_train(const ExperimentConfig& cfg) {
    TrainConfig t = cfg.train;
    t.seed = derive_seed(cfg.seed, "train");
    return t;
}

struct PhaseTiming {
    std::vector<std::pair<std::string, double>> seconds;
    void add(const std::string& k, double s) {
        for (auto& [name, v] : seconds)
            if (name == k) {
                v += s;
                return;
            }
        seconds.emplace_back(k, s);
    }
    json to_json() const {
        json j = json::object();
        for (const auto& [k, v] : seconds) j[k] = std::round(v * 1000.0) / 1000.0;
        return j;
    }
};

struct ExperimentReport {
    std::string config_hash;
    json body;  // everything except wall-clock timing
    PhaseTiming timing;
    ReportRow row;
    Metrics clean;          // clean model on test (ASR unused)
    double clean_train_acc = 0.0;
    Metrics train_metrics;  // backdoored model, last-iteration poisoned train samples
    Metrics test_metrics;
    Matrix clean_heatmap;                     // clean model, train split
    std::optional<Matrix> test_heatmap;       // FreqBack test-time heatmap
    std::optional<Matrix> perturbation;       // perturbation scale of test triggers
    std::optional<TriggerBatch> test_triggers;
    std::vector<std::string> files;

    json to_json() const {
        json j = body;
        j["timing_seconds"] = timing.to_json();
        return j;
    }
};

struct RunOptions {
    /// Reuse a trained clean model instead of training one. It must match the
    /// config's resolved spec.
    const Classifier* clean_model = nullptr;
    /// Reuse already loaded data.
    const LoadedData* data = nullptr;
};

namespace detail {

template <class F>
auto stage(const std::string& name, const std::string& hash, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, hash, e.what());
    }
}

inline double pct(double v) { return 100.0 * v; }

inline std::string write_text(const std::filesystem::path& dir, const std::string& name, const std::string& text,
                              std::vector<std::string>& files) {
    const auto p = dir / name;
    std::ofstream f(p, std::ios::binary);
    if (!f) throw Error("cannot open '" + p.string() + "' for writing");
    f << text;
    files.push_back(name);
    return name;
}

inline std::string saliency_csv(const Matrix& attr, std::span<const double> input, std::span<const double> trigger) {
    std::string out = "t,channel,input,trigger,attribution\n";
    for (std::size_t t = 0; t < attr.rows; ++t)
        for (std::size_t m = 0; m < attr.cols; ++m) {
            const std::size_t k = t * attr.cols + m;
            out += std::to_string(t) + ',' + std::to_string(m) + ',' + format_double(input[k]) + ',' +
                   format_double(trigger.empty() ? 0.0 : trigger[k]) + ',' + format_double(attr(t, m)) + '\n';
        }
    return out;
}

}  // namespace detail

/// data -> clean model -> backdoor training -> train/test evaluation ->
/// optional defenses -> report and artifacts (when output_dir is set).
inline ExperimentReport run(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
    using clock = std::chrono::steady_clock;
    ExperimentReport rep;
    const std::string hash = config_hash(cfg);
    rep.config_hash = hash;
    const bool write = !cfg.output_dir.empty();
    std::filesystem::path dir(cfg.output_dir);
    if (write) detail::stage("output", hash, [&] { std::filesystem::create_directories(dir); });

    auto t0 = clock::now();
    LoadedData own;
    const LoadedData& data = opts.data ? *opts.data : (own = detail::stage("data", hash, [&] { return load_data(cfg.data); }));
    rep.timing.add("data", seconds_since(t0));

    json seeds = {{"master", cfg.seed},
                  {"model", derive_seed(cfg.seed, "model")},
                  {"train", derive_seed(cfg.seed, "train")},
                  {"poison", derive_seed(cfg.seed, "poison")},
                  {"test_targets", derive_seed(cfg.seed, "test-targets")},
                  {"attack", derive_seed(cfg.seed, "attack")},
                  {"finetune", derive_seed(cfg.seed, "finetune")},
                  {"defense", derive_seed(cfg.seed, "defense")}};
    if (cfg.data.source == "synthetic") seeds["data"] = cfg.data.synthetic.seed;

    const ModelSpec spec = detail::stage("model", hash, [&] { return resolved_spec(cfg, data.train); });
    t0 = clock::now();
    Classifier clean = detail::stage("clean-train", hash, [&] {
        if (opts.clean_model) {
            if (to_json(opts.clean_model->spec()) != to_json(spec))
                throw ContractError("supplied clean model does not match the configured spec");
            return opts.clean_model->clone();
        }
        Classifier m = build(spec);
        train(m, data.train, resolved_train(cfg));
        return m;
    });
    rep.timing.add("clean_training", seconds_since(t0));
    rep.clean.acc = clean.accuracy(data.test);
    rep.clean_train_acc = clean.accuracy(data.train);

    t0 = clock::now();
    rep.clean_heatmap = detail::stage("heatmap", hash, [&] {
        return model_heatmap(clean, data.train, cfg.attack ? cfg.attack->heatmap_lambda : 0.3, cfg.heatmap_samples)
            .scores;
    });
    rep.timing.add("heatmap", seconds_since(t0));

    json body = {{"name", cfg.name},
                 {"config_hash", hash},
                 {"config", to_json(cfg)},
                 {"seeds", seeds},
                 {"dataset", cfg.data.name},
                 {"model", to_string(spec.arch)},
                 {"attack", cfg.attack ? to_string(cfg.attack->kind) : "none"},
                 {"label_mode", to_string(cfg.label_mode)},
                 {"data_fingerprint", {{"train", data.train.fingerprint()}, {"test", data.test.fingerprint()}}},
                 {"clean", {{"train_acc", detail::pct(rep.clean_train_acc)}, {"test_acc", detail::pct(rep.clean.acc)},
                            {"epochs", clean.record().epochs_run}, {"loss_curve", clean.record().loss_curve}}}};
    if (write) {
        write_matrix_csv(rep.clean_heatmap, (dir / "heatmap.csv").string());
        rep.files.push_back("heatmap.csv");
        save_checkpoint(clean, (dir / "clean_model.json").string());
        rep.files.push_back("clean_model.json");
    }

    Classifier model = clean.clone();
    std::vector<std::pair<std::string, double>> summary{{"clean_acc", detail::pct(rep.clean.acc)}};
    if (cfg.attack) {
        AttackConfig ac = *cfg.attack;
        ac.seed = derive_seed(cfg.seed, "attack");
        ac.finetune.seed = derive_seed(cfg.seed, "finetune");
        if (ac.heatmap_samples == 0) ac.heatmap_samples = cfg.heatmap_samples;
        const std::optional<int> fixed =
            cfg.label_mode == LabelMode::SingleLabel ? std::optional<int>(cfg.target) : std::nullopt;
        const auto plan = detail::stage("poison-plan", hash, [&] {
            return assign_targets(data.train.labels, data.train.classes, cfg.label_mode,
                                  derive_seed(cfg.seed, "poison"), ac.poison_rate, fixed);
        });
        auto result = detail::stage("backdoor", hash, [&] { return backdoor_train(model, data.train, plan, ac); });
        json iterations = json::array();
        for (const auto& it : result.iterations) {
            rep.timing.add("heatmap", it.heatmap_seconds);
            rep.timing.add("trigger_generation", it.trigger_seconds);
            rep.timing.add("backdoor_training", it.train_seconds);
            iterations.push_back({{"epochs", it.finetune.epochs_run},
                                  {"best_loss", it.finetune.best_loss},
                                  {"loss_curve", it.finetune.loss_curve}});
        }

        t0 = clock::now();
        const auto tplan = detail::stage("test-targets", hash, [&] {
            return assign_targets(data.test.labels, data.test.classes, cfg.label_mode,
                                  derive_seed(cfg.seed, "test-targets"), 1.0, fixed);
        });
        auto victims = data.test.subset(tplan.indices);
        if (ac.kind == AttackKind::FreqBack) {
            auto hm_set = data.test;
            if (ac.test_heatmap_predicted_labels) hm_set.labels = model.predict(data.test);
            const auto t1 = clock::now();
            rep.test_heatmap = detail::stage("test-heatmap", hash, [&] {
                return model_heatmap(model, hm_set, ac.heatmap_lambda, ac.heatmap_samples).scores;
            });
            rep.timing.add("heatmap", seconds_since(t1));
        }
        const auto t2 = clock::now();
        auto test_batch = detail::stage("test-triggers", hash, [&] {
            AttackConfig tc = ac;
            tc.seed = derive_seed(cfg.seed, "test-attack");
            auto b = generate_triggers(model, victims, tplan.targets, tc, rep.test_heatmap ? &*rep.test_heatmap : nullptr);
            b.source = tplan.indices;
            return b;
        });
        rep.timing.add("trigger_generation", seconds_since(t2));

        detail::stage("evaluate", hash, [&] {
            const auto& last = result.iterations.back().triggers;
            rep.train_metrics = last.size() ? evaluate(model, data.train, last, cfg.label_mode) : Metrics{};
            rep.test_metrics = evaluate(model, data.test, test_batch, cfg.label_mode);
            rep.perturbation = perturbation_scale(test_batch.triggers, test_batch.size(), test_batch.length,
                                                  test_batch.channels);
        });
        const double gap = detail::pct(rep.train_metrics.asr - rep.test_metrics.asr);
        body["attack_result"] = {{"train_acc", detail::pct(rep.train_metrics.acc)},
                                 {"train_asr", detail::pct(rep.train_metrics.asr)},
                                 {"test_acc", detail::pct(rep.test_metrics.acc)},
                                 {"test_asr", detail::pct(rep.test_metrics.asr)},
                                 {"asr_gap", gap},
                                 {"asr_denominator", rep.test_metrics.asr_count},
                                 {"iterations", iterations}};
        summary.insert(summary.end(), {{"acc", detail::pct(rep.test_metrics.acc)},
                                       {"asr", detail::pct(rep.test_metrics.asr)},
                                       {"train_acc", detail::pct(rep.train_metrics.acc)},
                                       {"train_asr", detail::pct(rep.train_metrics.asr)},
                                       {"asr_gap", gap}});
        if (write) {
            detail::stage("artifacts", hash, [&] {
                write_matrix_csv(*rep.perturbation, (dir / "perturbation_scale.csv").string());
                rep.files.push_back("perturbation_scale.csv");
                if (rep.test_heatmap) {
                    write_matrix_csv(*rep.test_heatmap, (dir / "test_heatmap.csv").string());
                    rep.files.push_back("test_heatmap.csv");
                }
                save_trigger_batch(test_batch, ac, data.test.classes, (dir / "test_triggers.csv").string(),
                                   (dir / "test_triggers.json").string());
                rep.files.push_back("test_triggers.csv");
                rep.files.push_back("test_triggers.json");
                save_checkpoint(model, (dir / "backdoored_model.json").string());
                rep.files.push_back("backdoored_model.json");
                const auto K = test_batch.length * test_batch.channels;
                for (int i = 0; i < cfg.saliency_samples && static_cast<std::size_t>(i) < test_batch.size(); ++i) {
                    const auto k = static_cast<std::size_t>(i);
                    std::span<const double> x(test_batch.poisoned.data() + k * K, K);
                    auto attr = saliency(model, x, cfg.saliency_steps);
                    detail::write_text(dir, "saliency_" + std::to_string(i) + ".csv",
                                       detail::saliency_csv(attr, x, test_batch.trigger(k)), rep.files);
                }
            });
        }
        rep.test_triggers = std::move(test_batch);

        // Defenses act on copies of the backdoored model.
        json defenses = json::object();
        const EvalSet eval{&data.test, &*rep.test_triggers, cfg.label_mode};
        const auto dseed = derive_seed(cfg.seed, "defense");
        if (cfg.defenses.fineprune) {
            const auto t = clock::now();
            auto fc = *cfg.defenses.fineprune;
            fc.seed = dseed;
            Classifier m = model.clone();
            auto r = detail::stage("defense:fineprune", hash, [&] { return fineprune(m, data.train, fc, eval); });
            auto j = to_json(r.outcome);
            j["pruned_units"] = r.mask.pruned_units.size();
            j["units_total"] = r.mask.units_total;
            defenses["fineprune"] = j;
            rep.timing.add("defense_fineprune", seconds_since(t));
        }
        if (cfg.defenses.neural_cleanse) {
            const auto t = clock::now();
            auto nc = *cfg.defenses.neural_cleanse;
            nc.seed = dseed;
            Classifier m = model.clone();
            json j = detail::stage("defense:neural_cleanse", hash, [&] {
                std::optional<Matrix> hm;
                if (nc.adaptive) hm = model_heatmap(m, data.train, 0.3, cfg.heatmap_samples).scores;
                auto r = neural_cleanse(m, data.train, nc, hm ? &*hm : nullptr);
                std::vector<std::string> files;
                if (write)
                    for (const auto& l : r.labels) {
                        const auto name = "nc_trigger_" + std::to_string(l.label) + ".csv";
                        write_nc_trigger_csv(l, r.length, r.channels, (dir / name).string());
                        files.push_back(name);
                        rep.files.push_back(name);
                    }
                auto out = to_json(r, files);
                out["unlearn"] = to_json(unlearn(m, r, data.train, nc, eval));
                return out;
            });
            defenses["neural_cleanse"] = j;
            rep.timing.add("defense_neural_cleanse", seconds_since(t));
        }
        if (cfg.defenses.fst) {
            const auto t = clock::now();
            auto fc = *cfg.defenses.fst;
            fc.seed = dseed;
            Classifier m = model.clone();
            defenses["fst"] =
                to_json(detail::stage("defense:fst", hash, [&] { return fst(m, data.train, fc, eval); }));
            rep.timing.add("defense_fst", seconds_since(t));
        }
        if (!defenses.empty()) body["defenses"] = defenses;
    }

    rep.row = ReportRow{cfg.data.name, to_string(spec.arch), cfg.attack ? to_string(cfg.attack->kind) : "none",
                        to_string(cfg.label_mode), summary};
    json summary_json = json::array();
    for (const auto& [k, v] : summary) summary_json.push_back({k, v});
    body["summary"] = summary_json;
    if (write) {
        detail::stage("report", hash, [&] {
            detail::write_text(dir, "summary.csv", report_tables({rep.row}), rep.files);
            rep.files.push_back("report.json");
            body["files"] = rep.files;
            rep.body = body;
            std::ofstream f(dir / "report.json", std::ios::binary);
            if (!f) throw Error("cannot write report.json");
            f << rep.to_json().dump(2) << '\n';
        });
    } else {
        body["files"] = rep.files;
        rep.body = body;
    }
    return rep;
}

}  // namespace freqback
