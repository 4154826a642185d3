// freqback command line: gen-data, train, heatmap, attack, defend, report.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "freqback/harness.hpp"

namespace fs = std::filesystem;
using namespace freqback;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("config", c.config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
    cmd->add_option("--seed", c.seed, "override the master seed");
    cmd->add_option("--out", c.out, "override the output directory");
}

ExperimentConfig resolve(const Common& c) {
    auto cfg = load_experiment_config(c.config);
    if (c.seed) {
        cfg.seed = *c.seed;
        cfg.data.synthetic.seed = *c.seed;
    }
    if (c.out) cfg.output_dir = *c.out;
    if (cfg.output_dir.empty()) cfg.output_dir = "out";
    return cfg;
}

fs::path prepare(const ExperimentConfig& cfg) {
    fs::path dir(cfg.output_dir);
    fs::create_directories(dir);
    return dir;
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw Error("cannot write '" + p.string() + "'");
    f << j.dump(2) << '\n';
}

int gen_data(const Common& c) {
    auto cfg = resolve(c);
    auto dir = prepare(cfg);
    auto data = detail::stage("data", config_hash(cfg), [&] { return load_data(cfg.data); });
    write_csv(data.train, (dir / "train.csv").string());
    write_csv(data.test, (dir / "test.csv").string());
    std::cout << "train " << data.train.size() << " samples, test " << data.test.size() << " samples -> "
              << dir.string() << '\n';
    return 0;
}

int train_cmd(const Common& c) {
    auto cfg = resolve(c);
    auto dir = prepare(cfg);
    const auto hash = config_hash(cfg);
    auto data = detail::stage("data", hash, [&] { return load_data(cfg.data); });
    auto model = detail::stage("clean-train", hash, [&] {
        Classifier m = build(resolved_spec(cfg, data.train));
        train(m, data.train, resolved_train(cfg));
        return m;
    });
    save_checkpoint(model, (dir / "clean_model.json").string());
    const double tr = model.accuracy(data.train), te = model.accuracy(data.test);
    write_json(dir / "train_report.json", {{"config_hash", hash},
                                           {"model", to_string(model.spec().arch)},
                                           {"epochs", model.record().epochs_run},
                                           {"train_acc", 100.0 * tr},
                                           {"test_acc", 100.0 * te},
                                           {"loss_curve", model.record().loss_curve}});
    std::cout << to_string(model.spec().arch) << ": train acc " << 100.0 * tr << "%, test acc " << 100.0 * te
              << "% after " << model.record().epochs_run << " epochs\n";
    return 0;
}

int heatmap_cmd(const Common& c, const std::string& checkpoint, const std::string& split) {
    auto cfg = resolve(c);
    auto dir = prepare(cfg);
    const auto hash = config_hash(cfg);
    auto data = detail::stage("data", hash, [&] { return load_data(cfg.data); });
    auto model = detail::stage("clean-train", hash, [&] {
        if (!checkpoint.empty()) return load_checkpoint(checkpoint);
        Classifier m = build(resolved_spec(cfg, data.train));
        train(m, data.train, resolved_train(cfg));
        return m;
    });
    const auto& ds = split == "test" ? data.test : data.train;
    const double lambda = cfg.attack ? cfg.attack->heatmap_lambda : 0.3;
    auto hm = detail::stage("heatmap", hash, [&] { return model_heatmap(model, ds, lambda, cfg.heatmap_samples); });
    write_matrix_csv(hm.scores, (dir / "heatmap.csv").string());
    std::cout << "heatmap (" << hm.bands() << " x " << hm.channels() << ") -> " << (dir / "heatmap.csv").string()
              << '\n';
    return 0;
}

void print_report(const ExperimentReport& r) {
    std::cout << r.row.dataset << '/' << r.row.model << '/' << r.row.attack << '/' << r.row.label_mode << ':';
    for (const auto& [k, v] : r.row.metrics) std::cout << ' ' << k << '=' << v;
    std::cout << '\n';
}

int attack_cmd(const Common& c) {
    auto cfg = resolve(c);
    if (!cfg.attack) throw ValidationError("config has no attack block");
    cfg.defenses = {};
    print_report(run(cfg));
    return 0;
}

int defend_cmd(const Common& c) {
    auto cfg = resolve(c);
    if (!cfg.attack) throw ValidationError("config has no attack block");
    if (!cfg.defenses.fineprune && !cfg.defenses.neural_cleanse && !cfg.defenses.fst)
        throw ValidationError("config has no defenses block");
    auto r = run(cfg);
    print_report(r);
    if (r.body.contains("defenses")) std::cout << r.body["defenses"].dump(2) << '\n';
    return 0;
}

/// The report config lists report.json paths (relative to the config file)
/// under "reports".
int report_cmd(const Common& c) {
    std::ifstream f(c.config, std::ios::binary);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw SchemaError(std::string("report config: ") + e.what());
    }
    if (!j.contains("reports") || !j["reports"].is_array() || j["reports"].empty())
        throw SchemaError("report config: expected a non-empty \"reports\" array");
    const fs::path base = fs::path(c.config).parent_path();
    std::vector<ReportRow> rows;
    for (const auto& p : j["reports"]) {
        fs::path path = p.get<std::string>();
        if (path.is_relative()) path = base / path;
        std::ifstream rf(path, std::ios::binary);
        if (!rf) throw Error("cannot open report '" + path.string() + "'");
        rows.push_back(report_row_from_json(json::parse(rf)));
    }
    std::string out_dir = c.out.value_or(j.value("output_dir", std::string("out")));
    fs::create_directories(out_dir);
    const auto table = report_tables(rows);
    std::ofstream(fs::path(out_dir) / "summary.csv", std::ios::binary) << table;
    std::cout << table;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Frequency-guided backdoor attacks on time-series classifiers"};
    app.require_subcommand(1);

    Common gen, tr, hm, at, df, rp;
    add_common(app.add_subcommand("gen-data", "generate or load data and write train/test CSV"), gen);
    add_common(app.add_subcommand("train", "train the clean model and save a checkpoint"), tr);
    auto* hm_cmd = app.add_subcommand("heatmap", "estimate the frequency heatmap of a model");
    add_common(hm_cmd, hm);
    std::string checkpoint, split = "train";
    hm_cmd->add_option("--model", checkpoint, "checkpoint to use instead of training")->check(CLI::ExistingFile);
    hm_cmd->add_option("--split", split, "train or test")->check(CLI::IsMember({"train", "test"}));
    add_common(app.add_subcommand("attack", "run the backdoor pipeline and write a report"), at);
    add_common(app.add_subcommand("defend", "run the pipeline followed by the configured defenses"), df);
    add_common(app.add_subcommand("report", "merge report.json files into summary.csv"), rp);

    CLI11_PARSE(app, argc, argv);
    try {
        if (app.got_subcommand("gen-data")) return gen_data(gen);
        if (app.got_subcommand("train")) return train_cmd(tr);
        if (app.got_subcommand("heatmap")) return heatmap_cmd(hm, checkpoint, split);
        if (app.got_subcommand("attack")) return attack_cmd(at);
        if (app.got_subcommand("defend")) return defend_cmd(df);
        if (app.got_subcommand("report")) return report_cmd(rp);
    } catch (const StageError& e) {
        std::cerr << "error in stage " << e.stage() << ": " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
