#pragma once

// Post-hoc backdoor defenses: fine-pruning, Neural Cleanse trigger inversion
// (plain and frequency-consistent) with unlearning, and feature shift tuning.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "freqback/attacks.hpp"
#include "freqback/autodiff.hpp"
#include "freqback/data.hpp"
#include "freqback/models.hpp"
#include "freqback/spectral.hpp"
#include "freqback/util.hpp"

namespace freqback {

/// Clean and triggered evaluation data a defense reports against.
struct EvalSet {
    const TimeSeriesDataset* clean = nullptr;
    const TriggerBatch* poisoned = nullptr;
    LabelMode mode = LabelMode::RandomLabel;
};

struct DefenseOutcome {
    double acc_before = 0.0, asr_before = 0.0;
    double acc_after = 0.0, asr_after = 0.0;
    bool applied = true;
    std::string notice;

    double acc_reduction() const { return acc_before - acc_after; }
    double asr_remaining() const { return asr_after; }
};

namespace detail {

inline Metrics measure(const Classifier& m, const EvalSet& e) {
    if (!e.clean || !e.poisoned) throw ContractError("defense: evaluation set not provided");
    return evaluate(m, *e.clean, *e.poisoned, e.mode);
}

inline DefenseOutcome start_outcome(const Classifier& m, const EvalSet& e) {
    DefenseOutcome o;
    if (e.clean && e.poisoned) {
        auto r = measure(m, e);
        o.acc_before = r.acc;
        o.asr_before = r.asr;
    }
    return o;
}

inline void finish_outcome(DefenseOutcome& o, const Classifier& m, const EvalSet& e) {
    if (e.clean && e.poisoned) {
        auto r = measure(m, e);
        o.acc_after = r.acc;
        o.asr_after = r.asr;
    } else {
        o.acc_after = o.acc_before;
        o.asr_after = o.asr_before;
    }
}

/// Exactly `epochs` epochs: no early stop.
inline TrainConfig fixed_epochs(int epochs, std::uint64_t seed) {
    TrainConfig tc;
    tc.max_epochs = epochs;
    tc.patience = std::max(1, epochs);
    tc.min_delta = -std::numeric_limits<double>::infinity();
    tc.seed = seed;
    return tc;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Fine-pruning

/// Zero entries of named parameters, re-applied after every finetune step.
struct PruneMask {
    struct Entry {
        std::string param;
        std::vector<std::size_t> indices;
    };
    std::vector<Entry> entries;
    std::size_t units_total = 0;  // channels (conv) or weights (recurrent) considered
    std::vector<std::size_t> pruned_units;

    void apply(Classifier& m) const {
        for (const auto& e : entries) {
            auto v = m.params()[e.param].mutable_values();
            for (auto i : e.indices) v[i] = 0.0;
        }
    }
};

struct FinepruneConfig {
    double ratio = 0.3;
    int epochs = 10;
    std::size_t activation_samples = 256;
    std::uint64_t seed = 0;
};

/// Mean |activation| per channel of the last conv layer over `clean`.
inline std::vector<double> channel_activity(const Classifier& model, const TimeSeriesDataset& clean,
                                            std::size_t batch = 128) {
    NoGradGuard g;
    const std::size_t H = model.spec().hidden;
    std::vector<double> act(H, 0.0);
    std::size_t count = 0;
    std::vector<std::size_t> idx;
    for (std::size_t lo = 0; lo < clean.size(); lo += batch) {
        idx.clear();
        for (std::size_t i = lo; i < std::min(clean.size(), lo + batch); ++i) idx.push_back(i);
        auto a = model.last_conv_activations(clean.batch(idx));  // (n, H, T)
        const std::size_t n = a.dim(0), T = a.dim(2);
        auto v = a.values();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t t = 0; t < T; ++t) act[h] += std::abs(v[(i * H + h) * T + t]);
        count += n * T;
    }
    for (auto& a : act) a /= static_cast<double>(count);
    return act;
}

inline std::size_t pruned_count(double ratio, std::size_t total) {
    return static_cast<std::size_t>(std::llround(ratio * static_cast<double>(total)));
}

/// CNN/TCN: the least active channels of the last conv layer lose their
/// incoming weights, bias, and head row. Recurrent: smallest-magnitude weights.
inline PruneMask prune_mask(const Classifier& model, const TimeSeriesDataset& clean, double ratio) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ContractError("fineprune: ratio must lie in (0, 1)");
    if (clean.empty()) throw ContractError("fineprune: empty clean subset");
    PruneMask mask;
    const auto& spec = model.spec();
    if (!is_recurrent(spec.arch)) {
        auto act = channel_activity(model, clean);
        const std::size_t H = act.size();
        std::vector<std::size_t> order(H);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return act[a] < act[b]; });
        const std::size_t k = pruned_count(ratio, H);
        mask.units_total = H;
        mask.pruned_units.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
        std::sort(mask.pruned_units.begin(), mask.pruned_units.end());
        for (const auto& name : model.last_conv_params()) {
            const auto& t = model.params()[name];
            const std::size_t per = t.size() / H;  // (H, ...) leading output-channel axis
            PruneMask::Entry e{name, {}};
            for (auto c : mask.pruned_units)
                for (std::size_t j = 0; j < per; ++j) e.indices.push_back(c * per + j);
            mask.entries.push_back(std::move(e));
        }
        const auto& W = model.params()[Classifier::head_weight];  // (H, C)
        const std::size_t C = W.dim(1);
        PruneMask::Entry e{Classifier::head_weight, {}};
        for (auto c : mask.pruned_units)
            for (std::size_t j = 0; j < C; ++j) e.indices.push_back(c * C + j);
        mask.entries.push_back(std::move(e));
        return mask;
    }
    struct Ref {
        double mag;
        std::size_t param, index;
    };
    std::vector<Ref> refs;
    const auto& names = model.params().names();
    std::vector<std::size_t> weight_params, offset(names.size(), 0);
    for (std::size_t p = 0; p < names.size(); ++p) {
        if (names[p].ends_with(".b")) continue;
        weight_params.push_back(p);
        offset[p] = refs.size();
        auto v = model.params().tensors()[p].values();
        for (std::size_t i = 0; i < v.size(); ++i) refs.push_back({std::abs(v[i]), p, i});
    }
    std::stable_sort(refs.begin(), refs.end(), [](const Ref& a, const Ref& b) { return a.mag < b.mag; });
    const std::size_t k = pruned_count(ratio, refs.size());
    mask.units_total = refs.size();
    std::vector<PruneMask::Entry> by_param(names.size());
    for (std::size_t r = 0; r < k; ++r) by_param[refs[r].param].indices.push_back(refs[r].index);
    for (auto p : weight_params) {
        if (by_param[p].indices.empty()) continue;
        by_param[p].param = names[p];
        std::sort(by_param[p].indices.begin(), by_param[p].indices.end());
        mask.entries.push_back(std::move(by_param[p]));
    }
    // Units are positions in the concatenation of all weight tensors.
    for (std::size_t r = 0; r < k; ++r) mask.pruned_units.push_back(offset[refs[r].param] + refs[r].index);
    std::sort(mask.pruned_units.begin(), mask.pruned_units.end());
    return mask;
}

struct FinepruneResult {
    PruneMask mask;
    DefenseOutcome outcome;
};

inline FinepruneResult fineprune(Classifier& model, const TimeSeriesDataset& clean, const FinepruneConfig& cfg = {},
                                 const EvalSet& eval = {}) {
    FinepruneResult r;
    r.outcome = detail::start_outcome(model, eval);
    r.mask = prune_mask(model, head_subset(clean, cfg.activation_samples), cfg.ratio);
    r.mask.apply(model);
    if (cfg.epochs > 0) {
        auto tc = detail::fixed_epochs(cfg.epochs, cfg.seed);
        tc.after_step = [&](Classifier& m) { r.mask.apply(m); };
        train(model, clean, tc);
    }
    detail::finish_outcome(r.outcome, model, eval);
    return r;
}

// ---------------------------------------------------------------------------
// Neural Cleanse

inline double median_of(std::vector<double> v) {
    if (v.empty()) throw ContractError("median of empty vector");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// |x - median| / (1.4826 * MAD). When MAD is zero the spread falls back to
/// 1.2533 * mean absolute deviation; with no spread at all every index is 0.
inline std::vector<double> anomaly_index(std::span<const double> scores) {
    if (scores.empty()) throw ContractError("anomaly_index: no scores");
    for (double v : scores)
        if (!std::isfinite(v)) throw NumericError("anomaly_index: non-finite score");
    const double med = median_of({scores.begin(), scores.end()});
    std::vector<double> dev(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) dev[i] = std::abs(scores[i] - med);
    double spread = 1.4826 * median_of(dev);
    if (spread == 0.0) {
        double mean_dev = 0.0;
        for (double d : dev) mean_dev += d;
        spread = 1.2533 * mean_dev / static_cast<double>(dev.size());
    }
    std::vector<double> out(scores.size(), 0.0);
    if (spread == 0.0) return out;
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = dev[i] / spread;
    return out;
}

struct NcConfig {
    double asr_threshold = 0.9;
    double anomaly_threshold = 0.8;
    int steps = 500;
    double lr = 0.1;
    double kappa_init = 1e-3;
    double kappa_factor = 1.5;
    int kappa_interval = 10;
    std::size_t batch_size = 64;
    std::size_t samples = 256;  // clean samples used for inversion
    bool adaptive = false;
    double mu = 1.0;
    int unlearn_epochs = 10;
    double unlearn_fraction = 0.2;
    std::uint64_t seed = 0;
};

struct NcLabel {
    int label = 0;
    std::vector<double> mask;     // (T, M) in [0, 1]
    std::vector<double> pattern;  // (T, M)
    double l1 = 0.0;
    double asr = 0.0;  // attack rate of the kept inversion on the inversion set
    bool reached_threshold = false;
    double kappa = 0.0;
};

struct NcResult {
    std::size_t length = 0, channels = 0;
    std::vector<NcLabel> labels;
    std::vector<double> anomaly;
    std::vector<int> flagged;
    double asr_threshold = 0.9;
    double anomaly_threshold = 0.8;
    bool adaptive = false;

    int lowest_norm_label() const {
        auto it = std::min_element(labels.begin(), labels.end(), [](auto& a, auto& b) { return a.l1 < b.l1; });
        return it == labels.end() ? -1 : it->label;
    }
};

namespace detail {

/// (1, K) row broadcast to (n, K).
inline Tensor broadcast_rows(const Tensor& row, std::size_t n) { return matmul(Tensor::full({n, 1}, 1.0), row); }

/// (M, T) cosine and sine analysis matrices with the 1/T forward scaling.
inline std::pair<Tensor, Tensor> dft_matrices(std::size_t T) {
    std::vector<double> c(T * T), s(T * T);
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t f = 0; f < T; ++f) {
            const double a = 2.0 * std::numbers::pi * static_cast<double>((t * f) % T) / static_cast<double>(T);
            c[t * T + f] = std::cos(a) / static_cast<double>(T);
            s[t * T + f] = -std::sin(a) / static_cast<double>(T);
        }
    return {Tensor({T, T}, std::move(c)), Tensor({T, T}, std::move(s))};
}

inline NcLabel invert_label(const Classifier& model, const TimeSeriesDataset& data, int label, const NcConfig& cfg,
                            const Matrix* target_spectrum) {
    const std::size_t T = data.length, M = data.channels, K = T * M;
    FreezeParams frozen(model);
    ParameterSet ps;
    ps.add("mask_logit", Tensor::zeros({1, K}));
    ps.add("pattern", Tensor::zeros({1, K}));
    auto oc = OptimizerConfig::adam(cfg.lr);
    Optimizer opt(ps, oc);
    std::optional<std::pair<Tensor, Tensor>> dftm;
    std::optional<Tensor> spec_t;
    if (cfg.adaptive) {
        if (!target_spectrum) throw ContractError("neural_cleanse: adaptive inversion requires a heatmap");
        dftm = dft_matrices(T);
        auto s = normalize_heatmap(*target_spectrum);
        std::vector<double> st(K);  // (M, T)
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t m = 0; m < M; ++m) st[m * T + t] = s(t, m);
        spec_t = Tensor({M, T}, std::move(st));
    }

    NcLabel best;
    best.label = label;
    best.l1 = std::numeric_limits<double>::infinity();
    NcLabel last = best;
    double kappa = cfg.kappa_init;
    std::vector<std::size_t> idx;
    std::size_t cursor = 0;
    double window_hits = 0.0, window_count = 0.0;
    for (int step = 0; step < cfg.steps; ++step) {
        idx.clear();
        for (std::size_t k = 0; k < std::min(cfg.batch_size, data.size()); ++k) idx.push_back((cursor + k) % data.size());
        cursor = (cursor + idx.size()) % data.size();
        const std::size_t n = idx.size();
        auto x = reshape(data.batch(idx), {n, K});
        auto m = sigmoid(ps["mask_logit"]);
        auto mb = broadcast_rows(m, n);
        auto db = broadcast_rows(ps["pattern"], n);
        auto stamped = add(x, mul(mb, sub(db, x)));
        std::vector<int> ys(n, label);
        auto logits = model.forward(reshape(stamped, {n, T, M}));
        auto ce = mean(cross_entropy_per_sample(logits, ys));
        auto l1 = sum(m);  // mask entries are positive
        auto loss = add(ce, scale(l1, kappa));
        if (cfg.adaptive) {
            // (M, T) trigger m * delta, then its magnitude spectrum per channel.
            auto trig = transpose(reshape(mul(m, ps["pattern"]), {T, M}));
            auto re = matmul(trig, dftm->first), im = matmul(trig, dftm->second);
            auto mag = freqback::sqrt(add(add(square(re), square(im)), Tensor::full({M, T}, 1e-12)));
            loss = add(loss, scale(sum(square(sub(*spec_t, mag))), cfg.mu));
        }

        std::size_t hits = 0;
        auto z = logits.values();
        const auto C = static_cast<std::size_t>(model.spec().classes);
        for (std::size_t i = 0; i < n; ++i) {
            auto row = z.subspan(i * C, C);
            hits += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) ==
                    static_cast<std::size_t>(label);
        }
        const double asr = static_cast<double>(hits) / static_cast<double>(n);
        const double norm = l1.item();
        last.mask.assign(m.values().begin(), m.values().end());
        last.pattern.assign(ps["pattern"].values().begin(), ps["pattern"].values().end());
        last.l1 = norm;
        last.asr = asr;
        last.kappa = kappa;
        if (asr >= cfg.asr_threshold && norm < best.l1) {
            best = last;
            best.reached_threshold = true;
        }
        window_hits += asr;
        window_count += 1.0;
        if ((step + 1) % cfg.kappa_interval == 0) {
            kappa = window_hits / window_count >= cfg.asr_threshold ? kappa * cfg.kappa_factor : kappa / cfg.kappa_factor;
            window_hits = window_count = 0.0;
        }

        backward(loss);
        opt.step();
    }
    return best.reached_threshold ? best : last;
}

}  // namespace detail

/// Reverses a (mask, pattern) trigger per label and scores label norms with
/// the MAD anomaly index. Flags labels whose index exceeds the threshold and
/// whose norm lies below the median.
inline NcResult neural_cleanse(const Classifier& model, const TimeSeriesDataset& data, const NcConfig& cfg = {},
                               const Matrix* heatmap = nullptr) {
    if (data.empty()) throw ContractError("neural_cleanse: empty dataset");
    if (cfg.steps < 1 || cfg.kappa_interval < 1) throw ContractError("neural_cleanse: steps must be positive");
    if (model.spec().classes <= 3)
        warn("neural_cleanse: detection with " + std::to_string(model.spec().classes) +
             " classes is weak; the MAD statistic needs more labels");
    const auto sub = head_subset(data, cfg.samples);
    NcResult r;
    r.length = data.length;
    r.channels = data.channels;
    r.asr_threshold = cfg.asr_threshold;
    r.anomaly_threshold = cfg.anomaly_threshold;
    r.adaptive = cfg.adaptive;
    std::vector<double> norms;
    for (int y = 0; y < model.spec().classes; ++y) {
        auto lab = detail::invert_label(model, sub, y, cfg, heatmap);
        if (!lab.reached_threshold)
            warn("neural_cleanse: label " + std::to_string(y) + " inversion stayed below the ASR threshold");
        norms.push_back(lab.l1);
        r.labels.push_back(std::move(lab));
    }
    r.anomaly = anomaly_index(norms);
    const double med = median_of(norms);
    for (std::size_t i = 0; i < norms.size(); ++i)
        if (r.anomaly[i] > cfg.anomaly_threshold && norms[i] < med) r.flagged.push_back(static_cast<int>(i));
    return r;
}

/// Stamps a reversed trigger onto inputs: (1 - m) * x + m * delta.
inline TimeSeriesDataset stamp(const TimeSeriesDataset& ds, const NcLabel& trig) {
    TimeSeriesDataset out = ds;
    const std::size_t K = ds.sample_stride();
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t k = 0; k < K; ++k) {
            double& v = out.values[i * K + k];
            v = (1.0 - trig.mask[k]) * v + trig.mask[k] * trig.pattern[k];
        }
    return out;
}

/// Finetunes on the clean split plus a fraction stamped with each flagged
/// label's reversed trigger, keeping ground-truth labels.
inline DefenseOutcome unlearn(Classifier& model, const NcResult& nc, const TimeSeriesDataset& clean,
                              const NcConfig& cfg = {}, const EvalSet& eval = {}) {
    auto o = detail::start_outcome(model, eval);
    if (nc.flagged.empty()) {
        o.applied = false;
        o.notice = "no label flagged; model unchanged";
        warn("unlearn: " + o.notice);
        detail::finish_outcome(o, model, eval);
        return o;
    }
    auto rng = detail::make_stream(cfg.seed, 31);
    std::vector<std::size_t> order(clean.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const auto k = std::max<std::size_t>(1, pruned_count(cfg.unlearn_fraction, clean.size()));
    TimeSeriesDataset mixed = clean;
    for (int y : nc.flagged) {
        std::vector<std::size_t> pick(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(k, order.size())));
        std::sort(pick.begin(), pick.end());
        mixed = concat_datasets(mixed, stamp(clean.subset(pick), nc.labels[static_cast<std::size_t>(y)]));
        std::rotate(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(std::min(k, order.size())), order.end());
    }
    train(model, mixed, detail::fixed_epochs(cfg.unlearn_epochs, cfg.seed));
    detail::finish_outcome(o, model, eval);
    return o;
}

// ---------------------------------------------------------------------------
// Feature shift tuning

struct FstConfig {
    double clean_fraction = 0.02;
    int epochs = 40;
    int max_tries = 10;
    std::uint64_t seed = 0;
};

/// Draws a class-covering random subset of `fraction` of `ds`.
inline std::vector<std::size_t> covering_subset(const TimeSeriesDataset& ds, double fraction, std::uint64_t seed,
                                                int max_tries) {
    const std::size_t k = std::max<std::size_t>(1, pruned_count(fraction, ds.size()));
    for (int attempt = 0; attempt < max_tries; ++attempt) {
        auto rng = detail::make_stream(seed + static_cast<std::uint64_t>(attempt), 37);
        std::vector<std::size_t> order(ds.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        order.resize(k);
        std::vector<char> seen(static_cast<std::size_t>(ds.classes), 0);
        for (auto i : order) seen[static_cast<std::size_t>(ds.labels[i])] = 1;
        if (std::all_of(seen.begin(), seen.end(), [](char c) { return c; })) {
            std::sort(order.begin(), order.end());
            return order;
        }
    }
    throw ContractError("fst: could not draw a subset covering every class in " + std::to_string(max_tries) + " tries");
}

inline DefenseOutcome fst(Classifier& model, const TimeSeriesDataset& train_set, const FstConfig& cfg = {},
                          const EvalSet& eval = {}) {
    auto o = detail::start_outcome(model, eval);
    const auto idx = covering_subset(train_set, cfg.clean_fraction, cfg.seed, cfg.max_tries);
    reinit_head(model, cfg.seed);
    train(model, train_set.subset(idx), detail::fixed_epochs(cfg.epochs, cfg.seed));
    detail::finish_outcome(o, model, eval);
    return o;
}

// ---------------------------------------------------------------------------
// JSON

/// Rates in percent.
inline nlohmann::json to_json(const DefenseOutcome& o) {
    return {{"applied", o.applied},
            {"notice", o.notice},
            {"acc_before", 100.0 * o.acc_before},
            {"asr_before", 100.0 * o.asr_before},
            {"acc_after", 100.0 * o.acc_after},
            {"asr_after", 100.0 * o.asr_after},
            {"acc_reduction", 100.0 * o.acc_reduction()},
            {"asr_remaining", 100.0 * o.asr_remaining()}};
}

/// `trigger_files` holds one CSV reference per label (may be empty).
inline nlohmann::json to_json(const NcResult& r, const std::vector<std::string>& trigger_files = {}) {
    nlohmann::json labels = nlohmann::json::array();
    for (std::size_t i = 0; i < r.labels.size(); ++i) {
        const auto& l = r.labels[i];
        nlohmann::json e = {{"label", l.label},
                            {"l1", l.l1},
                            {"asr", l.asr},
                            {"reached_threshold", l.reached_threshold},
                            {"kappa", l.kappa},
                            {"anomaly_index", r.anomaly[i]}};
        if (i < trigger_files.size()) e["trigger_csv"] = trigger_files[i];
        labels.push_back(std::move(e));
    }
    return {{"labels", labels},
            {"flagged", r.flagged},
            {"asr_threshold", r.asr_threshold},
            {"anomaly_threshold", r.anomaly_threshold},
            {"adaptive", r.adaptive}};
}

/// Reversed trigger as t,channel,mask,pattern rows.
inline void write_nc_trigger_csv(const NcLabel& l, std::size_t T, std::size_t M, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f << "t,channel,mask,pattern\n";
    for (std::size_t t = 0; t < T; ++t)
        for (std::size_t m = 0; m < M; ++m)
            f << t << ',' << m << ',' << format_double(l.mask[t * M + m]) << ',' << format_double(l.pattern[t * M + m])
              << '\n';
}

}  // namespace freqback
