#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "freqback/autodiff.hpp"
#include "freqback/util.hpp"

namespace freqback {

enum class Split { Train, Test };

inline std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }

/// N labeled (T x M) sequences stored sample-major, then time, then channel.
struct TimeSeriesDataset {
    std::size_t length = 0;    // T
    std::size_t channels = 0;  // M
    int classes = 0;           // C
    std::vector<double> values;
    std::vector<int> labels;
    Split split = Split::Train;
    std::string provenance;

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }
    std::size_t sample_stride() const noexcept { return length * channels; }

    double at(std::size_t i, std::size_t t, std::size_t m) const {
        return values[i * sample_stride() + t * channels + m];
    }
    double& at(std::size_t i, std::size_t t, std::size_t m) { return values[i * sample_stride() + t * channels + m]; }

    std::span<const double> sample(std::size_t i) const {
        return std::span<const double>(values).subspan(i * sample_stride(), sample_stride());
    }

    void validate() const {
        if (length == 0 || channels == 0) throw SchemaError("dataset: T and M must be positive");
        if (values.size() != labels.size() * sample_stride())
            throw SchemaError("dataset: " + std::to_string(values.size()) + " values for " +
                              std::to_string(labels.size()) + " samples of shape (" + std::to_string(length) +
                              ", " + std::to_string(channels) + ")");
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (labels[i] < 0 || labels[i] >= classes)
                throw SchemaError("dataset: label " + std::to_string(labels[i]) + " of sample " +
                                  std::to_string(i) + " outside [0, " + std::to_string(classes) + ")");
    }

    /// (n, T, M) tensor of the selected samples.
    Tensor batch(std::span<const std::size_t> idx) const {
        std::vector<double> out(idx.size() * sample_stride());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            auto s = sample(idx[k]);
            std::copy(s.begin(), s.end(), out.begin() + static_cast<std::ptrdiff_t>(k * sample_stride()));
        }
        return Tensor({idx.size(), length, channels}, std::move(out));
    }

    Tensor all() const { return Tensor({size(), length, channels}, values); }

    std::vector<int> labels_of(std::span<const std::size_t> idx) const {
        std::vector<int> out;
        out.reserve(idx.size());
        for (auto i : idx) out.push_back(labels[i]);
        return out;
    }

    TimeSeriesDataset subset(std::span<const std::size_t> idx) const {
        TimeSeriesDataset out{length, channels, classes, {}, labels_of(idx), split, provenance};
        out.values.reserve(idx.size() * sample_stride());
        for (auto i : idx) {
            auto s = sample(i);
            out.values.insert(out.values.end(), s.begin(), s.end());
        }
        return out;
    }

    std::string fingerprint() const {
        auto h = fnv1a(values);
        h = fnv1a(labels.data(), labels.size() * sizeof(int), h);
        return hex64(h);
    }
};

// ---------------------------------------------------------------------------
// Synthetic pseudo-periodic data

struct SyntheticConfig {
    std::uint64_t seed = 0;
    std::size_t n_train = 1200;
    std::size_t n_test = 300;
    std::size_t length = 200;
    std::size_t channels = 1;
    int classes = 3;
    std::vector<double> frequencies{3.0, 7.0, 12.0};
    std::vector<double> amplitudes{1.0, 1.0, 1.0};
    double harmonic_ratio = 0.3;
    double noise_std = 0.3;
    /// Fraction of samples whose waveform is drawn from a different class than
    /// their label. Labels stay balanced; the Bayes error grows with this.
    double confusion = 0.14;
};

namespace detail {

inline std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

inline TimeSeriesDataset synth_split(const SyntheticConfig& cfg, std::size_t n, Split split, std::uint64_t stream) {
    auto rng = make_stream(cfg.seed, stream);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);
    std::normal_distribution<double> noise(0.0, cfg.noise_std);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::uniform_int_distribution<int> other(1, cfg.classes - 1);

    TimeSeriesDataset ds;
    ds.length = cfg.length;
    ds.channels = cfg.channels;
    ds.classes = cfg.classes;
    ds.split = split;
    ds.provenance = "synthetic:seed=" + std::to_string(cfg.seed);
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = static_cast<int>(i % static_cast<std::size_t>(cfg.classes));
    std::shuffle(ds.labels.begin(), ds.labels.end(), rng);

    ds.values.resize(n * cfg.length * cfg.channels);
    const double T = static_cast<double>(cfg.length);
    for (std::size_t i = 0; i < n; ++i) {
        auto k = static_cast<std::size_t>(ds.labels[i]);
        if (cfg.confusion > 0.0 && unit(rng) < cfg.confusion)
            k = static_cast<std::size_t>((ds.labels[i] + other(rng)) % cfg.classes);
        const double f = cfg.frequencies[k], a = cfg.amplitudes[k];
        for (std::size_t m = 0; m < cfg.channels; ++m) {
            const double p1 = phase(rng), p2 = phase(rng);
            for (std::size_t t = 0; t < cfg.length; ++t) {
                const double w = 2.0 * std::numbers::pi * static_cast<double>(t) / T;
                ds.at(i, t, m) = a * std::sin(w * f + p1) + cfg.harmonic_ratio * a * std::sin(w * 2.0 * f + p2) +
                                 noise(rng);
            }
        }
    }
    return ds;
}

}  // namespace detail

/// Class k: a_k sin(2 pi f_k n/T + phi) + r a_k sin(2 pi 2 f_k n/T + phi') + noise,
/// with independent random phases per sample and channel. Train and test draw
/// from separate RNG streams of the same seed.
inline std::pair<TimeSeriesDataset, TimeSeriesDataset> gen_synthetic(const SyntheticConfig& cfg) {
    if (cfg.n_train == 0 || cfg.n_test == 0 || cfg.length == 0 || cfg.channels == 0)
        throw ContractError("gen_synthetic: sizes must be positive");
    if (cfg.classes < 2) throw ContractError("gen_synthetic: need at least 2 classes");
    if (cfg.frequencies.size() < static_cast<std::size_t>(cfg.classes) ||
        cfg.amplitudes.size() < static_cast<std::size_t>(cfg.classes))
        throw ContractError("gen_synthetic: one frequency and amplitude per class required");
    if (cfg.confusion < 0.0 || cfg.confusion >= 1.0) throw ContractError("gen_synthetic: confusion must lie in [0, 1)");
    return {detail::synth_split(cfg, cfg.n_train, Split::Train, 1), detail::synth_split(cfg, cfg.n_test, Split::Test, 2)};
}

// ---------------------------------------------------------------------------
// CSV: sample_id,channel,label,v0,...,v{T-1}; one row per (sample, channel).

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream is(line);
    while (std::getline(is, cur, ',')) out.push_back(cur);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

template <class T>
T parse_number(const std::string& s, std::size_t line, const char* what) {
    T v{};
    std::size_t used = 0;
    try {
        if constexpr (std::is_same_v<T, double>)
            v = std::stod(s, &used);
        else
            v = static_cast<T>(std::stoll(s, &used));
    } catch (const std::exception&) {
        throw ParseError(std::string("malformed ") + what + " '" + s + "'", line);
    }
    if (used != s.size()) throw ParseError(std::string("malformed ") + what + " '" + s + "'", line);
    return v;
}

}  // namespace detail

inline std::string to_csv(const TimeSeriesDataset& ds) {
    std::string out = "sample_id,channel,label";
    for (std::size_t t = 0; t < ds.length; ++t) out += ",v" + std::to_string(t);
    out += '\n';
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t m = 0; m < ds.channels; ++m) {
            out += std::to_string(i) + ',' + std::to_string(m) + ',' + std::to_string(ds.labels[i]);
            for (std::size_t t = 0; t < ds.length; ++t) out += ',' + format_double(ds.at(i, t, m));
            out += '\n';
        }
    return out;
}

inline void write_csv(const TimeSeriesDataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f << to_csv(ds);
}

/// Parses the dataset CSV text. classes == 0 infers C as max label + 1.
inline TimeSeriesDataset parse_csv(std::istream& in, int classes = 0, std::string provenance = {}) {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line)) throw ParseError("empty file", 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto header = detail::split_csv(line);
    if (header.size() < 4 || header[0] != "sample_id" || header[1] != "channel" || header[2] != "label")
        throw ParseError("header must start with sample_id,channel,label,v0", lineno);
    const std::size_t T = header.size() - 3;
    for (std::size_t t = 0; t < T; ++t)
        if (header[3 + t] != "v" + std::to_string(t)) throw ParseError("unexpected column '" + header[3 + t] + "'", 1);

    struct Row {
        long sample;
        long channel;
        int label;
        std::vector<double> v;
        std::size_t line;
    };
    std::vector<Row> rows;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto f = detail::split_csv(line);
        if (f.size() != T + 3)
            throw SchemaError("line " + std::to_string(lineno) + ": expected " + std::to_string(T) + " values, got " +
                              std::to_string(f.size() < 3 ? 0 : f.size() - 3));
        Row r{detail::parse_number<long>(f[0], lineno, "sample_id"), detail::parse_number<long>(f[1], lineno, "channel"),
              detail::parse_number<int>(f[2], lineno, "label"), {}, lineno};
        r.v.reserve(T);
        for (std::size_t t = 0; t < T; ++t) {
            double v = detail::parse_number<double>(f[3 + t], lineno, "value");
            if (!std::isfinite(v)) throw ParseError("non-finite value", lineno);
            r.v.push_back(v);
        }
        rows.push_back(std::move(r));
    }
    if (rows.empty()) throw SchemaError("no data rows");

    // Rows of one sample are contiguous with channels 0..M-1 in order.
    std::size_t M = 0;
    while (M < rows.size() && rows[M].sample == rows[0].sample) ++M;
    if (rows.size() % M != 0) throw SchemaError("inconsistent channel count across samples");
    TimeSeriesDataset ds;
    ds.length = T;
    ds.channels = M;
    ds.provenance = std::move(provenance);
    const std::size_t N = rows.size() / M;
    ds.values.resize(N * T * M);
    int max_label = -1;
    for (std::size_t i = 0; i < N; ++i) {
        const auto& first = rows[i * M];
        for (std::size_t m = 0; m < M; ++m) {
            const auto& r = rows[i * M + m];
            if (r.sample != first.sample || r.channel != static_cast<long>(m))
                throw SchemaError("line " + std::to_string(r.line) + ": expected sample " +
                                  std::to_string(first.sample) + " channel " + std::to_string(m));
            if (r.label != first.label)
                throw SchemaError("line " + std::to_string(r.line) + ": label differs across channels of a sample");
            for (std::size_t t = 0; t < T; ++t) ds.at(i, t, m) = r.v[t];
        }
        if (i + 1 < N && rows[(i + 1) * M].sample == first.sample)
            throw SchemaError("line " + std::to_string(rows[(i + 1) * M].line) + ": inconsistent channel count");
        if (first.label < 0)
            throw SchemaError("line " + std::to_string(first.line) + ": negative label " + std::to_string(first.label));
        ds.labels.push_back(first.label);
        max_label = std::max(max_label, first.label);
    }
    ds.classes = classes > 0 ? classes : max_label + 1;
    for (std::size_t i = 0; i < N; ++i)
        if (ds.labels[i] >= ds.classes)
            throw SchemaError("line " + std::to_string(rows[i * M].line) + ": label " + std::to_string(ds.labels[i]) +
                              " outside [0, " + std::to_string(ds.classes) + ")");
    ds.validate();
    return ds;
}

inline TimeSeriesDataset load_csv(const std::string& path, int classes = 0) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "'");
    return parse_csv(f, classes, path);
}

// ---------------------------------------------------------------------------
// Per-channel standardization with train statistics.

struct ZScoreResult {
    TimeSeriesDataset train;
    TimeSeriesDataset test;
    std::vector<double> mean;
    std::vector<double> std;
};

inline TimeSeriesDataset apply_zscore(const TimeSeriesDataset& ds, std::span<const double> mean,
                                      std::span<const double> sd) {
    if (mean.size() != ds.channels) throw ShapeError("zscore: statistics for a different channel count");
    TimeSeriesDataset out = ds;
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t t = 0; t < ds.length; ++t)
            for (std::size_t m = 0; m < ds.channels; ++m) out.at(i, t, m) = (ds.at(i, t, m) - mean[m]) / sd[m];
    return out;
}

/// Channels with zero spread are left untouched (mean 0, std 1) and reported
/// through warn().
inline ZScoreResult zscore(const TimeSeriesDataset& train, const TimeSeriesDataset& test) {
    if (train.empty()) throw ContractError("zscore: empty train split");
    if (test.channels != train.channels && !test.empty()) throw ShapeError("zscore: channel count differs across splits");
    const std::size_t M = train.channels;
    std::vector<double> mean(M, 0.0), sd(M, 0.0);
    const double count = static_cast<double>(train.size() * train.length);
    for (std::size_t m = 0; m < M; ++m) {
        double s = 0.0;
        for (std::size_t i = 0; i < train.size(); ++i)
            for (std::size_t t = 0; t < train.length; ++t) s += train.at(i, t, m);
        mean[m] = s / count;
        double ss = 0.0;
        for (std::size_t i = 0; i < train.size(); ++i)
            for (std::size_t t = 0; t < train.length; ++t) {
                double d = train.at(i, t, m) - mean[m];
                ss += d * d;
            }
        sd[m] = std::sqrt(ss / count);
        if (!(sd[m] > 0.0)) {
            warn("zscore: channel " + std::to_string(m) + " is constant; left unnormalized");
            mean[m] = 0.0;
            sd[m] = 1.0;
        }
    }
    return {apply_zscore(train, mean, sd), test.empty() ? test : apply_zscore(test, mean, sd), mean, sd};
}

// ---------------------------------------------------------------------------
// Poison target assignment

enum class LabelMode { RandomLabel, SingleLabel };

inline std::string to_string(LabelMode m) { return m == LabelMode::RandomLabel ? "random-label" : "single-label"; }

inline LabelMode label_mode_from_string(const std::string& s) {
    if (s == "random-label" || s == "random") return LabelMode::RandomLabel;
    if (s == "single-label" || s == "single") return LabelMode::SingleLabel;
    throw ValidationError("label mode: unknown '" + s + "'");
}

struct PoisonPlan {
    LabelMode mode = LabelMode::RandomLabel;
    std::vector<std::size_t> indices;  // poisoned sample indices, ascending
    std::vector<int> targets;          // target per entry of `indices`
    double rate = 0.5;
    std::uint64_t seed = 0;
    int fixed_target = -1;

    std::size_t size() const noexcept { return indices.size(); }
};

inline PoisonPlan assign_targets(std::span<const int> labels, int classes, LabelMode mode, std::uint64_t seed,
                                 double rate = 0.5, std::optional<int> fixed_target = std::nullopt) {
    if (classes < 2) throw ContractError("assign_targets: need at least 2 classes");
    if (rate < 0.0 || rate > 1.0) throw ContractError("assign_targets: rate must lie in [0, 1]");
    if (mode == LabelMode::SingleLabel && (!fixed_target || *fixed_target < 0 || *fixed_target >= classes))
        throw ContractError("assign_targets: single-label mode requires a target in [0, C)");

    auto rng = detail::make_stream(seed, 7);
    const std::size_t n = labels.size();
    const auto k = static_cast<std::size_t>(std::llround(rate * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(k);
    std::sort(order.begin(), order.end());

    PoisonPlan plan{mode, std::move(order), {}, rate, seed, fixed_target.value_or(-1)};
    std::uniform_int_distribution<int> shift(1, classes - 1);
    plan.targets.reserve(k);
    for (auto i : plan.indices) {
        if (mode == LabelMode::SingleLabel)
            plan.targets.push_back(*fixed_target);
        else
            plan.targets.push_back((labels[i] + shift(rng)) % classes);
    }
    return plan;
}

}  // namespace freqback
