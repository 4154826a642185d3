#pragma once

// Backdoor trigger generators and the iterative poison-and-finetune loop.
//
// Every generator returns a TriggerBatch: the additive temporal trigger per
// sample, the poisoned inputs, and the target labels. The frequency-guided
// generator additionally keeps its per-band coefficients q, from which the
// temporal trigger is rebuilt as sum_t q[t, m] * U_t.

#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "freqback/autodiff.hpp"
#include "freqback/data.hpp"
#include "freqback/models.hpp"
#include "freqback/spectral.hpp"
#include "freqback/util.hpp"

namespace freqback {

enum class AttackKind { Static, FGSM, PGD, JSMA, FreqBack };

inline std::string to_string(AttackKind k) {
    switch (k) {
        case AttackKind::Static: return "static";
        case AttackKind::FGSM: return "fgsm";
        case AttackKind::PGD: return "pgd";
        case AttackKind::JSMA: return "jsma";
        case AttackKind::FreqBack: return "freqback";
    }
    return "?";
}

inline AttackKind attack_from_string(const std::string& s) {
    if (s == "static") return AttackKind::Static;
    if (s == "fgsm") return AttackKind::FGSM;
    if (s == "pgd") return AttackKind::PGD;
    if (s == "jsma") return AttackKind::JSMA;
    if (s == "freqback") return AttackKind::FreqBack;
    throw ValidationError("attack: unknown kind '" + s + "'");
}

enum class TriggerOptimizer { GradientDescent, Adam };

/// How the squared norms in the frequency and regularization terms reduce:
/// a plain sum, or an average over the entries they cover.
enum class NormReduction { Sum, Mean };

struct AttackConfig {
    AttackKind kind = AttackKind::FreqBack;
    double epsilon = 0.3;
    int pgd_steps = 20;
    int jsma_steps = 10;
    double jsma_magnitude = 1.0;
    int freq_steps = 30;
    double alpha = 30.0;
    double beta = 10.0;
    double ce_weight = 1.0;
    double trigger_lr = 0.05;
    TriggerOptimizer trigger_optimizer = TriggerOptimizer::Adam;
    NormReduction norm_reduction = NormReduction::Mean;
    int iterations = 3;  // E
    double poison_rate = 0.5;
    std::size_t static_segment = 15;
    double heatmap_lambda = 0.3;
    std::size_t heatmap_samples = 0;  // 0 uses the whole split
    bool test_heatmap_predicted_labels = false;
    std::size_t batch_size = 128;  // samples per trigger-generation tape
    TrainConfig finetune;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(epsilon > 0.0)) throw ValidationError("attack config: epsilon must be positive");
        if (pgd_steps < 1 || jsma_steps < 1 || freq_steps < 1)
            throw ValidationError("attack config: step counts must be at least 1");
        if (alpha < 0.0 || beta < 0.0) throw ValidationError("attack config: alpha and beta must be non-negative");
        if (iterations < 1) throw ValidationError("attack config: iterations must be at least 1");
        if (poison_rate < 0.0 || poison_rate > 1.0) throw ValidationError("attack config: poison_rate in [0, 1]");
        if (static_segment == 0) throw ValidationError("attack config: static_segment must be positive");
        if (!(trigger_lr > 0.0)) throw ValidationError("attack config: trigger_lr must be positive");
        if (!(heatmap_lambda > 0.0)) throw ValidationError("attack config: heatmap_lambda must be positive");
        if (batch_size == 0) throw ValidationError("attack config: batch_size must be positive");
    }
};

struct TriggerBatch {
    AttackKind kind = AttackKind::FreqBack;
    std::size_t length = 0, channels = 0;
    std::vector<std::size_t> source;  // index of each sample in the originating split
    std::vector<int> true_labels;
    std::vector<int> targets;
    std::vector<double> coefficients;  // (n, T, M) band coefficients; FreqBack only
    std::vector<double> triggers;      // (n, T, M) additive temporal trigger
    std::vector<double> poisoned;      // (n, T, M) clean + trigger

    std::size_t size() const noexcept { return targets.size(); }

    /// Poisoned inputs labeled with their targets.
    TimeSeriesDataset as_dataset(int classes, Split split = Split::Train) const {
        TimeSeriesDataset ds{length, channels, classes, poisoned, targets, split, "triggers:" + to_string(kind)};
        return ds;
    }

    std::span<const double> trigger(std::size_t i) const {
        return std::span<const double>(triggers).subspan(i * length * channels, length * channels);
    }
};

namespace detail {

/// Disables gradient recording for a classifier's parameters in scope.
class FreezeParams {
public:
    explicit FreezeParams(const Classifier& m) {
        for (const auto& t : m.params().tensors()) {
            nodes_.push_back(&t.node());
            prev_.push_back(t.node().requires_grad);
            t.node().requires_grad = false;
        }
    }
    ~FreezeParams() {
        for (std::size_t i = 0; i < nodes_.size(); ++i) nodes_[i]->requires_grad = prev_[i];
    }
    FreezeParams(const FreezeParams&) = delete;
    FreezeParams& operator=(const FreezeParams&) = delete;

private:
    std::vector<Node*> nodes_;
    std::vector<bool> prev_;
};

inline TriggerBatch start_batch(AttackKind kind, const TimeSeriesDataset& x, std::span<const int> targets) {
    if (targets.size() != x.size()) throw ShapeError("trigger: one target per sample required");
    TriggerBatch b;
    b.kind = kind;
    b.length = x.length;
    b.channels = x.channels;
    b.source.resize(x.size());
    std::iota(b.source.begin(), b.source.end(), std::size_t{0});
    b.true_labels = x.labels;
    b.targets.assign(targets.begin(), targets.end());
    return b;
}

inline void finish_from_poisoned(TriggerBatch& b, const TimeSeriesDataset& x) {
    b.triggers.resize(b.poisoned.size());
    for (std::size_t i = 0; i < b.poisoned.size(); ++i) b.triggers[i] = b.poisoned[i] - x.values[i];
}

inline void finish_from_triggers(TriggerBatch& b, const TimeSeriesDataset& x) {
    b.poisoned.resize(b.triggers.size());
    for (std::size_t i = 0; i < b.triggers.size(); ++i) b.poisoned[i] = x.values[i] + b.triggers[i];
}

inline double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace detail

/// Per-sample targeted loss and its gradient with respect to the inputs.
/// `inputs` is (n, T, M) sample-major.
struct InputGradient {
    std::vector<double> loss;
    std::vector<double> grad;
};

inline InputGradient input_gradient(const Classifier& model, std::span<const double> inputs, std::size_t n,
                                    std::span<const int> targets) {
    const auto& s = model.spec();
    detail::FreezeParams frozen(model);
    Tensor x({n, s.length, s.channels}, {inputs.begin(), inputs.end()}, true);
    auto per = cross_entropy_per_sample(model.forward(x), targets);
    backward(sum(per));
    InputGradient out{{per.values().begin(), per.values().end()}, {}};
    if (x.has_grad())
        out.grad.assign(x.grad().begin(), x.grad().end());
    else
        out.grad.assign(x.size(), 0.0);
    return out;
}

// ---------------------------------------------------------------------------
// Static

/// Replaces one segment per target label with N(0, 1) noise on all channels.
/// The segment start is fixed per target label and drawn from `seed`.
inline TriggerBatch static_trigger(const TimeSeriesDataset& x, std::span<const int> targets, std::size_t seg_len,
                                   std::uint64_t seed) {
    if (seg_len == 0 || seg_len > x.length) throw ContractError("static_trigger: segment length must lie in [1, T]");
    auto b = detail::start_batch(AttackKind::Static, x, targets);
    auto pos_rng = detail::make_stream(seed, 23);
    std::uniform_int_distribution<std::size_t> pos_dist(0, x.length - seg_len);
    std::vector<std::size_t> position(static_cast<std::size_t>(std::max(1, x.classes)));
    for (auto& p : position) p = pos_dist(pos_rng);
    auto noise_rng = detail::make_stream(seed, 29);
    std::normal_distribution<double> noise(0.0, 1.0);

    b.poisoned = x.values;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const auto tgt = static_cast<std::size_t>(targets[i]);
        if (tgt >= position.size()) throw ContractError("static_trigger: target outside [0, C)");
        for (std::size_t t = position[tgt]; t < position[tgt] + seg_len; ++t)
            for (std::size_t m = 0; m < x.channels; ++m) {
                double v = noise(noise_rng);
                // A draw equal to the clean value would leave the entry unchanged.
                while (v == x.at(i, t, m)) v = noise(noise_rng);
                b.poisoned[(i * x.length + t) * x.channels + m] = v;
            }
    }
    detail::finish_from_poisoned(b, x);
    return b;
}

inline std::vector<std::size_t> static_positions(int classes, std::size_t length, std::size_t seg_len,
                                                 std::uint64_t seed) {
    auto pos_rng = detail::make_stream(seed, 23);
    std::uniform_int_distribution<std::size_t> pos_dist(0, length - seg_len);
    std::vector<std::size_t> position(static_cast<std::size_t>(std::max(1, classes)));
    for (auto& p : position) p = pos_dist(pos_rng);
    return position;
}

// ---------------------------------------------------------------------------
// Gradient-sign attacks (targeted: descend the loss toward the target)

inline TriggerBatch fgsm_trigger(const Classifier& model, const TimeSeriesDataset& x, std::span<const int> targets,
                                 double epsilon = 0.3, std::size_t batch = 128) {
    auto b = detail::start_batch(AttackKind::FGSM, x, targets);
    b.poisoned = x.values;
    const std::size_t stride = x.sample_stride();
    for (std::size_t lo = 0; lo < x.size(); lo += batch) {
        const std::size_t n = std::min(batch, x.size() - lo);
        auto g = input_gradient(model, std::span<const double>(x.values).subspan(lo * stride, n * stride), n,
                                targets.subspan(lo, n));
        for (std::size_t k = 0; k < n * stride; ++k) b.poisoned[lo * stride + k] -= epsilon * detail::sign(g.grad[k]);
    }
    detail::finish_from_poisoned(b, x);
    return b;
}

/// Iterated targeted sign steps of size 2.5 * eps / steps, each followed by
/// projection onto the l-infinity ball of radius eps around the clean input.
inline TriggerBatch pgd_trigger(const Classifier& model, const TimeSeriesDataset& x, std::span<const int> targets,
                                double epsilon = 0.3, int steps = 20, std::size_t batch = 128) {
    auto b = detail::start_batch(AttackKind::PGD, x, targets);
    b.poisoned = x.values;
    const double step = 2.5 * epsilon / static_cast<double>(steps);
    const std::size_t stride = x.sample_stride();
    for (std::size_t lo = 0; lo < x.size(); lo += batch) {
        const std::size_t n = std::min(batch, x.size() - lo);
        std::span<double> adv(b.poisoned.data() + lo * stride, n * stride);
        std::span<const double> clean(x.values.data() + lo * stride, n * stride);
        for (int s = 0; s < steps; ++s) {
            auto g = input_gradient(model, adv, n, targets.subspan(lo, n));
            for (std::size_t k = 0; k < adv.size(); ++k) {
                double v = adv[k] - step * detail::sign(g.grad[k]);
                adv[k] = std::clamp(v, clean[k] - epsilon, clean[k] + epsilon);
            }
        }
    }
    detail::finish_from_poisoned(b, x);
    return b;
}

/// Selected (t, m) flat indices per sample, in selection order.
using JsmaTrace = std::vector<std::vector<std::size_t>>;

/// Greedy saliency attack: each step perturbs the not-yet-chosen coordinate
/// with the largest |d loss / d x| by `magnitude` against the gradient sign.
inline TriggerBatch jsma_trigger(const Classifier& model, const TimeSeriesDataset& x, std::span<const int> targets,
                                 int steps = 10, double magnitude = 1.0, std::size_t batch = 128,
                                 JsmaTrace* trace = nullptr) {
    auto b = detail::start_batch(AttackKind::JSMA, x, targets);
    b.poisoned = x.values;
    const std::size_t stride = x.sample_stride();
    if (trace) trace->assign(x.size(), {});
    for (std::size_t lo = 0; lo < x.size(); lo += batch) {
        const std::size_t n = std::min(batch, x.size() - lo);
        std::span<double> adv(b.poisoned.data() + lo * stride, n * stride);
        std::vector<char> used(n * stride, 0);
        for (int s = 0; s < steps; ++s) {
            auto g = input_gradient(model, adv, n, targets.subspan(lo, n));
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t best = stride;
                double best_mag = 0.0;
                for (std::size_t k = 0; k < stride; ++k) {
                    const double mag = std::abs(g.grad[i * stride + k]);
                    if (!used[i * stride + k] && mag > best_mag) {
                        best_mag = mag;
                        best = k;
                    }
                }
                if (best == stride) continue;  // no informative coordinate left
                used[i * stride + best] = 1;
                adv[i * stride + best] = x.values[(lo + i) * stride + best] -
                                         magnitude * detail::sign(g.grad[i * stride + best]);
                if (trace) (*trace)[lo + i].push_back(best);
            }
        }
    }
    detail::finish_from_poisoned(b, x);
    return b;
}

// ---------------------------------------------------------------------------
// Frequency-guided trigger

struct FreqBackTrace {
    /// Objective of the returned iterate per sample.
    std::vector<double> best_objective;
    /// Mean objective over the batch at each evaluated iterate.
    std::vector<double> mean_objective;
};

/// Rebuilds (n, T, M) temporal triggers from (n, T, M) band coefficients.
inline std::vector<double> realize_triggers(const FrequencyBasis& basis, std::span<const double> q, std::size_t n,
                                            std::size_t M) {
    const std::size_t T = basis.length;
    std::vector<double> out(n * T * M, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t b = 0; b < T; ++b)
            for (std::size_t m = 0; m < M; ++m) {
                const double c = q[(i * T + b) * M + m];
                if (c == 0.0) continue;
                auto u = basis[b];
                for (std::size_t t = 0; t < T; ++t) out[(i * T + t) * M + m] += c * u[t];
            }
    return out;
}

namespace detail {

/// Per-sample objective terms for coefficients q (n, T, M).
struct FreqObjective {
    Tensor total;    // (n)
    Tensor trigger;  // (n, T, M)
};

inline FreqObjective freq_objective(const Classifier& model, const Tensor& x, const Tensor& q, const Tensor& basis,
                                    const Tensor& target_scale, std::span<const int> targets, const AttackConfig& cfg) {
    const std::size_t n = q.dim(0), T = q.dim(1), M = q.dim(2);
    auto rows = reshape(transpose(q, 1, 2), {n * M, T});
    auto trig = transpose(reshape(matmul(rows, basis), {n, M, T}), 1, 2);
    auto ce = cross_entropy_per_sample(model.forward(add(x, trig)), targets);
    auto per_sample = [&](const Tensor& t) { return sum(sum(t, 2), 1); };
    auto freq = per_sample(square(sub(target_scale, abs(q))));
    auto reg = add(per_sample(square(q)), per_sample(square(trig)));
    // Mean reduction averages each squared norm over its T (per channel) or T * M entries.
    const double band = cfg.norm_reduction == NormReduction::Mean ? static_cast<double>(T) : 1.0;
    const double entries = band * (cfg.norm_reduction == NormReduction::Mean ? static_cast<double>(M) : 1.0);
    auto total = add(add(scale(ce, cfg.ce_weight), scale(freq, cfg.alpha / (static_cast<double>(M) * band))),
                     scale(reg, cfg.beta / entries));
    return {total, trig};
}

}  // namespace detail

/// Minimizes, per sample and over band coefficients q,
///   CE(f(X + sum q U), target) + alpha/M * sum_m ||S~_m - |q_m|||^2
///   + beta * (||q||^2 + ||sum q U||^2)
/// where S~ is the clamped, per-channel max-normalized heatmap. q starts at
/// 0.1 * S~ and the lowest-objective iterate per sample is returned.
inline TriggerBatch freqback_trigger(const Classifier& model, const TimeSeriesDataset& x, std::span<const int> targets,
                                     const Matrix& heatmap, const AttackConfig& cfg = {},
                                     FreqBackTrace* trace = nullptr) {
    if (heatmap.rows != x.length || heatmap.cols != x.channels)
        throw ShapeError("freqback_trigger: heatmap (" + std::to_string(heatmap.rows) + ", " +
                         std::to_string(heatmap.cols) + ") does not match data (" + std::to_string(x.length) + ", " +
                         std::to_string(x.channels) + ")");
    auto b = detail::start_batch(AttackKind::FreqBack, x, targets);
    const std::size_t T = x.length, M = x.channels, stride = x.sample_stride();
    const auto basis = build_basis(T);
    const Tensor basis_t = basis.as_tensor();
    const Matrix target = normalize_heatmap(heatmap);

    b.coefficients.assign(x.size() * stride, 0.0);
    if (trace) {
        trace->best_objective.assign(x.size(), 0.0);
        trace->mean_objective.assign(static_cast<std::size_t>(cfg.freq_steps) + 1, 0.0);
    }
    detail::FreezeParams frozen(model);
    for (std::size_t lo = 0; lo < x.size(); lo += cfg.batch_size) {
        const std::size_t n = std::min(cfg.batch_size, x.size() - lo);
        std::vector<double> tgt(n * stride), q(n * stride);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < stride; ++k) {
                tgt[i * stride + k] = target.data[k];
                q[i * stride + k] = 0.1 * target.data[k];
            }
        const Tensor tgt_t({n, T, M}, std::move(tgt));
        const Tensor xb({n, T, M}, std::vector<double>(x.values.begin() + static_cast<std::ptrdiff_t>(lo * stride),
                                                       x.values.begin() + static_cast<std::ptrdiff_t>((lo + n) * stride)));
        auto ys = targets.subspan(lo, n);
        std::vector<double> best_obj(n, std::numeric_limits<double>::infinity());
        std::vector<double> best_q(q);
        std::vector<double> m1(q.size(), 0.0), m2(q.size(), 0.0);
        double last_finite = std::numeric_limits<double>::quiet_NaN();

        for (int step = 0; step <= cfg.freq_steps; ++step) {
            Tensor qt({n, T, M}, q, true);
            detail::FreqObjective obj;
            try {
                obj = detail::freq_objective(model, xb, qt, basis_t, tgt_t, ys, cfg);
            } catch (const NumericError&) {
                Tape::current().clear();
                throw OptimizationError("freqback_trigger: objective diverged at step " + std::to_string(step),
                                        last_finite);
            }
            double mean_obj = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double v = obj.total[i];
                if (!std::isfinite(v)) {
                    Tape::current().clear();
                    throw OptimizationError("freqback_trigger: objective diverged at step " + std::to_string(step),
                                            last_finite);
                }
                mean_obj += v / static_cast<double>(n);
                if (v < best_obj[i]) {
                    best_obj[i] = v;
                    std::copy_n(q.begin() + static_cast<std::ptrdiff_t>(i * stride), stride,
                                best_q.begin() + static_cast<std::ptrdiff_t>(i * stride));
                }
            }
            last_finite = mean_obj;
            if (trace) trace->mean_objective[static_cast<std::size_t>(step)] += mean_obj * static_cast<double>(n) /
                                                                                static_cast<double>(x.size());
            if (step == cfg.freq_steps) {
                Tape::current().clear();
                break;
            }
            backward(sum(obj.total));
            auto g = qt.grad();
            const double t1 = static_cast<double>(step + 1);
            for (std::size_t k = 0; k < q.size(); ++k) {
                if (cfg.trigger_optimizer == TriggerOptimizer::GradientDescent) {
                    q[k] -= cfg.trigger_lr * g[k];
                } else {
                    m1[k] = 0.9 * m1[k] + 0.1 * g[k];
                    m2[k] = 0.999 * m2[k] + 0.001 * g[k] * g[k];
                    const double mh = m1[k] / (1.0 - std::pow(0.9, t1));
                    const double vh = m2[k] / (1.0 - std::pow(0.999, t1));
                    q[k] -= cfg.trigger_lr * mh / (std::sqrt(vh) + 1e-8);
                }
            }
        }
        std::copy(best_q.begin(), best_q.end(), b.coefficients.begin() + static_cast<std::ptrdiff_t>(lo * stride));
        if (trace) std::copy(best_obj.begin(), best_obj.end(), trace->best_objective.begin() + static_cast<std::ptrdiff_t>(lo));
    }
    b.triggers = realize_triggers(basis, b.coefficients, x.size(), M);
    detail::finish_from_triggers(b, x);
    return b;
}

// ---------------------------------------------------------------------------
// Dispatch, backdoor training, evaluation

inline TriggerBatch generate_triggers(const Classifier& model, const TimeSeriesDataset& x, std::span<const int> targets,
                                      const AttackConfig& cfg, const Matrix* heatmap = nullptr) {
    switch (cfg.kind) {
        case AttackKind::Static: return static_trigger(x, targets, cfg.static_segment, cfg.seed);
        case AttackKind::FGSM: return fgsm_trigger(model, x, targets, cfg.epsilon, cfg.batch_size);
        case AttackKind::PGD: return pgd_trigger(model, x, targets, cfg.epsilon, cfg.pgd_steps, cfg.batch_size);
        case AttackKind::JSMA:
            return jsma_trigger(model, x, targets, cfg.jsma_steps, cfg.jsma_magnitude, cfg.batch_size);
        case AttackKind::FreqBack:
            if (!heatmap) throw ContractError("freqback requires a heatmap");
            return freqback_trigger(model, x, targets, *heatmap, cfg);
    }
    throw ValidationError("unknown attack kind");
}

/// First `k` samples of a split (or all when k is 0 or exceeds its size).
inline TimeSeriesDataset head_subset(const TimeSeriesDataset& ds, std::size_t k) {
    if (k == 0 || k >= ds.size()) return ds;
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return ds.subset(idx);
}

inline FrequencyHeatmap model_heatmap(const Classifier& model, const TimeSeriesDataset& ds, double lambda,
                                      std::size_t samples = 0) {
    auto sub = head_subset(ds, samples);
    return estimate_heatmap([&](const Tensor& x, std::span<const int> y) { return model.per_sample_loss(x, y); }, sub,
                            HeatmapOptions{lambda, 256}, model.fingerprint());
}

struct IterationRecord {
    TriggerBatch triggers;
    std::optional<FrequencyHeatmap> heatmap;
    TrainingRecord finetune;
    double heatmap_seconds = 0.0;
    double trigger_seconds = 0.0;
    double train_seconds = 0.0;
};

struct BackdoorResult {
    std::vector<IterationRecord> iterations;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline TimeSeriesDataset concat_datasets(const TimeSeriesDataset& a, const TimeSeriesDataset& b) {
    if (a.length != b.length || a.channels != b.channels) throw ShapeError("concat_datasets: shapes differ");
    TimeSeriesDataset out = a;
    out.values.insert(out.values.end(), b.values.begin(), b.values.end());
    out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
    return out;
}

/// E rounds of: (frequency-guided only) re-estimate the heatmap on the current
/// model, generate triggers for the planned samples, then finetune on the clean
/// split together with the poisoned copies.
inline BackdoorResult backdoor_train(Classifier& model, const TimeSeriesDataset& train_set, const PoisonPlan& plan,
                                     const AttackConfig& cfg) {
    cfg.validate();
    for (auto i : plan.indices)
        if (i >= train_set.size()) throw ContractError("backdoor_train: poison index outside the train split");
    if (plan.targets.size() != plan.indices.size()) throw ContractError("backdoor_train: plan targets mismatch");

    BackdoorResult result;
    const auto victims = train_set.subset(plan.indices);
    for (int it = 0; it < cfg.iterations; ++it) {
        IterationRecord rec;
        if (cfg.kind == AttackKind::FreqBack && !plan.indices.empty()) {
            auto t0 = std::chrono::steady_clock::now();
            rec.heatmap = model_heatmap(model, train_set, cfg.heatmap_lambda, cfg.heatmap_samples);
            rec.heatmap_seconds = seconds_since(t0);
        }
        auto t0 = std::chrono::steady_clock::now();
        if (!plan.indices.empty()) {
            AttackConfig iter_cfg = cfg;
            iter_cfg.seed = cfg.seed;
            rec.triggers = generate_triggers(model, victims, plan.targets, iter_cfg,
                                             rec.heatmap ? &rec.heatmap->scores : nullptr);
            rec.triggers.source = plan.indices;
        }
        rec.trigger_seconds = seconds_since(t0);

        t0 = std::chrono::steady_clock::now();
        TrainConfig tc = cfg.finetune;
        tc.seed = cfg.finetune.seed + static_cast<std::uint64_t>(it) * 7919u;
        const auto mixed =
            plan.indices.empty() ? train_set : concat_datasets(train_set, rec.triggers.as_dataset(train_set.classes));
        rec.finetune = train(model, mixed, tc);
        rec.train_seconds = seconds_since(t0);
        result.iterations.push_back(std::move(rec));
    }
    return result;
}

struct Metrics {
    double acc = 0.0;
    double asr = 0.0;
    std::size_t asr_count = 0;  // samples in the ASR denominator
};

/// ACC on clean inputs; ASR on triggered inputs. In single-label mode samples
/// whose ground truth already equals the target are excluded from ASR.
inline Metrics evaluate(const Classifier& model, const TimeSeriesDataset& clean, const TriggerBatch& poisoned,
                        LabelMode mode) {
    if (clean.empty()) throw ContractError("evaluate: empty clean split");
    if (poisoned.size() == 0) throw ContractError("evaluate: empty poisoned split");
    Metrics m;
    m.acc = model.accuracy(clean);
    const auto preds = model.predict(poisoned.as_dataset(model.spec().classes));
    std::size_t hit = 0, count = 0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        if (mode == LabelMode::SingleLabel && poisoned.true_labels[i] == poisoned.targets[i]) continue;
        ++count;
        hit += preds[i] == poisoned.targets[i];
    }
    if (count == 0) throw ContractError("evaluate: no samples eligible for ASR");
    m.asr = static_cast<double>(hit) / static_cast<double>(count);
    m.asr_count = count;
    return m;
}

// ---------------------------------------------------------------------------
// Serialization: dataset CSV of poisoned inputs plus a JSON sidecar.

inline nlohmann::json to_json(const AttackConfig& c) {
    return {{"kind", to_string(c.kind)},
            {"epsilon", c.epsilon},
            {"pgd_steps", c.pgd_steps},
            {"jsma_steps", c.jsma_steps},
            {"jsma_magnitude", c.jsma_magnitude},
            {"freq_steps", c.freq_steps},
            {"alpha", c.alpha},
            {"beta", c.beta},
            {"ce_weight", c.ce_weight},
            {"trigger_lr", c.trigger_lr},
            {"trigger_optimizer", c.trigger_optimizer == TriggerOptimizer::Adam ? "adam" : "gd"},
            {"norm_reduction", c.norm_reduction == NormReduction::Mean ? "mean" : "sum"},
            {"iterations", c.iterations},
            {"poison_rate", c.poison_rate},
            {"static_segment", c.static_segment},
            {"heatmap_lambda", c.heatmap_lambda},
            {"heatmap_samples", c.heatmap_samples},
            {"test_heatmap_predicted_labels", c.test_heatmap_predicted_labels},
            {"batch_size", c.batch_size},
            {"finetune", to_json(c.finetune)},
            {"seed", c.seed}};
}

inline AttackConfig attack_config_from_json(const nlohmann::json& j) {
    AttackConfig c;
    c.kind = attack_from_string(j.value("kind", to_string(c.kind)));
    c.epsilon = j.value("epsilon", c.epsilon);
    c.pgd_steps = j.value("pgd_steps", c.pgd_steps);
    c.jsma_steps = j.value("jsma_steps", c.jsma_steps);
    c.jsma_magnitude = j.value("jsma_magnitude", c.jsma_magnitude);
    c.freq_steps = j.value("freq_steps", c.freq_steps);
    c.alpha = j.value("alpha", c.alpha);
    c.beta = j.value("beta", c.beta);
    c.ce_weight = j.value("ce_weight", c.ce_weight);
    c.trigger_lr = j.value("trigger_lr", c.trigger_lr);
    auto opt = j.value("trigger_optimizer", std::string("adam"));
    if (opt != "adam" && opt != "gd") throw ValidationError("attack config: trigger_optimizer must be adam or gd");
    c.trigger_optimizer = opt == "adam" ? TriggerOptimizer::Adam : TriggerOptimizer::GradientDescent;
    auto red = j.value("norm_reduction", std::string("mean"));
    if (red != "mean" && red != "sum") throw ValidationError("attack config: norm_reduction must be mean or sum");
    c.norm_reduction = red == "mean" ? NormReduction::Mean : NormReduction::Sum;
    c.iterations = j.value("iterations", c.iterations);
    c.poison_rate = j.value("poison_rate", c.poison_rate);
    c.static_segment = j.value("static_segment", c.static_segment);
    c.heatmap_lambda = j.value("heatmap_lambda", c.heatmap_lambda);
    c.heatmap_samples = j.value("heatmap_samples", c.heatmap_samples);
    c.test_heatmap_predicted_labels = j.value("test_heatmap_predicted_labels", c.test_heatmap_predicted_labels);
    c.batch_size = j.value("batch_size", c.batch_size);
    if (j.contains("finetune")) c.finetune = train_config_from_json(j.at("finetune"), c.finetune);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

inline void save_trigger_batch(const TriggerBatch& b, const AttackConfig& cfg, int classes, const std::string& csv_path,
                               const std::string& json_path) {
    write_csv(b.as_dataset(classes), csv_path);
    nlohmann::json j = {{"kind", to_string(b.kind)},
                        {"length", b.length},
                        {"channels", b.channels},
                        {"source", b.source},
                        {"true_labels", b.true_labels},
                        {"targets", b.targets},
                        {"coefficients", b.coefficients},
                        {"config", to_json(cfg)},
                        {"poisoned_csv", csv_path}};
    std::ofstream f(json_path, std::ios::binary);
    if (!f) throw Error("cannot open '" + json_path + "' for writing");
    f << j.dump(1) << '\n';
}

}  // namespace freqback
