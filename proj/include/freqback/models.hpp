#pragma once

// Time-series classifiers: bidirectional tanh RNN, LSTM, 1-D CNN with global
// average pooling, and a residual dilated causal TCN. All map an (N, T, M)
// batch to (N, C) logits.

#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "freqback/autodiff.hpp"
#include "freqback/data.hpp"
#include "freqback/optim.hpp"
#include "freqback/util.hpp"

namespace freqback {

enum class Architecture { BiRNN, LSTM, CNN, TCN };

inline std::string to_string(Architecture a) {
    switch (a) {
        case Architecture::BiRNN: return "birnn";
        case Architecture::LSTM: return "lstm";
        case Architecture::CNN: return "cnn";
        case Architecture::TCN: return "tcn";
    }
    return "?";
}

inline Architecture architecture_from_string(const std::string& s) {
    if (s == "birnn") return Architecture::BiRNN;
    if (s == "lstm") return Architecture::LSTM;
    if (s == "cnn") return Architecture::CNN;
    if (s == "tcn") return Architecture::TCN;
    throw ValidationError("architecture: unknown '" + s + "'");
}

inline bool is_recurrent(Architecture a) { return a == Architecture::BiRNN || a == Architecture::LSTM; }

struct ModelSpec {
    Architecture arch = Architecture::BiRNN;
    std::size_t length = 0;    // T
    std::size_t channels = 0;  // M
    int classes = 0;           // C
    std::size_t hidden = 64;
    std::size_t layers = 1;    // recurrent stack depth or conv layer count; TCN uses dilations
    std::size_t kernel = 3;
    std::vector<std::size_t> dilations{1, 2, 4};
    std::uint64_t seed = 0;

    void validate() const {
        if (length == 0) throw ValidationError("model spec: length must be positive");
        if (channels == 0) throw ValidationError("model spec: channels must be positive");
        if (classes < 2) throw ValidationError("model spec: classes must be at least 2");
        if (hidden == 0) throw ValidationError("model spec: hidden must be at least 1");
        if (layers == 0) throw ValidationError("model spec: layers must be at least 1");
        if ((arch == Architecture::CNN || arch == Architecture::TCN) && kernel == 0)
            throw ValidationError("model spec: kernel must be at least 1");
        if (arch == Architecture::TCN) {
            if (dilations.empty()) throw ValidationError("model spec: dilations must be non-empty");
            for (std::size_t i = 0; i < dilations.size(); ++i) {
                if (dilations[i] == 0) throw ValidationError("model spec: dilations must be positive");
                if (i > 0 && dilations[i] <= dilations[i - 1])
                    throw ValidationError("model spec: dilations must be strictly increasing");
            }
        }
    }

    /// Steps of history visible to the TCN's last output.
    std::size_t receptive_field() const {
        std::size_t sum = 0;
        for (auto d : dilations) sum += d;
        return 1 + (kernel - 1) * sum;
    }
};

inline nlohmann::json to_json(const ModelSpec& s) {
    return {{"arch", to_string(s.arch)}, {"length", s.length}, {"channels", s.channels}, {"classes", s.classes},
            {"hidden", s.hidden},        {"layers", s.layers}, {"kernel", s.kernel},     {"dilations", s.dilations},
            {"seed", s.seed}};
}

inline ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec s;
    s.arch = architecture_from_string(j.at("arch").get<std::string>());
    s.length = j.at("length").get<std::size_t>();
    s.channels = j.at("channels").get<std::size_t>();
    s.classes = j.at("classes").get<int>();
    s.hidden = j.value("hidden", s.hidden);
    s.layers = j.value("layers", s.layers);
    s.kernel = j.value("kernel", s.kernel);
    s.dilations = j.value("dilations", s.dilations);
    s.seed = j.value("seed", s.seed);
    return s;
}

inline OptimizerConfig default_optimizer(Architecture a) {
    return is_recurrent(a) ? OptimizerConfig::rmsprop(0.002) : OptimizerConfig::adam(0.003);
}

struct TrainingRecord {
    int epochs_run = 0;
    double best_loss = std::numeric_limits<double>::infinity();
    std::vector<double> loss_curve;
};

class Classifier {
public:
    Classifier() = default;
    Classifier(ModelSpec spec, ParameterSet params) : spec_(std::move(spec)), params_(std::move(params)) {}

    const ModelSpec& spec() const noexcept { return spec_; }
    ParameterSet& params() noexcept { return params_; }
    const ParameterSet& params() const noexcept { return params_; }
    TrainingRecord& record() noexcept { return record_; }
    const TrainingRecord& record() const noexcept { return record_; }

    Classifier clone() const {
        Classifier c(spec_, params_.clone());
        c.record_ = record_;
        return c;
    }

    std::string fingerprint() const {
        std::uint64_t h = fnv1a(to_json(spec_).dump());
        for (const auto& t : params_.tensors()) h = fnv1a(t.values(), h);
        return hex64(h);
    }

    /// (N, T, M) -> (N, C) logits.
    Tensor forward(const Tensor& x) const {
        if (x.rank() != 3 || x.dim(1) != spec_.length || x.dim(2) != spec_.channels) {
            throw ShapeError("forward: expected input (N, " + std::to_string(spec_.length) + ", " +
                             std::to_string(spec_.channels) + "), got " + freqback::to_string(x.shape()));
        }
        const std::size_t n = x.dim(0);
        if (n == 0) return Tensor({0, static_cast<std::size_t>(spec_.classes)}, {});
        switch (spec_.arch) {
            case Architecture::BiRNN: return forward_birnn(x);
            case Architecture::LSTM: return forward_lstm(x);
            case Architecture::CNN: return forward_cnn(x);
            case Architecture::TCN: return forward_tcn(x);
        }
        throw ValidationError("forward: unknown architecture");
    }

    /// Per-sample cross entropy without recording, in batches.
    std::vector<double> per_sample_loss(const Tensor& x, std::span<const int> y) const {
        NoGradGuard g;
        auto l = cross_entropy_per_sample(forward(x), y);
        return {l.values().begin(), l.values().end()};
    }

    std::vector<double> logits(const TimeSeriesDataset& ds, std::size_t batch = 256) const {
        NoGradGuard g;
        std::vector<double> out;
        out.reserve(ds.size() * static_cast<std::size_t>(spec_.classes));
        std::vector<std::size_t> idx;
        for (std::size_t lo = 0; lo < ds.size(); lo += batch) {
            idx.clear();
            for (std::size_t i = lo; i < std::min(ds.size(), lo + batch); ++i) idx.push_back(i);
            auto z = forward(ds.batch(idx));
            out.insert(out.end(), z.values().begin(), z.values().end());
        }
        return out;
    }

    std::vector<int> predict(const TimeSeriesDataset& ds) const {
        auto z = logits(ds);
        const auto c = static_cast<std::size_t>(spec_.classes);
        std::vector<int> out(ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i)
            out[i] = static_cast<int>(std::max_element(z.begin() + static_cast<std::ptrdiff_t>(i * c),
                                                       z.begin() + static_cast<std::ptrdiff_t>((i + 1) * c)) -
                                      (z.begin() + static_cast<std::ptrdiff_t>(i * c)));
        return out;
    }

    double accuracy(const TimeSeriesDataset& ds) const {
        if (ds.empty()) throw ContractError("accuracy: empty dataset");
        auto p = predict(ds);
        std::size_t hit = 0;
        for (std::size_t i = 0; i < p.size(); ++i) hit += p[i] == ds.labels[i];
        return static_cast<double>(hit) / static_cast<double>(p.size());
    }

    /// Output of the last convolutional layer, (N, H, T). CNN and TCN only.
    Tensor last_conv_activations(const Tensor& x) const {
        if (spec_.arch != Architecture::CNN && spec_.arch != Architecture::TCN)
            throw ContractError("last_conv_activations: model has no convolutional layers");
        return conv_body(x);
    }

    /// Parameter names of the last convolutional layer (weights first).
    std::vector<std::string> last_conv_params() const {
        if (spec_.arch == Architecture::CNN) {
            const std::string s = "conv" + std::to_string(spec_.layers - 1);
            return {s + ".W", s + ".b"};
        }
        if (spec_.arch == Architecture::TCN) {
            const std::string s = "block" + std::to_string(spec_.dilations.size() - 1);
            std::vector<std::string> out{s + ".W", s + ".b"};
            if (params_.contains(s + ".down.W")) {
                out.push_back(s + ".down.W");
                out.push_back(s + ".down.b");
            }
            return out;
        }
        throw ContractError("last_conv_params: model has no convolutional layers");
    }

    /// Name of the parameter pair forming the classification head.
    static constexpr const char* head_weight = "head.W";
    static constexpr const char* head_bias = "head.b";

private:
    const Tensor& p(const std::string& name) const { return params_[name]; }

    Tensor head(const Tensor& features) const { return add_bias(matmul(features, p(head_weight)), p(head_bias)); }

    /// Runs one recurrent layer over a sequence of (N, in) inputs. `proj` holds
    /// the precomputed input projections (T, N, G) for the first layer.
    std::vector<Tensor> run_rnn(const std::vector<Tensor>& steps, const std::string& prefix, bool reverse) const {
        const std::size_t T = steps.size(), n = steps[0].dim(0), H = spec_.hidden;
        std::vector<Tensor> out(T);
        Tensor h = Tensor::zeros({n, H});
        for (std::size_t k = 0; k < T; ++k) {
            const std::size_t t = reverse ? T - 1 - k : k;
            auto a = add(matmul(steps[t], p(prefix + ".Wx")), add_bias(matmul(h, p(prefix + ".Wh")), p(prefix + ".b")));
            h = freqback::tanh(a);
            out[t] = h;
        }
        return out;
    }

    std::vector<Tensor> run_lstm(const std::vector<Tensor>& steps, const std::string& prefix) const {
        const std::size_t T = steps.size(), n = steps[0].dim(0), H = spec_.hidden;
        std::vector<Tensor> out(T);
        Tensor h = Tensor::zeros({n, H}), c = Tensor::zeros({n, H});
        for (std::size_t t = 0; t < T; ++t) {
            auto z = add(matmul(steps[t], p(prefix + ".Wx")), add_bias(matmul(h, p(prefix + ".Wh")), p(prefix + ".b")));
            auto i = sigmoid(slice(z, 1, 0, H));
            auto f = sigmoid(slice(z, 1, H, 2 * H));
            auto g = freqback::tanh(slice(z, 1, 2 * H, 3 * H));
            auto o = sigmoid(slice(z, 1, 3 * H, 4 * H));
            c = add(mul(f, c), mul(i, g));
            h = mul(o, freqback::tanh(c));
            out[t] = h;
        }
        return out;
    }

    static std::vector<Tensor> time_steps(const Tensor& x) {
        const std::size_t n = x.dim(0), T = x.dim(1), M = x.dim(2);
        auto xt = transpose(x, 0, 1);  // (T, N, M)
        std::vector<Tensor> steps;
        steps.reserve(T);
        for (std::size_t t = 0; t < T; ++t) steps.push_back(reshape(slice(xt, 0, t, t + 1), {n, M}));
        return steps;
    }

    Tensor forward_birnn(const Tensor& x) const {
        auto steps = time_steps(x);
        std::vector<Tensor> fw, bw;
        for (std::size_t l = 0; l < spec_.layers; ++l) {
            const std::string s = std::to_string(l);
            fw = run_rnn(steps, "rnn" + s + ".fwd", false);
            bw = run_rnn(steps, "rnn" + s + ".bwd", true);
            if (l + 1 < spec_.layers)
                for (std::size_t t = 0; t < steps.size(); ++t) steps[t] = concat({fw[t], bw[t]}, 1);
        }
        return head(concat({fw.back(), bw.front()}, 1));
    }

    Tensor forward_lstm(const Tensor& x) const {
        auto steps = time_steps(x);
        for (std::size_t l = 0; l < spec_.layers; ++l) steps = run_lstm(steps, "lstm" + std::to_string(l));
        return head(steps.back());
    }

    Tensor conv_body(const Tensor& x) const {
        auto h = transpose(x, 1, 2);  // (N, M, T)
        const std::size_t k = spec_.kernel;
        if (spec_.arch == Architecture::CNN) {
            Conv1dOptions opt{1, 1, (k - 1) / 2, k - 1 - (k - 1) / 2};
            for (std::size_t l = 0; l < spec_.layers; ++l) {
                const std::string s = "conv" + std::to_string(l);
                h = relu(conv1d(h, p(s + ".W"), p(s + ".b"), opt));
            }
            return h;
        }
        for (std::size_t l = 0; l < spec_.dilations.size(); ++l) {
            const std::string s = "block" + std::to_string(l);
            const std::size_t d = spec_.dilations[l];
            auto y = relu(conv1d(h, p(s + ".W"), p(s + ".b"), Conv1dOptions{1, d, (k - 1) * d, 0}));
            Tensor res = params_.contains(s + ".down.W") ? conv1d(h, p(s + ".down.W"), p(s + ".down.b")) : h;
            h = relu(add(y, res));
        }
        return h;
    }

    Tensor forward_cnn(const Tensor& x) const { return head(mean(conv_body(x), 2)); }

    Tensor forward_tcn(const Tensor& x) const {
        const std::size_t T = spec_.length;
        auto last = slice(conv_body(x), 2, T - 1, T);  // (N, H, 1)
        return head(reshape(last, {last.dim(0), last.dim(1)}));
    }

    ModelSpec spec_;
    ParameterSet params_;
    TrainingRecord record_;
};

namespace detail {

inline Tensor uniform_init(std::mt19937_64& rng, Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    std::vector<double> v(numel(shape));
    for (auto& e : v) e = u(rng);
    return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace detail

/// Fresh classifier with U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights drawn from spec.seed.
inline Classifier build(const ModelSpec& spec) {
    spec.validate();
    auto rng = detail::make_stream(spec.seed, 11);
    ParameterSet ps;
    const std::size_t H = spec.hidden, M = spec.channels, C = static_cast<std::size_t>(spec.classes);
    auto add_linear = [&](const std::string& name, std::size_t in, std::size_t out) {
        ps.add(name + ".Wx", detail::uniform_init(rng, {in, out}, in));
    };
    std::size_t feat = H;
    switch (spec.arch) {
        case Architecture::BiRNN:
            for (std::size_t l = 0; l < spec.layers; ++l) {
                const std::size_t in = l == 0 ? M : 2 * H;
                for (const char* dir : {"fwd", "bwd"}) {
                    const std::string s = "rnn" + std::to_string(l) + "." + dir;
                    add_linear(s, in, H);
                    ps.add(s + ".Wh", detail::uniform_init(rng, {H, H}, H));
                    ps.add(s + ".b", detail::uniform_init(rng, {H}, H));
                }
            }
            feat = 2 * H;
            break;
        case Architecture::LSTM:
            for (std::size_t l = 0; l < spec.layers; ++l) {
                const std::string s = "lstm" + std::to_string(l);
                add_linear(s, l == 0 ? M : H, 4 * H);
                ps.add(s + ".Wh", detail::uniform_init(rng, {H, 4 * H}, H));
                ps.add(s + ".b", detail::uniform_init(rng, {4 * H}, H));
            }
            break;
        case Architecture::CNN:
            for (std::size_t l = 0; l < spec.layers; ++l) {
                const std::size_t in = l == 0 ? M : H;
                const std::string s = "conv" + std::to_string(l);
                ps.add(s + ".W", detail::uniform_init(rng, {H, in, spec.kernel}, in * spec.kernel));
                ps.add(s + ".b", detail::uniform_init(rng, {H}, in * spec.kernel));
            }
            break;
        case Architecture::TCN:
            for (std::size_t l = 0; l < spec.dilations.size(); ++l) {
                const std::size_t in = l == 0 ? M : H;
                const std::string s = "block" + std::to_string(l);
                ps.add(s + ".W", detail::uniform_init(rng, {H, in, spec.kernel}, in * spec.kernel));
                ps.add(s + ".b", detail::uniform_init(rng, {H}, in * spec.kernel));
                if (in != H) {
                    ps.add(s + ".down.W", detail::uniform_init(rng, {H, in, 1}, in));
                    ps.add(s + ".down.b", detail::uniform_init(rng, {H}, in));
                }
            }
            break;
    }
    ps.add(Classifier::head_weight, detail::uniform_init(rng, {feat, C}, feat));
    ps.add(Classifier::head_bias, detail::uniform_init(rng, {C}, feat));
    return Classifier(spec, std::move(ps));
}

/// Re-draws the classification head from `seed`, leaving the body intact.
inline void reinit_head(Classifier& model, std::uint64_t seed) {
    auto rng = detail::make_stream(seed, 13);
    auto& W = model.params()[Classifier::head_weight];
    auto& b = model.params()[Classifier::head_bias];
    const std::size_t fan_in = W.dim(0);
    auto fresh_w = detail::uniform_init(rng, W.shape(), fan_in);
    auto fresh_b = detail::uniform_init(rng, b.shape(), fan_in);
    std::copy(fresh_w.values().begin(), fresh_w.values().end(), W.mutable_values().begin());
    std::copy(fresh_b.values().begin(), fresh_b.values().end(), b.mutable_values().begin());
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
    int max_epochs = 100;
    std::size_t batch_size = 32;
    int patience = 10;
    double min_delta = 1e-4;
    std::optional<OptimizerConfig> optimizer;  // default per architecture
    double clip_norm = 0.0;                    // 0 disables clipping
    std::uint64_t seed = 0;
    std::function<void(Classifier&)> after_step;  // e.g. re-applies a pruning mask
};

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json j = {{"max_epochs", c.max_epochs}, {"batch_size", c.batch_size}, {"patience", c.patience},
                        {"min_delta", c.min_delta},   {"clip_norm", c.clip_norm},   {"seed", c.seed}};
    if (c.optimizer) j["optimizer"] = {{"kind", to_string(c.optimizer->kind)}, {"lr", c.optimizer->lr}};
    return j;
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.patience = j.value("patience", c.patience);
    c.min_delta = j.value("min_delta", c.min_delta);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.seed = j.value("seed", c.seed);
    if (j.contains("optimizer")) {
        const auto& o = j.at("optimizer");
        OptimizerConfig oc;
        oc.kind = optimizer_from_string(o.at("kind").get<std::string>());
        oc.lr = o.at("lr").get<double>();
        c.optimizer = oc;
    }
    if (c.batch_size == 0) throw ValidationError("train config: batch_size must be positive");
    if (c.patience < 1) throw ValidationError("train config: patience must be at least 1");
    if (c.clip_norm < 0.0) throw ValidationError("train config: clip_norm must be non-negative");
    return c;
}

/// Minimizes mean cross entropy over shuffled minibatches. Stops after
/// `patience` consecutive epochs improving by less than `min_delta`, then
/// restores the parameters of the lowest-loss epoch.
inline TrainingRecord train(Classifier& model, const TimeSeriesDataset& data, const TrainConfig& cfg = {}) {
    if (data.empty()) throw ContractError("train: empty dataset");
    if (data.length != model.spec().length || data.channels != model.spec().channels)
        throw ShapeError("train: dataset shape does not match model input");
    for (int y : data.labels)
        if (y < 0 || y >= model.spec().classes) throw ContractError("train: label outside model classes");
    if (cfg.batch_size == 0) throw ContractError("train: batch size must be positive");

    TrainingRecord rec;
    if (cfg.max_epochs <= 0) return rec;

    auto& params = model.params();
    Optimizer opt(params, cfg.optimizer.value_or(default_optimizer(model.spec().arch)));
    auto rng = detail::make_stream(cfg.seed, 17);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    ParameterSet best = params.clone();
    int stale = 0;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        try {
            for (std::size_t lo = 0; lo < order.size(); lo += cfg.batch_size) {
                std::span<const std::size_t> idx(order.data() + lo, std::min(cfg.batch_size, order.size() - lo));
                auto y = data.labels_of(idx);
                auto loss = mean(cross_entropy_per_sample(model.forward(data.batch(idx)), y));
                if (!std::isfinite(loss.item())) throw NumericError("non-finite loss");
                total += loss.item() * static_cast<double>(idx.size());
                backward(loss);
                if (cfg.clip_norm > 0.0) params.clip_grad_norm(cfg.clip_norm);
                opt.step(true);
                if (cfg.after_step) cfg.after_step(model);
            }
        } catch (const NumericError& e) {
            Tape::current().clear();
            params.zero_grad();
            throw TrainingError(std::string("training diverged: ") + e.what(), epoch);
        }
        const double epoch_loss = total / static_cast<double>(data.size());
        rec.loss_curve.push_back(epoch_loss);
        rec.epochs_run = epoch + 1;
        if (epoch_loss < rec.best_loss) {
            stale = rec.best_loss - epoch_loss >= cfg.min_delta ? 0 : stale + 1;
            rec.best_loss = epoch_loss;
            best.assign(params);
        } else {
            ++stale;
        }
        if (stale >= cfg.patience) break;
    }
    params.assign(best);
    auto& mr = model.record();
    mr.epochs_run += rec.epochs_run;
    mr.best_loss = rec.best_loss;
    mr.loss_curve.insert(mr.loss_curve.end(), rec.loss_curve.begin(), rec.loss_curve.end());
    return rec;
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON with the spec block and named flat parameter arrays.

inline nlohmann::json checkpoint_json(const Classifier& model) {
    nlohmann::json params = nlohmann::json::object();
    const auto& ps = model.params();
    for (std::size_t i = 0; i < ps.size(); ++i) {
        const auto& t = ps.tensors()[i];
        params[ps.names()[i]] = {{"shape", t.shape()},
                                 {"values", std::vector<double>(t.values().begin(), t.values().end())}};
    }
    nlohmann::json order = ps.names();
    return {{"format", "freqback-checkpoint-v1"},
            {"spec", to_json(model.spec())},
            {"order", order},
            {"params", params},
            {"epochs_run", model.record().epochs_run},
            {"loss_curve", model.record().loss_curve}};
}

inline Classifier classifier_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "freqback-checkpoint-v1") throw SchemaError("checkpoint: unknown format");
    auto spec = model_spec_from_json(j.at("spec"));
    auto model = build(spec);
    ParameterSet loaded;
    for (const auto& name : j.at("order")) {
        const auto& e = j.at("params").at(name.get<std::string>());
        loaded.add(name.get<std::string>(),
                   Tensor(e.at("shape").get<Shape>(), e.at("values").get<std::vector<double>>(), true));
    }
    model.params().assign(loaded);
    model.record().epochs_run = j.value("epochs_run", 0);
    model.record().loss_curve = j.value("loss_curve", std::vector<double>{});
    return model;
}

inline void save_checkpoint(const Classifier& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f << checkpoint_json(model).dump() << '\n';
}

inline Classifier load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "'");
    return classifier_from_json(nlohmann::json::parse(f));
}

}  // namespace freqback
