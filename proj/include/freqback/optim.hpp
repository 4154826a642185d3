#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "freqback/autodiff.hpp"

namespace freqback {

/// Named trainable tensors in insertion order.
class ParameterSet {
public:
    Tensor& add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw ContractError("duplicate parameter name '" + name + "'");
        t.set_requires_grad(true);
        index_[name] = tensors_.size();
        names_.push_back(name);
        tensors_.push_back(std::move(t));
        return tensors_.back();
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }
    Tensor& operator[](const std::string& name) { return tensors_.at(lookup(name)); }
    const Tensor& operator[](const std::string& name) const { return tensors_.at(lookup(name)); }

    std::size_t size() const noexcept { return tensors_.size(); }
    const std::vector<std::string>& names() const noexcept { return names_; }
    std::vector<Tensor>& tensors() noexcept { return tensors_; }
    const std::vector<Tensor>& tensors() const noexcept { return tensors_; }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }

    void zero_grad() {
        for (auto& t : tensors_) t.zero_grad();
    }

    /// Deep copy: new leaves with copied values.
    ParameterSet clone() const {
        ParameterSet out;
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            const auto& t = tensors_[i];
            out.add(names_[i], Tensor(t.shape(), {t.values().begin(), t.values().end()}, true));
        }
        return out;
    }

    /// Overwrites values from another set with identical names and shapes.
    void assign(const ParameterSet& other) {
        if (other.names_ != names_) throw ContractError("parameter sets differ in names");
        for (std::size_t i = 0; i < tensors_.size(); ++i) {
            if (tensors_[i].shape() != other.tensors_[i].shape())
                throw ShapeError("parameter '" + names_[i] + "' changed shape");
            auto src = other.tensors_[i].values();
            std::copy(src.begin(), src.end(), tensors_[i].mutable_values().begin());
        }
    }

    /// Clips the global gradient L2 norm; returns the norm before clipping.
    double clip_grad_norm(double max_norm) {
        double sq = 0.0;
        for (const auto& t : tensors_)
            for (double g : t.grad()) sq += g * g;
        double norm = std::sqrt(sq);
        if (max_norm > 0.0 && norm > max_norm) {
            double s = max_norm / norm;
            for (auto& t : tensors_)
                if (t.has_grad())
                    for (double& g : t.mutable_grad()) g *= s;
        }
        return norm;
    }

private:
    std::size_t lookup(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("unknown parameter '" + name + "'");
        return it->second;
    }

    std::vector<std::string> names_;
    std::vector<Tensor> tensors_;
    std::map<std::string, std::size_t> index_;
};

enum class OptimizerKind { SGD, Adam, RMSProp };

inline std::string to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::SGD: return "sgd";
        case OptimizerKind::Adam: return "adam";
        case OptimizerKind::RMSProp: return "rmsprop";
    }
    return "?";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "sgd") return OptimizerKind::SGD;
    if (s == "adam") return OptimizerKind::Adam;
    if (s == "rmsprop") return OptimizerKind::RMSProp;
    throw ValidationError("optimizer: unknown kind '" + s + "'");
}

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    double lr = 0.003;
    double beta1 = 0.9;    // Adam
    double beta2 = 0.999;  // Adam
    double alpha = 0.99;   // RMSProp smoothing
    double eps = 1e-8;

    static OptimizerConfig sgd(double lr) { return {OptimizerKind::SGD, lr}; }
    static OptimizerConfig adam(double lr = 0.003) { return {OptimizerKind::Adam, lr}; }
    static OptimizerConfig rmsprop(double lr = 0.002) { return {OptimizerKind::RMSProp, lr}; }
};

/// Textbook SGD / Adam / RMSProp over a ParameterSet. State is keyed by
/// parameter position, so the set must not change after construction.
class Optimizer {
public:
    Optimizer(ParameterSet& params, OptimizerConfig cfg) : params_(&params), cfg_(cfg) {
        for (const auto& t : params.tensors()) {
            m_.emplace_back(t.size(), 0.0);
            v_.emplace_back(t.size(), 0.0);
        }
    }

    const OptimizerConfig& config() const noexcept { return cfg_; }
    long steps() const noexcept { return step_; }

    /// Applies one update and zeroes gradients. Every parameter must carry a
    /// gradient unless allow_missing is set (missing ones are treated as zero).
    void step(bool allow_missing = false) {
        auto& ts = params_->tensors();
        if (!allow_missing) {
            for (std::size_t i = 0; i < ts.size(); ++i)
                if (!ts[i].has_grad())
                    throw ContractError("step: parameter '" + params_->names()[i] + "' has no gradient");
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < ts.size(); ++i) {
            if (!ts[i].has_grad()) continue;
            auto w = ts[i].mutable_values();
            auto g = ts[i].grad();
            auto& m = m_[i];
            auto& v = v_[i];
            switch (cfg_.kind) {
                case OptimizerKind::SGD:
                    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= cfg_.lr * g[j];
                    break;
                case OptimizerKind::Adam:
                    for (std::size_t j = 0; j < w.size(); ++j) {
                        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
                        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                        w[j] -= cfg_.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg_.eps);
                    }
                    break;
                case OptimizerKind::RMSProp:
                    for (std::size_t j = 0; j < w.size(); ++j) {
                        v[j] = cfg_.alpha * v[j] + (1.0 - cfg_.alpha) * g[j] * g[j];
                        w[j] -= cfg_.lr * g[j] / (std::sqrt(v[j]) + cfg_.eps);
                    }
                    break;
            }
        }
        params_->zero_grad();
    }

private:
    ParameterSet* params_;
    OptimizerConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long step_ = 0;
};

}  // namespace freqback
