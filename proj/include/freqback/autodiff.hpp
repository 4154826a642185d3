#pragma once

// Dense f64 tensors with define-by-run reverse-mode differentiation.
//
// Every operation whose inputs require gradients appends an entry to the
// calling thread's Tape. backward() replays that tape in reverse recording
// order and then clears it.

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "freqback/error.hpp"

namespace freqback {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
    os << ')';
    return os.str();
}

namespace detail {

struct Node {
    std::uint64_t id;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return counter.fetch_add(1, std::memory_order_relaxed);
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

}  // namespace detail

class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        if (numel(shape) != values.size()) {
            throw ShapeError("tensor shape " + freqback::to_string(shape) + " holds " +
                             std::to_string(numel(shape)) + " values, got " +
                             std::to_string(values.size()));
        }
        node_->id = detail::next_node_id();
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        auto n = numel(shape);
        return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor({}, {v}, requires_grad);
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::uint64_t id() const { return node_->id; }

    std::span<const double> values() const { return node_->value; }
    /// Mutable access for leaf parameters (optimizer updates, pruning).
    std::span<double> mutable_values() { return node_->value; }
    double item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + freqback::to_string(shape()));
        return node_->value[0];
    }
    double operator[](std::size_t i) const { return node_->value[i]; }

    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }
    bool has_grad() const noexcept { return node_ && !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    /// Same values, fresh identity, never recorded.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    detail::Node& node() const { return *node_; }
    const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

private:
    std::shared_ptr<detail::Node> node_;
};

class Tape {
public:
    struct Entry {
        std::vector<std::uint64_t> input_ids;
        std::uint64_t output_id;
        std::shared_ptr<detail::Node> output;
        std::function<void(const detail::Node&)> backward;
    };

    static Tape& current() {
        thread_local Tape tape;
        return tape;
    }

    bool recording() const noexcept { return enabled_; }
    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    const std::vector<Entry>& entries() const noexcept { return entries_; }
    void clear() { entries_.clear(); }

    void record(std::vector<std::uint64_t> inputs, std::shared_ptr<detail::Node> output,
                std::function<void(const detail::Node&)> fn) {
        auto id = output->id;
        entries_.push_back({std::move(inputs), id, std::move(output), std::move(fn)});
    }

    /// Replays recorded operations in reverse order.
    void replay() {
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
            if (it->output->grad.empty()) continue;
            it->backward(*it->output);
        }
        entries_.clear();
    }

private:
    friend class NoGradGuard;
    bool enabled_ = true;
    std::vector<Entry> entries_;
};

/// Disables recording on this thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : prev_(Tape::current().enabled_) { Tape::current().enabled_ = false; }
    ~NoGradGuard() { Tape::current().enabled_ = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

inline void backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw ContractError("backward requires a scalar loss, got shape " + to_string(loss.shape()));
    }
    auto& tape = Tape::current();
    if (!loss.requires_grad()) {
        // Nothing depends on a differentiable leaf.
        tape.clear();
        return;
    }
    if (tape.empty()) throw ContractError("backward called on an empty tape");
    loss.node().ensure_grad()[0] += 1.0;
    tape.replay();
}

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
    // v * 0 is NaN exactly when v is NaN or infinite.
    auto v = t.values();
    double acc[4] = {0.0, 0.0, 0.0, 0.0};
    std::size_t i = 0;
    for (; i + 4 <= v.size(); i += 4)
        for (std::size_t k = 0; k < 4; ++k) acc[k] += v[i + k] * 0.0;
    for (; i < v.size(); ++i) acc[0] += v[i] * 0.0;
    if (std::isnan(acc[0] + acc[1] + acc[2] + acc[3])) {
        throw NumericError(std::string(op) + ": non-finite input value");
    }
}

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
    if (!Tape::current().recording()) return false;
    return std::any_of(ts.begin(), ts.end(), [](const Tensor* t) { return t->requires_grad(); });
}

/// Creates the output tensor and, when needed, records its backward rule.
template <class Fn>
Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<const Tensor*> inputs,
                   Fn&& fn) {
    bool rg = any_requires_grad(inputs);
    Tensor out(std::move(shape), std::move(values), rg);
    if (rg) {
        std::vector<std::uint64_t> ids;
        ids.reserve(inputs.size());
        for (auto* t : inputs)
            if (t->defined()) ids.push_back(t->id());
        Tape::current().record(std::move(ids), out.node_ptr(), std::forward<Fn>(fn));
    }
    return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " +
                         to_string(b.shape()) + " do not conform");
    }
}

inline void accumulate(const std::shared_ptr<Node>& n, std::span<const double> g, double scale = 1.0) {
    if (!n->requires_grad) return;
    if (n->grad.empty() && scale == 1.0) {
        n->grad.assign(g.begin(), g.end());
        return;
    }
    n->ensure_grad();
    auto& dst = n->grad;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * g[i];
}

template <class F, class DF>
Tensor unary(const Tensor& x, const char* name, F f, DF df) {
    check_finite(x, name);
    std::vector<double> out(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
    auto xn = x.node_ptr();
    return make_result(x.shape(), std::move(out), {&x}, [xn, df](const Node& o) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * df(xn->value[i], o.value[i]);
    });
}

/// (outer, axis, inner) decomposition of a shape around one axis.
struct AxisSplit {
    std::size_t outer, axis, inner;
};

inline AxisSplit split_at(const Shape& s, std::size_t axis) {
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(s));
    AxisSplit r{1, s[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    detail::check_finite(a, "add");
    detail::check_finite(b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    auto an = a.node_ptr(), bn = b.node_ptr();
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](const detail::Node& o) {
        detail::accumulate(an, o.grad);
        detail::accumulate(bn, o.grad);
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    detail::check_finite(a, "sub");
    detail::check_finite(b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    auto an = a.node_ptr(), bn = b.node_ptr();
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](const detail::Node& o) {
        detail::accumulate(an, o.grad);
        detail::accumulate(bn, o.grad, -1.0);
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    detail::check_finite(a, "mul");
    detail::check_finite(b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    auto an = a.node_ptr(), bn = b.node_ptr();
    return detail::make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](const detail::Node& o) {
        if (an->requires_grad) {
            auto& g = an->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->value[i];
        }
    });
}

inline Tensor scale(const Tensor& x, double s) {
    return detail::unary(x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Tensor neg(const Tensor& x) { return scale(x, -1.0); }

inline Tensor square(const Tensor& x) {
    return detail::unary(x, "square", [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

/// |x| with subgradient 0 at the kink.
inline Tensor abs(const Tensor& x) {
    return detail::unary(
        x, "abs", [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

/// Square root of a nonnegative input; the gradient is infinite at 0.
inline Tensor sqrt(const Tensor& x) {
    return detail::unary(
        x, "sqrt",
        [](double v) {
            if (v < 0.0) throw NumericError("sqrt: negative input");
            return std::sqrt(v);
        },
        [](double, double y) { return 0.5 / y; });
}

inline Tensor tanh(const Tensor& x) {
    return detail::unary(
        x, "tanh", [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
    return detail::unary(
        x, "sigmoid",
        [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(const Tensor& x) {
    return detail::unary(
        x, "relu", [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// x (..., K) + b (K), broadcasting b over leading dimensions.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() == 0 || b.rank() != 1 || x.shape().back() != b.dim(0)) {
        throw ShapeError("add_bias: shapes " + to_string(x.shape()) + " and " + to_string(b.shape()) +
                         " do not conform");
    }
    detail::check_finite(x, "add_bias");
    detail::check_finite(b, "add_bias");
    const std::size_t k = b.dim(0), rows = x.size() / k;
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < k; ++j) out[r * k + j] = x[r * k + j] + b[j];
    auto xn = x.node_ptr(), bn = b.node_ptr();
    return detail::make_result(x.shape(), std::move(out), {&x, &b}, [xn, bn, k, rows](const detail::Node& o) {
        detail::accumulate(xn, o.grad);
        if (bn->requires_grad) {
            auto& g = bn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < k; ++j) g[j] += o.grad[r * k + j];
        }
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " do not conform");
    }
    detail::check_finite(a, "matmul");
    detail::check_finite(b, "matmul");
    const auto n = a.dim(0), k = a.dim(1), m = b.dim(1);
    std::vector<double> out(n * m);
    detail::ConstMapMat A(a.values().data(), n, k), B(b.values().data(), k, m);
    detail::MapMat C(out.data(), n, m);
    C.noalias() = A * B;
    auto an = a.node_ptr(), bn = b.node_ptr();
    return detail::make_result({n, m}, std::move(out), {&a, &b}, [an, bn, n, k, m](const detail::Node& o) {
        detail::ConstMapMat G(o.grad.data(), n, m);
        if (an->requires_grad) {
            detail::MapMat dA(an->ensure_grad().data(), n, k);
            detail::ConstMapMat B(bn->value.data(), k, m);
            dA.noalias() += G * B.transpose();
        }
        if (bn->requires_grad) {
            detail::MapMat dB(bn->ensure_grad().data(), k, m);
            detail::ConstMapMat A(an->value.data(), n, k);
            dB.noalias() += A.transpose() * G;
        }
    });
}

struct Conv1dOptions {
    std::size_t stride = 1;
    std::size_t dilation = 1;
    std::size_t pad_left = 0;
    std::size_t pad_right = 0;
};

/// x (N, Cin, L), w (Cout, Cin, K), optional bias (Cout) -> (N, Cout, Lout).
/// Zero padding; computed through an explicit im2col buffer.
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv1dOptions opt = {}) {
    if (x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(1)) {
        throw ShapeError("conv1d: input " + to_string(x.shape()) + " and kernel " + to_string(w.shape()) +
                         " do not conform");
    }
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0))) {
        throw ShapeError("conv1d: bias " + to_string(bias.shape()) + " and kernel " + to_string(w.shape()) +
                         " do not conform");
    }
    if (opt.stride == 0 || opt.dilation == 0) throw ContractError("conv1d: stride and dilation must be >= 1");
    detail::check_finite(x, "conv1d");
    detail::check_finite(w, "conv1d");
    if (bias.defined()) detail::check_finite(bias, "conv1d");

    const std::size_t n = x.dim(0), cin = x.dim(1), len = x.dim(2);
    const std::size_t cout = w.dim(0), ks = w.dim(2);
    const std::size_t span_len = opt.dilation * (ks - 1) + 1;
    const std::size_t padded = len + opt.pad_left + opt.pad_right;
    if (padded < span_len) {
        throw ShapeError("conv1d: kernel span " + std::to_string(span_len) + " exceeds padded length " +
                         std::to_string(padded));
    }
    const std::size_t lout = (padded - span_len) / opt.stride + 1;
    const std::size_t rows = cin * ks;

    // col[(c*K + k), j] = x[c, j*stride + k*dilation - pad_left] (zero outside)
    auto build_cols = [=](const double* xs, std::vector<double>& col) {
        col.assign(rows * lout, 0.0);
        for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t k = 0; k < ks; ++k)
                for (std::size_t j = 0; j < lout; ++j) {
                    auto pos = static_cast<std::ptrdiff_t>(j * opt.stride + k * opt.dilation) -
                               static_cast<std::ptrdiff_t>(opt.pad_left);
                    if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len))
                        col[(c * ks + k) * lout + j] = xs[c * len + pos];
                }
    };

    std::vector<double> out(n * cout * lout);
    std::vector<double> col;
    detail::ConstMapMat W(w.values().data(), cout, rows);
    for (std::size_t s = 0; s < n; ++s) {
        build_cols(x.values().data() + s * cin * len, col);
        detail::ConstMapMat Col(col.data(), rows, lout);
        detail::MapMat Y(out.data() + s * cout * lout, cout, lout);
        Y.noalias() = W * Col;
        if (bias.defined())
            for (std::size_t c = 0; c < cout; ++c) Y.row(c).array() += bias[c];
    }

    auto xn = x.node_ptr(), wn = w.node_ptr();
    auto bn = bias.defined() ? bias.node_ptr() : nullptr;
    Tensor none;
    return detail::make_result(
        {n, cout, lout}, std::move(out), {&x, &w, bias.defined() ? &bias : &none},
        [=](const detail::Node& o) {
            std::vector<double> col, dcol(rows * lout);
            detail::ConstMapMat W(wn->value.data(), cout, rows);
            for (std::size_t s = 0; s < n; ++s) {
                detail::ConstMapMat G(o.grad.data() + s * cout * lout, cout, lout);
                if (wn->requires_grad) {
                    build_cols(xn->value.data() + s * cin * len, col);
                    detail::ConstMapMat Col(col.data(), rows, lout);
                    detail::MapMat dW(wn->ensure_grad().data(), cout, rows);
                    dW.noalias() += G * Col.transpose();
                }
                if (bn && bn->requires_grad) {
                    auto& gb = bn->ensure_grad();
                    for (std::size_t c = 0; c < cout; ++c) gb[c] += G.row(c).sum();
                }
                if (xn->requires_grad) {
                    detail::MapMat dCol(dcol.data(), rows, lout);
                    dCol.noalias() = W.transpose() * G;
                    auto& gx = xn->ensure_grad();
                    double* dst = gx.data() + s * cin * len;
                    for (std::size_t c = 0; c < cin; ++c)
                        for (std::size_t k = 0; k < ks; ++k)
                            for (std::size_t j = 0; j < lout; ++j) {
                                auto pos = static_cast<std::ptrdiff_t>(j * opt.stride + k * opt.dilation) -
                                           static_cast<std::ptrdiff_t>(opt.pad_left);
                                if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(len))
                                    dst[c * len + pos] += dcol[(c * ks + k) * lout + j];
                            }
                }
            }
        });
}

inline Tensor conv1d(const Tensor& x, const Tensor& w, Conv1dOptions opt = {}) {
    return conv1d(x, w, Tensor{}, opt);
}

// ---------------------------------------------------------------------------
// Normalization and losses

/// Row-wise softmax over the last axis of a rank-2 tensor.
inline Tensor softmax(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("softmax: expected rank-2 input, got " + to_string(x.shape()));
    detail::check_finite(x, "softmax");
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<double> out(x.size());
    for (std::size_t r = 0; r < n; ++r) {
        const double* row = x.values().data() + r * c;
        double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (out[r * c + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < c; ++j) out[r * c + j] /= z;
    }
    auto xn = x.node_ptr();
    return detail::make_result(x.shape(), std::move(out), {&x}, [xn, n, c](const detail::Node& o) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t r = 0; r < n; ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += o.grad[r * c + j] * o.value[r * c + j];
            for (std::size_t j = 0; j < c; ++j) g[r * c + j] += o.value[r * c + j] * (o.grad[r * c + j] - dot);
        }
    });
}

/// Per-row cross entropy of logits (N, C) against integer labels -> (N).
inline Tensor cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("cross_entropy: logits " + to_string(logits.shape()) + " and " +
                         std::to_string(labels.size()) + " labels do not conform");
    }
    detail::check_finite(logits, "cross_entropy");
    const std::size_t n = logits.dim(0), c = logits.dim(1);
    std::vector<double> probs(n * c), out(n);
    std::vector<int> lab(labels.begin(), labels.end());
    for (std::size_t r = 0; r < n; ++r) {
        if (lab[r] < 0 || static_cast<std::size_t>(lab[r]) >= c) {
            throw ContractError("cross_entropy: label " + std::to_string(lab[r]) + " outside [0, " +
                                std::to_string(c) + ")");
        }
        const double* row = logits.values().data() + r * c;
        double mx = *std::max_element(row, row + c);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += (probs[r * c + j] = std::exp(row[j] - mx));
        for (std::size_t j = 0; j < c; ++j) probs[r * c + j] /= z;
        out[r] = -(row[lab[r]] - mx - std::log(z));
    }
    auto ln = logits.node_ptr();
    return detail::make_result({n}, std::move(out), {&logits},
                               [ln, n, c, probs = std::move(probs), lab = std::move(lab)](const detail::Node& o) {
                                   if (!ln->requires_grad) return;
                                   auto& g = ln->ensure_grad();
                                   for (std::size_t r = 0; r < n; ++r)
                                       for (std::size_t j = 0; j < c; ++j)
                                           g[r * c + j] += o.grad[r] * (probs[r * c + j] -
                                                                        (static_cast<int>(j) == lab[r] ? 1.0 : 0.0));
                               });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
    detail::check_finite(x, "sum");
    double s = 0.0;
    for (double v : x.values()) s += v;
    auto xn = x.node_ptr();
    return detail::make_result({}, {s}, {&x}, [xn](const detail::Node& o) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (auto& v : g) v += o.grad[0];
    });
}

inline Tensor mean(const Tensor& x) {
    if (x.size() == 0) throw ContractError("mean of an empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.size()));
}

/// Sum over one axis; that axis is removed from the shape.
inline Tensor sum(const Tensor& x, std::size_t axis) {
    detail::check_finite(x, "sum");
    auto sp = detail::split_at(x.shape(), axis);
    Shape shape = x.shape();
    shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
    std::vector<double> out(sp.outer * sp.inner, 0.0);
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t a = 0; a < sp.axis; ++a)
            for (std::size_t i = 0; i < sp.inner; ++i)
                out[o * sp.inner + i] += x[(o * sp.axis + a) * sp.inner + i];
    auto xn = x.node_ptr();
    return detail::make_result(std::move(shape), std::move(out), {&x}, [xn, sp](const detail::Node& o) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t ou = 0; ou < sp.outer; ++ou)
            for (std::size_t a = 0; a < sp.axis; ++a)
                for (std::size_t i = 0; i < sp.inner; ++i)
                    g[(ou * sp.axis + a) * sp.inner + i] += o.grad[ou * sp.inner + i];
    });
}

inline Tensor mean(const Tensor& x, std::size_t axis) {
    auto len = detail::split_at(x.shape(), axis).axis;
    return scale(sum(x, axis), 1.0 / static_cast<double>(len));
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (numel(shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    }
    auto xn = x.node_ptr();
    std::vector<double> out(x.values().begin(), x.values().end());
    return detail::make_result(std::move(shape), std::move(out), {&x},
                               [xn](const detail::Node& o) { detail::accumulate(xn, o.grad); });
}

/// Half-open range [begin, end) along one axis.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    auto sp = detail::split_at(x.shape(), axis);
    if (begin >= end || end > sp.axis) {
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") invalid for axis of length " + std::to_string(sp.axis));
    }
    const std::size_t w = end - begin;
    Shape shape = x.shape();
    shape[axis] = w;
    std::vector<double> out(sp.outer * w * sp.inner);
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(x.values().data() + (o * sp.axis + begin) * sp.inner, w * sp.inner,
                    out.data() + o * w * sp.inner);
    auto xn = x.node_ptr();
    return detail::make_result(std::move(shape), std::move(out), {&x}, [xn, sp, begin, w](const detail::Node& o) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t ou = 0; ou < sp.outer; ++ou) {
            double* dst = g.data() + (ou * sp.axis + begin) * sp.inner;
            const double* src = o.grad.data() + ou * w * sp.inner;
            for (std::size_t i = 0; i < w * sp.inner; ++i) dst[i] += src[i];
        }
    });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw ContractError("concat of zero tensors");
    Shape shape = parts[0].shape();
    detail::split_at(shape, axis);
    std::size_t total = 0;
    for (const auto& p : parts) {
        Shape a = p.shape(), b = shape;
        if (a.size() != b.size()) throw ShapeError("concat: rank mismatch " + to_string(a) + " vs " + to_string(b));
        a[axis] = b[axis] = 0;
        if (a != b) throw ShapeError("concat: shapes " + to_string(p.shape()) + " and " + to_string(shape) +
                                     " do not conform");
        total += p.dim(axis);
    }
    shape[axis] = total;
    auto sp = detail::split_at(shape, axis);
    std::vector<double> out(numel(shape));
    std::vector<std::shared_ptr<detail::Node>> nodes;
    std::vector<std::size_t> widths;
    bool rg = false;
    std::vector<std::uint64_t> ids;
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.dim(axis);
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(p.values().data() + o * w * sp.inner, w * sp.inner,
                        out.data() + (o * sp.axis + off) * sp.inner);
        off += w;
        nodes.push_back(p.node_ptr());
        widths.push_back(w);
        ids.push_back(p.id());
        rg = rg || p.requires_grad();
    }
    rg = rg && Tape::current().recording();
    Tensor result(std::move(shape), std::move(out), rg);
    if (rg) {
        Tape::current().record(std::move(ids), result.node_ptr(), [nodes, widths, sp](const detail::Node& o) {
            std::size_t off = 0;
            for (std::size_t k = 0; k < nodes.size(); ++k) {
                const std::size_t w = widths[k];
                if (nodes[k]->requires_grad) {
                    auto& g = nodes[k]->ensure_grad();
                    for (std::size_t ou = 0; ou < sp.outer; ++ou) {
                        const double* src = o.grad.data() + (ou * sp.axis + off) * sp.inner;
                        double* dst = g.data() + ou * w * sp.inner;
                        for (std::size_t i = 0; i < w * sp.inner; ++i) dst[i] += src[i];
                    }
                }
                off += w;
            }
        });
    }
    return result;
}

/// Swaps two axes of a tensor of any rank.
inline Tensor transpose(const Tensor& x, std::size_t a0, std::size_t a1) {
    const auto r = x.rank();
    if (a0 >= r || a1 >= r) throw ShapeError("transpose: axes out of range for " + to_string(x.shape()));
    Shape shape = x.shape();
    std::swap(shape[a0], shape[a1]);
    std::vector<std::size_t> in_stride(r, 1), out_stride(r, 1);
    for (std::size_t i = r; i-- > 1;) {
        in_stride[i - 1] = in_stride[i] * x.dim(i);
        out_stride[i - 1] = out_stride[i] * shape[i];
    }
    // Map each output linear index to the input linear index.
    std::vector<std::size_t> perm(x.size());
    std::vector<double> out(x.size());
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t lin = 0; lin < out.size(); ++lin) {
        std::size_t src = 0;
        for (std::size_t d = 0; d < r; ++d) {
            std::size_t d_in = d == a0 ? a1 : (d == a1 ? a0 : d);
            src += idx[d] * in_stride[d_in];
        }
        perm[lin] = src;
        out[lin] = x[src];
        for (std::size_t d = r; d-- > 0;) {
            if (++idx[d] < shape[d]) break;
            idx[d] = 0;
        }
    }
    auto xn = x.node_ptr();
    return detail::make_result(std::move(shape), std::move(out), {&x},
                               [xn, perm = std::move(perm)](const detail::Node& o) {
                                   if (!xn->requires_grad) return;
                                   auto& g = xn->ensure_grad();
                                   for (std::size_t i = 0; i < perm.size(); ++i) g[perm[i]] += o.grad[i];
                               });
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + to_string(x.shape()));
    return transpose(x, 0, 1);
}

/// out[i] = x[i, index[i]] for rank-2 x.
inline Tensor gather(const Tensor& x, std::span<const int> index) {
    if (x.rank() != 2 || x.dim(0) != index.size()) {
        throw ShapeError("gather: input " + to_string(x.shape()) + " with " + std::to_string(index.size()) +
                         " indices");
    }
    const std::size_t n = x.dim(0), c = x.dim(1);
    std::vector<int> idx(index.begin(), index.end());
    std::vector<double> out(n);
    for (std::size_t r = 0; r < n; ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= c)
            throw ShapeError("gather: index " + std::to_string(idx[r]) + " out of range");
        out[r] = x[r * c + idx[r]];
    }
    auto xn = x.node_ptr();
    return detail::make_result({n}, std::move(out), {&x}, [xn, c, idx = std::move(idx)](const detail::Node& o) {
        if (!xn->requires_grad) return;
        auto& g = xn->ensure_grad();
        for (std::size_t r = 0; r < idx.size(); ++r) g[r * c + idx[r]] += o.grad[r];
    });
}

}  // namespace freqback
