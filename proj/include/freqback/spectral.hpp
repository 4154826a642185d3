#pragma once

// Direct O(T^2) DFT pair, the symmetric cosine basis used to probe one band
// at a time, and model sensitivity heatmaps over (band, channel).
//
// Convention: forward transform scaled by 1/T, inverse unscaled, so that
// idft(dft(x)) == x. Under this convention sum |x|^2 == T * sum |X|^2.

#include <cmath>
#include <complex>
#include <concepts>
#include <functional>
#include <tuple>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "freqback/autodiff.hpp"
#include "freqback/data.hpp"
#include "freqback/util.hpp"

namespace freqback {

using Complex = std::complex<double>;

/// Complex coefficients of one channel, band-indexed 0..T-1.
struct Spectrum {
    std::vector<Complex> coeff;
    std::size_t size() const noexcept { return coeff.size(); }
};

namespace detail {

/// e^{-i 2 pi k / T} for k in [0, T).
inline std::vector<Complex> twiddles(std::size_t T) {
    std::vector<Complex> w(T);
    for (std::size_t k = 0; k < T; ++k) {
        double a = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(T);
        w[k] = {std::cos(a), std::sin(a)};
    }
    return w;
}

}  // namespace detail

inline Spectrum dft(std::span<const double> x) {
    const std::size_t T = x.size();
    if (T == 0) throw ContractError("dft: empty input");
    for (double v : x)
        if (!std::isfinite(v)) throw NumericError("dft: non-finite input value");
    auto w = detail::twiddles(T);
    Spectrum s{std::vector<Complex>(T)};
    for (std::size_t f = 0; f < T; ++f) {
        Complex acc{0.0, 0.0};
        for (std::size_t t = 0; t < T; ++t) acc += x[t] * w[(t * f) % T];
        s.coeff[f] = acc / static_cast<double>(T);
    }
    return s;
}

/// Inverse of dft(). Imaginary residue up to 1e-9 is discarded (with a
/// warning when the input is visibly non-Hermitian); more is a SymmetryError.
inline std::vector<double> idft(const Spectrum& spec) {
    const std::size_t T = spec.size();
    if (T == 0) throw ContractError("idft: empty spectrum");
    auto w = detail::twiddles(T);
    std::vector<double> out(T);
    double residue = 0.0;
    for (std::size_t t = 0; t < T; ++t) {
        Complex acc{0.0, 0.0};
        for (std::size_t f = 0; f < T; ++f) acc += spec.coeff[f] * std::conj(w[(t * f) % T]);
        out[t] = acc.real();
        residue = std::max(residue, std::abs(acc.imag()));
    }
    if (residue > 1e-9) {
        throw SymmetryError("idft: spectrum is not Hermitian (imaginary residue " + std::to_string(residue) + ")");
    }
    double asym = 0.0, scale = 0.0;
    for (std::size_t f = 0; f < T; ++f) {
        asym = std::max(asym, std::abs(spec.coeff[f] - std::conj(spec.coeff[(T - f) % T])));
        scale = std::max(scale, std::abs(spec.coeff[f]));
    }
    if (asym > 1e-12 * std::max(1.0, scale)) {
        warn("idft: discarded imaginary residue " + std::to_string(residue) + " from a non-Hermitian spectrum");
    }
    return out;
}

/// T unit-norm temporal probes; probe t is the inverse transform of spikes at
/// bands t and (T - t) mod T, i.e. a pure cosine at band t.
struct FrequencyBasis {
    std::size_t length = 0;
    std::vector<double> vectors;  // row t holds U_t

    std::span<const double> operator[](std::size_t t) const {
        return std::span<const double>(vectors).subspan(t * length, length);
    }

    /// (T, T) constant tensor with U_t in row t.
    Tensor as_tensor() const { return Tensor({length, length}, vectors); }
};

inline FrequencyBasis build_basis(std::size_t T) {
    if (T < 2) throw ContractError("build_basis: T must be at least 2");
    FrequencyBasis basis{T, std::vector<double>(T * T)};
    for (std::size_t t = 0; t < T; ++t) {
        Spectrum spikes{std::vector<Complex>(T)};
        spikes.coeff[t] = 1.0;
        spikes.coeff[(T - t) % T] = 1.0;
        auto u = idft(spikes);
        double norm = 0.0;
        for (double v : u) norm += v * v;
        norm = std::sqrt(norm);
        for (std::size_t n = 0; n < T; ++n) basis.vectors[t * T + n] = u[n] / norm;
    }
    return basis;
}

/// Per-(band, channel) sensitivity of one model on one sample set.
struct FrequencyHeatmap {
    Matrix scores;  // T x M
    double lambda = 0.3;
    std::string model_fingerprint;
    std::string dataset_fingerprint;

    std::size_t bands() const noexcept { return scores.rows; }
    std::size_t channels() const noexcept { return scores.cols; }
};

struct HeatmapOptions {
    double lambda = 0.3;
    std::size_t batch_size = 256;
};

/// Any callable mapping an (n, T, M) batch plus labels to n per-sample
/// cross-entropy losses, evaluated without recording.
template <class F>
concept PerSampleLoss = requires(F f, const Tensor& x, std::span<const int> y) {
    { f(x, y) } -> std::convertible_to<std::vector<double>>;
};

namespace detail {

template <PerSampleLoss F>
std::vector<double> batched_losses(F& loss, const TimeSeriesDataset& ds, std::size_t batch,
                                   const std::function<void(std::vector<double>&, std::size_t)>& perturb) {
    std::vector<double> out;
    out.reserve(ds.size());
    const std::size_t stride = ds.sample_stride();
    for (std::size_t lo = 0; lo < ds.size(); lo += batch) {
        const std::size_t hi = std::min(ds.size(), lo + batch);
        std::vector<double> xs(ds.values.begin() + static_cast<std::ptrdiff_t>(lo * stride),
                               ds.values.begin() + static_cast<std::ptrdiff_t>(hi * stride));
        if (perturb) perturb(xs, hi - lo);
        Tensor x({hi - lo, ds.length, ds.channels}, std::move(xs));
        auto ys = std::span<const int>(ds.labels).subspan(lo, hi - lo);
        auto l = loss(x, ys);
        if (l.size() != hi - lo) throw ShapeError("heatmap: loss callable returned wrong count");
        out.insert(out.end(), l.begin(), l.end());
    }
    return out;
}

}  // namespace detail

/// S[t, m] = mean over samples of loss(X + lambda * U_t on channel m) - loss(X).
/// U_t and U_{T-t} coincide, so each symmetric pair is evaluated once.
template <PerSampleLoss F>
FrequencyHeatmap estimate_heatmap(F&& loss, const TimeSeriesDataset& ds, const HeatmapOptions& opt = {},
                                  std::string model_fingerprint = {}) {
    if (ds.empty()) throw ContractError("estimate_heatmap: empty dataset");
    if (!(opt.lambda > 0.0)) throw ContractError("estimate_heatmap: lambda must be positive");
    NoGradGuard no_grad;
    const std::size_t T = ds.length, M = ds.channels;
    const auto basis = build_basis(T);
    const auto base = detail::batched_losses(loss, ds, opt.batch_size, nullptr);

    FrequencyHeatmap hm{Matrix(T, M), opt.lambda, std::move(model_fingerprint), ds.fingerprint()};
    for (std::size_t t = 0; t <= T / 2; ++t) {
        auto u = basis[t];
        for (std::size_t m = 0; m < M; ++m) {
            auto pert = detail::batched_losses(loss, ds, opt.batch_size, [&](std::vector<double>& xs, std::size_t n) {
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t k = 0; k < T; ++k) xs[(i * T + k) * M + m] += opt.lambda * u[k];
            });
            double acc = 0.0;
            for (std::size_t i = 0; i < ds.size(); ++i) acc += pert[i] - base[i];
            const double s = acc / static_cast<double>(ds.size());
            if (!std::isfinite(s)) throw NumericError("estimate_heatmap: non-finite sensitivity");
            hm.scores(t, m) = s;
            hm.scores((T - t) % T, m) = s;
        }
    }
    return hm;
}

/// Clamps negatives to zero, then scales each channel so its maximum is 1.
inline Matrix normalize_heatmap(const Matrix& s) {
    Matrix out = s;
    for (double v : s.data)
        if (!std::isfinite(v)) throw NumericError("normalize_heatmap: non-finite entry");
    for (std::size_t m = 0; m < s.cols; ++m) {
        double mx = 0.0;
        for (std::size_t t = 0; t < s.rows; ++t) {
            out(t, m) = std::max(0.0, s(t, m));
            mx = std::max(mx, out(t, m));
        }
        if (mx > 0.0)
            for (std::size_t t = 0; t < s.rows; ++t) out(t, m) /= mx;
    }
    return out;
}

inline Matrix clamp_nonnegative(const Matrix& s) {
    Matrix out = s;
    for (double& v : out.data) v = std::max(0.0, v);
    return out;
}

/// Mean over samples of |dft(trigger)| per band and channel. `triggers` is
/// (n, T, M) sample-major.
inline Matrix perturbation_scale(std::span<const double> triggers, std::size_t n, std::size_t T, std::size_t M) {
    if (n == 0) throw ContractError("perturbation_scale: empty trigger batch");
    if (triggers.size() != n * T * M) throw ShapeError("perturbation_scale: buffer does not match (n, T, M)");
    Matrix out(T, M);
    std::vector<double> ch(T);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t m = 0; m < M; ++m) {
            for (std::size_t t = 0; t < T; ++t) ch[t] = triggers[(i * T + t) * M + m];
            auto s = dft(ch);
            for (std::size_t t = 0; t < T; ++t) out(t, m) += std::abs(s.coeff[t]);
        }
    for (double& v : out.data) v /= static_cast<double>(n);
    return out;
}

// ---------------------------------------------------------------------------
// band,channel,value CSV

inline std::string matrix_to_csv(const Matrix& s) {
    std::string out = "band,channel,value\n";
    for (std::size_t t = 0; t < s.rows; ++t)
        for (std::size_t m = 0; m < s.cols; ++m)
            out += std::to_string(t) + ',' + std::to_string(m) + ',' + format_double(s(t, m)) + '\n';
    return out;
}

inline void write_matrix_csv(const Matrix& s, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "' for writing");
    f << matrix_to_csv(s);
}

inline Matrix parse_matrix_csv(std::istream& in) {
    std::string line;
    std::size_t lineno = 1;
    if (!std::getline(in, line) || line != "band,channel,value") throw ParseError("expected band,channel,value header", 1);
    std::vector<std::tuple<std::size_t, std::size_t, double>> rows;
    std::size_t T = 0, M = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto f = detail::split_csv(line);
        if (f.size() != 3) throw ParseError("expected 3 fields", lineno);
        auto t = detail::parse_number<long>(f[0], lineno, "band");
        auto m = detail::parse_number<long>(f[1], lineno, "channel");
        if (t < 0 || m < 0) throw ParseError("negative index", lineno);
        rows.emplace_back(t, m, detail::parse_number<double>(f[2], lineno, "value"));
        T = std::max<std::size_t>(T, t + 1);
        M = std::max<std::size_t>(M, m + 1);
    }
    if (rows.size() != T * M) throw SchemaError("matrix csv: missing (band, channel) cells");
    Matrix s(T, M);
    for (auto [t, m, v] : rows) s(t, m) = v;
    return s;
}

inline Matrix read_matrix_csv(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("cannot open '" + path + "'");
    return parse_matrix_csv(f);
}

}  // namespace freqback
