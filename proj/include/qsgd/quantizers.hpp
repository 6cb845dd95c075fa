/*
 * Copyright 2026 The qsgd-sim Authors.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "qsgd/spectrum.hpp"

namespace qsgd {

// Unbiased stochastic quantizers.
//
// The exact-model kinds realise the conditional error second moments
// exactly with two-point (Rademacher) noise:
//   multiplicative        (1 + sqrt(eps) s) x, one sign s for the vector -> eps x x^T
//   multiplicative_indep  (1 + sqrt(eps) s_i) x_i                       -> eps diag(x o x)
//   additive              x_i + sqrt(eps) s_i                           -> eps I
// The rounding kinds stochastically round onto a grid of spacing delta:
//   int_round  delta = 2^-b
//   fp_round   delta(x) = 2^(floor(log2 |x|) - m)
// No clipping or saturation is applied anywhere.

enum class QuantizerKind { identity, multiplicative, multiplicative_indep, additive, int_round, fp_round };

inline const char *to_string(QuantizerKind k) noexcept
{
    switch (k) {
    case QuantizerKind::identity:
        return "identity";
    case QuantizerKind::multiplicative:
        return "multiplicative";
    case QuantizerKind::multiplicative_indep:
        return "multiplicative_indep";
    case QuantizerKind::additive:
        return "additive";
    case QuantizerKind::int_round:
        return "int_round";
    case QuantizerKind::fp_round:
        return "fp_round";
    }
    return "identity";
}

inline std::optional<QuantizerKind> parse_quantizer_kind(std::string_view s)
{
    for (auto k : {QuantizerKind::identity, QuantizerKind::multiplicative, QuantizerKind::multiplicative_indep,
                   QuantizerKind::additive, QuantizerKind::int_round, QuantizerKind::fp_round})
        if (s == to_string(k))
            return k;
    return std::nullopt;
}

struct QuantizerSpec {
    QuantizerKind kind = QuantizerKind::identity;
    double epsilon = 0.0;
    int bits = 0;
    int mantissa_bits = 0;

    static QuantizerSpec identity() { return {}; }
    static QuantizerSpec multiplicative(double eps) { return {QuantizerKind::multiplicative, eps, 0, 0}; }
    static QuantizerSpec multiplicative_indep(double eps) { return {QuantizerKind::multiplicative_indep, eps, 0, 0}; }
    static QuantizerSpec additive(double eps) { return {QuantizerKind::additive, eps, 0, 0}; }
    static QuantizerSpec int_round(int b) { return {QuantizerKind::int_round, 0.0, b, 0}; }
    static QuantizerSpec fp_round(int m) { return {QuantizerKind::fp_round, 0.0, 0, m}; }

    /// True when application returns the input bit-exactly.
    bool is_identity() const noexcept
    {
        switch (kind) {
        case QuantizerKind::identity:
            return true;
        case QuantizerKind::multiplicative:
        case QuantizerKind::multiplicative_indep:
        case QuantizerKind::additive:
            return epsilon == 0.0;
        default:
            return false;
        }
    }

    bool is_multiplicative_family() const noexcept
    {
        return kind == QuantizerKind::multiplicative || kind == QuantizerKind::multiplicative_indep ||
               kind == QuantizerKind::fp_round;
    }

    bool is_additive_family() const noexcept
    {
        return kind == QuantizerKind::additive || kind == QuantizerKind::int_round;
    }

    void validate() const
    {
        switch (kind) {
        case QuantizerKind::multiplicative:
        case QuantizerKind::multiplicative_indep:
        case QuantizerKind::additive:
            if (!(epsilon >= 0.0) || !std::isfinite(epsilon))
                throw std::invalid_argument(std::string("quantizer ") + to_string(kind) + ": epsilon must be >= 0");
            break;
        case QuantizerKind::int_round:
            if (bits < 1)
                throw std::invalid_argument("quantizer int_round: bits must be >= 1");
            break;
        case QuantizerKind::fp_round:
            if (mantissa_bits < 0)
                throw std::invalid_argument("quantizer fp_round: mantissa_bits must be >= 0");
            break;
        case QuantizerKind::identity:
            break;
        }
    }

    /// Error level of the exact model this quantizer realises or
    /// approximates. Rounding kinds use the uniform-fractional-part average
    /// u(1-u) -> 1/6: int_round is ~additive with delta^2/6 and fp_round is
    /// ~multiplicative with 2^-2m/14 (value log-uniform within an octave).
    double effective_epsilon() const noexcept
    {
        switch (kind) {
        case QuantizerKind::multiplicative:
        case QuantizerKind::multiplicative_indep:
        case QuantizerKind::additive:
            return epsilon;
        case QuantizerKind::int_round:
            return std::ldexp(1.0, -2 * bits) / 6.0;
        case QuantizerKind::fp_round:
            return std::ldexp(1.0, -2 * mantissa_bits) / 14.0;
        case QuantizerKind::identity:
            break;
        }
        return 0.0;
    }

    friend bool operator==(const QuantizerSpec &, const QuantizerSpec &) = default;
};

/// Quantizers for the five sites of the update rule.
struct SiteQuantizers {
    QuantizerSpec data;
    QuantizerSpec label;
    QuantizerSpec param;
    QuantizerSpec activation;
    QuantizerSpec output_grad;

    static SiteQuantizers all(const QuantizerSpec &q) { return {q, q, q, q, q}; }

    bool all_identity() const noexcept
    {
        return data.is_identity() && label.is_identity() && param.is_identity() && activation.is_identity() &&
               output_grad.is_identity();
    }

    void validate() const
    {
        data.validate();
        label.validate();
        param.validate();
        activation.validate();
        output_grad.validate();
    }
};

/// Regime of the data site, which alone determines H^(q) and D.
inline Regime data_regime(const QuantizerSpec &q) noexcept
{
    if (q.is_identity())
        return Regime::none;
    return q.is_multiplicative_family() ? Regime::multiplicative : Regime::additive;
}

/// Geometry induced by the data-site quantizer. Exact for the model
/// kinds; the rounding kinds map onto their effective_epsilon().
inline QuantizedGeometry geometry_for(const ProblemSpec &spec, const QuantizerSpec &data)
{
    return quantized_geometry(spec, data_regime(data), data.effective_epsilon());
}

/// Spacing of the fp grid around x != 0: 2^(floor(log2|x|) - m).
inline double fp_grid_step(double x, int mantissa_bits) noexcept
{
    return std::ldexp(1.0, std::ilogb(x) - mantissa_bits);
}

/// Stochastic rounding onto multiples of delta (a power of two, so the
/// scaling below is exact). Returns x when x already lies on the grid.
template <class Rng>
double stochastic_round(double x, double delta, Rng &rng)
{
    const double lo = std::floor(x / delta) * delta;
    const double frac = (x - lo) / delta;
    if (frac == 0.0)
        return x;
    return rng.uniform() < frac ? lo + delta : lo;
}

/// Conditional variance of stochastic_round: (x - lo)(hi - x).
inline double rounding_variance(double x, double delta) noexcept
{
    const double lo = std::floor(x / delta) * delta;
    return (x - lo) * (lo + delta - x);
}

template <class Rng>
void quantize_multiplicative_inplace(std::span<double> x, double eps, Rng &rng)
{
    if (eps == 0.0)
        return;
    const double scale = 1.0 + std::sqrt(eps) * rng.sign();
    for (double &v : x)
        v *= scale;
}

template <class Rng>
void quantize_multiplicative_indep_inplace(std::span<double> x, double eps, Rng &rng)
{
    if (eps == 0.0)
        return;
    const double r = std::sqrt(eps);
    for (double &v : x)
        v *= 1.0 + r * rng.sign();
}

template <class Rng>
void quantize_additive_inplace(std::span<double> x, double eps, Rng &rng)
{
    if (eps == 0.0)
        return;
    const double r = std::sqrt(eps);
    for (double &v : x)
        v += r * rng.sign();
}

template <class Rng>
void quantize_int_round_inplace(std::span<double> x, int bits, Rng &rng)
{
    const double delta = std::ldexp(1.0, -bits);
    for (double &v : x)
        v = stochastic_round(v, delta, rng);
}

template <class Rng>
void quantize_fp_round_inplace(std::span<double> x, int mantissa_bits, Rng &rng)
{
    for (double &v : x)
        if (v != 0.0)
            v = stochastic_round(v, fp_grid_step(v, mantissa_bits), rng);
}

template <class Rng>
void quantize_inplace(const QuantizerSpec &q, std::span<double> x, Rng &rng)
{
    switch (q.kind) {
    case QuantizerKind::identity:
        return;
    case QuantizerKind::multiplicative:
        return quantize_multiplicative_inplace(x, q.epsilon, rng);
    case QuantizerKind::multiplicative_indep:
        return quantize_multiplicative_indep_inplace(x, q.epsilon, rng);
    case QuantizerKind::additive:
        return quantize_additive_inplace(x, q.epsilon, rng);
    case QuantizerKind::int_round:
        return quantize_int_round_inplace(x, q.bits, rng);
    case QuantizerKind::fp_round:
        return quantize_fp_round_inplace(x, q.mantissa_bits, rng);
    }
}

template <class Rng>
std::vector<double> quantize(const QuantizerSpec &q, std::span<const double> x, Rng &rng)
{
    std::vector<double> out(x.begin(), x.end());
    quantize_inplace(q, std::span<double>(out), rng);
    return out;
}

template <class Rng>
std::vector<double> quantize_multiplicative(std::span<const double> x, double eps, Rng &rng)
{
    return quantize(QuantizerSpec::multiplicative(eps), x, rng);
}

template <class Rng>
std::vector<double> quantize_multiplicative_indep(std::span<const double> x, double eps, Rng &rng)
{
    return quantize(QuantizerSpec::multiplicative_indep(eps), x, rng);
}

template <class Rng>
std::vector<double> quantize_additive(std::span<const double> x, double eps, Rng &rng)
{
    return quantize(QuantizerSpec::additive(eps), x, rng);
}

template <class Rng>
std::vector<double> quantize_int_round(std::span<const double> x, int bits, Rng &rng)
{
    if (bits < 1)
        throw std::invalid_argument("quantize_int_round: bits must be >= 1");
    return quantize(QuantizerSpec::int_round(bits), x, rng);
}

template <class Rng>
std::vector<double> quantize_fp_round(std::span<const double> x, int mantissa_bits, Rng &rng)
{
    if (mantissa_bits < 0)
        throw std::invalid_argument("quantize_fp_round: mantissa_bits must be >= 0");
    return quantize(QuantizerSpec::fp_round(mantissa_bits), x, rng);
}

/// Diagonal of E[(Q(x) - x)(Q(x) - x)^T | x].
inline double conditional_error_variance(const QuantizerSpec &q, double x) noexcept
{
    switch (q.kind) {
    case QuantizerKind::multiplicative:
    case QuantizerKind::multiplicative_indep:
        return q.epsilon * x * x;
    case QuantizerKind::additive:
        return q.epsilon;
    case QuantizerKind::int_round:
        return rounding_variance(x, std::ldexp(1.0, -q.bits));
    case QuantizerKind::fp_round:
        return x == 0.0 ? 0.0 : rounding_variance(x, fp_grid_step(x, q.mantissa_bits));
    case QuantizerKind::identity:
        break;
    }
    return 0.0;
}

/// Spectral norm of E[(Q(x) - x)(Q(x) - x)^T | x]. The shared-sign
/// multiplicative kind is rank one (eps ||x||^2); every other kind has a
/// diagonal conditional covariance.
inline double conditional_error_norm(const QuantizerSpec &q, std::span<const double> x) noexcept
{
    if (q.kind == QuantizerKind::multiplicative) {
        double s = 0.0;
        for (double v : x)
            s += v * v;
        return q.epsilon * s;
    }
    double m = 0.0;
    for (double v : x)
        m = std::max(m, conditional_error_variance(q, v));
    return m;
}

/// E[(Q_l(y) - y)^2] for the Gaussian label model of `spec`, where
/// E[y^2] = ||w*||_H^2 + noise_var. Rounding kinds use effective_epsilon().
inline double label_error_second_moment(const QuantizerSpec &q, const ProblemSpec &spec) noexcept
{
    if (q.is_identity())
        return 0.0;
    const double eps = q.effective_epsilon();
    if (q.is_multiplicative_family())
        return eps * (spec.signal_energy() + spec.noise_var);
    return eps;
}

/// (1/n) sum (Q(x) - x)(Q(x) - x)^T over n independent draws, row-major d x d.
template <class Rng>
std::vector<double> empirical_error_moment(const QuantizerSpec &q, std::span<const double> x, std::size_t n, Rng &rng)
{
    if (n < 1)
        throw std::invalid_argument("empirical_error_moment: n must be >= 1");
    const std::size_t d = x.size();
    std::vector<double> acc(d * d, 0.0);
    std::vector<double> buf(d), err(d);
    for (std::size_t k = 0; k < n; ++k) {
        std::copy(x.begin(), x.end(), buf.begin());
        quantize_inplace(q, std::span<double>(buf), rng);
        for (std::size_t i = 0; i < d; ++i)
            err[i] = buf[i] - x[i];
        for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j)
                acc[i * d + j] += err[i] * err[j];
    }
    for (double &v : acc)
        v /= static_cast<double>(n);
    return acc;
}

} // namespace qsgd
