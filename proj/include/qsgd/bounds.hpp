/*
 * Copyright 2026 The qsgd-sim Authors.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsgd/engine.hpp"
#include "qsgd/quantizers.hpp"
#include "qsgd/risk.hpp"
#include "qsgd/spectrum.hpp"

namespace qsgd {

struct Epsilons {
    double d = 0.0;
    double l = 0.0;
    double p = 0.0;
    double a = 0.0;
    double o = 0.0;

    bool all_zero() const noexcept { return d == 0.0 && l == 0.0 && p == 0.0 && a == 0.0 && o == 0.0; }
};

enum class BoundRegime { general, multiplicative, additive };

inline const char *to_string(BoundRegime r) noexcept
{
    switch (r) {
    case BoundRegime::multiplicative:
        return "multiplicative";
    case BoundRegime::additive:
        return "additive";
    case BoundRegime::general:
        break;
    }
    return "general";
}

/// Everything a bound evaluation needs. `geom` is only read by the
/// general bound; the regime-specific bounds rebuild their geometry from
/// eps.d. The last three fields feed the general effective noise.
struct BoundInputs {
    ProblemSpec spec;
    QuantizedGeometry geom;
    Epsilons eps;
    std::size_t N = 1;
    std::size_t B = 1;
    double gamma = 0.0;
    double alpha_B = 3.0;
    double sigma_sq = 0.0;

    double label_m2 = 0.0;    // E[e_l^2]
    double act_out_sup = 0.0; // sup_t ||E[e_o e_o^T|o] + E[e_a e_a^T|a]||
    double param_trace = 0.0; // E[tr(H^(q) e_p e_p^T)]

    void validate() const
    {
        spec.validate();
        if (geom.dim() != spec.dim())
            throw std::invalid_argument("BoundInputs: geometry dimension does not match problem");
        if (N < 1 || B < 1)
            throw std::invalid_argument("BoundInputs: N and B must be >= 1");
        if (!(gamma > 0.0) || !(alpha_B > 0.0))
            throw std::invalid_argument("BoundInputs: gamma and alpha_B must be > 0");
        for (double e : {eps.d, eps.l, eps.p, eps.a, eps.o, sigma_sq, label_m2, act_out_sup, param_trace})
            if (!(e >= 0.0) || !std::isfinite(e))
                throw std::invalid_argument("BoundInputs: epsilons and noise terms must be finite and >= 0");
    }
};

struct BoundReport {
    BoundRegime regime = BoundRegime::general;
    std::size_t k_star = 0;
    double var_err = 0.0;
    double bias_err = 0.0;
    double approx_err = 0.0;
    double quantized_err = 0.0; // general only
    double sigma_eff_sq = 0.0;
    double eps_tilde = 0.0;     // multiplicative only
    double total = std::numeric_limits<double>::quiet_NaN(); // NaN when !stepsize_ok
    bool stepsize_ok = false;
};

/// max{k : lambda_k >= 1/(N gamma)} for non-increasing `lambda_q`.
inline std::size_t effective_dimension(std::span<const double> lambda_q, double n_gamma)
{
    const double thr = 1.0 / n_gamma;
    const auto it = std::partition_point(lambda_q.begin(), lambda_q.end(), [thr](double v) { return v >= thr; });
    return static_cast<std::size_t>(it - lambda_q.begin());
}

inline std::size_t effective_dimension(std::span<const double> lambda_q, std::size_t N, double gamma)
{
    return effective_dimension(lambda_q, static_cast<double>(N) * gamma);
}

/// Head/tail sums over a spectrum split at k*, with v the target weights.
struct SpectralSums {
    std::size_t k = 0;
    double head_I = 0.0;     // ||v||^2_{I_{0:k}}
    double tail_H = 0.0;     // ||v||^2_{H_{k:inf}}
    double head_Hinv = 0.0;  // ||v||^2_{H_{0:k}^-1}
    double head_Hinv2 = 0.0; // ||v||^2_{H_{0:k}^-2}
    double tail_I = 0.0;     // ||v||^2_{I_{k:inf}}
    double eff_var = 0.0;    // k/N + N gamma^2 sum_{i>k} lambda^2
    double eff_q = 0.0;      // sum_{i<=k} 1/(N lambda) + N gamma^2 sum_{i>k} lambda
};

inline SpectralSums spectral_sums(std::span<const double> lambda, std::span<const double> v, std::size_t N, double gamma)
{
    std::vector<std::size_t> order(lambda.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return lambda[i] > lambda[j]; });
    const double n = static_cast<double>(N);
    const double thr = 1.0 / (n * gamma);

    SpectralSums s;
    double tail_sq = 0.0, tail_lin = 0.0, head_inv = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
        const std::size_t i = order[r];
        const double lam = lambda[i];
        const double v2 = v[i] * v[i];
        if (lam >= thr && r == s.k) {
            ++s.k;
            s.head_I += v2;
            s.head_Hinv += v2 / lam;
            s.head_Hinv2 += v2 / (lam * lam);
            head_inv += 1.0 / lam;
        } else {
            s.tail_H += lam * v2;
            s.tail_I += v2;
            tail_sq += lam * lam;
            tail_lin += lam;
        }
    }
    s.eff_var = static_cast<double>(s.k) / n + n * gamma * gamma * tail_sq;
    s.eff_q = head_inv / n + n * gamma * gamma * tail_lin;
    return s;
}

/// 3/2 ||w*||^2_{D1} + 1/2 ||w*||^2_{D2}, with
/// D1 = H(H+D)^-1 D (H+D)^-1 H and D2 = D(H+D)^-1 H (H+D)^-1 D.
inline double approx_quadratic(std::span<const double> lambda, std::span<const double> dd,
                               std::span<const double> w_star)
{
    double d1 = 0.0, d2 = 0.0;
    for (std::size_t i = 0; i < lambda.size(); ++i) {
        const double s = lambda[i] + dd[i];
        const double w2 = w_star[i] * w_star[i];
        d1 += lambda[i] * lambda[i] * dd[i] / (s * s) * w2;
        d2 += dd[i] * dd[i] * lambda[i] / (s * s) * w2;
    }
    return 1.5 * d1 + 0.5 * d2;
}

/// eps~ = 2 eps_p + 4 eps_o (1+eps_a)(1+eps_p) + 2 eps_a (1+eps_p)
inline double eps_tilde(const Epsilons &e) noexcept
{
    return 2.0 * e.p + 4.0 * e.o * (1.0 + e.a) * (1.0 + e.p) + 2.0 * e.a * (1.0 + e.p);
}

/// sigma_G^2 = (sigma^2 + act_out_sup)/B + alpha_B param_trace
inline double sigma_general_sq(const BoundInputs &in) noexcept
{
    return (in.sigma_sq + in.act_out_sup) / static_cast<double>(in.B) + in.alpha_B * in.param_trace;
}

inline double sigma_multiplicative_sq(const BoundInputs &in) noexcept
{
    const auto &e = in.eps;
    const double bracket = 4.0 * e.o * ((1.0 + e.a) * (1.0 + e.p) + 1.0) * in.alpha_B +
                           2.0 * e.a * (1.0 + e.p) * in.alpha_B + 2.0 * e.p * in.alpha_B;
    return (1.0 + 4.0 * e.o) * in.sigma_sq / static_cast<double>(in.B) +
           in.spec.signal_energy() / (1.0 + e.d) * bracket;
}

inline double sigma_additive_sq(const BoundInputs &in) noexcept
{
    const double b = static_cast<double>(in.B);
    const double tr = in.spec.trace() + in.eps.d * static_cast<double>(in.spec.dim());
    return (in.eps.o + in.eps.a) / b + in.alpha_B * in.eps.p * tr + in.sigma_sq / b;
}

/// Regime-specific admissibility of gamma.
inline bool stepsize_ok(const BoundInputs &in, BoundRegime regime) noexcept
{
    double limit = 0.0;
    switch (regime) {
    case BoundRegime::general:
        limit = 1.0 / (in.alpha_B * in.geom.trace_q());
        break;
    case BoundRegime::multiplicative:
        limit = 1.0 / (in.alpha_B * (1.0 + in.eps.d) * (1.0 + eps_tilde(in.eps)) * in.spec.trace());
        break;
    case BoundRegime::additive:
        limit = 1.0 / (in.alpha_B * (in.spec.trace() + in.eps.d * static_cast<double>(in.spec.dim())));
        break;
    }
    return in.gamma < limit;
}

/// General data quantization with arbitrary unbiased site quantizers,
/// zero initialization.
inline BoundReport bound_general(const BoundInputs &in)
{
    in.validate();
    const auto &g = in.geom;
    const double n = static_cast<double>(in.N);
    const double ng = n * in.gamma;
    const auto s = spectral_sums(g.eigenvalues_q, g.w_star_q, in.N, in.gamma);

    BoundReport r;
    r.regime = BoundRegime::general;
    r.stepsize_ok = stepsize_ok(in, BoundRegime::general);
    r.k_star = s.k;
    r.sigma_eff_sq = sigma_general_sq(in);
    const double denom = 1.0 - in.gamma * in.alpha_B * g.trace_q();
    const double noise = r.sigma_eff_sq + 2.0 * in.alpha_B / ng * (s.head_I + ng * s.tail_H);
    r.var_err = noise / denom * s.eff_var;
    r.bias_err = s.head_Hinv / (ng * ng) + s.tail_H;
    r.approx_err = in.label_m2 + approx_quadratic(in.spec.eigenvalues, g.d_diag, in.spec.w_star);
    const double dn = g.d_norm();
    r.quantized_err = 2.0 * dn * (s.head_Hinv2 / (ng * ng) + s.tail_I) + 2.0 * dn * noise / denom * s.eff_q;
    if (r.stepsize_ok)
        r.total = r.var_err + r.bias_err + r.approx_err + r.quantized_err;
    return r;
}

/// All sites eps-multiplicative.
inline BoundReport bound_multiplicative(const BoundInputs &in)
{
    in.validate();
    const auto geom = quantized_geometry(in.spec, Regime::multiplicative, in.eps.d);
    const double ng = static_cast<double>(in.N) * in.gamma;
    const auto s = spectral_sums(geom.eigenvalues_q, geom.w_star_q, in.N, in.gamma);
    const double ed = in.eps.d;

    BoundReport r;
    r.regime = BoundRegime::multiplicative;
    r.stepsize_ok = stepsize_ok(in, BoundRegime::multiplicative);
    r.k_star = s.k;
    r.eps_tilde = eps_tilde(in.eps);
    r.sigma_eff_sq = sigma_multiplicative_sq(in);
    const double denom = 1.0 - (1.0 + r.eps_tilde) * in.gamma * in.alpha_B * (1.0 + ed) * in.spec.trace();
    r.var_err = s.eff_var * r.sigma_eff_sq / denom +
                s.eff_var * 2.0 * (1.0 + r.eps_tilde) * in.alpha_B * (s.head_I + ng * s.tail_H) / (ng * denom);
    r.bias_err = s.head_Hinv / (ng * ng) + s.tail_H;
    const double energy = in.spec.signal_energy();
    r.approx_err = energy * (1.5 + 0.5 * ed) * ed / ((1.0 + ed) * (1.0 + ed)) + in.eps.l * (energy + in.spec.noise_var);
    if (r.stepsize_ok)
        r.total = r.approx_err + (1.0 + 3.0 * ed) / (1.0 + ed) * (r.var_err + r.bias_err);
    return r;
}

/// All sites eps-additive.
inline BoundReport bound_additive(const BoundInputs &in)
{
    in.validate();
    const auto geom = quantized_geometry(in.spec, Regime::additive, in.eps.d);
    const double ng = static_cast<double>(in.N) * in.gamma;
    const auto s = spectral_sums(geom.eigenvalues_q, geom.w_star_q, in.N, in.gamma);
    const double ed = in.eps.d;

    BoundReport r;
    r.regime = BoundRegime::additive;
    r.stepsize_ok = stepsize_ok(in, BoundRegime::additive);
    r.k_star = s.k;
    r.sigma_eff_sq = sigma_additive_sq(in);
    const double denom = 1.0 - in.gamma * in.alpha_B * geom.trace_q();
    r.var_err = (r.sigma_eff_sq + 2.0 * in.alpha_B / ng * (s.head_I + ng * s.tail_H)) / denom * s.eff_var;
    r.bias_err = s.head_Hinv / (ng * ng) + s.tail_H;
    double a1 = 0.0, a2 = 0.0;
    for (std::size_t i = 0; i < in.spec.dim(); ++i) {
        const double lam = in.spec.eigenvalues[i];
        const double q = (lam + ed) * (lam + ed);
        const double w2 = in.spec.w_star[i] * in.spec.w_star[i];
        a1 += lam * lam / q * w2;
        a2 += lam / q * w2;
    }
    r.approx_err = in.eps.l + 1.5 * ed * a1 + 0.5 * ed * ed * a2;
    if (r.stepsize_ok)
        r.total = r.approx_err + 2.0 * r.var_err + 2.0 * r.bias_err;
    return r;
}

inline BoundReport bound_for(const BoundInputs &in, BoundRegime regime)
{
    switch (regime) {
    case BoundRegime::multiplicative:
        return bound_multiplicative(in);
    case BoundRegime::additive:
        return bound_additive(in);
    case BoundRegime::general:
        break;
    }
    return bound_general(in);
}

/// Full-precision reference bound over the unquantized spectrum.
inline double baseline_R0(const BoundInputs &in)
{
    in.validate();
    const double tr = in.spec.trace();
    if (!(in.gamma < 1.0 / (in.alpha_B * tr)))
        throw std::domain_error("baseline_R0: stepsize violates gamma < 1/(alpha_B tr(H))");
    const double ng = static_cast<double>(in.N) * in.gamma;
    const auto s = spectral_sums(in.spec.eigenvalues, in.spec.w_star, in.N, in.gamma);
    const double denom = 1.0 - in.gamma * in.alpha_B * tr;
    return s.eff_var * 4.0 * in.alpha_B * (s.head_I + ng * s.tail_H) / (ng * denom) +
           s.eff_var * in.sigma_sq / (static_cast<double>(in.B) * denom) + 2.0 * s.head_Hinv / (ng * ng) +
           2.0 * s.tail_H;
}

struct Condition {
    std::string name;
    double value = 0.0;
    double threshold = 0.0;
    double ratio = 0.0; // value / threshold
    bool pass = true;
};

struct MatchingReport {
    BoundRegime regime = BoundRegime::general;
    double R0 = 0.0;
    std::vector<Condition> conditions;

    bool all_pass() const noexcept
    {
        return std::all_of(conditions.begin(), conditions.end(), [](const Condition &c) { return c.pass; });
    }
};

inline Condition make_condition(std::string name, double value, double threshold)
{
    Condition c{std::move(name), value, threshold, 0.0, true};
    if (value == 0.0)
        c.ratio = 0.0;
    else if (std::isinf(threshold))
        c.ratio = 0.0;
    else if (threshold == 0.0)
        c.ratio = std::numeric_limits<double>::infinity();
    else
        c.ratio = value / threshold;
    c.pass = c.ratio <= 1.0;
    return c;
}

/// a / b with b == 0 read as an absent constraint.
inline double cap(double a, double b) noexcept
{
    return b == 0.0 ? std::numeric_limits<double>::infinity() : a / b;
}

/// Error-level thresholds keeping the quantized rate within constants of
/// R0, hidden constants set to 1. Only multiplicative and additive apply.
inline MatchingReport check_matching_conditions(const BoundInputs &in, double R0, BoundRegime regime)
{
    if (!(R0 > 0.0))
        throw std::invalid_argument("check_matching_conditions: R0 must be > 0");
    if (regime == BoundRegime::general)
        throw std::invalid_argument("check_matching_conditions: regime must be multiplicative or additive");
    in.validate();
    MatchingReport m;
    m.regime = regime;
    m.R0 = R0;
    const auto &e = in.eps;
    const double b = static_cast<double>(in.B);
    const double s2 = in.sigma_sq;
    m.conditions.push_back(make_condition("eps_l", e.l, R0));

    if (regime == BoundRegime::multiplicative) {
        const double energy = in.spec.signal_energy();
        const double t = std::min(cap(s2, b * energy), 1.0);
        m.conditions.push_back(make_condition("eps_p", e.p, t));
        m.conditions.push_back(make_condition("eps_a", e.a, t));
        m.conditions.push_back(make_condition("eps_o", e.o, t));
        m.conditions.push_back(make_condition("eps_d", e.d, std::min(cap(R0, energy), 1.0)));
        return m;
    }

    const std::size_t d = in.spec.dim();
    const double tr = in.spec.trace() + e.d * static_cast<double>(d);
    m.conditions.push_back(make_condition("eps_o+eps_a", e.o + e.a, s2));
    m.conditions.push_back(make_condition("eps_p", e.p, cap(s2, b * tr)));

    const auto s0 = spectral_sums(in.spec.eigenvalues, in.spec.w_star, in.N, in.gamma);
    const double ng = static_cast<double>(in.N) * in.gamma;
    double norm2 = 0.0;
    for (double w : in.spec.w_star)
        norm2 += w * w;
    double tail_sq = 0.0;
    for (std::size_t i = s0.k; i < d; ++i)
        tail_sq += in.spec.eigenvalues[i] * in.spec.eigenvalues[i];
    const double t1 = cap(R0, norm2);
    const double t2 = d > s0.k ? std::sqrt(tail_sq / static_cast<double>(d - s0.k))
                               : std::numeric_limits<double>::infinity();
    const double t3 = cap(s0.tail_H + s0.head_Hinv / (ng * ng), s0.tail_I);
    m.conditions.push_back(make_condition("eps_d", e.d, std::min({t1, t2, t3})));
    return m;
}

struct PowerLawBound {
    double d_eff = 0.0;
    double bound = 0.0;
};

/// Order-level bounds for lambda_i ~ i^-a with hidden constants 1.
inline PowerLawBound powerlaw_bound(const BoundInputs &in, double a, BoundRegime regime)
{
    if (!(a > 1.0))
        throw std::invalid_argument("powerlaw_bound: exponent a must be > 1");
    if (regime == BoundRegime::general)
        throw std::invalid_argument("powerlaw_bound: regime must be multiplicative or additive");
    const auto &e = in.eps;
    const double n = static_cast<double>(in.N);
    const double ng = n * in.gamma;
    const double b = static_cast<double>(in.B);
    const double d = static_cast<double>(in.spec.dim());
    PowerLawBound out;
    if (regime == BoundRegime::multiplicative) {
        out.d_eff = std::pow(ng * (1.0 + e.d), 1.0 / a);
        const double m = std::min(out.d_eff, d);
        out.bound = e.d + e.l + m / ng + m / n * (in.sigma_sq / b + e.p + e.o + e.a + m / ng);
        return out;
    }
    const double t = std::max(std::pow(d, -a), 1.0 / ng - e.d);
    const double r = std::pow(t, -1.0 / a);
    out.d_eff = (d - r) * e.d * ng + r;
    const double m = std::min(out.d_eff, d);
    out.bound = e.d * d + e.l + m / ng + m / n * (in.sigma_sq / b + (1.0 + d * e.d) * e.p + (e.o + e.a) / b + m / ng);
    return out;
}

enum class Preference { fp, integer, boundary };

inline const char *to_string(Preference p) noexcept
{
    switch (p) {
    case Preference::fp:
        return "fp";
    case Preference::integer:
        return "int";
    case Preference::boundary:
        break;
    }
    return "boundary";
}

/// FP wins when m >= b - log2(d)/2, INT when b >= m + log2(d)/2.
inline Preference fp_int_preference(int bits, int mantissa_bits, std::size_t d)
{
    if (d < 1)
        throw std::invalid_argument("fp_int_preference: d must be >= 1");
    const double h = 0.5 * std::log2(static_cast<double>(d));
    const double gap = static_cast<double>(mantissa_bits) - static_cast<double>(bits) + h;
    if (std::abs(gap) < 1e-9)
        return Preference::boundary;
    return gap > 0.0 ? Preference::fp : Preference::integer;
}

/// Regime the bound family for a set of site quantizers falls into.
inline BoundRegime bound_regime(const SiteQuantizers &sites) noexcept
{
    bool mult = false, add = false;
    for (const auto *q : {&sites.data, &sites.label, &sites.param, &sites.activation, &sites.output_grad}) {
        if (q->is_identity())
            continue;
        if (q->kind == QuantizerKind::multiplicative || q->kind == QuantizerKind::multiplicative_indep)
            mult = true;
        else if (q->kind == QuantizerKind::additive)
            add = true;
        else
            return BoundRegime::general;
    }
    if (mult && !add)
        return BoundRegime::multiplicative;
    if (add && !mult)
        return BoundRegime::additive;
    return BoundRegime::general;
}

/// Default noise-level constant sigma^2: model noise plus the quantization and
/// approximation part of E[xi^2], the latter inflated by alpha_B since it
/// is correlated with x. A heuristic, not a derived constant.
inline double default_sigma_sq(const ProblemSpec &spec, const SiteQuantizers &sites, double alpha_B)
{
    const auto geom = geometry_for(spec, sites.data);
    const double lm2 = label_error_second_moment(sites.label, spec);
    return spec.noise_var + alpha_B * 2.0 * (r3_closed_form(geom, spec, lm2) + r4_closed_form(geom, spec));
}

/// BoundInputs for a simulated configuration. Additive site noise is
/// analytic; everything else comes from the trajectory's running maxima.
inline BoundInputs make_bound_inputs(const ProblemSpec &spec, const SiteQuantizers &sites, std::size_t N,
                                     std::size_t B, double gamma, double alpha_B, double sigma_sq,
                                     const NoiseStats &stats = {})
{
    BoundInputs in;
    in.spec = spec;
    in.geom = geometry_for(spec, sites.data);
    in.eps = {sites.data.effective_epsilon(), sites.label.effective_epsilon(), sites.param.effective_epsilon(),
              sites.activation.effective_epsilon(), sites.output_grad.effective_epsilon()};
    in.N = N;
    in.B = B;
    in.gamma = gamma;
    in.alpha_B = alpha_B;
    in.sigma_sq = sigma_sq;
    in.label_m2 = label_error_second_moment(sites.label, spec);

    const bool ao_analytic = (sites.activation.is_identity() || sites.activation.kind == QuantizerKind::additive) &&
                             (sites.output_grad.is_identity() || sites.output_grad.kind == QuantizerKind::additive);
    in.act_out_sup = ao_analytic ? in.eps.a + in.eps.o : stats.act_out_sup;
    if (sites.param.is_identity())
        in.param_trace = 0.0;
    else if (sites.param.kind == QuantizerKind::additive)
        in.param_trace = in.eps.p * in.geom.trace_q();
    else
        in.param_trace = stats.param_trace_sup;
    return in;
}

/// 0.5 / (alpha_B tr(H + D)).
inline double default_stepsize(const ProblemSpec &spec, const SiteQuantizers &sites, double alpha_B)
{
    return 0.5 / (alpha_B * geometry_for(spec, sites.data).trace_q());
}

} // namespace qsgd
