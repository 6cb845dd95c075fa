/*
 * Copyright 2026 The qsgd-sim Authors.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace qsgd {

/// Linear regression problem expressed in the eigenbasis of H = E[xx^T].
///
/// `eigenvalues` are the diagonal of H (non-increasing, strictly positive),
/// `w_star` the ground-truth weights and `noise_var` the label noise
/// variance.
struct ProblemSpec {
    std::vector<double> eigenvalues;
    std::vector<double> w_star;
    double noise_var = 0.0;

    std::size_t dim() const noexcept { return eigenvalues.size(); }

    double trace() const noexcept
    {
        return std::accumulate(eigenvalues.begin(), eigenvalues.end(), 0.0);
    }

    /// ||w*||_H^2
    double signal_energy() const noexcept
    {
        double s = 0.0;
        for (std::size_t i = 0; i < dim(); ++i)
            s += eigenvalues[i] * w_star[i] * w_star[i];
        return s;
    }

    void validate() const
    {
        if (eigenvalues.empty())
            throw std::invalid_argument("ProblemSpec: dimension must be >= 1");
        if (w_star.size() != eigenvalues.size())
            throw std::invalid_argument("ProblemSpec: w_star length " + std::to_string(w_star.size()) +
                                        " does not match dimension " + std::to_string(eigenvalues.size()));
        for (std::size_t i = 0; i < eigenvalues.size(); ++i) {
            if (!(eigenvalues[i] > 0.0) || !std::isfinite(eigenvalues[i]))
                throw std::invalid_argument("ProblemSpec: eigenvalues must be finite and > 0");
            if (i > 0 && eigenvalues[i] > eigenvalues[i - 1])
                throw std::invalid_argument("ProblemSpec: eigenvalues must be non-increasing");
        }
        if (!(noise_var >= 0.0))
            throw std::invalid_argument("ProblemSpec: noise_var must be >= 0");
    }
};

inline ProblemSpec make_problem(std::vector<double> eigenvalues, std::vector<double> w_star, double noise_var)
{
    ProblemSpec spec{std::move(eigenvalues), std::move(w_star), noise_var};
    spec.validate();
    return spec;
}

/// lambda_i = i^{-a}, i = 1..d.
inline std::vector<double> power_law_eigenvalues(std::size_t d, double a)
{
    if (d < 1)
        throw std::invalid_argument("power_law_eigenvalues: d must be >= 1");
    if (!(a > 1.0))
        throw std::invalid_argument("power_law_eigenvalues: exponent a must be > 1");
    std::vector<double> out(d);
    for (std::size_t i = 0; i < d; ++i)
        out[i] = std::pow(static_cast<double>(i + 1), -a);
    return out;
}

enum class Regime { none, multiplicative, additive };

inline const char *to_string(Regime r) noexcept
{
    switch (r) {
    case Regime::multiplicative:
        return "multiplicative";
    case Regime::additive:
        return "additive";
    case Regime::none:
        break;
    }
    return "none";
}

/// Second-order structure induced by data quantization, diagonal in the
/// eigenbasis of H: H^(q) = H + D and w^(q)* = (H + D)^{-1} H w*.
struct QuantizedGeometry {
    std::vector<double> eigenvalues_q;
    std::vector<double> d_diag;
    std::vector<double> w_star_q;
    Regime regime = Regime::none;
    double eps_d = 0.0;

    std::size_t dim() const noexcept { return eigenvalues_q.size(); }

    double trace_q() const noexcept
    {
        return std::accumulate(eigenvalues_q.begin(), eigenvalues_q.end(), 0.0);
    }

    /// Spectral norm of D.
    double d_norm() const noexcept
    {
        double m = 0.0;
        for (double v : d_diag)
            m = std::max(m, v);
        return m;
    }
};

inline QuantizedGeometry quantized_geometry(const ProblemSpec &spec, Regime regime, double eps_d)
{
    if (!(eps_d >= 0.0))
        throw std::invalid_argument("quantized_geometry: eps_d must be >= 0");
    const std::size_t d = spec.dim();
    QuantizedGeometry g;
    g.regime = regime;
    g.eps_d = regime == Regime::none ? 0.0 : eps_d;
    g.eigenvalues_q.resize(d);
    g.d_diag.resize(d);
    g.w_star_q.resize(d);
    for (std::size_t i = 0; i < d; ++i) {
        const double lambda = spec.eigenvalues[i];
        double di = 0.0;
        if (regime == Regime::multiplicative)
            di = eps_d * lambda;
        else if (regime == Regime::additive)
            di = eps_d;
        g.d_diag[i] = di;
        g.eigenvalues_q[i] = lambda + di;
        g.w_star_q[i] = regime == Regime::none ? spec.w_star[i] : lambda / (lambda + di) * spec.w_star[i];
    }
    return g;
}

/// A minibatch: row-major B x d features and B labels.
struct Batch {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> features;
    std::vector<double> labels;

    Batch() = default;
    Batch(std::size_t b, std::size_t d) : rows(b), cols(d), features(b * d), labels(b) {}

    std::span<double> row(std::size_t j) noexcept { return {features.data() + j * cols, cols}; }
    std::span<const double> row(std::size_t j) const noexcept { return {features.data() + j * cols, cols}; }
};

/// Fills `out` with B Gaussian samples: x_i = sqrt(lambda_i) z_i and
/// y = <w*, x> + sqrt(noise_var) xi. `sqrt_eigs` caches sqrt(lambda).
template <class Rng>
void sample_batch_into(const ProblemSpec &spec, std::span<const double> sqrt_eigs, Batch &out, Rng &rng)
{
    const std::size_t d = spec.dim();
    const double noise_sd = std::sqrt(spec.noise_var);
    for (std::size_t j = 0; j < out.rows; ++j) {
        double *x = out.features.data() + j * d;
        double y = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            x[i] = sqrt_eigs[i] * rng.normal();
            y += spec.w_star[i] * x[i];
        }
        out.labels[j] = y + noise_sd * rng.normal();
    }
}

inline std::vector<double> sqrt_eigenvalues(const ProblemSpec &spec)
{
    std::vector<double> s(spec.dim());
    for (std::size_t i = 0; i < s.size(); ++i)
        s[i] = std::sqrt(spec.eigenvalues[i]);
    return s;
}

template <class Rng>
Batch sample_batch(const ProblemSpec &spec, std::size_t batch, Rng &rng)
{
    if (batch < 1)
        throw std::invalid_argument("sample_batch: batch size must be >= 1");
    Batch out(batch, spec.dim());
    const auto s = sqrt_eigenvalues(spec);
    sample_batch_into(spec, s, out, rng);
    return out;
}

} // namespace qsgd
