/*
 * Copyright 2026 The qsgd-sim Authors.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "qsgd/spectrum.hpp"

namespace qsgd {

// Excess risk of the averaged iterate splits exactly into four terms
// (expectations over data, quantization and the SGD run):
//
//   R1 = 0.5 E[(y - w.x)^2] - 0.5 E[(Ql(y) - w.Qd(x))^2]         at w = avg iterate
//   R2 = 0.5 E[(Ql(y) - w.Qd(x))^2] - 0.5 E[(Ql(y) - wq*.Qd(x))^2]
//   R3 = 0.5 E[(Ql(y) - wq*.Qd(x))^2] - 0.5 E[(y - wq*.x)^2]
//   R4 = 0.5 E[(y - wq*.x)^2] - 0.5 E[(y - w*.x)^2]
//
// For unbiased quantizers the quantization error is uncorrelated with the
// clean signal, so R1 = -0.5 E[e_l^2] - 0.5 E[w^T D w] is non-positive and
// cancels the label part of R3. All forms below are diagonal in the
// eigenbasis of H.

enum class TermMethod { closed_form, monte_carlo };

struct RiskBreakdown {
    double r1 = 0.0;
    double r2 = 0.0;
    double r3 = 0.0;
    double r4 = 0.0;
    double total = 0.0;
    TermMethod r1_method = TermMethod::monte_carlo;
    TermMethod r2_method = TermMethod::monte_carlo;
    TermMethod r3_method = TermMethod::closed_form;
    TermMethod r4_method = TermMethod::closed_form;
    double r12_stderr = 0.0;   // standard error of r1 + r2 across seeds
    double direct_mean = 0.0;  // mean excess risk of the averaged iterates
    double direct_stderr = 0.0;
    std::size_t n_seeds = 0;
};

/// 0.5 * ||w - w*||_H^2
inline double excess_risk(std::span<const double> w, const ProblemSpec &spec)
{
    if (w.size() != spec.dim())
        throw std::invalid_argument("excess_risk: weight length does not match dimension");
    double s = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        const double e = w[i] - spec.w_star[i];
        s += spec.eigenvalues[i] * e * e;
    }
    return 0.5 * s;
}

inline void check_geometry(const QuantizedGeometry &geom, const ProblemSpec &spec)
{
    if (geom.dim() != spec.dim() || geom.d_diag.size() != spec.dim() || geom.w_star_q.size() != spec.dim())
        throw std::invalid_argument("geometry dimension does not match problem dimension");
}

/// R4 = 0.5 ||w*||^2_{D(H+D)^-1 H (H+D)^-1 D}
inline double r4_closed_form(const QuantizedGeometry &geom, const ProblemSpec &spec)
{
    check_geometry(geom, spec);
    double s = 0.0;
    for (std::size_t i = 0; i < spec.dim(); ++i) {
        const double lam = spec.eigenvalues[i];
        const double ratio = geom.d_diag[i] / (lam + geom.d_diag[i]);
        s += lam * ratio * ratio * spec.w_star[i] * spec.w_star[i];
    }
    return 0.5 * s;
}

/// R3 = 0.5 E[e_l^2] + 0.5 ||w*||^2_{H(H+D)^-1 D (H+D)^-1 H}
inline double r3_closed_form(const QuantizedGeometry &geom, const ProblemSpec &spec, double label_err_second_moment)
{
    check_geometry(geom, spec);
    if (!(label_err_second_moment >= 0.0))
        throw std::invalid_argument("r3_closed_form: label error second moment must be >= 0");
    double s = 0.0;
    for (std::size_t i = 0; i < spec.dim(); ++i) {
        const double lam = spec.eigenvalues[i];
        const double ratio = lam / (lam + geom.d_diag[i]);
        s += geom.d_diag[i] * ratio * ratio * spec.w_star[i] * spec.w_star[i];
    }
    return 0.5 * label_err_second_moment + 0.5 * s;
}

struct R1R2Estimate {
    double r1 = 0.0;
    double r2 = 0.0;
    double r1_label = 0.0;   // 0.5 E[e_l^2]
    double r1_feature = 0.0; // 0.5 mean of avg^T D avg
    double r12_stderr = 0.0;
};

/// Seed-averaged R1 and R2 from the final averaged iterates of
/// independent runs.
inline R1R2Estimate r1_r2_monte_carlo(const std::vector<std::vector<double>> &avg_weights,
                                      const QuantizedGeometry &geom, const ProblemSpec &spec,
                                      double label_err_second_moment)
{
    check_geometry(geom, spec);
    if (avg_weights.size() < 2)
        throw std::invalid_argument("r1_r2_monte_carlo: at least 2 seed results are required");
    const std::size_t d = spec.dim();
    const double n = static_cast<double>(avg_weights.size());

    std::vector<double> feat(avg_weights.size()), quad(avg_weights.size());
    for (std::size_t k = 0; k < avg_weights.size(); ++k) {
        const auto &w = avg_weights[k];
        if (w.size() != d)
            throw std::invalid_argument("r1_r2_monte_carlo: weight length does not match dimension");
        double f = 0.0, q = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            f += geom.d_diag[i] * w[i] * w[i];
            const double e = w[i] - geom.w_star_q[i];
            q += geom.eigenvalues_q[i] * e * e;
        }
        feat[k] = 0.5 * f;
        quad[k] = 0.5 * q;
    }

    R1R2Estimate out;
    double sf = 0.0, sq = 0.0;
    for (std::size_t k = 0; k < feat.size(); ++k) {
        sf += feat[k];
        sq += quad[k];
    }
    out.r1_label = 0.5 * label_err_second_moment;
    out.r1_feature = sf / n;
    out.r1 = -out.r1_label - out.r1_feature;
    out.r2 = sq / n;

    const double mu = out.r2 - out.r1_feature;
    double ss = 0.0;
    for (std::size_t k = 0; k < feat.size(); ++k) {
        const double e = (quad[k] - feat[k]) - mu;
        ss += e * e;
    }
    out.r12_stderr = std::sqrt(ss / (n - 1.0) / n);
    return out;
}

/// Full R1..R4 breakdown next to the directly measured mean excess risk
/// of the same averaged iterates.
inline RiskBreakdown decompose(const std::vector<std::vector<double>> &avg_weights, const QuantizedGeometry &geom,
                               const ProblemSpec &spec, double label_err_second_moment)
{
    const auto r12 = r1_r2_monte_carlo(avg_weights, geom, spec, label_err_second_moment);
    RiskBreakdown b;
    b.r1 = r12.r1;
    b.r2 = r12.r2;
    b.r3 = r3_closed_form(geom, spec, label_err_second_moment);
    b.r4 = r4_closed_form(geom, spec);
    b.total = b.r1 + b.r2 + b.r3 + b.r4;
    b.r12_stderr = r12.r12_stderr;
    b.n_seeds = avg_weights.size();

    const double n = static_cast<double>(avg_weights.size());
    std::vector<double> direct(avg_weights.size());
    double s = 0.0;
    for (std::size_t k = 0; k < avg_weights.size(); ++k) {
        direct[k] = excess_risk(avg_weights[k], spec);
        s += direct[k];
    }
    b.direct_mean = s / n;
    double ss = 0.0;
    for (double v : direct)
        ss += (v - b.direct_mean) * (v - b.direct_mean);
    b.direct_stderr = std::sqrt(ss / (n - 1.0) / n);
    return b;
}

} // namespace qsgd
