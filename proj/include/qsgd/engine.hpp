/*
 * Copyright 2026 The qsgd-sim Authors.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "qsgd/parallel.hpp"
#include "qsgd/quantizers.hpp"
#include "qsgd/risk.hpp"
#include "qsgd/rng.hpp"
#include "qsgd/spectrum.hpp"

namespace qsgd {

struct RunConfig {
    std::size_t steps = 10000;
    std::size_t batch = 1;
    double stepsize = 0.1;
    std::vector<std::size_t> checkpoints; // empty -> geometric_checkpoints(steps)
    std::uint64_t seed = 0;
    std::vector<double> w0;               // empty -> zero initialization

    void validate(std::size_t dim) const
    {
        if (steps < 1)
            throw std::invalid_argument("RunConfig: steps must be >= 1");
        if (batch < 1)
            throw std::invalid_argument("RunConfig: batch must be >= 1");
        if (!(stepsize > 0.0) || !std::isfinite(stepsize))
            throw std::invalid_argument("RunConfig: stepsize must be > 0");
        if (!w0.empty() && w0.size() != dim)
            throw std::invalid_argument("RunConfig: w0 length does not match dimension");
        for (std::size_t k = 0; k < checkpoints.size(); ++k) {
            if (checkpoints[k] < 1 || checkpoints[k] > steps)
                throw std::invalid_argument("RunConfig: checkpoint " + std::to_string(checkpoints[k]) +
                                            " outside [1, steps]");
            if (k > 0 && checkpoints[k] <= checkpoints[k - 1])
                throw std::invalid_argument("RunConfig: checkpoints must be strictly increasing");
        }
    }
};

/// Up to `count` distinct step indices spaced geometrically over [1, n],
/// always including 1 and n.
inline std::vector<std::size_t> geometric_checkpoints(std::size_t n, std::size_t count = 32)
{
    std::vector<std::size_t> out;
    if (n == 0)
        return out;
    if (count < 2 || n == 1)
        return {n};
    for (std::size_t k = 0; k < count; ++k) {
        const double t = static_cast<double>(k) / static_cast<double>(count - 1);
        auto s = static_cast<std::size_t>(std::llround(std::pow(static_cast<double>(n), t)));
        s = std::clamp<std::size_t>(s, 1, n);
        if (out.empty() || s > out.back())
            out.push_back(s);
    }
    if (out.back() != n)
        out.push_back(n);
    return out;
}

struct RiskPoint {
    std::size_t step = 0;
    double value = 0.0;
};

/// Largest conditional quantization-noise levels seen along a run; the
/// ingredients of the general-regime effective noise variance.
struct NoiseStats {
    double act_out_sup = 0.0;     // sup_t ||E[e_o e_o^T|o]|| + ||E[e_a e_a^T|a]||
    double param_trace_sup = 0.0; // sup_t tr(H^(q) E[e_p e_p^T|w])
};

struct Trajectory {
    std::vector<RiskPoint> risk_last;
    std::vector<RiskPoint> risk_avg;
    std::vector<double> final_avg;
    std::uint64_t seed = 0;
    NoiseStats noise;
};

/// Non-finite iterate. Carries the step at which it appeared.
class Divergence : public std::runtime_error {
public:
    Divergence(std::size_t step, std::uint64_t seed)
        : std::runtime_error("SGD diverged at step " + std::to_string(step) + " (seed " + std::to_string(seed) +
                             ")"),
          step_(step), seed_(seed)
    {
    }

    std::size_t step() const noexcept { return step_; }
    std::uint64_t seed() const noexcept { return seed_; }

private:
    std::size_t step_;
    std::uint64_t seed_;
};

/// One random stream per quantization site.
template <class Rng>
struct SiteRngs {
    Rng data;
    Rng label;
    Rng param;
    Rng activation;
    Rng output_grad;
};

enum StreamTag : std::uint64_t {
    tag_sampling = 0x73616d706c65ULL,
    tag_data = 0x64617461ULL,
    tag_label = 0x6c6162656cULL,
    tag_param = 0x706172616dULL,
    tag_activation = 0x616374ULL,
    tag_output_grad = 0x6f7574ULL,
};

inline SiteRngs<Stream> site_streams(std::uint64_t seed)
{
    return {Stream(derive_seed(seed, tag_data)), Stream(derive_seed(seed, tag_label)),
            Stream(derive_seed(seed, tag_param)), Stream(derive_seed(seed, tag_activation)),
            Stream(derive_seed(seed, tag_output_grad))};
}

/// Scratch buffers reused across steps.
struct StepWorkspace {
    Batch xq;
    std::vector<double> wq;
    std::vector<double> act;
    std::vector<double> out;

    void reshape(std::size_t b, std::size_t d)
    {
        if (xq.rows != b || xq.cols != d)
            xq = Batch(b, d);
        wq.resize(d);
        act.resize(b);
        out.resize(b);
    }
};

/// Conditional noise levels of a single step (filled on request).
struct StepNoise {
    double act_out = 0.0;
    double param_trace = 0.0;
};

/// One quantized SGD update, in place on the master weights `w`:
///
///   w <- w + gamma/B * Qd(X)^T Qo(Ql(y) - Qa(Qd(X) Qp(w)))
///
/// Qd is applied per row and the same realisation feeds both products;
/// Ql is applied per sample; Qp acts on a copy of w; Qa and Qo act on the
/// whole B-vector. All arithmetic between quantizers is full precision.
/// When `noise` is non-null, the conditional noise levels of this step are
/// recorded using `lambda_q` (diagonal of H^(q)).
template <class Rng>
void sgd_step_inplace(std::span<double> w, const Batch &batch, const SiteQuantizers &sites, double gamma,
                      SiteRngs<Rng> &rngs, StepWorkspace &ws, StepNoise *noise = nullptr,
                      std::span<const double> lambda_q = {})
{
    const std::size_t b = batch.rows;
    const std::size_t d = batch.cols;
    if (w.size() != d)
        throw std::invalid_argument("sgd_step: weight length " + std::to_string(w.size()) +
                                    " does not match feature dimension " + std::to_string(d));
    if (batch.labels.size() != b || batch.features.size() != b * d)
        throw std::invalid_argument("sgd_step: malformed batch");
    ws.reshape(b, d);

    std::copy(batch.features.begin(), batch.features.end(), ws.xq.features.begin());
    for (std::size_t j = 0; j < b; ++j)
        quantize_inplace(sites.data, ws.xq.row(j), rngs.data);

    std::copy(batch.labels.begin(), batch.labels.end(), ws.xq.labels.begin());
    for (std::size_t j = 0; j < b; ++j)
        quantize_inplace(sites.label, std::span<double>(&ws.xq.labels[j], 1), rngs.label);

    std::copy(w.begin(), w.end(), ws.wq.begin());
    if (noise != nullptr) {
        double tr = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            tr += lambda_q[i] * conditional_error_variance(sites.param, w[i]);
        noise->param_trace = tr;
    }
    quantize_inplace(sites.param, std::span<double>(ws.wq), rngs.param);

    for (std::size_t j = 0; j < b; ++j) {
        const auto x = ws.xq.row(j);
        double a = 0.0;
        for (std::size_t i = 0; i < d; ++i)
            a += x[i] * ws.wq[i];
        ws.act[j] = a;
    }
    if (noise != nullptr)
        noise->act_out = conditional_error_norm(sites.activation, ws.act);
    quantize_inplace(sites.activation, std::span<double>(ws.act), rngs.activation);

    for (std::size_t j = 0; j < b; ++j)
        ws.out[j] = ws.xq.labels[j] - ws.act[j];
    if (noise != nullptr)
        noise->act_out += conditional_error_norm(sites.output_grad, ws.out);
    quantize_inplace(sites.output_grad, std::span<double>(ws.out), rngs.output_grad);

    const double scale = gamma / static_cast<double>(b);
    for (std::size_t j = 0; j < b; ++j) {
        const auto x = ws.xq.row(j);
        const double g = scale * ws.out[j];
        for (std::size_t i = 0; i < d; ++i)
            w[i] += g * x[i];
    }
}

/// Value-returning form of sgd_step_inplace.
template <class Rng>
std::vector<double> sgd_step(std::span<const double> w, const Batch &batch, const SiteQuantizers &sites, double gamma,
                             SiteRngs<Rng> &rngs)
{
    if (!(gamma > 0.0))
        throw std::invalid_argument("sgd_step: stepsize must be > 0");
    std::vector<double> next(w.begin(), w.end());
    StepWorkspace ws;
    sgd_step_inplace(std::span<double>(next), batch, sites, gamma, rngs, ws);
    return next;
}

using IterateObserver = std::function<void(std::size_t step, std::span<const double> w)>;

/// Runs N quantized SGD steps from w0 and records the excess risk of the
/// last iterate w_t and of the running average of w_0 .. w_{t-1} at every
/// checkpoint. Throws Divergence on the first non-finite iterate.
/// `observer`, when set, sees w_0 .. w_N.
inline Trajectory run_trajectory(const ProblemSpec &spec, const SiteQuantizers &sites, const RunConfig &cfg,
                                 const IterateObserver &observer = {})
{
    spec.validate();
    sites.validate();
    cfg.validate(spec.dim());
    const std::size_t d = spec.dim();
    const auto checkpoints = cfg.checkpoints.empty() ? geometric_checkpoints(cfg.steps) : cfg.checkpoints;
    const auto geom = geometry_for(spec, sites.data);
    const auto sqrt_eigs = sqrt_eigenvalues(spec);

    Stream sampler(derive_seed(cfg.seed, tag_sampling));
    auto rngs = site_streams(cfg.seed);

    std::vector<double> w = cfg.w0.empty() ? std::vector<double>(d, 0.0) : cfg.w0;
    std::vector<double> sum(d, 0.0);
    std::vector<double> avg(d);
    Batch batch(cfg.batch, d);
    StepWorkspace ws;
    StepNoise step_noise;

    Trajectory traj;
    traj.seed = cfg.seed;
    traj.risk_last.reserve(checkpoints.size());
    traj.risk_avg.reserve(checkpoints.size());
    if (observer)
        observer(0, w);

    std::size_t next_cp = 0;
    for (std::size_t t = 1; t <= cfg.steps; ++t) {
        for (std::size_t i = 0; i < d; ++i)
            sum[i] += w[i];
        sample_batch_into(spec, sqrt_eigs, batch, sampler);
        sgd_step_inplace(std::span<double>(w), batch, sites, cfg.stepsize, rngs, ws, &step_noise,
                         geom.eigenvalues_q);
        traj.noise.act_out_sup = std::max(traj.noise.act_out_sup, step_noise.act_out);
        traj.noise.param_trace_sup = std::max(traj.noise.param_trace_sup, step_noise.param_trace);
        for (double v : w)
            if (!std::isfinite(v))
                throw Divergence(t, cfg.seed);
        if (observer)
            observer(t, w);
        if (next_cp < checkpoints.size() && checkpoints[next_cp] == t) {
            const double inv_t = 1.0 / static_cast<double>(t);
            for (std::size_t i = 0; i < d; ++i)
                avg[i] = sum[i] * inv_t;
            traj.risk_last.push_back({t, excess_risk(w, spec)});
            traj.risk_avg.push_back({t, excess_risk(avg, spec)});
            ++next_cp;
        }
    }
    traj.final_avg.resize(d);
    const double inv_n = 1.0 / static_cast<double>(cfg.steps);
    for (std::size_t i = 0; i < d; ++i)
        traj.final_avg[i] = sum[i] * inv_n;
    return traj;
}

struct MeanRisk {
    std::vector<std::size_t> steps;
    std::vector<double> mean;
    std::vector<double> std_error;
    std::vector<Trajectory> runs;
};

/// Runs seeds cfg.seed, cfg.seed + 1, ..., cfg.seed + n_seeds - 1 and
/// aggregates risk_avg per checkpoint (mean and standard error). A
/// single seed is accepted for debugging and reports zero standard error.
/// Divergence of any seed propagates with that seed attached.
inline MeanRisk mean_risk(const ProblemSpec &spec, const SiteQuantizers &sites, const RunConfig &cfg,
                          std::size_t n_seeds, unsigned threads = 1)
{
    if (n_seeds < 1)
        throw std::invalid_argument("mean_risk: n_seeds must be >= 1");
    MeanRisk out;
    out.runs.resize(n_seeds);
    parallel_for(n_seeds, threads, [&](std::size_t k) {
        RunConfig c = cfg;
        c.seed = cfg.seed + k;
        out.runs[k] = run_trajectory(spec, sites, c);
    });

    const std::size_t m = out.runs.front().risk_avg.size();
    out.steps.resize(m);
    out.mean.assign(m, 0.0);
    out.std_error.assign(m, 0.0);
    const double n = static_cast<double>(n_seeds);
    for (std::size_t c = 0; c < m; ++c) {
        out.steps[c] = out.runs.front().risk_avg[c].step;
        double s = 0.0;
        for (const auto &r : out.runs)
            s += r.risk_avg[c].value;
        const double mu = s / n;
        double ss = 0.0;
        for (const auto &r : out.runs) {
            const double e = r.risk_avg[c].value - mu;
            ss += e * e;
        }
        out.mean[c] = mu;
        out.std_error[c] = n_seeds > 1 ? std::sqrt(ss / (n - 1.0) / n) : 0.0;
    }
    return out;
}

} // namespace qsgd
