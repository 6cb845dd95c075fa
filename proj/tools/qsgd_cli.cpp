/*
 * Copyright 2026 The qsgd-sim Authors.
 * SPDX-License-Identifier: Apache-2.0
 */

#include <cstdint>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "qsgd/qsgd.hpp"

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    unsigned threads = 1;
};

qsgd::json load_config(const Globals &g)
{
    if (g.config.empty())
        throw qsgd::ConfigError("--config is required");
    return qsgd::load_json_file(g.config);
}

std::optional<std::filesystem::path> out_dir(const Globals &g)
{
    if (g.out.empty())
        return std::nullopt;
    return std::filesystem::path(g.out);
}

void emit(const qsgd::ordered_json &j, const Globals &g, const char *name)
{
    const auto text = j.dump(2) + "\n";
    std::cout << text;
    if (auto dir = out_dir(g))
        qsgd::write_file_atomic(*dir / name, text);
}

void print_summaries(const std::vector<qsgd::CellSummary> &cells)
{
    std::cout << qsgd::summaries_to_csv(cells);
}

int cmd_simulate(const Globals &g, std::size_t seeds)
{
    auto sw = qsgd::parse_sweep(load_config(g));
    sw.axes.clear();
    if (seeds > 0)
        sw.n_seeds = seeds;
    const auto res = qsgd::run_sweep(sw, out_dir(g), g.threads, g.seed);
    print_summaries(res.summaries);
    return 0;
}

int cmd_sweep(const Globals &g, std::size_t seeds)
{
    auto sw = qsgd::parse_sweep(load_config(g));
    if (seeds > 0)
        sw.n_seeds = seeds;
    if (g.out.empty())
        throw qsgd::ConfigError("sweep requires --out");
    const auto res = qsgd::run_sweep(sw, out_dir(g), g.threads, g.seed);
    std::cerr << "cells run: " << res.cells_run << ", reused: " << res.cells_skipped << "\n";
    print_summaries(res.summaries);
    return 0;
}

qsgd::CellConfig base_cell(const Globals &g)
{
    auto sw = qsgd::parse_sweep(load_config(g));
    return qsgd::resolve_cell(sw.base, g.seed);
}

/// Noise maxima from a pilot run when some site noise is not analytic.
qsgd::NoiseStats pilot_noise(const qsgd::CellConfig &c)
{
    qsgd::RunConfig rc = c.run;
    rc.seed = qsgd::trial_seed(c.run.seed, c.id, 0);
    return qsgd::run_trajectory(c.spec, c.sites, rc).noise;
}

int cmd_bound(const Globals &g)
{
    const auto c = base_cell(g);
    const auto rep = qsgd::cell_bound(c, pilot_noise(c));
    emit(qsgd::bound_report_json(rep, c.id, c.sigma_sq, c.sigma_sq_heuristic, c.alpha_B), g, "bound.json");
    return rep.stepsize_ok ? 0 : 3;
}

int cmd_check_conditions(const Globals &g)
{
    const auto c = base_cell(g);
    const auto regime = qsgd::bound_regime(c.sites);
    if (regime == qsgd::BoundRegime::general)
        throw qsgd::ConfigError("check-conditions needs all sites multiplicative or all additive");
    const auto in = qsgd::make_bound_inputs(c.spec, c.sites, c.run.steps, c.run.batch, c.run.stepsize, c.alpha_B,
                                            c.sigma_sq);
    const double r0 = qsgd::baseline_R0(in);
    emit(qsgd::matching_json(qsgd::check_matching_conditions(in, r0, regime), c.id), g, "conditions.json");
    return 0;
}

int cmd_compare(int bits, int mantissa, std::size_t dim)
{
    std::cout << qsgd::to_string(qsgd::fp_int_preference(bits, mantissa, dim)) << "\n";
    return 0;
}

int cmd_decompose(const Globals &g, std::size_t seeds)
{
    auto sw = qsgd::parse_sweep(load_config(g));
    const auto c = qsgd::resolve_cell(sw.base, g.seed);
    const std::size_t n = seeds > 0 ? seeds : sw.n_seeds;
    const auto runs = qsgd::run_cell_trajectories(c, n, g.threads);
    std::vector<std::vector<double>> avgs;
    for (const auto &r : runs)
        avgs.push_back(r.final_avg);
    const auto geom = qsgd::geometry_for(c.spec, c.sites.data);
    const auto b = qsgd::decompose(avgs, geom, c.spec, qsgd::label_error_second_moment(c.sites.label, c.spec));
    emit(qsgd::breakdown_json(b, c.id), g, "decompose.json");
    return 0;
}

} // namespace

int main(int argc, char **argv)
{
    CLI::App app{"Quantized one-pass SGD simulator and bound calculator"};
    app.require_subcommand(1);
    app.fallthrough();

    Globals g;
    std::uint64_t seed = 0;
    app.add_option("--config", g.config, "JSON experiment config");
    auto *seed_opt = app.add_option("--seed", seed, "root seed (overrides run.seed)");
    app.add_option("--out", g.out, "output directory");
    app.add_option("--threads", g.threads, "worker threads (0 = all cores)");

    std::size_t seeds = 0;
    auto *sim = app.add_subcommand("simulate", "run one cell over several seeds");
    sim->add_option("--seeds", seeds, "number of seeds (default sweep.n_seeds)");
    auto *sweep = app.add_subcommand("sweep", "run the sweep described by the config");
    sweep->add_option("--seeds", seeds, "number of seeds (default sweep.n_seeds)");
    auto *bound = app.add_subcommand("bound", "bound report for the base cell");
    auto *cond = app.add_subcommand("check-conditions", "matching-condition report for the base cell");
    int bits = 8, mantissa = 4;
    std::size_t dim = 1;
    auto *cmp = app.add_subcommand("compare-fp-int", "FP vs INT data quantization preference");
    cmp->add_option("--bits", bits, "integer bits")->required();
    cmp->add_option("--mantissa", mantissa, "mantissa bits")->required();
    cmp->add_option("--dim", dim, "dimension")->required()->check(CLI::PositiveNumber);
    auto *dec = app.add_subcommand("decompose", "R1..R4 breakdown for the base cell");
    dec->add_option("--seeds", seeds, "number of seeds (default sweep.n_seeds)");

    CLI11_PARSE(app, argc, argv);
    if (seed_opt->count() > 0)
        g.seed = seed;

    try {
        if (*sim)
            return cmd_simulate(g, seeds);
        if (*sweep)
            return cmd_sweep(g, seeds);
        if (*bound)
            return cmd_bound(g);
        if (*cond)
            return cmd_check_conditions(g);
        if (*cmp)
            return cmd_compare(bits, mantissa, dim);
        if (*dec)
            return cmd_decompose(g, seeds);
    } catch (const qsgd::ConfigError &e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
