/*
 * Copyright 2026 The qsgd-sim Authors.
 * SPDX-License-Identifier: Apache-2.0
 */

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "qsgd/bounds.hpp"
#include "qsgd/engine.hpp"
#include "qsgd/parallel.hpp"
#include "qsgd/quantizers.hpp"
#include "qsgd/risk.hpp"
#include "qsgd/rng.hpp"
#include "qsgd/spectrum.hpp"

namespace qsgd {

using json = nlohmann::json;
namespace fs = std::filesystem;

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shortest decimal that parses back to the same double.
inline std::string format_double(double v)
{
    if (std::isnan(v))
        return "nan";
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string hex64(std::uint64_t v)
{
    char buf[17];
    static constexpr char digits[] = "0123456789abcdef";
    for (int i = 15; i >= 0; --i) {
        buf[i] = digits[v & 0xF];
        v >>= 4;
    }
    buf[16] = '\0';
    return buf;
}

// ---------------------------------------------------------------------------
// Config

/// One fully resolved experiment cell.
struct CellConfig {
    json resolved;          // canonical config (no sweep block)
    std::string id;         // hex hash of resolved.dump()
    ProblemSpec spec;
    double a = 0.0;
    SiteQuantizers sites;
    RunConfig run;
    double alpha_B = 3.0;
    double sigma_sq = 0.0;
    bool sigma_sq_heuristic = true;
};

inline json quantizer_to_json(const QuantizerSpec &q)
{
    json j = {{"kind", to_string(q.kind)}};
    switch (q.kind) {
    case QuantizerKind::multiplicative:
    case QuantizerKind::multiplicative_indep:
    case QuantizerKind::additive:
        j["epsilon"] = q.epsilon;
        break;
    case QuantizerKind::int_round:
        j["bits"] = q.bits;
        break;
    case QuantizerKind::fp_round:
        j["mantissa_bits"] = q.mantissa_bits;
        break;
    case QuantizerKind::identity:
        break;
    }
    return j;
}

inline QuantizerSpec quantizer_from_json(const json &j, const std::string &site)
{
    if (j.is_null())
        return QuantizerSpec::identity();
    if (!j.is_object())
        throw ConfigError("quantizers." + site + " must be an object");
    const auto kind_name = j.value("kind", std::string("identity"));
    const auto kind = parse_quantizer_kind(kind_name);
    if (!kind)
        throw ConfigError("quantizers." + site + ": unknown kind '" + kind_name + "'");
    QuantizerSpec q;
    q.kind = *kind;
    q.epsilon = j.value("epsilon", 0.0);
    q.bits = j.value("bits", 0);
    q.mantissa_bits = j.value("mantissa_bits", 0);
    try {
        q.validate();
    } catch (const std::invalid_argument &e) {
        throw ConfigError("quantizers." + site + ": " + e.what());
    }
    return q;
}

template <class T>
T required(const json &j, const char *key, const std::string &where)
{
    if (!j.is_object() || !j.contains(key))
        throw ConfigError(where + "." + key + " is required");
    try {
        return j.at(key).get<T>();
    } catch (const json::exception &) {
        throw ConfigError(where + "." + key + " has the wrong type");
    }
}

/// Fills defaults so that equal experiments hash equally.
inline json normalize_config(json cfg)
{
    if (!cfg.is_object())
        throw ConfigError("config root must be an object");
    cfg.erase("sweep");
    auto &q = cfg["quantizers"];
    if (q.is_null())
        q = json::object();
    for (const char *site : {"data", "label", "param", "activation", "output_grad"})
        q[site] = quantizer_to_json(quantizer_from_json(q.contains(site) ? q[site] : json(), site));
    for (auto it = q.begin(); it != q.end(); ++it)
        if (it.key() != "data" && it.key() != "label" && it.key() != "param" && it.key() != "activation" &&
            it.key() != "output_grad")
            throw ConfigError("quantizers: unknown site '" + it.key() + "'");
    auto &run = cfg["run"];
    if (run.is_null())
        run = json::object();
    if (!run.contains("stepsize"))
        run["stepsize"] = "auto";
    if (!run.contains("batch"))
        run["batch"] = 1;
    if (!run.contains("steps"))
        run["steps"] = 10000;
    if (!run.contains("seed"))
        run["seed"] = 0;
    auto &b = cfg["bounds"];
    if (b.is_null())
        b = json::object();
    if (!b.contains("alpha_B"))
        b["alpha_B"] = 3.0;
    if (!b.contains("sigma_sq"))
        b["sigma_sq"] = "auto";
    return cfg;
}

/// Builds a cell from a config with any sweep block already removed.
inline CellConfig resolve_cell(const json &raw, std::optional<std::uint64_t> seed_override = std::nullopt)
{
    CellConfig c;
    c.resolved = normalize_config(raw);
    if (seed_override)
        c.resolved["run"]["seed"] = *seed_override;
    const json &j = c.resolved;

    const json &p = j.contains("problem") ? j["problem"] : json();
    const auto dim = required<std::size_t>(p, "dim", "problem");
    if (dim < 1)
        throw ConfigError("problem.dim must be >= 1");
    const json &sp = p.contains("spectrum") ? p["spectrum"] : json();
    if (required<std::string>(sp, "kind", "problem.spectrum") != "power_law")
        throw ConfigError("problem.spectrum.kind must be 'power_law'");
    c.a = required<double>(sp, "a", "problem.spectrum");
    const json &ws = p.contains("w_star") ? p["w_star"] : json();
    if (required<std::string>(ws, "kind", "problem.w_star") != "constant")
        throw ConfigError("problem.w_star.kind must be 'constant'");
    const double wv = required<double>(ws, "value", "problem.w_star");
    const double noise = p.value("noise_var", 0.0);
    try {
        c.spec = make_problem(power_law_eigenvalues(dim, c.a), std::vector<double>(dim, wv), noise);
    } catch (const std::invalid_argument &e) {
        throw ConfigError(std::string("problem: ") + e.what());
    }

    const json &q = j["quantizers"];
    c.sites = {quantizer_from_json(q["data"], "data"), quantizer_from_json(q["label"], "label"),
               quantizer_from_json(q["param"], "param"), quantizer_from_json(q["activation"], "activation"),
               quantizer_from_json(q["output_grad"], "output_grad")};

    const json &b = j["bounds"];
    c.alpha_B = required<double>(b, "alpha_B", "bounds");
    if (!(c.alpha_B > 0.0))
        throw ConfigError("bounds.alpha_B must be > 0");
    if (b["sigma_sq"].is_string()) {
        if (b["sigma_sq"] != "auto")
            throw ConfigError("bounds.sigma_sq must be a number or 'auto'");
        c.sigma_sq = default_sigma_sq(c.spec, c.sites, c.alpha_B);
        c.sigma_sq_heuristic = true;
    } else {
        c.sigma_sq = required<double>(b, "sigma_sq", "bounds");
        c.sigma_sq_heuristic = false;
    }

    const json &r = j["run"];
    c.run.steps = required<std::size_t>(r, "steps", "run");
    c.run.batch = required<std::size_t>(r, "batch", "run");
    c.run.seed = required<std::uint64_t>(r, "seed", "run");
    if (r["stepsize"].is_string()) {
        if (r["stepsize"] != "auto")
            throw ConfigError("run.stepsize must be a number or 'auto'");
        c.run.stepsize = default_stepsize(c.spec, c.sites, c.alpha_B);
    } else {
        c.run.stepsize = required<double>(r, "stepsize", "run");
    }
    if (r.contains("checkpoints"))
        c.run.checkpoints = required<std::vector<std::size_t>>(r, "checkpoints", "run");
    try {
        c.run.validate(dim);
    } catch (const std::invalid_argument &e) {
        throw ConfigError(e.what());
    }
    c.id = hex64(fnv1a64(c.resolved.dump()));
    return c;
}

struct Axis {
    std::string path;
    std::vector<json> values;
};

struct SweepConfig {
    json base;
    std::vector<Axis> axes;
    std::size_t n_seeds = 20;
    bool emit_bounds = true;
};

inline SweepConfig parse_sweep(const json &cfg)
{
    SweepConfig s;
    s.base = cfg;
    s.base.erase("sweep");
    if (!cfg.contains("sweep"))
        return s;
    const json &sw = cfg["sweep"];
    s.n_seeds = sw.value("n_seeds", std::size_t{20});
    if (s.n_seeds < 1)
        throw ConfigError("sweep.n_seeds must be >= 1");
    if (sw.contains("emit")) {
        const auto emit = sw["emit"].get<std::vector<std::string>>();
        s.emit_bounds = std::find(emit.begin(), emit.end(), "bounds") != emit.end();
    }
    for (const auto &ax : sw.value("axes", json::array())) {
        Axis a;
        a.path = required<std::string>(ax, "path", "sweep.axes[]");
        a.values = required<std::vector<json>>(ax, "values", "sweep.axes[]");
        if (a.values.empty())
            throw ConfigError("sweep axis '" + a.path + "' has no values");
        s.axes.push_back(std::move(a));
    }
    return s;
}

inline std::vector<std::string> split_path(const std::string &path)
{
    std::vector<std::string> parts;
    std::string cur;
    for (char ch : path) {
        if (ch == '.') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += ch;
        }
    }
    parts.push_back(cur);
    for (const auto &p : parts)
        if (p.empty())
            throw ConfigError("invalid parameter path '" + path + "'");
    return parts;
}

inline void set_path(json &node, const std::vector<std::string> &parts, std::size_t i, const json &value,
                     const std::string &path)
{
    const auto &key = parts[i];
    const bool last = i + 1 == parts.size();
    if (key == "*") {
        if (!node.is_object() || node.empty())
            throw ConfigError("invalid parameter path '" + path + "': wildcard over a non-object");
        for (auto it = node.begin(); it != node.end(); ++it) {
            if (last)
                it.value() = value;
            else
                set_path(it.value(), parts, i + 1, value, path);
        }
        return;
    }
    if (!node.is_object())
        throw ConfigError("invalid parameter path '" + path + "'");
    if (last) {
        node[key] = value;
        return;
    }
    if (!node.contains(key) || !node[key].is_object())
        throw ConfigError("invalid parameter path '" + path + "': '" + key + "' is not an object");
    set_path(node[key], parts, i + 1, value, path);
}

/// Writes `value` at a dotted path; `*` matches every key of an object.
inline void set_path(json &root, const std::string &path, const json &value)
{
    set_path(root, split_path(path), 0, value, path);
}

/// Cross product of the axes, first axis varying slowest.
inline std::vector<json> expand_cells(const SweepConfig &s)
{
    std::vector<json> out{normalize_config(s.base)};
    for (const auto &ax : s.axes) {
        std::vector<json> next;
        next.reserve(out.size() * ax.values.size());
        for (const auto &c : out)
            for (const auto &v : ax.values) {
                json n = c;
                set_path(n, ax.path, v);
                next.push_back(std::move(n));
            }
        out = std::move(next);
    }
    return out;
}

/// Seed of trial t in a cell: independent of every other cell.
inline std::uint64_t trial_seed(std::uint64_t root, const std::string &cell_id, std::uint64_t t)
{
    return derive_seed(derive_seed(root, fnv1a64(cell_id)), t);
}

// ---------------------------------------------------------------------------
// Rows

struct RunRow {
    std::string experiment_id;
    std::uint64_t seed = 0;
    std::string regime;
    std::size_t d = 0;
    double a = 0.0;
    std::size_t B = 0;
    std::size_t N = 0;
    double gamma = 0.0;
    double eps_d = 0.0, eps_l = 0.0, eps_p = 0.0, eps_a = 0.0, eps_o = 0.0;
    std::size_t step = 0;
    double risk_last = 0.0;
    double risk_avg = 0.0;
    std::string status = "ok";
};

inline const char *csv_header() noexcept
{
    return "experiment_id,seed,regime,d,a,B,N,gamma,eps_d,eps_l,eps_p,eps_a,eps_o,step,risk_last,risk_avg,status";
}

inline std::string to_csv(const RunRow &r)
{
    std::string s;
    s.reserve(160);
    auto add = [&s](const std::string &v) {
        if (!s.empty())
            s += ',';
        s += v;
    };
    add(r.experiment_id);
    add(std::to_string(r.seed));
    add(r.regime);
    add(std::to_string(r.d));
    add(format_double(r.a));
    add(std::to_string(r.B));
    add(std::to_string(r.N));
    add(format_double(r.gamma));
    add(format_double(r.eps_d));
    add(format_double(r.eps_l));
    add(format_double(r.eps_p));
    add(format_double(r.eps_a));
    add(format_double(r.eps_o));
    add(std::to_string(r.step));
    add(format_double(r.risk_last));
    add(format_double(r.risk_avg));
    add(r.status);
    return s;
}

inline std::vector<std::string> split_csv_line(const std::string &line)
{
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

inline RunRow row_from_csv(const std::string &line)
{
    const auto f = split_csv_line(line);
    if (f.size() != 17)
        throw std::runtime_error("malformed CSV row: " + line);
    RunRow r;
    r.experiment_id = f[0];
    r.seed = std::stoull(f[1]);
    r.regime = f[2];
    r.d = std::stoull(f[3]);
    r.a = std::stod(f[4]);
    r.B = std::stoull(f[5]);
    r.N = std::stoull(f[6]);
    r.gamma = std::stod(f[7]);
    r.eps_d = std::stod(f[8]);
    r.eps_l = std::stod(f[9]);
    r.eps_p = std::stod(f[10]);
    r.eps_a = std::stod(f[11]);
    r.eps_o = std::stod(f[12]);
    r.step = std::stoull(f[13]);
    r.risk_last = std::stod(f[14]);
    r.risk_avg = std::stod(f[15]);
    r.status = f[16];
    return r;
}

/// Writes via a temporary file and rename so readers never see a partial file.
inline void write_file_atomic(const fs::path &path, const std::string &content)
{
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f)
            throw std::runtime_error("cannot open " + tmp.string() + " for writing");
        f << content;
        f.flush();
        if (!f)
            throw std::runtime_error("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

inline std::string read_file(const fs::path &path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline void sort_rows(std::vector<RunRow> &rows)
{
    std::stable_sort(rows.begin(), rows.end(), [](const RunRow &x, const RunRow &y) {
        if (x.experiment_id != y.experiment_id)
            return x.experiment_id < y.experiment_id;
        if (x.seed != y.seed)
            return x.seed < y.seed;
        return x.step < y.step;
    });
}

inline std::string rows_to_csv(const std::vector<RunRow> &rows)
{
    std::string out = csv_header();
    out += '\n';
    for (const auto &r : rows) {
        out += to_csv(r);
        out += '\n';
    }
    return out;
}

/// Header plus one line per row, canonical order.
inline void emit_csv(std::vector<RunRow> rows, const fs::path &path)
{
    sort_rows(rows);
    write_file_atomic(path, rows_to_csv(rows));
}

inline std::vector<RunRow> read_csv(const fs::path &path)
{
    std::istringstream in(read_file(path));
    std::string line;
    std::vector<RunRow> rows;
    if (!std::getline(in, line))
        return rows;
    if (line != csv_header())
        throw std::runtime_error("unexpected CSV header in " + path.string());
    while (std::getline(in, line))
        if (!line.empty())
            rows.push_back(row_from_csv(line));
    return rows;
}

// ---------------------------------------------------------------------------
// Statistics

/// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(const std::vector<double> &v, double q)
{
    if (v.empty())
        return std::numeric_limits<double>::quiet_NaN();
    const double pos = q * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct Summary {
    std::size_t n = 0;
    double median = std::numeric_limits<double>::quiet_NaN();
    double q25 = std::numeric_limits<double>::quiet_NaN();
    double q75 = std::numeric_limits<double>::quiet_NaN();
    double iqr = std::numeric_limits<double>::quiet_NaN();
    double mean = std::numeric_limits<double>::quiet_NaN();
    double stderr_mean = std::numeric_limits<double>::quiet_NaN();
};

inline Summary summarize(std::vector<double> v)
{
    Summary s;
    s.n = v.size();
    if (v.empty())
        return s;
    std::sort(v.begin(), v.end());
    s.median = quantile_sorted(v, 0.5);
    s.q25 = quantile_sorted(v, 0.25);
    s.q75 = quantile_sorted(v, 0.75);
    s.iqr = s.q75 - s.q25;
    double sum = 0.0;
    for (double x : v)
        sum += x;
    s.mean = sum / static_cast<double>(v.size());
    if (v.size() > 1) {
        double ss = 0.0;
        for (double x : v)
            ss += (x - s.mean) * (x - s.mean);
        s.stderr_mean = std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
    } else {
        s.stderr_mean = 0.0;
    }
    return s;
}

struct CellSummary {
    RunRow key; // cell-level columns; seed/step/risk fields unused
    std::size_t n_seeds = 0;
    std::size_t n_failed = 0;
    Summary final_avg;
};

/// Per-cell statistics of the final averaged risk (last checkpoint of each
/// ok seed).
inline std::vector<CellSummary> summarize_rows(std::vector<RunRow> rows)
{
    sort_rows(rows);
    std::vector<CellSummary> out;
    std::size_t i = 0;
    while (i < rows.size()) {
        CellSummary cs;
        cs.key = rows[i];
        std::vector<double> finals;
        std::size_t j = i;
        while (j < rows.size() && rows[j].experiment_id == rows[i].experiment_id) {
            std::size_t k = j;
            while (k + 1 < rows.size() && rows[k + 1].experiment_id == rows[j].experiment_id &&
                   rows[k + 1].seed == rows[j].seed)
                ++k;
            ++cs.n_seeds;
            if (rows[k].status == "ok")
                finals.push_back(rows[k].risk_avg);
            else
                ++cs.n_failed;
            j = k + 1;
        }
        cs.final_avg = summarize(std::move(finals));
        out.push_back(std::move(cs));
        i = j;
    }
    return out;
}

inline const char *summary_header() noexcept
{
    return "experiment_id,regime,d,a,B,N,gamma,eps_d,eps_l,eps_p,eps_a,eps_o,n_seeds,n_failed,median,q25,q75,iqr,"
           "mean,stderr";
}

inline std::string summaries_to_csv(const std::vector<CellSummary> &cells)
{
    std::string out = summary_header();
    out += '\n';
    for (const auto &c : cells) {
        const auto &k = c.key;
        const auto &s = c.final_avg;
        out += k.experiment_id + ',' + k.regime + ',' + std::to_string(k.d) + ',' + format_double(k.a) + ',' +
               std::to_string(k.B) + ',' + std::to_string(k.N) + ',' + format_double(k.gamma) + ',' +
               format_double(k.eps_d) + ',' + format_double(k.eps_l) + ',' + format_double(k.eps_p) + ',' +
               format_double(k.eps_a) + ',' + format_double(k.eps_o) + ',' + std::to_string(c.n_seeds) + ',' +
               std::to_string(c.n_failed) + ',' + format_double(s.median) + ',' + format_double(s.q25) + ',' +
               format_double(s.q75) + ',' + format_double(s.iqr) + ',' + format_double(s.mean) + ',' +
               format_double(s.stderr_mean) + '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Execution

inline std::string regime_label(const SiteQuantizers &sites)
{
    return sites.all_identity() ? "none" : to_string(bound_regime(sites));
}

inline RunRow cell_row_template(const CellConfig &c)
{
    RunRow r;
    r.experiment_id = c.id;
    r.regime = regime_label(c.sites);
    r.d = c.spec.dim();
    r.a = c.a;
    r.B = c.run.batch;
    r.N = c.run.steps;
    r.gamma = c.run.stepsize;
    r.eps_d = c.sites.data.effective_epsilon();
    r.eps_l = c.sites.label.effective_epsilon();
    r.eps_p = c.sites.param.effective_epsilon();
    r.eps_a = c.sites.activation.effective_epsilon();
    r.eps_o = c.sites.output_grad.effective_epsilon();
    return r;
}

struct TrialResult {
    std::vector<RunRow> rows;
    std::optional<Trajectory> traj;
};

/// One seed of one cell. Divergence becomes a single status row.
inline TrialResult run_trial(const CellConfig &c, std::uint64_t seed)
{
    TrialResult res;
    RunRow base = cell_row_template(c);
    base.seed = seed;
    RunConfig rc = c.run;
    rc.seed = seed;
    try {
        auto traj = run_trajectory(c.spec, c.sites, rc);
        for (std::size_t k = 0; k < traj.risk_avg.size(); ++k) {
            RunRow r = base;
            r.step = traj.risk_avg[k].step;
            r.risk_last = traj.risk_last[k].value;
            r.risk_avg = traj.risk_avg[k].value;
            res.rows.push_back(std::move(r));
        }
        res.traj = std::move(traj);
    } catch (const Divergence &e) {
        RunRow r = base;
        r.step = e.step();
        r.risk_last = std::numeric_limits<double>::quiet_NaN();
        r.risk_avg = std::numeric_limits<double>::quiet_NaN();
        r.status = "diverged";
        res.rows.push_back(std::move(r));
    }
    return res;
}

// Bound report JSON ----------------------------------------------------------

using ordered_json = nlohmann::ordered_json;

inline ordered_json bound_report_json(const BoundReport &r, const std::string &config_hash, double sigma_sq,
                                      bool sigma_heuristic, double alpha_B)
{
    ordered_json j;
    j["config_hash"] = config_hash;
    j["regime"] = to_string(r.regime);
    j["stepsize_ok"] = r.stepsize_ok;
    j["k_star"] = r.k_star;
    j["var_err"] = r.var_err;
    j["bias_err"] = r.bias_err;
    j["approx_err"] = r.approx_err;
    if (r.regime == BoundRegime::general)
        j["quantized_err"] = r.quantized_err;
    j["sigma_eff_sq"] = r.sigma_eff_sq;
    if (r.regime == BoundRegime::multiplicative)
        j["eps_tilde"] = r.eps_tilde;
    if (r.stepsize_ok)
        j["total"] = r.total;
    else
        j["total"] = nullptr;
    j["alpha_B"] = alpha_B;
    j["sigma_sq"] = sigma_sq;
    j["sigma_sq_source"] = sigma_heuristic ? "heuristic" : "configured";
    return j;
}

inline BoundReport bound_report_from_json(const json &j)
{
    BoundReport r;
    const auto regime = j.at("regime").get<std::string>();
    r.regime = regime == "multiplicative" ? BoundRegime::multiplicative
               : regime == "additive"     ? BoundRegime::additive
                                          : BoundRegime::general;
    r.stepsize_ok = j.at("stepsize_ok").get<bool>();
    r.k_star = j.at("k_star").get<std::size_t>();
    r.var_err = j.at("var_err").get<double>();
    r.bias_err = j.at("bias_err").get<double>();
    r.approx_err = j.at("approx_err").get<double>();
    r.quantized_err = j.value("quantized_err", 0.0);
    r.sigma_eff_sq = j.at("sigma_eff_sq").get<double>();
    r.eps_tilde = j.value("eps_tilde", 0.0);
    r.total = j.at("total").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("total").get<double>();
    return r;
}

inline void emit_bound_report(const BoundReport &r, const std::string &config_hash, double sigma_sq,
                              bool sigma_heuristic, double alpha_B, const fs::path &path)
{
    write_file_atomic(path, bound_report_json(r, config_hash, sigma_sq, sigma_heuristic, alpha_B).dump(2) + "\n");
}

/// Bound matching the cell's quantizer family; noise maxima pooled across
/// the supplied runs.
inline BoundReport cell_bound(const CellConfig &c, const NoiseStats &stats)
{
    const auto in = make_bound_inputs(c.spec, c.sites, c.run.steps, c.run.batch, c.run.stepsize, c.alpha_B,
                                      c.sigma_sq, stats);
    return bound_for(in, bound_regime(c.sites));
}

inline NoiseStats pool_noise(const std::vector<TrialResult> &trials)
{
    NoiseStats s;
    for (const auto &t : trials)
        if (t.traj) {
            s.act_out_sup = std::max(s.act_out_sup, t.traj->noise.act_out_sup);
            s.param_trace_sup = std::max(s.param_trace_sup, t.traj->noise.param_trace_sup);
        }
    return s;
}

struct SweepResult {
    std::vector<RunRow> rows;            // canonical order
    std::vector<CellSummary> summaries;  // one per cell
    std::size_t cells_run = 0;
    std::size_t cells_skipped = 0;
};

/// Runs every cell of the sweep for n_seeds trials. With an output
/// directory, each finished cell is written to cells/<id>.csv and
/// existing cell files are reused, so an interrupted sweep resumes where
/// it stopped. runs.csv and summary.csv are written at the end.
inline SweepResult run_sweep(const SweepConfig &s, const std::optional<fs::path> &out_dir, unsigned threads = 1,
                             std::optional<std::uint64_t> seed_override = std::nullopt)
{
    const auto raw = expand_cells(s);
    std::vector<CellConfig> cells;
    cells.reserve(raw.size());
    for (const auto &r : raw)
        cells.push_back(resolve_cell(r, seed_override));
    std::sort(cells.begin(), cells.end(), [](const CellConfig &x, const CellConfig &y) { return x.id < y.id; });
    cells.erase(std::unique(cells.begin(), cells.end(),
                            [](const CellConfig &x, const CellConfig &y) { return x.id == y.id; }),
                cells.end());

    SweepResult out;
    std::vector<std::size_t> todo;
    std::vector<std::vector<RunRow>> cell_rows(cells.size());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (out_dir) {
            const auto f = *out_dir / "cells" / (cells[i].id + ".csv");
            if (fs::exists(f)) {
                cell_rows[i] = read_csv(f);
                ++out.cells_skipped;
                continue;
            }
        }
        todo.push_back(i);
    }

    std::vector<std::vector<TrialResult>> trials(cells.size());
    for (std::size_t i : todo)
        trials[i].resize(s.n_seeds);
    const std::size_t n_tasks = todo.size() * s.n_seeds;
    parallel_for(n_tasks, threads, [&](std::size_t task) {
        const std::size_t ci = todo[task / s.n_seeds];
        const std::size_t t = task % s.n_seeds;
        const auto &c = cells[ci];
        trials[ci][t] = run_trial(c, trial_seed(c.run.seed, c.id, t));
    });

    for (std::size_t i : todo) {
        auto &rows = cell_rows[i];
        for (auto &t : trials[i])
            rows.insert(rows.end(), t.rows.begin(), t.rows.end());
        sort_rows(rows);
        if (out_dir) {
            if (s.emit_bounds) {
                const auto rep = cell_bound(cells[i], pool_noise(trials[i]));
                emit_bound_report(rep, cells[i].id, cells[i].sigma_sq, cells[i].sigma_sq_heuristic, cells[i].alpha_B,
                                  *out_dir / "bounds" / (cells[i].id + ".json"));
            }
            write_file_atomic(*out_dir / "cells" / (cells[i].id + ".json"), cells[i].resolved.dump(2) + "\n");
            write_file_atomic(*out_dir / "cells" / (cells[i].id + ".csv"), rows_to_csv(rows));
        }
        ++out.cells_run;
    }

    for (auto &r : cell_rows)
        out.rows.insert(out.rows.end(), r.begin(), r.end());
    sort_rows(out.rows);
    out.summaries = summarize_rows(out.rows);
    if (out_dir) {
        write_file_atomic(*out_dir / "runs.csv", rows_to_csv(out.rows));
        write_file_atomic(*out_dir / "summary.csv", summaries_to_csv(out.summaries));
    }
    return out;
}

/// Final averaged iterates of n_seeds runs of one cell; throws on divergence.
inline std::vector<Trajectory> run_cell_trajectories(const CellConfig &c, std::size_t n_seeds, unsigned threads = 1)
{
    std::vector<Trajectory> out(n_seeds);
    parallel_for(n_seeds, threads, [&](std::size_t t) {
        RunConfig rc = c.run;
        rc.seed = trial_seed(c.run.seed, c.id, t);
        out[t] = run_trajectory(c.spec, c.sites, rc);
    });
    return out;
}

inline const char *to_string(TermMethod m) noexcept
{
    return m == TermMethod::closed_form ? "closed_form" : "monte_carlo";
}

inline ordered_json breakdown_json(const RiskBreakdown &b, const std::string &config_hash)
{
    ordered_json j;
    j["config_hash"] = config_hash;
    j["n_seeds"] = b.n_seeds;
    j["r1"] = b.r1;
    j["r2"] = b.r2;
    j["r3"] = b.r3;
    j["r4"] = b.r4;
    j["total"] = b.total;
    j["method"] = {{"r1", to_string(b.r1_method)},
                   {"r2", to_string(b.r2_method)},
                   {"r3", to_string(b.r3_method)},
                   {"r4", to_string(b.r4_method)}};
    j["r12_stderr"] = b.r12_stderr;
    j["direct_mean"] = b.direct_mean;
    j["direct_stderr"] = b.direct_stderr;
    return j;
}

inline ordered_json matching_json(const MatchingReport &m, const std::string &config_hash)
{
    ordered_json j;
    j["config_hash"] = config_hash;
    j["regime"] = to_string(m.regime);
    j["R0"] = m.R0;
    j["all_pass"] = m.all_pass();
    ordered_json conds = ordered_json::array();
    for (const auto &c : m.conditions) {
        ordered_json e;
        e["name"] = c.name;
        e["value"] = c.value;
        e["threshold"] = std::isinf(c.threshold) ? ordered_json("inf") : ordered_json(c.threshold);
        e["ratio"] = std::isinf(c.ratio) ? ordered_json("inf") : ordered_json(c.ratio);
        e["pass"] = c.pass;
        conds.push_back(std::move(e));
    }
    j["conditions"] = std::move(conds);
    return j;
}

inline json load_json_file(const fs::path &path)
{
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error &e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

} // namespace qsgd
