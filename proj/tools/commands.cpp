#include "commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "localrd/correlates.hpp"
#include "localrd/csv.hpp"
#include "localrd/errors.hpp"
#include "localrd/hetero_decomp.hpp"
#include "localrd/honest_rd.hpp"
#include "localrd/panel.hpp"
#include "localrd/parallel.hpp"
#include "localrd/shrink_forecast.hpp"
#include "localrd/synth.hpp"
#include "localrd/variance_functional.hpp"

namespace localrd::cli {
namespace {

using ordered_json = nlohmann::ordered_json;

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::config: return 2;
        case ErrorKind::data: return 3;
        case ErrorKind::numeric: return 4;
    }
    return 1;
}

// ---------------------------------------------------------------------------
// Flag parsing helpers.

// Comma-separated period labels; integer ranges like "2008-2013" expand to
// one label per year. Anything else stays literal.
std::set<std::string> parse_periods(const std::string& text) {
    std::set<std::string> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t comma = text.find(',', start);
        const std::string token = text.substr(
            start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!token.empty()) {
            const std::size_t dash = token.find('-');
            bool expanded = false;
            if (dash != std::string::npos && dash > 0 && dash + 1 < token.size()) {
                try {
                    std::size_t la = 0, lb = 0;
                    const int a = std::stoi(token.substr(0, dash), &la);
                    const int b = std::stoi(token.substr(dash + 1), &lb);
                    if (la == dash && lb == token.size() - dash - 1 && a <= b &&
                        b - a < 1000) {
                        for (int y = a; y <= b; ++y) out.insert(std::to_string(y));
                        expanded = true;
                    }
                } catch (const std::exception&) {
                }
            }
            if (!expanded) out.insert(token);
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (out.empty()) throw ConfigError("empty period list");
    return out;
}

std::set<int> parse_donut(const std::string& text) {
    std::set<int> out;
    if (text == "none" || text.empty()) return out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t comma = text.find(',', start);
        const std::string token = text.substr(
            start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!token.empty()) {
            try {
                std::size_t used = 0;
                const int age = std::stoi(token, &used);
                if (used != token.size()) throw std::invalid_argument(token);
                out.insert(age);
            } catch (const std::exception&) {
                throw ConfigError("donut ages must be integers, got '" + token + "'");
            }
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

std::vector<double> parse_reals(const std::string& text, const std::string& flag) {
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t comma = text.find(',', start);
        const std::string token = text.substr(
            start, comma == std::string::npos ? std::string::npos : comma - start);
        if (!token.empty()) {
            const auto v = parse_double(token);
            if (!v) throw ConfigError(flag + " expects numbers, got '" + token + "'");
            out.push_back(*v);
        }
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    if (out.empty()) throw ConfigError(flag + " expects at least one number");
    return out;
}

// ---------------------------------------------------------------------------
// Shared command state.

struct CommonOptions {
    std::string panel_path;
    std::string out_dir = ".";
    std::string outcome; // empty selects every outcome in the panel
    std::string level = "cz";
    int bandwidth = 5;
    std::string donut = "65";
    double bound_scale = 4.0;
    double confidence = 0.95;
    double curvature_k = -1.0; // negative: select from the data
    std::string periods;       // empty: all periods
    std::string weights = "population";
    int parametric = 0; // 0: honest local linear; 1..3: polynomial benchmark
    std::string se_mode = "robust";
    int workers = 1;
    std::uint64_t seed = 1;
};

void add_common_flags(CLI::App* cmd, CommonOptions& o, bool needs_panel = true) {
    auto* panel = cmd->add_option("--panel", o.panel_path, "Panel CSV path");
    if (needs_panel) panel->required();
    cmd->add_option("--out", o.out_dir, "Output directory (created if absent)");
    cmd->add_option("--outcome", o.outcome, "Outcome to analyze (default: every outcome)");
    cmd->add_option("--level", o.level, "Aggregation level")
        ->check(CLI::IsMember({"cz", "state", "national"}));
    cmd->add_option("--bandwidth", o.bandwidth, "Ages on each side of the cutoff")
        ->check(CLI::PositiveNumber);
    cmd->add_option("--donut", o.donut, "Comma-separated ages to drop, or 'none'");
    cmd->add_option("--bound-scale", o.bound_scale, "Multiplier on the pilot curvature");
    cmd->add_option("--confidence", o.confidence, "Interval level in (0,1)");
    cmd->add_option("--curvature-k", o.curvature_k,
                    "Declared curvature bound (default: select from the data)");
    cmd->add_option("--periods", o.periods, "Period filter, e.g. 2014,2015 or 2008-2013");
    cmd->add_option("--weights", o.weights, "Cross-locality weighting")
        ->check(CLI::IsMember({"population", "none"}));
    cmd->add_option("--workers", o.workers, "Worker threads")->check(CLI::PositiveNumber);
    cmd->add_option("--seed", o.seed, "Seed for any randomized step");
}

AgeWindow window_from(const CommonOptions& o) {
    AgeWindow w;
    w.bandwidth = o.bandwidth;
    w.donut_ages = parse_donut(o.donut);
    validate_window(w);
    return w;
}

std::optional<std::set<std::string>> periods_from(const CommonOptions& o) {
    if (o.periods.empty()) return std::nullopt;
    return parse_periods(o.periods);
}

bool population_weighted(const CommonOptions& o) { return o.weights == "population"; }

// Re-keys localities to states when asked. National pooling happens through
// the pseudo-locality instead of a re-key.
LocalityPanel panel_at_level(const LocalityPanel& panel, const std::string& level) {
    if (level != "state") return panel;
    std::vector<OutcomeCell> cells = panel.cells();
    std::map<std::string, LocalityMeta> meta;
    for (auto& cell : cells) {
        const auto it = panel.locality_meta().find(cell.locality_id);
        if (it == panel.locality_meta().end() || it->second.state.empty()) {
            throw DataError("locality '" + cell.locality_id +
                            "' carries no state label; cannot aggregate to states");
        }
        const LocalityMeta& m = it->second;
        auto& state_meta = meta[m.state];
        state_meta.name = m.state;
        state_meta.state = m.state;
        if (state_meta.census_region.empty()) state_meta.census_region = m.census_region;
        if (state_meta.census_division.empty()) state_meta.census_division = m.census_division;
        cell.locality_id = m.state;
    }
    return LocalityPanel::from_cells(std::move(cells), std::move(meta));
}

std::vector<std::string> units_at_level(const LocalityPanel& panel, const std::string& level) {
    if (level == "national") return {};
    return panel.locality_ids();
}

std::string resolve_outcome(const LocalityPanel& panel, const CommonOptions& o) {
    const auto all = panel.outcomes();
    if (o.outcome.empty()) {
        if (all.size() != 1) {
            throw ConfigError("panel has " + std::to_string(all.size()) +
                              " outcomes; pick one with --outcome");
        }
        return all.front();
    }
    if (std::find(all.begin(), all.end(), o.outcome) == all.end()) {
        throw DataError("outcome '" + o.outcome + "' not present in the panel");
    }
    return o.outcome;
}

std::vector<std::string> resolve_outcomes(const LocalityPanel& panel, const CommonOptions& o) {
    if (o.outcome.empty()) return panel.outcomes();
    return {resolve_outcome(panel, o)};
}

// ---------------------------------------------------------------------------
// Output helpers.

std::string out_path(const std::string& dir, const std::string& name) {
    std::filesystem::create_directories(dir);
    return (std::filesystem::path(dir) / name).string();
}

void write_json(const std::string& path, const ordered_json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << j.dump(2) << "\n";
}

std::string fmt(double v) {
    if (std::isnan(v)) return "";
    return format_double(v);
}

ordered_json json_or_null(double v) {
    if (std::isnan(v)) return nullptr;
    return v;
}

ordered_json common_config(const CommonOptions& o) {
    ordered_json c;
    c["panel"] = o.panel_path;
    c["outcome"] = o.outcome.empty() ? ordered_json(nullptr) : ordered_json(o.outcome);
    c["level"] = o.level;
    c["bandwidth"] = o.bandwidth;
    c["donut"] = [&] {
        ordered_json arr = ordered_json::array();
        for (int age : parse_donut(o.donut)) arr.push_back(age);
        return arr;
    }();
    c["bound_scale"] = o.bound_scale;
    c["confidence"] = o.confidence;
    c["curvature_k"] =
        o.curvature_k >= 0.0 ? ordered_json(o.curvature_k) : ordered_json(nullptr);
    c["periods"] = [&] {
        ordered_json arr = ordered_json::array();
        if (const auto p = periods_from(o)) {
            for (const auto& label : *p) arr.push_back(label);
        }
        return arr;
    }();
    c["weights"] = o.weights;
    c["parametric"] = o.parametric > 0 ? ordered_json(o.parametric) : ordered_json(nullptr);
    c["se_mode"] = o.se_mode;
    c["seed"] = o.seed;
    return c;
}

// ---------------------------------------------------------------------------
// Per-unit estimation used by most commands.

struct UnitResult {
    std::string id;
    bool ok = false;
    int exit_kind = 0;
    std::string error;
    RDEstimate est;
    double weight = 0.0; // population the fit used
};

struct EstimateOptions {
    AgeWindow window;
    double bound_scale = 4.0;
    double confidence = 0.95;
    double declared_k = -1.0;
    int parametric = 0;
    SeMode se_mode = SeMode::robust;
    std::optional<std::set<std::string>> periods;
    int workers = 1;
};

EstimateOptions estimate_options(const CommonOptions& o) {
    EstimateOptions e;
    e.window = window_from(o);
    e.bound_scale = o.bound_scale;
    e.confidence = o.confidence;
    e.declared_k = o.curvature_k;
    e.parametric = o.parametric;
    if (o.se_mode == "cluster-age") {
        e.se_mode = SeMode::cluster_on_age;
    } else if (o.se_mode == "robust") {
        e.se_mode = SeMode::robust;
    } else {
        throw ConfigError("--se-mode must be robust or cluster-age");
    }
    e.periods = periods_from(o);
    e.workers = o.workers;
    return e;
}

std::vector<UnitResult> estimate_units(const LocalityPanel& panel,
                                       const std::vector<std::string>& units,
                                       const std::string& outcome,
                                       const EstimateOptions& eo) {
    AgeWindow wide = eo.window;
    if (!panel.empty()) {
        const double span = std::max(std::abs(panel.min_age() - wide.cutoff),
                                     std::abs(panel.max_age() - wide.cutoff));
        wide.bandwidth = std::max(wide.bandwidth, static_cast<int>(std::ceil(span)));
    }

    std::vector<UnitResult> results(units.size());
    SeriesOptions so;
    so.periods = eo.periods;

    parallel_for(units.size(), eo.workers, [&](std::size_t i) {
        UnitResult r;
        r.id = units[i];
        try {
            if (eo.parametric > 0) {
                const AgeSeries series =
                    build_age_series(panel, r.id, outcome, eo.window, so);
                r.est = estimate_rd_parametric(series, eo.parametric, eo.se_mode,
                                               eo.confidence);
                for (const auto& pt : series.points) r.weight += pt.weight;
            } else {
                const AgeSeries series = build_age_series(panel, r.id, outcome, wide, so);
                HonestRDConfig hc;
                hc.window = eo.window;
                hc.bound_scale = eo.bound_scale;
                hc.confidence = eo.confidence;
                hc.curvature_bound = eo.declared_k >= 0.0
                                         ? eo.declared_k
                                         : select_curvature_bound(series, 0, eo.bound_scale);
                r.est = estimate_rd(series, hc);
                for (const auto& pt : series.points) {
                    if (std::abs(pt.offset) <= eo.window.bandwidth) r.weight += pt.weight;
                }
            }
            r.ok = true;
        } catch (const Error& e) {
            r.error = e.what();
            r.exit_kind = exit_code_for(e.kind());
        } catch (const std::exception& e) {
            r.error = e.what();
            r.exit_kind = 1;
        }
        results[i] = std::move(r);
    });
    return results;
}

// Exit contract shared by batch commands: success unless every unit failed,
// in which case the first failure decides the code.
int batch_exit(const std::vector<UnitResult>& results) {
    if (results.empty()) return 0;
    for (const auto& r : results) {
        if (r.ok) return 0;
    }
    return results.front().exit_kind == 0 ? 1 : results.front().exit_kind;
}

// ---------------------------------------------------------------------------
// estimate

struct EstimateCmd {
    CommonOptions common;
    std::vector<std::string> sweeps;
};

int cmd_estimate(const EstimateCmd& cmd) {
    const CommonOptions& o = cmd.common;
    const LocalityPanel panel = panel_at_level(load_panel(o.panel_path), o.level);
    const std::vector<std::string> outcomes = resolve_outcomes(panel, o);

    std::vector<int> bandwidths{o.bandwidth};
    std::vector<double> scales{o.bound_scale};
    for (const auto& sweep : cmd.sweeps) {
        const std::size_t eq = sweep.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("--sweep expects name=v1,v2,..., got '" + sweep + "'");
        }
        const std::string key = sweep.substr(0, eq);
        const std::vector<double> values = parse_reals(sweep.substr(eq + 1), "--sweep");
        if (key == "bandwidth") {
            bandwidths.clear();
            for (double v : values) {
                if (v < 1.0 || v != std::floor(v)) {
                    throw ConfigError("bandwidth sweep values must be positive integers");
                }
                bandwidths.push_back(static_cast<int>(v));
            }
        } else if (key == "bound_scale") {
            scales = values;
        } else {
            throw ConfigError("--sweep supports bandwidth and bound_scale, got '" + key + "'");
        }
    }

    const std::vector<std::string> localities = units_at_level(panel, o.level);

    CsvTable estimates;
    estimates.header = {"locality_id",  "outcome",  "gamma",       "se",
                        "bias_bound",   "ci_low",   "ci_high",     "y_minus",
                        "y_plus",       "k",        "bandwidth",   "bound_scale",
                        "n_cells_left", "n_cells_right", "status", "error"};
    std::vector<UnitResult> locality_results; // every locality row, for the exit code
    ordered_json national_summary = ordered_json::array();
    long failed = 0;

    const auto append_row = [&](const UnitResult& r, const std::string& outcome, int bw,
                                double bs) {
        std::vector<std::string> row(estimates.header.size());
        row[0] = r.id;
        row[1] = outcome;
        row[10] = std::to_string(bw);
        row[11] = format_double(bs);
        if (r.ok) {
            row[2] = fmt(r.est.gamma);
            row[3] = fmt(r.est.se);
            row[4] = fmt(r.est.bias_bound);
            row[5] = fmt(r.est.ci_low);
            row[6] = fmt(r.est.ci_high);
            row[7] = fmt(r.est.y_minus);
            row[8] = fmt(r.est.y_plus);
            row[9] = fmt(r.est.config.curvature_bound);
            row[12] = std::to_string(r.est.n_cells_left);
            row[13] = std::to_string(r.est.n_cells_right);
            row[14] = "ok";
        } else {
            row[14] = "error";
            row[15] = r.error;
        }
        estimates.rows.push_back(std::move(row));
    };

    for (const auto& outcome : outcomes) {
        for (int bw : bandwidths) {
            for (double bs : scales) {
                CommonOptions grid = o;
                grid.bandwidth = bw;
                grid.bound_scale = bs;
                const EstimateOptions eo = estimate_options(grid);

                const std::vector<UnitResult> per_locality =
                    estimate_units(panel, localities, outcome, eo);
                for (const auto& r : per_locality) {
                    append_row(r, outcome, bw, bs);
                    if (!r.ok) ++failed;
                }
                locality_results.insert(locality_results.end(), per_locality.begin(),
                                        per_locality.end());

                const std::vector<UnitResult> national =
                    estimate_units(panel, {kNationalId}, outcome, eo);
                append_row(national.front(), outcome, bw, bs);
                if (!national.front().ok) ++failed;
                if (bw == o.bandwidth && bs == o.bound_scale) {
                    ordered_json n;
                    n["outcome"] = outcome;
                    if (national.front().ok) {
                        n["gamma"] = national.front().est.gamma;
                        n["se"] = national.front().est.se;
                        n["ci_low"] = national.front().est.ci_low;
                        n["ci_high"] = national.front().est.ci_high;
                        n["k"] = national.front().est.config.curvature_bound;
                    } else {
                        n["error"] = national.front().error;
                    }
                    national_summary.push_back(std::move(n));
                }
                if (localities.empty()) {
                    // national level: the pooled row is the whole batch
                    locality_results.push_back(national.front());
                }
            }
        }
    }
    write_csv(out_path(o.out_dir, "estimates.csv"), estimates.header, estimates.rows);

    // Plot data at the flag-level window: observed per-age means (donut ages
    // included, they are data even when excluded from fits) plus the two
    // boundary predictions drawn just off the cutoff.
    CsvTable plot;
    plot.header = {"locality_id", "outcome", "age", "value", "population", "kind"};
    {
        const EstimateOptions eo = estimate_options(o);
        AgeWindow no_donut = eo.window;
        no_donut.donut_ages.clear();
        SeriesOptions so;
        so.periods = eo.periods;
        std::vector<std::string> plot_units = localities;
        plot_units.push_back(kNationalId);
        for (const auto& outcome : outcomes) {
            const std::vector<UnitResult> fits = estimate_units(panel, plot_units, outcome, eo);
            for (std::size_t u = 0; u < plot_units.size(); ++u) {
                try {
                    const AgeSeries series =
                        build_age_series(panel, plot_units[u], outcome, no_donut, so);
                    for (const auto& pt : series.points) {
                        plot.rows.push_back({plot_units[u], outcome,
                                             fmt(pt.offset + series.cutoff), fmt(pt.value),
                                             fmt(pt.weight), "data"});
                    }
                } catch (const Error&) {
                    continue; // no usable cells; the estimates table carries the error
                }
                if (fits[u].ok) {
                    const double cutoff = eo.window.cutoff;
                    plot.rows.push_back({plot_units[u], outcome, fmt(cutoff - 0.1),
                                         fmt(fits[u].est.y_minus), "", "fit"});
                    plot.rows.push_back({plot_units[u], outcome, fmt(cutoff + 0.1),
                                         fmt(fits[u].est.y_plus), "", "fit"});
                }
            }
        }
    }
    write_csv(out_path(o.out_dir, "estimate_plotdata.csv"), plot.header, plot.rows);

    ordered_json summary;
    summary["command"] = "estimate";
    summary["config"] = common_config(o);
    summary["config"]["sweep_bandwidth"] = bandwidths;
    summary["config"]["sweep_bound_scale"] = scales;
    summary["outcomes"] = outcomes;
    summary["localities"] = localities.size();
    summary["rows"] = estimates.rows.size();
    summary["failed_rows"] = failed;
    summary["national"] = national_summary;
    write_json(out_path(o.out_dir, "estimate_summary.json"), summary);

    return batch_exit(locality_results);
}

// ---------------------------------------------------------------------------
// variance

int cmd_variance(const CommonOptions& o) {
    const LocalityPanel panel = panel_at_level(load_panel(o.panel_path), o.level);
    const std::vector<std::string> outcomes = resolve_outcomes(panel, o);
    const std::vector<std::string> localities = units_at_level(panel, o.level);
    if (localities.size() < 2) {
        throw ConfigError("variance reduction needs at least 2 localities at level '" +
                          o.level + "'");
    }
    const EstimateOptions eo = estimate_options(o);

    CsvTable table;
    table.header = {"locality_id", "outcome",    "y_minus",    "y_plus",
                    "se_minus",    "se_plus",    "bias_minus", "bias_plus",
                    "weight",      "status",     "error"};
    ordered_json results = ordered_json::array();
    bool any_ok = false;
    int first_error = 0;

    for (const auto& outcome : outcomes) {
        const std::vector<UnitResult> units = estimate_units(panel, localities, outcome, eo);

        std::vector<std::string> ids;
        std::vector<double> f0, g0, se_f, se_g, bias_f, bias_g, weights;
        for (const auto& r : units) {
            std::vector<std::string> row(table.header.size());
            row[0] = r.id;
            row[1] = outcome;
            if (r.ok) {
                row[2] = fmt(r.est.y_minus);
                row[3] = fmt(r.est.y_plus);
                row[4] = fmt(r.est.se_minus);
                row[5] = fmt(r.est.se_plus);
                row[6] = fmt(r.est.bias_minus);
                row[7] = fmt(r.est.bias_plus);
                row[8] = fmt(population_weighted(o) ? r.weight : 1.0);
                row[9] = "ok";
                ids.push_back(r.id);
                f0.push_back(r.est.y_minus);
                g0.push_back(r.est.y_plus);
                se_f.push_back(r.est.se_minus);
                se_g.push_back(r.est.se_plus);
                bias_f.push_back(r.est.bias_minus);
                bias_g.push_back(r.est.bias_plus);
                weights.push_back(population_weighted(o) ? r.weight : 1.0);
            } else {
                row[9] = "error";
                row[10] = r.error;
                if (first_error == 0) first_error = r.exit_kind;
            }
            table.rows.push_back(std::move(row));
        }

        ordered_json entry;
        entry["outcome"] = outcome;
        entry["n_localities"] = ids.size();
        entry["n_failed"] = units.size() - ids.size();
        try {
            const CounterfactualSet set = make_counterfactual_set(
                ids, f0, g0, se_f, se_g, bias_f, bias_g, weights);
            const VarianceReductionResult v = phi_inference(set, o.confidence);
            entry["phi"] = v.phi;
            entry["se"] = v.se;
            entry["bias_bound"] = v.bias_bound;
            entry["ci_low"] = v.ci_low;
            entry["ci_high"] = v.ci_high;
            entry["var_pre"] = v.var_pre;
            entry["var_post"] = v.var_post;
            any_ok = true;
        } catch (const Error& e) {
            entry["error"] = e.what();
            if (first_error == 0) first_error = exit_code_for(e.kind());
        }
        results.push_back(std::move(entry));
    }

    write_csv(out_path(o.out_dir, "counterfactuals.csv"), table.header, table.rows);
    ordered_json summary;
    summary["command"] = "variance";
    summary["config"] = common_config(o);
    summary["results"] = results;
    write_json(out_path(o.out_dir, "variance.json"), summary);

    if (!any_ok) return first_error == 0 ? 1 : first_error;
    return 0;
}

// ---------------------------------------------------------------------------
// shrink

int cmd_shrink(const CommonOptions& o) {
    const LocalityPanel panel = panel_at_level(load_panel(o.panel_path), o.level);
    const std::vector<std::string> outcomes = resolve_outcomes(panel, o);
    const std::vector<std::string> localities = units_at_level(panel, o.level);
    const EstimateOptions eo = estimate_options(o);
    const WeightMode mode =
        population_weighted(o) ? WeightMode::precision : WeightMode::uniform;

    CsvTable table;
    table.header = {"locality_id", "outcome", "gamma", "se",
                    "shrunk",      "shrink_factor", "status", "error"};
    ordered_json results = ordered_json::array();
    bool any_ok = false;
    int first_error = 0;

    for (const auto& outcome : outcomes) {
        const std::vector<UnitResult> units = estimate_units(panel, localities, outcome, eo);
        EstimateVector est;
        for (const auto& r : units) {
            if (!r.ok) {
                if (first_error == 0) first_error = r.exit_kind;
                continue;
            }
            est.localities.push_back(r.id);
            est.gamma.push_back(r.est.gamma);
            est.s.push_back(r.est.se);
        }

        ordered_json entry;
        entry["outcome"] = outcome;
        entry["n_localities"] = est.localities.size();
        entry["n_failed"] = units.size() - est.localities.size();
        std::optional<ShrinkageResult> shrunk;
        try {
            shrunk = eb_shrink(est, true, mode);
            entry["center"] = shrunk->center;
            entry["signal_variance"] = shrunk->signal_variance;
            any_ok = true;
        } catch (const Error& e) {
            entry["error"] = e.what();
            if (first_error == 0) first_error = exit_code_for(e.kind());
        }
        results.push_back(std::move(entry));

        std::size_t next = 0;
        for (const auto& r : units) {
            std::vector<std::string> row(table.header.size());
            row[0] = r.id;
            row[1] = outcome;
            if (r.ok) {
                row[2] = fmt(r.est.gamma);
                row[3] = fmt(r.est.se);
                if (shrunk) {
                    row[4] = fmt(shrunk->shrunk[next]);
                    row[5] = fmt(shrunk->factor[next]);
                }
                row[6] = "ok";
                ++next;
            } else {
                row[6] = "error";
                row[7] = r.error;
            }
            table.rows.push_back(std::move(row));
        }
    }

    write_csv(out_path(o.out_dir, "shrinkage.csv"), table.header, table.rows);
    ordered_json summary;
    summary["command"] = "shrink";
    summary["config"] = common_config(o);
    summary["results"] = results;
    write_json(out_path(o.out_dir, "shrink_summary.json"), summary);
    if (!any_ok) return first_error == 0 ? 1 : first_error;
    return 0;
}

// ---------------------------------------------------------------------------
// forecast and correlate share the scaled-estimate plumbing.

struct ScaledUnits {
    std::vector<UnitResult> raw;                 // reduced-form estimates
    std::vector<std::string> ids;                // usable localities
    std::vector<double> gamma, s, weights;       // per usable locality
    std::vector<std::pair<std::string, std::string>> excluded; // id, reason
    int first_error = 0;
};

// Per-locality estimates on the chosen target scale. per-newly-insured
// rescales by the first-stage jump and drops weak or failed first stages.
ScaledUnits scaled_units(const LocalityPanel& panel, const std::vector<std::string>& localities,
                         const std::string& outcome, const EstimateOptions& eo,
                         const CommonOptions& o, const std::string& target,
                         const std::string& first_stage_outcome) {
    ScaledUnits su;
    su.raw = estimate_units(panel, localities, outcome, eo);

    std::vector<UnitResult> first_stage;
    if (target == "per-newly-insured") {
        if (first_stage_outcome.empty()) {
            throw ConfigError("--target per-newly-insured needs --first-stage-outcome");
        }
        first_stage = estimate_units(panel, localities, first_stage_outcome, eo);
    }

    for (std::size_t i = 0; i < su.raw.size(); ++i) {
        const UnitResult& r = su.raw[i];
        if (!r.ok) {
            su.excluded.emplace_back(r.id, r.error);
            if (su.first_error == 0) su.first_error = r.exit_kind;
            continue;
        }
        double gamma = r.est.gamma;
        double s = r.est.se;
        if (!first_stage.empty()) {
            const UnitResult& h = first_stage[i];
            if (!h.ok) {
                su.excluded.emplace_back(r.id, "first stage: " + h.error);
                if (su.first_error == 0) su.first_error = h.exit_kind;
                continue;
            }
            try {
                const ScaledEstimate scaled = fuzzy_scale(r.est, h.est, r.id);
                if (scaled.weak) {
                    su.excluded.emplace_back(r.id, "weak first stage");
                    continue;
                }
                gamma = scaled.beta;
                s = scaled.se;
            } catch (const Error& e) {
                su.excluded.emplace_back(r.id, e.what());
                if (su.first_error == 0) su.first_error = exit_code_for(e.kind());
                continue;
            }
        }
        su.ids.push_back(r.id);
        su.gamma.push_back(gamma);
        su.s.push_back(s);
        su.weights.push_back(population_weighted(o) ? r.weight : 1.0);
    }
    return su;
}

// Covariate rows for exactly the requested localities, in their order.
// Localities without a covariate row are an alignment error.
CovariateMatrix align_covariates(const CovariateMatrix& all,
                                 const std::vector<std::string>& ids,
                                 const std::vector<double>& weights) {
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < all.localities.size(); ++i) index[all.localities[i]] = i;
    std::string missing;
    std::vector<std::size_t> rows;
    for (const auto& id : ids) {
        const auto it = index.find(id);
        if (it == index.end()) {
            if (!missing.empty()) missing += ", ";
            missing += id;
        } else {
            rows.push_back(it->second);
        }
    }
    if (!missing.empty()) {
        throw DataError("localities missing from the covariates file: " + missing);
    }
    CovariateMatrix out;
    out.localities = ids;
    out.names = all.names;
    out.columns.resize(all.columns.size());
    for (std::size_t j = 0; j < all.columns.size(); ++j) {
        out.columns[j].reserve(rows.size());
        for (std::size_t r : rows) out.columns[j].push_back(all.columns[j][r]);
    }
    out.weights = weights;
    return out;
}

struct ForecastCmd {
    CommonOptions common;
    std::string covariates_path;
    std::string target = "per-capita";
    std::string first_stage_outcome;
    int folds = 5;
};

int cmd_forecast(const ForecastCmd& cmd) {
    const CommonOptions& o = cmd.common;
    const LocalityPanel panel = panel_at_level(load_panel(o.panel_path), o.level);
    const std::string outcome = resolve_outcome(panel, o);
    const std::vector<std::string> localities = units_at_level(panel, o.level);
    const EstimateOptions eo = estimate_options(o);

    const ScaledUnits su = scaled_units(panel, localities, outcome, eo, o, cmd.target,
                                        cmd.first_stage_outcome);
    if (su.ids.empty()) {
        return su.first_error == 0 ? 3 : su.first_error;
    }

    const CovariateMatrix covariates =
        align_covariates(load_covariates(cmd.covariates_path), su.ids, su.weights);
    const CovariateMatrix standardized = standardize(covariates, population_weighted(o));
    const FitResult lasso = lasso_cv(su.gamma, standardized, cmd.folds, o.seed);

    std::vector<double> predictions(su.ids.size(), lasso.intercept);
    for (std::size_t j = 0; j < standardized.columns.size(); ++j) {
        if (lasso.coefficients[j] == 0.0) continue;
        for (std::size_t i = 0; i < predictions.size(); ++i) {
            predictions[i] += lasso.coefficients[j] * standardized.columns[j][i];
        }
    }

    EstimateVector est;
    est.localities = su.ids;
    est.gamma = su.gamma;
    est.s = su.s;
    const WeightMode mode =
        population_weighted(o) ? WeightMode::precision : WeightMode::uniform;
    const ForecastModel model = fit_forecast_combination(est, predictions, mode);
    const ForecastResult fc = mse_forecast(model, est, predictions);

    CsvTable table;
    table.header = {"locality_id", "outcome", "gamma",         "s",     "prediction",
                    "forecast",    "rmse",    "shrink_weight", "status", "error"};
    std::map<std::string, std::size_t> used;
    for (std::size_t i = 0; i < su.ids.size(); ++i) used[su.ids[i]] = i;
    std::map<std::string, std::string> excluded;
    for (const auto& [id, reason] : su.excluded) excluded[id] = reason;
    for (const auto& id : localities) {
        std::vector<std::string> row(table.header.size());
        row[0] = id;
        row[1] = outcome;
        const auto it = used.find(id);
        if (it != used.end()) {
            const std::size_t i = it->second;
            row[2] = fmt(su.gamma[i]);
            row[3] = fmt(su.s[i]);
            row[4] = fmt(predictions[i]);
            row[5] = fmt(fc.forecast[i]);
            row[6] = fmt(fc.rmse[i]);
            row[7] = fmt(fc.shrink_weight[i]);
            row[8] = "ok";
        } else {
            row[8] = "excluded";
            row[9] = excluded[id];
        }
        table.rows.push_back(std::move(row));
    }
    write_csv(out_path(o.out_dir, "forecasts.csv"), table.header, table.rows);

    ordered_json summary;
    summary["command"] = "forecast";
    summary["config"] = common_config(o);
    summary["config"]["covariates"] = cmd.covariates_path;
    summary["config"]["target"] = cmd.target;
    summary["config"]["first_stage_outcome"] =
        cmd.first_stage_outcome.empty() ? ordered_json(nullptr)
                                        : ordered_json(cmd.first_stage_outcome);
    summary["config"]["folds"] = cmd.folds;
    summary["outcome"] = outcome;
    summary["n_used"] = su.ids.size();
    summary["n_excluded"] = su.excluded.size();
    ordered_json excl = ordered_json::array();
    for (const auto& [id, reason] : su.excluded) {
        excl.push_back(ordered_json{{"locality_id", id}, {"reason", reason}});
    }
    summary["excluded"] = excl;
    summary["tau"] = model.tau;
    summary["chi2"] = model.chi2;
    summary["gamma_bar"] = model.gamma_bar;
    summary["pred_bar"] = model.pred_bar;
    summary["lambda"] = lasso.lambda ? ordered_json(*lasso.lambda) : ordered_json(nullptr);
    ordered_json selected = ordered_json::array();
    for (std::size_t j = 0; j < lasso.names.size(); ++j) {
        if (lasso.selected[j]) selected.push_back(lasso.names[j]);
    }
    summary["selected"] = selected;
    ordered_json warnings = ordered_json::array();
    for (const auto& w : lasso.warnings) warnings.push_back(w);
    for (const auto& w : model.warnings) warnings.push_back(w);
    summary["warnings"] = warnings;
    write_json(out_path(o.out_dir, "forecast_summary.json"), summary);
    return 0;
}

// ---------------------------------------------------------------------------
// correlate

struct CorrelateCmd {
    CommonOptions common;
    std::string covariates_path;
    std::string target = "per-capita";
    std::string first_stage_outcome;
    std::string group_by = "none"; // none | state | region | division
    bool standardized = true;
    bool scale_by_national = false;
    int folds = 5;
};

int cmd_correlate(const CorrelateCmd& cmd) {
    const CommonOptions& o = cmd.common;
    const LocalityPanel panel = panel_at_level(load_panel(o.panel_path), o.level);
    const std::string outcome = resolve_outcome(panel, o);
    const std::vector<std::string> localities = units_at_level(panel, o.level);
    const EstimateOptions eo = estimate_options(o);

    const ScaledUnits su = scaled_units(panel, localities, outcome, eo, o, cmd.target,
                                        cmd.first_stage_outcome);
    if (su.ids.empty()) {
        return su.first_error == 0 ? 3 : su.first_error;
    }

    const CovariateMatrix aligned =
        align_covariates(load_covariates(cmd.covariates_path), su.ids, su.weights);
    const CovariateMatrix standardized = standardize(aligned, population_weighted(o));
    const CovariateMatrix& design = cmd.standardized ? standardized : aligned;

    std::optional<double> national_scale;
    if (cmd.scale_by_national) {
        const std::vector<UnitResult> national =
            estimate_units(panel, {kNationalId}, outcome, eo);
        if (!national.front().ok) {
            throw DataError("national estimate failed: " + national.front().error);
        }
        national_scale = national.front().est.gamma;
    }

    std::vector<std::string> groups;
    if (cmd.group_by != "none") {
        for (const auto& id : su.ids) {
            const auto it = panel.locality_meta().find(id);
            std::string label;
            if (it != panel.locality_meta().end()) {
                if (cmd.group_by == "state") label = it->second.state;
                if (cmd.group_by == "region") label = it->second.census_region;
                if (cmd.group_by == "division") label = it->second.census_division;
            }
            if (label.empty()) {
                throw DataError("locality '" + id + "' has no " + cmd.group_by + " label");
            }
            groups.push_back(label);
        }
    }

    const double z = folded_normal_cv(0.0, o.confidence);
    CsvTable table;
    table.header = {"covariate", "estimate", "se",      "ci_low", "ci_high",
                    "model",     "fe_mode",  "scaled"};
    const std::string fe_mode = cmd.group_by;
    const std::string scaled_flag = cmd.scale_by_national ? "true" : "false";
    const auto maybe_scale = [&](FitResult fit) {
        if (national_scale) fit = scale_coefficients(std::move(fit), *national_scale);
        return fit;
    };
    const auto add_rows = [&](const FitResult& fit, const std::string& model,
                              bool selected_only) {
        if (!std::isnan(fit.intercept_se)) {
            table.rows.push_back({"(intercept)", fmt(fit.intercept), fmt(fit.intercept_se),
                                  fmt(fit.intercept - z * fit.intercept_se),
                                  fmt(fit.intercept + z * fit.intercept_se), model, fe_mode,
                                  scaled_flag});
        }
        for (std::size_t j = 0; j < fit.names.size(); ++j) {
            if (selected_only && !fit.selected[j]) continue;
            table.rows.push_back({fit.names[j], fmt(fit.coefficients[j]), fmt(fit.ses[j]),
                                  fmt(fit.coefficients[j] - z * fit.ses[j]),
                                  fmt(fit.coefficients[j] + z * fit.ses[j]), model, fe_mode,
                                  scaled_flag});
        }
    };

    ordered_json model_stats = ordered_json::array();
    ordered_json warnings = ordered_json::array();

    for (std::size_t j = 0; j < design.columns.size(); ++j) {
        const FitResult fit = maybe_scale(weighted_bivariate(
            su.gamma, design.columns[j], design.weights, design.names[j]));
        FitResult named = fit;
        add_rows(named, "bivariate", false);
    }

    {
        const FitResult fit = maybe_scale(weighted_multivariate_ols(
            su.gamma, design, std::span<const std::string>(groups)));
        add_rows(fit, "multivariate", false);
        model_stats.push_back(
            ordered_json{{"model", "multivariate"}, {"r_squared", json_or_null(fit.r_squared)}});
    }

    const FitResult lasso = lasso_cv(su.gamma, standardized, cmd.folds, o.seed);
    for (const auto& w : lasso.warnings) warnings.push_back(w);
    {
        const FitResult fit =
            maybe_scale(post_lasso_ols(su.gamma, standardized, lasso.selected));
        for (const auto& w : fit.warnings) warnings.push_back(w);
        add_rows(fit, "post-lasso", true);
        model_stats.push_back(
            ordered_json{{"model", "post-lasso"}, {"r_squared", json_or_null(fit.r_squared)}});
    }

    write_csv(out_path(o.out_dir, "correlates.csv"), table.header, table.rows);

    ordered_json summary;
    summary["command"] = "correlate";
    summary["config"] = common_config(o);
    summary["config"]["covariates"] = cmd.covariates_path;
    summary["config"]["target"] = cmd.target;
    summary["config"]["first_stage_outcome"] =
        cmd.first_stage_outcome.empty() ? ordered_json(nullptr)
                                        : ordered_json(cmd.first_stage_outcome);
    summary["config"]["group_by"] = cmd.group_by;
    summary["config"]["standardize"] = cmd.standardized;
    summary["config"]["scale_by_national"] = cmd.scale_by_national;
    summary["config"]["folds"] = cmd.folds;
    summary["outcome"] = outcome;
    summary["n_used"] = su.ids.size();
    summary["n_excluded"] = su.excluded.size();
    ordered_json excl = ordered_json::array();
    for (const auto& [id, reason] : su.excluded) {
        excl.push_back(ordered_json{{"locality_id", id}, {"reason", reason}});
    }
    summary["excluded"] = excl;
    summary["lambda"] = lasso.lambda ? ordered_json(*lasso.lambda) : ordered_json(nullptr);
    ordered_json selected = ordered_json::array();
    for (std::size_t j = 0; j < lasso.names.size(); ++j) {
        if (lasso.selected[j]) selected.push_back(lasso.names[j]);
    }
    summary["selected"] = selected;
    summary["national_scale"] =
        national_scale ? ordered_json(*national_scale) : ordered_json(nullptr);
    summary["models"] = model_stats;
    summary["warnings"] = warnings;
    write_json(out_path(o.out_dir, "correlate_summary.json"), summary);
    return 0;
}

// ---------------------------------------------------------------------------
// decompose

struct DecomposeCmd {
    CommonOptions common;
    std::string pre_periods;
    std::string post_periods;
    std::string baseline_periods;
    std::string first_stage_outcome;
    std::string group_by = "region";
    bool diff_in_disc = false;
};

ordered_json kob_json(const KobResult& k, std::size_t n) {
    ordered_json j;
    j["n_localities"] = n;
    j["eta"] = k.eta;
    j["eta1"] = k.eta1;
    j["eta2"] = k.eta2;
    j["eta3"] = k.eta3;
    j["e_gamma_pre"] = k.e_gamma_pre;
    j["e_gamma_post"] = k.e_gamma_post;
    j["e_beta_pre"] = k.e_beta_pre;
    j["e_beta_post"] = k.e_beta_post;
    j["e_h_pre"] = k.e_h_pre;
    j["e_h_post"] = k.e_h_post;
    j["cov_pre"] = k.cov_pre;
    j["cov_post"] = k.cov_post;
    j["residual_pre"] = k.residual_pre;
    j["residual_post"] = k.residual_post;
    j["identity_gap"] =
        (k.eta1 + k.eta2 + k.eta3) - (k.e_gamma_post - k.e_gamma_pre);
    return j;
}

int cmd_decompose(const DecomposeCmd& cmd) {
    const CommonOptions& o = cmd.common;
    if (cmd.pre_periods.empty() || cmd.post_periods.empty()) {
        throw ConfigError("decompose needs --pre-periods and --post-periods");
    }
    if (cmd.first_stage_outcome.empty()) {
        throw ConfigError("decompose needs --first-stage-outcome");
    }
    const std::set<std::string> pre = parse_periods(cmd.pre_periods);
    const std::set<std::string> post = parse_periods(cmd.post_periods);
    for (const auto& p : post) {
        if (pre.count(p)) throw ConfigError("pre and post periods overlap at '" + p + "'");
    }

    const LocalityPanel panel = panel_at_level(load_panel(o.panel_path), o.level);
    const std::string outcome = resolve_outcome(panel, o);
    const std::vector<std::string> localities = units_at_level(panel, o.level);

    EstimateOptions eo = estimate_options(o);
    eo.periods = pre;
    const std::vector<UnitResult> gamma_pre = estimate_units(panel, localities, outcome, eo);
    const std::vector<UnitResult> h_pre =
        estimate_units(panel, localities, cmd.first_stage_outcome, eo);
    eo.periods = post;
    const std::vector<UnitResult> gamma_post = estimate_units(panel, localities, outcome, eo);
    const std::vector<UnitResult> h_post =
        estimate_units(panel, localities, cmd.first_stage_outcome, eo);

    PeriodEstimates pre_est, post_est;
    ordered_json excluded = ordered_json::array();
    int first_error = 0;
    std::vector<std::string> groups;
    for (std::size_t i = 0; i < localities.size(); ++i) {
        const auto note_exclusion = [&](const std::string& reason, int kind) {
            excluded.push_back(
                ordered_json{{"locality_id", localities[i]}, {"reason", reason}});
            if (first_error == 0 && kind != 0) first_error = kind;
        };
        if (!gamma_pre[i].ok) { note_exclusion(gamma_pre[i].error, gamma_pre[i].exit_kind); continue; }
        if (!gamma_post[i].ok) { note_exclusion(gamma_post[i].error, gamma_post[i].exit_kind); continue; }
        if (!h_pre[i].ok) { note_exclusion("first stage: " + h_pre[i].error, h_pre[i].exit_kind); continue; }
        if (!h_post[i].ok) { note_exclusion("first stage: " + h_post[i].error, h_post[i].exit_kind); continue; }
        ScaledEstimate beta_pre, beta_post;
        try {
            beta_pre = fuzzy_scale(gamma_pre[i].est, h_pre[i].est, localities[i]);
            beta_post = fuzzy_scale(gamma_post[i].est, h_post[i].est, localities[i]);
        } catch (const Error& e) {
            note_exclusion(e.what(), exit_code_for(e.kind()));
            continue;
        }
        if (beta_pre.weak || beta_post.weak) {
            note_exclusion("weak first stage", 0);
            continue;
        }
        const double weight = population_weighted(o) ? gamma_pre[i].weight : 1.0;
        pre_est.localities.push_back(localities[i]);
        pre_est.beta.push_back(beta_pre.beta);
        pre_est.coverage.push_back(beta_pre.first_stage);
        pre_est.weights.push_back(weight);
        pre_est.gamma.push_back(beta_pre.gamma);
        post_est.localities.push_back(localities[i]);
        post_est.beta.push_back(beta_post.beta);
        post_est.coverage.push_back(beta_post.first_stage);
        post_est.weights.push_back(weight);
        post_est.gamma.push_back(beta_post.gamma);

        if (cmd.group_by != "none") {
            const auto it = panel.locality_meta().find(localities[i]);
            std::string label;
            if (it != panel.locality_meta().end()) {
                if (cmd.group_by == "state") label = it->second.state;
                if (cmd.group_by == "region") label = it->second.census_region;
                if (cmd.group_by == "division") label = it->second.census_division;
            }
            groups.push_back(label.empty() ? "(none)" : label);
        }
    }

    ordered_json summary;
    summary["command"] = "decompose";
    summary["config"] = common_config(o);
    summary["config"]["pre_periods"] = pre;
    summary["config"]["post_periods"] = post;
    summary["config"]["first_stage_outcome"] = cmd.first_stage_outcome;
    summary["config"]["group_by"] = cmd.group_by;
    summary["config"]["diff_in_disc"] = cmd.diff_in_disc;
    summary["config"]["baseline_periods"] =
        cmd.baseline_periods.empty() ? ordered_json(nullptr)
                                     : ordered_json(parse_periods(cmd.baseline_periods));
    summary["outcome"] = outcome;
    summary["excluded"] = excluded;

    try {
        const KobResult overall = kob_decompose(pre_est, post_est);
        summary["overall"] = kob_json(overall, pre_est.localities.size());
    } catch (const Error& e) {
        summary["overall"] = ordered_json{{"error", e.what()}};
        write_json(out_path(o.out_dir, "decomposition.json"), summary);
        return first_error != 0 ? first_error : exit_code_for(e.kind());
    }

    // Group results: one decomposition per label, then pairwise differences.
    ordered_json group_results = ordered_json::array();
    ordered_json differences = ordered_json::array();
    if (cmd.group_by != "none") {
        std::map<std::string, std::vector<std::size_t>> by_group;
        for (std::size_t i = 0; i < groups.size(); ++i) by_group[groups[i]].push_back(i);
        std::map<std::string, KobResult> fitted;
        for (const auto& [label, idx] : by_group) {
            PeriodEstimates gp, gq;
            for (std::size_t i : idx) {
                gp.localities.push_back(pre_est.localities[i]);
                gp.beta.push_back(pre_est.beta[i]);
                gp.coverage.push_back(pre_est.coverage[i]);
                gp.weights.push_back(pre_est.weights[i]);
                gp.gamma.push_back(pre_est.gamma[i]);
                gq.localities.push_back(post_est.localities[i]);
                gq.beta.push_back(post_est.beta[i]);
                gq.coverage.push_back(post_est.coverage[i]);
                gq.weights.push_back(post_est.weights[i]);
                gq.gamma.push_back(post_est.gamma[i]);
            }
            ordered_json entry;
            entry["group"] = label;
            try {
                const KobResult k = kob_decompose(gp, gq);
                entry.update(kob_json(k, idx.size()));
                fitted[label] = k;
            } catch (const Error& e) {
                entry["error"] = e.what();
            }
            group_results.push_back(std::move(entry));
        }
        for (auto a = fitted.begin(); a != fitted.end(); ++a) {
            for (auto b = std::next(a); b != fitted.end(); ++b) {
                differences.push_back(ordered_json{
                    {"pair", a->first + " - " + b->first},
                    {"eta", a->second.eta - b->second.eta},
                    {"eta1", a->second.eta1 - b->second.eta1},
                    {"eta2", a->second.eta2 - b->second.eta2},
                    {"eta3", a->second.eta3 - b->second.eta3},
                });
            }
        }
    }
    summary["groups"] = group_results;
    summary["differences"] = differences;
    write_json(out_path(o.out_dir, "decomposition.json"), summary);

    if (cmd.diff_in_disc) {
        if (cmd.baseline_periods.empty()) {
            throw ConfigError("--diff-in-disc needs --baseline-periods");
        }
        const std::set<std::string> baseline = parse_periods(cmd.baseline_periods);
        HonestRDConfig hc;
        hc.window = window_from(o);
        hc.bound_scale = o.bound_scale;
        hc.confidence = o.confidence;
        hc.curvature_bound = o.curvature_k >= 0.0 ? o.curvature_k : 0.0;

        CsvTable table;
        table.header = {"locality_id", "outcome", "gamma",  "se",    "bias_bound", "ci_low",
                        "ci_high",     "k",       "status", "error"};
        std::vector<UnitResult> results(localities.size());
        parallel_for(localities.size(), o.workers, [&](std::size_t i) {
            UnitResult r;
            r.id = localities[i];
            try {
                r.est = diff_in_disc(panel, r.id, outcome, baseline, post, hc);
                r.ok = true;
            } catch (const Error& e) {
                r.error = e.what();
                r.exit_kind = exit_code_for(e.kind());
            }
            results[i] = std::move(r);
        });
        for (const auto& r : results) {
            std::vector<std::string> row(table.header.size());
            row[0] = r.id;
            row[1] = outcome;
            if (r.ok) {
                row[2] = fmt(r.est.gamma);
                row[3] = fmt(r.est.se);
                row[4] = fmt(r.est.bias_bound);
                row[5] = fmt(r.est.ci_low);
                row[6] = fmt(r.est.ci_high);
                row[7] = fmt(r.est.config.curvature_bound);
                row[8] = "ok";
            } else {
                row[8] = "error";
                row[9] = r.error;
            }
            table.rows.push_back(std::move(row));
        }
        write_csv(out_path(o.out_dir, "diffdisc.csv"), table.header, table.rows);
    }
    return 0;
}

// ---------------------------------------------------------------------------
// binscatter

struct BinscatterCmd {
    std::string input;
    std::string x_col;
    std::string y_col;
    std::string weight_col;
    int bins = 20;
    std::string out_dir = ".";
};

int cmd_binscatter(const BinscatterCmd& cmd) {
    if (cmd.bins < 1) throw ConfigError("--bins must be positive");
    const CsvTable table = read_csv(cmd.input);
    const auto col = [&](const std::string& name) {
        const auto idx = table.column(name);
        if (!idx) throw DataError("missing column '" + name + "' in " + cmd.input);
        return *idx;
    };
    const std::size_t xi = col(cmd.x_col);
    const std::size_t yi = col(cmd.y_col);
    std::optional<std::size_t> wi;
    if (!cmd.weight_col.empty()) wi = col(cmd.weight_col);

    std::vector<double> x, y, w;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto parse = [&](std::size_t c, const std::string& name) {
            const auto v = parse_double(table.rows[r][c]);
            if (!v) {
                throw DataError("line " + std::to_string(r + 2) + ": non-numeric " + name);
            }
            return *v;
        };
        x.push_back(parse(xi, cmd.x_col));
        y.push_back(parse(yi, cmd.y_col));
        w.push_back(wi ? parse(*wi, cmd.weight_col) : 1.0);
        if (!(w.back() > 0.0)) {
            throw DataError("line " + std::to_string(r + 2) + ": weights must be positive");
        }
    }
    if (x.size() < static_cast<std::size_t>(cmd.bins)) {
        throw ConfigError("asked for " + std::to_string(cmd.bins) + " bins but only " +
                          std::to_string(x.size()) + " points are available");
    }

    // Equal-weight bins: sort by x (index breaks ties) and cut at each point's
    // cumulative weight midpoint.
    std::vector<std::size_t> order(x.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (x[a] != x[b]) return x[a] < x[b];
        return a < b;
    });
    double total = 0.0;
    for (double v : w) total += v;
    struct Bin {
        double wx = 0.0, wy = 0.0, weight = 0.0;
        long n = 0;
    };
    std::vector<Bin> bins(static_cast<std::size_t>(cmd.bins));
    double cum = 0.0;
    for (const std::size_t i : order) {
        const double mid = cum + w[i] / 2.0;
        auto b = static_cast<std::size_t>(mid / total * cmd.bins);
        if (b >= bins.size()) b = bins.size() - 1;
        bins[b].wx += w[i] * x[i];
        bins[b].wy += w[i] * y[i];
        bins[b].weight += w[i];
        bins[b].n += 1;
        cum += w[i];
    }

    CsvTable out;
    out.header = {"bin", "x", "y", "weight", "n_points"};
    for (std::size_t b = 0; b < bins.size(); ++b) {
        if (bins[b].n == 0) continue;
        out.rows.push_back({std::to_string(b), fmt(bins[b].wx / bins[b].weight),
                            fmt(bins[b].wy / bins[b].weight), fmt(bins[b].weight),
                            std::to_string(bins[b].n)});
    }
    write_csv(out_path(cmd.out_dir, "binscatter.csv"), out.header, out.rows);

    ordered_json summary;
    summary["command"] = "binscatter";
    summary["config"] = ordered_json{{"input", cmd.input},
                                     {"x", cmd.x_col},
                                     {"y", cmd.y_col},
                                     {"weight_col", cmd.weight_col.empty()
                                                        ? ordered_json(nullptr)
                                                        : ordered_json(cmd.weight_col)},
                                     {"bins", cmd.bins}};
    summary["n_points"] = x.size();
    try {
        const FitResult fit = weighted_bivariate(y, x, w, cmd.x_col);
        summary["fit"] = ordered_json{{"slope", fit.coefficients[0]},
                                      {"slope_se", fit.ses[0]},
                                      {"intercept", fit.intercept},
                                      {"intercept_se", fit.intercept_se},
                                      {"r_squared", json_or_null(fit.r_squared)}};
    } catch (const Error& e) {
        summary["fit"] = ordered_json{{"error", e.what()}};
    }
    write_json(out_path(cmd.out_dir, "binscatter_summary.json"), summary);
    return 0;
}

// ---------------------------------------------------------------------------
// simulate and coverage share the DGP flags.

struct SynthCmd {
    int n = 50;
    int min_age = 55;
    int max_age = 75;
    double cutoff = 65.0;
    std::string outcome = "y";
    std::string periods = "all";
    double base_level = 100.0;
    double level_sd = 10.0;
    double slope_sd = 0.0;
    double noise_sd = 1.0;
    double pop_min = 1000.0;
    double pop_max = 1000.0;
    std::string gamma_values; // fixed mode when set
    double gamma_mean = -2.0;
    double gamma_sd = 1.0;
    int link_covariates = 0; // covariate-link mode when positive
    std::string link_coefs;
    double link_intercept = 0.0;
    double link_noise_sd = 0.0;
    double k_true = 0.0;
    double slope_left = 0.0;
    double quad_left = 0.0;
    double cubic_left = 0.0;
    double slope_right = 0.0;
    double quad_right = 0.0;
    double cubic_right = 0.0;
    std::uint64_t seed = 1;
    std::string out_dir = ".";
};

void add_synth_flags(CLI::App* cmd, SynthCmd& s) {
    cmd->add_option("--n", s.n, "Number of localities");
    cmd->add_option("--min-age", s.min_age, "Lowest age");
    cmd->add_option("--max-age", s.max_age, "Highest age");
    cmd->add_option("--cutoff", s.cutoff, "Eligibility cutoff");
    cmd->add_option("--outcome-name", s.outcome, "Outcome label for the cells");
    cmd->add_option("--period-labels", s.periods, "Comma-separated period labels");
    cmd->add_option("--base-level", s.base_level, "Mean profile level");
    cmd->add_option("--level-sd", s.level_sd, "Locality level spread");
    cmd->add_option("--slope-sd", s.slope_sd, "Locality slope spread");
    cmd->add_option("--noise-sd", s.noise_sd, "Cell noise scale");
    cmd->add_option("--pop-min", s.pop_min, "Smallest locality population");
    cmd->add_option("--pop-max", s.pop_max, "Largest locality population");
    cmd->add_option("--gamma-values", s.gamma_values,
                    "Fixed jumps, one value or one per locality");
    cmd->add_option("--gamma-mean", s.gamma_mean, "Mean of random jumps");
    cmd->add_option("--gamma-sd", s.gamma_sd, "Spread of random jumps");
    cmd->add_option("--link-covariates", s.link_covariates,
                    "Draw this many covariates and link jumps to them");
    cmd->add_option("--link-coefs", s.link_coefs, "Comma-separated link coefficients");
    cmd->add_option("--link-intercept", s.link_intercept, "Link intercept");
    cmd->add_option("--link-noise-sd", s.link_noise_sd, "Noise around the link");
    cmd->add_option("--k-true", s.k_true, "Declared curvature bound");
    cmd->add_option("--slope-left", s.slope_left, "Left slope");
    cmd->add_option("--quad-left", s.quad_left, "Left quadratic coefficient");
    cmd->add_option("--cubic-left", s.cubic_left, "Left cubic coefficient");
    cmd->add_option("--slope-right", s.slope_right, "Right slope");
    cmd->add_option("--quad-right", s.quad_right, "Right quadratic coefficient");
    cmd->add_option("--cubic-right", s.cubic_right, "Right cubic coefficient");
    cmd->add_option("--seed", s.seed, "Generator seed");
    cmd->add_option("--out", s.out_dir, "Output directory");
}

SynthConfig synth_config(const SynthCmd& s) {
    SynthConfig c;
    c.n_localities = s.n;
    c.min_age = s.min_age;
    c.max_age = s.max_age;
    c.cutoff = s.cutoff;
    c.outcome = s.outcome;
    c.periods.clear();
    for (const auto& p : parse_periods(s.periods)) c.periods.push_back(p);
    c.base_level = s.base_level;
    c.level_sd = s.level_sd;
    c.slope_sd = s.slope_sd;
    c.noise_sd = s.noise_sd;
    c.population.min = s.pop_min;
    c.population.max = s.pop_max;
    if (!s.gamma_values.empty() && s.link_covariates > 0) {
        throw ConfigError("--gamma-values and --link-covariates are mutually exclusive");
    }
    if (!s.gamma_values.empty()) {
        c.gamma.kind = GammaSpec::Kind::fixed;
        c.gamma.values = parse_reals(s.gamma_values, "--gamma-values");
    } else if (s.link_covariates > 0) {
        c.gamma.kind = GammaSpec::Kind::covariate_link;
        c.gamma.n_covariates = s.link_covariates;
        if (!s.link_coefs.empty()) {
            c.gamma.coefficients = parse_reals(s.link_coefs, "--link-coefs");
        }
        c.gamma.link_intercept = s.link_intercept;
        c.gamma.link_noise_sd = s.link_noise_sd;
    } else {
        c.gamma.kind = GammaSpec::Kind::normal;
        c.gamma.mean = s.gamma_mean;
        c.gamma.sd = s.gamma_sd;
    }
    c.curvature.k_true = s.k_true;
    c.curvature.left = SideCurve{s.slope_left, s.quad_left, s.cubic_left};
    c.curvature.right = SideCurve{s.slope_right, s.quad_right, s.cubic_right};
    c.seed = s.seed;
    return c;
}

ordered_json synth_config_json(const SynthCmd& s) {
    ordered_json c;
    c["n"] = s.n;
    c["min_age"] = s.min_age;
    c["max_age"] = s.max_age;
    c["cutoff"] = s.cutoff;
    c["outcome"] = s.outcome;
    c["periods"] = parse_periods(s.periods);
    c["base_level"] = s.base_level;
    c["level_sd"] = s.level_sd;
    c["slope_sd"] = s.slope_sd;
    c["noise_sd"] = s.noise_sd;
    c["pop_min"] = s.pop_min;
    c["pop_max"] = s.pop_max;
    if (!s.gamma_values.empty()) {
        c["gamma"] = ordered_json{{"kind", "fixed"}, {"values", s.gamma_values}};
    } else if (s.link_covariates > 0) {
        c["gamma"] = ordered_json{{"kind", "covariate_link"},
                                  {"n_covariates", s.link_covariates},
                                  {"coefficients", s.link_coefs},
                                  {"intercept", s.link_intercept},
                                  {"noise_sd", s.link_noise_sd}};
    } else {
        c["gamma"] =
            ordered_json{{"kind", "normal"}, {"mean", s.gamma_mean}, {"sd", s.gamma_sd}};
    }
    c["k_true"] = s.k_true;
    c["left"] = ordered_json{{"slope", s.slope_left}, {"quad", s.quad_left},
                             {"cubic", s.cubic_left}};
    c["right"] = ordered_json{{"slope", s.slope_right}, {"quad", s.quad_right},
                              {"cubic", s.cubic_right}};
    c["seed"] = s.seed;
    return c;
}

int cmd_simulate(const SynthCmd& cmd) {
    const SynthConfig config = synth_config(cmd);
    const auto [panel, truth] = generate(config);
    export_panel(panel, out_path(cmd.out_dir, "panel.csv"));

    CsvTable truth_table;
    truth_table.header = {"locality_id", "gamma", "f0", "g0", "population"};
    for (std::size_t l = 0; l < truth.localities.size(); ++l) {
        truth_table.rows.push_back({truth.localities[l], fmt(truth.gamma[l]),
                                    fmt(truth.f0[l]), fmt(truth.g0[l]),
                                    fmt(truth.population[l])});
    }
    write_csv(out_path(cmd.out_dir, "truth.csv"), truth_table.header, truth_table.rows);

    if (!truth.covariates.localities.empty()) {
        CsvTable cov;
        cov.header = {"locality_id"};
        for (const auto& name : truth.covariates.names) cov.header.push_back(name);
        for (std::size_t l = 0; l < truth.localities.size(); ++l) {
            std::vector<std::string> row{truth.localities[l]};
            for (const auto& column : truth.covariates.columns) {
                row.push_back(fmt(column[l]));
            }
            cov.rows.push_back(std::move(row));
        }
        write_csv(out_path(cmd.out_dir, "covariates.csv"), cov.header, cov.rows);
    }

    ordered_json summary;
    summary["command"] = "simulate";
    summary["config"] = synth_config_json(cmd);
    summary["n_localities"] = truth.localities.size();
    summary["n_cells"] = panel.cells().size();
    summary["k_true"] = truth.k_true;
    summary["phi"] = json_or_null(truth.phi);
    if (!truth.true_coefficients.empty()) {
        summary["true_coefficients"] = truth.true_coefficients;
    }
    write_json(out_path(cmd.out_dir, "simulate_summary.json"), summary);
    return 0;
}

struct CoverageCmd {
    SynthCmd synth;
    std::string estimator = "honest";
    std::string k_source = "declared";
    double k_fixed = 0.0;
    double bound_scale = 4.0;
    int order = 1;
    std::string se_mode = "robust";
    int bandwidth = 5;
    std::string donut = "65";
    double confidence = 0.95;
    int replications = 500;
    int workers = 1;
};

int cmd_coverage(const CoverageCmd& cmd) {
    const SynthConfig config = synth_config(cmd.synth);
    EstimatorSpec spec;
    if (cmd.estimator == "honest") {
        spec.kind = EstimatorSpec::Kind::honest;
    } else if (cmd.estimator == "conventional") {
        spec.kind = EstimatorSpec::Kind::conventional;
    } else if (cmd.estimator == "parametric") {
        spec.kind = EstimatorSpec::Kind::parametric;
    } else {
        throw ConfigError("--estimator must be honest, conventional or parametric");
    }
    if (cmd.k_source == "declared") {
        spec.k_source = EstimatorSpec::KSource::declared;
    } else if (cmd.k_source == "pilot") {
        spec.k_source = EstimatorSpec::KSource::pilot;
    } else if (cmd.k_source == "fixed") {
        spec.k_source = EstimatorSpec::KSource::fixed;
    } else {
        throw ConfigError("--k-source must be declared, pilot or fixed");
    }
    spec.k_fixed = cmd.k_fixed;
    spec.bound_scale = cmd.bound_scale;
    spec.order = cmd.order;
    spec.se_mode = cmd.se_mode == "cluster-age" ? SeMode::cluster_on_age : SeMode::robust;
    spec.window.bandwidth = cmd.bandwidth;
    spec.window.donut_ages = parse_donut(cmd.donut);
    spec.confidence = cmd.confidence;

    const CoverageReport report = coverage_study(config, spec, cmd.replications, cmd.workers);

    ordered_json summary;
    summary["command"] = "coverage";
    summary["config"] = synth_config_json(cmd.synth);
    summary["config"]["estimator"] = cmd.estimator;
    summary["config"]["k_source"] = cmd.k_source;
    summary["config"]["k_fixed"] = cmd.k_fixed;
    summary["config"]["bound_scale"] = cmd.bound_scale;
    summary["config"]["order"] = cmd.order;
    summary["config"]["se_mode"] = cmd.se_mode;
    summary["config"]["bandwidth"] = cmd.bandwidth;
    summary["config"]["donut"] = cmd.donut;
    summary["config"]["confidence"] = cmd.confidence;
    summary["config"]["replications"] = cmd.replications;
    summary["events"] = report.events;
    summary["covered"] = report.covered;
    summary["coverage"] = report.coverage;
    summary["mean_ci_length"] = report.mean_ci_length;
    summary["worst_locality_coverage"] = report.worst_locality_coverage;
    summary["replications"] = report.replications;
    write_json(out_path(cmd.synth.out_dir, "coverage.json"), summary);
    return 0;
}

} // namespace

int run(int argc, char** argv) {
    CLI::App app{"Local discontinuity estimation toolkit"};
    app.require_subcommand(1);

    EstimateCmd estimate;
    auto* estimate_cmd =
        app.add_subcommand("estimate", "Boundary jumps per locality plus the pooled estimate");
    add_common_flags(estimate_cmd, estimate.common);
    estimate_cmd->add_option("--parametric", estimate.common.parametric,
                             "Polynomial benchmark of this order instead of the honest fit")
        ->check(CLI::Range(1, 3));
    estimate_cmd->add_option("--se-mode", estimate.common.se_mode,
                             "Benchmark standard errors: robust or cluster-age");
    estimate_cmd->add_option("--sweep", estimate.sweeps,
                             "Grid like bandwidth=3,4,5 or bound_scale=1,2,4 (repeatable)");

    CommonOptions variance;
    auto* variance_cmd =
        app.add_subcommand("variance", "Cross-locality variance reduction at the cutoff");
    add_common_flags(variance_cmd, variance);

    CommonOptions shrink;
    auto* shrink_cmd = app.add_subcommand("shrink", "Shrink noisy estimates to a common mean");
    add_common_flags(shrink_cmd, shrink);

    ForecastCmd forecast;
    auto* forecast_cmd =
        app.add_subcommand("forecast", "Combine estimates with covariate predictions");
    add_common_flags(forecast_cmd, forecast.common);
    forecast_cmd->add_option("--covariates", forecast.covariates_path, "Covariates CSV")
        ->required();
    forecast_cmd->add_option("--target", forecast.target, "per-capita or per-newly-insured")
        ->check(CLI::IsMember({"per-capita", "per-newly-insured"}));
    forecast_cmd->add_option("--first-stage-outcome", forecast.first_stage_outcome,
                             "Coverage outcome used to rescale");
    forecast_cmd->add_option("--folds", forecast.folds, "Cross-validation folds")
        ->check(CLI::PositiveNumber);

    CorrelateCmd correlate;
    auto* correlate_cmd =
        app.add_subcommand("correlate", "Regress per-locality estimates on covariates");
    add_common_flags(correlate_cmd, correlate.common);
    correlate_cmd->add_option("--covariates", correlate.covariates_path, "Covariates CSV")
        ->required();
    correlate_cmd->add_option("--target", correlate.target, "per-capita or per-newly-insured")
        ->check(CLI::IsMember({"per-capita", "per-newly-insured"}));
    correlate_cmd->add_option("--first-stage-outcome", correlate.first_stage_outcome,
                              "Coverage outcome used to rescale");
    correlate_cmd->add_option("--group-by", correlate.group_by,
                              "Absorb fixed effects: none, state, region or division")
        ->check(CLI::IsMember({"none", "state", "region", "division"}));
    correlate_cmd->add_flag("--standardize,!--no-standardize", correlate.standardized,
                            "Standardize covariates before fitting (default on)");
    correlate_cmd->add_flag("--scale-by-national", correlate.scale_by_national,
                            "Report coefficients relative to the pooled national estimate");
    correlate_cmd->add_option("--folds", correlate.folds, "Cross-validation folds")
        ->check(CLI::PositiveNumber);

    DecomposeCmd decompose;
    auto* decompose_cmd =
        app.add_subcommand("decompose", "Split the change in the mean jump across periods");
    add_common_flags(decompose_cmd, decompose.common);
    decompose_cmd->add_option("--pre-periods", decompose.pre_periods, "Pre-period labels")
        ->required();
    decompose_cmd->add_option("--post-periods", decompose.post_periods, "Post-period labels")
        ->required();
    decompose_cmd
        ->add_option("--baseline-periods", decompose.baseline_periods,
                     "Baseline periods for the differenced design")
        ->default_str("");
    decompose_cmd
        ->add_option("--first-stage-outcome", decompose.first_stage_outcome,
                     "Coverage outcome used to rescale")
        ->required();
    decompose_cmd->add_option("--group-by", decompose.group_by,
                              "Report per group: none, state, region or division")
        ->check(CLI::IsMember({"none", "state", "region", "division"}));
    decompose_cmd->add_flag("--diff-in-disc", decompose.diff_in_disc,
                            "Also difference each locality against the baseline periods");

    BinscatterCmd binscatter;
    auto* binscatter_cmd =
        app.add_subcommand("binscatter", "Equal-weight binned means of y against x");
    binscatter_cmd->add_option("--input", binscatter.input, "CSV with the points")->required();
    binscatter_cmd->add_option("--x", binscatter.x_col, "x column")->required();
    binscatter_cmd->add_option("--y", binscatter.y_col, "y column")->required();
    binscatter_cmd->add_option("--weight-col", binscatter.weight_col, "Optional weight column");
    binscatter_cmd->add_option("--bins", binscatter.bins, "Number of bins");
    binscatter_cmd->add_option("--out", binscatter.out_dir, "Output directory");

    SynthCmd simulate;
    auto* simulate_cmd =
        app.add_subcommand("simulate", "Write a synthetic panel with known truth");
    add_synth_flags(simulate_cmd, simulate);

    CoverageCmd coverage;
    auto* coverage_cmd =
        app.add_subcommand("coverage", "Monte-Carlo interval coverage against known truth");
    add_synth_flags(coverage_cmd, coverage.synth);
    coverage_cmd->add_option("--estimator", coverage.estimator,
                             "honest, conventional or parametric");
    coverage_cmd->add_option("--k-source", coverage.k_source, "declared, pilot or fixed");
    coverage_cmd->add_option("--k-fixed", coverage.k_fixed, "Bound for --k-source fixed");
    coverage_cmd->add_option("--bound-scale", coverage.bound_scale, "Pilot multiplier");
    coverage_cmd->add_option("--order", coverage.order, "Polynomial order")
        ->check(CLI::Range(1, 3));
    coverage_cmd->add_option("--se-mode", coverage.se_mode, "robust or cluster-age");
    coverage_cmd->add_option("--bandwidth", coverage.bandwidth, "Estimation bandwidth")
        ->check(CLI::PositiveNumber);
    coverage_cmd->add_option("--donut", coverage.donut, "Ages to drop, or 'none'");
    coverage_cmd->add_option("--confidence", coverage.confidence, "Interval level");
    coverage_cmd->add_option("--replications", coverage.replications, "Monte-Carlo draws");
    coverage_cmd->add_option("--workers", coverage.workers, "Worker threads")
        ->check(CLI::PositiveNumber);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (app.got_subcommand(estimate_cmd)) return cmd_estimate(estimate);
        if (app.got_subcommand(variance_cmd)) return cmd_variance(variance);
        if (app.got_subcommand(shrink_cmd)) return cmd_shrink(shrink);
        if (app.got_subcommand(forecast_cmd)) return cmd_forecast(forecast);
        if (app.got_subcommand(correlate_cmd)) return cmd_correlate(correlate);
        if (app.got_subcommand(decompose_cmd)) return cmd_decompose(decompose);
        if (app.got_subcommand(binscatter_cmd)) return cmd_binscatter(binscatter);
        if (app.got_subcommand(simulate_cmd)) return cmd_simulate(simulate);
        if (app.got_subcommand(coverage_cmd)) return cmd_coverage(coverage);
        return 2;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace localrd::cli
