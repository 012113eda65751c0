#include "localrd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "localrd/errors.hpp"
#include "localrd/parallel.hpp"
#include "localrd/rng.hpp"

namespace localrd {

namespace {

void validate_config(const SynthConfig& c) {
    if (c.n_localities < 1) throw ConfigError("need at least one locality");
    if (c.min_age >= c.max_age) throw ConfigError("min_age must be below max_age");
    if (!(c.cutoff > c.min_age) || !(c.cutoff < c.max_age)) {
        throw ConfigError("cutoff must lie strictly inside the age range");
    }
    if (!(c.noise_sd >= 0.0) || !std::isfinite(c.noise_sd)) {
        throw ConfigError("noise_sd must be finite and nonnegative");
    }
    if (!(c.level_sd >= 0.0) || !(c.slope_sd >= 0.0)) {
        throw ConfigError("level_sd and slope_sd must be nonnegative");
    }
    if (!std::isfinite(c.base_level)) throw ConfigError("base_level must be finite");
    if (c.periods.empty()) throw ConfigError("at least one period label is required");
    {
        std::set<std::string> seen;
        for (const auto& p : c.periods) {
            if (p.empty()) throw ConfigError("period labels must be nonempty");
            if (!seen.insert(p).second) throw ConfigError("duplicate period label '" + p + "'");
        }
    }
    if (c.outcome.empty()) throw ConfigError("outcome label must be nonempty");
    if (!(c.population.min > 0.0) || !(c.population.max >= c.population.min) ||
        !std::isfinite(c.population.max)) {
        throw ConfigError("population bounds must satisfy 0 < min <= max < infinity");
    }

    const GammaSpec& g = c.gamma;
    switch (g.kind) {
        case GammaSpec::Kind::fixed:
            if (g.values.size() != 1 &&
                g.values.size() != static_cast<std::size_t>(c.n_localities)) {
                throw ConfigError("fixed gamma needs one value or one per locality");
            }
            for (double v : g.values) {
                if (!std::isfinite(v)) throw ConfigError("fixed gamma values must be finite");
            }
            break;
        case GammaSpec::Kind::normal:
            if (!std::isfinite(g.mean) || !(g.sd >= 0.0) || !std::isfinite(g.sd)) {
                throw ConfigError("normal gamma needs a finite mean and nonnegative sd");
            }
            break;
        case GammaSpec::Kind::covariate_link:
            if (g.n_covariates < 1) throw ConfigError("covariate link needs n_covariates >= 1");
            if (g.coefficients.size() > static_cast<std::size_t>(g.n_covariates)) {
                throw ConfigError("more link coefficients than covariates");
            }
            if (!(g.link_noise_sd >= 0.0) || !std::isfinite(g.link_intercept)) {
                throw ConfigError("covariate link parameters out of range");
            }
            break;
    }

    const CurvatureSpec& k = c.curvature;
    if (!(k.k_true >= 0.0) || !std::isfinite(k.k_true)) {
        throw ConfigError("k_true must be finite and nonnegative");
    }
    // |2q + 6cx| is linear in x, so side maxima sit at interval endpoints.
    const double tol = 1e-12 * std::max(1.0, k.k_true);
    const auto side_max = [](const SideCurve& s, double x_lo, double x_hi) {
        return std::max(std::abs(2.0 * s.quad + 6.0 * s.cubic * x_lo),
                        std::abs(2.0 * s.quad + 6.0 * s.cubic * x_hi));
    };
    const double left_max = side_max(k.left, c.min_age - c.cutoff, 0.0);
    const double right_max = side_max(k.right, 0.0, c.max_age - c.cutoff);
    if (left_max > k.k_true + tol || right_max > k.k_true + tol) {
        throw ConfigError("profile curvature exceeds the declared bound: max |f''| = " +
                          std::to_string(std::max(left_max, right_max)) + " vs k_true = " +
                          std::to_string(k.k_true));
    }
}

std::string padded_label(char prefix, int value, std::size_t width) {
    std::string digits = std::to_string(value);
    if (digits.size() < width) digits.insert(0, width - digits.size(), '0');
    return prefix + digits;
}

// Naive two-pass weighted variance ratio, the ground-truth side of the
// oracle pair. Keep free of the estimator's numeric helpers.
double naive_phi(std::span<const double> f, std::span<const double> g,
                 std::span<const double> w) {
    double wsum = 0.0;
    for (double x : w) wsum += x;
    double mf = 0.0, mg = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        mf += w[i] * f[i];
        mg += w[i] * g[i];
    }
    mf /= wsum;
    mg /= wsum;
    double vf = 0.0, vg = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        vf += w[i] * (f[i] - mf) * (f[i] - mf);
        vg += w[i] * (g[i] - mg) * (g[i] - mg);
    }
    vf /= wsum;
    vg /= wsum;
    if (!(vf > 0.0)) return std::numeric_limits<double>::quiet_NaN();
    return 1.0 - vg / vf;
}

} // namespace

std::pair<LocalityPanel, SynthTruth> generate(const SynthConfig& config) {
    validate_config(config);
    const std::size_t n = static_cast<std::size_t>(config.n_localities);
    Rng rng(config.seed);

    SynthTruth truth;
    truth.k_true = config.curvature.k_true;
    truth.localities.reserve(n);
    const std::size_t id_width = std::to_string(config.n_localities).size();
    for (std::size_t l = 0; l < n; ++l) {
        truth.localities.push_back(padded_label('L', static_cast<int>(l) + 1, id_width));
    }

    truth.population.resize(n);
    for (std::size_t l = 0; l < n; ++l) {
        if (config.population.max > config.population.min) {
            const double u = rng.uniform();
            truth.population[l] = std::exp(std::log(config.population.min) +
                                           u * (std::log(config.population.max) -
                                                std::log(config.population.min)));
        } else {
            truth.population[l] = config.population.min;
        }
    }

    std::vector<double> level(n, config.base_level);
    if (config.level_sd > 0.0) {
        for (std::size_t l = 0; l < n; ++l) level[l] += config.level_sd * rng.normal();
    }
    std::vector<double> slope_dev(n, 0.0);
    if (config.slope_sd > 0.0) {
        for (std::size_t l = 0; l < n; ++l) slope_dev[l] = config.slope_sd * rng.normal();
    }

    truth.gamma.resize(n);
    switch (config.gamma.kind) {
        case GammaSpec::Kind::fixed:
            for (std::size_t l = 0; l < n; ++l) {
                truth.gamma[l] = config.gamma.values.size() == 1 ? config.gamma.values[0]
                                                                 : config.gamma.values[l];
            }
            break;
        case GammaSpec::Kind::normal:
            for (std::size_t l = 0; l < n; ++l) {
                truth.gamma[l] = config.gamma.mean;
                if (config.gamma.sd > 0.0) truth.gamma[l] += config.gamma.sd * rng.normal();
            }
            break;
        case GammaSpec::Kind::covariate_link: {
            const std::size_t p = static_cast<std::size_t>(config.gamma.n_covariates);
            truth.true_coefficients = config.gamma.coefficients;
            truth.true_coefficients.resize(p, 0.0);
            truth.covariates.localities = truth.localities;
            truth.covariates.columns.assign(p, std::vector<double>(n, 0.0));
            for (std::size_t j = 0; j < p; ++j) {
                truth.covariates.names.push_back(padded_label('x', static_cast<int>(j) + 1, 1));
            }
            for (std::size_t l = 0; l < n; ++l) {
                double gl = config.gamma.link_intercept;
                for (std::size_t j = 0; j < p; ++j) {
                    const double x = rng.normal();
                    truth.covariates.columns[j][l] = x;
                    gl += truth.true_coefficients[j] * x;
                }
                if (config.gamma.link_noise_sd > 0.0) {
                    gl += config.gamma.link_noise_sd * rng.normal();
                }
                truth.gamma[l] = gl;
            }
            truth.covariates.weights = truth.population;
            break;
        }
    }

    truth.f0.resize(n);
    truth.g0.resize(n);
    for (std::size_t l = 0; l < n; ++l) {
        truth.f0[l] = level[l];
        truth.g0[l] = level[l] + truth.gamma[l];
    }
    truth.phi = naive_phi(truth.f0, truth.g0, truth.population);

    // State labels group roughly five localities; coarser labels derive from
    // the state index so groupings nest.
    const int n_states = std::max(1, config.n_localities / 5);
    const std::size_t state_width = std::to_string(n_states).size();
    std::map<std::string, LocalityMeta> meta;
    for (std::size_t l = 0; l < n; ++l) {
        const int state_idx = static_cast<int>(l) % n_states;
        LocalityMeta m;
        m.name = truth.localities[l];
        m.state = padded_label('S', state_idx + 1, state_width);
        m.census_region = padded_label('R', state_idx % 4 + 1, 1);
        m.census_division = padded_label('D', state_idx % 9 + 1, 1);
        meta[truth.localities[l]] = m;
    }

    std::vector<OutcomeCell> cells;
    cells.reserve(n * config.periods.size() *
                  static_cast<std::size_t>(config.max_age - config.min_age + 1));
    for (std::size_t l = 0; l < n; ++l) {
        const double pop = truth.population[l];
        const double cell_sd = config.noise_sd / std::sqrt(pop);
        for (const auto& period : config.periods) {
            for (int age = config.min_age; age <= config.max_age; ++age) {
                const double x = age - config.cutoff;
                const SideCurve& s =
                    x <= 0.0 ? config.curvature.left : config.curvature.right;
                double v = level[l] + (s.slope + slope_dev[l]) * x + s.quad * x * x +
                           s.cubic * x * x * x;
                if (x > 0.0) v += truth.gamma[l];
                if (config.noise_sd > 0.0) v += cell_sd * rng.normal();

                OutcomeCell cell;
                cell.locality_id = truth.localities[l];
                cell.age = age;
                cell.period = period;
                cell.outcome = config.outcome;
                cell.value = v;
                cell.population = pop;
                cell.value_variance = config.noise_sd * config.noise_sd / pop;
                cells.push_back(std::move(cell));
            }
        }
    }

    return {LocalityPanel::from_cells(std::move(cells), std::move(meta)), std::move(truth)};
}

double oracle_phi(const SynthTruth& truth, std::span<const double> weights) {
    const std::size_t n = truth.localities.size();
    if (truth.f0.size() != n || truth.g0.size() != n) {
        throw DataError("truth vectors disagree in length");
    }
    if (weights.size() != n) throw DataError("need one weight per locality");
    for (double w : weights) {
        if (!(w > 0.0) || !std::isfinite(w)) {
            throw DataError("weights must be positive and finite");
        }
    }
    const double phi = naive_phi(truth.f0, truth.g0, weights);
    if (std::isnan(phi)) throw NumericError("pre-period variance is degenerate");
    return phi;
}

CoverageReport coverage_study(const SynthConfig& config, const EstimatorSpec& spec,
                              int replications, int workers) {
    validate_config(config);
    if (replications < 100) {
        throw ConfigError("coverage studies need at least 100 replications, got " +
                          std::to_string(replications));
    }
    if (spec.kind == EstimatorSpec::Kind::parametric && (spec.order < 1 || spec.order > 3)) {
        throw ConfigError("parametric order must be 1, 2 or 3");
    }
    if (!(spec.confidence > 0.0) || !(spec.confidence < 1.0)) {
        throw ConfigError("confidence must lie in (0, 1)");
    }

    AgeWindow window = spec.window;
    window.cutoff = config.cutoff;
    validate_window(window);
    AgeWindow wide = window;
    const double span = std::max(std::abs(config.min_age - config.cutoff),
                                 std::abs(config.max_age - config.cutoff));
    wide.bandwidth = std::max(wide.bandwidth, static_cast<int>(std::ceil(span)));

    const std::size_t n_loc = static_cast<std::size_t>(config.n_localities);
    struct RepTally {
        std::vector<long> covered;
        std::vector<long> events;
        double total_length = 0.0;
    };
    std::vector<RepTally> tallies(static_cast<std::size_t>(replications));

    parallel_for(static_cast<std::size_t>(replications), workers, [&](std::size_t r) {
        SynthConfig rep_config = config;
        rep_config.seed = derive_seed(config.seed, static_cast<std::uint64_t>(r));
        const auto [panel, truth] = generate(rep_config);

        RepTally tally;
        tally.covered.assign(n_loc, 0);
        tally.events.assign(n_loc, 0);

        for (std::size_t l = 0; l < n_loc; ++l) {
            const std::string& id = truth.localities[l];
            RDEstimate est;
            if (spec.kind == EstimatorSpec::Kind::parametric) {
                const AgeSeries series = build_age_series(panel, id, config.outcome, window);
                est = estimate_rd_parametric(series, spec.order, spec.se_mode, spec.confidence);
            } else {
                const AgeSeries series = build_age_series(panel, id, config.outcome, wide);
                HonestRDConfig hc;
                hc.window = window;
                hc.bound_scale = spec.bound_scale;
                hc.confidence = spec.confidence;
                if (spec.kind == EstimatorSpec::Kind::honest) {
                    switch (spec.k_source) {
                        case EstimatorSpec::KSource::declared:
                            hc.curvature_bound = config.curvature.k_true;
                            break;
                        case EstimatorSpec::KSource::pilot:
                            hc.curvature_bound =
                                select_curvature_bound(series, 0, spec.bound_scale);
                            break;
                        case EstimatorSpec::KSource::fixed:
                            hc.curvature_bound = spec.k_fixed;
                            break;
                    }
                }
                est = estimate_rd(series, hc);
            }
            tally.events[l] += 1;
            if (est.ci_low <= truth.gamma[l] && truth.gamma[l] <= est.ci_high) {
                tally.covered[l] += 1;
            }
            tally.total_length += est.ci_high - est.ci_low;
        }
        tallies[r] = std::move(tally);
    });

    CoverageReport report;
    report.replications = replications;
    std::vector<long> covered_by_loc(n_loc, 0), events_by_loc(n_loc, 0);
    double total_length = 0.0;
    for (const auto& tally : tallies) {
        for (std::size_t l = 0; l < n_loc; ++l) {
            covered_by_loc[l] += tally.covered[l];
            events_by_loc[l] += tally.events[l];
        }
        total_length += tally.total_length;
    }
    for (std::size_t l = 0; l < n_loc; ++l) {
        report.covered += covered_by_loc[l];
        report.events += events_by_loc[l];
    }
    report.coverage = report.events > 0
                          ? static_cast<double>(report.covered) / static_cast<double>(report.events)
                          : 0.0;
    report.mean_ci_length = report.events > 0 ? total_length / static_cast<double>(report.events)
                                              : 0.0;
    report.worst_locality_coverage = 1.0;
    for (std::size_t l = 0; l < n_loc; ++l) {
        if (events_by_loc[l] > 0) {
            const double c = static_cast<double>(covered_by_loc[l]) /
                             static_cast<double>(events_by_loc[l]);
            report.worst_locality_coverage = std::min(report.worst_locality_coverage, c);
        }
    }
    return report;
}

} // namespace localrd
