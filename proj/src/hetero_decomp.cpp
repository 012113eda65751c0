#include "localrd/hetero_decomp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>

#include "localrd/csv.hpp"
#include "localrd/errors.hpp"

namespace localrd {

ScaledEstimate fuzzy_scale(const RDEstimate& reduced_form, const RDEstimate& first_stage,
                           const std::string& locality_id, double weak_threshold,
                           double covariance) {
    if (!(weak_threshold >= 0.0) || !std::isfinite(weak_threshold)) {
        throw ConfigError("weak-denominator threshold must be finite and nonnegative");
    }
    if (!std::isfinite(covariance)) throw ConfigError("covariance override must be finite");

    ScaledEstimate out;
    out.locality_id = locality_id;
    out.gamma = reduced_form.gamma;
    out.se_gamma = reduced_form.se;
    out.first_stage = first_stage.gamma;
    out.first_stage_se = first_stage.se;

    const double h = first_stage.gamma;
    if (h == 0.0) {
        throw NumericError("coverage jump is exactly zero; cannot scale" +
                           (locality_id.empty() ? std::string() : " locality '" + locality_id + "'"));
    }
    out.weak = std::abs(h) < weak_threshold;
    if (out.weak) {
        out.beta = std::numeric_limits<double>::quiet_NaN();
        out.se = std::numeric_limits<double>::quiet_NaN();
        return out;
    }

    out.beta = reduced_form.gamma / h;
    const double var = (reduced_form.se * reduced_form.se +
                        out.beta * out.beta * first_stage.se * first_stage.se -
                        2.0 * out.beta * covariance) /
                       (h * h);
    out.se = std::sqrt(std::max(0.0, var));
    return out;
}

RDEstimate diff_in_disc(const LocalityPanel& panel, const std::string& locality_id,
                        const std::string& outcome,
                        const std::set<std::string>& baseline_periods,
                        const std::set<std::string>& analysis_periods,
                        const HonestRDConfig& config) {
    if (baseline_periods.empty() || analysis_periods.empty()) {
        throw ConfigError("baseline and analysis period sets must both be nonempty");
    }
    for (const auto& p : analysis_periods) {
        if (baseline_periods.count(p)) {
            throw ConfigError("baseline and analysis periods overlap at '" + p + "'");
        }
    }
    validate_window(config.window);

    // Wide window so the curvature pilot sees every age; the estimation
    // bandwidth is applied afterwards inside estimate_rd.
    AgeWindow wide = config.window;
    const double span = std::max(std::abs(panel.min_age() - wide.cutoff),
                                 std::abs(panel.max_age() - wide.cutoff));
    wide.bandwidth = std::max(wide.bandwidth, static_cast<int>(std::ceil(span)));

    SeriesOptions analysis_opt;
    analysis_opt.periods = analysis_periods;
    SeriesOptions baseline_opt;
    baseline_opt.periods = baseline_periods;
    const AgeSeries analysis = build_age_series(panel, locality_id, outcome, wide, analysis_opt);
    const AgeSeries baseline = build_age_series(panel, locality_id, outcome, wide, baseline_opt);

    std::map<double, const AgePoint*> baseline_at;
    for (const auto& pt : baseline.points) baseline_at[pt.offset] = &pt;

    AgeSeries delta;
    delta.cutoff = analysis.cutoff;
    std::string missing;
    for (const auto& pt : analysis.points) {
        const auto it = baseline_at.find(pt.offset);
        if (it == baseline_at.end()) {
            if (!missing.empty()) missing += ", ";
            missing += format_double(pt.offset + analysis.cutoff);
            continue;
        }
        AgePoint d;
        d.offset = pt.offset;
        d.value = pt.value - it->second->value;
        d.weight = pt.weight;
        if (pt.variance && it->second->variance) d.variance = *pt.variance + *it->second->variance;
        delta.points.push_back(d);
    }
    if (!missing.empty()) {
        throw DataError("ages present in the analysis periods but missing from the baseline: " +
                        missing);
    }

    HonestRDConfig cfg = config;
    if (!(cfg.curvature_bound > 0.0)) {
        cfg.curvature_bound = select_curvature_bound(delta, 0, cfg.bound_scale);
    }
    return estimate_rd(delta, cfg);
}

namespace {

struct PeriodMoments {
    double e_beta = 0.0;
    double e_h = 0.0;
    double cov = 0.0;
    double e_gamma = 0.0;
    double residual = 0.0;
};

void validate_period(const PeriodEstimates& p, const char* label) {
    const std::size_t n = p.localities.size();
    if (n == 0) throw DataError(std::string(label) + " period has no localities");
    if (p.beta.size() != n || p.coverage.size() != n || p.weights.size() != n) {
        throw DataError(std::string(label) + " period fields must all have one entry per locality");
    }
    if (!p.gamma.empty() && p.gamma.size() != n) {
        throw DataError(std::string(label) + " period gamma must be empty or one per locality");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(p.beta[i]) || !std::isfinite(p.coverage[i])) {
            throw DataError(std::string(label) + " period has a non-finite estimate for locality '" +
                            p.localities[i] + "'");
        }
        if (!p.gamma.empty() && !std::isfinite(p.gamma[i])) {
            throw DataError(std::string(label) + " period has a non-finite jump for locality '" +
                            p.localities[i] + "'");
        }
        if (!(p.weights[i] > 0.0) || !std::isfinite(p.weights[i])) {
            throw DataError(std::string(label) + " period weight for locality '" + p.localities[i] +
                            "' must be positive and finite");
        }
    }
}

PeriodMoments period_moments(const PeriodEstimates& p, const std::vector<double>& w,
                             const std::vector<std::size_t>& order) {
    PeriodMoments m;
    for (std::size_t r = 0; r < order.size(); ++r) {
        const std::size_t i = order[r];
        m.e_beta += w[r] * p.beta[i];
        m.e_h += w[r] * p.coverage[i];
    }
    for (std::size_t r = 0; r < order.size(); ++r) {
        const std::size_t i = order[r];
        m.cov += w[r] * (p.beta[i] - m.e_beta) * (p.coverage[i] - m.e_h);
    }
    if (p.gamma.empty()) {
        for (std::size_t r = 0; r < order.size(); ++r) {
            const std::size_t i = order[r];
            m.e_gamma += w[r] * p.beta[i] * p.coverage[i];
        }
    } else {
        for (std::size_t r = 0; r < order.size(); ++r) m.e_gamma += w[r] * p.gamma[order[r]];
    }
    m.residual = m.e_gamma - m.e_beta * m.e_h - m.cov;
    return m;
}

} // namespace

KobResult kob_decompose(const PeriodEstimates& pre, const PeriodEstimates& post) {
    validate_period(pre, "pre");
    validate_period(post, "post");

    const std::size_t n = pre.localities.size();
    std::map<std::string, std::size_t> post_index;
    for (std::size_t i = 0; i < post.localities.size(); ++i) {
        if (!post_index.emplace(post.localities[i], i).second) {
            throw DataError("post period lists locality '" + post.localities[i] + "' twice");
        }
    }
    if (post.localities.size() != n) {
        throw DataError("periods cover different locality counts: " + std::to_string(n) + " vs " +
                        std::to_string(post.localities.size()));
    }

    // Match post rows to the pre ordering.
    std::vector<std::size_t> pre_order(n), post_order(n);
    std::set<std::string> seen;
    for (std::size_t i = 0; i < n; ++i) {
        if (!seen.insert(pre.localities[i]).second) {
            throw DataError("pre period lists locality '" + pre.localities[i] + "' twice");
        }
        const auto it = post_index.find(pre.localities[i]);
        if (it == post_index.end()) {
            throw DataError("locality '" + pre.localities[i] + "' is missing from the post period");
        }
        pre_order[i] = i;
        post_order[i] = it->second;
    }

    const double w_total = [&] {
        double s = 0.0;
        for (double w : pre.weights) s += w;
        return s;
    }();
    std::vector<double> w(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = pre.weights[i] / w_total;

    const double post_total = [&] {
        double s = 0.0;
        for (double x : post.weights) s += x;
        return s;
    }();
    for (std::size_t i = 0; i < n; ++i) {
        const double wp = post.weights[post_order[i]] / post_total;
        if (std::abs(wp - w[i]) > 1e-9 * std::max(1.0, w[i])) {
            throw DataError("weights differ between periods for locality '" + pre.localities[i] +
                            "'");
        }
    }

    const PeriodMoments a = period_moments(pre, w, pre_order);
    const PeriodMoments b = period_moments(post, w, post_order);

    KobResult out;
    out.e_beta_pre = a.e_beta;
    out.e_beta_post = b.e_beta;
    out.e_h_pre = a.e_h;
    out.e_h_post = b.e_h;
    out.cov_pre = a.cov;
    out.cov_post = b.cov;
    out.e_gamma_pre = a.e_gamma;
    out.e_gamma_post = b.e_gamma;
    out.residual_pre = a.residual;
    out.residual_post = b.residual;
    out.localities = pre.localities;
    out.weights = w;

    out.eta1 = (b.e_beta - a.e_beta) * b.e_h;
    out.eta2 = a.e_beta * (b.e_h - a.e_h);
    out.eta3 = (b.cov - a.cov) + (b.residual - a.residual);

    const double scale = std::max({1.0, std::abs(a.e_gamma), std::abs(b.e_gamma)});
    if (std::abs(a.e_gamma) <= 1e-12 * scale) {
        throw NumericError("pre-period mean jump is numerically zero; relative change undefined");
    }
    out.eta = (out.eta1 + out.eta2 + out.eta3) / a.e_gamma;
    return out;
}

} // namespace localrd
