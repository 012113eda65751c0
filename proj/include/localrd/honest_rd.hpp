#pragma once

#include <vector>

#include "localrd/panel.hpp"

namespace localrd {

// Discontinuity estimation at an age cutoff with bias-aware inference.
//
// The running variable is discrete (age in years), so the usual
// asymptotics in a shrinking bandwidth are unavailable. Instead the
// estimator commits to a smoothness class, all conditional mean functions
// whose second derivative is bounded by K, computes the exact worst-case
// extrapolation bias of a local linear fit over that class, and widens the
// confidence interval with a folded-normal critical value so that coverage
// holds no matter which function in the class generated the data.

struct HonestRDConfig {
    AgeWindow window;
    double curvature_bound = 0.0; // K, bound on |f''| on each side
    double bound_scale = 4.0;     // multiplier applied by select_curvature_bound
    double confidence = 0.95;
};

enum class Side { left, right };

// Weighted linear fit on one side of the cutoff, evaluated at the cutoff.
// The intercept is a linear combination sum(w_i * y_i) of the cell values;
// the weights satisfy sum(w_i) = 1 and sum(w_i * x_i) = 0, so the fit
// reproduces constants and linear trends exactly.
struct SideFit {
    double intercept = 0.0;
    double slope = 0.0;
    double se = 0.0;              // sqrt(sum w_i^2 v_i), v_i the cell variances
    std::vector<double> offsets;  // x_i, age minus cutoff, for retained cells
    std::vector<double> weights;  // w_i, the linear representation
    int n_cells = 0;
};

// Fits value on (1, offset) with population weights and a uniform kernel over
// the cells of `side` within the window's bandwidth. Left means offset <= 0,
// right means offset > 0. Cells without value_variance fall back to a
// residual-based variance: the dof-corrected weighted residual variance of
// the side fit scaled by (mean population / cell population). That fallback
// approximates variances that are exact only with person-level data.
SideFit local_linear_boundary(const AgeSeries& series, Side side, const AgeWindow& window);

// Largest possible |extrapolation bias| of the fitted intercept over all
// functions with |f''| <= curvature_bound: (K/2) * sum(|w_i| * x_i^2).
// The bound is sharp; a function in the class attains it.
double worst_case_bias(const SideFit& fit, double curvature_bound);

// Critical value c solving P(|Z + t| <= c) = level for standard normal Z,
// i.e. Phi(c - t) - Phi(-c - t) = level, found by bisection to a residual
// below 1e-10. t is the worst-case bias in standard error units; t = 0
// recovers the usual two-sided normal quantile.
double folded_normal_cv(double t, double level);

// Data-driven curvature bound: fit a population-weighted quadratic over the
// left-of-cutoff cells (all of them, or only offsets >= -left_window_width
// when positive) and return bound_scale times |quadratic coefficient|.
// Returns 0 for exactly linear data; callers are expected to warn then.
double select_curvature_bound(const AgeSeries& series, int left_window_width,
                              double bound_scale);

struct RDEstimate {
    double gamma = 0.0;      // y_plus - y_minus
    double se = 0.0;
    double bias_bound = 0.0; // summed worst-case bias of the two side fits
    double ci_low = 0.0;
    double ci_high = 0.0;
    double y_minus = 0.0;    // boundary value approached from below
    double y_plus = 0.0;     // boundary value approached from above
    double se_minus = 0.0;
    double se_plus = 0.0;
    double bias_minus = 0.0;
    double bias_plus = 0.0;
    int n_cells_left = 0;
    int n_cells_right = 0;
    int parametric_order = 0; // 0 for the local linear honest estimator
    HonestRDConfig config;
};

// Honest estimate: local linear fits on both sides, gamma = jump at the
// cutoff, CI = gamma +/- cv(bias/se, level) * se. With se = 0 and a positive
// bias bound the CI degenerates to gamma +/- bias; with both zero it is the
// point itself. At curvature_bound = 0 this is exactly the conventional
// Wald interval.
RDEstimate estimate_rd(const AgeSeries& series, const HonestRDConfig& config);

enum class SeMode { robust, cluster_on_age };

// Global polynomial benchmark: weighted polynomial of the given order
// (1, 2 or 3) fitted separately per side over every cell in the series, with
// heteroskedasticity-robust or age-clustered standard errors. No bias
// adjustment is made (bias_bound = 0), matching conventional practice.
RDEstimate estimate_rd_parametric(const AgeSeries& series, int order, SeMode se_mode,
                                  double confidence = 0.95);

} // namespace localrd
