#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace localrd {

// Cross-locality variance reduction.
//
// Each locality contributes a pair of boundary values: f0, the level just
// below the cutoff, and g0, the level approached from above (the
// counterfactual of interest). phi = 1 - Var(g0) / Var(f0) measures how much
// of the weighted cross-locality dispersion the cutoff removes. Inference
// treats phi as a smooth functional of the per-locality estimates: a delta
// method linearization propagates the standard errors, the same
// linearization aggregates the per-locality worst-case biases, and a
// folded-normal critical value turns both into a bias-aware interval.

struct CounterfactualSet {
    std::vector<std::string> localities;
    std::vector<double> f0;      // boundary value from below, per locality
    std::vector<double> g0;      // boundary value from above
    std::vector<double> se_f;
    std::vector<double> se_g;
    std::vector<double> bias_f;  // worst-case bias bounds, not estimates
    std::vector<double> bias_g;
    std::vector<double> weights; // normalized to sum to 1 at construction
};

// Validates lengths and signs, requires at least 2 localities, and
// normalizes weights to sum to 1. Pass equal weights (e.g. all 1) for the
// unweighted variant.
CounterfactualSet make_counterfactual_set(std::vector<std::string> localities,
                                          std::vector<double> f0, std::vector<double> g0,
                                          std::vector<double> se_f, std::vector<double> se_g,
                                          std::vector<double> bias_f, std::vector<double> bias_g,
                                          std::vector<double> weights);

// phi = 1 - var_post / var_pre with weighted population variances (weights
// normalized, no small-sample correction). Throws NumericError when var_pre
// is degenerate, at or below 1e-12 * max(1, max|f0|)^2. Values above 1 are
// impossible; negative values are meaningful (dispersion widened) and are
// never clamped.
double phi_hat(const CounterfactualSet& set);

struct PhiGradient {
    std::vector<double> d_f; // d phi / d f0_l
    std::vector<double> d_g; // d phi / d g0_l
};

// Exact analytic gradient:
//   d phi / d g_l = -2 w_l (g_l - gbar) / var_pre
//   d phi / d f_l =  var_post * 2 w_l (f_l - fbar) / var_pre^2
PhiGradient phi_gradient(const CounterfactualSet& set);

struct VarianceReductionResult {
    double phi = 0.0;
    double se = 0.0;
    double bias_bound = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double var_pre = 0.0;
    double var_post = 0.0;
    std::size_t n_localities = 0;
};

// Delta-method inference: se^2 = sum over localities of the squared gradient
// times the squared estimate se (cross-locality covariances are zero by
// design, estimates come from disjoint samples); the bias bound is the
// gradient-weighted sum of per-locality bias bounds; the CI uses
// folded_normal_cv(bias/se). With se = 0 and positive bias the interval is
// phi +/- bias; with both zero it degenerates to the point.
VarianceReductionResult phi_inference(const CounterfactualSet& set, double level = 0.95);

} // namespace localrd
