#pragma once

#include <set>
#include <string>
#include <vector>

#include "localrd/honest_rd.hpp"
#include "localrd/panel.hpp"

namespace localrd {

// Reduced-form jump rescaled by the coverage jump, reported per coverage
// point. This is a scaling that makes localities with different eligibility
// take-up comparable, not a causal effect of coverage on the outcome.
struct ScaledEstimate {
    std::string locality_id;
    double beta = 0.0;
    double se = 0.0;
    double gamma = 0.0;
    double se_gamma = 0.0;
    double first_stage = 0.0;
    double first_stage_se = 0.0;
    bool weak = false;
};

// Delta-method ratio of two estimates. The inputs default to independent
// sampling error; pass their covariance when they share a sample. A first
// stage below weak_threshold in magnitude flags the locality and reports NaN
// for beta and its standard error; a first stage of exactly zero throws.
ScaledEstimate fuzzy_scale(const RDEstimate& reduced_form, const RDEstimate& first_stage,
                           const std::string& locality_id = "",
                           double weak_threshold = 0.01, double covariance = 0.0);

// Jump in the change of the age profile between two disjoint period sets.
// Per age: delta = analysis-period pooled mean minus baseline pooled mean,
// weighted by the analysis population; cell variances add when both sides
// carry them. The curvature bound is re-selected on the delta series unless
// the config already declares a positive one. Any age present in the
// analysis periods but absent from the baseline is an error.
RDEstimate diff_in_disc(const LocalityPanel& panel, const std::string& locality_id,
                        const std::string& outcome,
                        const std::set<std::string>& baseline_periods,
                        const std::set<std::string>& analysis_periods,
                        const HonestRDConfig& config);

// Cross-locality inputs for one period: scaled effects, coverage jumps, and
// the weights used for every moment. gamma is optional; when empty the
// pointwise product beta * coverage stands in for it, which makes the period
// residual vanish up to roundoff.
struct PeriodEstimates {
    std::vector<std::string> localities;
    std::vector<double> beta;
    std::vector<double> coverage;
    std::vector<double> weights;
    std::vector<double> gamma;
};

// Change in the mean jump between two periods, split into the part moved by
// the scaled effects, the part moved by coverage, and the part moved by
// their covariance. Components are levels; eta divides their sum by the
// pre-period mean jump, so eta * e_gamma_pre = eta1 + eta2 + eta3 and
// eta1 + eta2 + eta3 = e_gamma_post - e_gamma_pre, both up to roundoff.
struct KobResult {
    double eta = 0.0;
    double eta1 = 0.0; // change in E(beta), valued at post-period coverage
    double eta2 = 0.0; // change in E(coverage), valued at pre-period beta
    double eta3 = 0.0; // change in Cov(beta, coverage) plus residual drift
    double e_gamma_pre = 0.0;
    double e_gamma_post = 0.0;
    double e_beta_pre = 0.0;
    double e_beta_post = 0.0;
    double e_h_pre = 0.0;
    double e_h_post = 0.0;
    double cov_pre = 0.0;
    double cov_post = 0.0;
    // Gap between the mean of the direct jumps and the product moments,
    // E(gamma) - E(beta)E(h) - Cov(beta, h). Zero up to roundoff when gamma
    // is the pointwise product; folded into eta3 so the identity holds.
    double residual_pre = 0.0;
    double residual_post = 0.0;
    std::vector<std::string> localities; // pre-period order
    std::vector<double> weights;         // normalized to sum 1
};

// Both periods must cover the same localities with the same weights; post
// entries are matched to the pre ordering by locality id. A pre-period mean
// jump of (numerically) zero leaves eta undefined and throws.
KobResult kob_decompose(const PeriodEstimates& pre, const PeriodEstimates& post);

} // namespace localrd
