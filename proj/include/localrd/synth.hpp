#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "localrd/correlates.hpp"
#include "localrd/honest_rd.hpp"
#include "localrd/panel.hpp"

namespace localrd {

// How each locality's true jump is drawn.
struct GammaSpec {
    enum class Kind { fixed, normal, covariate_link };
    Kind kind = Kind::normal;

    // fixed: one value per locality, or a single value broadcast to all.
    std::vector<double> values;

    // normal: independent draws.
    double mean = -2.0;
    double sd = 1.0;

    // covariate_link: gamma = intercept + x'coef + noise with standard-normal
    // covariates. coefficients shorter than n_covariates are zero-padded, so
    // sparse truths are the natural spelling.
    int n_covariates = 0;
    std::vector<double> coefficients;
    double link_intercept = 0.0;
    double link_noise_sd = 0.0;
};

// One side of the age profile around the cutoff, in offset units
// x = age - cutoff: contribution slope*x + quad*x^2 + cubic*x^3.
struct SideCurve {
    double slope = 0.0;
    double quad = 0.0;
    double cubic = 0.0;
};

// Declared smoothness class plus the actual per-side shape. Generation
// verifies |2*quad + 6*cubic*x| <= k_true over each side's offset range.
struct CurvatureSpec {
    double k_true = 0.0;
    SideCurve left;
    SideCurve right;
};

// Per-locality populations, log-uniform on [min, max]; equal bounds pin the
// population exactly.
struct PopulationSpec {
    double min = 1000.0;
    double max = 1000.0;
};

struct SynthConfig {
    int n_localities = 50;
    int min_age = 55;
    int max_age = 75;
    double cutoff = 65.0;
    std::vector<std::string> periods = {"all"};
    std::string outcome = "y";

    double base_level = 100.0;
    double level_sd = 10.0; // locality intercept spread
    double slope_sd = 0.0;  // locality slope spread added to both side slopes

    GammaSpec gamma;
    CurvatureSpec curvature;
    double noise_sd = 1.0;
    PopulationSpec population;
    std::uint64_t seed = 1;
};

struct SynthTruth {
    std::vector<std::string> localities;
    std::vector<double> gamma;      // true jumps
    std::vector<double> f0;         // profile approached from below the cutoff
    std::vector<double> g0;         // f0 + gamma
    std::vector<double> population; // per locality, shared by its cells
    double k_true = 0.0;
    double phi = 0.0; // population-weighted variance reduction; NaN if degenerate
    CovariateMatrix covariates;     // empty unless gamma links to covariates
    std::vector<double> true_coefficients;
};

// Deterministic panel with known ground truth. Cell values are the locality
// age profile plus normal(0, noise_sd/sqrt(population)) noise, and every cell
// carries value_variance = noise_sd^2/population exactly. The cutoff age
// itself sits on the pre side of the jump, matching how series split sides.
// Draw order is fixed (populations, levels, slopes, jumps, then cell noise in
// locality-major order), so truths agree across noise settings.
std::pair<LocalityPanel, SynthTruth> generate(const SynthConfig& config);

// Ground-truth variance reduction, recomputed naively from the true levels
// by a plain two-pass loop. Deliberately shares no code with the estimator
// it checks. Degenerate pre-period variance is an error.
double oracle_phi(const SynthTruth& truth, std::span<const double> weights);

// Which interval construction a coverage study exercises.
struct EstimatorSpec {
    enum class Kind { honest, conventional, parametric };
    Kind kind = Kind::honest;

    // honest only: where the curvature bound comes from. declared uses the
    // config's k_true, pilot re-selects from the data, fixed uses k_fixed.
    enum class KSource { declared, pilot, fixed };
    KSource k_source = KSource::declared;
    double k_fixed = 0.0;
    double bound_scale = 4.0; // pilot multiplier

    // parametric only.
    int order = 1;
    SeMode se_mode = SeMode::robust;

    AgeWindow window; // cutoff is overridden by the config's cutoff
    double confidence = 0.95;
};

struct CoverageReport {
    long events = 0; // locality-replication pairs with an interval
    long covered = 0;
    double coverage = 0.0;
    double mean_ci_length = 0.0;
    double worst_locality_coverage = 0.0;
    int replications = 0;
};

// Empirical coverage of the requested interval against the known truth,
// pooled over localities and replications. Each replication regenerates the
// panel from a seed derived from (config.seed, replication), so reports are
// reproducible and independent of the worker count.
CoverageReport coverage_study(const SynthConfig& config, const EstimatorSpec& spec,
                              int replications, int workers = 1);

} // namespace localrd
