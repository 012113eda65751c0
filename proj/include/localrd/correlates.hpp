#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace localrd {

// Covariate columns aligned with a locality vector. Weights are population
// weights; they enter regressions as per-observation loss weights normalized
// to mean 1, so penalty levels stay comparable across datasets.
struct CovariateMatrix {
    std::vector<std::string> localities;
    std::vector<std::string> names;
    std::vector<std::vector<double>> columns; // columns[j][i], column-major
    std::vector<double> weights;              // one per locality, positive
    bool standardized = false;
};

void validate_covariates(const CovariateMatrix& m);

// CSV with a locality_id column plus one numeric column per covariate.
// Weights default to 1; callers align populations afterwards.
CovariateMatrix load_covariates(const std::string& path);

// Weighted z-scores per column: weighted mean 0, weighted variance 1
// (population convention). A zero-variance column is an error naming the
// column. Set weighted = false to standardize with plain means regardless of
// the regression weights.
CovariateMatrix standardize(const CovariateMatrix& m, bool weighted = true);

struct LassoDiagnostics {
    std::vector<double> lambda_path;
    std::vector<double> mean_cv_error; // aligned with lambda_path
    std::vector<int> fold_of;          // fold index per locality
    std::uint64_t seed = 0;
};

// Shared result shape for every regression flavor in this header.
struct FitResult {
    std::vector<std::string> names;
    std::vector<double> coefficients;
    std::vector<double> ses; // heteroskedasticity-robust (HC1); empty for the Lasso
    double intercept = 0.0;
    double intercept_se = std::numeric_limits<double>::quiet_NaN();
    std::vector<bool> selected;
    std::optional<double> lambda;
    std::optional<double> scale_divisor;
    double r_squared = std::numeric_limits<double>::quiet_NaN();
    std::size_t n_obs = 0;
    std::vector<std::string> warnings;
    std::optional<LassoDiagnostics> lasso;
};

// Weighted least squares of y on a single covariate with HC1-robust
// standard errors and the weighted R^2.
FitResult weighted_bivariate(std::span<const double> y, std::span<const double> x,
                             std::span<const double> w, const std::string& name = "x");

// Weighted OLS of y on every column of X, robust SEs. When `groups` is
// given, fixed effects for those labels are absorbed by weighted within-group
// demeaning of y and X (Frisch-Waugh), the intercept is dropped, and the
// robust dof correction counts the absorbed means. Rank-deficient designs
// raise NumericError listing the dependent columns.
FitResult weighted_multivariate_ols(std::span<const double> y, const CovariateMatrix& X,
                                    std::span<const std::string> groups = {});

// Lasso at a fixed penalty by cyclic coordinate descent on the weighted
// objective (1/(2W)) sum w_i (y_i - a - x_i'b)^2 + lambda * sum|b_j|,
// W = sum w_i. Convergence: max coefficient change below 1e-8.
FitResult lasso_fixed(std::span<const double> y, const CovariateMatrix& X, double lambda,
                      std::vector<double>* objective_trace = nullptr);

// Cross-validated Lasso: 100 log-spaced penalties from lambda_max (the
// smallest penalty with an all-zero solution) down to 1e-3 * lambda_max,
// K-fold CV with a seeded deterministic partition, minimum mean error wins
// (ties go to the stronger penalty). X must be standardized. Requires
// 2 <= folds <= localities.
FitResult lasso_cv(std::span<const double> y, const CovariateMatrix& X, int folds,
                   std::uint64_t seed);

// OLS restricted to the selected columns. An empty selection yields the
// intercept-only fit with a warning.
FitResult post_lasso_ols(std::span<const double> y, const CovariateMatrix& X,
                         const std::vector<bool>& selected);

// Expresses coefficients as shares of a national estimate: coefficients and
// intercept divide by the (signed) estimate, standard errors by its absolute
// value. Zero national estimate is an error.
FitResult scale_coefficients(FitResult fit, double national_estimate);

} // namespace localrd
