#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace localrd {

// Per-locality estimates with their standard errors. `weights` (population)
// is optional bookkeeping for callers; the shrinkage and forecast moments
// below weight by estimation precision, not population.
struct EstimateVector {
    std::vector<std::string> localities;
    std::vector<double> gamma; // unbiased but noisy per-locality estimates
    std::vector<double> s;     // their standard errors, >= 0
    std::vector<double> weights;
};

void validate_estimates(const EstimateVector& est);

enum class WeightMode {
    precision, // weight locality l by 1 / s_l^2
    uniform,
};

// Precision of each estimate for moment computations. Entries with s = 0
// get the largest finite precision in the batch rather than an infinite
// weight, which keeps every moment defined; when all s are 0 the weights
// are uniform. WeightMode::uniform short-circuits to all ones.
std::vector<double> moment_weights(std::span<const double> s, WeightMode mode);

struct ShrinkageResult {
    std::vector<double> shrunk;  // posterior means
    std::vector<double> factor;  // per-locality shrinkage factors in [0, 1]
    double center = 0.0;         // common prior mean the estimates shrink toward
    double signal_variance = 0.0;
};

// Classic empirical-Bayes shrinkage under gamma_l ~ N(center, signal_variance)
// observed with known noise s_l:
//   center = precision-weighted mean of gamma
//   signal_variance = max(0, weighted variance of gamma - weighted mean of s^2)
//   shrunk_l = B_l gamma_l + (1 - B_l) center,  B_l = sv / (s_l^2 + sv)
// Noiseless inputs (all s = 0) pass through unchanged; when the variance
// floor binds everything collapses to the center. Requires at least 3
// localities unless enforce_min_support is false (moment estimates from 2
// points are formally defined but meaningless).
ShrinkageResult eb_shrink(const EstimateVector& est, bool enforce_min_support = true,
                          WeightMode mode = WeightMode::precision);

struct ForecastModel {
    double tau = 0.0;       // loading of estimates on the predictions
    double chi2 = 0.0;      // residual place variance net of sampling noise
    double gamma_bar = 0.0; // precision-weighted mean of the estimates
    double pred_bar = 0.0;  // precision-weighted mean of the predictions
    std::vector<std::string> warnings;
};

// Fits the two ingredients an MSE-minimizing combination needs: tau from the
// weighted regression of demeaned estimates on demeaned predictions, and
// chi2 = max(0, weighted variance of (gamma - tau * demeaned prediction)
// minus the weighted mean of s^2). Zero prediction variance yields tau = 0
// with a warning (forecasts then shrink to the overall mean).
ForecastModel fit_forecast_combination(const EstimateVector& est,
                                       std::span<const double> predictions,
                                       WeightMode mode = WeightMode::precision);

struct ForecastResult {
    std::vector<double> forecast;
    std::vector<double> rmse;          // sqrt(1 / (1/s^2 + 1/chi2))
    std::vector<double> shrink_weight; // chi2 / (chi2 + s^2), the weight on the estimate
    ForecastModel model;
};

// Combines each noisy estimate with its covariate-based prediction:
//   forecast_l = a_l (gamma_l - gamma_bar) + (1 - a_l) tau (pred_l - pred_bar) + gamma_bar
// with a_l = chi2 / (chi2 + s_l^2). Exact estimates (s = 0) pass through
// with rmse 0; pure-noise estimates defer entirely to the prediction. The
// rmse never exceeds min(s_l, sqrt(chi2)).
ForecastResult mse_forecast(const ForecastModel& model, const EstimateVector& est,
                            std::span<const double> predictions);

} // namespace localrd
