#include "localrd/shrink_forecast.hpp"

#include <algorithm>
#include <cmath>

#include "localrd/errors.hpp"

namespace localrd {

void validate_estimates(const EstimateVector& est) {
    const std::size_t n = est.localities.size();
    if (est.gamma.size() != n || est.s.size() != n) {
        throw DataError("estimate vector fields must all have one entry per locality");
    }
    if (!est.weights.empty() && est.weights.size() != n) {
        throw DataError("estimate weights must be empty or one per locality");
    }
    for (std::size_t l = 0; l < n; ++l) {
        if (!std::isfinite(est.gamma[l])) {
            throw DataError("non-finite estimate for locality " + est.localities[l]);
        }
        if (!(est.s[l] >= 0.0) || !std::isfinite(est.s[l])) {
            throw DataError("bad standard error for locality " + est.localities[l]);
        }
    }
}

std::vector<double> moment_weights(std::span<const double> s, WeightMode mode) {
    std::vector<double> w(s.size(), 1.0);
    if (mode == WeightMode::uniform) return w;
    double max_finite = 0.0;
    for (double si : s) {
        if (si > 0.0) max_finite = std::max(max_finite, 1.0 / (si * si));
    }
    if (max_finite == 0.0) return w; // every estimate exact, uniform weights
    for (std::size_t i = 0; i < s.size(); ++i) {
        w[i] = (s[i] > 0.0) ? 1.0 / (s[i] * s[i]) : max_finite;
    }
    return w;
}

namespace {

struct WMoments {
    double mean = 0.0;
    double var = 0.0; // population convention
};

WMoments weighted_moments(std::span<const double> x, std::span<const double> w) {
    double total = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        total += w[i];
        sum += w[i] * x[i];
    }
    WMoments m;
    m.mean = sum / total;
    double ss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - m.mean;
        ss += w[i] * d * d;
    }
    m.var = ss / total;
    return m;
}

double weighted_mean_of(std::span<const double> x, std::span<const double> w) {
    double total = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        total += w[i];
        sum += w[i] * x[i];
    }
    return sum / total;
}

} // namespace

ShrinkageResult eb_shrink(const EstimateVector& est, bool enforce_min_support, WeightMode mode) {
    validate_estimates(est);
    const std::size_t n = est.gamma.size();
    if (enforce_min_support && n < 3) {
        throw ConfigError("shrinkage needs at least 3 localities to estimate its two moments");
    }
    if (n == 0) throw DataError("shrinkage needs at least one estimate");

    const std::vector<double> w = moment_weights(est.s, mode);
    const WMoments g = weighted_moments(est.gamma, w);
    std::vector<double> s2(n);
    for (std::size_t l = 0; l < n; ++l) s2[l] = est.s[l] * est.s[l];
    const double mean_s2 = weighted_mean_of(s2, w);

    ShrinkageResult res;
    res.center = g.mean;
    res.signal_variance = std::max(0.0, g.var - mean_s2);
    res.shrunk.resize(n);
    res.factor.resize(n);
    for (std::size_t l = 0; l < n; ++l) {
        const double denom = s2[l] + res.signal_variance;
        // denom = 0 only when the estimate is exact and the signal variance
        // floored; keeping the estimate is then also exact.
        const double b = (denom > 0.0) ? res.signal_variance / denom : 1.0;
        res.factor[l] = b;
        res.shrunk[l] = b * est.gamma[l] + (1.0 - b) * res.center;
    }
    return res;
}

ForecastModel fit_forecast_combination(const EstimateVector& est,
                                       std::span<const double> predictions, WeightMode mode) {
    validate_estimates(est);
    const std::size_t n = est.gamma.size();
    if (predictions.size() != n) {
        throw DataError("predictions must have one entry per locality");
    }
    for (double p : predictions) {
        if (!std::isfinite(p)) throw DataError("non-finite prediction");
    }

    const std::vector<double> w = moment_weights(est.s, mode);
    ForecastModel model;
    model.gamma_bar = weighted_mean_of(est.gamma, w);
    model.pred_bar = weighted_mean_of(predictions, w);

    double sxx = 0.0, sxy = 0.0, total = 0.0, pred_scale = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
        const double dx = predictions[l] - model.pred_bar;
        sxx += w[l] * dx * dx;
        sxy += w[l] * dx * (est.gamma[l] - model.gamma_bar);
        total += w[l];
        pred_scale = std::max(pred_scale, std::abs(predictions[l]));
    }
    // Relative guard: constant predictions leave roundoff-sized dispersion.
    if (sxx / total <= 1e-24 * std::max(1.0, pred_scale * pred_scale)) {
        model.tau = 0.0;
        model.warnings.push_back(
            "predictions have zero variance; forecasts shrink to the overall mean");
    } else {
        model.tau = sxy / sxx;
    }

    // Residual place variance: what is left of the dispersion of the
    // estimates after the prediction signal, net of sampling noise.
    std::vector<double> resid(n), s2(n);
    for (std::size_t l = 0; l < n; ++l) {
        resid[l] = est.gamma[l] - model.tau * (predictions[l] - model.pred_bar);
        s2[l] = est.s[l] * est.s[l];
    }
    const double resid_var = weighted_moments(resid, w).var;
    model.chi2 = std::max(0.0, resid_var - weighted_mean_of(s2, w));
    return model;
}

ForecastResult mse_forecast(const ForecastModel& model, const EstimateVector& est,
                            std::span<const double> predictions) {
    validate_estimates(est);
    const std::size_t n = est.gamma.size();
    if (predictions.size() != n) {
        throw DataError("predictions must have one entry per locality");
    }
    if (!(model.chi2 >= 0.0) || !std::isfinite(model.chi2)) {
        throw ConfigError("forecast model has a bad residual variance");
    }

    ForecastResult out;
    out.model = model;
    out.forecast.resize(n);
    out.rmse.resize(n);
    out.shrink_weight.resize(n);
    for (std::size_t l = 0; l < n; ++l) {
        const double s2 = est.s[l] * est.s[l];
        double a; // weight on the locality's own estimate
        if (s2 == 0.0) {
            a = 1.0; // exact estimate, nothing to forecast
        } else if (model.chi2 == 0.0) {
            a = 0.0; // no residual place variation, the model is exact
        } else {
            a = model.chi2 / (model.chi2 + s2);
        }
        out.shrink_weight[l] = a;
        out.forecast[l] = a * (est.gamma[l] - model.gamma_bar) +
                          (1.0 - a) * model.tau * (predictions[l] - model.pred_bar) +
                          model.gamma_bar;
        // Posterior sd: harmonic combination of the two information sources,
        // zero as soon as either is exact.
        out.rmse[l] = (s2 == 0.0 || model.chi2 == 0.0)
                          ? 0.0
                          : std::sqrt(s2 * model.chi2 / (s2 + model.chi2));
    }
    return out;
}

} // namespace localrd
