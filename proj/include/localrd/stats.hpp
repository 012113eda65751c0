#pragma once

#include <cmath>
#include <span>

#include "localrd/errors.hpp"

namespace localrd {

// Weighted moments, population convention throughout: variances divide by the
// weight total, never by (n - 1). Weights must be nonnegative with a positive sum.

inline double weight_total(std::span<const double> w) {
    double s = 0.0;
    for (double wi : w) {
        if (!(wi >= 0.0)) throw DataError("weights must be nonnegative");
        s += wi;
    }
    if (!(s > 0.0)) throw DataError("weights must have a positive sum");
    return s;
}

inline double weighted_mean(std::span<const double> x, std::span<const double> w) {
    const double total = weight_total(w);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * x[i];
    return s / total;
}

inline double weighted_variance(std::span<const double> x, std::span<const double> w) {
    const double total = weight_total(w);
    const double m = weighted_mean(x, w);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - m;
        s += w[i] * d * d;
    }
    return s / total;
}

inline double weighted_covariance(std::span<const double> x, std::span<const double> y,
                                  std::span<const double> w) {
    const double total = weight_total(w);
    const double mx = weighted_mean(x, w);
    const double my = weighted_mean(y, w);
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) s += w[i] * (x[i] - mx) * (y[i] - my);
    return s / total;
}

} // namespace localrd
