#include "localrd/variance_functional.hpp"

#include <cmath>

#include "localrd/errors.hpp"
#include "localrd/honest_rd.hpp"

namespace localrd {

namespace {

// Weighted first and second moments of f0 and g0. Written out locally, on
// purpose: the synthetic-truth oracle recomputes the same quantities through
// a separate code path, and the two must stay independent.
struct Moments {
    double f_mean = 0.0, g_mean = 0.0;
    double var_pre = 0.0, var_post = 0.0;
};

Moments moments(const CounterfactualSet& set) {
    Moments m;
    for (std::size_t l = 0; l < set.f0.size(); ++l) {
        m.f_mean += set.weights[l] * set.f0[l];
        m.g_mean += set.weights[l] * set.g0[l];
    }
    for (std::size_t l = 0; l < set.f0.size(); ++l) {
        const double df = set.f0[l] - m.f_mean;
        const double dg = set.g0[l] - m.g_mean;
        m.var_pre += set.weights[l] * df * df;
        m.var_post += set.weights[l] * dg * dg;
    }
    return m;
}

double check_var_pre(const CounterfactualSet& set, double var_pre) {
    double scale = 1.0;
    for (double f : set.f0) scale = std::max(scale, std::abs(f));
    if (var_pre <= 1e-12 * scale * scale) {
        throw NumericError("pre-cutoff variance is degenerate; the reduction share is undefined");
    }
    return var_pre;
}

} // namespace

CounterfactualSet make_counterfactual_set(std::vector<std::string> localities,
                                          std::vector<double> f0, std::vector<double> g0,
                                          std::vector<double> se_f, std::vector<double> se_g,
                                          std::vector<double> bias_f, std::vector<double> bias_g,
                                          std::vector<double> weights) {
    const std::size_t n = localities.size();
    if (n < 2) throw DataError("variance reduction needs at least 2 localities");
    if (f0.size() != n || g0.size() != n || se_f.size() != n || se_g.size() != n ||
        bias_f.size() != n || bias_g.size() != n || weights.size() != n) {
        throw DataError("counterfactual set fields must all have one entry per locality");
    }
    double total = 0.0;
    for (std::size_t l = 0; l < n; ++l) {
        if (!std::isfinite(f0[l]) || !std::isfinite(g0[l])) {
            throw DataError("non-finite boundary value for locality " + localities[l]);
        }
        if (se_f[l] < 0.0 || se_g[l] < 0.0 || bias_f[l] < 0.0 || bias_g[l] < 0.0) {
            throw DataError("negative se or bias bound for locality " + localities[l]);
        }
        if (!(weights[l] >= 0.0) || !std::isfinite(weights[l])) {
            throw DataError("bad weight for locality " + localities[l]);
        }
        total += weights[l];
    }
    if (!(total > 0.0)) throw DataError("weights must have a positive sum");
    for (double& w : weights) w /= total;

    CounterfactualSet set;
    set.localities = std::move(localities);
    set.f0 = std::move(f0);
    set.g0 = std::move(g0);
    set.se_f = std::move(se_f);
    set.se_g = std::move(se_g);
    set.bias_f = std::move(bias_f);
    set.bias_g = std::move(bias_g);
    set.weights = std::move(weights);
    return set;
}

double phi_hat(const CounterfactualSet& set) {
    const Moments m = moments(set);
    return 1.0 - m.var_post / check_var_pre(set, m.var_pre);
}

PhiGradient phi_gradient(const CounterfactualSet& set) {
    const Moments m = moments(set);
    const double var_pre = check_var_pre(set, m.var_pre);

    PhiGradient grad;
    const std::size_t n = set.f0.size();
    grad.d_f.resize(n);
    grad.d_g.resize(n);
    for (std::size_t l = 0; l < n; ++l) {
        grad.d_g[l] = -2.0 * set.weights[l] * (set.g0[l] - m.g_mean) / var_pre;
        grad.d_f[l] = m.var_post * 2.0 * set.weights[l] * (set.f0[l] - m.f_mean) /
                      (var_pre * var_pre);
    }
    return grad;
}

VarianceReductionResult phi_inference(const CounterfactualSet& set, double level) {
    if (!(level > 0.0) || !(level < 1.0)) {
        throw ConfigError("confidence level must lie strictly between 0 and 1");
    }
    const Moments m = moments(set);
    const double var_pre = check_var_pre(set, m.var_pre);
    const PhiGradient grad = phi_gradient(set);

    VarianceReductionResult res;
    res.var_pre = var_pre;
    res.var_post = m.var_post;
    res.phi = 1.0 - m.var_post / var_pre;
    res.n_localities = set.f0.size();

    double s2 = 0.0, bias = 0.0;
    for (std::size_t l = 0; l < set.f0.size(); ++l) {
        s2 += grad.d_f[l] * grad.d_f[l] * set.se_f[l] * set.se_f[l] +
              grad.d_g[l] * grad.d_g[l] * set.se_g[l] * set.se_g[l];
        bias += std::abs(grad.d_f[l]) * set.bias_f[l] + std::abs(grad.d_g[l]) * set.bias_g[l];
    }
    res.se = std::sqrt(s2);
    res.bias_bound = bias;

    double half = 0.0;
    if (res.se > 0.0) {
        half = folded_normal_cv(res.bias_bound / res.se, level) * res.se;
    } else if (res.bias_bound > 0.0) {
        half = res.bias_bound;
    }
    res.ci_low = res.phi - half;
    res.ci_high = res.phi + half;
    return res;
}

} // namespace localrd
