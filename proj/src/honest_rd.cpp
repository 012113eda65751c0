#include "localrd/honest_rd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <set>

#include "localrd/errors.hpp"

namespace localrd {

namespace {

double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

struct SidePoints {
    std::vector<double> x, y, p;
    std::vector<std::optional<double>> var;
};

SidePoints collect_side(const AgeSeries& series, Side side, double bandwidth) {
    SidePoints pts;
    for (const auto& pt : series.points) {
        if (std::abs(pt.offset) > bandwidth) continue;
        const bool is_left = pt.offset <= 0.0;
        if ((side == Side::left) != is_left) continue;
        pts.x.push_back(pt.offset);
        pts.y.push_back(pt.value);
        pts.p.push_back(pt.weight);
        pts.var.push_back(pt.variance);
    }
    return pts;
}

std::size_t distinct_count(const std::vector<double>& x) {
    std::set<double> s(x.begin(), x.end());
    return s.size();
}

void validate_confidence(double level) {
    if (!(level > 0.0 && level < 1.0)) {
        throw ConfigError("confidence level must lie strictly between 0 and 1");
    }
}

} // namespace

SideFit local_linear_boundary(const AgeSeries& series, Side side, const AgeWindow& window) {
    validate_window(window);
    const SidePoints pts = collect_side(series, side, window.bandwidth);
    const std::size_t n = pts.x.size();
    const char* label = (side == Side::left) ? "left" : "right";
    if (distinct_count(pts.x) < 2) {
        throw DataError(std::string("need at least 2 distinct ages on the ") + label +
                        " side of the cutoff, have " + std::to_string(distinct_count(pts.x)));
    }

    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        s0 += pts.p[i];
        s1 += pts.p[i] * pts.x[i];
        s2 += pts.p[i] * pts.x[i] * pts.x[i];
    }
    const double det = s0 * s2 - s1 * s1;
    // det = sum_{i<j} p_i p_j (x_i - x_j)^2, zero only if all offsets coincide.
    const double scale = s0 * std::max(1.0, s2 / std::max(s0, 1e-300));
    if (!(det > 1e-14 * std::max(scale, 1e-300))) {
        throw NumericError(std::string("singular linear fit on the ") + label +
                           " side: offsets are effectively collinear");
    }

    SideFit fit;
    fit.n_cells = static_cast<int>(n);
    fit.offsets = pts.x;
    fit.weights.resize(n);
    double intercept = 0.0, slope = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        // Linear representation of the intercept: evaluating the weighted LS
        // line at offset 0 gives sum(w_i y_i) with these weights.
        fit.weights[i] = pts.p[i] * (s2 - s1 * pts.x[i]) / det;
        intercept += fit.weights[i] * pts.y[i];
        slope += pts.p[i] * (s0 * pts.x[i] - s1) / det * pts.y[i];
    }
    fit.intercept = intercept;
    fit.slope = slope;

    // Cell variances: exact when supplied, otherwise a residual-based
    // fallback. The fallback assigns cell i the dof-corrected weighted
    // residual variance scaled by (mean population / population_i), mirroring
    // the 1/population structure exact cell variances have. It is an
    // approximation; person-level data would pin these down exactly.
    bool need_fallback = false;
    for (const auto& v : pts.var) {
        if (!v) need_fallback = true;
    }
    double fallback = 0.0;
    if (need_fallback && n > 2) {
        double rss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double r = pts.y[i] - fit.intercept - fit.slope * pts.x[i];
            rss += pts.p[i] * r * r;
        }
        const double wrv = rss / s0;
        fallback = wrv * static_cast<double>(n) / static_cast<double>(n - 2);
    }
    const double mean_pop = s0 / static_cast<double>(n);
    double se2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = pts.var[i] ? *pts.var[i] : fallback * (mean_pop / pts.p[i]);
        se2 += fit.weights[i] * fit.weights[i] * v;
    }
    fit.se = std::sqrt(se2);
    return fit;
}

double worst_case_bias(const SideFit& fit, double curvature_bound) {
    if (!(curvature_bound >= 0.0) || !std::isfinite(curvature_bound)) {
        throw ConfigError("curvature bound must be finite and nonnegative");
    }
    // Over all f with |f''| <= K the fitted intercept can miss the true
    // boundary value by at most (K/2) sum(|w_i| x_i^2): the fit reproduces
    // the tangent line at the cutoff, and the leftover Taylor remainder is
    // bounded by (K/2) x^2 cell by cell, with the worst case attained by
    // matching each remainder's sign to the weight's.
    double s = 0.0;
    for (std::size_t i = 0; i < fit.weights.size(); ++i) {
        s += std::abs(fit.weights[i]) * fit.offsets[i] * fit.offsets[i];
    }
    return 0.5 * curvature_bound * s;
}

double folded_normal_cv(double t, double level) {
    if (!(t >= 0.0) || !std::isfinite(t)) {
        throw ConfigError("bias-to-se ratio must be finite and nonnegative");
    }
    validate_confidence(level);

    const auto residual = [&](double c) {
        return normal_cdf(c - t) - normal_cdf(-c - t) - level;
    };
    double lo = 0.0;
    double hi = t + 10.0;
    while (residual(hi) < 0.0) {
        hi += 10.0;
        if (hi > t + 1e4) throw NumericError("folded normal critical value did not bracket");
    }
    while (hi - lo > 1e-12) {
        const double mid = 0.5 * (lo + hi);
        if (residual(mid) < 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    const double c = 0.5 * (lo + hi);
    if (std::abs(residual(c)) > 1e-10) {
        throw NumericError("folded normal critical value did not converge");
    }
    return c;
}

double select_curvature_bound(const AgeSeries& series, int left_window_width,
                              double bound_scale) {
    if (left_window_width < 0) throw ConfigError("left window width must be nonnegative");
    if (!(bound_scale > 0.0) || !std::isfinite(bound_scale)) {
        throw ConfigError("bound scale must be positive and finite");
    }

    std::vector<double> x, y, p;
    for (const auto& pt : series.points) {
        if (pt.offset > 0.0) continue;
        if (left_window_width > 0 && pt.offset < -static_cast<double>(left_window_width)) continue;
        x.push_back(pt.offset);
        y.push_back(pt.value);
        p.push_back(pt.weight);
    }
    if (distinct_count(x) < 3) {
        throw DataError("curvature selection needs at least 3 distinct ages left of the cutoff, have " +
                        std::to_string(distinct_count(x)));
    }

    Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
    Eigen::Vector3d b = Eigen::Vector3d::Zero();
    for (std::size_t i = 0; i < x.size(); ++i) {
        const Eigen::Vector3d row(1.0, x[i], x[i] * x[i]);
        m += p[i] * row * row.transpose();
        b += p[i] * y[i] * row;
    }
    Eigen::FullPivLU<Eigen::Matrix3d> lu(m);
    lu.setThreshold(1e-12);
    if (!lu.isInvertible()) {
        throw NumericError("curvature selection fit is singular");
    }
    const Eigen::Vector3d beta = lu.solve(b);

    // Exactly linear data should select 0, but the solve leaves roundoff in
    // the quadratic slot. Snap when the implied bend over the window is
    // negligible next to the value scale.
    double max_abs_y = 0.0, max_x2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        max_abs_y = std::max(max_abs_y, std::abs(y[i]));
        max_x2 = std::max(max_x2, x[i] * x[i]);
    }
    if (std::abs(beta[2]) * std::max(1.0, max_x2) <= 1e-9 * std::max(1.0, max_abs_y)) {
        return 0.0;
    }
    return bound_scale * std::abs(beta[2]);
}

RDEstimate estimate_rd(const AgeSeries& series, const HonestRDConfig& config) {
    validate_window(config.window);
    validate_confidence(config.confidence);
    if (!(config.curvature_bound >= 0.0) || !std::isfinite(config.curvature_bound)) {
        throw ConfigError("curvature bound must be finite and nonnegative");
    }

    const SideFit left = local_linear_boundary(series, Side::left, config.window);
    const SideFit right = local_linear_boundary(series, Side::right, config.window);

    RDEstimate est;
    est.config = config;
    est.y_minus = left.intercept;
    est.y_plus = right.intercept;
    est.gamma = right.intercept - left.intercept;
    est.se_minus = left.se;
    est.se_plus = right.se;
    est.se = std::sqrt(left.se * left.se + right.se * right.se);
    est.bias_minus = worst_case_bias(left, config.curvature_bound);
    est.bias_plus = worst_case_bias(right, config.curvature_bound);
    est.bias_bound = est.bias_minus + est.bias_plus;
    est.n_cells_left = left.n_cells;
    est.n_cells_right = right.n_cells;

    double half = 0.0;
    if (est.se > 0.0) {
        half = folded_normal_cv(est.bias_bound / est.se, config.confidence) * est.se;
    } else if (est.bias_bound > 0.0) {
        half = est.bias_bound;
    }
    est.ci_low = est.gamma - half;
    est.ci_high = est.gamma + half;
    return est;
}

namespace {

// One side of the global polynomial fit: coefficients plus the sandwich
// variance of the fitted value at offset 0 (the first coefficient).
struct PolyFit {
    double intercept = 0.0;
    double var0 = 0.0;
    int n_cells = 0;
};

PolyFit poly_side_fit(const SidePoints& pts, int order, SeMode se_mode, const char* label) {
    const int k = order + 1;
    const std::size_t n = pts.x.size();
    if (distinct_count(pts.x) < static_cast<std::size_t>(k)) {
        throw DataError(std::string("polynomial of order ") + std::to_string(order) +
                        " needs at least " + std::to_string(k) + " distinct ages on the " + label +
                        " side, have " + std::to_string(distinct_count(pts.x)));
    }

    Eigen::MatrixXd design(n, k);
    for (std::size_t i = 0; i < n; ++i) {
        double v = 1.0;
        for (int j = 0; j < k; ++j) {
            design(i, j) = v;
            v *= pts.x[i];
        }
    }
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k);
    for (std::size_t i = 0; i < n; ++i) {
        m += pts.p[i] * design.row(i).transpose() * design.row(i);
        rhs += pts.p[i] * pts.y[i] * design.row(i).transpose();
    }
    Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
    lu.setThreshold(1e-12);
    if (!lu.isInvertible()) {
        throw NumericError(std::string("singular polynomial fit on the ") + label + " side");
    }
    const Eigen::VectorXd beta = lu.solve(rhs);
    const Eigen::MatrixXd bread = lu.inverse();

    Eigen::VectorXd resid(n);
    for (std::size_t i = 0; i < n; ++i) {
        resid(i) = pts.y[i] - design.row(i).dot(beta);
    }

    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k, k);
    double factor = 1.0;
    const double dn = static_cast<double>(n);
    if (se_mode == SeMode::robust) {
        for (std::size_t i = 0; i < n; ++i) {
            const Eigen::VectorXd xi = design.row(i).transpose();
            const double s = pts.p[i] * resid(i);
            meat += (s * s) * xi * xi.transpose();
        }
        if (n > static_cast<std::size_t>(k)) factor = dn / (dn - k);
    } else {
        // Cluster scores by age so serially dependent cells at a shared age
        // (multiple periods) are summed before squaring.
        std::map<double, Eigen::VectorXd> scores;
        for (std::size_t i = 0; i < n; ++i) {
            auto it = scores.try_emplace(pts.x[i], Eigen::VectorXd::Zero(k)).first;
            it->second += pts.p[i] * resid(i) * design.row(i).transpose();
        }
        for (const auto& kv : scores) meat += kv.second * kv.second.transpose();
        const double g = static_cast<double>(scores.size());
        if (g > 1.0 && n > static_cast<std::size_t>(k)) {
            factor = g / (g - 1.0) * (dn - 1.0) / (dn - k);
        }
    }
    const Eigen::MatrixXd cov = factor * bread * meat * bread;

    PolyFit fit;
    fit.intercept = beta[0];
    fit.var0 = std::max(0.0, cov(0, 0));
    fit.n_cells = static_cast<int>(n);
    return fit;
}

} // namespace

RDEstimate estimate_rd_parametric(const AgeSeries& series, int order, SeMode se_mode,
                                  double confidence) {
    if (order < 1 || order > 3) throw ConfigError("polynomial order must be 1, 2, or 3");
    validate_confidence(confidence);

    double span = 0.0;
    for (const auto& pt : series.points) span = std::max(span, std::abs(pt.offset));
    const double bandwidth = std::max(2.0, std::ceil(span));

    const SidePoints left_pts = collect_side(series, Side::left, bandwidth);
    const SidePoints right_pts = collect_side(series, Side::right, bandwidth);
    const PolyFit left = poly_side_fit(left_pts, order, se_mode, "left");
    const PolyFit right = poly_side_fit(right_pts, order, se_mode, "right");

    RDEstimate est;
    est.parametric_order = order;
    est.config.window.cutoff = series.cutoff;
    est.config.window.bandwidth = static_cast<int>(bandwidth);
    est.config.window.donut_ages.clear();
    est.config.curvature_bound = 0.0;
    est.config.confidence = confidence;
    est.y_minus = left.intercept;
    est.y_plus = right.intercept;
    est.gamma = right.intercept - left.intercept;
    est.se_minus = std::sqrt(left.var0);
    est.se_plus = std::sqrt(right.var0);
    est.se = std::sqrt(left.var0 + right.var0);
    est.bias_bound = 0.0;
    est.n_cells_left = left.n_cells;
    est.n_cells_right = right.n_cells;

    const double half = (est.se > 0.0) ? folded_normal_cv(0.0, confidence) * est.se : 0.0;
    est.ci_low = est.gamma - half;
    est.ci_high = est.gamma + half;
    return est;
}

} // namespace localrd
