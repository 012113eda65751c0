#include <doctest.h>

#include <cmath>
#include <vector>

#include "localrd/errors.hpp"
#include "localrd/honest_rd.hpp"
#include "localrd/panel.hpp"

using namespace localrd;

namespace {

AgeSeries series_from(const std::vector<double>& offsets, const std::vector<double>& values,
                      const std::vector<double>& weights,
                      const std::vector<double>& variances = {}) {
    AgeSeries s;
    s.cutoff = 65.0;
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        AgePoint p;
        p.offset = offsets[i];
        p.value = values[i];
        p.weight = weights[i];
        if (!variances.empty()) p.variance = variances[i];
        s.points.push_back(p);
    }
    return s;
}

// Symmetric 5-per-side layout, unit weights, zero variance unless given.
AgeSeries ten_point(const std::vector<double>& left_values,
                    const std::vector<double>& right_values, double variance = 0.0) {
    std::vector<double> offsets, values, weights, variances;
    const std::vector<double> left_off{-5, -4, -3, -2, -1};
    const std::vector<double> right_off{1, 2, 3, 4, 5};
    for (std::size_t i = 0; i < 5; ++i) {
        offsets.push_back(left_off[i]);
        values.push_back(left_values[i]);
        weights.push_back(1.0);
        variances.push_back(variance);
    }
    for (std::size_t i = 0; i < 5; ++i) {
        offsets.push_back(right_off[i]);
        values.push_back(right_values[i]);
        weights.push_back(1.0);
        variances.push_back(variance);
    }
    return series_from(offsets, values, weights, variances);
}

AgeWindow plain_window() {
    AgeWindow w;
    w.donut_ages.clear();
    return w;
}

} // namespace

TEST_CASE("boundary weights for five equally weighted left cells") {
    auto s = ten_point({0, 0, 0, 0, 0}, {0, 0, 0, 0, 0});
    auto fit = local_linear_boundary(s, Side::left, plain_window());
    REQUIRE(fit.weights.size() == 5);
    const std::vector<double> expect{-0.4, -0.1, 0.2, 0.5, 0.8};
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(fit.weights[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    }
    CHECK(fit.n_cells == 5);
}

TEST_CASE("boundary weights reproduce constants and lines") {
    // Uneven populations; the defining moment conditions must still hold.
    auto s = series_from({-5, -4, -3, -2, -1, 1, 2, 3, 4, 5},
                         {1, 2, 3, 4, 5, 6, 7, 8, 9, 10},
                         {10, 2, 33, 4.5, 8, 1, 2, 3, 4, 5});
    for (Side side : {Side::left, Side::right}) {
        auto fit = local_linear_boundary(s, side, plain_window());
        double sum_w = 0.0, sum_wx = 0.0;
        for (std::size_t i = 0; i < fit.weights.size(); ++i) {
            sum_w += fit.weights[i];
            sum_wx += fit.weights[i] * fit.offsets[i];
        }
        CHECK(sum_w == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::abs(sum_wx) < 1e-12);
    }
    // Exactly linear data is reproduced at the boundary.
    auto left = local_linear_boundary(s, Side::left, plain_window());
    double value_at_zero = 0.0;
    for (std::size_t i = 0; i < left.weights.size(); ++i) {
        value_at_zero += left.weights[i] * (3.0 + 2.0 * left.offsets[i]);
    }
    CHECK(value_at_zero == doctest::Approx(3.0).epsilon(1e-12));
}

TEST_CASE("worst case bias of the five point fit") {
    auto s = ten_point({0, 0, 0, 0, 0}, {0, 0, 0, 0, 0});
    auto fit = local_linear_boundary(s, Side::left, plain_window());
    CHECK(worst_case_bias(fit, 1.0) == doctest::Approx(8.1).epsilon(1e-12));
    CHECK(worst_case_bias(fit, 0.5) == doctest::Approx(4.05).epsilon(1e-12));
    CHECK(worst_case_bias(fit, 0.0) == 0.0);
}

TEST_CASE("bias bound is sharp: a quadratic in the class attains it") {
    auto s0 = ten_point({0, 0, 0, 0, 0}, {0, 0, 0, 0, 0});
    auto fit = local_linear_boundary(s0, Side::left, plain_window());
    // Worst function bends against the sign of each weight: value_i =
    // -(K/2) x_i^2 sign(w_i) realizes bias equal to the bound in magnitude.
    const double k = 0.7;
    double realized = 0.0;
    for (std::size_t i = 0; i < fit.weights.size(); ++i) {
        realized += fit.weights[i] *
                    (k / 2.0) * fit.offsets[i] * fit.offsets[i] *
                    (fit.weights[i] >= 0 ? 1.0 : -1.0);
    }
    CHECK(std::abs(realized) == doctest::Approx(worst_case_bias(fit, k)).epsilon(1e-12));
}

TEST_CASE("folded normal critical values") {
    CHECK(folded_normal_cv(0.0, 0.95) == doctest::Approx(1.959964).epsilon(1e-5));
    CHECK(folded_normal_cv(3.0, 0.95) == doctest::Approx(4.64485).epsilon(1e-4));
    CHECK(folded_normal_cv(0.0, 0.90) == doctest::Approx(1.644854).epsilon(1e-5));
    // Monotone in the bias ratio, and asymptotically t + z_level.
    double prev = folded_normal_cv(0.0, 0.95);
    for (double t : {0.5, 1.0, 2.0, 4.0, 8.0}) {
        const double cv = folded_normal_cv(t, 0.95);
        CHECK(cv > prev);
        prev = cv;
    }
    CHECK(folded_normal_cv(20.0, 0.95) ==
          doctest::Approx(20.0 + 1.644854).epsilon(1e-4));
    CHECK_THROWS_AS(folded_normal_cv(0.0, 1.5), ConfigError);
    CHECK_THROWS_AS(folded_normal_cv(-1.0, 0.95), ConfigError);
}

TEST_CASE("curvature bound selection") {
    // Pure quadratic x^2: |second derivative| = 2, quadratic coefficient 1,
    // scale 4 gives K = 4.
    std::vector<double> offsets{-8, -7, -6, -5, -4, -3, -2, -1, 1, 2};
    std::vector<double> values, weights;
    for (double x : offsets) {
        values.push_back(x * x);
        weights.push_back(1.0);
    }
    auto s = series_from(offsets, values, weights);
    CHECK(select_curvature_bound(s, 0, 4.0) == doctest::Approx(4.0).epsilon(1e-9));

    for (std::size_t i = 0; i < offsets.size(); ++i) {
        values[i] = 3.0 * offsets[i] * offsets[i] + offsets[i];
    }
    auto s2 = series_from(offsets, values, weights);
    CHECK(select_curvature_bound(s2, 0, 4.0) == doctest::Approx(12.0).epsilon(1e-9));

    for (std::size_t i = 0; i < offsets.size(); ++i) values[i] = 5.0;
    auto s3 = series_from(offsets, values, weights);
    CHECK(select_curvature_bound(s3, 0, 4.0) == 0.0);

    // Narrow window: only offsets >= -width enter the pilot fit.
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        const double x = offsets[i];
        values[i] = x >= -4 ? x * x : 50.0;
    }
    auto s4 = series_from(offsets, values, weights);
    CHECK(select_curvature_bound(s4, 4, 4.0) == doctest::Approx(4.0).epsilon(1e-9));

    // Fewer than three distinct left ages cannot identify a quadratic.
    auto tiny = series_from({-2, -1, 1, 2}, {1, 1, 1, 1}, {1, 1, 1, 1});
    CHECK_THROWS_AS(select_curvature_bound(tiny, 0, 4.0), DataError);
}

TEST_CASE("step function recovers the jump exactly") {
    auto s = ten_point({10, 10, 10, 10, 10}, {8, 8, 8, 8, 8});
    HonestRDConfig cfg;
    cfg.window = plain_window();
    auto est = estimate_rd(s, cfg);
    CHECK(est.gamma == doctest::Approx(-2.0).epsilon(1e-12));
    CHECK(est.y_minus == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(est.y_plus == doctest::Approx(8.0).epsilon(1e-12));
    // Zero variance, zero curvature: the interval is the point.
    CHECK(est.se == 0.0);
    CHECK(est.ci_low == doctest::Approx(-2.0));
    CHECK(est.ci_high == doctest::Approx(-2.0));
}

TEST_CASE("lines on both sides leave the jump unchanged") {
    std::vector<double> left, right;
    for (double x : {-5.0, -4.0, -3.0, -2.0, -1.0}) left.push_back(7.0 + 1.3 * x);
    for (double x : {1.0, 2.0, 3.0, 4.0, 5.0}) right.push_back(4.0 - 0.8 * x);
    auto s = ten_point(left, right);
    HonestRDConfig cfg;
    cfg.window = plain_window();
    auto est = estimate_rd(s, cfg);
    CHECK(est.gamma == doctest::Approx(-3.0).epsilon(1e-10));
}

TEST_CASE("interval width grows with the curvature bound") {
    auto s = ten_point({10, 10, 10, 10, 10}, {8, 8, 8, 8, 8}, 0.04);
    HonestRDConfig cfg;
    cfg.window = plain_window();
    double prev_width = 0.0;
    for (double k : {0.0, 0.1, 0.5, 1.0, 2.0}) {
        cfg.curvature_bound = k;
        auto est = estimate_rd(s, cfg);
        const double width = est.ci_high - est.ci_low;
        CHECK(width > prev_width);
        prev_width = width;
        CHECK(est.gamma == doctest::Approx(-2.0).epsilon(1e-12));
        CHECK(est.bias_bound == doctest::Approx(2.0 * 8.1 * k).epsilon(1e-9));
    }
}

TEST_CASE("zero curvature bound reproduces the conventional Wald interval") {
    auto s = ten_point({10, 10.5, 10.2, 10.3, 10.1}, {8.1, 8.0, 8.2, 8.3, 8.2}, 0.04);
    HonestRDConfig cfg;
    cfg.window = plain_window();
    cfg.curvature_bound = 0.0;
    auto est = estimate_rd(s, cfg);
    const double z = folded_normal_cv(0.0, 0.95);
    CHECK(est.ci_low == doctest::Approx(est.gamma - z * est.se).epsilon(1e-12));
    CHECK(est.ci_high == doctest::Approx(est.gamma + z * est.se).epsilon(1e-12));
    CHECK(est.se == doctest::Approx(std::sqrt(est.se_minus * est.se_minus +
                                              est.se_plus * est.se_plus))
                        .epsilon(1e-12));
}

TEST_CASE("affine shifts move intercepts but not the jump") {
    auto base = ten_point({10, 11, 9.5, 10.2, 10.8}, {8, 8.5, 7.9, 8.1, 8.4}, 0.09);
    HonestRDConfig cfg;
    cfg.window = plain_window();
    cfg.curvature_bound = 0.3;
    auto est0 = estimate_rd(base, cfg);

    AgeSeries shifted = base;
    for (auto& p : shifted.points) p.value += 100.0 + 2.0 * p.offset;
    auto est1 = estimate_rd(shifted, cfg);

    CHECK(est1.gamma == doctest::Approx(est0.gamma).epsilon(1e-9));
    CHECK(est1.se == doctest::Approx(est0.se).epsilon(1e-12));
    CHECK(est1.bias_bound == doctest::Approx(est0.bias_bound).epsilon(1e-12));
    CHECK(est1.y_minus == doctest::Approx(est0.y_minus + 100.0).epsilon(1e-9));
}

TEST_CASE("estimate is invariant to a common population rescale") {
    auto s = series_from({-5, -4, -3, -2, -1, 1, 2, 3, 4, 5},
                         {10, 11, 9.5, 10.2, 10.8, 8, 8.5, 7.9, 8.1, 8.4},
                         {100, 220, 310, 45, 80, 120, 95, 300, 210, 70});
    AgeSeries scaled = s;
    for (auto& p : scaled.points) p.weight *= 1000.0;
    HonestRDConfig cfg;
    cfg.window = plain_window();
    cfg.curvature_bound = 0.2;
    auto a = estimate_rd(s, cfg);
    auto b = estimate_rd(scaled, cfg);
    CHECK(a.gamma == doctest::Approx(b.gamma).epsilon(1e-12));
    CHECK(a.se == doctest::Approx(b.se).epsilon(1e-10));
    CHECK(a.bias_bound == doctest::Approx(b.bias_bound).epsilon(1e-12));
}

TEST_CASE("explicit cell variances drive the standard error") {
    auto s = ten_point({10, 10, 10, 10, 10}, {8, 8, 8, 8, 8}, 1.0);
    HonestRDConfig cfg;
    cfg.window = plain_window();
    auto est = estimate_rd(s, cfg);
    // sum w_i^2 with the canonical weights = 0.16+0.01+0.04+0.25+0.64 = 1.1 per side.
    CHECK(est.se == doctest::Approx(std::sqrt(2.2)).epsilon(1e-12));
}

TEST_CASE("residual fallback variance matches the closed form") {
    // No explicit variances. Left values deviate from the fitted line, so the
    // residual variance is positive and scales inversely with population.
    auto s = series_from({-3, -2, -1, 1, 2, 3}, {1.0, 2.0, 2.5, 5.0, 5.0, 5.0},
                         {2.0, 2.0, 2.0, 2.0, 2.0, 2.0});
    auto fit = local_linear_boundary(s, Side::left, plain_window());
    CHECK(fit.se > 0.0);
    // Two cells per side cannot separate noise from slope; the fallback is 0.
    auto two = series_from({-2, -1, 1, 2}, {1.0, 2.0, 3.0, 4.0}, {1, 1, 1, 1});
    auto fit2 = local_linear_boundary(two, Side::left, plain_window());
    CHECK(fit2.se == 0.0);
}

TEST_CASE("degenerate interval when only bias remains") {
    auto s = ten_point({10, 10, 10, 10, 10}, {8, 8, 8, 8, 8}, 0.0);
    HonestRDConfig cfg;
    cfg.window = plain_window();
    cfg.curvature_bound = 1.0;
    auto est = estimate_rd(s, cfg);
    CHECK(est.se == 0.0);
    CHECK(est.bias_bound == doctest::Approx(16.2).epsilon(1e-9));
    CHECK(est.ci_low == doctest::Approx(est.gamma - est.bias_bound).epsilon(1e-9));
    CHECK(est.ci_high == doctest::Approx(est.gamma + est.bias_bound).epsilon(1e-9));
}

TEST_CASE("parametric cubic recovers an exact cubic with a jump") {
    std::vector<double> offsets, values, weights;
    for (int a = -7; a <= 7; ++a) {
        if (a == 0) continue;
        const double x = a;
        offsets.push_back(x);
        const double base = 2.0 + 0.5 * x - 0.3 * x * x + 0.02 * x * x * x;
        values.push_back(base + (x > 0 ? -1.75 : 0.0));
        weights.push_back(1.0 + std::abs(x));
    }
    auto s = series_from(offsets, values, weights);
    auto est = estimate_rd_parametric(s, 3, SeMode::robust);
    CHECK(est.gamma == doctest::Approx(-1.75).epsilon(1e-8));
    CHECK(est.bias_bound == 0.0);
    CHECK(est.parametric_order == 3);
}

TEST_CASE("parametric order one matches the honest point estimate") {
    auto s = series_from({-5, -4, -3, -2, -1, 1, 2, 3, 4, 5},
                         {10, 11, 9.5, 10.2, 10.8, 8, 8.5, 7.9, 8.1, 8.4},
                         {100, 220, 310, 45, 80, 120, 95, 300, 210, 70});
    HonestRDConfig cfg;
    cfg.window = plain_window();
    auto honest = estimate_rd(s, cfg);
    auto parametric = estimate_rd_parametric(s, 1, SeMode::robust);
    CHECK(honest.gamma == doctest::Approx(parametric.gamma).epsilon(1e-10));
}

TEST_CASE("cluster and robust standard errors share the point estimate") {
    // Two periods per age, unpooled, so age clusters have two members.
    AgeSeries s;
    s.cutoff = 65.0;
    int k = 0;
    for (int a = -4; a <= 4; ++a) {
        if (a == 0) continue;
        for (int rep = 0; rep < 2; ++rep) {
            AgePoint p;
            p.offset = a;
            p.value = (a > 0 ? 3.0 : 1.0) + 0.1 * a + 0.05 * ((k % 3) - 1);
            p.weight = 1.0;
            s.points.push_back(p);
            ++k;
        }
    }
    auto robust = estimate_rd_parametric(s, 1, SeMode::robust);
    auto cluster = estimate_rd_parametric(s, 1, SeMode::cluster_on_age);
    CHECK(robust.gamma == doctest::Approx(cluster.gamma).epsilon(1e-12));
    CHECK(robust.se > 0.0);
    CHECK(cluster.se > 0.0);
    CHECK(robust.se != cluster.se);
}

TEST_CASE("parametric order is validated") {
    auto s = ten_point({1, 1, 1, 1, 1}, {2, 2, 2, 2, 2});
    CHECK_THROWS_AS(estimate_rd_parametric(s, 0, SeMode::robust), ConfigError);
    CHECK_THROWS_AS(estimate_rd_parametric(s, 4, SeMode::robust), ConfigError);
    // Order 3 needs at least 4 distinct ages per side.
    auto narrow = series_from({-3, -2, -1, 1, 2, 3}, {1, 1, 1, 2, 2, 2},
                              {1, 1, 1, 1, 1, 1});
    CHECK_THROWS_AS(estimate_rd_parametric(narrow, 3, SeMode::robust), DataError);
}

TEST_CASE("config validation") {
    auto s = ten_point({1, 1, 1, 1, 1}, {2, 2, 2, 2, 2});
    HonestRDConfig cfg;
    cfg.window = plain_window();
    cfg.confidence = 1.0;
    CHECK_THROWS_AS(estimate_rd(s, cfg), ConfigError);
    cfg.confidence = 0.95;
    cfg.curvature_bound = -1.0;
    CHECK_THROWS_AS(estimate_rd(s, cfg), ConfigError);
}
