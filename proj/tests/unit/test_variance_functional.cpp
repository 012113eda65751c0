#include <doctest.h>

#include <cmath>
#include <vector>

#include "localrd/errors.hpp"
#include "localrd/variance_functional.hpp"

using namespace localrd;

namespace {

CounterfactualSet simple_set(std::vector<double> f0, std::vector<double> g0,
                             std::vector<double> weights,
                             std::vector<double> se_f = {}, std::vector<double> se_g = {},
                             std::vector<double> bias_f = {},
                             std::vector<double> bias_g = {}) {
    const std::size_t n = f0.size();
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back("L" + std::to_string(i));
    if (se_f.empty()) se_f.assign(n, 0.0);
    if (se_g.empty()) se_g.assign(n, 0.0);
    if (bias_f.empty()) bias_f.assign(n, 0.0);
    if (bias_g.empty()) bias_g.assign(n, 0.0);
    return make_counterfactual_set(ids, f0, g0, se_f, se_g, bias_f, bias_g, weights);
}

// Independent finite-difference check of the analytic gradient, built from
// plain loops with no shared code path.
double phi_by_hand(const std::vector<double>& f, const std::vector<double>& g,
                   const std::vector<double>& w) {
    double total = 0.0;
    for (double v : w) total += v;
    double fbar = 0.0, gbar = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        fbar += w[i] / total * f[i];
        gbar += w[i] / total * g[i];
    }
    double vf = 0.0, vg = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        vf += w[i] / total * (f[i] - fbar) * (f[i] - fbar);
        vg += w[i] / total * (g[i] - gbar) * (g[i] - gbar);
    }
    return 1.0 - vg / vf;
}

} // namespace

TEST_CASE("construction validates and normalizes") {
    auto set = simple_set({1, 2, 3}, {1, 1, 1}, {2, 2, 4});
    CHECK(set.weights[0] == doctest::Approx(0.25));
    CHECK(set.weights[2] == doctest::Approx(0.5));
    CHECK_THROWS_AS(simple_set({1}, {1}, {1}), DataError);
    CHECK_THROWS_AS(simple_set({1, 2}, {1}, {1, 1}), DataError);
    CHECK_THROWS_AS(simple_set({1, 2}, {1, 1}, {1, -1}), DataError);
    CHECK_THROWS_AS(simple_set({1, 2}, {1, 1}, {1, 1}, {1, 1}, {1, -1}), DataError);
}

TEST_CASE("perfect equalization gives phi of one") {
    auto set = simple_set({10, 20, 30, 40}, {5, 5, 5, 5}, {1, 1, 1, 1});
    CHECK(phi_hat(set) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("no change gives phi of zero, widening goes negative") {
    auto same = simple_set({10, 20, 30}, {11, 21, 31}, {1, 1, 1});
    CHECK(phi_hat(same) == doctest::Approx(0.0).epsilon(1e-12));
    auto wider = simple_set({10, 20, 30}, {0, 20, 40}, {1, 1, 1});
    CHECK(phi_hat(wider) == doctest::Approx(1.0 - 4.0).epsilon(1e-12));
}

TEST_CASE("halving every gap yields three quarters") {
    // g - gbar is half of f - fbar locality by locality.
    auto set = simple_set({10, 20, 30, 40}, {5, 10, 15, 20}, {1, 1, 1, 1});
    CHECK(phi_hat(set) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("weights matter") {
    // With almost no weight on the third locality it is nearly irrelevant.
    auto set = simple_set({0, 10, 1e4}, {0, 5, -1e4}, {1, 1, 1e-15});
    CHECK(phi_hat(set) == doctest::Approx(0.75).epsilon(1e-6));
}

TEST_CASE("degenerate pre-cutoff variance throws") {
    auto set = simple_set({7, 7, 7}, {1, 2, 3}, {1, 1, 1});
    CHECK_THROWS_AS(phi_hat(set), NumericError);
    CHECK_THROWS_AS(phi_inference(set), NumericError);
}

TEST_CASE("analytic gradient matches the closed form on a two point set") {
    // f = (0, 2), g = (0, 1), equal weights: var_pre = 1, var_post = 0.25.
    auto set = simple_set({0, 2}, {0, 1}, {1, 1});
    CHECK(phi_hat(set) == doctest::Approx(0.75).epsilon(1e-14));
    auto grad = phi_gradient(set);
    // d phi / d g_l = -2 w_l (g_l - gbar) / var_pre = -+0.5
    CHECK(grad.d_g[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(grad.d_g[1] == doctest::Approx(-0.5).epsilon(1e-12));
    // d phi / d f_l = var_post 2 w_l (f_l - fbar) / var_pre^2 = -+0.25
    CHECK(grad.d_f[0] == doctest::Approx(-0.25).epsilon(1e-12));
    CHECK(grad.d_f[1] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("analytic gradient matches finite differences") {
    std::vector<double> f{3.0, -1.0, 4.0, 1.5, 9.2};
    std::vector<double> g{2.0, 0.5, 1.0, 1.2, 3.3};
    std::vector<double> w{1.0, 2.0, 0.5, 3.0, 1.5};
    auto set = simple_set(f, g, w);
    auto grad = phi_gradient(set);
    const double h = 1e-6;
    for (std::size_t l = 0; l < f.size(); ++l) {
        auto fp = f;
        fp[l] += h;
        auto fm = f;
        fm[l] -= h;
        const double d_f = (phi_by_hand(fp, g, w) - phi_by_hand(fm, g, w)) / (2 * h);
        CHECK(grad.d_f[l] == doctest::Approx(d_f).epsilon(1e-5));
        auto gp = g;
        gp[l] += h;
        auto gm = g;
        gm[l] -= h;
        const double d_g = (phi_by_hand(f, gp, w) - phi_by_hand(f, gm, w)) / (2 * h);
        CHECK(grad.d_g[l] == doctest::Approx(d_g).epsilon(1e-5));
    }
}

TEST_CASE("delta method standard error on the two point set") {
    // Unit standard errors on g only: se^2 = 0.5^2 + 0.5^2 = 0.5.
    auto set = simple_set({0, 2}, {0, 1}, {1, 1}, {0, 0}, {1, 1});
    auto res = phi_inference(set);
    CHECK(res.phi == doctest::Approx(0.75).epsilon(1e-12));
    CHECK(res.se == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
    CHECK(res.var_pre == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(res.var_post == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(res.n_localities == 2);
    // Conventional interval at zero bias.
    const double z = 1.959964;
    CHECK(res.ci_low == doctest::Approx(0.75 - z * res.se).epsilon(1e-5));
    CHECK(res.ci_high == doctest::Approx(0.75 + z * res.se).epsilon(1e-5));
}

TEST_CASE("bias bounds propagate through the absolute gradient") {
    auto no_bias = simple_set({0, 2}, {0, 1}, {1, 1}, {0.1, 0.1}, {0.1, 0.1});
    auto with_bias = simple_set({0, 2}, {0, 1}, {1, 1}, {0.1, 0.1}, {0.1, 0.1},
                                {0.2, 0.2}, {0.3, 0.3});
    auto a = phi_inference(no_bias);
    auto b = phi_inference(with_bias);
    CHECK(a.bias_bound == 0.0);
    // |d_f| = 0.25 each, |d_g| = 0.5 each: bound = 2(0.25*0.2) + 2(0.5*0.3).
    CHECK(b.bias_bound == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(b.ci_high - b.ci_low > a.ci_high - a.ci_low);
    CHECK(b.phi == doctest::Approx(a.phi).epsilon(1e-14));
}

TEST_CASE("noiseless inference degenerates to the point or the bias band") {
    auto clean = simple_set({0, 2}, {0, 1}, {1, 1});
    auto res = phi_inference(clean);
    CHECK(res.se == 0.0);
    CHECK(res.ci_low == doctest::Approx(0.75));
    CHECK(res.ci_high == doctest::Approx(0.75));
    auto biased = simple_set({0, 2}, {0, 1}, {1, 1}, {0, 0}, {0, 0}, {0.2, 0.2}, {0, 0});
    auto res2 = phi_inference(biased);
    CHECK(res2.se == 0.0);
    CHECK(res2.bias_bound == doctest::Approx(0.1).epsilon(1e-12));
    CHECK(res2.ci_low == doctest::Approx(0.75 - 0.1).epsilon(1e-12));
    CHECK(res2.ci_high == doctest::Approx(0.75 + 0.1).epsilon(1e-12));
}

TEST_CASE("phi is invariant to common location shifts") {
    std::vector<double> f{3.0, -1.0, 4.0, 1.5};
    std::vector<double> g{2.0, 0.5, 1.0, 1.2};
    std::vector<double> w{1.0, 2.0, 0.5, 3.0};
    auto base = phi_hat(simple_set(f, g, w));
    for (auto& v : f) v += 50.0;
    for (auto& v : g) v -= 20.0;
    CHECK(phi_hat(simple_set(f, g, w)) == doctest::Approx(base).epsilon(1e-10));
}

TEST_CASE("confidence level is validated") {
    auto set = simple_set({0, 2}, {0, 1}, {1, 1});
    CHECK_THROWS_AS(phi_inference(set, 0.0), ConfigError);
    CHECK_THROWS_AS(phi_inference(set, 1.0), ConfigError);
}
