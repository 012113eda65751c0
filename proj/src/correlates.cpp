#include "localrd/correlates.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "localrd/csv.hpp"
#include "localrd/errors.hpp"
#include "localrd/rng.hpp"

namespace localrd {

void validate_covariates(const CovariateMatrix& m) {
    const std::size_t n = m.localities.size();
    if (m.names.size() != m.columns.size()) {
        throw DataError("covariate names and columns disagree");
    }
    for (std::size_t j = 0; j < m.columns.size(); ++j) {
        if (m.columns[j].size() != n) {
            throw DataError("covariate column '" + m.names[j] + "' has the wrong length");
        }
        for (double v : m.columns[j]) {
            if (!std::isfinite(v)) {
                throw DataError("non-finite value in covariate '" + m.names[j] + "'");
            }
        }
    }
    if (m.weights.size() != n) throw DataError("covariate weights must be one per locality");
    for (double w : m.weights) {
        if (!(w > 0.0) || !std::isfinite(w)) {
            throw DataError("covariate weights must be positive and finite");
        }
    }
}

CovariateMatrix load_covariates(const std::string& path) {
    const CsvTable table = read_csv(path);
    const auto id_col = table.column("locality_id");
    if (!id_col) throw DataError("missing required column 'locality_id' in " + path);

    CovariateMatrix m;
    for (std::size_t j = 0; j < table.header.size(); ++j) {
        if (j == *id_col) continue;
        m.names.push_back(table.header[j]);
        m.columns.emplace_back();
    }
    std::set<std::string> seen;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        if (row[*id_col].empty()) {
            throw DataError("line " + std::to_string(r + 2) + ": empty locality_id");
        }
        if (!seen.insert(row[*id_col]).second) {
            throw DataError("line " + std::to_string(r + 2) + ": duplicate locality_id '" +
                            row[*id_col] + "'");
        }
        m.localities.push_back(row[*id_col]);
        std::size_t jj = 0;
        for (std::size_t j = 0; j < table.header.size(); ++j) {
            if (j == *id_col) continue;
            const auto v = parse_double(row[j]);
            if (!v) {
                throw DataError("line " + std::to_string(r + 2) + ": non-numeric value in column '" +
                                table.header[j] + "'");
            }
            m.columns[jj++].push_back(*v);
        }
    }
    m.weights.assign(m.localities.size(), 1.0);
    return m;
}

namespace {

struct MeanVar {
    double mean = 0.0, var = 0.0;
};

MeanVar weighted_mean_var(std::span<const double> x, std::span<const double> w) {
    double total = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        total += w[i];
        sum += w[i] * x[i];
    }
    MeanVar mv;
    mv.mean = sum / total;
    double ss = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - mv.mean;
        ss += w[i] * d * d;
    }
    mv.var = ss / total;
    return mv;
}

} // namespace

CovariateMatrix standardize(const CovariateMatrix& m, bool weighted) {
    validate_covariates(m);
    CovariateMatrix out = m;
    const std::vector<double> ones(m.localities.size(), 1.0);
    std::span<const double> w = weighted ? std::span<const double>(m.weights)
                                         : std::span<const double>(ones);
    for (std::size_t j = 0; j < out.columns.size(); ++j) {
        const MeanVar mv = weighted_mean_var(out.columns[j], w);
        if (!(mv.var > 0.0)) {
            throw DataError("covariate '" + out.names[j] + "' has zero variance; cannot standardize");
        }
        const double sd = std::sqrt(mv.var);
        for (double& v : out.columns[j]) v = (v - mv.mean) / sd;
    }
    out.standardized = true;
    return out;
}

FitResult weighted_bivariate(std::span<const double> y, std::span<const double> x,
                             std::span<const double> w, const std::string& name) {
    const std::size_t n = y.size();
    if (x.size() != n || w.size() != n) throw DataError("bivariate inputs must share a length");
    if (n < 3) throw DataError("bivariate fit needs at least 3 observations");

    double s0 = 0.0, sx = 0.0, sxx = 0.0, sy = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!(w[i] > 0.0)) throw DataError("bivariate weights must be positive");
        s0 += w[i];
        sx += w[i] * x[i];
        sxx += w[i] * x[i] * x[i];
        sy += w[i] * y[i];
        sxy += w[i] * x[i] * y[i];
    }
    const double det = s0 * sxx - sx * sx;
    if (!(det > 1e-14 * std::max(s0 * sxx, 1.0))) {
        throw NumericError("bivariate fit is singular: regressor has no variation");
    }
    const double slope = (s0 * sxy - sx * sy) / det;
    const double intercept = (sxx * sy - sx * sxy) / det;

    // HC1 sandwich on the 2-parameter design.
    double m00 = 0.0, m01 = 0.0, m11 = 0.0; // meat entries
    double tss = 0.0, rss = 0.0;
    const double ybar = sy / s0;
    for (std::size_t i = 0; i < n; ++i) {
        const double r = y[i] - intercept - slope * x[i];
        const double s = w[i] * r;
        m00 += s * s;
        m01 += s * s * x[i];
        m11 += s * s * x[i] * x[i];
        rss += w[i] * r * r;
        tss += w[i] * (y[i] - ybar) * (y[i] - ybar);
    }
    const double factor = static_cast<double>(n) / static_cast<double>(n - 2);
    // bread^{-1} = [[s0, sx], [sx, sxx]], inverted analytically.
    const double var_slope = factor * (sx * sx * m00 - 2.0 * s0 * sx * m01 + s0 * s0 * m11) /
                             (det * det);
    const double var_intercept = factor *
                                 (sxx * sxx * m00 - 2.0 * sxx * sx * m01 + sx * sx * m11) /
                                 (det * det);

    FitResult fit;
    fit.names = {name};
    fit.coefficients = {slope};
    fit.ses = {std::sqrt(std::max(0.0, var_slope))};
    fit.intercept = intercept;
    fit.intercept_se = std::sqrt(std::max(0.0, var_intercept));
    fit.selected = {true};
    fit.r_squared = (tss > 0.0) ? 1.0 - rss / tss : std::numeric_limits<double>::quiet_NaN();
    fit.n_obs = n;
    return fit;
}

namespace {

// Weighted within-group demeaning, in place. Returns the group count.
std::size_t demean_by_groups(std::vector<double>& v, std::span<const std::string> groups,
                             std::span<const double> w) {
    std::map<std::string, std::pair<double, double>> acc; // group -> (sum w, sum w v)
    for (std::size_t i = 0; i < v.size(); ++i) {
        auto& a = acc[groups[i]];
        a.first += w[i];
        a.second += w[i] * v[i];
    }
    for (std::size_t i = 0; i < v.size(); ++i) {
        const auto& a = acc[groups[i]];
        v[i] -= a.second / a.first;
    }
    return acc.size();
}

} // namespace

FitResult weighted_multivariate_ols(std::span<const double> y, const CovariateMatrix& X,
                                    std::span<const std::string> groups) {
    validate_covariates(X);
    const std::size_t n = X.localities.size();
    const std::size_t p = X.columns.size();
    if (y.size() != n) throw DataError("outcome and covariates must share a length");
    const bool fe = !groups.empty();
    if (fe && groups.size() != n) throw DataError("group labels must be one per locality");

    std::vector<double> yy(y.begin(), y.end());
    std::vector<std::vector<double>> cols = X.columns;
    std::size_t n_groups = 0;
    if (fe) {
        n_groups = demean_by_groups(yy, groups, X.weights);
        for (auto& c : cols) demean_by_groups(c, groups, X.weights);
    }

    const std::size_t k = p + (fe ? 0 : 1); // explicit intercept only without FE
    if (n <= k) throw DataError("too few localities for the requested regression");

    Eigen::MatrixXd design(n, k);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t c = 0;
        if (!fe) design(i, c++) = 1.0;
        for (std::size_t j = 0; j < p; ++j) design(i, c++) = cols[j][i];
    }
    Eigen::VectorXd sw(n);
    for (std::size_t i = 0; i < n; ++i) sw(i) = std::sqrt(X.weights[i]);

    // Rank check on the weighted design; dependent columns are the ones the
    // pivoting pushes past the numerical rank.
    const Eigen::MatrixXd scaled = sw.asDiagonal() * design;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(scaled);
    qr.setThreshold(1e-10);
    if (qr.rank() < static_cast<Eigen::Index>(k)) {
        const auto& perm = qr.colsPermutation().indices();
        std::string bad;
        for (Eigen::Index r = qr.rank(); r < static_cast<Eigen::Index>(k); ++r) {
            const Eigen::Index col = perm(r);
            std::string nm;
            if (!fe && col == 0) {
                nm = "(intercept)";
            } else {
                nm = X.names[static_cast<std::size_t>(col) - (fe ? 0 : 1)];
            }
            if (!bad.empty()) bad += ", ";
            bad += nm;
        }
        throw NumericError("rank-deficient design; dependent columns: " + bad);
    }

    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(k, k);
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k);
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::VectorXd xi = design.row(i).transpose();
        m += X.weights[i] * xi * xi.transpose();
        rhs += X.weights[i] * yy[i] * xi;
    }
    const Eigen::MatrixXd bread = m.inverse();
    const Eigen::VectorXd beta = bread * rhs;

    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(k, k);
    double rss = 0.0, tss = 0.0, wsum = 0.0, wy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        wsum += X.weights[i];
        wy += X.weights[i] * yy[i];
    }
    const double ybar = wy / wsum;
    for (std::size_t i = 0; i < n; ++i) {
        const Eigen::VectorXd xi = design.row(i).transpose();
        const double r = yy[i] - xi.dot(beta);
        const double s = X.weights[i] * r;
        meat += (s * s) * xi * xi.transpose();
        rss += X.weights[i] * r * r;
        tss += X.weights[i] * (yy[i] - ybar) * (yy[i] - ybar);
    }
    // HC1 dof correction; absorbed group means count as parameters.
    const double dof_used = static_cast<double>(k + n_groups);
    const double dn = static_cast<double>(n);
    const double factor = (dn > dof_used) ? dn / (dn - dof_used) : 1.0;
    const Eigen::MatrixXd cov = factor * bread * meat * bread;

    FitResult fit;
    fit.names = X.names;
    fit.n_obs = n;
    fit.selected.assign(p, true);
    fit.coefficients.resize(p);
    fit.ses.resize(p);
    std::size_t c = 0;
    if (!fe) {
        fit.intercept = beta(0);
        fit.intercept_se = std::sqrt(std::max(0.0, cov(0, 0)));
        c = 1;
    }
    for (std::size_t j = 0; j < p; ++j) {
        fit.coefficients[j] = beta(c + j);
        fit.ses[j] = std::sqrt(std::max(0.0, cov(c + j, c + j)));
    }
    fit.r_squared = (tss > 0.0) ? 1.0 - rss / tss : std::numeric_limits<double>::quiet_NaN();
    return fit;
}

namespace {

double soft_threshold(double z, double lambda) {
    if (z > lambda) return z - lambda;
    if (z < -lambda) return z + lambda;
    return 0.0;
}

// Coordinate descent on centered data. Columns and response are already
// demeaned under the given weights; weights carry mean 1 over the subset.
struct CdProblem {
    std::vector<std::vector<double>> cols; // centered covariates
    std::vector<double> y;                 // centered response
    std::vector<double> w;                 // normalized to mean 1
    std::vector<double> z;                 // (1/W) sum w x_j^2
    double total_weight = 0.0;
};

CdProblem make_problem(std::span<const double> y, const CovariateMatrix& X,
                       const std::vector<std::size_t>& idx) {
    CdProblem prob;
    const std::size_t p = X.columns.size();
    double wtot = 0.0;
    for (std::size_t i : idx) wtot += X.weights[i];
    const double wmean = wtot / static_cast<double>(idx.size());

    prob.w.reserve(idx.size());
    for (std::size_t i : idx) prob.w.push_back(X.weights[i] / wmean);
    prob.total_weight = static_cast<double>(idx.size());

    double ybar = 0.0;
    for (std::size_t r = 0; r < idx.size(); ++r) ybar += prob.w[r] * y[idx[r]];
    ybar /= prob.total_weight;
    prob.y.reserve(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) prob.y.push_back(y[idx[r]] - ybar);

    prob.cols.resize(p);
    prob.z.resize(p);
    for (std::size_t j = 0; j < p; ++j) {
        double xbar = 0.0;
        for (std::size_t r = 0; r < idx.size(); ++r) xbar += prob.w[r] * X.columns[j][idx[r]];
        xbar /= prob.total_weight;
        auto& col = prob.cols[j];
        col.reserve(idx.size());
        double zj = 0.0;
        for (std::size_t r = 0; r < idx.size(); ++r) {
            const double v = X.columns[j][idx[r]] - xbar;
            col.push_back(v);
            zj += prob.w[r] * v * v;
        }
        prob.z[j] = zj / prob.total_weight;
    }
    return prob;
}

double cd_objective(const CdProblem& prob, const std::vector<double>& resid,
                    const std::vector<double>& beta, double lambda) {
    double q = 0.0;
    for (std::size_t r = 0; r < resid.size(); ++r) q += prob.w[r] * resid[r] * resid[r];
    double l1 = 0.0;
    for (double b : beta) l1 += std::abs(b);
    return q / (2.0 * prob.total_weight) + lambda * l1;
}

// Cyclic coordinate descent; beta holds the warm start on entry and the
// solution on exit. Convergence: max coefficient change < 1e-8.
void cd_solve(const CdProblem& prob, double lambda, std::vector<double>& beta,
              std::vector<double>* objective_trace) {
    const std::size_t p = prob.cols.size();
    const std::size_t n = prob.y.size();
    std::vector<double> resid = prob.y;
    for (std::size_t j = 0; j < p; ++j) {
        if (beta[j] == 0.0) continue;
        for (std::size_t r = 0; r < n; ++r) resid[r] -= beta[j] * prob.cols[j][r];
    }
    if (objective_trace) objective_trace->push_back(cd_objective(prob, resid, beta, lambda));

    constexpr int kMaxSweeps = 100000;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double max_change = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            if (prob.z[j] <= 0.0) continue; // constant column in this subset
            double rho = 0.0;
            for (std::size_t r = 0; r < n; ++r) rho += prob.w[r] * prob.cols[j][r] * resid[r];
            rho = rho / prob.total_weight + prob.z[j] * beta[j];
            const double updated = soft_threshold(rho, lambda) / prob.z[j];
            const double change = updated - beta[j];
            if (change != 0.0) {
                for (std::size_t r = 0; r < n; ++r) resid[r] -= change * prob.cols[j][r];
                beta[j] = updated;
                max_change = std::max(max_change, std::abs(change));
            }
        }
        if (objective_trace) objective_trace->push_back(cd_objective(prob, resid, beta, lambda));
        if (max_change < 1e-8) return;
    }
    throw NumericError("coordinate descent did not converge");
}

double intercept_for(std::span<const double> y, const CovariateMatrix& X,
                     const std::vector<std::size_t>& idx, const std::vector<double>& beta) {
    double wtot = 0.0, ybar = 0.0;
    for (std::size_t i : idx) {
        wtot += X.weights[i];
        ybar += X.weights[i] * y[i];
    }
    ybar /= wtot;
    double shift = 0.0;
    for (std::size_t j = 0; j < X.columns.size(); ++j) {
        if (beta[j] == 0.0) continue;
        double xbar = 0.0;
        for (std::size_t i : idx) xbar += X.weights[i] * X.columns[j][i];
        shift += beta[j] * (xbar / wtot);
    }
    return ybar - shift;
}

std::vector<std::size_t> all_indices(std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

double lambda_max_for(const CdProblem& prob) {
    double lmax = 0.0;
    for (std::size_t j = 0; j < prob.cols.size(); ++j) {
        double g = 0.0;
        for (std::size_t r = 0; r < prob.y.size(); ++r) {
            g += prob.w[r] * prob.cols[j][r] * prob.y[r];
        }
        lmax = std::max(lmax, std::abs(g) / prob.total_weight);
    }
    return lmax;
}

} // namespace

FitResult lasso_fixed(std::span<const double> y, const CovariateMatrix& X, double lambda,
                      std::vector<double>* objective_trace) {
    validate_covariates(X);
    if (y.size() != X.localities.size()) throw DataError("outcome and covariates must share a length");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
        throw ConfigError("lasso penalty must be finite and nonnegative");
    }

    const auto idx = all_indices(y.size());
    const CdProblem prob = make_problem(y, X, idx);
    std::vector<double> beta(X.columns.size(), 0.0);
    cd_solve(prob, lambda, beta, objective_trace);

    FitResult fit;
    fit.names = X.names;
    fit.coefficients = beta;
    fit.intercept = intercept_for(y, X, idx, beta);
    fit.lambda = lambda;
    fit.n_obs = y.size();
    fit.selected.resize(beta.size());
    for (std::size_t j = 0; j < beta.size(); ++j) fit.selected[j] = beta[j] != 0.0;
    return fit;
}

FitResult lasso_cv(std::span<const double> y, const CovariateMatrix& X, int folds,
                   std::uint64_t seed) {
    validate_covariates(X);
    const std::size_t n = X.localities.size();
    if (y.size() != n) throw DataError("outcome and covariates must share a length");
    if (!X.standardized) {
        throw ConfigError("lasso_cv expects standardized covariates; call standardize first");
    }
    if (folds < 2 || static_cast<std::size_t>(folds) > n) {
        throw ConfigError("folds must be between 2 and the number of localities (" +
                          std::to_string(n) + "), got " + std::to_string(folds));
    }

    FitResult fit;
    fit.names = X.names;
    fit.n_obs = n;

    const auto full_idx = all_indices(n);
    const CdProblem full = make_problem(y, X, full_idx);
    const double lmax = lambda_max_for(full);
    if (!(lmax > 0.0)) {
        fit.coefficients.assign(X.columns.size(), 0.0);
        fit.selected.assign(X.columns.size(), false);
        fit.intercept = intercept_for(y, X, full_idx, fit.coefficients);
        fit.lambda = 0.0;
        fit.warnings.push_back("response is flat against every covariate; nothing selected");
        return fit;
    }

    LassoDiagnostics diag;
    diag.seed = seed;
    constexpr int kPathLength = 100;
    diag.lambda_path.resize(kPathLength);
    for (int i = 0; i < kPathLength; ++i) {
        diag.lambda_path[i] = lmax * std::pow(1e-3, static_cast<double>(i) / (kPathLength - 1));
    }

    // Deterministic seeded partition: shuffled indices dealt round-robin.
    std::vector<std::size_t> order = full_idx;
    Rng rng(seed);
    rng.shuffle(order);
    diag.fold_of.assign(n, 0);
    for (std::size_t r = 0; r < n; ++r) diag.fold_of[order[r]] = static_cast<int>(r % folds);

    std::vector<double> cv_sse(kPathLength, 0.0);
    double weight_total = 0.0;
    for (double w : X.weights) weight_total += w;

    for (int f = 0; f < folds; ++f) {
        std::vector<std::size_t> train, test;
        for (std::size_t i = 0; i < n; ++i) {
            (diag.fold_of[i] == f ? test : train).push_back(i);
        }
        const CdProblem prob = make_problem(y, X, train);
        std::vector<double> beta(X.columns.size(), 0.0);
        for (int li = 0; li < kPathLength; ++li) {
            cd_solve(prob, diag.lambda_path[li], beta, nullptr);
            const double a = intercept_for(y, X, train, beta);
            for (std::size_t i : test) {
                double pred = a;
                for (std::size_t j = 0; j < X.columns.size(); ++j) {
                    if (beta[j] != 0.0) pred += beta[j] * X.columns[j][i];
                }
                const double e = y[i] - pred;
                cv_sse[li] += X.weights[i] * e * e;
            }
        }
    }
    diag.mean_cv_error.resize(kPathLength);
    for (int li = 0; li < kPathLength; ++li) diag.mean_cv_error[li] = cv_sse[li] / weight_total;

    int best = 0;
    for (int li = 1; li < kPathLength; ++li) {
        if (diag.mean_cv_error[li] < diag.mean_cv_error[best]) best = li;
    }

    // Final fit on the full data, walking the path down to the winner so the
    // solution benefits from warm starts.
    std::vector<double> beta(X.columns.size(), 0.0);
    for (int li = 0; li <= best; ++li) cd_solve(full, diag.lambda_path[li], beta, nullptr);

    fit.coefficients = beta;
    fit.intercept = intercept_for(y, X, full_idx, beta);
    fit.lambda = diag.lambda_path[best];
    fit.selected.resize(beta.size());
    bool any = false;
    for (std::size_t j = 0; j < beta.size(); ++j) {
        fit.selected[j] = beta[j] != 0.0;
        any = any || fit.selected[j];
    }
    if (!any) fit.warnings.push_back("cross-validation selected an empty model");
    fit.lasso = std::move(diag);
    return fit;
}

FitResult post_lasso_ols(std::span<const double> y, const CovariateMatrix& X,
                         const std::vector<bool>& selected) {
    validate_covariates(X);
    const std::size_t n = X.localities.size();
    if (y.size() != n) throw DataError("outcome and covariates must share a length");
    if (selected.size() != X.columns.size()) {
        throw DataError("selection flags must match the covariate count");
    }

    CovariateMatrix sub;
    sub.localities = X.localities;
    sub.weights = X.weights;
    sub.standardized = X.standardized;
    for (std::size_t j = 0; j < selected.size(); ++j) {
        if (selected[j]) {
            sub.names.push_back(X.names[j]);
            sub.columns.push_back(X.columns[j]);
        }
    }

    if (sub.columns.empty()) {
        // Intercept-only: the weighted mean with a robust standard error.
        double wtot = 0.0, ybar = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            wtot += X.weights[i];
            ybar += X.weights[i] * y[i];
        }
        ybar /= wtot;
        double meat = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double s = X.weights[i] * (y[i] - ybar);
            meat += s * s;
        }
        const double factor = (n > 1) ? static_cast<double>(n) / static_cast<double>(n - 1) : 1.0;
        FitResult fit;
        fit.intercept = ybar;
        fit.intercept_se = std::sqrt(factor * meat) / wtot;
        fit.n_obs = n;
        fit.r_squared = 0.0;
        fit.warnings.push_back("no covariates selected; reporting the intercept-only fit");
        return fit;
    }

    FitResult fit = weighted_multivariate_ols(y, sub);
    // Re-expand to the original column order so callers can align results.
    std::vector<double> coef(X.columns.size(), 0.0);
    std::vector<double> ses(X.columns.size(), std::numeric_limits<double>::quiet_NaN());
    std::size_t c = 0;
    for (std::size_t j = 0; j < selected.size(); ++j) {
        if (selected[j]) {
            coef[j] = fit.coefficients[c];
            ses[j] = fit.ses[c];
            ++c;
        }
    }
    fit.names = X.names;
    fit.coefficients = std::move(coef);
    fit.ses = std::move(ses);
    fit.selected = selected;
    return fit;
}

FitResult scale_coefficients(FitResult fit, double national_estimate) {
    if (!std::isfinite(national_estimate) || national_estimate == 0.0) {
        throw NumericError("national estimate is zero or non-finite; cannot rescale");
    }
    const double mag = std::abs(national_estimate);
    for (double& c : fit.coefficients) c /= national_estimate;
    for (double& s : fit.ses) s /= mag;
    fit.intercept /= national_estimate;
    fit.intercept_se /= mag;
    fit.scale_divisor = national_estimate;
    return fit;
}

} // namespace localrd
