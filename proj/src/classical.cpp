#include "metapool/classical.hpp"

#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "metapool/errors.hpp"
#include "metapool/util.hpp"

namespace metapool {

namespace {

constexpr double kZ95 = 1.959963984540054;  // Phi^{-1}(0.975)

void require_positive_uncertainties(const Dataset& dataset) {
    for (const auto& obs : dataset.observations) {
        if (!std::isfinite(obs.s) || !(obs.s > 0.0))
            throw ValidationError(Errc::non_positive_uncertainty,
                                  "s must be > 0 for source " + obs.source_id);
        if (!std::isfinite(obs.y))
            throw ValidationError(Errc::non_finite_value, "y for source " + obs.source_id);
    }
}

Eigen::VectorXd trimmed_weights_from_s(const Eigen::VectorXd& s, double trim_factor) {
    const Eigen::VectorXd inv_var = s.array().square().inverse();
    const double cap = trim_factor * inv_var.mean();
    return inv_var.cwiseMin(cap);
}

double weighted_point(const Eigen::VectorXd& w, const Eigen::VectorXd& y) {
    return w.dot(y) / w.sum();
}

// Solve (X^T W X) b = X^T W y through a pivoted QR of sqrt(W) X, with a
// relative rank tolerance of 1e-10.
struct WlsSolution {
    Eigen::VectorXd coefficients;
    Eigen::MatrixXd normal_inverse;  // (X^T W X)^{-1}
};

WlsSolution solve_wls(const Eigen::MatrixXd& X, const Eigen::VectorXd& w,
                      const Eigen::VectorXd& y) {
    const Eigen::VectorXd root_w = w.array().sqrt();
    const Eigen::MatrixXd Xw = root_w.asDiagonal() * X;
    const Eigen::VectorXd yw = root_w.asDiagonal() * y;

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xw);
    qr.setThreshold(1e-10);
    if (qr.rank() < X.cols())
        throw ValidationError(Errc::rank_deficient_design,
                              "design matrix rank " + std::to_string(qr.rank()) + " < " +
                                  std::to_string(X.cols()));
    WlsSolution out;
    out.coefficients = qr.solve(yw);
    const Eigen::MatrixXd normal = Xw.transpose() * Xw;
    out.normal_inverse = normal.ldlt().solve(Eigen::MatrixXd::Identity(X.cols(), X.cols()));
    return out;
}

}  // namespace

const char* estimator_name(EstimatorKind kind) {
    switch (kind) {
        case EstimatorKind::raw: return "raw";
        case EstimatorKind::weighted: return "weighted";
        case EstimatorKind::trimmed: return "trimmed";
        case EstimatorKind::lr: return "lr";
        case EstimatorKind::wlr: return "wlr";
        case EstimatorKind::twlr: return "twlr";
    }
    return "unknown";
}

WeightVector standardize_weights(const Eigen::VectorXd& weights) {
    if (weights.size() == 0)
        throw ValidationError(Errc::empty_dataset, "no weights to standardize");
    if ((weights.array() <= 0.0).any())
        throw ValidationError(Errc::invalid_scale, "weights must be positive");
    WeightVector out;
    out.weights = weights;
    out.standardized = weights / weights.sum();
    return out;
}

Estimate raw_mean(const Dataset& dataset) {
    const int n = dataset.n();
    if (n == 0) throw ValidationError(Errc::empty_dataset, "raw_mean of empty dataset");
    for (const auto& obs : dataset.observations)
        if (!std::isfinite(obs.y))
            throw ValidationError(Errc::non_finite_value, "y for source " + obs.source_id);
    if (n == 1)
        throw ValidationError(Errc::no_variance, "raw_mean CI needs n >= 2");
    const Eigen::VectorXd y = dataset.y();
    Estimate est;
    est.method = EstimatorKind::raw;
    est.point = y.mean();
    est.se = sd_of(y) / std::sqrt(static_cast<double>(n));
    est.ci_low = est.point - kZ95 * *est.se;
    est.ci_high = est.point + kZ95 * *est.se;
    return est;
}

std::pair<Estimate, WeightVector> weighted_mean(const Dataset& dataset) {
    if (dataset.n() == 0)
        throw ValidationError(Errc::empty_dataset, "weighted_mean of empty dataset");
    require_positive_uncertainties(dataset);
    const Eigen::VectorXd inv_var = dataset.s().array().square().inverse();
    const Eigen::VectorXd y = dataset.y();
    Estimate est;
    est.method = EstimatorKind::weighted;
    est.point = weighted_point(inv_var, y);
    est.se = 1.0 / std::sqrt(inv_var.sum());
    est.ci_low = est.point - kZ95 * *est.se;
    est.ci_high = est.point + kZ95 * *est.se;
    return {est, standardize_weights(inv_var)};
}

std::pair<Estimate, WeightVector> trimmed_weighted_mean(const Dataset& dataset,
                                                        const TrimmedOptions& options) {
    if (dataset.n() == 0)
        throw ValidationError(Errc::empty_dataset, "trimmed_weighted_mean of empty dataset");
    require_positive_uncertainties(dataset);
    if (options.bootstrap_samples < 100)
        throw ValidationError(Errc::invalid_config, "bootstrap_samples must be >= 100");

    const int n = dataset.n();
    const Eigen::VectorXd y = dataset.y();
    const Eigen::VectorXd s = dataset.s();
    const Eigen::VectorXd w = trimmed_weights_from_s(s, options.trim_factor);

    Estimate est;
    est.method = EstimatorKind::trimmed;
    est.point = weighted_point(w, y);

    Rng rng = Rng::substream(options.seed, {hash_str("trimmed-bootstrap")});
    Eigen::VectorXd points(options.bootstrap_samples);
    Eigen::VectorXd ys(n), ss(n);
    for (int b = 0; b < options.bootstrap_samples; ++b) {
        for (int i = 0; i < n; ++i) {
            const auto j = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(n)));
            ys[i] = y[j];
            ss[i] = s[j];
        }
        points[b] = weighted_point(trimmed_weights_from_s(ss, options.trim_factor), ys);
    }
    est.ci_low = quantile_of(points, 0.025);
    est.ci_high = quantile_of(points, 0.975);
    est.se = sd_of(points);
    return {est, standardize_weights(w)};
}

LinearFit linear_fit(const Dataset& dataset, WeightMode mode, const TrimmedOptions& options) {
    validate(dataset);
    if (!dataset.has_covariates())
        throw ValidationError(Errc::covariate_dimension_mismatch,
                              "linear_fit requires covariates");
    const int n = dataset.n();
    const int p = dataset.p;
    const Eigen::MatrixXd X = dataset.design_matrix();
    const Eigen::VectorXd y = dataset.y();
    const Eigen::VectorXd s = dataset.s();

    Eigen::VectorXd w;
    EstimatorKind kind;
    switch (mode) {
        case WeightMode::unweighted:
            w = Eigen::VectorXd::Ones(n);
            kind = EstimatorKind::lr;
            break;
        case WeightMode::inverse_variance:
            w = s.array().square().inverse();
            kind = EstimatorKind::wlr;
            break;
        case WeightMode::trimmed:
            w = trimmed_weights_from_s(s, options.trim_factor);
            kind = EstimatorKind::twlr;
            break;
        default:
            throw InternalError("unknown weight mode");
    }

    const WlsSolution fit = solve_wls(X, w, y);

    LinearFit out;
    out.weights = standardize_weights(w);
    out.coefficients.resize(static_cast<std::size_t>(p));

    if (mode == WeightMode::trimmed) {
        if (options.bootstrap_samples < 100)
            throw ValidationError(Errc::invalid_config, "bootstrap_samples must be >= 100");
        Rng rng = Rng::substream(options.seed, {hash_str("twlr-bootstrap")});
        Eigen::MatrixXd boot(options.bootstrap_samples, p);
        Eigen::MatrixXd Xb(n, p);
        Eigen::VectorXd yb(n), sb(n);
        for (int b = 0; b < options.bootstrap_samples; ++b) {
            for (int i = 0; i < n; ++i) {
                const auto j =
                    static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(n)));
                Xb.row(i) = X.row(j);
                yb[i] = y[j];
                sb[i] = s[j];
            }
            boot.row(b) =
                solve_wls(Xb, trimmed_weights_from_s(sb, options.trim_factor), yb).coefficients;
        }
        for (int j = 0; j < p; ++j) {
            Estimate& est = out.coefficients[static_cast<std::size_t>(j)];
            est.method = kind;
            est.point = fit.coefficients[j];
            est.ci_low = quantile_of(boot.col(j), 0.025);
            est.ci_high = quantile_of(boot.col(j), 0.975);
            est.se = sd_of(boot.col(j));
        }
        return out;
    }

    // Interval scale: OLS estimates the residual variance; inverse-variance
    // weighting treats the s_i as known sds, so no scale factor.
    double scale = 1.0;
    if (mode == WeightMode::unweighted) {
        const Eigen::VectorXd residuals = y - X * fit.coefficients;
        scale = residuals.squaredNorm() / static_cast<double>(n - p);
    }
    for (int j = 0; j < p; ++j) {
        Estimate& est = out.coefficients[static_cast<std::size_t>(j)];
        est.method = kind;
        est.point = fit.coefficients[j];
        est.se = std::sqrt(scale * fit.normal_inverse(j, j));
        est.ci_low = est.point - kZ95 * *est.se;
        est.ci_high = est.point + kZ95 * *est.se;
    }
    return out;
}

}  // namespace metapool
