#include "metapool/densities.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "metapool/errors.hpp"

namespace metapool {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;  // log(2*pi)
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void require_finite(double x, const char* what) {
    if (!std::isfinite(x)) throw ValidationError(Errc::non_finite_value, what);
}

}  // namespace

Eigen::Matrix2d CholeskyCorr2::factor() const {
    if (!(rho > -1.0 && rho < 1.0))
        throw ValidationError(Errc::invalid_correlation,
                              "rho must lie in (-1, 1), got " + std::to_string(rho));
    Eigen::Matrix2d L;
    L << 1.0, 0.0, rho, std::sqrt(1.0 - rho * rho);
    return L;
}

double CholeskyCorr2::reconstruction_error() const {
    const Eigen::Matrix2d product = factor() * factor().transpose();
    Eigen::Matrix2d target;
    target << 1.0, rho, rho, 1.0;
    return (product - target).cwiseAbs().maxCoeff();
}

double normal_logpdf(double x, double mean, double sd) {
    require_finite(x, "normal_logpdf x");
    require_finite(mean, "normal_logpdf mean");
    if (!(sd > 0.0) || !std::isfinite(sd))
        throw ValidationError(Errc::invalid_scale, "sd must be positive, got " + std::to_string(sd));
    const double z = (x - mean) / sd;
    return -0.5 * kLogTwoPi - std::log(sd) - 0.5 * z * z;
}

double bivariate_normal_logpdf(double v1, double v2, double mean1, double mean2, double sd1,
                               double sd2, double rho) {
    require_finite(v1, "bivariate_normal_logpdf v1");
    require_finite(v2, "bivariate_normal_logpdf v2");
    if (!(sd1 > 0.0) || !(sd2 > 0.0))
        throw ValidationError(Errc::invalid_scale, "bivariate normal sds must be positive");
    if (!(rho > -1.0 && rho < 1.0))
        throw ValidationError(Errc::invalid_correlation,
                              "correlation must lie in (-1, 1), got " + std::to_string(rho));
    const double a = (v1 - mean1) / sd1;
    const double b = (v2 - mean2) / sd2;
    const double one_minus_r2 = 1.0 - rho * rho;
    const double quad = (a * a - 2.0 * rho * a * b + b * b) / one_minus_r2;
    return -kLogTwoPi - std::log(sd1) - std::log(sd2) - 0.5 * std::log(one_minus_r2) - 0.5 * quad;
}

double half_cauchy_logpdf(double x, double scale) {
    if (!(scale > 0.0))
        throw ValidationError(Errc::invalid_scale, "half-Cauchy scale must be positive");
    if (std::isnan(x) || x < 0.0)
        throw ValidationError(Errc::negative_argument,
                              "half-Cauchy support is [0, inf), got " + std::to_string(x));
    const double z = x / scale;
    return std::log(2.0 / std::numbers::pi) - std::log(scale) - std::log1p(z * z);
}

double lkj_corr2_logpdf(double rho, double eta) {
    if (!(eta > 0.0)) throw ValidationError(Errc::invalid_scale, "LKJ eta must be positive");
    if (!(rho > -1.0 && rho < 1.0))
        throw ValidationError(Errc::invalid_correlation,
                              "correlation must lie in (-1, 1), got " + std::to_string(rho));
    // Marginal of rho under LKJ(eta) in 2 dimensions: Beta(eta, eta) on (-1, 1).
    const double log_beta = 2.0 * std::lgamma(eta) - std::lgamma(2.0 * eta);
    const double log_norm = -(2.0 * eta - 1.0) * std::numbers::ln2 - log_beta;
    return (eta - 1.0) * std::log1p(-rho * rho) + log_norm;
}

double lkj_corr2_logpdf(const CholeskyCorr2& chol, double eta) {
    return lkj_corr2_logpdf(chol.rho, eta);
}

void sample_bivariate_normal(Rng& rng, double mean1, double mean2, double sd1, double sd2,
                             double rho, double& out1, double& out2) {
    const double a = rng.normal();
    const double b = rng.normal();
    out1 = mean1 + sd1 * a;
    out2 = mean2 + sd2 * (rho * a + std::sqrt(1.0 - rho * rho) * b);
}

double to_unconstrained(ParamTransform kind, double constrained) {
    switch (kind) {
        case ParamTransform::log_positive:
            if (!(constrained > 0.0))
                throw ValidationError(Errc::domain_violation, "log transform requires x > 0");
            return std::log(constrained);
        case ParamTransform::tanh_interval:
            if (!(constrained > -1.0 && constrained < 1.0))
                throw ValidationError(Errc::domain_violation, "atanh transform requires |x| < 1");
            return std::atanh(constrained);
    }
    throw InternalError("unknown transform");
}

double to_constrained(ParamTransform kind, double unconstrained) {
    switch (kind) {
        case ParamTransform::log_positive:
            return std::exp(unconstrained);
        case ParamTransform::tanh_interval:
            return std::tanh(unconstrained);
    }
    throw InternalError("unknown transform");
}

double log_jacobian(ParamTransform kind, double unconstrained) {
    switch (kind) {
        case ParamTransform::log_positive:
            return unconstrained;
        case ParamTransform::tanh_interval: {
            const double t = std::tanh(unconstrained);
            const double j = std::log1p(-t * t);
            return std::isfinite(j) ? j : kNegInf;
        }
    }
    throw InternalError("unknown transform");
}

}  // namespace metapool
