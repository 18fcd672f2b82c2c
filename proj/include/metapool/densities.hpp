#pragma once

#include <Eigen/Core>

#include "metapool/rng.hpp"

namespace metapool {

// 2x2 correlation matrix held through its lower-triangular Cholesky factor
//   L = [[1, 0], [rho, sqrt(1 - rho^2)]],
// so L L^T has unit diagonal and off-diagonal rho.
struct CholeskyCorr2 {
    double rho = 0.0;

    Eigen::Matrix2d factor() const;
    // max |L L^T - corr(rho)| entrywise; ~0 for any valid rho.
    double reconstruction_error() const;
};

double normal_logpdf(double x, double mean, double sd);

// Log density of a bivariate normal with marginal sds (sd1, sd2) and
// correlation rho, evaluated at (v1, v2).
double bivariate_normal_logpdf(double v1, double v2, double mean1, double mean2, double sd1,
                               double sd2, double rho);

// Half-Cauchy on [0, inf): 2 / (pi * scale * (1 + (x/scale)^2)).
double half_cauchy_logpdf(double x, double scale);

// LKJ density for the 2x2 Cholesky factor, expressed through rho. Normalized:
// the implied marginal of rho is Beta(eta, eta) rescaled to (-1, 1).
double lkj_corr2_logpdf(double rho, double eta);
double lkj_corr2_logpdf(const CholeskyCorr2& chol, double eta);

// One joint draw from the bivariate normal above.
void sample_bivariate_normal(Rng& rng, double mean1, double mean2, double sd1, double sd2,
                             double rho, double& out1, double& out2);

// Scalar maps between a constrained domain and the real line, with the
// log-Jacobian of the unconstrained -> constrained direction. These are what
// the samplers run on.
enum class ParamTransform {
    log_positive,   // x > 0           <->  z = log x
    tanh_interval,  // rho in (-1, 1)  <->  z = atanh rho
};

double to_unconstrained(ParamTransform kind, double constrained);
double to_constrained(ParamTransform kind, double unconstrained);
// log |d constrained / d unconstrained| at z.
double log_jacobian(ParamTransform kind, double unconstrained);

}  // namespace metapool
