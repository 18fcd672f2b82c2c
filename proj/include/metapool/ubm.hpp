#pragma once

#include <optional>
#include <utility>

#include <Eigen/Core>

#include "metapool/data.hpp"
#include "metapool/mcmc.hpp"

namespace metapool {

// Univariate normal-normal hierarchy:
//   y_i | theta_i ~ N(theta_i, sigma_i^2)
//   theta_i      ~ N(mu, tau^2)        (or N(x_i' beta, tau^2))
// The closed-form conditionals below take tau and sigma as known; the full
// Bayesian fit treats the observed s_i as the true sigma_i and samples
// (mu or beta, tau, theta).
struct UbmParams {
    Eigen::VectorXd beta;   // size 1 holds mu when there are no covariates
    double tau = 1.0;
    Eigen::VectorXd sigma;  // n source-level sds
    Eigen::VectorXd theta;  // n source means
};

struct NormalSummary {
    double mean = 0.0;
    double sd = 0.0;
};

// Posterior of mu given (tau, sigma): precision-weighted mean with
// omega_i = 1/(sigma_i^2 + tau^2).
NormalSummary ubm_mu_closed(const Dataset& dataset, double tau, const Eigen::VectorXd& sigma);

struct GaussianVectorSummary {
    Eigen::VectorXd mean;
    Eigen::MatrixXd covariance;
};

// Posterior of beta given (tau, sigma): generalized least squares with the
// same omega weights.
GaussianVectorSummary ubm_beta_closed(const Dataset& dataset, double tau,
                                      const Eigen::VectorXd& sigma);

// Posterior of one theta_i: shrinkage gamma = tau^2/(tau^2 + sigma^2) toward
// the regression mean, sd = sigma * sqrt(gamma).
NormalSummary ubm_theta_closed(double y, double regression_mean, double tau, double sigma);

// Full Bayesian fit via the NUTS engine. Draw columns: mu (or beta_0..),
// tau (absent when fix_tau is set), theta_1..n. fix_tau pins tau for
// conjugate-oracle testing.
PosteriorDraws fit_ubm(const Dataset& dataset, const FitConfig& config,
                       std::optional<double> fix_tau = std::nullopt);

}  // namespace metapool
