#pragma once

#include <optional>
#include <string>
#include <utility>

#include <Eigen/Core>

#include "metapool/data.hpp"
#include "metapool/mcmc.hpp"
#include "metapool/priors.hpp"
#include "metapool/ubm.hpp"

namespace metapool {

// Bivariate hierarchy over (y_i, log s_i):
//   (y_i, log s_i)       ~ N2((theta_i, log sigma_i), [[sigma_i^2, rho1 sigma_i sigma_s_i],
//                                                      [.,         sigma_s_i^2]])
//   (theta_i, log sigma_i) ~ N2((m_theta_i, m_sigma_i), [[r_theta^2, rho2 r_theta r_sigma],
//                                                        [.,         r_sigma^2]])
// with m_*_i either constant means or x_i' beta_*. rho1 couples an estimate
// to its reported uncertainty; rho2 couples the latent means.
struct BbmParams {
    Eigen::VectorXd beta_theta;  // size 1 holds mu_theta when there are no covariates
    Eigen::VectorXd beta_sigma;  // size 1 holds mu_sigma
    double r_theta = 1.0;
    double r_sigma = 1.0;
    double rho1 = 0.0;
    double rho2 = 0.0;
    Eigen::VectorXd sigma_s;    // n residual sds of log s_i
    Eigen::VectorXd theta;      // n latent means
    Eigen::VectorXd log_sigma;  // n latent log sds

    double mu_theta() const { return beta_theta[0]; }
    double mu_sigma() const { return beta_sigma[0]; }
    void check(int n) const;  // throws on violated domain constraints
};

// Precision and shrinkage weights implied by a parameter setting:
//   xi_i   = 1 / (sigma_i^2 (1 - rho1^2) + r_theta^2 (1 - rho2^2))
//   zeta_i = r_theta^2 (1-rho2^2) / (r_theta^2 (1-rho2^2) + sigma_i^2 (1-rho1^2))
struct ShrinkageWeights {
    Eigen::VectorXd xi;
    Eigen::VectorXd zeta;
    Eigen::VectorXd y_adjusted;  // y_i with both correlation corrections removed
};

ShrinkageWeights bbm_shrinkage_weights(const Dataset& dataset, const BbmParams& params);

// Conditional law of y_i given log s_i and the latents:
//   mean = theta + rho1 (sigma/sigma_s)(log s - log sigma), sd = sigma sqrt(1-rho1^2).
NormalSummary bbm_conditional_y(double log_s, double theta, double log_sigma, double sigma_s,
                                double rho1);

// Closed-form conditional posteriors given all nuisance components.
NormalSummary bbm_mu_theta_closed(const Dataset& dataset, const BbmParams& params);
GaussianVectorSummary bbm_beta_theta_closed(const Dataset& dataset, const BbmParams& params);
NormalSummary bbm_theta_closed(double y, double log_s, double regression_mean_theta,
                               double regression_mean_sigma, const BbmParams& params,
                               double log_sigma, double sigma_s);

// Unconstrained parameter vector layout (fixed; draw files depend on it):
//   beta_theta (p or 1) | beta_sigma (p or 1) | log r_theta | log r_sigma |
//   atanh rho1 | atanh rho2 (the free Cholesky coordinate) |
//   log sigma_s_1..n (absent when fixed) | u_1..n | w_1..n
// where (u_i, w_i) are the standardized level-2 residuals: the latents are
// recovered as theta_i = m_theta_i + r_theta u_i and
// log sigma_i = m_sigma_i + r_sigma (rho2 u_i + sqrt(1-rho2^2) w_i).
class BbmModel : public LogDensityModel {
  public:
    BbmModel(const Dataset& dataset, const PriorSettings& priors,
             std::optional<Eigen::VectorXd> fixed_sigma_s = std::nullopt);

    int dim() const override;
    double logpdf_grad(const Eigen::VectorXd& z, Eigen::VectorXd& grad) const override;
    Eigen::VectorXd constrain(const Eigen::VectorXd& z) const override;
    std::vector<std::string> parameter_names() const override;
    std::string name() const override { return "bbm"; }

    BbmParams params_from_unconstrained(const Eigen::VectorXd& z) const;
    BbmParams params_from_constrained(const Eigen::VectorXd& reported) const;

  private:
    Eigen::VectorXd y_, log_s_;
    Eigen::MatrixXd X_;
    PriorSettings priors_;
    std::optional<Eigen::VectorXd> fixed_sigma_s_;
    int n_ = 0, p_ = 0;
    int mean_dim_ = 1;  // columns per mean block (p, or 1 without covariates)
    int scale_offset_ = 0, sigma_s_offset_ = 0, u_offset_ = 0, w_offset_ = 0;
};

// Joint log posterior and gradient at an unconstrained point; the functional
// form of BbmModel::logpdf_grad for callers that do not need the class.
double bbm_log_posterior(const Dataset& dataset, const Eigen::VectorXd& unconstrained,
                         const PriorSettings& priors, Eigen::VectorXd& gradient,
                         const std::optional<Eigen::VectorXd>& fixed_sigma_s = std::nullopt);

// How sigma_s is handled during fitting.
struct SigmaSFix {
    enum class Mode { sampled, empirical, value };
    Mode mode = Mode::sampled;
    double value = 0.0;  // used by Mode::value

    static SigmaSFix sampled() { return {}; }
    static SigmaSFix empirical() { return {Mode::empirical, 0.0}; }
    static SigmaSFix fixed(double v) { return {Mode::value, v}; }
};

// Constant vector equal to the sample sd of {log s_i}; the empirical-Bayes
// choice for fixing sigma_s.
Eigen::VectorXd set_sigma_s_empirical(const Dataset& dataset);

// Full Bayesian fit via the NUTS engine. Draw columns follow the layout
// above on the constrained scale; sigma_s columns are absent when fixed.
PosteriorDraws fit_bbm(const Dataset& dataset, const FitConfig& config,
                       const SigmaSFix& sigma_s = {});

// Extracts the BbmParams of one retained draw (merged index) from a fit.
BbmParams bbm_params_from_draw(const Dataset& dataset, const PosteriorDraws& draws, int draw_index);

}  // namespace metapool
