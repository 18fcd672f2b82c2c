#include "metapool/ubm.hpp"

#include <cmath>
#include <limits>
#include <string>

#include <Eigen/Dense>

#include "metapool/densities.hpp"
#include "metapool/errors.hpp"
#include "metapool/priors.hpp"

namespace metapool {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

void check_scales(double tau, const Eigen::VectorXd& sigma) {
    if (std::isnan(tau) || tau < 0.0)
        throw ValidationError(Errc::invalid_scale, "tau must be >= 0");
    if ((sigma.array() <= 0.0).any() || !sigma.allFinite())
        throw ValidationError(Errc::invalid_scale, "all sigma_i must be positive");
}

Eigen::VectorXd omega_weights(double tau, const Eigen::VectorXd& sigma) {
    return (sigma.array().square() + tau * tau).inverse();
}

// UBM joint density on the unconstrained vector
//   z = (beta[0..p_m), log tau?, u[0..n))  with theta_i = m_i + tau u_i.
class UbmModel : public LogDensityModel {
  public:
    UbmModel(const Dataset& dataset, const PriorSettings& priors, std::optional<double> fix_tau)
        : y_(dataset.y()),
          s_(dataset.s()),
          priors_(priors),
          fix_tau_(fix_tau),
          n_(dataset.n()),
          p_(dataset.p) {
        if (p_ > 0) X_ = dataset.design_matrix();
        inv_var_ = s_.array().square().inverse();
        tau_offset_ = p_ > 0 ? p_ : 1;
        u_offset_ = tau_offset_ + (fix_tau_ ? 0 : 1);
    }

    int dim() const override { return u_offset_ + n_; }

    double logpdf_grad(const Eigen::VectorXd& z, Eigen::VectorXd& grad) const override {
        if (!z.allFinite())
            throw ValidationError(Errc::non_finite_density, "non-finite unconstrained coordinate");
        grad.setZero(dim());

        const double tau = fix_tau_ ? *fix_tau_ : std::exp(z[tau_offset_]);
        if (!std::isfinite(tau)) return -std::numeric_limits<double>::infinity();
        const auto u = z.segment(u_offset_, n_);

        Eigen::VectorXd mean(n_);
        if (p_ > 0)
            mean = X_ * z.head(p_);
        else
            mean.setConstant(z[0]);

        double logp = 0.0;
        for (int i = 0; i < n_; ++i) {
            const double theta = mean[i] + tau * u[i];
            const double resid = y_[i] - theta;
            const double g_theta = resid * inv_var_[i];
            logp += -0.5 * kLogTwoPi - std::log(s_[i]) - 0.5 * resid * resid * inv_var_[i];
            // standard-normal density of the non-centered residual
            logp += -0.5 * kLogTwoPi - 0.5 * u[i] * u[i];

            if (p_ > 0)
                grad.head(p_) += g_theta * X_.row(i).transpose();
            else
                grad[0] += g_theta;
            if (!fix_tau_) grad[tau_offset_] += g_theta * u[i] * tau;
            grad[u_offset_ + i] = g_theta * tau - u[i];
        }

        if (p_ > 0) {
            // N(0, beta_sd^2) on each coefficient
            const double inv_prior_var = 1.0 / (priors_.beta_sd * priors_.beta_sd);
            for (int j = 0; j < p_; ++j) {
                logp += normal_logpdf(z[j], 0.0, priors_.beta_sd);
                grad[j] -= z[j] * inv_prior_var;
            }
        }
        if (!fix_tau_) {
            // half-Cauchy prior plus the log|d tau / d log tau| correction
            logp += half_cauchy_logpdf(tau, priors_.hc_tau) + z[tau_offset_];
            const double g2 = priors_.hc_tau * priors_.hc_tau;
            grad[tau_offset_] += -2.0 * tau * tau / (g2 + tau * tau) + 1.0;
        }
        return logp;
    }

    Eigen::VectorXd constrain(const Eigen::VectorXd& z) const override {
        const double tau = fix_tau_ ? *fix_tau_ : std::exp(z[tau_offset_]);
        Eigen::VectorXd out(tau_offset_ + (fix_tau_ ? 0 : 1) + n_);
        out.head(tau_offset_) = z.head(tau_offset_);
        int pos = tau_offset_;
        if (!fix_tau_) out[pos++] = tau;
        Eigen::VectorXd mean(n_);
        if (p_ > 0)
            mean = X_ * z.head(p_);
        else
            mean.setConstant(z[0]);
        for (int i = 0; i < n_; ++i) out[pos + i] = mean[i] + tau * z[u_offset_ + i];
        return out;
    }

    std::vector<std::string> parameter_names() const override {
        std::vector<std::string> names;
        if (p_ > 0)
            for (int j = 0; j < p_; ++j) names.push_back("beta_" + std::to_string(j));
        else
            names.push_back("mu");
        if (!fix_tau_) names.push_back("tau");
        for (int i = 0; i < n_; ++i) names.push_back("theta_" + std::to_string(i + 1));
        return names;
    }

    std::string name() const override { return "ubm"; }

  private:
    Eigen::VectorXd y_, s_, inv_var_;
    Eigen::MatrixXd X_;
    PriorSettings priors_;
    std::optional<double> fix_tau_;
    int n_, p_;
    int tau_offset_, u_offset_;
};

}  // namespace

PriorSettings PriorSettings::from_overrides(const std::map<std::string, double>& overrides) {
    PriorSettings settings;
    for (const auto& [key, value] : overrides) {
        if (key == "hc_tau") settings.hc_tau = value;
        else if (key == "hc_r_theta") settings.hc_r_theta = value;
        else if (key == "hc_r_sigma") settings.hc_r_sigma = value;
        else if (key == "hc_sigma_s") settings.hc_sigma_s = value;
        else if (key == "lkj_eta") settings.lkj_eta = value;
        else if (key == "beta_sd") settings.beta_sd = value;
        else
            throw ValidationError(Errc::invalid_config, "unknown prior override: " + key);
        if (!(value > 0.0))
            throw ValidationError(Errc::invalid_config, "prior override " + key + " must be > 0");
    }
    return settings;
}

NormalSummary ubm_mu_closed(const Dataset& dataset, double tau, const Eigen::VectorXd& sigma) {
    validate(dataset);
    if (sigma.size() != dataset.n())
        throw ValidationError(Errc::invalid_scale, "sigma length must match dataset");
    check_scales(tau, sigma);
    const Eigen::VectorXd omega = omega_weights(tau, sigma);
    NormalSummary out;
    out.mean = omega.dot(dataset.y()) / omega.sum();
    out.sd = 1.0 / std::sqrt(omega.sum());
    return out;
}

GaussianVectorSummary ubm_beta_closed(const Dataset& dataset, double tau,
                                      const Eigen::VectorXd& sigma) {
    validate(dataset);
    if (!dataset.has_covariates())
        throw ValidationError(Errc::covariate_dimension_mismatch,
                              "ubm_beta_closed requires covariates");
    if (sigma.size() != dataset.n())
        throw ValidationError(Errc::invalid_scale, "sigma length must match dataset");
    check_scales(tau, sigma);

    const Eigen::MatrixXd X = dataset.design_matrix();
    const Eigen::VectorXd omega = omega_weights(tau, sigma);
    const Eigen::VectorXd root = omega.array().sqrt();
    const Eigen::MatrixXd Xw = root.asDiagonal() * X;

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xw);
    qr.setThreshold(1e-10);
    if (qr.rank() < X.cols())
        throw ValidationError(Errc::rank_deficient_design, "omega-weighted design is rank deficient");

    GaussianVectorSummary out;
    out.mean = qr.solve(root.asDiagonal() * dataset.y());
    const Eigen::MatrixXd normal = Xw.transpose() * Xw;
    out.covariance = normal.ldlt().solve(Eigen::MatrixXd::Identity(X.cols(), X.cols()));
    return out;
}

NormalSummary ubm_theta_closed(double y, double regression_mean, double tau, double sigma) {
    if (std::isnan(tau) || tau < 0.0)
        throw ValidationError(Errc::invalid_scale, "tau must be >= 0");
    if (!(sigma > 0.0)) throw ValidationError(Errc::invalid_scale, "sigma must be positive");
    const double gamma = tau * tau / (tau * tau + sigma * sigma);
    NormalSummary out;
    out.mean = gamma * y + (1.0 - gamma) * regression_mean;
    out.sd = sigma * std::sqrt(gamma);
    return out;
}

PosteriorDraws fit_ubm(const Dataset& dataset, const FitConfig& config,
                       std::optional<double> fix_tau) {
    validate(dataset);
    config.validate();
    if (fix_tau && !(*fix_tau > 0.0))
        throw ValidationError(Errc::invalid_scale, "fix_tau must be positive");
    const auto priors = PriorSettings::from_overrides(config.prior_overrides);
    UbmModel model(dataset, priors, fix_tau);
    PosteriorDraws draws = sample(model, config);
    draws.fixed_tau = fix_tau;
    return draws;
}

}  // namespace metapool
