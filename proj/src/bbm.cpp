#include "metapool/bbm.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include <Eigen/Dense>

#include "metapool/densities.hpp"
#include "metapool/errors.hpp"
#include "metapool/util.hpp"

namespace metapool {

namespace {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;
constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void check_correlation(double rho, const char* what) {
    if (!(rho > -1.0 && rho < 1.0))
        throw ValidationError(Errc::invalid_correlation,
                              std::string(what) + " must lie in (-1, 1)");
}

void check_positive(double value, const char* what) {
    if (!(value > 0.0) || !std::isfinite(value))
        throw ValidationError(Errc::invalid_scale, std::string(what) + " must be positive");
}

Eigen::VectorXd regression_means(const Dataset& dataset, const Eigen::VectorXd& beta) {
    if (dataset.has_covariates() && beta.size() == dataset.p)
        return dataset.design_matrix() * beta;
    if (beta.size() == 1) return Eigen::VectorXd::Constant(dataset.n(), beta[0]);
    throw ValidationError(Errc::covariate_dimension_mismatch,
                          "coefficient length does not match dataset covariates");
}

}  // namespace

void BbmParams::check(int n) const {
    check_positive(r_theta, "r_theta");
    check_positive(r_sigma, "r_sigma");
    check_correlation(rho1, "rho1");
    check_correlation(rho2, "rho2");
    if (sigma_s.size() != n || theta.size() != n || log_sigma.size() != n)
        throw ValidationError(Errc::covariate_dimension_mismatch,
                              "per-source parameter vectors must have length n");
    for (Eigen::Index i = 0; i < sigma_s.size(); ++i) check_positive(sigma_s[i], "sigma_s");
    if (!theta.allFinite() || !log_sigma.allFinite())
        throw ValidationError(Errc::non_finite_value, "theta/log_sigma must be finite");
}

NormalSummary bbm_conditional_y(double log_s, double theta, double log_sigma, double sigma_s,
                                double rho1) {
    check_positive(sigma_s, "sigma_s");
    check_correlation(rho1, "rho1");
    const double sigma = std::exp(log_sigma);
    NormalSummary out;
    out.mean = theta + rho1 * (sigma / sigma_s) * (log_s - log_sigma);
    out.sd = sigma * std::sqrt(1.0 - rho1 * rho1);
    return out;
}

ShrinkageWeights bbm_shrinkage_weights(const Dataset& dataset, const BbmParams& params) {
    const int n = dataset.n();
    params.check(n);
    const Eigen::VectorXd m_sigma = regression_means(dataset, params.beta_sigma);
    const double level2_var = params.r_theta * params.r_theta * (1.0 - params.rho2 * params.rho2);
    const double rho2_slope = params.rho2 * params.r_theta / params.r_sigma;

    ShrinkageWeights out;
    out.xi.resize(n);
    out.zeta.resize(n);
    out.y_adjusted.resize(n);
    for (int i = 0; i < n; ++i) {
        const double sigma = std::exp(params.log_sigma[i]);
        const double level1_var = sigma * sigma * (1.0 - params.rho1 * params.rho1);
        out.xi[i] = 1.0 / (level1_var + level2_var);
        out.zeta[i] = level2_var * out.xi[i];
        const double log_s = std::log(dataset.observations[static_cast<std::size_t>(i)].s);
        out.y_adjusted[i] = dataset.observations[static_cast<std::size_t>(i)].y -
                            rho2_slope * (params.log_sigma[i] - m_sigma[i]) -
                            params.rho1 * (sigma / params.sigma_s[i]) *
                                (log_s - params.log_sigma[i]);
    }
    return out;
}

NormalSummary bbm_mu_theta_closed(const Dataset& dataset, const BbmParams& params) {
    if (params.beta_theta.size() != 1 || params.beta_sigma.size() != 1)
        throw ValidationError(Errc::covariate_dimension_mismatch,
                              "bbm_mu_theta_closed expects scalar means; use bbm_beta_theta_closed");
    const ShrinkageWeights weights = bbm_shrinkage_weights(dataset, params);
    NormalSummary out;
    out.mean = weights.xi.dot(weights.y_adjusted) / weights.xi.sum();
    out.sd = 1.0 / std::sqrt(weights.xi.sum());
    return out;
}

GaussianVectorSummary bbm_beta_theta_closed(const Dataset& dataset, const BbmParams& params) {
    if (!dataset.has_covariates())
        throw ValidationError(Errc::covariate_dimension_mismatch,
                              "bbm_beta_theta_closed requires covariates");
    const ShrinkageWeights weights = bbm_shrinkage_weights(dataset, params);
    const Eigen::MatrixXd X = dataset.design_matrix();
    const Eigen::VectorXd root = weights.xi.array().sqrt();
    const Eigen::MatrixXd Xw = root.asDiagonal() * X;

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(Xw);
    qr.setThreshold(1e-10);
    if (qr.rank() < X.cols())
        throw ValidationError(Errc::rank_deficient_design, "xi-weighted design is rank deficient");

    GaussianVectorSummary out;
    out.mean = qr.solve(root.asDiagonal() * weights.y_adjusted);
    const Eigen::MatrixXd normal = Xw.transpose() * Xw;
    out.covariance = normal.ldlt().solve(Eigen::MatrixXd::Identity(X.cols(), X.cols()));
    return out;
}

NormalSummary bbm_theta_closed(double y, double log_s, double regression_mean_theta,
                               double regression_mean_sigma, const BbmParams& params,
                               double log_sigma, double sigma_s) {
    check_positive(params.r_theta, "r_theta");
    check_positive(params.r_sigma, "r_sigma");
    check_positive(sigma_s, "sigma_s");
    check_correlation(params.rho1, "rho1");
    check_correlation(params.rho2, "rho2");

    const double sigma = std::exp(log_sigma);
    const double level1_var = sigma * sigma * (1.0 - params.rho1 * params.rho1);
    const double level2_var = params.r_theta * params.r_theta * (1.0 - params.rho2 * params.rho2);
    const double zeta = level2_var / (level2_var + level1_var);

    const double direct = y - params.rho1 * (sigma / sigma_s) * (log_s - log_sigma);
    const double pooled = regression_mean_theta +
                          params.rho2 * (params.r_theta / params.r_sigma) *
                              (log_sigma - regression_mean_sigma);
    NormalSummary out;
    out.mean = zeta * direct + (1.0 - zeta) * pooled;
    out.sd = std::sqrt(zeta * level1_var);
    return out;
}

BbmModel::BbmModel(const Dataset& dataset, const PriorSettings& priors,
                   std::optional<Eigen::VectorXd> fixed_sigma_s)
    : y_(dataset.y()),
      log_s_(dataset.log_s()),
      priors_(priors),
      fixed_sigma_s_(std::move(fixed_sigma_s)),
      n_(dataset.n()),
      p_(dataset.p) {
    if (p_ > 0) X_ = dataset.design_matrix();
    mean_dim_ = p_ > 0 ? p_ : 1;
    scale_offset_ = 2 * mean_dim_;
    sigma_s_offset_ = scale_offset_ + 4;
    u_offset_ = sigma_s_offset_ + (fixed_sigma_s_ ? 0 : n_);
    w_offset_ = u_offset_ + n_;
    if (fixed_sigma_s_) {
        if (fixed_sigma_s_->size() != n_)
            throw ValidationError(Errc::covariate_dimension_mismatch,
                                  "fixed sigma_s must have length n");
        for (Eigen::Index i = 0; i < n_; ++i) check_positive((*fixed_sigma_s_)[i], "sigma_s");
    }
}

int BbmModel::dim() const { return w_offset_ + n_; }

double BbmModel::logpdf_grad(const Eigen::VectorXd& z, Eigen::VectorXd& grad) const {
    for (Eigen::Index i = 0; i < z.size(); ++i)
        if (!std::isfinite(z[i]))
            throw ValidationError(Errc::non_finite_density,
                                  "non-finite unconstrained coordinate " + std::to_string(i));
    grad.setZero(dim());

    const double r_theta = std::exp(z[scale_offset_]);
    const double r_sigma = std::exp(z[scale_offset_ + 1]);
    const double rho1 = std::tanh(z[scale_offset_ + 2]);
    const double rho2 = std::tanh(z[scale_offset_ + 3]);
    const double t2 = std::sqrt(1.0 - rho2 * rho2);
    if (!std::isfinite(r_theta) || !std::isfinite(r_sigma) || t2 <= 0.0 ||
        std::abs(rho1) >= 1.0)
        return kNegInf;

    const double one_minus_r1sq = 1.0 - rho1 * rho1;
    const double k = 1.0 / one_minus_r1sq;

    double logp = 0.0;
    double sum_grho1 = 0.0;

    for (int i = 0; i < n_; ++i) {
        const double m_theta = p_ > 0 ? X_.row(i).dot(z.head(p_)) : z[0];
        const double m_sigma = p_ > 0 ? X_.row(i).dot(z.segment(p_, p_)) : z[1];
        const double u = z[u_offset_ + i];
        const double w = z[w_offset_ + i];
        const double theta = m_theta + r_theta * u;
        const double lambda = m_sigma + r_sigma * (rho2 * u + t2 * w);
        const double sigma = std::exp(lambda);
        const double q = fixed_sigma_s_ ? (*fixed_sigma_s_)[i] : std::exp(z[sigma_s_offset_ + i]);
        if (!(sigma > 0.0) || !std::isfinite(sigma) || !(q > 0.0) || !std::isfinite(q))
            return kNegInf;

        const double a = (y_[i] - theta) / sigma;
        const double b = (log_s_[i] - lambda) / q;
        const double quad = a * a - 2.0 * rho1 * a * b + b * b;
        logp += -kLogTwoPi - lambda - std::log(q) - 0.5 * std::log(one_minus_r1sq) -
                0.5 * k * quad;
        // level-2 residuals are standard normal by construction
        logp += -kLogTwoPi - 0.5 * (u * u + w * w);

        const double g_theta = k / sigma * (a - rho1 * b);
        const double g_lambda = -1.0 + k * (a * (a - rho1 * b) + (b - rho1 * a) / q);
        sum_grho1 += k * rho1 - k * k * rho1 * quad + k * a * b;

        if (p_ > 0) {
            grad.head(p_) += g_theta * X_.row(i).transpose();
            grad.segment(p_, p_) += g_lambda * X_.row(i).transpose();
        } else {
            grad[0] += g_theta;
            grad[1] += g_lambda;
        }
        grad[scale_offset_] += g_theta * u * r_theta;
        grad[scale_offset_ + 1] += g_lambda * (rho2 * u + t2 * w) * r_sigma;
        grad[scale_offset_ + 3] += g_lambda * r_sigma * (u - (rho2 / t2) * w);
        if (!fixed_sigma_s_) {
            const double g_q = (-1.0 + k * b * (b - rho1 * a)) / q;
            // chain rule through q = exp(c), plus the half-Cauchy prior and
            // its log-Jacobian below
            grad[sigma_s_offset_ + i] = g_q * q;
        }
        grad[u_offset_ + i] = g_theta * r_theta + g_lambda * r_sigma * rho2 - u;
        grad[w_offset_ + i] = g_lambda * r_sigma * t2 - w;
    }

    // priors on the mean blocks
    if (p_ > 0) {
        const double inv_prior_var = 1.0 / (priors_.beta_sd * priors_.beta_sd);
        for (int j = 0; j < 2 * p_; ++j) {
            logp += normal_logpdf(z[j], 0.0, priors_.beta_sd);
            grad[j] -= z[j] * inv_prior_var;
        }
    }
    // mu_theta, mu_sigma carry improper uniform priors: no contribution

    // half-Cauchy priors with log-Jacobians for the scale parameters
    logp += half_cauchy_logpdf(r_theta, priors_.hc_r_theta) + z[scale_offset_];
    grad[scale_offset_] +=
        -2.0 * r_theta * r_theta / (priors_.hc_r_theta * priors_.hc_r_theta + r_theta * r_theta) +
        1.0;
    logp += half_cauchy_logpdf(r_sigma, priors_.hc_r_sigma) + z[scale_offset_ + 1];
    grad[scale_offset_ + 1] +=
        -2.0 * r_sigma * r_sigma / (priors_.hc_r_sigma * priors_.hc_r_sigma + r_sigma * r_sigma) +
        1.0;
    if (!fixed_sigma_s_) {
        const double g2 = priors_.hc_sigma_s * priors_.hc_sigma_s;
        for (int i = 0; i < n_; ++i) {
            const double q = std::exp(z[sigma_s_offset_ + i]);
            logp += half_cauchy_logpdf(q, priors_.hc_sigma_s) + z[sigma_s_offset_ + i];
            grad[sigma_s_offset_ + i] += -2.0 * q * q / (g2 + q * q) + 1.0;
        }
    }

    // rho1: Unif(-1,1) prior plus tanh log-Jacobian
    logp += -std::numbers::ln2 + std::log1p(-rho1 * rho1);
    grad[scale_offset_ + 2] = sum_grho1 * one_minus_r1sq - 2.0 * rho1;

    // rho2: LKJ prior on the Cholesky factor plus tanh log-Jacobian
    logp += lkj_corr2_logpdf(rho2, priors_.lkj_eta) + std::log1p(-rho2 * rho2);
    grad[scale_offset_ + 3] *= 1.0 - rho2 * rho2;
    grad[scale_offset_ + 3] += -2.0 * priors_.lkj_eta * rho2;

    return std::isfinite(logp) ? logp : kNegInf;
}

Eigen::VectorXd BbmModel::constrain(const Eigen::VectorXd& z) const {
    const double r_theta = std::exp(z[scale_offset_]);
    const double r_sigma = std::exp(z[scale_offset_ + 1]);
    const double rho2 = std::tanh(z[scale_offset_ + 3]);
    const double t2 = std::sqrt(1.0 - rho2 * rho2);

    Eigen::VectorXd out(2 * mean_dim_ + 4 + (fixed_sigma_s_ ? 0 : n_) + 2 * n_);
    out.head(2 * mean_dim_) = z.head(2 * mean_dim_);
    out[scale_offset_] = r_theta;
    out[scale_offset_ + 1] = r_sigma;
    out[scale_offset_ + 2] = std::tanh(z[scale_offset_ + 2]);
    out[scale_offset_ + 3] = rho2;
    int pos = scale_offset_ + 4;
    if (!fixed_sigma_s_)
        for (int i = 0; i < n_; ++i) out[pos++] = std::exp(z[sigma_s_offset_ + i]);
    for (int i = 0; i < n_; ++i) {
        const double m_theta = p_ > 0 ? X_.row(i).dot(z.head(p_)) : z[0];
        out[pos + i] = m_theta + r_theta * z[u_offset_ + i];
    }
    pos += n_;
    for (int i = 0; i < n_; ++i) {
        const double m_sigma = p_ > 0 ? X_.row(i).dot(z.segment(p_, p_)) : z[1];
        out[pos + i] = m_sigma + r_sigma * (rho2 * z[u_offset_ + i] + t2 * z[w_offset_ + i]);
    }
    return out;
}

std::vector<std::string> BbmModel::parameter_names() const {
    std::vector<std::string> names;
    if (p_ > 0) {
        for (int j = 0; j < p_; ++j) names.push_back("beta_theta_" + std::to_string(j));
        for (int j = 0; j < p_; ++j) names.push_back("beta_sigma_" + std::to_string(j));
    } else {
        names.push_back("mu_theta");
        names.push_back("mu_sigma");
    }
    names.push_back("r_theta");
    names.push_back("r_sigma");
    names.push_back("rho1");
    names.push_back("rho2");
    if (!fixed_sigma_s_)
        for (int i = 0; i < n_; ++i) names.push_back("sigma_s_" + std::to_string(i + 1));
    for (int i = 0; i < n_; ++i) names.push_back("theta_" + std::to_string(i + 1));
    for (int i = 0; i < n_; ++i) names.push_back("log_sigma_" + std::to_string(i + 1));
    return names;
}

BbmParams BbmModel::params_from_unconstrained(const Eigen::VectorXd& z) const {
    return params_from_constrained(constrain(z));
}

BbmParams BbmModel::params_from_constrained(const Eigen::VectorXd& reported) const {
    BbmParams params;
    params.beta_theta = reported.head(mean_dim_);
    params.beta_sigma = reported.segment(mean_dim_, mean_dim_);
    params.r_theta = reported[scale_offset_];
    params.r_sigma = reported[scale_offset_ + 1];
    params.rho1 = reported[scale_offset_ + 2];
    params.rho2 = reported[scale_offset_ + 3];
    int pos = scale_offset_ + 4;
    if (fixed_sigma_s_) {
        params.sigma_s = *fixed_sigma_s_;
    } else {
        params.sigma_s = reported.segment(pos, n_);
        pos += n_;
    }
    params.theta = reported.segment(pos, n_);
    params.log_sigma = reported.segment(pos + n_, n_);
    return params;
}

double bbm_log_posterior(const Dataset& dataset, const Eigen::VectorXd& unconstrained,
                         const PriorSettings& priors, Eigen::VectorXd& gradient,
                         const std::optional<Eigen::VectorXd>& fixed_sigma_s) {
    BbmModel model(dataset, priors, fixed_sigma_s);
    if (unconstrained.size() != model.dim())
        throw ValidationError(Errc::covariate_dimension_mismatch,
                              "unconstrained vector has length " +
                                  std::to_string(unconstrained.size()) + ", expected " +
                                  std::to_string(model.dim()));
    return model.logpdf_grad(unconstrained, gradient);
}

Eigen::VectorXd set_sigma_s_empirical(const Dataset& dataset) {
    if (dataset.n() < 2)
        throw ValidationError(Errc::too_few_sources, "empirical sigma_s needs n >= 2");
    for (const auto& obs : dataset.observations)
        if (!(obs.s > 0.0))
            throw ValidationError(Errc::non_positive_uncertainty,
                                  "s must be > 0 for source " + obs.source_id);
    const double sd = sd_of(dataset.log_s());
    if (!(sd > 0.0))
        throw ValidationError(Errc::degenerate_uncertainty,
                              "log s has zero sample sd; sigma_s must be positive");
    return Eigen::VectorXd::Constant(dataset.n(), sd);
}

PosteriorDraws fit_bbm(const Dataset& dataset, const FitConfig& config, const SigmaSFix& sigma_s) {
    validate(dataset);
    if (dataset.n() < 3)
        throw ValidationError(Errc::too_few_sources, "fit_bbm needs n >= 3");
    config.validate();
    const auto priors = PriorSettings::from_overrides(config.prior_overrides);

    std::optional<Eigen::VectorXd> fixed;
    switch (sigma_s.mode) {
        case SigmaSFix::Mode::sampled:
            break;
        case SigmaSFix::Mode::empirical:
            fixed = set_sigma_s_empirical(dataset);
            break;
        case SigmaSFix::Mode::value:
            check_positive(sigma_s.value, "fixed sigma_s");
            fixed = Eigen::VectorXd::Constant(dataset.n(), sigma_s.value);
            break;
    }

    BbmModel model(dataset, priors, fixed);
    PosteriorDraws draws = sample(model, config);
    draws.fixed_sigma_s = fixed;
    return draws;
}

BbmParams bbm_params_from_draw(const Dataset& dataset, const PosteriorDraws& draws,
                               int draw_index) {
    if (draw_index < 0 || draw_index >= draws.total_draws())
        throw ValidationError(Errc::insufficient_draws,
                              "draw index " + std::to_string(draw_index) + " out of range");
    const int retained = draws.n_retained();
    const int chain = draw_index / retained;
    const int row = draw_index % retained;
    const Eigen::VectorXd values =
        draws.chains[static_cast<std::size_t>(chain)].row(row).transpose();

    const PriorSettings priors;  // layout does not depend on prior values
    BbmModel model(dataset, priors, draws.fixed_sigma_s);
    if (values.size() != static_cast<Eigen::Index>(model.parameter_names().size()))
        throw ValidationError(Errc::missing_parameter,
                              "draw file does not match the bivariate model layout");
    return model.params_from_constrained(values);
}

}  // namespace metapool
