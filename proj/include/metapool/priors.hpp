#pragma once

#include <map>
#include <string>

namespace metapool {

// Hyperprior settings shared by the hierarchical models. Every value can be
// overridden through FitConfig::prior_overrides using the key in brackets.
struct PriorSettings {
    double hc_tau = 2.5;      // [hc_tau] half-Cauchy scale for tau
    double hc_r_theta = 2.5;  // [hc_r_theta] half-Cauchy scale for r_theta
    double hc_r_sigma = 2.5;  // [hc_r_sigma] half-Cauchy scale for r_sigma
    double hc_sigma_s = 2.5;  // [hc_sigma_s] half-Cauchy scale for each sigma_s_i
    double lkj_eta = 4.0;     // [lkj_eta] LKJ shape for the level-2 Cholesky factor
    double beta_sd = 1000.0;  // [beta_sd] sd of the N(0, sd^2) prior on coefficients

    static PriorSettings from_overrides(const std::map<std::string, double>& overrides);
};

}  // namespace metapool
