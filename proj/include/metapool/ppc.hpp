#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "metapool/bbm.hpp"
#include "metapool/data.hpp"
#include "metapool/mcmc.hpp"

namespace metapool {

// Posterior predictive check of the bivariate model using the discrepancy
//   T(Z, params) = sum_i (y_i - E[y_i | log s_i])^2 / Var(y_i | log s_i),
// the squared standardized residuals of y under the conditional law of y
// given the reported uncertainty.
double discrepancy(const Dataset& dataset, const BbmParams& params);

struct PpcResult {
    double p_value = 0.0;        // fraction of draws with t_rep >= t_obs
    std::vector<double> t_obs;   // discrepancy of the observed data, per draw
    std::vector<double> t_rep;   // discrepancy of the replicated data, per draw
    int n_draws = 0;
};

// For each retained draw: replicate (y, log s) jointly from the level-1
// bivariate normal at that draw's parameters (latents held fixed), then
// compare discrepancies. p near 0 or 1 signals misfit. The replication
// stream is seeded from (draws seed, "ppc"), independent of the fit.
PpcResult ppc_pvalue(const Dataset& dataset, const PosteriorDraws& draws,
                     std::optional<std::uint64_t> seed_override = std::nullopt);

}  // namespace metapool
