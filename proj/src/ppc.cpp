#include "metapool/ppc.hpp"

#include <cmath>
#include <cstring>

#include "metapool/densities.hpp"
#include "metapool/errors.hpp"
#include "metapool/rng.hpp"

namespace metapool {

namespace {

// Replication streams are keyed by the draw's content, not its position, so
// the p-value is exactly invariant under permutation of draws.
std::uint64_t draw_content_hash(const BbmParams& params) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    auto absorb = [&h](double value) {
        std::uint64_t bits = 0;
        std::memcpy(&bits, &value, sizeof(bits));
        h = hash_mix(h, bits);
    };
    for (Eigen::Index j = 0; j < params.beta_theta.size(); ++j) absorb(params.beta_theta[j]);
    for (Eigen::Index j = 0; j < params.beta_sigma.size(); ++j) absorb(params.beta_sigma[j]);
    absorb(params.r_theta);
    absorb(params.r_sigma);
    absorb(params.rho1);
    absorb(params.rho2);
    for (Eigen::Index i = 0; i < params.theta.size(); ++i) {
        absorb(params.sigma_s[i]);
        absorb(params.theta[i]);
        absorb(params.log_sigma[i]);
    }
    return h;
}

}  // namespace

double discrepancy(const Dataset& dataset, const BbmParams& params) {
    const int n = dataset.n();
    params.check(n);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const auto& obs = dataset.observations[static_cast<std::size_t>(i)];
        const NormalSummary conditional = bbm_conditional_y(
            std::log(obs.s), params.theta[i], params.log_sigma[i], params.sigma_s[i], params.rho1);
        const double z = (obs.y - conditional.mean) / conditional.sd;
        total += z * z;
    }
    return total;
}

PpcResult ppc_pvalue(const Dataset& dataset, const PosteriorDraws& draws,
                     std::optional<std::uint64_t> seed_override) {
    validate(dataset);
    if (draws.model_name != "bbm")
        throw ValidationError(Errc::missing_parameter,
                              "posterior predictive check needs bivariate-model draws, got model '" +
                                  draws.model_name + "'");
    const int n = dataset.n();
    const int total = draws.total_draws();
    if (total == 0) throw ValidationError(Errc::insufficient_draws, "no retained draws");

    const std::uint64_t seed = seed_override ? *seed_override : draws.config.seed;

    PpcResult result;
    result.n_draws = total;
    result.t_obs.resize(static_cast<std::size_t>(total));
    result.t_rep.resize(static_cast<std::size_t>(total));

    Dataset replicate = dataset;
    int exceed = 0;
    for (int k = 0; k < total; ++k) {
        const BbmParams params = bbm_params_from_draw(dataset, draws, k);
        // one replication stream per draw, independent of the fitting streams
        Rng rng = Rng::substream(seed, {hash_str("ppc"), draw_content_hash(params)});
        for (int i = 0; i < n; ++i) {
            const double sigma = std::exp(params.log_sigma[i]);
            double y_rep = 0.0, log_s_rep = 0.0;
            sample_bivariate_normal(rng, params.theta[i], params.log_sigma[i], sigma,
                                    params.sigma_s[i], params.rho1, y_rep, log_s_rep);
            auto& obs = replicate.observations[static_cast<std::size_t>(i)];
            obs.y = y_rep;
            obs.s = std::exp(log_s_rep);
        }
        const double t_obs = discrepancy(dataset, params);
        const double t_rep = discrepancy(replicate, params);
        result.t_obs[static_cast<std::size_t>(k)] = t_obs;
        result.t_rep[static_cast<std::size_t>(k)] = t_rep;
        if (t_rep >= t_obs) ++exceed;
    }
    result.p_value = static_cast<double>(exceed) / static_cast<double>(total);
    return result;
}

}  // namespace metapool
