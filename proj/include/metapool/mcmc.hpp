#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "metapool/rng.hpp"

namespace metapool {

struct FitConfig {
    int chains = 3;
    int iterations = 5000;  // total per chain, warmup included
    int warmup = 2000;
    int thin = 10;
    std::uint64_t seed = kDefaultSeed;
    double target_accept = 0.8;
    int max_tree_depth = 10;
    std::map<std::string, double> prior_overrides;
    bool parallel_chains = true;

    int retained_per_chain() const { return (iterations - warmup) / thin; }
    void validate() const;  // throws ValidationError(InvalidConfig)

    // 2 chains x 1500 iterations, 500 warmup, no thinning; for batch studies
    // and CI runs where the defaults would be needlessly slow.
    static FitConfig fast_profile();
};

// Retained draws on the reported (constrained) scale, one matrix per chain,
// with convergence diagnostics per parameter.
struct PosteriorDraws {
    std::vector<std::string> parameter_names;
    std::vector<Eigen::MatrixXd> chains;  // each retained x dim
    std::vector<int> divergences;         // post-warmup, per chain
    std::vector<double> accept_rate;      // mean accept statistic, per chain
    std::vector<double> rhat;             // per parameter
    std::vector<double> ess;              // per parameter
    FitConfig config;
    std::string model_name = "custom";
    std::string rng_name;
    std::optional<Eigen::VectorXd> fixed_sigma_s;  // echo when sigma_s held fixed
    std::optional<double> fixed_tau;               // echo when tau held fixed

    int dim() const { return static_cast<int>(parameter_names.size()); }
    int n_chains() const { return static_cast<int>(chains.size()); }
    int n_retained() const { return chains.empty() ? 0 : static_cast<int>(chains[0].rows()); }
    int total_draws() const { return n_chains() * n_retained(); }
    int total_divergences() const;

    int index_of(const std::string& name) const;      // throws MissingParameter
    Eigen::VectorXd merged(int param_index) const;    // chain-major concatenation
    Eigen::VectorXd merged(const std::string& name) const;
    double mean(const std::string& name) const;
    double sd(const std::string& name) const;
    double quantile(const std::string& name, double q) const;

    // Recomputes rhat/ess for every parameter.
    void compute_diagnostics();
    bool not_converged(double rhat_threshold = 1.05) const;
};

// Split-R-hat: each chain is halved, W is the mean within-split variance,
// B the between-split variance; R = sqrt(((m-1)/m + B/(mW))) with m the
// per-split length. Requires >= 2 chains with >= 4 draws each.
double rhat(const std::vector<Eigen::VectorXd>& chain_draws);

// Effective sample size with Geyer initial-positive-sequence truncation of
// the combined-chain autocorrelations, capped at 1.5x the total draw count.
// Requires >= 8 total draws.
double ess(const std::vector<Eigen::VectorXd>& chain_draws);

// Target density interface. Implementations must be pure and reentrant:
// chains call them concurrently.
class LogDensityModel {
  public:
    virtual ~LogDensityModel() = default;
    virtual int dim() const = 0;
    // Returns log density at z and fills grad (resized by caller to dim()).
    // Non-finite returns are treated as divergent states, not errors.
    virtual double logpdf_grad(const Eigen::VectorXd& z, Eigen::VectorXd& grad) const = 0;

    // Maps an unconstrained draw to the reported parameter vector.
    virtual Eigen::VectorXd constrain(const Eigen::VectorXd& z) const { return z; }
    virtual std::vector<std::string> parameter_names() const;
    virtual std::string name() const { return "custom"; }
};

using LogDensityGradFn = std::function<double(const Eigen::VectorXd&, Eigen::VectorXd&)>;

// Unit-mass leapfrog integration of the Hamiltonian -logp(q) + |p|^2/2.
// Symplectic and reversible: negating the final momentum and re-integrating
// returns to the start point.
void leapfrog(Eigen::VectorXd& position, Eigen::VectorXd& momentum, double step_size, int n_steps,
              const LogDensityGradFn& logdensity_with_grad);

// Dynamic-trajectory HMC with multinomial state selection and a no-U-turn
// stopping rule; dual-averaging step size adaptation toward target_accept and
// a diagonal mass matrix estimated over expanding warmup windows. Chains are
// initialized uniform in (-2, 2), seeded from (seed, chain index).
PosteriorDraws sample(const LogDensityModel& model, const FitConfig& config);
PosteriorDraws sample(const LogDensityGradFn& logdensity_with_grad, int dim,
                      const FitConfig& config);

// Persistence: draws as CSV (`chain,iteration,<param names...>`), everything
// else in a JSON sidecar (config, seed, diagnostics table, divergence counts,
// RNG identifier). Byte-identical across repeated runs with the same seed.
void save_draws(const PosteriorDraws& draws, const std::string& csv_path,
                const std::string& json_path);
PosteriorDraws load_draws(const std::string& csv_path, const std::string& json_path);

}  // namespace metapool
