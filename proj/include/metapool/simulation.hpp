#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "metapool/bbm.hpp"
#include "metapool/classical.hpp"
#include "metapool/data.hpp"
#include "metapool/mcmc.hpp"

namespace metapool {

// Generative setting for one synthetic study. The latent pairs
// (theta_i, log sigma_i) come from the level-2 bivariate normal and the
// observed (y_i, log s_i) from the level-1 one. With regression set, the
// design is (1, x1, x2) with x1 ~ N(0,1) and x2 ~ Bernoulli(0.2), and the
// means are x_i' beta.
struct RegressionTruth {
    Eigen::VectorXd beta_theta;  // default (5, 3, 1)
    Eigen::VectorXd beta_sigma;  // default (1, 1, 0)
};

struct ScenarioSpec {
    std::string id = "scenario";
    int n = 50;
    double mu_theta = 10.0;
    double mu_sigma = 2.0;
    double r_theta = 3.0;
    double r_sigma = 1.0;
    double sigma_s = 1.0;
    double rho1 = 0.0;
    double rho2 = 0.0;
    std::optional<RegressionTruth> regression;
    int n_reps = 100;
    std::uint64_t seed = kDefaultSeed;

    void validate() const;
};

struct TruthRecord {
    Eigen::VectorXd theta;       // n latent means
    Eigen::VectorXd sigma;       // n latent sds
    double mu_theta = 0.0;
    Eigen::VectorXd beta_theta;  // empty without covariates
};

// Deterministic in (spec.seed, spec.id, rep_index).
std::pair<Dataset, TruthRecord> generate_dataset(const ScenarioSpec& spec, int rep_index);

enum class Method { raw, weighted, trimmed, ubm, bbm, lr, wlr, twlr, oracle };

const char* method_name(Method method);
Method method_from_name(const std::string& name);

struct MetricRow {
    std::string scenario;
    Method method = Method::raw;
    std::string parameter;  // "mu" or "beta0"/"beta1"/"beta2"
    double bias = 0.0;
    double mse = 0.0;
    double coverage = 0.0;
    int n_reps = 0;
    int failures = 0;
};

struct ReplicateEstimate {
    std::string scenario;
    Method method = Method::raw;
    std::string parameter;
    int rep = 0;
    double estimate = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    double truth = 0.0;
};

struct StudyMetrics {
    std::vector<MetricRow> rows;
    std::vector<ReplicateEstimate> estimates;  // long format, for plotting
};

struct StudyOptions {
    FitConfig fit = FitConfig::fast_profile();
    SigmaSFix sigma_s_fix = SigmaSFix::sampled();
    TrimmedOptions trim;
    unsigned threads = 0;  // 0 = hardware concurrency
};

// Per replicate: generate a dataset, run every applicable method, record the
// point estimate and 95% interval against the generating truth. Mean methods
// (raw/weighted/trimmed) apply to scenarios without covariates, regression
// methods (lr/wlr/twlr) to scenarios with them; the Bayesian methods apply
// to both. Replicate failures land in the failure count, not as aborts.
StudyMetrics run_study(const std::vector<ScenarioSpec>& specs, const std::vector<Method>& methods,
                       const StudyOptions& options);

// Source-level recovery table for one simulated study (covariate-free spec):
// truth, the direct estimate with its normal CI, and the posterior mean and
// equal-tailed CI of theta_i under both hierarchical fits, sorted by
// |y_i - theta_i| descending.
struct ThetaRecoveryRow {
    std::string source_id;
    double theta_true = 0.0;
    double y = 0.0, y_low = 0.0, y_high = 0.0;
    double ubm = 0.0, ubm_low = 0.0, ubm_high = 0.0;
    double bbm = 0.0, bbm_low = 0.0, bbm_high = 0.0;
};

std::vector<ThetaRecoveryRow> theta_recovery_report(const ScenarioSpec& spec,
                                                    const StudyOptions& options,
                                                    int rep_index = 0);

void save_metrics_csv(const StudyMetrics& metrics, const std::string& path);
void save_estimates_csv(const StudyMetrics& metrics, const std::string& path);
void save_theta_recovery_csv(const std::vector<ThetaRecoveryRow>& rows, const std::string& path);

}  // namespace metapool
