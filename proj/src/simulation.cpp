#include "metapool/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <fstream>
#include <map>

#include "metapool/densities.hpp"
#include "metapool/errors.hpp"
#include "metapool/ubm.hpp"
#include "metapool/util.hpp"

namespace metapool {

namespace {

struct RepOutcome {
    // keyed by parameter label; one entry per tracked parameter
    struct Entry {
        std::string parameter;
        double estimate, ci_low, ci_high, truth;
    };
    std::vector<Entry> entries;
    bool failed = false;
};

bool is_regression_method(Method m) {
    return m == Method::lr || m == Method::wlr || m == Method::twlr;
}
bool is_mean_method(Method m) {
    return m == Method::raw || m == Method::weighted || m == Method::trimmed;
}

std::vector<std::string> tracked_parameters(const ScenarioSpec& spec) {
    if (!spec.regression) return {"mu"};
    std::vector<std::string> params;
    for (Eigen::Index j = 0; j < spec.regression->beta_theta.size(); ++j)
        params.push_back("beta" + std::to_string(j));
    return params;
}

Estimate posterior_estimate(const PosteriorDraws& draws, const std::string& name) {
    Estimate est;
    est.point = draws.mean(name);
    est.ci_low = draws.quantile(name, 0.025);
    est.ci_high = draws.quantile(name, 0.975);
    est.se = draws.sd(name);
    return est;
}

RepOutcome evaluate_method(Method method, const ScenarioSpec& spec, const Dataset& dataset,
                           const TruthRecord& truth, const StudyOptions& options,
                           std::uint64_t rep_seed) {
    RepOutcome outcome;
    const bool regression = spec.regression.has_value();

    auto push = [&](const std::string& parameter, const Estimate& est, double true_value) {
        outcome.entries.push_back({parameter, est.point, est.ci_low, est.ci_high, true_value});
    };

    TrimmedOptions trim = options.trim;
    trim.seed = hash_mix(rep_seed, hash_str("bootstrap"));

    FitConfig fit = options.fit;
    fit.seed = hash_mix(rep_seed, hash_str(method_name(method)));
    fit.parallel_chains = false;  // replicates own the parallelism

    switch (method) {
        case Method::raw:
            push("mu", raw_mean(dataset), truth.mu_theta);
            break;
        case Method::weighted:
            push("mu", weighted_mean(dataset).first, truth.mu_theta);
            break;
        case Method::trimmed:
            push("mu", trimmed_weighted_mean(dataset, trim).first, truth.mu_theta);
            break;
        case Method::lr:
        case Method::wlr:
        case Method::twlr: {
            const WeightMode mode = method == Method::lr    ? WeightMode::unweighted
                                    : method == Method::wlr ? WeightMode::inverse_variance
                                                            : WeightMode::trimmed;
            const LinearFit fit_result = linear_fit(dataset, mode, trim);
            for (int j = 0; j < dataset.p; ++j)
                push("beta" + std::to_string(j), fit_result.coefficients[static_cast<std::size_t>(j)],
                     truth.beta_theta[j]);
            break;
        }
        case Method::ubm: {
            const PosteriorDraws draws = fit_ubm(dataset, fit);
            if (regression)
                for (int j = 0; j < dataset.p; ++j)
                    push("beta" + std::to_string(j),
                         posterior_estimate(draws, "beta_" + std::to_string(j)),
                         truth.beta_theta[j]);
            else
                push("mu", posterior_estimate(draws, "mu"), truth.mu_theta);
            break;
        }
        case Method::bbm: {
            const PosteriorDraws draws = fit_bbm(dataset, fit, options.sigma_s_fix);
            if (regression)
                for (int j = 0; j < dataset.p; ++j)
                    push("beta" + std::to_string(j),
                         posterior_estimate(draws, "beta_theta_" + std::to_string(j)),
                         truth.beta_theta[j]);
            else
                push("mu", posterior_estimate(draws, "mu_theta"), truth.mu_theta);
            break;
        }
        case Method::oracle: {
            // truth-returning reference method, for harness checks
            if (regression)
                for (int j = 0; j < dataset.p; ++j) {
                    Estimate est;
                    est.point = est.ci_low = est.ci_high = truth.beta_theta[j];
                    push("beta" + std::to_string(j), est, truth.beta_theta[j]);
                }
            else {
                Estimate est;
                est.point = est.ci_low = est.ci_high = truth.mu_theta;
                push("mu", est, truth.mu_theta);
            }
            break;
        }
    }
    return outcome;
}

}  // namespace

void ScenarioSpec::validate() const {
    if (n < 2) throw ValidationError(Errc::too_few_sources, "scenario needs n >= 2");
    if (!(r_theta > 0.0) || !(r_sigma > 0.0) || !(sigma_s > 0.0))
        throw ValidationError(Errc::invalid_scale, "scenario scales must be positive");
    if (!(rho1 > -1.0 && rho1 < 1.0) || !(rho2 > -1.0 && rho2 < 1.0))
        throw ValidationError(Errc::invalid_correlation, "scenario correlations must lie in (-1,1)");
    if (n_reps < 1) throw ValidationError(Errc::invalid_config, "n_reps must be >= 1");
    if (regression) {
        if (regression->beta_theta.size() != 3 || regression->beta_sigma.size() != 3)
            throw ValidationError(Errc::covariate_dimension_mismatch,
                                  "regression truth uses 3 coefficients (intercept, x1, x2)");
    }
}

std::pair<Dataset, TruthRecord> generate_dataset(const ScenarioSpec& spec, int rep_index) {
    spec.validate();
    Rng rng = Rng::substream(spec.seed, {hash_str(spec.id), static_cast<std::uint64_t>(rep_index)});

    Dataset dataset;
    TruthRecord truth;
    truth.theta.resize(spec.n);
    truth.sigma.resize(spec.n);
    truth.mu_theta = spec.mu_theta;

    const bool regression = spec.regression.has_value();
    if (regression) {
        dataset.p = 3;
        dataset.intercept_added = true;
        truth.beta_theta = spec.regression->beta_theta;
    }

    for (int i = 0; i < spec.n; ++i) {
        SourceObservation obs;
        obs.source_id = "src_" + std::to_string(i + 1);

        double m_theta = spec.mu_theta;
        double m_sigma = spec.mu_sigma;
        if (regression) {
            const double x1 = rng.normal();
            const double x2 = rng.bernoulli(0.2) ? 1.0 : 0.0;
            obs.x = {1.0, x1, x2};
            m_theta = spec.regression->beta_theta[0] + spec.regression->beta_theta[1] * x1 +
                      spec.regression->beta_theta[2] * x2;
            m_sigma = spec.regression->beta_sigma[0] + spec.regression->beta_sigma[1] * x1 +
                      spec.regression->beta_sigma[2] * x2;
        }

        double theta = 0.0, log_sigma = 0.0;
        sample_bivariate_normal(rng, m_theta, m_sigma, spec.r_theta, spec.r_sigma, spec.rho2,
                                theta, log_sigma);
        const double sigma = std::exp(log_sigma);
        double y = 0.0, log_s = 0.0;
        sample_bivariate_normal(rng, theta, log_sigma, sigma, spec.sigma_s, spec.rho1, y, log_s);

        obs.y = y;
        obs.s = std::exp(log_s);
        truth.theta[i] = theta;
        truth.sigma[i] = sigma;
        dataset.observations.push_back(std::move(obs));
    }
    return {std::move(dataset), std::move(truth)};
}

const char* method_name(Method method) {
    switch (method) {
        case Method::raw: return "raw";
        case Method::weighted: return "weighted";
        case Method::trimmed: return "trimmed";
        case Method::ubm: return "ubm";
        case Method::bbm: return "bbm";
        case Method::lr: return "lr";
        case Method::wlr: return "wlr";
        case Method::twlr: return "twlr";
        case Method::oracle: return "oracle";
    }
    return "unknown";
}

Method method_from_name(const std::string& name) {
    for (Method m : {Method::raw, Method::weighted, Method::trimmed, Method::ubm, Method::bbm,
                     Method::lr, Method::wlr, Method::twlr, Method::oracle})
        if (name == method_name(m)) return m;
    throw ValidationError(Errc::invalid_config, "unknown method: " + name);
}

StudyMetrics run_study(const std::vector<ScenarioSpec>& specs, const std::vector<Method>& methods,
                       const StudyOptions& options) {
    StudyMetrics metrics;
    for (const auto& spec : specs) {
        spec.validate();
        const bool regression = spec.regression.has_value();
        std::vector<Method> applicable;
        for (Method m : methods) {
            if (regression && is_mean_method(m)) continue;
            if (!regression && is_regression_method(m)) continue;
            applicable.push_back(m);
        }
        if (applicable.empty()) continue;

        // results[rep][method] in fixed order; workers fill disjoint slots
        std::vector<std::vector<RepOutcome>> results(
            static_cast<std::size_t>(spec.n_reps),
            std::vector<RepOutcome>(applicable.size()));

        parallel_for(static_cast<std::size_t>(spec.n_reps), options.threads, [&](std::size_t rep) {
            const auto [dataset, truth] = generate_dataset(spec, static_cast<int>(rep));
            const std::uint64_t rep_seed =
                hash_mix(spec.seed, hash_str(spec.id), static_cast<std::uint64_t>(rep));
            for (std::size_t m = 0; m < applicable.size(); ++m) {
                try {
                    results[rep][m] = evaluate_method(applicable[m], spec, dataset, truth, options,
                                                      rep_seed);
                } catch (const Error&) {
                    results[rep][m].failed = true;
                }
            }
        });

        for (std::size_t m = 0; m < applicable.size(); ++m) {
            const Method method = applicable[m];
            std::map<std::string, std::vector<const RepOutcome::Entry*>> by_parameter;
            for (const std::string& parameter : tracked_parameters(spec))
                by_parameter[parameter] = {};
            int failures = 0;
            for (int rep = 0; rep < spec.n_reps; ++rep) {
                const RepOutcome& outcome = results[static_cast<std::size_t>(rep)][m];
                if (outcome.failed) {
                    ++failures;
                    continue;
                }
                for (const auto& entry : outcome.entries)
                    by_parameter[entry.parameter].push_back(&entry);
                for (const auto& entry : outcome.entries)
                    metrics.estimates.push_back({spec.id, method, entry.parameter, rep,
                                                 entry.estimate, entry.ci_low, entry.ci_high,
                                                 entry.truth});
            }
            for (const auto& [parameter, entries] : by_parameter) {
                MetricRow row;
                row.scenario = spec.id;
                row.method = method;
                row.parameter = parameter;
                row.n_reps = spec.n_reps;
                row.failures = failures;
                double bias = 0.0, mse = 0.0, covered = 0.0;
                for (const auto* entry : entries) {
                    const double err = entry->estimate - entry->truth;
                    bias += err;
                    mse += err * err;
                    covered += (entry->ci_low <= entry->truth && entry->truth <= entry->ci_high)
                                   ? 1.0
                                   : 0.0;
                }
                const auto count = static_cast<double>(entries.size());
                const double nan = std::numeric_limits<double>::quiet_NaN();
                row.bias = entries.empty() ? nan : bias / count;
                row.mse = entries.empty() ? nan : mse / count;
                row.coverage = entries.empty() ? nan : covered / count;
                metrics.rows.push_back(std::move(row));
            }
        }
    }
    return metrics;
}

std::vector<ThetaRecoveryRow> theta_recovery_report(const ScenarioSpec& spec,
                                                    const StudyOptions& options, int rep_index) {
    if (spec.regression)
        throw ValidationError(Errc::invalid_config,
                              "theta recovery uses covariate-free scenarios");
    const auto [dataset, truth] = generate_dataset(spec, rep_index);
    const std::uint64_t rep_seed =
        hash_mix(spec.seed, hash_str(spec.id), static_cast<std::uint64_t>(rep_index));

    FitConfig fit = options.fit;
    fit.seed = hash_mix(rep_seed, hash_str("ubm"));
    const PosteriorDraws ubm_draws = fit_ubm(dataset, fit);
    fit.seed = hash_mix(rep_seed, hash_str("bbm"));
    const PosteriorDraws bbm_draws = fit_bbm(dataset, fit, options.sigma_s_fix);

    constexpr double z95 = 1.959963984540054;
    std::vector<ThetaRecoveryRow> rows;
    for (int i = 0; i < spec.n; ++i) {
        const auto& obs = dataset.observations[static_cast<std::size_t>(i)];
        ThetaRecoveryRow row;
        row.source_id = obs.source_id;
        row.theta_true = truth.theta[i];
        row.y = obs.y;
        row.y_low = obs.y - z95 * obs.s;
        row.y_high = obs.y + z95 * obs.s;
        const std::string theta_name = "theta_" + std::to_string(i + 1);
        row.ubm = ubm_draws.mean(theta_name);
        row.ubm_low = ubm_draws.quantile(theta_name, 0.025);
        row.ubm_high = ubm_draws.quantile(theta_name, 0.975);
        row.bbm = bbm_draws.mean(theta_name);
        row.bbm_low = bbm_draws.quantile(theta_name, 0.025);
        row.bbm_high = bbm_draws.quantile(theta_name, 0.975);
        rows.push_back(std::move(row));
    }
    std::sort(rows.begin(), rows.end(), [](const ThetaRecoveryRow& a, const ThetaRecoveryRow& b) {
        return std::abs(a.y - a.theta_true) > std::abs(b.y - b.theta_true);
    });
    return rows;
}

void save_metrics_csv(const StudyMetrics& metrics, const std::string& path) {
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw ValidationError(Errc::parse_error, "cannot write " + path);
    file << "scenario,method,parameter,bias,mse,coverage,n_reps,failures\n";
    for (const auto& row : metrics.rows)
        file << row.scenario << ',' << method_name(row.method) << ',' << row.parameter << ','
             << format_double(row.bias) << ',' << format_double(row.mse) << ','
             << format_double(row.coverage) << ',' << row.n_reps << ',' << row.failures << "\n";
    if (!file) throw ValidationError(Errc::parse_error, "write failed: " + path);
}

void save_estimates_csv(const StudyMetrics& metrics, const std::string& path) {
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw ValidationError(Errc::parse_error, "cannot write " + path);
    file << "scenario,method,parameter,rep,estimate,ci_low,ci_high,truth\n";
    for (const auto& est : metrics.estimates)
        file << est.scenario << ',' << method_name(est.method) << ',' << est.parameter << ','
             << est.rep << ',' << format_double(est.estimate) << ',' << format_double(est.ci_low)
             << ',' << format_double(est.ci_high) << ',' << format_double(est.truth) << "\n";
    if (!file) throw ValidationError(Errc::parse_error, "write failed: " + path);
}

void save_theta_recovery_csv(const std::vector<ThetaRecoveryRow>& rows, const std::string& path) {
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw ValidationError(Errc::parse_error, "cannot write " + path);
    file << "source_id,theta_true,y,y_low,y_high,ubm,ubm_low,ubm_high,bbm,bbm_low,bbm_high\n";
    for (const auto& row : rows)
        file << row.source_id << ',' << format_double(row.theta_true) << ','
             << format_double(row.y) << ',' << format_double(row.y_low) << ','
             << format_double(row.y_high) << ',' << format_double(row.ubm) << ','
             << format_double(row.ubm_low) << ',' << format_double(row.ubm_high) << ','
             << format_double(row.bbm) << ',' << format_double(row.bbm_low) << ','
             << format_double(row.bbm_high) << "\n";
    if (!file) throw ValidationError(Errc::parse_error, "write failed: " + path);
}

}  // namespace metapool
