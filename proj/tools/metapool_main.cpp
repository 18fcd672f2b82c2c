// Command-line entry point: estimate | fit-ubm | fit-bbm | ppc | simulate | weights.
// Every invocation is deterministic given --seed; primary outputs are byte
// identical across repeated runs.

#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "metapool/bbm.hpp"
#include "metapool/classical.hpp"
#include "metapool/data.hpp"
#include "metapool/errors.hpp"
#include "metapool/mcmc.hpp"
#include "metapool/ppc.hpp"
#include "metapool/rng.hpp"
#include "metapool/simulation.hpp"
#include "metapool/ubm.hpp"
#include "metapool/util.hpp"

namespace {

using nlohmann::json;
using namespace metapool;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitSampler = 3;
constexpr int kExitInternal = 4;

// --out draws     -> draws.csv + draws.json
// --out draws.csv -> draws.csv + draws.json
std::pair<std::string, std::string> draw_paths(std::string base) {
    if (base.size() > 4 && base.substr(base.size() - 4) == ".csv")
        base = base.substr(0, base.size() - 4);
    return {base + ".csv", base + ".json"};
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw ValidationError(Errc::parse_error, "cannot write " + path);
    file << text;
    if (!file) throw ValidationError(Errc::parse_error, "write failed: " + path);
}

// Tables are emitted as CSV or as {"version":1,"table":...,"rows":[...]}.
struct Table {
    std::string name;
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;  // preformatted cells
    std::vector<json> json_rows;                 // typed values for --format json

    void write(const std::string& path, const std::string& format) const {
        if (format == "json") {
            json out;
            out["version"] = 1;
            out["table"] = name;
            out["rows"] = json_rows;
            write_text(path, out.dump(2) + "\n");
            return;
        }
        std::string text;
        for (std::size_t j = 0; j < columns.size(); ++j)
            text += (j ? "," : "") + columns[j];
        text += "\n";
        for (const auto& row : rows) {
            for (std::size_t j = 0; j < row.size(); ++j) text += (j ? "," : "") + row[j];
            text += "\n";
        }
        write_text(path, text);
    }
};

struct EstimateArgs {
    std::string data_path;
    std::string method = "all";
    bool covariates = false;
    double trim_factor = 3.0;
    int bootstrap = 1000;
    std::string out;
    std::string weights_out;
};

void append_estimate(Table& table, const Estimate& est, const std::string& parameter) {
    const std::string se = est.se ? format_double(*est.se) : "";
    table.rows.push_back({estimator_name(est.method), parameter, format_double(est.point),
                          format_double(est.ci_low), format_double(est.ci_high), se});
    json row;
    row["method"] = estimator_name(est.method);
    row["parameter"] = parameter;
    row["point"] = est.point;
    row["ci_low"] = est.ci_low;
    row["ci_high"] = est.ci_high;
    if (est.se) row["se"] = *est.se;
    table.json_rows.push_back(row);
}

void append_weights(Table& table, const Dataset& dataset, const std::string& method,
                    const WeightVector& weights) {
    for (int i = 0; i < dataset.n(); ++i) {
        const auto& id = dataset.observations[static_cast<std::size_t>(i)].source_id;
        table.rows.push_back({method, id, format_double(weights.weights[i]),
                              format_double(weights.standardized[i])});
        table.json_rows.push_back({{"method", method},
                                   {"source_id", id},
                                   {"weight", weights.weights[i]},
                                   {"lambda", weights.standardized[i]}});
    }
}

int run_estimate(const EstimateArgs& args, std::uint64_t seed, const std::string& format) {
    const Dataset dataset = load_csv(args.data_path);
    validate(dataset);
    if (args.covariates && !dataset.has_covariates())
        throw ValidationError(Errc::covariate_dimension_mismatch,
                              "--covariates given but the file has no x columns");

    TrimmedOptions trim;
    trim.trim_factor = args.trim_factor;
    trim.bootstrap_samples = args.bootstrap;
    trim.seed = seed;

    Table estimates{"estimates", {"method", "parameter", "point", "ci_low", "ci_high", "se"}, {}, {}};
    Table weights{"weights", {"method", "source_id", "weight", "lambda"}, {}, {}};

    const bool all = args.method == "all";
    if (args.covariates) {
        auto run_fit = [&](const std::string& name, WeightMode mode) {
            if (!all && args.method != name) return;
            const LinearFit fit = linear_fit(dataset, mode, trim);
            for (int j = 0; j < dataset.p; ++j)
                append_estimate(estimates, fit.coefficients[static_cast<std::size_t>(j)],
                                "beta" + std::to_string(j));
            append_weights(weights, dataset, name, fit.weights);
        };
        run_fit("lr", WeightMode::unweighted);
        run_fit("wlr", WeightMode::inverse_variance);
        run_fit("twlr", WeightMode::trimmed);
    } else {
        if (all || args.method == "raw")
            append_estimate(estimates, raw_mean(dataset), "mu");
        if (all || args.method == "weighted") {
            const auto [est, w] = weighted_mean(dataset);
            append_estimate(estimates, est, "mu");
            append_weights(weights, dataset, "weighted", w);
        }
        if (all || args.method == "trimmed") {
            const auto [est, w] = trimmed_weighted_mean(dataset, trim);
            append_estimate(estimates, est, "mu");
            append_weights(weights, dataset, "trimmed", w);
        }
    }
    if (estimates.rows.empty())
        throw ValidationError(Errc::invalid_config,
                              "method '" + args.method + "' does not apply to this dataset");

    if (args.out.empty()) {
        std::cout << "method,parameter,point,ci_low,ci_high,se\n";
        for (const auto& row : estimates.rows) {
            for (std::size_t j = 0; j < row.size(); ++j) std::cout << (j ? "," : "") << row[j];
            std::cout << "\n";
        }
    } else {
        estimates.write(args.out, format);
        std::string weights_path = args.weights_out;
        if (weights_path.empty() && !weights.rows.empty())
            weights_path = args.out + (format == "json" ? ".weights.json" : ".weights.csv");
        if (!weights_path.empty() && !weights.rows.empty())
            weights.write(weights_path, format);
    }
    return kExitOk;
}

struct FitArgs {
    std::string data_path;
    std::string out;
    FitConfig config;
    std::vector<std::string> priors;
    std::optional<double> fix_tau;
    std::string fix_sigma_s;  // "", "empirical", or a number
};

void apply_priors(FitConfig& config, const std::vector<std::string>& priors) {
    for (const auto& entry : priors) {
        const auto eq = entry.find('=');
        if (eq == std::string::npos)
            throw ValidationError(Errc::invalid_config, "--prior expects name=value, got " + entry);
        bool ok = false;
        const double value = parse_double(entry.substr(eq + 1), ok);
        if (!ok)
            throw ValidationError(Errc::invalid_config, "bad prior value in '" + entry + "'");
        config.prior_overrides[entry.substr(0, eq)] = value;
    }
}

int run_fit(const FitArgs& args, bool bivariate) {
    const Dataset dataset = load_csv(args.data_path);
    validate(dataset);
    FitConfig config = args.config;
    apply_priors(config, args.priors);

    PosteriorDraws draws;
    if (bivariate) {
        SigmaSFix fix;
        if (args.fix_sigma_s == "empirical") {
            fix = SigmaSFix::empirical();
        } else if (!args.fix_sigma_s.empty()) {
            bool ok = false;
            const double value = parse_double(args.fix_sigma_s, ok);
            if (!ok)
                throw ValidationError(Errc::invalid_config,
                                      "--fix-sigma-s expects 'empirical' or a number");
            fix = SigmaSFix::fixed(value);
        }
        draws = fit_bbm(dataset, config, fix);
    } else {
        draws = fit_ubm(dataset, config, args.fix_tau);
    }

    const auto [csv_path, json_path] = draw_paths(args.out);
    save_draws(draws, csv_path, json_path);
    std::cout << "wrote " << csv_path << " and " << json_path << " ("
              << draws.total_draws() << " draws/parameter, " << draws.total_divergences()
              << " divergences" << (draws.not_converged() ? ", NOT CONVERGED" : "") << ")\n";
    return kExitOk;
}

struct PpcArgs {
    std::string data_path;
    std::string draws_base;
    std::string out;
    std::string t_out;
};

int run_ppc(const PpcArgs& args, std::optional<std::uint64_t> seed_override) {
    const Dataset dataset = load_csv(args.data_path);
    validate(dataset);
    const auto [csv_path, json_path] = draw_paths(args.draws_base);
    const PosteriorDraws draws = load_draws(csv_path, json_path);
    const PpcResult result = ppc_pvalue(dataset, draws, seed_override);

    json out;
    out["version"] = 1;
    out["p_value"] = result.p_value;
    out["n_draws"] = result.n_draws;
    const std::string text = out.dump(2) + "\n";
    if (args.out.empty())
        std::cout << text;
    else
        write_text(args.out, text);

    if (!args.t_out.empty()) {
        std::string csv = "draw,t_obs,t_rep\n";
        for (int k = 0; k < result.n_draws; ++k)
            csv += std::to_string(k + 1) + "," +
                   format_double(result.t_obs[static_cast<std::size_t>(k)]) + "," +
                   format_double(result.t_rep[static_cast<std::size_t>(k)]) + "\n";
        write_text(args.t_out, csv);
    }
    return kExitOk;
}

struct WeightsArgs {
    std::string data_path;
    std::string method;
    std::string draws_base;
    std::string out;
};

int run_weights(const WeightsArgs& args, std::uint64_t seed, const std::string& format) {
    const Dataset dataset = load_csv(args.data_path);
    validate(dataset);
    const int n = dataset.n();

    Eigen::VectorXd raw_weights(n);
    if (args.method == "weighted") {
        raw_weights = dataset.s().array().square().inverse();
    } else if (args.method == "trimmed") {
        TrimmedOptions trim;
        trim.seed = seed;
        raw_weights = trimmed_weighted_mean(dataset, trim).second.weights;
    } else if (args.method == "ubm" || args.method == "bbm") {
        if (args.draws_base.empty())
            throw ValidationError(Errc::missing_draws_file,
                                  "--method " + args.method + " needs --draws");
        const auto [csv_path, json_path] = draw_paths(args.draws_base);
        const PosteriorDraws draws = load_draws(csv_path, json_path);
        if (args.method == "ubm") {
            // omega_i = 1/(s_i^2 + tau^2) with tau^2 at its posterior mean
            const Eigen::VectorXd tau = draws.merged("tau");
            const double tau_sq = tau.array().square().mean();
            raw_weights = (dataset.s().array().square() + tau_sq).inverse();
        } else {
            // xi_i = 1/(sigma_i^2 (1-rho1^2) + r_theta^2 (1-rho2^2)), each
            // squared quantity at its posterior mean
            const double r_theta_sq = draws.merged("r_theta").array().square().mean();
            const double rho1 = draws.merged("rho1").mean();
            const double rho2 = draws.merged("rho2").mean();
            for (int i = 0; i < n; ++i) {
                const Eigen::VectorXd log_sigma =
                    draws.merged("log_sigma_" + std::to_string(i + 1));
                const double sigma_sq = (2.0 * log_sigma.array()).exp().mean();
                raw_weights[i] = 1.0 / (sigma_sq * (1.0 - rho1 * rho1) +
                                        r_theta_sq * (1.0 - rho2 * rho2));
            }
        }
    } else {
        throw ValidationError(Errc::invalid_config,
                              "--method must be weighted, trimmed, ubm, or bbm");
    }

    const WeightVector weights = standardize_weights(raw_weights);
    Table table{"weights", {"method", "source_id", "weight", "lambda"}, {}, {}};
    append_weights(table, dataset, args.method, weights);
    if (args.out.empty()) {
        for (const auto& row : table.rows) {
            for (std::size_t j = 0; j < row.size(); ++j) std::cout << (j ? "," : "") << row[j];
            std::cout << "\n";
        }
    } else {
        table.write(args.out, format);
    }
    return kExitOk;
}

struct SimulateArgs {
    std::string config_path;
    std::string out;
    std::string estimates_out;
    bool fast = false;
    bool paper_scale = false;
    bool theta_recovery = false;
    int rep_index = 0;
    unsigned threads = 0;
};

ScenarioSpec scenario_from_json(const json& node, std::uint64_t default_seed, int default_reps) {
    ScenarioSpec spec;
    spec.id = node.value("id", std::string("scenario"));
    spec.n = node.value("n", spec.n);
    spec.mu_theta = node.value("mu_theta", spec.mu_theta);
    spec.mu_sigma = node.value("mu_sigma", spec.mu_sigma);
    spec.r_theta = node.value("r_theta", spec.r_theta);
    spec.r_sigma = node.value("r_sigma", spec.r_sigma);
    spec.sigma_s = node.value("sigma_s", spec.sigma_s);
    spec.rho1 = node.value("rho1", spec.rho1);
    spec.rho2 = node.value("rho2", spec.rho2);
    spec.n_reps = node.value("n_reps", default_reps);
    spec.seed = node.value("seed", default_seed);
    if (node.contains("regression")) {
        const auto& reg = node.at("regression");
        const auto bt = reg.at("beta_theta").get<std::vector<double>>();
        const auto bs = reg.at("beta_sigma").get<std::vector<double>>();
        RegressionTruth truth;
        truth.beta_theta =
            Eigen::Map<const Eigen::VectorXd>(bt.data(), static_cast<Eigen::Index>(bt.size()));
        truth.beta_sigma =
            Eigen::Map<const Eigen::VectorXd>(bs.data(), static_cast<Eigen::Index>(bs.size()));
        spec.regression = truth;
    }
    return spec;
}

int run_simulate(const SimulateArgs& args, std::uint64_t seed) {
    std::ifstream file(args.config_path);
    if (!file)
        throw ValidationError(Errc::parse_error, "cannot open " + args.config_path);
    json config;
    try {
        file >> config;
    } catch (const json::exception& e) {
        throw ValidationError(Errc::parse_error, args.config_path + ": " + e.what());
    }

    const std::uint64_t default_seed = config.value("seed", seed);
    int default_reps = config.value("n_reps", 100);
    if (args.paper_scale) default_reps = config.value("n_reps", 500);

    StudyOptions options;
    options.threads = args.threads;
    // default chain settings: 3 chains x 5000 iterations, 2000 warmup, lag 10
    options.fit = FitConfig();
    if (args.fast) {
        options.fit = FitConfig::fast_profile();
        options.sigma_s_fix = SigmaSFix::empirical();
    }
    if (config.contains("fit")) {
        const auto& fit = config.at("fit");
        options.fit.chains = fit.value("chains", options.fit.chains);
        options.fit.iterations = fit.value("iterations", options.fit.iterations);
        options.fit.warmup = fit.value("warmup", options.fit.warmup);
        options.fit.thin = fit.value("thin", options.fit.thin);
        options.fit.target_accept = fit.value("target_accept", options.fit.target_accept);
        options.fit.max_tree_depth = fit.value("max_tree_depth", options.fit.max_tree_depth);
        if (fit.contains("priors"))
            options.fit.prior_overrides = fit.at("priors").get<std::map<std::string, double>>();
        if (fit.contains("fix_sigma_s")) {
            const auto& fix = fit.at("fix_sigma_s");
            if (fix.is_number())
                options.sigma_s_fix = SigmaSFix::fixed(fix.get<double>());
            else if (fix.get<std::string>() == "empirical")
                options.sigma_s_fix = SigmaSFix::empirical();
            else if (fix.get<std::string>() == "sampled")
                options.sigma_s_fix = SigmaSFix::sampled();
            else
                throw ValidationError(Errc::invalid_config,
                                      "fit.fix_sigma_s must be 'sampled', 'empirical', or a number");
        }
    }
    options.fit.validate();

    std::vector<ScenarioSpec> specs;
    if (!config.contains("scenarios") || !config.at("scenarios").is_array() ||
        config.at("scenarios").empty())
        throw ValidationError(Errc::schema_error, "config needs a non-empty 'scenarios' array");
    for (const auto& node : config.at("scenarios"))
        specs.push_back(scenario_from_json(node, default_seed, default_reps));

    if (args.theta_recovery) {
        const auto rows = theta_recovery_report(specs.front(), options, args.rep_index);
        save_theta_recovery_csv(rows, args.out.empty() ? "theta_recovery.csv" : args.out);
        return kExitOk;
    }

    std::vector<Method> methods;
    if (config.contains("methods"))
        for (const auto& name : config.at("methods"))
            methods.push_back(method_from_name(name.get<std::string>()));
    else
        methods = {Method::raw, Method::weighted, Method::trimmed, Method::ubm, Method::bbm};

    const StudyMetrics metrics = run_study(specs, methods, options);
    const std::string out = args.out.empty() ? "metrics.csv" : args.out;
    save_metrics_csv(metrics, out);
    if (!args.estimates_out.empty()) save_estimates_csv(metrics, args.estimates_out);
    std::cout << "wrote " << out << " (" << metrics.rows.size() << " rows)\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"combine point estimates and their uncertainties from multiple sources"};
    app.require_subcommand(1);

    std::uint64_t seed = kDefaultSeed;
    std::string format = "csv";
    app.add_option("--seed", seed, "seed for all randomized steps")->capture_default_str();
    app.add_option("--format", format, "table output format")
        ->check(CLI::IsMember({"csv", "json"}))
        ->capture_default_str();

    EstimateArgs estimate_args;
    auto* estimate = app.add_subcommand("estimate", "classical estimators with intervals");
    estimate->add_option("--data", estimate_args.data_path, "input CSV")->required();
    estimate->add_option("--method", estimate_args.method, "raw|weighted|trimmed|all")
        ->check(CLI::IsMember({"raw", "weighted", "trimmed", "lr", "wlr", "twlr", "all"}))
        ->capture_default_str();
    estimate->add_flag("--covariates", estimate_args.covariates,
                       "fit regressions (lr/wlr/twlr) on the x columns");
    estimate->add_option("--trim-factor", estimate_args.trim_factor)->capture_default_str();
    estimate->add_option("--bootstrap", estimate_args.bootstrap, "bootstrap resamples for CIs")
        ->capture_default_str();
    estimate->add_option("--out", estimate_args.out, "output table path (stdout if omitted)");
    estimate->add_option("--weights-out", estimate_args.weights_out,
                         "standardized weight table (defaults to <out>.weights.csv)");

    FitArgs ubm_args, bbm_args;
    auto add_fit_options = [](CLI::App* cmd, FitArgs& args) {
        cmd->add_option("--data", args.data_path, "input CSV")->required();
        cmd->add_option("--out", args.out, "draw file base path")->required();
        cmd->add_option("--chains", args.config.chains)->capture_default_str();
        cmd->add_option("--iter", args.config.iterations)->capture_default_str();
        cmd->add_option("--warmup", args.config.warmup)->capture_default_str();
        cmd->add_option("--thin", args.config.thin)->capture_default_str();
        cmd->add_option("--target-accept", args.config.target_accept)->capture_default_str();
        cmd->add_option("--max-depth", args.config.max_tree_depth)->capture_default_str();
        cmd->add_option("--prior", args.priors, "prior override name=value (repeatable)");
    };
    auto* fit_ubm_cmd = app.add_subcommand("fit-ubm", "fit the univariate hierarchy");
    add_fit_options(fit_ubm_cmd, ubm_args);
    double fix_tau_value = 0.0;
    auto* fix_tau_opt =
        fit_ubm_cmd->add_option("--fix-tau", fix_tau_value, "hold tau fixed at this value");

    auto* fit_bbm_cmd = app.add_subcommand("fit-bbm", "fit the bivariate hierarchy");
    add_fit_options(fit_bbm_cmd, bbm_args);
    fit_bbm_cmd->add_option("--fix-sigma-s", bbm_args.fix_sigma_s,
                            "'empirical' or a number; removes sigma_s from sampling");

    PpcArgs ppc_args;
    auto* ppc = app.add_subcommand("ppc", "posterior predictive check of a bivariate fit");
    ppc->add_option("--data", ppc_args.data_path, "input CSV")->required();
    ppc->add_option("--draws", ppc_args.draws_base, "draw file base path")->required();
    ppc->add_option("--out", ppc_args.out, "JSON result path (stdout if omitted)");
    ppc->add_option("--t-out", ppc_args.t_out, "per-draw discrepancy CSV");

    WeightsArgs weights_args;
    auto* weights = app.add_subcommand("weights", "standardized per-source weights");
    weights->add_option("--data", weights_args.data_path, "input CSV")->required();
    weights->add_option("--method", weights_args.method, "weighted|trimmed|ubm|bbm")->required();
    weights->add_option("--draws", weights_args.draws_base, "draw file base (ubm/bbm)");
    weights->add_option("--out", weights_args.out, "output table path (stdout if omitted)");

    SimulateArgs simulate_args;
    auto* simulate = app.add_subcommand("simulate", "synthetic comparison studies");
    simulate->add_option("--config", simulate_args.config_path, "scenario JSON")->required();
    simulate->add_option("--out", simulate_args.out, "metrics CSV path");
    simulate->add_option("--estimates-out", simulate_args.estimates_out,
                         "long-format per-replicate CSV");
    simulate->add_flag("--fast", simulate_args.fast,
                       "2x1500/500 chains, thin 1, empirical sigma_s");
    simulate->add_flag("--paper-scale", simulate_args.paper_scale, "500 replicates by default");
    simulate->add_flag("--theta-recovery", simulate_args.theta_recovery,
                       "write the source-level recovery table for the first scenario");
    simulate->add_option("--rep", simulate_args.rep_index, "replicate index for --theta-recovery");
    simulate->add_option("--threads", simulate_args.threads, "worker threads (0 = all cores)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitValidation;
    }

    try {
        if (*estimate) return run_estimate(estimate_args, seed, format);
        if (*fit_ubm_cmd) {
            ubm_args.config.seed = seed;
            if (fix_tau_opt->count() > 0) ubm_args.fix_tau = fix_tau_value;
            return run_fit(ubm_args, false);
        }
        if (*fit_bbm_cmd) {
            bbm_args.config.seed = seed;
            return run_fit(bbm_args, true);
        }
        if (*ppc) {
            std::optional<std::uint64_t> override;
            if (app.count("--seed") > 0) override = seed;
            return run_ppc(ppc_args, override);
        }
        if (*weights) return run_weights(weights_args, seed, format);
        if (*simulate) return run_simulate(simulate_args, seed);
        std::cerr << "error: no subcommand\n";
        return kExitValidation;
    } catch (const SamplerError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitSampler;
    } catch (const InternalError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInternal;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInternal;
    }
}
