#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numbers>

#include "metapool/bbm.hpp"
#include "metapool/densities.hpp"
#include "metapool/errors.hpp"
#include "metapool/rng.hpp"
#include "metapool/simulation.hpp"
#include "metapool/ubm.hpp"
#include "metapool/util.hpp"
#include "oracles.hpp"

using namespace metapool;

namespace {

Dataset from_ys(const std::vector<double>& y, const std::vector<double>& s) {
    Dataset d;
    for (std::size_t i = 0; i < y.size(); ++i)
        d.observations.push_back({"src_" + std::to_string(i + 1), y[i], s[i], {}});
    return d;
}

// A random but internally consistent parameter setting for a dataset.
BbmParams random_params(Rng& rng, const Dataset& d, double rho1, double rho2) {
    BbmParams params;
    const int p = d.p > 0 ? d.p : 1;
    params.beta_theta = Eigen::VectorXd::Zero(p);
    params.beta_sigma = Eigen::VectorXd::Zero(p);
    for (int j = 0; j < p; ++j) {
        params.beta_theta[j] = rng.normal() * 2;
        params.beta_sigma[j] = rng.normal() * 0.5;
    }
    params.r_theta = std::exp(rng.uniform(-1, 1.5));
    params.r_sigma = std::exp(rng.uniform(-1, 1));
    params.rho1 = rho1;
    params.rho2 = rho2;
    params.sigma_s = Eigen::VectorXd::NullaryExpr(
        d.n(), [&](Eigen::Index) { return std::exp(rng.uniform(-1, 1)); });
    params.theta = Eigen::VectorXd::NullaryExpr(d.n(), [&](Eigen::Index) { return rng.normal() * 3; });
    params.log_sigma =
        Eigen::VectorXd::NullaryExpr(d.n(), [&](Eigen::Index) { return rng.uniform(-1, 1.5); });
    return params;
}

Dataset random_dataset(Rng& rng, int n, int p = 0) {
    Dataset d;
    d.p = p;
    d.intercept_added = p > 0;
    for (int i = 0; i < n; ++i) {
        SourceObservation obs;
        obs.source_id = "src_" + std::to_string(i + 1);
        obs.y = rng.normal() * 4;
        obs.s = std::exp(rng.uniform(-1, 1.5));
        if (p > 0) {
            obs.x = {1.0};
            for (int j = 1; j < p; ++j) obs.x.push_back(rng.normal());
        }
        d.observations.push_back(std::move(obs));
    }
    return d;
}

}  // namespace

TEST_CASE("conditional law of y given its reported uncertainty") {
    SUBCASE("zero correlation decouples the pair") {
        const auto summary = bbm_conditional_y(0.7, 2.0, std::log(1.5), 0.9, 0.0);
        CHECK(summary.mean == doctest::Approx(2.0));
        CHECK(summary.sd == doctest::Approx(1.5));
    }
    SUBCASE("zero residual keeps the latent mean for any correlation") {
        for (double rho : {-0.8, -0.2, 0.5, 0.9}) {
            const auto summary = bbm_conditional_y(std::log(2.0), 3.0, std::log(2.0), 1.0, rho);
            CHECK(summary.mean == doctest::Approx(3.0));
        }
    }
    SUBCASE("hand instance") {
        // theta 0, rho 0.5, sigma 2, sigma_s 1, log s - log sigma = 1
        const double log_sigma = 0.4;
        const auto summary =
            bbm_conditional_y(log_sigma + 1.0, 0.0, log_sigma, 1.0, 0.5);
        const double sigma = std::exp(log_sigma);
        CHECK(summary.mean == doctest::Approx(0.5 * sigma).epsilon(1e-12));
        CHECK(summary.sd == doctest::Approx(sigma * std::sqrt(0.75)).epsilon(1e-12));
        // the spec instance with sigma = 2 exactly
        const auto direct = bbm_conditional_y(std::log(2.0) + 1.0, 0.0, std::log(2.0), 1.0, 0.5);
        CHECK(direct.mean == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(direct.sd == doctest::Approx(std::sqrt(3.0)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(bbm_conditional_y(0, 0, 0, 1.0, 1.0), ValidationError);
    CHECK_THROWS_AS(bbm_conditional_y(0, 0, 0, 0.0, 0.5), ValidationError);
}

TEST_CASE("population mean, closed form") {
    Rng rng(1001);
    SUBCASE("zero correlations reduce to the univariate closed form exactly") {
        for (int trial = 0; trial < 50; ++trial) {
            Dataset d = random_dataset(rng, 8);
            BbmParams params = random_params(rng, d, 0.0, 0.0);
            const auto bivariate = bbm_mu_theta_closed(d, params);
            const auto univariate =
                ubm_mu_closed(d, params.r_theta, params.log_sigma.array().exp().matrix());
            CHECK(bivariate.mean == doctest::Approx(univariate.mean).epsilon(1e-13));
            CHECK(bivariate.sd == doctest::Approx(univariate.sd).epsilon(1e-13));
        }
    }
    SUBCASE("vanishing residuals leave only the variance inflation") {
        Dataset d = random_dataset(rng, 6);
        BbmParams params = random_params(rng, d, 0.6, -0.4);
        // force log s_i = log sigma_i and log sigma_i = mu_sigma
        params.log_sigma.setConstant(params.mu_sigma());
        for (auto& obs : d.observations) obs.s = std::exp(params.mu_sigma());
        const auto bivariate = bbm_mu_theta_closed(d, params);
        // equivalent univariate fit with deflated variance components
        const double sigma = std::exp(params.mu_sigma());
        const Eigen::VectorXd sigma_deflated = Eigen::VectorXd::Constant(
            d.n(), sigma * std::sqrt(1.0 - params.rho1 * params.rho1));
        const double r_deflated =
            params.r_theta * std::sqrt(1.0 - params.rho2 * params.rho2);
        const auto univariate = ubm_mu_closed(d, r_deflated, sigma_deflated);
        CHECK(bivariate.mean == doctest::Approx(univariate.mean).epsilon(1e-12));
        CHECK(bivariate.sd == doctest::Approx(univariate.sd).epsilon(1e-12));
    }
    SUBCASE("symmetric two-source hand instance") {
        Dataset d = from_ys({0, 4}, {1, 1});
        BbmParams params;
        params.beta_theta = Eigen::VectorXd::Zero(1);
        params.beta_sigma = Eigen::VectorXd::Zero(1);  // mu_sigma = 0 = log sigma
        params.r_theta = 1.0;
        params.r_sigma = 1.0;
        params.rho1 = 0.5;
        params.rho2 = 0.5;
        params.sigma_s = Eigen::VectorXd::Ones(2);
        params.theta = Eigen::VectorXd::Zero(2);
        params.log_sigma = Eigen::VectorXd::Zero(2);  // sigma = 1 = s
        const auto summary = bbm_mu_theta_closed(d, params);
        CHECK(summary.mean == doctest::Approx(2.0).epsilon(1e-12));
    }
    SUBCASE("precision weights are bounded by each variance component") {
        for (int trial = 0; trial < 50; ++trial) {
            Dataset d = random_dataset(rng, 7);
            BbmParams params =
                random_params(rng, d, rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9));
            const auto weights = bbm_shrinkage_weights(d, params);
            const double level2 =
                params.r_theta * params.r_theta * (1.0 - params.rho2 * params.rho2);
            for (int i = 0; i < d.n(); ++i) {
                const double sigma = std::exp(params.log_sigma[i]);
                const double level1 = sigma * sigma * (1.0 - params.rho1 * params.rho1);
                CHECK(weights.xi[i] <= 1.0 / level2 + 1e-12);
                CHECK(weights.xi[i] <= 1.0 / level1 + 1e-12);
                CHECK(weights.zeta[i] > 0.0);
                CHECK(weights.zeta[i] < 1.0);
            }
        }
    }
}

TEST_CASE("regression coefficients, closed form") {
    Rng rng(2002);
    SUBCASE("intercept-only design equals the scalar closed form") {
        Dataset d = random_dataset(rng, 6, 1);
        BbmParams params = random_params(rng, d, 0.3, -0.5);
        const auto vector_summary = bbm_beta_theta_closed(d, params);
        const auto scalar_summary = bbm_mu_theta_closed(d, params);
        CHECK(vector_summary.mean[0] == doctest::Approx(scalar_summary.mean).epsilon(1e-12));
        CHECK(std::sqrt(vector_summary.covariance(0, 0)) ==
              doctest::Approx(scalar_summary.sd).epsilon(1e-12));
    }
    SUBCASE("zero correlations reduce to the univariate regression") {
        for (int trial = 0; trial < 20; ++trial) {
            Dataset d = random_dataset(rng, 9, 2);
            BbmParams params = random_params(rng, d, 0.0, 0.0);
            const auto bivariate = bbm_beta_theta_closed(d, params);
            const auto univariate =
                ubm_beta_closed(d, params.r_theta, params.log_sigma.array().exp().matrix());
            CHECK(bivariate.mean[0] == doctest::Approx(univariate.mean[0]).epsilon(1e-12));
            CHECK(bivariate.mean[1] == doctest::Approx(univariate.mean[1]).epsilon(1e-12));
        }
    }
    SUBCASE("matches an independent weighted normal-equations solve") {
        Dataset d = random_dataset(rng, 10, 2);
        BbmParams params = random_params(rng, d, 0.4, 0.6);
        const auto summary = bbm_beta_theta_closed(d, params);
        const auto weights = bbm_shrinkage_weights(d, params);
        const Eigen::VectorXd expected = oracles::wls_normal_equations(
            d.design_matrix(), weights.xi, weights.y_adjusted);
        CHECK(summary.mean[0] == doctest::Approx(expected[0]).epsilon(1e-8));
        CHECK(summary.mean[1] == doctest::Approx(expected[1]).epsilon(1e-8));
    }
}

TEST_CASE("source mean, closed form") {
    SUBCASE("zero correlations reduce to the univariate shrinkage") {
        Rng rng(3003);
        for (int trial = 0; trial < 50; ++trial) {
            BbmParams params;
            params.beta_theta = Eigen::VectorXd::Constant(1, rng.normal());
            params.beta_sigma = Eigen::VectorXd::Constant(1, rng.normal() * 0.3);
            params.r_theta = std::exp(rng.uniform(-1, 1));
            params.r_sigma = 1.0;
            params.rho1 = 0.0;
            params.rho2 = 0.0;
            const double log_sigma = rng.uniform(-1, 1);
            const double y = rng.normal() * 4;
            const auto bivariate = bbm_theta_closed(y, rng.normal(), params.mu_theta(),
                                                     params.mu_sigma(), params, log_sigma, 1.0);
            const auto univariate =
                ubm_theta_closed(y, params.mu_theta(), params.r_theta, std::exp(log_sigma));
            CHECK(bivariate.mean == doctest::Approx(univariate.mean).epsilon(1e-13));
            CHECK(bivariate.sd == doctest::Approx(univariate.sd).epsilon(1e-13));
        }
    }
    SUBCASE("vanishing sigma keeps the direct estimate") {
        BbmParams params;
        params.beta_theta = Eigen::VectorXd::Zero(1);
        params.beta_sigma = Eigen::VectorXd::Zero(1);
        params.r_theta = 1.0;
        params.r_sigma = 1.0;
        params.rho1 = 0.5;
        params.rho2 = 0.3;
        const auto summary = bbm_theta_closed(4.0, 0.2, 0.0, 0.0, params, std::log(1e-8), 1.0);
        CHECK(summary.mean == doctest::Approx(4.0).epsilon(1e-6));
    }
    SUBCASE("symmetric hand instance shrinks halfway") {
        BbmParams params;
        params.beta_theta = Eigen::VectorXd::Zero(1);
        params.beta_sigma = Eigen::VectorXd::Zero(1);
        params.r_theta = 1.0;
        params.r_sigma = 1.0;
        params.rho1 = 0.0;
        params.rho2 = 0.0;
        const auto summary = bbm_theta_closed(4.0, 0.0, 0.0, 0.0, params, 0.0, 1.0);
        CHECK(summary.mean == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(summary.sd == doctest::Approx(std::sqrt(0.5)).epsilon(1e-12));
    }
}

TEST_CASE("joint log posterior") {
    Rng rng(4004);
    const PriorSettings priors;

    SUBCASE("gradient matches central finite differences") {
        for (int p : {0, 3}) {
            Dataset d = random_dataset(rng, 8, p);
            BbmModel model(d, priors);
            Eigen::VectorXd grad(model.dim());
            for (int point = 0; point < 10; ++point) {
                Eigen::VectorXd z(model.dim());
                for (int i = 0; i < model.dim(); ++i) z[i] = rng.uniform(-1.2, 1.2);
                const double logp = model.logpdf_grad(z, grad);
                REQUIRE(std::isfinite(logp));
                const Eigen::VectorXd fd = oracles::finite_difference_gradient(
                    [&](const Eigen::VectorXd& v) {
                        Eigen::VectorXd g(model.dim());
                        return model.logpdf_grad(v, g);
                    },
                    z, 1e-5);
                for (int i = 0; i < model.dim(); ++i) {
                    const double scale = std::max({1.0, std::abs(grad[i]), std::abs(fd[i])});
                    CHECK(std::abs(grad[i] - fd[i]) / scale < 1e-5);
                }
            }
        }
    }

    SUBCASE("zero correlations factorize into two univariate hierarchies") {
        Dataset d = random_dataset(rng, 6);
        BbmModel model(d, priors);
        Eigen::VectorXd z(model.dim());
        for (int i = 0; i < model.dim(); ++i) z[i] = rng.uniform(-1, 1);
        const int n = d.n();
        z[2] = 0.0;  // atanh rho1... layout: mu_theta, mu_sigma at 0,1
        // scale block starts after the two means
        const int scale = 2;
        z[scale + 2] = 0.0;  // rho1
        z[scale + 3] = 0.0;  // rho2

        Eigen::VectorXd grad(model.dim());
        const double joint = model.logpdf_grad(z, grad);

        const double mu_theta = z[0], mu_sigma = z[1];
        const double r_theta = std::exp(z[scale]), r_sigma = std::exp(z[scale + 1]);
        double expected = 0.0;
        for (int i = 0; i < n; ++i) {
            const double q = std::exp(z[scale + 4 + i]);
            const double u = z[scale + 4 + n + i];
            const double w = z[scale + 4 + 2 * n + i];
            const double theta = mu_theta + r_theta * u;
            const double lambda = mu_sigma + r_sigma * w;
            expected += normal_logpdf(d.observations[i].y, theta, std::exp(lambda));
            expected += normal_logpdf(std::log(d.observations[i].s), lambda, q);
            expected += normal_logpdf(u, 0, 1) + normal_logpdf(w, 0, 1);
            expected += half_cauchy_logpdf(q, priors.hc_sigma_s) + z[scale + 4 + i];
        }
        expected += half_cauchy_logpdf(r_theta, priors.hc_r_theta) + z[scale];
        expected += half_cauchy_logpdf(r_sigma, priors.hc_r_sigma) + z[scale + 1];
        expected += -std::numbers::ln2;                       // uniform prior on rho1
        expected += lkj_corr2_logpdf(0.0, priors.lkj_eta);    // LKJ at rho2 = 0
        CHECK(joint == doctest::Approx(expected).epsilon(1e-10));
    }

    SUBCASE("density is invariant under source permutation") {
        Dataset d = random_dataset(rng, 5);
        BbmModel model(d, priors);
        Eigen::VectorXd z(model.dim());
        for (int i = 0; i < model.dim(); ++i) z[i] = rng.uniform(-1, 1);
        Eigen::VectorXd grad(model.dim());
        const double base = model.logpdf_grad(z, grad);

        // rotate the sources and the per-source coordinates by one
        Dataset rotated = d;
        std::rotate(rotated.observations.begin(), rotated.observations.begin() + 1,
                    rotated.observations.end());
        BbmModel rotated_model(rotated, priors);
        Eigen::VectorXd zr = z;
        const int n = d.n();
        for (int block = 0; block < 3; ++block) {
            const int offset = 6 + block * n;
            for (int i = 0; i < n; ++i) zr[offset + i] = z[offset + (i + 1) % n];
        }
        const double rotated_value = rotated_model.logpdf_grad(zr, grad);
        CHECK(rotated_value == doctest::Approx(base).epsilon(1e-12));
    }

    SUBCASE("density falls off along every unconstrained scale coordinate") {
        Dataset d = random_dataset(rng, 5);
        BbmModel model(d, priors);
        Eigen::VectorXd z = Eigen::VectorXd::Zero(model.dim());
        Eigen::VectorXd grad(model.dim());
        const double base = model.logpdf_grad(z, grad);
        std::vector<int> scale_coords{2, 3};  // log r_theta, log r_sigma
        for (int i = 0; i < d.n(); ++i) scale_coords.push_back(6 + i);  // log sigma_s_i
        for (int coord : scale_coords) {
            for (double extreme : {-30.0, 30.0}) {
                Eigen::VectorXd probe = z;
                probe[coord] = extreme;
                const double value = model.logpdf_grad(probe, grad);
                CHECK(value < base - 10.0);
            }
        }
    }

    SUBCASE("non-finite coordinates are reported with their index") {
        Dataset d = random_dataset(rng, 4);
        BbmModel model(d, priors);
        Eigen::VectorXd z = Eigen::VectorXd::Zero(model.dim());
        z[3] = std::numeric_limits<double>::quiet_NaN();
        Eigen::VectorXd grad(model.dim());
        try {
            model.logpdf_grad(z, grad);
            FAIL("expected NonFiniteDensity");
        } catch (const ValidationError& e) {
            CHECK(e.code() == Errc::non_finite_density);
            CHECK(std::string(e.what()).find("3") != std::string::npos);
        }
    }

    SUBCASE("free function checks the layout length") {
        Dataset d = random_dataset(rng, 4);
        Eigen::VectorXd grad;
        CHECK_THROWS_AS(bbm_log_posterior(d, Eigen::VectorXd::Zero(3), priors, grad),
                        ValidationError);
    }
}

TEST_CASE("empirical fixing of sigma_s") {
    SUBCASE("sample sd of log s with the n-1 divisor") {
        const auto v = set_sigma_s_empirical(from_ys({1, 1}, {1.0, std::exp(2.0)}));
        CHECK(v.size() == 2);
        CHECK(v[0] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
        CHECK(v[1] == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
    }
    SUBCASE("degenerate spread is rejected") {
        try {
            set_sigma_s_empirical(from_ys({1, 2, 3}, {1, 1, 1}));
            FAIL("expected DegenerateUncertainty");
        } catch (const ValidationError& e) {
            CHECK(e.code() == Errc::degenerate_uncertainty);
        }
    }
    SUBCASE("too few sources") {
        CHECK_THROWS_AS(set_sigma_s_empirical(from_ys({1}, {1})), ValidationError);
    }
}

TEST_CASE("full Bayesian fit") {
    ScenarioSpec spec;
    spec.id = "bbm-unit";
    spec.n = 30;
    spec.rho1 = 0.5;
    spec.rho2 = 0.5;
    spec.seed = 777;
    const auto [dataset, truth] = generate_dataset(spec, 0);

    FitConfig config;
    config.chains = 2;
    config.iterations = 900;
    config.warmup = 400;
    config.thin = 1;
    config.seed = 2468;

    SUBCASE("draw columns follow the documented layout and stay in range") {
        const PosteriorDraws draws = fit_bbm(dataset, config);
        CHECK(draws.parameter_names[0] == "mu_theta");
        CHECK(draws.parameter_names[1] == "mu_sigma");
        CHECK(draws.parameter_names[2] == "r_theta");
        CHECK(draws.parameter_names[5] == "rho2");
        CHECK(draws.index_of("sigma_s_1") == 6);
        CHECK(draws.index_of("theta_1") == 6 + spec.n);
        CHECK(draws.index_of("log_sigma_1") == 6 + 2 * spec.n);
        CHECK(draws.dim() == 6 + 3 * spec.n);

        for (const auto& name : {"r_theta", "r_sigma", "sigma_s_1", "sigma_s_30"})
            CHECK(draws.merged(name).minCoeff() > 0.0);
        for (const auto& name : {"rho1", "rho2"}) {
            CHECK(draws.merged(name).minCoeff() > -1.0);
            CHECK(draws.merged(name).maxCoeff() < 1.0);
        }
        // posterior mean of the population mean lands near the truth
        CHECK(std::abs(draws.mean("mu_theta") - truth.mu_theta) < 4 * draws.sd("mu_theta"));
    }

    SUBCASE("empirical sigma_s fixing removes those columns") {
        const PosteriorDraws draws = fit_bbm(dataset, config, SigmaSFix::empirical());
        CHECK_THROWS_AS(draws.index_of("sigma_s_1"), ValidationError);
        CHECK(draws.dim() == 6 + 2 * spec.n);
        REQUIRE(draws.fixed_sigma_s.has_value());
        CHECK((*draws.fixed_sigma_s)[0] ==
              doctest::Approx(set_sigma_s_empirical(dataset)[0]).epsilon(1e-12));
        CHECK(draws.index_of("theta_1") == 6);
    }

    SUBCASE("fixed seed reproduces draws exactly") {
        FitConfig small = config;
        small.iterations = 400;
        small.warmup = 150;
        const PosteriorDraws first = fit_bbm(dataset, small);
        const PosteriorDraws second = fit_bbm(dataset, small);
        for (int c = 0; c < first.n_chains(); ++c) CHECK(first.chains[c] == second.chains[c]);
    }

    SUBCASE("draw extraction round-trips the parameter layout") {
        const PosteriorDraws draws = fit_bbm(dataset, config, SigmaSFix::fixed(1.0));
        const BbmParams params = bbm_params_from_draw(dataset, draws, 17);
        CHECK(params.sigma_s[0] == 1.0);
        CHECK(params.beta_theta.size() == 1);
        CHECK(params.theta.size() == spec.n);
        // values match the named columns of the same draw
        CHECK(params.r_theta == draws.chains[0](17, draws.index_of("r_theta")));
        CHECK(params.theta[4] == draws.chains[0](17, draws.index_of("theta_5")));
    }

    SUBCASE("too few sources is rejected") {
        Dataset tiny = from_ys({1, 2}, {1, 1});
        CHECK_THROWS_AS(fit_bbm(tiny, config), ValidationError);
    }
}
