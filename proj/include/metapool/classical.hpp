#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "metapool/data.hpp"
#include "metapool/rng.hpp"

namespace metapool {

enum class EstimatorKind { raw, weighted, trimmed, lr, wlr, twlr };

const char* estimator_name(EstimatorKind kind);

struct Estimate {
    double point = 0.0;
    double ci_low = 0.0;
    double ci_high = 0.0;
    EstimatorKind method = EstimatorKind::raw;
    std::optional<double> se;
};

struct WeightVector {
    Eigen::VectorXd weights;       // raw positive weights
    Eigen::VectorXd standardized;  // weights / sum(weights); sums to 1
};

WeightVector standardize_weights(const Eigen::VectorXd& weights);

// Unweighted mean with CI = point +- 1.96 sd(y)/sqrt(n).
Estimate raw_mean(const Dataset& dataset);

// Inverse-variance weights 1/s_i^2; the known-variance convention,
// se = (sum 1/s_i^2)^{-1/2}.
std::pair<Estimate, WeightVector> weighted_mean(const Dataset& dataset);

struct TrimmedOptions {
    double trim_factor = 3.0;     // cap at trim_factor * mean(1/s^2)
    int bootstrap_samples = 1000; // source resamples for the percentile CI
    std::uint64_t seed = kDefaultSeed;
};

// Inverse-variance weights capped at trim_factor times their mean,
// with a nonparametric bootstrap percentile CI (weights re-derived
// per resample of sources).
std::pair<Estimate, WeightVector> trimmed_weighted_mean(const Dataset& dataset,
                                                        const TrimmedOptions& options = {});

enum class WeightMode { unweighted, inverse_variance, trimmed };

struct LinearFit {
    std::vector<Estimate> coefficients;  // one per design column
    WeightVector weights;
};

// Weighted least squares (X^T W X)^{-1} X^T W y. Interval conventions:
//   unweighted        OLS, sigma_hat^2 (X^T X)^{-1}
//   inverse_variance  known-variance, (X^T W X)^{-1}
//   trimmed           point from capped weights, bootstrap percentile CI
LinearFit linear_fit(const Dataset& dataset, WeightMode mode, const TrimmedOptions& options = {});

}  // namespace metapool
