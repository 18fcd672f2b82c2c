#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

namespace metapool {

// One source's contribution: a point estimate y, its estimated standard
// error s, and (optionally) a row of source-level covariates. When
// covariates are present, x[0] is the intercept term (1.0) unless intercept
// prepending was disabled at load time.
struct SourceObservation {
    std::string source_id;
    double y = 0.0;
    double s = 0.0;
    std::vector<double> x;  // empty, or exactly p entries
};

struct Dataset {
    std::vector<SourceObservation> observations;
    int p = 0;                     // covariate count (0 = none)
    bool intercept_added = false;  // x[0] was synthesized at load time

    int n() const { return static_cast<int>(observations.size()); }
    bool has_covariates() const { return p > 0; }

    Eigen::VectorXd y() const;
    Eigen::VectorXd s() const;
    Eigen::VectorXd log_s() const;
    Eigen::MatrixXd design_matrix() const;  // n x p; throws if p == 0
};

// Checks every invariant: s > 0, finite values, unique ids, consistent
// covariate dimension, n >= 2 (n >= p + 2 with covariates). Returns its
// argument so call sites can validate inline.
const Dataset& validate(const Dataset& dataset);

enum class OutcomeTransform { identity, log, logit };

// Maps y through g and propagates the uncertainty by the delta method:
// s' = |g'(y)| * s, with the observed s standing in for the latent scale.
SourceObservation transform_outcome(const SourceObservation& obs, OutcomeTransform kind);
Dataset transform_outcome(const Dataset& dataset, OutcomeTransform kind);

struct LoadOptions {
    // Prepend a column of 1s when any covariate columns exist.
    bool add_intercept = true;
};

// CSV schema: header `source_id,y,s[,x1..xp]`, UTF-8, comma-delimited.
Dataset load_csv(const std::string& path, const LoadOptions& options = {});
void save_csv(const Dataset& dataset, const std::string& path);

}  // namespace metapool
