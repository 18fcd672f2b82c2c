#pragma once

#include <stdexcept>
#include <string>

namespace metapool {

// Stable error identifiers. The CLI maps ValidationError -> exit 2,
// SamplerError -> exit 3, InternalError -> exit 4.
enum class Errc {
    non_positive_uncertainty,
    non_finite_value,
    duplicate_source_id,
    covariate_dimension_mismatch,
    too_few_sources,
    domain_violation,
    parse_error,
    schema_error,
    empty_dataset,
    no_variance,
    rank_deficient_design,
    invalid_scale,
    invalid_correlation,
    negative_argument,
    degenerate_uncertainty,
    non_finite_density,
    missing_parameter,
    missing_draws_file,
    insufficient_draws,
    invalid_config,
    initialization_failure,
    sampler_diverged,
    internal
};

const char* errc_name(Errc code);

class Error : public std::runtime_error {
  public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

    Errc code() const noexcept { return code_; }

  private:
    Errc code_;
};

// Bad inputs: data, configuration, or arguments outside an operation's domain.
class ValidationError : public Error {
  public:
    using Error::Error;
};

// MCMC failures that are not the caller's fault (initialization, hard divergence).
class SamplerError : public Error {
  public:
    using Error::Error;
};

// Broken internal invariants; reaching this is a bug.
class InternalError : public Error {
  public:
    explicit InternalError(const std::string& message) : Error(Errc::internal, message) {}
};

}  // namespace metapool
