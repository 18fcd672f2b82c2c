#include "metapool/errors.hpp"

namespace metapool {

const char* errc_name(Errc code) {
    switch (code) {
        case Errc::non_positive_uncertainty: return "NonPositiveUncertainty";
        case Errc::non_finite_value: return "NonFiniteValue";
        case Errc::duplicate_source_id: return "DuplicateSourceId";
        case Errc::covariate_dimension_mismatch: return "CovariateDimensionMismatch";
        case Errc::too_few_sources: return "TooFewSources";
        case Errc::domain_violation: return "DomainViolation";
        case Errc::parse_error: return "ParseError";
        case Errc::schema_error: return "SchemaError";
        case Errc::empty_dataset: return "EmptyDataset";
        case Errc::no_variance: return "NoVariance";
        case Errc::rank_deficient_design: return "RankDeficientDesign";
        case Errc::invalid_scale: return "InvalidScale";
        case Errc::invalid_correlation: return "InvalidCorrelation";
        case Errc::negative_argument: return "NegativeArgument";
        case Errc::degenerate_uncertainty: return "DegenerateUncertainty";
        case Errc::non_finite_density: return "NonFiniteDensity";
        case Errc::missing_parameter: return "MissingParameter";
        case Errc::missing_draws_file: return "MissingDrawsFile";
        case Errc::insufficient_draws: return "InsufficientDraws";
        case Errc::invalid_config: return "InvalidConfig";
        case Errc::initialization_failure: return "InitializationFailure";
        case Errc::sampler_diverged: return "SamplerDiverged";
        case Errc::internal: return "InternalError";
    }
    return "UnknownError";
}

}  // namespace metapool
