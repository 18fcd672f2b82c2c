#include "metapool/data.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "metapool/errors.hpp"
#include "metapool/util.hpp"

namespace metapool {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    std::stringstream stream(line);
    while (std::getline(stream, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    return fields;
}

std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

}  // namespace

Eigen::VectorXd Dataset::y() const {
    Eigen::VectorXd out(n());
    for (int i = 0; i < n(); ++i) out[i] = observations[i].y;
    return out;
}

Eigen::VectorXd Dataset::s() const {
    Eigen::VectorXd out(n());
    for (int i = 0; i < n(); ++i) out[i] = observations[i].s;
    return out;
}

Eigen::VectorXd Dataset::log_s() const {
    Eigen::VectorXd out(n());
    for (int i = 0; i < n(); ++i) out[i] = std::log(observations[i].s);
    return out;
}

Eigen::MatrixXd Dataset::design_matrix() const {
    if (p == 0)
        throw ValidationError(Errc::covariate_dimension_mismatch, "dataset has no covariates");
    Eigen::MatrixXd X(n(), p);
    for (int i = 0; i < n(); ++i)
        for (int j = 0; j < p; ++j) X(i, j) = observations[i].x[static_cast<std::size_t>(j)];
    return X;
}

const Dataset& validate(const Dataset& dataset) {
    std::unordered_set<std::string> seen;
    for (const auto& obs : dataset.observations) {
        if (std::isnan(obs.s) || !std::isfinite(obs.s))
            throw ValidationError(Errc::non_finite_value, "s for source " + obs.source_id);
        if (!(obs.s > 0.0))
            throw ValidationError(Errc::non_positive_uncertainty,
                                  "s must be > 0 for source " + obs.source_id);
        if (!std::isfinite(obs.y))
            throw ValidationError(Errc::non_finite_value, "y for source " + obs.source_id);
        if (static_cast<int>(obs.x.size()) != dataset.p)
            throw ValidationError(Errc::covariate_dimension_mismatch,
                                  "source " + obs.source_id + " has " +
                                      std::to_string(obs.x.size()) + " covariates, expected " +
                                      std::to_string(dataset.p));
        for (double value : obs.x)
            if (!std::isfinite(value))
                throw ValidationError(Errc::non_finite_value, "covariate for source " + obs.source_id);
        if (!seen.insert(obs.source_id).second)
            throw ValidationError(Errc::duplicate_source_id, obs.source_id);
    }
    const int minimum = dataset.p > 0 ? dataset.p + 2 : 2;
    if (dataset.n() < minimum)
        throw ValidationError(Errc::too_few_sources, "need at least " + std::to_string(minimum) +
                                                         " sources, got " +
                                                         std::to_string(dataset.n()));
    return dataset;
}

SourceObservation transform_outcome(const SourceObservation& obs, OutcomeTransform kind) {
    SourceObservation out = obs;
    switch (kind) {
        case OutcomeTransform::identity:
            return out;
        case OutcomeTransform::log:
            if (!(obs.y > 0.0))
                throw ValidationError(Errc::domain_violation,
                                      "log transform requires y > 0 (source " + obs.source_id + ")");
            out.y = std::log(obs.y);
            out.s = obs.s / obs.y;
            return out;
        case OutcomeTransform::logit:
            if (!(obs.y > 0.0 && obs.y < 1.0))
                throw ValidationError(Errc::domain_violation,
                                      "logit transform requires 0 < y < 1 (source " +
                                          obs.source_id + ")");
            out.y = std::log(obs.y / (1.0 - obs.y));
            out.s = obs.s / (obs.y * (1.0 - obs.y));
            return out;
    }
    throw InternalError("unknown outcome transform");
}

Dataset transform_outcome(const Dataset& dataset, OutcomeTransform kind) {
    Dataset out = dataset;
    for (auto& obs : out.observations) obs = transform_outcome(obs, kind);
    return out;
}

Dataset load_csv(const std::string& path, const LoadOptions& options) {
    std::ifstream file(path);
    if (!file) throw ValidationError(Errc::parse_error, "cannot open " + path);

    std::string line;
    if (!std::getline(file, line))
        throw ValidationError(Errc::schema_error, "empty file: " + path);
    const auto header = split_csv_line(strip_cr(line));

    if (header.size() < 3 || header[0] != "source_id" || header[1] != "y" || header[2] != "s") {
        std::string missing = header.size() < 1 || header[0] != "source_id" ? "source_id"
                              : header.size() < 2 || header[1] != "y"       ? "y"
                                                                            : "s";
        throw ValidationError(Errc::schema_error,
                              "header must start with source_id,y,s (missing or misplaced column " +
                                  missing + ")");
    }
    const int raw_covariates = static_cast<int>(header.size()) - 3;
    for (int j = 0; j < raw_covariates; ++j) {
        const std::string expected = "x" + std::to_string(j + 1);
        if (header[static_cast<std::size_t>(j + 3)] != expected)
            throw ValidationError(Errc::schema_error, "expected covariate column " + expected +
                                                          ", got " +
                                                          header[static_cast<std::size_t>(j + 3)]);
    }

    Dataset dataset;
    dataset.intercept_added = raw_covariates > 0 && options.add_intercept;
    dataset.p = raw_covariates > 0 ? raw_covariates + (dataset.intercept_added ? 1 : 0) : 0;

    int line_number = 1;
    while (std::getline(file, line)) {
        ++line_number;
        line = strip_cr(line);
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size())
            throw ValidationError(Errc::parse_error,
                                  "line " + std::to_string(line_number) + ": expected " +
                                      std::to_string(header.size()) + " fields, got " +
                                      std::to_string(fields.size()));
        SourceObservation obs;
        obs.source_id = fields[0];
        bool ok = false;
        obs.y = parse_double(fields[1], ok);
        if (!ok)
            throw ValidationError(Errc::parse_error,
                                  "line " + std::to_string(line_number) + ": bad y value '" +
                                      fields[1] + "'");
        obs.s = parse_double(fields[2], ok);
        if (!ok)
            throw ValidationError(Errc::parse_error,
                                  "line " + std::to_string(line_number) + ": bad s value '" +
                                      fields[2] + "'");
        if (raw_covariates > 0) {
            obs.x.reserve(static_cast<std::size_t>(dataset.p));
            if (dataset.intercept_added) obs.x.push_back(1.0);
            for (int j = 0; j < raw_covariates; ++j) {
                const double value = parse_double(fields[static_cast<std::size_t>(j + 3)], ok);
                if (!ok)
                    throw ValidationError(Errc::parse_error,
                                          "line " + std::to_string(line_number) + ": bad x" +
                                              std::to_string(j + 1) + " value '" +
                                              fields[static_cast<std::size_t>(j + 3)] + "'");
                obs.x.push_back(value);
            }
        }
        dataset.observations.push_back(std::move(obs));
    }
    return dataset;
}

void save_csv(const Dataset& dataset, const std::string& path) {
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw ValidationError(Errc::parse_error, "cannot write " + path);

    // A synthesized intercept column is not written back, so that
    // save -> load round-trips to an identical dataset.
    const int first_covariate = dataset.intercept_added ? 1 : 0;
    file << "source_id,y,s";
    for (int j = first_covariate; j < dataset.p; ++j)
        file << ",x" << (j - first_covariate + 1);
    file << "\n";
    for (const auto& obs : dataset.observations) {
        file << obs.source_id << ',' << format_double(obs.y) << ',' << format_double(obs.s);
        for (int j = first_covariate; j < dataset.p; ++j)
            file << ',' << format_double(obs.x[static_cast<std::size_t>(j)]);
        file << "\n";
    }
    if (!file) throw ValidationError(Errc::parse_error, "write failed: " + path);
}

}  // namespace metapool
