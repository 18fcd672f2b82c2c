#pragma once

// Minimal JSON-Schema checker for the subset used by docs/schemas: "type"
// (string or list), "required", "properties", "items". Enough to verify the
// CLI's JSON outputs against the shipped schemas.

#include <string>

#include <nlohmann/json.hpp>

namespace json_schema {

inline bool type_matches(const nlohmann::json& value, const std::string& type) {
    if (type == "object") return value.is_object();
    if (type == "array") return value.is_array();
    if (type == "string") return value.is_string();
    if (type == "integer") return value.is_number_integer() || value.is_number_unsigned();
    if (type == "number") return value.is_number();
    if (type == "boolean") return value.is_boolean();
    if (type == "null") return value.is_null();
    return false;
}

inline bool validate(const nlohmann::json& value, const nlohmann::json& schema,
                     std::string& error, const std::string& path = "$") {
    if (schema.contains("type")) {
        const auto& type = schema.at("type");
        bool ok = false;
        if (type.is_string()) {
            ok = type_matches(value, type.get<std::string>());
        } else if (type.is_array()) {
            for (const auto& option : type)
                if (type_matches(value, option.get<std::string>())) ok = true;
        }
        if (!ok) {
            error = path + ": type mismatch (expected " + type.dump() + ")";
            return false;
        }
    }
    if (schema.contains("required")) {
        for (const auto& key : schema.at("required")) {
            if (!value.contains(key.get<std::string>())) {
                error = path + ": missing required key " + key.get<std::string>();
                return false;
            }
        }
    }
    if (schema.contains("properties") && value.is_object()) {
        for (const auto& [key, sub] : schema.at("properties").items()) {
            if (!value.contains(key)) continue;
            if (!validate(value.at(key), sub, error, path + "." + key)) return false;
        }
    }
    if (schema.contains("items") && value.is_array()) {
        int index = 0;
        for (const auto& element : value) {
            if (!validate(element, schema.at("items"), error,
                          path + "[" + std::to_string(index) + "]"))
                return false;
            ++index;
        }
    }
    return true;
}

}  // namespace json_schema
