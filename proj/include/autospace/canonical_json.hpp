#pragma once

#include <string>

#include <nlohmann/json_fwd.hpp>

namespace autospace {

/// Sorted keys, floats with 9 significant digits, two-space indentation
/// when `pretty`. Byte-stable for equal documents.
std::string to_canonical_json(const nlohmann::json& j, bool pretty = true);

/// FNV-1a 64-bit, rendered as 16 lowercase hex digits.
std::string content_hash(const std::string& bytes);

}  // namespace autospace
