#include "autospace/canonical_json.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace autospace {

namespace {

void emit(const nlohmann::json& j, bool pretty, int depth, std::string& out) {
  auto newline = [&](int d) {
    if (!pretty) return;
    out.push_back('\n');
    out.append(static_cast<std::size_t>(2 * d), ' ');
  };
  switch (j.type()) {
    case nlohmann::json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out.push_back('{');
      bool first = true;
      for (const auto& [key, value] : j.items()) {  // std::map keeps keys sorted
        if (!first) out.push_back(',');
        first = false;
        newline(depth + 1);
        out += nlohmann::json(key).dump();
        out += pretty ? ": " : ":";
        emit(value, pretty, depth + 1, out);
      }
      newline(depth);
      out.push_back('}');
      return;
    }
    case nlohmann::json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      out.push_back('[');
      bool first = true;
      for (const auto& value : j) {
        if (!first) out.push_back(',');
        first = false;
        newline(depth + 1);
        emit(value, pretty, depth + 1, out);
      }
      newline(depth);
      out.push_back(']');
      return;
    }
    case nlohmann::json::value_t::number_float: {
      const double v = j.get<double>();
      if (!std::isfinite(v)) throw std::invalid_argument("canonical json: non-finite number");
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.9g", v);
      out += buf;
      return;
    }
    default:
      out += j.dump();
  }
}

}  // namespace

std::string to_canonical_json(const nlohmann::json& j, bool pretty) {
  std::string out;
  emit(j, pretty, 0, out);
  if (pretty) out.push_back('\n');
  return out;
}

std::string content_hash(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace autospace
