#pragma once

#include <set>
#include <stdexcept>
#include <string>

#include "json.hpp"

namespace effecg::detail {

inline void check_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("unknown field '" + key + "' in " + where);
  }
}

/// Leaves `out` alone when the key is absent.
template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("field '") + key + "': " + e.what());
  }
}

}  // namespace effecg::detail
