#pragma once

#include <map>
#include <optional>
#include <string>

#include "rds/types.hpp"

namespace rds {

/// Sectioned key = value config. Unknown sections or keys are hard errors;
/// a silent typo must not change an experiment.
class RunConfig {
 public:
  static RunConfig parse_file(const std::string& path);
  static RunConfig parse_string(const std::string& text);

  bool has(const std::string& section, const std::string& key) const;
  std::string get(const std::string& section, const std::string& key,
                  const std::string& fallback) const;
  double get_double(const std::string& section, const std::string& key, double fallback) const;
  long get_int(const std::string& section, const std::string& key, long fallback) const;
  bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

  void set(const std::string& section, const std::string& key, const std::string& value);

  /// Every effective key/value, for the manifest.
  std::string dump() const;

 private:
  void validate() const;
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

}  // namespace rds
