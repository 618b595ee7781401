#include "rds/run_config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace rds {

namespace {

const std::map<std::string, std::set<std::string>>& schema() {
  static const std::map<std::string, std::set<std::string>> s = {
      {"run", {"seed", "threads", "out"}},
      {"target", {"name", "d", "cov_setting", "h", "a", "beta_temp"}},
      {"schedule", {"scheme", "T", "K", "sigma", "beta_min", "beta_max", "integrator"}},
      {"reference",
       {"kind", "J", "cov_type", "t_lim", "ebm_epochs", "ebm_lr", "ebm_batch", "ebm_chains",
        "ebm_mcmc_steps", "ebm_swap_every", "ebm_keep_last", "ebm_accum"}},
      {"training",
       {"family", "loss", "N", "B", "lr", "target_informed", "trace_mode_weights_every"}},
      {"dataset", {"chains_per_mode", "warmup", "n_total", "init_step", "target_rate"}},
      {"baseline",
       {"kind", "levels", "particles", "steps_per_level", "chains", "swap_every", "total_steps",
        "warmup", "samples"}},
  };
  return s;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig RunConfig::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str());
}

RunConfig RunConfig::parse_string(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw InvalidArgument("config line " + std::to_string(lineno) + ": malformed section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw InvalidArgument("config line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty())
      throw InvalidArgument("config line " + std::to_string(lineno) + ": key outside a section");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    cfg.sections_[section][key] = value;
  }
  cfg.validate();
  return cfg;
}

void RunConfig::validate() const {
  for (const auto& [section, kv] : sections_) {
    const auto it = schema().find(section);
    if (it == schema().end()) throw InvalidArgument("unknown config section: [" + section + "]");
    for (const auto& [key, value] : kv) {
      if (!it->second.count(key))
        throw InvalidArgument("unknown config key: [" + section + "] " + key);
    }
  }
}

bool RunConfig::has(const std::string& section, const std::string& key) const {
  const auto s = sections_.find(section);
  return s != sections_.end() && s->second.count(key) > 0;
}

std::string RunConfig::get(const std::string& section, const std::string& key,
                           const std::string& fallback) const {
  const auto s = sections_.find(section);
  if (s == sections_.end()) return fallback;
  const auto k = s->second.find(key);
  return k == s->second.end() ? fallback : k->second;
}

double RunConfig::get_double(const std::string& section, const std::string& key,
                             double fallback) const {
  const std::string v = get(section, key, "");
  if (v.empty()) return fallback;
  try {
    size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw InvalidArgument("config value [" + section + "] " + key + " = '" + v +
                          "' is not a number");
  }
}

long RunConfig::get_int(const std::string& section, const std::string& key, long fallback) const {
  const std::string v = get(section, key, "");
  if (v.empty()) return fallback;
  try {
    size_t used = 0;
    const long out = std::stol(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw InvalidArgument("config value [" + section + "] " + key + " = '" + v +
                          "' is not an integer");
  }
}

bool RunConfig::get_bool(const std::string& section, const std::string& key, bool fallback) const {
  const std::string v = get(section, key, "");
  if (v.empty()) return fallback;
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw InvalidArgument("config value [" + section + "] " + key + " = '" + v + "' is not a flag");
}

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
  sections_[section][key] = value;
  validate();
}

std::string RunConfig::dump() const {
  std::ostringstream os;
  for (const auto& [section, kv] : sections_) {
    os << '[' << section << "]\n";
    for (const auto& [key, value] : kv) os << key << " = " << value << '\n';
    os << '\n';
  }
  return os.str();
}

}  // namespace rds
