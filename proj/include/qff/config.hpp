#pragma once

// Flat key = value configuration files with [section] headers and '#'
// comments. Keys are addressed as "section.key"; CLI flags override values
// by writing into the map after loading.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "qff/common.hpp"
#include "qff/csv.hpp"

namespace qff {

class Config {
 public:
  Config() = default;

  static Config from_string(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    cfg.parse(in, "<string>");
    return cfg;
  }

  static Config from_file(const std::string& path) {
    std::ifstream in(path);
    require_data(in.good(), "cannot open config file: " + path);
    Config cfg;
    cfg.parse(in, path);
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  void set(const std::string& key, const std::string& value) { values_[key] = value; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string get_string(const std::string& key) const {
    auto it = values_.find(key);
    require_data(it != values_.end(), "config: missing key '" + key + "'");
    return it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_double(it->second, "for config key " + key);
  }

  std::int64_t get_int(const std::string& key, std::int64_t fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : parse_int(it->second, "for config key " + key);
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    const std::string& v = it->second;
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw DataError("config: key '" + key + "' is not a boolean: " + v);
  }

  std::vector<std::string> get_list(const std::string& key,
                                    const std::vector<std::string>& fallback = {}) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<std::string> out;
    for (const auto& item : split_csv_line(it->second)) {
      if (!item.empty()) out.push_back(item);
    }
    return out;
  }

  std::vector<double> get_double_list(const std::string& key,
                                      const std::vector<double>& fallback = {}) const {
    if (!has(key)) return fallback;
    std::vector<double> out;
    for (const auto& item : get_list(key)) out.push_back(parse_double(item, "for config key " + key));
    return out;
  }

  std::vector<int> get_int_list(const std::string& key, const std::vector<int>& fallback = {}) const {
    if (!has(key)) return fallback;
    std::vector<int> out;
    for (const auto& item : get_list(key)) {
      out.push_back(static_cast<int>(parse_int(item, "for config key " + key)));
    }
    return out;
  }

 private:
  void parse(std::istream& in, const std::string& where) {
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.front() == '[') {
        require_data(line.back() == ']', where + ":" + std::to_string(lineno) + ": unterminated section header");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      require_data(eq != std::string::npos, where + ":" + std::to_string(lineno) + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      require_data(!key.empty(), where + ":" + std::to_string(lineno) + ": empty key");
      if (!section.empty()) key = section + "." + key;
      values_[key] = trim(line.substr(eq + 1));
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace qff
