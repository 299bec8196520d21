#pragma once

// Minimal CSV helpers. Fields are comma-separated without quoting; this is
// all the panel and report formats need.

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "qff/common.hpp"

namespace qff {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  out.push_back(trim(cur));
  return out;
}

/// Reads all rows of a CSV file; `line_numbers` receives the 1-based source
/// line of each returned row (blank lines are skipped).
inline std::vector<std::vector<std::string>> read_csv(const std::string& path,
                                                      std::vector<std::size_t>* line_numbers = nullptr) {
  std::ifstream in(path);
  require_data(in.good(), "cannot open file: " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    rows.push_back(split_csv_line(line));
    if (line_numbers) line_numbers->push_back(lineno);
  }
  return rows;
}

inline double parse_double(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(s, &pos);
    require_data(pos == s.size(), "trailing characters");
    return v;
  } catch (const std::exception&) {
    throw DataError("cannot parse number '" + s + "' " + context);
  }
}

inline long long parse_int(const std::string& s, const std::string& context) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    require_data(pos == s.size(), "trailing characters");
    return v;
  } catch (const std::exception&) {
    throw DataError("cannot parse integer '" + s + "' " + context);
  }
}

/// Full-precision double formatting so exported reports round-trip exactly.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace qff
