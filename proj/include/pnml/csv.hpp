#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "pnml/errors.hpp"

namespace pnml::csv {

/// Shortest decimal form that parses back to the same double.
inline std::string format(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

inline std::string format(std::int64_t v) { return std::to_string(v); }
inline std::string format(std::size_t v) { return std::to_string(v); }
inline std::string format(int v) { return std::to_string(v); }
inline std::string format(bool v) { return v ? "1" : "0"; }

inline double parse_double(std::string_view s) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ParseError("csv: not a number: '" + std::string(s) + "'");
  }
  return v;
}

inline std::int64_t parse_int(std::string_view s) {
  std::int64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ParseError("csv: not an integer: '" + std::string(s) + "'");
  }
  return v;
}

using Row = std::vector<std::string>;

inline std::vector<std::string> split(std::string_view line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.emplace_back(line.substr(start, comma - start));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

inline std::string join(const Row& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) out += ',';
    out += cells[i];
  }
  return out;
}

/// A header plus rows; cells are plain tokens (no quoting needed).
struct Table {
  Row header;
  std::vector<Row> rows;

  std::size_t column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw ParseError("csv: no column '" + std::string(name) + "'");
  }

  std::vector<double> numbers(std::string_view name) const {
    const auto c = column(name);
    std::vector<double> out;
    out.reserve(rows.size());
    for (const auto& r : rows) out.push_back(parse_double(r[c]));
    return out;
  }
};

/// Writes via a temporary file and rename so readers never see a partial table.
inline void write(const std::filesystem::path& path, const Table& t) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp);
    out << join(t.header) << '\n';
    for (const auto& r : t.rows) out << join(r) << '\n';
    if (!out) throw Error("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Reads a table. Lines with the wrong cell count, or a final line without a
/// newline, are dropped when `tolerant` is set (journals cut off mid-write).
inline Table read(const std::filesystem::path& path, bool tolerant = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  Table t;
  std::size_t pos = 0;
  bool first = true;
  while (pos < text.size()) {
    const auto nl = text.find('\n', pos);
    if (nl == std::string::npos) {
      if (tolerant) break;
      throw ParseError(path.string() + ": missing final newline");
    }
    auto cells = split(std::string_view(text).substr(pos, nl - pos));
    pos = nl + 1;
    if (first) {
      t.header = std::move(cells);
      first = false;
      continue;
    }
    if (cells.size() != t.header.size()) {
      if (tolerant) continue;
      throw ParseError(path.string() + ": row has " + std::to_string(cells.size()) + " cells");
    }
    t.rows.push_back(std::move(cells));
  }
  if (first) throw ParseError(path.string() + ": empty file");
  return t;
}

}  // namespace pnml::csv
