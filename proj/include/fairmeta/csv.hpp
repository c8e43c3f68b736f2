#pragma once

#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "fairmeta/error.hpp"

namespace fairmeta::csv {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  std::vector<std::size_t> lines;  // 1-based source line of each row

  std::optional<std::size_t> column(std::string_view name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }

  std::size_t require_column(std::string_view name) const {
    const auto c = column(name);
    if (!c) throw Error("missing column '" + std::string(name) + "'");
    return *c;
  }
};

namespace detail {

/// Splits one record; handles double-quoted fields with "" escapes. Returns
/// false when a quoted field continues onto the next physical line.
inline bool split_record(const std::string& line, std::vector<std::string>& fields,
                         std::string& cur, bool& in_quotes) {
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  if (in_quotes) {
    cur.push_back('\n');
    return false;
  }
  fields.push_back(std::move(cur));
  cur.clear();
  return true;
}

}  // namespace detail

inline Table read(std::istream& in) {
  Table t;
  std::string line, cur;
  std::vector<std::string> fields;
  bool in_quotes = false;
  std::size_t lineno = 0, record_line = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (!in_quotes) {
      if (line.empty() || line == "\r") continue;
      record_line = lineno;
    }
    if (!detail::split_record(line, fields, cur, in_quotes)) continue;
    if (!have_header) {
      t.header = std::move(fields);
      have_header = true;
    } else {
      if (fields.size() != t.header.size())
        throw ParseError("expected " + std::to_string(t.header.size()) + " fields, found " +
                             std::to_string(fields.size()),
                         record_line);
      t.rows.push_back(std::move(fields));
      t.lines.push_back(record_line);
    }
    fields.clear();
  }
  if (in_quotes) throw ParseError("unterminated quoted field", record_line);
  if (!have_header) throw ParseError("missing header row");
  return t;
}

inline Table read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  return read(in);
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

/// Strict, locale-independent number parse of the whole cell.
inline double parse_number(std::string_view cell, std::size_t line, std::string_view column) {
  const auto s = trim(cell);
  double v = 0;
  const auto* first = s.data();
  if (!s.empty() && *first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
  if (s.empty() || ec != std::errc() || ptr != s.data() + s.size() || !std::isfinite(v))
    throw ParseError("non-numeric cell '" + std::string(cell) + "' in column '" +
                         std::string(column) + "'",
                     line);
  return v;
}

/// Shortest representation that round-trips; always '.' as decimal separator.
inline std::string format_number(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw Error("format_number failed");
  return std::string(buf, ptr);
}

inline std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

/// Writes comma-separated rows terminated by '\n'.
class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << quote_if_needed(fields[i]);
    }
    out_ << '\n';
  }

 private:
  std::ostream& out_;
};

}  // namespace fairmeta::csv
