#pragma once

#include <cstdint>
#include <istream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tentgp {

// Calendar day as a count of days since 1970-01-01.
struct Date {
  std::int32_t days = 0;
  auto operator<=>(const Date&) const = default;
  Date operator+(std::int32_t n) const { return Date{days + n}; }
  std::int32_t operator-(Date o) const { return days - o.days; }
  int year() const;
};

Date make_date(int year, unsigned month, unsigned day);
// Strict ISO-8601 YYYY-MM-DD; throws InputError otherwise.
Date parse_date(std::string_view text);
std::string format_date(Date d);

// Minimal comma-separated reader for the flat, unquoted files used here.
class CsvReader {
 public:
  // `required` columns must all be present in the header (any order).
  CsvReader(std::istream& in, std::string source_name, const std::vector<std::string>& required);

  // Advances to the next non-blank row. Returns false at end of input.
  bool next();
  // Field by column name from the current row; empty when the row is short.
  std::string_view field(const std::string& column) const;
  std::size_t line_number() const { return line_no_; }
  const std::string& raw_line() const { return line_; }
  std::size_t field_count() const { return fields_.size(); }
  std::size_t column_count() const { return columns_.size(); }
  const std::string& source_name() const { return source_; }

 private:
  std::istream& in_;
  std::string source_;
  std::string line_;
  std::size_t line_no_ = 0;
  std::vector<std::string> columns_;
  std::unordered_map<std::string, std::size_t> index_;
  std::vector<std::string_view> fields_;
};

std::vector<std::string_view> split_csv_line(std::string_view line);
std::string_view trim(std::string_view s);

// Strict numeric parsing of a whole field; throws InputError naming `what`.
double parse_double(std::string_view text, const std::string& what);
std::int64_t parse_int(std::string_view text, const std::string& what);

// Shortest decimal text that round-trips to the same double.
std::string format_double(double v);

}  // namespace tentgp
