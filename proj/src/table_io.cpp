#include "tentgp/table_io.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "tentgp/error.hpp"

namespace tentgp {

namespace chr = std::chrono;

int Date::year() const {
  const chr::year_month_day ymd{chr::sys_days{chr::days{days}}};
  return static_cast<int>(ymd.year());
}

Date make_date(int year, unsigned month, unsigned day) {
  const chr::year_month_day ymd{chr::year{year}, chr::month{month}, chr::day{day}};
  if (!ymd.ok()) throw InputError("invalid calendar date");
  return Date{static_cast<std::int32_t>(chr::sys_days{ymd}.time_since_epoch().count())};
}

Date parse_date(std::string_view text) {
  text = trim(text);
  if (text.size() != 10 || text[4] != '-' || text[7] != '-') {
    throw InputError("date '" + std::string(text) + "' is not YYYY-MM-DD");
  }
  auto num = [&](std::size_t pos, std::size_t len) {
    int v = 0;
    const auto* first = text.data() + pos;
    const auto [ptr, ec] = std::from_chars(first, first + len, v);
    if (ec != std::errc{} || ptr != first + len) {
      throw InputError("date '" + std::string(text) + "' is not YYYY-MM-DD");
    }
    return v;
  };
  const int y = num(0, 4);
  const int m = num(5, 2);
  const int d = num(8, 2);
  try {
    return make_date(y, static_cast<unsigned>(m), static_cast<unsigned>(d));
  } catch (const InputError&) {
    throw InputError("date '" + std::string(text) + "' is not a valid calendar date");
  }
}

std::string format_date(Date d) {
  const chr::year_month_day ymd{chr::sys_days{chr::days{d.days}}};
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
    s.remove_prefix(1);
  }
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_csv_line(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      out.push_back(trim(line.substr(start)));
      break;
    }
    out.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
  return out;
}

CsvReader::CsvReader(std::istream& in, std::string source_name,
                     const std::vector<std::string>& required)
    : in_(in), source_(std::move(source_name)) {
  std::string header;
  while (std::getline(in_, header)) {
    ++line_no_;
    if (!trim(header).empty()) break;
  }
  if (trim(header).empty()) throw ConfigError(source_ + ": missing header row");
  if (header.size() >= 3 && header.compare(0, 3, "\xEF\xBB\xBF") == 0) header.erase(0, 3);
  for (auto col : split_csv_line(header)) columns_.emplace_back(col);
  for (std::size_t i = 0; i < columns_.size(); ++i) index_.emplace(columns_[i], i);
  for (const auto& r : required) {
    if (!index_.contains(r)) {
      throw ConfigError(source_ + ": missing required column '" + r + "'");
    }
  }
}

bool CsvReader::next() {
  while (std::getline(in_, line_)) {
    ++line_no_;
    if (trim(line_).empty()) continue;
    fields_ = split_csv_line(line_);
    return true;
  }
  return false;
}

std::string_view CsvReader::field(const std::string& column) const {
  const auto it = index_.find(column);
  if (it == index_.end() || it->second >= fields_.size()) return {};
  return fields_[it->second];
}

double parse_double(std::string_view text, const std::string& what) {
  text = trim(text);
  if (text.empty()) throw InputError(what + " is empty");
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw InputError(what + " '" + std::string(text) + "' is not a number");
  }
  return v;
}

std::int64_t parse_int(std::string_view text, const std::string& what) {
  text = trim(text);
  if (text.empty()) throw InputError(what + " is empty");
  std::int64_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw InputError(what + " '" + std::string(text) + "' is not an integer");
  }
  return v;
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

}  // namespace tentgp
