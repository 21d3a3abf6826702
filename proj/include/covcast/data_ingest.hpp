#pragma once

// Price and risk-free CSV loading, calendar alignment, daily return panels and
// market-regime calendars.

#include "covcast/core.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iterator>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace covcast {

/// Adjusted closes on the intersection calendar of all tickers.
struct PricePanel {
  std::vector<Date> dates;
  std::vector<std::string> tickers;
  Matrix prices;  // T x N
};

enum class ReturnMode { Raw, Excess };

inline std::string to_string(ReturnMode m) { return m == ReturnMode::Raw ? "raw" : "excess"; }

inline ReturnMode parse_return_mode(std::string_view s) {
  if (s == "raw") return ReturnMode::Raw;
  if (s == "excess") return ReturnMode::Excess;
  throw ConfigError("return mode must be 'raw' or 'excess', got '" + std::string(s) + "'");
}

/// Simple daily returns. Row k is the return realised on dates[k].
struct ReturnPanel {
  std::vector<Date> dates;
  std::vector<std::string> tickers;
  Matrix returns;  // (T-1) x N
  ReturnMode mode = ReturnMode::Raw;

  Index days() const { return returns.rows(); }
  Index assets() const { return returns.cols(); }

  /// First row whose date is on or after `d`; days() if none.
  Index index_at_or_after(const Date& d) const {
    auto it = std::lower_bound(dates.begin(), dates.end(), d);
    return static_cast<Index>(it - dates.begin());
  }

  /// Rows [0, last] only; the view every forecaster is handed.
  ReturnPanel truncated(Index last) const {
    ReturnPanel out;
    out.dates.assign(dates.begin(), dates.begin() + last + 1);
    out.tickers = tickers;
    out.returns = returns.topRows(last + 1);
    out.mode = mode;
    return out;
  }
};

/// Daily risk-free rate (already converted from annual percent).
struct RiskFreeSeries {
  std::vector<Date> dates;
  std::vector<double> daily_rate;
};

struct RegimeSegment {
  std::string label;
  Date start;
  Date end;  // inclusive

  bool contains(const Date& d) const { return start <= d && d <= end; }
};

struct RegimeCalendar {
  std::vector<RegimeSegment> segments;
};

inline constexpr std::string_view kOverallLabel = "Overall";

/// Column names for the long-format price file.
struct PriceSchema {
  std::string date_column = "date";
  std::string ticker_column = "ticker";
  std::string price_column = "adj_close";
};

namespace detail {

inline std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) out.push_back(trim(field));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_number(const std::string& s, std::size_t row, std::string_view what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (s.empty() || used != s.size() || !std::isfinite(v)) {
    throw DataError("row " + std::to_string(row) + ": non-numeric " + std::string(what) + " '" +
                    s + "'");
  }
  return v;
}

/// Reads the header, skipping blank and '#' comment lines. Returns column index map.
inline std::map<std::string, std::size_t> read_header(std::istream& in, std::size_t& row) {
  std::string line;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || line[0] == '#') continue;
    if (row == 1 && line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);
    std::map<std::string, std::size_t> cols;
    auto fields = split_csv_line(line);
    for (std::size_t i = 0; i < fields.size(); ++i) cols[fields[i]] = i;
    return cols;
  }
  throw DataError("empty CSV input");
}

inline std::size_t require_column(const std::map<std::string, std::size_t>& cols,
                                  const std::string& name) {
  auto it = cols.find(name);
  if (it == cols.end()) throw DataError("missing column '" + name + "'");
  return it->second;
}

}  // namespace detail

/// Parses a long-format `date,ticker,adj_close` file. Dates present for only a
/// subset of tickers are dropped; tickers are sorted so row order is irrelevant.
inline PricePanel parse_prices(std::istream& in, const PriceSchema& schema = {}) {
  std::size_t row = 0;
  auto cols = detail::read_header(in, row);
  const auto ci_date = detail::require_column(cols, schema.date_column);
  const auto ci_ticker = detail::require_column(cols, schema.ticker_column);
  const auto ci_price = detail::require_column(cols, schema.price_column);
  const auto width = std::max({ci_date, ci_ticker, ci_price}) + 1;

  std::map<std::string, std::map<int, double>> by_ticker;
  std::string line;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty() || line[0] == '#') continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() < width) {
      throw DataError("row " + std::to_string(row) + ": expected at least " +
                      std::to_string(width) + " fields, got " + std::to_string(fields.size()));
    }
    Date d;
    try {
      d = parse_date(fields[ci_date]);
    } catch (const DataError& e) {
      throw DataError("row " + std::to_string(row) + ": " + e.what());
    }
    const std::string& ticker = fields[ci_ticker];
    if (ticker.empty()) throw DataError("row " + std::to_string(row) + ": empty ticker");
    const double px = detail::parse_number(fields[ci_price], row, "price");
    if (px <= 0.0) throw DataError("row " + std::to_string(row) + ": price must be positive");
    auto [it, inserted] = by_ticker[ticker].emplace(to_day_number(d), px);
    if (!inserted) {
      throw DataError("row " + std::to_string(row) + ": duplicate entry for " + ticker + " on " +
                      format_date(d));
    }
  }

  if (by_ticker.size() < 2) throw DataError("insufficient data: need at least 2 assets");

  std::set<int> common;
  bool first = true;
  for (const auto& [ticker, series] : by_ticker) {
    std::set<int> days;
    for (const auto& kv : series) days.insert(kv.first);
    if (first) {
      common = std::move(days);
      first = false;
    } else {
      std::set<int> keep;
      std::set_intersection(common.begin(), common.end(), days.begin(), days.end(),
                            std::inserter(keep, keep.begin()));
      common = std::move(keep);
    }
  }
  if (common.size() < 2) throw DataError("insufficient data: fewer than 2 aligned dates");

  PricePanel panel;
  for (const auto& kv : by_ticker) panel.tickers.push_back(kv.first);
  panel.prices.resize(static_cast<Index>(common.size()), static_cast<Index>(by_ticker.size()));
  Index r = 0;
  for (int day : common) {
    panel.dates.push_back(from_day_number(day));
    Index c = 0;
    for (const auto& kv : by_ticker) panel.prices(r, c++) = kv.second.at(day);
    ++r;
  }
  return panel;
}

inline PricePanel load_prices(const std::string& path, const PriceSchema& schema = {}) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open price file '" + path + "'");
  return parse_prices(in, schema);
}

/// Parses `date,rate_pct_annual`; converts to a daily rate via /100/252.
inline RiskFreeSeries parse_riskfree(std::istream& in) {
  std::size_t row = 0;
  auto cols = detail::read_header(in, row);
  const auto ci_date = detail::require_column(cols, "date");
  const auto ci_rate = detail::require_column(cols, "rate_pct_annual");
  std::map<int, double> rates;
  std::string line;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty() || line[0] == '#') continue;
    auto fields = detail::split_csv_line(line);
    if (fields.size() <= std::max(ci_date, ci_rate)) {
      throw DataError("row " + std::to_string(row) + ": too few fields");
    }
    Date d;
    try {
      d = parse_date(fields[ci_date]);
    } catch (const DataError& e) {
      throw DataError("row " + std::to_string(row) + ": " + e.what());
    }
    // "." marks a non-publication day; forward-fill covers it.
    if (fields[ci_rate] == "." || fields[ci_rate].empty()) continue;
    rates[to_day_number(d)] = detail::parse_number(fields[ci_rate], row, "rate") / 100.0 / 252.0;
  }
  RiskFreeSeries out;
  for (const auto& [day, rate] : rates) {
    out.dates.push_back(from_day_number(day));
    out.daily_rate.push_back(rate);
  }
  return out;
}

inline RiskFreeSeries load_riskfree(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open risk-free file '" + path + "'");
  return parse_riskfree(in);
}

/// returns[t][i] = p[t+1][i] / p[t][i] - 1, less the daily risk-free rate in
/// excess mode. The rate in force on a return date is the latest observation
/// on or before it.
inline ReturnPanel to_returns(const PricePanel& panel, const std::optional<RiskFreeSeries>& riskfree,
                              ReturnMode mode) {
  const Index t = panel.prices.rows();
  const Index n = panel.prices.cols();
  if (t < 2 || n < 1) throw DataError("insufficient data: need at least 2 dates");

  ReturnPanel out;
  out.tickers = panel.tickers;
  out.mode = mode;
  out.dates.assign(panel.dates.begin() + 1, panel.dates.end());
  out.returns.resize(t - 1, n);
  for (Index r = 0; r + 1 < t; ++r) {
    for (Index c = 0; c < n; ++c) {
      out.returns(r, c) = panel.prices(r + 1, c) / panel.prices(r, c) - 1.0;
    }
  }
  if (mode == ReturnMode::Raw) return out;

  if (!riskfree || riskfree->dates.empty()) {
    throw DataError("alignment error: excess mode requires a risk-free series");
  }
  const auto& rf = *riskfree;
  for (Index r = 0; r < out.days(); ++r) {
    const Date& d = out.dates[static_cast<std::size_t>(r)];
    auto it = std::upper_bound(rf.dates.begin(), rf.dates.end(), d);
    if (it == rf.dates.begin()) {
      throw DataError("alignment error: no risk-free rate on or before " + format_date(d));
    }
    const double rate = rf.daily_rate[static_cast<std::size_t>(it - rf.dates.begin() - 1)];
    out.returns.row(r).array() -= rate;
  }
  return out;
}

/// Bull-1, Bear and Bull-2 segments of the 2021-2023 test window plus Overall.
inline RegimeCalendar default_regimes() {
  using namespace std::chrono;
  RegimeCalendar cal;
  cal.segments = {
      {"Bull-1", 2021y / January / 1, 2022y / January / 2},
      {"Bear", 2022y / January / 3, 2022y / June / 12},
      {"Bull-2", 2022y / June / 13, 2023y / December / 31},
      {std::string(kOverallLabel), 2021y / January / 1, 2023y / December / 31},
  };
  return cal;
}

/// Throws unless non-Overall segments are ordered and pairwise disjoint.
inline void validate_regimes(const RegimeCalendar& cal) {
  std::vector<RegimeSegment> parts;
  for (const auto& s : cal.segments) {
    if (s.end < s.start) throw ConfigError("regime '" + s.label + "' ends before it starts");
    if (s.label != kOverallLabel) parts.push_back(s);
  }
  std::sort(parts.begin(), parts.end(),
            [](const RegimeSegment& a, const RegimeSegment& b) { return a.start < b.start; });
  for (std::size_t i = 1; i < parts.size(); ++i) {
    if (!(parts[i - 1].end < parts[i].start)) {
      throw ConfigError("regimes '" + parts[i - 1].label + "' and '" + parts[i].label +
                        "' overlap");
    }
  }
}

}  // namespace covcast
