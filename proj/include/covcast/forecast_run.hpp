#pragma once

// A model's dated series of F-day-ahead covariance forecasts, paired with the
// realized covariance over t+1..t+F where the panel reaches that far.
//
// Binary layout (little-endian), one file per model:
//   "CVFR", u32 version, u32 N, u32 count,
//   per entry: i32 day number, u8 has_target, f64[N*N] forecast,
//              f64[N*N] target (only when has_target)
// The JSON index next to it records model, horizon, tickers and dates.

#include "covcast/core.hpp"
#include "covcast/data_ingest.hpp"
#include "covcast/forecaster.hpp"
#include "covcast/rolling_stats.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace covcast {

struct ForecastRun {
  std::string model;
  int horizon = 20;
  std::vector<std::string> tickers;
  std::vector<Date> dates;
  std::vector<Index> rows;  // panel row of each forecast date
  std::vector<Matrix> forecasts;
  std::vector<std::optional<Matrix>> targets;

  std::size_t size() const { return dates.size(); }

  /// Position of `d`, or -1.
  std::ptrdiff_t find(const Date& d) const {
    auto it = std::lower_bound(dates.begin(), dates.end(), d);
    if (it == dates.end() || *it != d) return -1;
    return it - dates.begin();
  }
};

/// Panel rows of the test dates: every row dated on or after `start`
/// (and not after `end` when given).
inline std::vector<Index> test_rows(const ReturnPanel& panel, const Date& start,
                                    std::optional<Date> end = std::nullopt) {
  std::vector<Index> rows;
  for (Index r = 0; r < panel.days(); ++r) {
    const Date& d = panel.dates[static_cast<std::size_t>(r)];
    if (d < start) continue;
    if (end && *end < d) break;
    rows.push_back(r);
  }
  return rows;
}

using ProgressFn = std::function<void(std::size_t done, std::size_t total)>;

/// Calls forecaster.forecast on history rows [0, t] for each test row t, in
/// order. Targets use rows t+1..t+F when present.
inline ForecastRun run_forecast(Forecaster& model, const ReturnPanel& panel, int horizon,
                                const std::vector<Index>& rows, const ProgressFn& progress = {}) {
  ForecastRun run;
  run.model = model.id();
  run.horizon = horizon;
  run.tickers = panel.tickers;
  const Index need = model.min_history();
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const Index t = rows[k];
    if (k > 0 && t <= rows[k - 1]) throw ConfigError("forecast rows must be strictly increasing");
    if (t + 1 < need) {
      throw DataError(model.id() + ": test date " + format_date(panel.dates[static_cast<std::size_t>(t)]) +
                      " has " + std::to_string(t + 1) + " rows of history, needs " + std::to_string(need));
    }
    Matrix f = model.forecast(panel.returns.topRows(t + 1));
    require_finite(f, model.id() + " forecast");
    run.dates.push_back(panel.dates[static_cast<std::size_t>(t)]);
    run.rows.push_back(t);
    run.forecasts.push_back(std::move(f));
    if (t + horizon < panel.days()) {
      run.targets.emplace_back(realized_cov(panel.returns, horizon, t + horizon));
    } else {
      run.targets.emplace_back(std::nullopt);
    }
    if (progress) progress(k + 1, rows.size());
  }
  return run;
}

// ---------------------------------------------------------------------------
// Storage

namespace detail {

template <typename T>
void put(std::ostream& os, const T& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const std::string& path) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DataError("forecast file '" + path + "' is truncated");
  return v;
}

}  // namespace detail

inline void write_forecast_binary(const std::string& path, const ForecastRun& run) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write '" + path + "'");
  const auto n = static_cast<std::uint32_t>(run.tickers.size());
  os.write("CVFR", 4);
  detail::put<std::uint32_t>(os, 1);
  detail::put<std::uint32_t>(os, n);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(run.size()));
  const auto bytes = static_cast<std::streamsize>(sizeof(double) * n * n);
  for (std::size_t k = 0; k < run.size(); ++k) {
    detail::put<std::int32_t>(os, to_day_number(run.dates[k]));
    detail::put<std::uint8_t>(os, run.targets[k] ? 1 : 0);
    os.write(reinterpret_cast<const char*>(run.forecasts[k].data()), bytes);
    if (run.targets[k]) os.write(reinterpret_cast<const char*>(run.targets[k]->data()), bytes);
  }
}

inline nlohmann::json forecast_index(const ForecastRun& run, const std::string& file) {
  nlohmann::json j;
  j["model"] = run.model;
  j["horizon"] = run.horizon;
  j["tickers"] = run.tickers;
  j["file"] = file;
  j["count"] = run.size();
  j["first"] = run.dates.empty() ? "" : format_date(run.dates.front());
  j["last"] = run.dates.empty() ? "" : format_date(run.dates.back());
  j["rows"] = run.rows;
  return j;
}

inline ForecastRun read_forecast_binary(const std::string& path, const nlohmann::json& index) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open forecast file '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != "CVFR") throw DataError("'" + path + "' is not a forecast file");
  if (detail::get<std::uint32_t>(is, path) != 1) throw DataError("'" + path + "': unsupported version");
  const auto n = detail::get<std::uint32_t>(is, path);
  const auto count = detail::get<std::uint32_t>(is, path);
  ForecastRun run;
  run.model = index.at("model").get<std::string>();
  run.horizon = index.at("horizon").get<int>();
  run.tickers = index.at("tickers").get<std::vector<std::string>>();
  run.rows = index.at("rows").get<std::vector<Index>>();
  if (run.tickers.size() != n || run.rows.size() != count) {
    throw DataError("'" + path + "' does not match its index");
  }
  const auto bytes = static_cast<std::streamsize>(sizeof(double) * n * n);
  for (std::uint32_t k = 0; k < count; ++k) {
    run.dates.push_back(from_day_number(detail::get<std::int32_t>(is, path)));
    const bool has_target = detail::get<std::uint8_t>(is, path) != 0;
    Matrix f(n, n);
    is.read(reinterpret_cast<char*>(f.data()), bytes);
    if (!is) throw DataError("forecast file '" + path + "' is truncated");
    run.forecasts.push_back(std::move(f));
    if (has_target) {
      Matrix t(n, n);
      is.read(reinterpret_cast<char*>(t.data()), bytes);
      if (!is) throw DataError("forecast file '" + path + "' is truncated");
      run.targets.emplace_back(std::move(t));
    } else {
      run.targets.emplace_back(std::nullopt);
    }
  }
  return run;
}

/// Audit format: `date,i,j,forecast,target` (target empty when unavailable).
inline void write_forecast_csv(std::ostream& os, const ForecastRun& run) {
  os << "date,i,j,forecast,target\n";
  os.precision(17);
  for (std::size_t k = 0; k < run.size(); ++k) {
    const std::string d = format_date(run.dates[k]);
    const Matrix& f = run.forecasts[k];
    for (Index i = 0; i < f.rows(); ++i) {
      for (Index j = 0; j < f.cols(); ++j) {
        os << d << ',' << i << ',' << j << ',' << f(i, j) << ',';
        if (run.targets[k]) os << (*run.targets[k])(i, j);
        os << '\n';
      }
    }
  }
}

}  // namespace covcast
