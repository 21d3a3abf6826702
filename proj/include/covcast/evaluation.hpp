#pragma once

#include "covcast/core.hpp"
#include "covcast/data_ingest.hpp"
#include "covcast/forecast_run.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

namespace covcast {

inline void require_same_shape(const Matrix& a, const Matrix& b, std::string_view what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError(std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                      std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                      std::to_string(b.cols()));
  }
}

/// Euclidean distance over the upper triangle, diagonal included.
inline double loss_euclidean(const Matrix& forecast, const Matrix& realized) {
  require_same_shape(forecast, realized, "loss_euclidean");
  double s = 0.0;
  for (Index j = 0; j < forecast.cols(); ++j)
    for (Index i = 0; i <= j; ++i) {
      const double d = forecast(i, j) - realized(i, j);
      s += d * d;
    }
  return std::sqrt(s);
}

inline double loss_frobenius(const Matrix& forecast, const Matrix& realized) {
  require_same_shape(forecast, realized, "loss_frobenius");
  return (forecast - realized).norm();
}

enum class LossMetric { Euclidean, Frobenius };

inline std::string to_string(LossMetric m) { return m == LossMetric::Euclidean ? "euclidean" : "frobenius"; }

struct LossSeries {
  std::string model;
  std::vector<Date> dates;
  std::vector<double> euclidean;
  std::vector<double> frobenius;

  std::size_t size() const { return dates.size(); }
  const std::vector<double>& values(LossMetric m) const { return m == LossMetric::Euclidean ? euclidean : frobenius; }
};

/// Losses on every forecast date that has a realized target.
inline LossSeries compute_losses(const ForecastRun& run) {
  LossSeries s;
  s.model = run.model;
  for (std::size_t k = 0; k < run.size(); ++k) {
    if (!run.targets[k]) continue;
    s.dates.push_back(run.dates[k]);
    s.euclidean.push_back(loss_euclidean(run.forecasts[k], *run.targets[k]));
    s.frobenius.push_back(loss_frobenius(run.forecasts[k], *run.targets[k]));
  }
  return s;
}

inline void require_aligned(const std::vector<LossSeries>& series) {
  if (series.empty()) throw ConfigError("no loss series given");
  for (const auto& s : series) {
    if (s.dates != series.front().dates) {
      throw DataError("loss series for '" + s.model + "' and '" + series.front().model +
                      "' cover different dates");
    }
  }
}

/// Ranks with ties averaged; the smallest value gets rank 1.
inline std::vector<double> average_ranks(const std::vector<double>& values) {
  const std::size_t k = values.size();
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(k);
  for (std::size_t i = 0; i < k;) {
    std::size_t j = i;
    while (j + 1 < k && values[order[j + 1]] == values[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t m = i; m <= j; ++m) ranks[order[m]] = r;
    i = j + 1;
  }
  return ranks;
}

struct FriedmanResult {
  double statistic = 0.0;
  double p_value = 1.0;
  Index k = 0;
  Index n = 0;
  std::vector<std::string> models;
  std::vector<double> mean_ranks;
};

/// Mean per-row ranks of an n x k loss table.
inline std::vector<double> mean_ranks(const Matrix& losses) {
  const Index n = losses.rows();
  const Index k = losses.cols();
  std::vector<double> total(static_cast<std::size_t>(k), 0.0);
  std::vector<double> row(static_cast<std::size_t>(k));
  for (Index t = 0; t < n; ++t) {
    for (Index j = 0; j < k; ++j) row[static_cast<std::size_t>(j)] = losses(t, j);
    const auto r = average_ranks(row);
    for (Index j = 0; j < k; ++j) total[static_cast<std::size_t>(j)] += r[static_cast<std::size_t>(j)];
  }
  for (auto& v : total) v /= static_cast<double>(n);
  return total;
}

/// Friedman chi-square on an n x k table (rows = dates, columns = models).
inline FriedmanResult friedman_test(const Matrix& losses) {
  const Index n = losses.rows();
  const Index k = losses.cols();
  if (k < 3) throw ConfigError("Friedman test needs at least 3 models, got " + std::to_string(k));
  if (n < 2) throw DataError("Friedman test needs at least 2 dates");
  FriedmanResult r;
  r.k = k;
  r.n = n;
  r.mean_ranks = mean_ranks(losses);
  const double kk = static_cast<double>(k);
  const double nn = static_cast<double>(n);
  double ss = 0.0;
  for (double m : r.mean_ranks) ss += m * m;
  r.statistic = std::max(0.0, 12.0 * nn / (kk * (kk + 1.0)) * (ss - kk * (kk + 1.0) * (kk + 1.0) / 4.0));
  boost::math::chi_squared dist(kk - 1.0);
  r.p_value = r.statistic == 0.0 ? 1.0 : boost::math::cdf(boost::math::complement(dist, r.statistic));
  return r;
}

inline Matrix loss_table(const std::vector<LossSeries>& series, LossMetric metric) {
  require_aligned(series);
  const Index n = static_cast<Index>(series.front().size());
  Matrix m(n, static_cast<Index>(series.size()));
  for (std::size_t j = 0; j < series.size(); ++j) {
    const auto& v = series[j].values(metric);
    for (Index t = 0; t < n; ++t) m(t, static_cast<Index>(j)) = v[static_cast<std::size_t>(t)];
  }
  return m;
}

inline FriedmanResult friedman_test(const std::vector<LossSeries>& series, LossMetric metric) {
  FriedmanResult r = friedman_test(loss_table(series, metric));
  for (const auto& s : series) r.models.push_back(s.model);
  return r;
}

// ---------------------------------------------------------------------------
// Nemenyi

/// Studentized range quantiles (infinite df) divided by sqrt(2), k = 2..20.
inline constexpr std::array<double, 19> kNemenyiQ05 = {
    1.959964, 2.343701, 2.569032, 2.727774, 2.849705, 2.948320, 3.030878, 3.101730, 3.163684, 3.218654,
    3.268004, 3.312739, 3.353618, 3.391230, 3.426041, 3.458425, 3.488685, 3.517073, 3.543799};
inline constexpr std::array<double, 19> kNemenyiQ10 = {
    1.644854, 2.052293, 2.291341, 2.459516, 2.588521, 2.692732, 2.779884, 2.854606, 2.919889, 2.977768,
    3.029694, 3.076733, 3.119693, 3.159199, 3.195743, 3.229723, 3.261461, 3.291224, 3.319233};

inline double nemenyi_q(Index k, double alpha) {
  if (k < 2 || k > 20) throw ConfigError("Nemenyi table covers 2..20 models, got " + std::to_string(k));
  const auto idx = static_cast<std::size_t>(k - 2);
  if (std::abs(alpha - 0.05) < 1e-12) return kNemenyiQ05[idx];
  if (std::abs(alpha - 0.10) < 1e-12) return kNemenyiQ10[idx];
  throw ConfigError("Nemenyi alpha must be 0.05 or 0.10");
}

/// CD = q_alpha * sqrt(k (k + 1) / (6 n)).
inline double nemenyi_cd(Index k, Index n, double alpha = 0.05) {
  if (n < 1) throw ConfigError("Nemenyi CD needs n >= 1");
  const double kk = static_cast<double>(k);
  return nemenyi_q(k, alpha) * std::sqrt(kk * (kk + 1.0) / (6.0 * static_cast<double>(n)));
}

struct NemenyiResult {
  double cd = 0.0;
  double alpha = 0.05;
  Matrix rank_diff;  // |rank_i - rank_j|
  std::vector<std::vector<bool>> significant;
};

inline NemenyiResult nemenyi(const std::vector<double>& ranks, Index n, double alpha = 0.05) {
  const Index k = static_cast<Index>(ranks.size());
  NemenyiResult r;
  r.alpha = alpha;
  r.cd = nemenyi_cd(k, n, alpha);
  r.rank_diff.resize(k, k);
  r.significant.assign(static_cast<std::size_t>(k), std::vector<bool>(static_cast<std::size_t>(k), false));
  for (Index i = 0; i < k; ++i)
    for (Index j = 0; j < k; ++j) {
      const double d = std::abs(ranks[static_cast<std::size_t>(i)] - ranks[static_cast<std::size_t>(j)]);
      r.rank_diff(i, j) = d;
      r.significant[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = d > r.cd;
    }
  return r;
}

// ---------------------------------------------------------------------------
// Normality

struct NormalityResult {
  double statistic = 0.0;
  double p_value = 1.0;
  double skewness = 0.0;
  double excess_kurtosis = 0.0;
  Index n = 0;
};

/// Jarque-Bera: n/6 (S^2 + K^2/4), chi-square with 2 df.
inline NormalityResult normality_screen(const std::vector<double>& x) {
  const Index n = static_cast<Index>(x.size());
  if (n < 20) throw DataError("normality screen needs at least 20 observations, got " + std::to_string(n));
  const double nn = static_cast<double>(n);
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / nn;
  double m2 = 0.0, m3 = 0.0, m4 = 0.0;
  for (double v : x) {
    const double d = v - mean;
    m2 += d * d;
    m3 += d * d * d;
    m4 += d * d * d * d;
  }
  m2 /= nn;
  m3 /= nn;
  m4 /= nn;
  if (!(m2 > 1e-300) || m2 <= 1e-24 * mean * mean) {
    throw NumericalError("normality screen: series has zero variance (degenerate)");
  }
  NormalityResult r;
  r.n = n;
  r.skewness = m3 / std::pow(m2, 1.5);
  r.excess_kurtosis = m4 / (m2 * m2) - 3.0;
  r.statistic = nn / 6.0 * (r.skewness * r.skewness + 0.25 * r.excess_kurtosis * r.excess_kurtosis);
  r.p_value = boost::math::cdf(boost::math::complement(boost::math::chi_squared(2.0), r.statistic));
  return r;
}

// ---------------------------------------------------------------------------
// Regimes

struct RegimeRow {
  std::string model;
  std::string regime;
  Index count = 0;
  double mean_euclidean = 0.0;
  double mean_frobenius = 0.0;
  bool flagged = false;  // dates not covered by any segment
};

inline constexpr std::string_view kUnassignedLabel = "Unassigned";

/// Per (model, segment) means in calendar order; "Overall" is the full-series
/// mean; dates outside every non-Overall segment land in a flagged row.
inline std::vector<RegimeRow> aggregate_by_regime(const std::vector<LossSeries>& series,
                                                  const RegimeCalendar& calendar) {
  std::vector<RegimeRow> out;
  for (const auto& s : series) {
    std::vector<RegimeRow> rows;
    RegimeRow unassigned{s.model, std::string(kUnassignedLabel), 0, 0.0, 0.0, true};
    for (const auto& seg : calendar.segments) rows.push_back({s.model, seg.label, 0, 0.0, 0.0, false});
    for (std::size_t t = 0; t < s.size(); ++t) {
      bool covered = false;
      for (std::size_t g = 0; g < calendar.segments.size(); ++g) {
        const auto& seg = calendar.segments[g];
        if (seg.label == kOverallLabel) {
          rows[g].count++;
          rows[g].mean_euclidean += s.euclidean[t];
          rows[g].mean_frobenius += s.frobenius[t];
        } else if (seg.contains(s.dates[t])) {
          covered = true;
          rows[g].count++;
          rows[g].mean_euclidean += s.euclidean[t];
          rows[g].mean_frobenius += s.frobenius[t];
        }
      }
      if (!covered) {
        unassigned.count++;
        unassigned.mean_euclidean += s.euclidean[t];
        unassigned.mean_frobenius += s.frobenius[t];
      }
    }
    if (unassigned.count > 0) rows.push_back(unassigned);
    for (auto& r : rows) {
      if (r.count == 0) {
        r.mean_euclidean = r.mean_frobenius = std::nan("");
        continue;
      }
      r.mean_euclidean /= static_cast<double>(r.count);
      r.mean_frobenius /= static_cast<double>(r.count);
      out.push_back(r);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Output

inline constexpr double kLossReportScale = 1e5;

/// `model,regime,metric,value` with values multiplied by 1e5.
inline void write_results_csv(std::ostream& os, const std::vector<RegimeRow>& rows) {
  os << "model,regime,metric,value\n";
  char buf[64];
  for (const auto& r : rows) {
    const std::string regime = r.flagged ? r.regime + "*" : r.regime;
    std::snprintf(buf, sizeof buf, "%.6f", r.mean_euclidean * kLossReportScale);
    os << r.model << ',' << regime << ",euclidean," << buf << '\n';
    std::snprintf(buf, sizeof buf, "%.6f", r.mean_frobenius * kLossReportScale);
    os << r.model << ',' << regime << ",frobenius," << buf << '\n';
  }
}

inline nlohmann::json ranks_json(const FriedmanResult& f, const NemenyiResult& nm, LossMetric metric) {
  nlohmann::json j;
  j["metric"] = to_string(metric);
  j["k"] = f.k;
  j["n"] = f.n;
  j["statistic"] = f.statistic;
  j["p_value"] = f.p_value;
  j["alpha"] = nm.alpha;
  j["cd"] = nm.cd;
  nlohmann::json models = nlohmann::json::array();
  for (std::size_t i = 0; i < f.models.size(); ++i) {
    models.push_back({{"model", f.models[i]}, {"mean_rank", f.mean_ranks[i]}});
  }
  j["models"] = models;
  nlohmann::json sig = nlohmann::json::array();
  for (std::size_t i = 0; i < f.models.size(); ++i)
    for (std::size_t k = i + 1; k < f.models.size(); ++k)
      if (nm.significant[i][k]) sig.push_back({f.models[i], f.models[k]});
  j["significant_pairs"] = sig;
  return j;
}

/// Critical-distance diagram: rank axis, CD bar, one labelled tick per model
/// and bars joining groups whose rank spread is within CD.
inline void write_cd_svg(std::ostream& os, const std::vector<std::string>& models,
                         const std::vector<double>& ranks, double cd, const std::string& title = "") {
  const std::size_t k = models.size();
  const double width = 800.0, left = 170.0, right = 630.0, axis_y = 70.0;
  const double lo = 1.0, hi = std::max<double>(2.0, static_cast<double>(k));
  auto x = [&](double r) { return left + (r - lo) / (hi - lo) * (right - left); };
  std::vector<std::size_t> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ranks[a] < ranks[b]; });
  const double height = 120.0 + 22.0 * static_cast<double>((k + 1) / 2) + 12.0 * static_cast<double>(k);
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" "
                "font-family=\"sans-serif\" font-size=\"12\">\n",
                width, height);
  os << buf;
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty()) os << "<text x=\"" << width / 2 << "\" y=\"16\" text-anchor=\"middle\">" << title << "</text>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>\n",
                left, axis_y, right, axis_y);
  os << buf;
  for (int r = 1; r <= static_cast<int>(hi); ++r) {
    std::snprintf(buf, sizeof buf,
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\"/>"
                  "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"middle\">%d</text>\n",
                  x(r), axis_y - 5, x(r), axis_y, x(r), axis_y - 9, r);
    os << buf;
  }
  std::snprintf(buf, sizeof buf,
                "<line x1=\"%.1f\" y1=\"32\" x2=\"%.1f\" y2=\"32\" stroke=\"black\" stroke-width=\"2\"/>"
                "<text x=\"%.1f\" y=\"28\" text-anchor=\"middle\">CD = %.3f</text>\n",
                x(lo), x(lo + cd), x(lo + cd / 2), cd);
  os << buf;
  for (std::size_t p = 0; p < k; ++p) {
    const std::size_t m = order[p];
    const bool leftside = p < (k + 1) / 2;
    const double row = leftside ? static_cast<double>(p) : static_cast<double>(k - 1 - p);
    const double y = axis_y + 40.0 + 22.0 * row;
    const double xr = x(ranks[m]);
    const double xe = leftside ? left - 5 : right + 5;
    std::snprintf(buf, sizeof buf,
                  "<polyline points=\"%.1f,%.1f %.1f,%.1f %.1f,%.1f\" fill=\"none\" stroke=\"black\"/>"
                  "<text x=\"%.1f\" y=\"%.1f\" text-anchor=\"%s\">%s (%.2f)</text>\n",
                  xr, axis_y, xr, y, xe, y, leftside ? xe - 3 : xe + 3, y + 4, leftside ? "end" : "start",
                  models[m].c_str(), ranks[m]);
    os << buf;
  }
  double bar_y = axis_y + 12.0;
  for (std::size_t a = 0; a < k; ++a) {
    std::size_t b = a;
    while (b + 1 < k && ranks[order[b + 1]] - ranks[order[a]] <= cd) ++b;
    const bool maximal = b > a && (a == 0 || ranks[order[b]] - ranks[order[a - 1]] > cd);
    if (maximal) {
      std::snprintf(buf, sizeof buf,
                    "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"black\" stroke-width=\"3\"/>\n",
                    x(ranks[order[a]]) - 3, bar_y, x(ranks[order[b]]) + 3, bar_y);
      os << buf;
      bar_y += 6.0;
    }
  }
  os << "</svg>\n";
}

}  // namespace covcast
