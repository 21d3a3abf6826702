#pragma once

#include "covcast/core.hpp"
#include "covcast/data_ingest.hpp"
#include "covcast/forecast_run.hpp"

#include <boost/math/distributions/fisher_f.hpp>

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

namespace covcast {

enum class RebalanceFrequency { Daily, Weekly, Monthly };

inline std::string to_string(RebalanceFrequency f) {
  switch (f) {
    case RebalanceFrequency::Daily: return "daily";
    case RebalanceFrequency::Weekly: return "weekly";
    case RebalanceFrequency::Monthly: return "monthly";
  }
  return "daily";
}

inline RebalanceFrequency parse_frequency(std::string_view s) {
  if (s == "daily") return RebalanceFrequency::Daily;
  if (s == "weekly") return RebalanceFrequency::Weekly;
  if (s == "monthly") return RebalanceFrequency::Monthly;
  throw ConfigError("rebalance frequency must be daily, weekly or monthly, got '" + std::string(s) + "'");
}

/// Trading days between rebalances.
inline Index rebalance_step(RebalanceFrequency f) {
  switch (f) {
    case RebalanceFrequency::Daily: return 1;
    case RebalanceFrequency::Weekly: return 5;
    case RebalanceFrequency::Monthly: return 21;
  }
  return 1;
}

inline constexpr double kTradingDays = 252.0;

// ---------------------------------------------------------------------------
// GMV

struct GmvResult {
  Vector weights;
  bool degenerate = false;  // all-zero covariance, uniform weights returned
  bool ridge = false;       // singular block regularized
  bool fallback = false;    // projected gradient used
  int iterations = 0;
};

namespace detail {

/// Euclidean projection onto the probability simplex.
inline Vector project_simplex(const Vector& v) {
  const Index n = v.size();
  Vector u = v;
  std::sort(u.data(), u.data() + n, std::greater<double>());
  double css = 0.0, theta = 0.0;
  for (Index j = 0; j < n; ++j) {
    css += u(j);
    const double t = (css - 1.0) / static_cast<double>(j + 1);
    if (u(j) - t > 0.0) theta = t;
  }
  return (v.array() - theta).cwiseMax(0.0).matrix();
}

inline Vector projected_gradient_gmv(const Matrix& sigma, Vector w, int max_iter = 50000) {
  const double lmax = std::max(eigenvalues_sym(sigma).maxCoeff(), 1e-300);
  for (int k = 0; k < max_iter; ++k) {
    const double step = 1.0 / (lmax * std::sqrt(1.0 + k / 1000.0));
    Vector next = project_simplex(w - step * (sigma * w));
    const double change = (next - w).lpNorm<Eigen::Infinity>();
    w = std::move(next);
    if (change < 1e-15) break;
  }
  return w;
}

inline void normalize_simplex(Vector& w) {
  w = w.cwiseMax(0.0);
  w /= w.sum();
}

}  // namespace detail

/// Long-only minimum-variance weights on the simplex.
///
/// Primal active set: the first solve on the full set gives the unconstrained
/// Sigma^-1 1 portfolio; negative components block the step and leave the
/// free set; inactive assets whose marginal risk undercuts the free assets'
/// common value re-enter. Singular blocks get a ridge of 1e-10 trace / N;
/// cycling switches to projected gradient.
inline GmvResult solve_gmv(const Matrix& cov) {
  require_square(cov, "solve_gmv");
  require_finite(cov, "solve_gmv");
  const Index n = cov.rows();
  GmvResult res;
  if (n == 0) throw ConfigError("solve_gmv: empty covariance");
  if (n == 1) {
    res.weights = Vector::Ones(1);
    return res;
  }
  if (cov.cwiseAbs().maxCoeff() == 0.0) {
    res.weights = Vector::Constant(n, 1.0 / static_cast<double>(n));
    res.degenerate = true;
    return res;
  }
  Matrix sigma = symmetrize(cov);
  const double ridge = 1e-10 * std::max(sigma.trace(), sigma.cwiseAbs().maxCoeff()) / static_cast<double>(n);

  std::vector<bool> free(static_cast<std::size_t>(n), true);
  Vector w = Vector::Constant(n, 1.0 / static_cast<double>(n));
  const int max_iter = 20 * static_cast<int>(n) + 100;
  bool converged = false;
  for (int iter = 0; iter < max_iter && !converged; ++iter) {
    res.iterations = iter + 1;
    std::vector<Index> idx;
    for (Index i = 0; i < n; ++i)
      if (free[static_cast<std::size_t>(i)]) idx.push_back(i);
    const Index m = static_cast<Index>(idx.size());
    Matrix sub(m, m);
    for (Index a = 0; a < m; ++a)
      for (Index b = 0; b < m; ++b) sub(a, b) = sigma(idx[static_cast<std::size_t>(a)], idx[static_cast<std::size_t>(b)]);
    Eigen::LDLT<Matrix> ldlt(sub);
    Vector x;
    bool ok = ldlt.info() == Eigen::Success && ldlt.isPositive() && ldlt.rcond() > 1e-13;
    if (ok) {
      x = ldlt.solve(Vector::Ones(m));
      ok = x.allFinite() && x.sum() > 0.0;
    }
    if (!ok) {
      if (res.ridge) break;
      res.ridge = true;
      sigma.diagonal().array() += ridge;
      --iter;
      continue;
    }
    x /= x.sum();

    if (x.minCoeff() >= 0.0) {
      w.setZero();
      for (Index a = 0; a < m; ++a) w(idx[static_cast<std::size_t>(a)]) = x(a);
      const Vector g = sigma * w;
      const double lambda = w.dot(g);
      const double tol = 1e-12 * g.cwiseAbs().maxCoeff();
      Index enter = -1;
      double worst = -tol;
      for (Index i = 0; i < n; ++i) {
        if (free[static_cast<std::size_t>(i)]) continue;
        const double v = g(i) - lambda;
        if (v < worst) {
          worst = v;
          enter = i;
        }
      }
      if (enter < 0) {
        converged = true;
      } else {
        free[static_cast<std::size_t>(enter)] = true;
      }
      continue;
    }

    double alpha = 1.0;
    Index block = -1;
    for (Index a = 0; a < m; ++a) {
      const Index i = idx[static_cast<std::size_t>(a)];
      if (x(a) < 0.0) {
        const double step = w(i) / (w(i) - x(a));
        if (step < alpha) {
          alpha = step;
          block = i;
        }
      }
    }
    Vector target = Vector::Zero(n);
    for (Index a = 0; a < m; ++a) target(idx[static_cast<std::size_t>(a)]) = x(a);
    w += alpha * (target - w);
    for (Index a = 0; a < m; ++a) {
      const Index i = idx[static_cast<std::size_t>(a)];
      if (i == block || w(i) <= 1e-15) {
        w(i) = 0.0;
        free[static_cast<std::size_t>(i)] = false;
      }
    }
  }
  if (!converged) {
    res.fallback = true;
    w = detail::projected_gradient_gmv(sigma, Vector::Constant(n, 1.0 / static_cast<double>(n)));
  }
  detail::normalize_simplex(w);
  res.weights = std::move(w);
  return res;
}

struct KktResidual {
  double active_spread = 0.0;    // max |(Sigma w)_i - lambda| over w_i > 0, relative to ||Sigma w||
  double inactive_deficit = 0.0; // max (lambda - (Sigma w)_i)_+ over w_i = 0, relative
};

inline KktResidual gmv_kkt(const Matrix& cov, const Vector& w) {
  const Vector g = cov * w;
  const double lambda = w.dot(g);
  const double scale = std::max(g.norm(), 1e-300);
  KktResidual r;
  for (Index i = 0; i < w.size(); ++i) {
    if (w(i) > 0.0) {
      r.active_spread = std::max(r.active_spread, std::abs(g(i) - lambda) / scale);
    } else {
      r.inactive_deficit = std::max(r.inactive_deficit, std::max(0.0, lambda - g(i)) / scale);
    }
  }
  return r;
}

// ---------------------------------------------------------------------------
// Backtest

struct LedgerEntry {
  Date asof;          // decision date (forecast date)
  Date date;          // date of the realized return
  Vector drifted;     // w_{t+}: holdings carried into the decision date
  Vector weights;     // holdings over the return day
  double ret = 0.0;
  double turnover = 0.0;
  bool rebalanced = false;
};

struct BacktestLedger {
  std::string strategy;
  RebalanceFrequency frequency = RebalanceFrequency::Daily;
  std::vector<LedgerEntry> entries;

  std::vector<double> returns() const {
    std::vector<double> r;
    for (const auto& e : entries) r.push_back(e.ret);
    return r;
  }
};

using TargetFn = std::function<Vector(std::size_t k)>;

/// Core loop. Starts from uniform holdings; on every step-th decision date the
/// holdings are replaced by target(k). Weights chosen at row t earn the return
/// at row t+1, then drift: w_i (1 + r_i) / sum_j w_j (1 + r_j). The first
/// allocation is not counted as turnover.
inline BacktestLedger backtest_with(const std::string& strategy, const ReturnPanel& panel,
                                    const std::vector<Index>& rows, RebalanceFrequency freq,
                                    const TargetFn& target) {
  BacktestLedger ledger;
  ledger.strategy = strategy;
  ledger.frequency = freq;
  const Index n = panel.assets();
  const Index step = rebalance_step(freq);
  Vector held = Vector::Constant(n, 1.0 / static_cast<double>(n));
  for (std::size_t k = 0; k < rows.size(); ++k) {
    const Index t = rows[k];
    if (t + 1 >= panel.days()) break;
    LedgerEntry e;
    e.asof = panel.dates[static_cast<std::size_t>(t)];
    e.date = panel.dates[static_cast<std::size_t>(t + 1)];
    e.drifted = held;
    if (static_cast<Index>(k) % step == 0) {
      Vector w = target(k);
      if (w.size() != n) throw ConfigError(strategy + ": target weights have wrong dimension");
      if (k > 0) e.turnover = (w - held).lpNorm<1>();
      e.rebalanced = true;
      held = std::move(w);
    }
    e.weights = held;
    const Eigen::RowVectorXd r = panel.returns.row(t + 1);
    e.ret = r.dot(held);
    const Vector grown = held.cwiseProduct((1.0 + r.array()).matrix().transpose());
    held = grown / grown.sum();
    ledger.entries.push_back(std::move(e));
  }
  return ledger;
}

/// GMV on each rebalance date's forecast. `run` must be dated on panel rows.
inline BacktestLedger run_backtest(const ForecastRun& run, const ReturnPanel& panel, RebalanceFrequency freq) {
  if (run.tickers != panel.tickers) throw DataError(run.model + ": forecast tickers differ from the panel");
  for (std::size_t k = 0; k < run.size(); ++k) {
    const Index t = run.rows[k];
    if (t < 0 || t >= panel.days() || panel.dates[static_cast<std::size_t>(t)] != run.dates[k]) {
      throw DataError(run.model + ": forecast dated " + format_date(run.dates[k]) + " is not on the panel");
    }
  }
  return backtest_with(run.model, panel, run.rows, freq,
                       [&](std::size_t k) { return solve_gmv(run.forecasts[k]).weights; });
}

inline constexpr std::string_view kEqualWeightId = "equal_weight";

inline BacktestLedger equal_weight_ledger(const ReturnPanel& panel, const std::vector<Index>& rows,
                                          RebalanceFrequency freq) {
  const Index n = panel.assets();
  return backtest_with(std::string(kEqualWeightId), panel, rows, freq,
                       [n](std::size_t) { return Vector::Constant(n, 1.0 / static_cast<double>(n)); });
}

/// 252 * (1/P) sum (r - mean)^2 over daily portfolio returns.
inline double annualized_variance(const BacktestLedger& ledger) {
  const auto r = ledger.returns();
  if (r.size() < 2) throw DataError(ledger.strategy + ": need at least 2 returns for a variance");
  double mean = 0.0;
  for (double v : r) mean += v;
  mean /= static_cast<double>(r.size());
  double ss = 0.0;
  for (double v : r) ss += (v - mean) * (v - mean);
  return kTradingDays * ss / static_cast<double>(r.size());
}

/// Mean 1-norm reallocation over rebalance events after the initial one.
inline double turnover(const BacktestLedger& ledger) {
  if (ledger.entries.empty()) throw DataError(ledger.strategy + ": empty ledger");
  double total = 0.0;
  Index events = 0;
  for (std::size_t k = 1; k < ledger.entries.size(); ++k) {
    if (!ledger.entries[k].rebalanced) continue;
    total += ledger.entries[k].turnover;
    ++events;
  }
  return events == 0 ? 0.0 : total / static_cast<double>(events);
}

struct FTestResult {
  double statistic = 1.0;
  double p_value = 0.5;  // one-sided, H1: var_a < var_b
  Index df_a = 0;
  Index df_b = 0;
};

inline double unbiased_variance(const std::vector<double>& x) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return ss / static_cast<double>(x.size() - 1);
}

inline FTestResult variance_f_test(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() < 30 || b.size() < 30) throw DataError("variance F-test needs at least 30 returns per ledger");
  const double va = unbiased_variance(a);
  const double vb = unbiased_variance(b);
  if (!(vb > 0.0)) throw NumericalError("variance F-test: zero variance in the denominator");
  FTestResult r;
  r.df_a = static_cast<Index>(a.size()) - 1;
  r.df_b = static_cast<Index>(b.size()) - 1;
  r.statistic = va / vb;
  boost::math::fisher_f dist(static_cast<double>(r.df_a), static_cast<double>(r.df_b));
  r.p_value = boost::math::cdf(dist, r.statistic);
  return r;
}

inline FTestResult variance_f_test(const BacktestLedger& a, const BacktestLedger& b) {
  return variance_f_test(a.returns(), b.returns());
}

// ---------------------------------------------------------------------------
// Output

struct SummaryRow {
  std::string strategy;
  RebalanceFrequency frequency = RebalanceFrequency::Daily;
  double variance = 0.0;
  double turnover = 0.0;
  std::optional<FTestResult> vs_equal_weight;
};

inline void write_ledger_csv(std::ostream& os, const std::vector<BacktestLedger>& ledgers) {
  os << "date,strategy,ret,turnover\n";
  char buf[96];
  for (const auto& l : ledgers)
    for (const auto& e : l.entries) {
      std::snprintf(buf, sizeof buf, ",%.17g,%.17g\n", e.ret, e.turnover);
      os << format_date(e.date) << ',' << l.strategy << buf;
    }
}

inline void write_summary_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << "strategy,freq,variance,turnover\n";
  char buf[96];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.10g,%.10g\n", r.variance, r.turnover);
    os << r.strategy << ',' << to_string(r.frequency) << buf;
  }
}

/// One-sided test of each strategy against the 1/N ledger of the same frequency.
inline void write_ftest_csv(std::ostream& os, const std::vector<SummaryRow>& rows) {
  os << "strategy,freq,f_statistic,p_value,lower_than_equal_weight\n";
  char buf[128];
  for (const auto& r : rows) {
    if (!r.vs_equal_weight) continue;
    std::snprintf(buf, sizeof buf, ",%.10g,%.6g,%d\n", r.vs_equal_weight->statistic, r.vs_equal_weight->p_value,
                  r.vs_equal_weight->statistic < 1.0 ? 1 : 0);
    os << r.strategy << ',' << to_string(r.frequency) << buf;
  }
}

}  // namespace covcast
