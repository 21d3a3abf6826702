#pragma once

// Trailing-window moments, realized covariance matrices (both the naive
// forecast and the evaluation target), full-sample covariance, per-entry
// standardization and lookback sequences.

#include "covcast/core.hpp"
#include "covcast/data_ingest.hpp"

#include <ostream>
#include <string>
#include <vector>

namespace covcast {

/// F is both the forecast horizon and the realized-covariance window.
struct RollingConfig {
  int window = 20;   // F
  int lookback = 100;  // L

  void validate() const {
    if (window < 2) throw ConfigError("window F must be >= 2");
    if (lookback < 0) throw ConfigError("lookback L must be >= 0");
  }
};

struct CovMatrix {
  Matrix values;
  Date asof;
  Date window_start;
  Date window_end;
};

struct RollingMoments {
  Date asof;
  Vector mean;
  Vector std;
};

/// Mean of rows [t-F+1, t].
inline Vector rolling_mean(const Eigen::Ref<const Matrix>& returns, Index t, int window) {
  if (t + 1 < window || t >= returns.rows()) {
    throw DataError("insufficient history: need " + std::to_string(window) +
                    " observations ending at row " + std::to_string(t));
  }
  const Matrix block = returns.middleRows(t - window + 1, window);
  return block.colwise().mean().transpose();
}

/// Realized covariance over rows [t-F+1, t] with the F-1 denominator.
inline Matrix realized_cov(const Eigen::Ref<const Matrix>& returns, int window, Index t) {
  if (window < 2) throw ConfigError("realized covariance window must be >= 2");
  if (t + 1 < window || t >= returns.rows()) {
    throw DataError("insufficient history: need " + std::to_string(window) +
                    " observations ending at row " + std::to_string(t));
  }
  const Matrix block = returns.middleRows(t - window + 1, window);
  const Eigen::RowVectorXd mu = block.colwise().mean();
  const Matrix centered = block.rowwise() - mu;
  Matrix cov = (centered.transpose() * centered) / static_cast<double>(window - 1);
  return symmetrize(cov);
}

/// Dated wrapper around realized_cov.
inline CovMatrix realized_cov(const ReturnPanel& panel, int window, const Date& asof) {
  const Index t = panel.index_at_or_after(asof);
  if (t >= panel.days() || !(panel.dates[static_cast<std::size_t>(t)] == asof)) {
    throw DataError("date " + format_date(asof) + " not in return panel");
  }
  CovMatrix out;
  out.values = realized_cov(panel.returns, window, t);
  out.asof = asof;
  out.window_end = asof;
  if (t + 1 >= window) out.window_start = panel.dates[static_cast<std::size_t>(t - window + 1)];
  return out;
}

/// Sample covariance of every row up to and including `upto`.
inline Matrix full_sample_cov(const Eigen::Ref<const Matrix>& returns, Index upto) {
  if (upto < 1 || upto >= returns.rows()) {
    throw DataError("full-sample covariance needs at least 2 observations");
  }
  return realized_cov(returns, static_cast<int>(upto + 1), upto);
}

inline CovMatrix full_sample_cov(const ReturnPanel& panel, const Date& upto) {
  Index t = panel.index_at_or_after(upto);
  if (t >= panel.days() || upto < panel.dates[static_cast<std::size_t>(t)]) --t;
  if (t < 1) throw DataError("full-sample covariance needs at least 2 observations");
  CovMatrix out;
  out.values = full_sample_cov(panel.returns, t);
  out.asof = panel.dates[static_cast<std::size_t>(t)];
  out.window_start = panel.dates.front();
  out.window_end = out.asof;
  return out;
}

/// Trailing mean and standard deviation for every date with a full window.
inline std::vector<RollingMoments> rolling_moments(const ReturnPanel& panel, int window) {
  if (window < 2) throw ConfigError("window F must be >= 2");
  if (panel.days() < window) {
    throw DataError("insufficient history: window " + std::to_string(window) + " exceeds " +
                    std::to_string(panel.days()) + " observations");
  }
  std::vector<RollingMoments> out;
  out.reserve(static_cast<std::size_t>(panel.days() - window + 1));
  for (Index t = window - 1; t < panel.days(); ++t) {
    const Matrix block = panel.returns.middleRows(t - window + 1, window);
    Vector mu = block.colwise().mean().transpose();
    Vector var = (block.rowwise() - mu.transpose()).array().square().colwise().sum().transpose() /
                 static_cast<double>(window - 1);
    out.push_back({panel.dates[static_cast<std::size_t>(t)], std::move(mu), var.cwiseSqrt()});
  }
  return out;
}

/// Realized covariance for every date with a full window.
inline std::vector<CovMatrix> realized_cov_series(const ReturnPanel& panel, int window) {
  std::vector<CovMatrix> out;
  for (Index t = window - 1; t < panel.days(); ++t) {
    CovMatrix c;
    c.values = realized_cov(panel.returns, window, t);
    c.asof = panel.dates[static_cast<std::size_t>(t)];
    c.window_start = panel.dates[static_cast<std::size_t>(t - window + 1)];
    c.window_end = c.asof;
    out.push_back(std::move(c));
  }
  return out;
}

/// Audit dump: one `date,i,j,value` row per entry.
inline void write_cov_csv(std::ostream& os, const std::vector<CovMatrix>& series) {
  os << "date,i,j,value\n";
  os.precision(17);
  for (const auto& c : series) {
    const std::string d = format_date(c.asof);
    for (Index i = 0; i < c.values.rows(); ++i) {
      for (Index j = 0; j < c.values.cols(); ++j) {
        os << d << ',' << i << ',' << j << ',' << c.values(i, j) << '\n';
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Standardization

/// Per-entry standardization of covariance matrices, fitted on training data.
struct Scaler {
  Matrix means;
  Matrix stds;

  Matrix apply(const Matrix& x) const { return ((x - means).array() / stds.array()).matrix(); }
  Matrix invert(const Matrix& z) const { return (z.array() * stds.array()).matrix() + means; }
};

/// Population mean/std per entry. Entries whose training std is zero (up to
/// rounding) get std = 1.
inline Scaler fit_scaler(const std::vector<Matrix>& training) {
  if (training.empty()) throw DataError("fit_scaler: empty training set");
  const Index n = training.front().rows();
  const Index m = training.front().cols();
  Scaler s;
  s.means = Matrix::Zero(n, m);
  for (const auto& x : training) {
    if (x.rows() != n || x.cols() != m) throw DataError("fit_scaler: inconsistent shapes");
    s.means += x;
  }
  s.means /= static_cast<double>(training.size());
  Matrix var = Matrix::Zero(n, m);
  for (const auto& x : training) var.array() += (x - s.means).array().square();
  var /= static_cast<double>(training.size());
  s.stds = var.cwiseSqrt();
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) {
      const double scale = std::max(std::abs(s.means(i, j)), std::numeric_limits<double>::min());
      if (!(s.stds(i, j) > 1e-12 * scale)) s.stds(i, j) = 1.0;
    }
  }
  return s;
}

inline Scaler fit_scaler(const std::vector<CovMatrix>& training) {
  std::vector<Matrix> values;
  values.reserve(training.size());
  for (const auto& c : training) values.push_back(c.values);
  return fit_scaler(values);
}

inline Matrix apply_scaler(const Scaler& s, const Matrix& x) { return s.apply(x); }
inline Matrix invert_scaler(const Scaler& s, const Matrix& z) { return s.invert(z); }

/// L+1 scaled matrices ending at `asof`.
struct CovSequence {
  Date asof;
  std::vector<Matrix> matrices;
};

/// One sequence per date with L predecessors, stride one day.
inline std::vector<CovSequence> build_sequences(const std::vector<CovMatrix>& covs, int lookback,
                                                const Scaler& scaler) {
  if (lookback < 0) throw ConfigError("lookback must be >= 0");
  const auto len = static_cast<std::size_t>(lookback) + 1;
  if (covs.size() < len) {
    throw DataError("build_sequences: series of " + std::to_string(covs.size()) +
                    " matrices is shorter than L+1 = " + std::to_string(len));
  }
  std::vector<Matrix> scaled;
  scaled.reserve(covs.size());
  for (const auto& c : covs) scaled.push_back(scaler.apply(c.values));

  std::vector<CovSequence> out;
  out.reserve(covs.size() - len + 1);
  for (std::size_t end = len - 1; end < covs.size(); ++end) {
    CovSequence seq;
    seq.asof = covs[end].asof;
    seq.matrices.assign(scaled.begin() + static_cast<std::ptrdiff_t>(end + 1 - len),
                        scaled.begin() + static_cast<std::ptrdiff_t>(end + 1));
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace covcast
