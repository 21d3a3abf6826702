#pragma once

// Naive, exponentially weighted, PCA, random-matrix and Ledoit-Wolf
// forecasters. All take the return history up to t and the horizon F.

#include "covcast/core.hpp"
#include "covcast/forecaster.hpp"
#include "covcast/rolling_stats.hpp"

#include <algorithm>
#include <cmath>

namespace covcast {

using History = Eigen::Ref<const Matrix>;

inline Index last_row(const History& h) { return h.rows() - 1; }

/// Trailing realized covariance, unchanged.
inline Matrix forecast_na(const History& history, int window) {
  return realized_cov(history, window, last_row(history));
}

/// Sample covariance of the whole history.
inline Matrix forecast_na_full(const History& history) {
  return full_sample_cov(history, last_row(history));
}

/// e_t = r_t - mu_t with mu_t the trailing F-day mean.
inline Vector rolling_residual(const History& history, int window) {
  const Index t = last_row(history);
  return history.row(t).transpose() - rolling_mean(history, t, window);
}

struct EwmaConfig {
  double eta = 0.94;

  void validate() const {
    if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("EWMA eta must lie in [0, 1]");
  }
};

/// (1 - eta) e_t e_t' + eta * Sigma_{t-F:t}.
inline Matrix forecast_ewma(const History& history, int window, const EwmaConfig& cfg = {}) {
  cfg.validate();
  const Vector e = rolling_residual(history, window);
  const Matrix trailing = forecast_na(history, window);
  if (cfg.eta == 1.0) return trailing;
  return (1.0 - cfg.eta) * (e * e.transpose()) + cfg.eta * trailing;
}

struct PcaConfig {
  double variance_fraction = 0.95;

  void validate() const {
    if (!(variance_fraction > 0.0 && variance_fraction <= 1.0)) {
      throw ConfigError("PCA variance fraction must lie in (0, 1]");
    }
  }
};

struct PcaResult {
  Matrix values;
  Index components = 0;
};

/// Keeps the smallest k leading eigenpairs holding at least the configured
/// share of total eigenvalue mass.
inline PcaResult pca_filter(const Matrix& cov, const PcaConfig& cfg = {}) {
  cfg.validate();
  PcaResult out;
  out.values = spectral_map(cov, [&](const Vector& lam) {
    const Index n = lam.size();
    const double total = lam.sum();
    // Eigen returns ascending eigenvalues; walk from the top.
    Index k = 0;
    double cum = 0.0;
    while (k < n) {
      cum += lam(n - 1 - k);
      ++k;
      if (cum >= cfg.variance_fraction * total * (1.0 - 1e-12)) break;
    }
    out.components = k;
    Vector kept = Vector::Zero(n);
    kept.tail(k) = lam.tail(k);
    return kept;
  });
  return out;
}

inline Matrix forecast_pca(const History& history, int window, const PcaConfig& cfg = {}) {
  return pca_filter(forecast_na(history, window), cfg).values;
}

/// Marchenko-Pastur edges (1 +/- 1/sqrt(q))^2.
struct MarchenkoPasturBand {
  double lower = 0.0;
  double upper = 0.0;
};

inline MarchenkoPasturBand marchenko_pastur_band(double q) {
  if (!(q > 0.0)) throw ConfigError("RMT ratio q must be positive");
  const double s = 1.0 / std::sqrt(q);
  return {(1.0 - s) * (1.0 - s), (1.0 + s) * (1.0 + s)};
}

/// Eigenvalues inside [lambda-, lambda+] are replaced by the band midpoint.
inline Matrix rmt_filter(const Matrix& cov, double q) {
  const auto band = marchenko_pastur_band(q);
  const double mid = 0.5 * (band.lower + band.upper);
  bool touched = false;
  Matrix out = spectral_map(cov, [&](const Vector& lam) {
    Vector f = lam;
    for (Index i = 0; i < f.size(); ++i) {
      if (!(lam(i) > band.upper || lam(i) < band.lower)) {
        f(i) = mid;
        touched = true;
      }
    }
    return f;
  });
  return touched ? out : cov;
}

/// q = F / N from the estimation window.
inline Matrix forecast_rmt(const History& history, int window) {
  const double q = static_cast<double>(window) / static_cast<double>(history.cols());
  return rmt_filter(forecast_na(history, window), q);
}

struct ShrinkageResult {
  double rho = 0.0;
  Matrix target;
  bool degenerate = false;  // zero denominator, rho forced to 0
};

/// rho * T + (1 - rho) * S.
inline Matrix shrink_to_target(const Matrix& sample, const Matrix& target, double rho) {
  if (rho == 0.0) return sample;
  if (rho == 1.0) return target;
  return rho * target + (1.0 - rho) * sample;
}

/// Linear shrinkage towards (tr(S)/N) I. `window` holds the observations S
/// was estimated from; Var(s_ij) is the sample variance of the per-period
/// cross-products divided by the window length.
inline std::pair<Matrix, ShrinkageResult> lw_shrink(const Matrix& sample, const History& window) {
  require_square(sample, "lw_shrink");
  const Index n = sample.rows();
  const Index obs = window.rows();
  if (window.cols() != n) throw DataError("lw_shrink: window has wrong asset count");
  if (obs < 2) throw DataError("lw_shrink: need at least 2 observations");

  ShrinkageResult res;
  res.target = Matrix::Identity(n, n) * (sample.trace() / static_cast<double>(n));

  const Matrix obs_block = window;
  const Eigen::RowVectorXd mu = obs_block.colwise().mean();
  const Matrix x = obs_block.rowwise() - mu;
  double numerator = 0.0;
  double denominator = 0.0;
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      if (i == j) continue;
      const Vector w = x.col(i).cwiseProduct(x.col(j));
      const double wbar = w.mean();
      const double var_w = (w.array() - wbar).square().sum() / static_cast<double>(obs - 1);
      numerator += var_w / static_cast<double>(obs);
      const double d = sample(i, j) - res.target(i, j);
      denominator += d * d;
    }
  }
  if (denominator <= 0.0) {
    res.rho = 0.0;
    res.degenerate = true;
  } else {
    res.rho = std::clamp(numerator / denominator, 0.0, 1.0);
  }
  return {shrink_to_target(sample, res.target, res.rho), std::move(res)};
}

inline Matrix forecast_lw(const History& history, int window) {
  const Index t = last_row(history);
  const Matrix sample = forecast_na(history, window);
  return lw_shrink(sample, history.middleRows(t - window + 1, window)).first;
}

inline Matrix forecast_lw_full(const History& history) {
  return lw_shrink(forecast_na_full(history), history).first;
}

// ---------------------------------------------------------------------------
// Forecaster adapters

enum class ClassicalKind { Naive, NaiveFull, Ewma, Pca, Rmt, LedoitWolf, LedoitWolfFull };

class ClassicalForecaster final : public Forecaster {
 public:
  ClassicalForecaster(ClassicalKind kind, int window, EwmaConfig ewma = {}, PcaConfig pca = {})
      : kind_(kind), window_(window), ewma_(ewma), pca_(pca) {
    if (window < 2) throw ConfigError("window F must be >= 2");
    ewma_.validate();
    pca_.validate();
  }

  std::string id() const override {
    switch (kind_) {
      case ClassicalKind::Naive: return "na";
      case ClassicalKind::NaiveFull: return "na_full";
      case ClassicalKind::Ewma: return "ewma";
      case ClassicalKind::Pca: return "pca";
      case ClassicalKind::Rmt: return "rmt";
      case ClassicalKind::LedoitWolf: return "lw";
      case ClassicalKind::LedoitWolfFull: return "lw_full";
    }
    return "unknown";
  }

  Index min_history() const override { return window_; }

  Matrix forecast(const History& history) override {
    if (history.rows() < window_) throw DataError(id() + ": insufficient history");
    switch (kind_) {
      case ClassicalKind::Naive: return forecast_na(history, window_);
      case ClassicalKind::NaiveFull: return forecast_na_full(history);
      case ClassicalKind::Ewma: return forecast_ewma(history, window_, ewma_);
      case ClassicalKind::Pca: return forecast_pca(history, window_, pca_);
      case ClassicalKind::Rmt: return forecast_rmt(history, window_);
      case ClassicalKind::LedoitWolf: return forecast_lw(history, window_);
      case ClassicalKind::LedoitWolfFull: return forecast_lw_full(history);
    }
    throw ConfigError("unknown classical model");
  }

 private:
  ClassicalKind kind_;
  int window_;
  EwmaConfig ewma_;
  PcaConfig pca_;
};

}  // namespace covcast
