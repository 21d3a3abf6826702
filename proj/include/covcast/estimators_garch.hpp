#pragma once

// Univariate GARCH(1,1) by Gaussian quasi-maximum likelihood, constant and
// dynamic conditional correlation forecasters, and analytical nonlinear
// eigenvalue shrinkage of the unconditional correlation target.
//
// Timing convention: a fit over residuals e_0..e_{n-1} exposes the one-step
// quantities h_{n} = w + a e_{n-1}^2 + b h_{n-1} and Q_{n}, R_{n}. Multi-step
// forecasts mean-revert from those one-step values.

#include "covcast/core.hpp"
#include "covcast/estimators_classical.hpp"
#include "covcast/forecaster.hpp"
#include "covcast/optimize.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace covcast {

inline constexpr double kPersistenceMargin = 1e-6;

struct GarchParams {
  double omega = 0.0;
  double alpha = 0.0;
  double beta = 0.0;
  double h_last = 0.0;  // last in-sample conditional variance

  double persistence() const { return alpha + beta; }
  double unconditional_variance() const { return omega / (1.0 - alpha - beta); }
};

struct GarchFit {
  GarchParams params;
  Vector variances;     // in-sample h_t
  Vector standardized;  // z_t = e_t / sqrt(h_t)
  double next_variance = 0.0;  // h_{n}, one step beyond the sample
  double log_likelihood = 0.0;
  bool fallback = false;
};

struct GarchOptions {
  Index min_length = 50;
};

namespace detail {

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// Negative Gaussian log-likelihood (constants dropped) of unit-variance
/// scaled residuals; h_0 = 1 (the sample variance after scaling).
inline double garch_nll(const Vector& e2, double omega, double alpha, double beta) {
  double h = 1.0;
  double nll = 0.0;
  for (Index t = 0; t < e2.size(); ++t) {
    if (t > 0) h = omega + alpha * e2(t - 1) + beta * h;
    if (!(h > 0.0)) return std::numeric_limits<double>::infinity();
    nll += std::log(h) + e2(t) / h;
  }
  return 0.5 * nll;
}

struct GarchTransform {
  // theta = (log omega, logit persistence share, logit alpha share)
  static Vector encode(double omega, double alpha, double beta) {
    const double p = (alpha + beta) / (1.0 - kPersistenceMargin);
    Vector th(3);
    th << std::log(omega), logit(p), logit(alpha / (alpha + beta));
    return th;
  }
  static void decode(const Vector& th, double& omega, double& alpha, double& beta) {
    omega = std::exp(th(0));
    const double p = (1.0 - kPersistenceMargin) * logistic(th(1));
    const double s = logistic(th(2));
    alpha = p * s;
    beta = p - alpha;
  }
};

}  // namespace detail

/// Runs h_t = w + a e_{t-1}^2 + b h_{t-1} from h_0 = h0 over `residuals`.
inline Vector garch_filter(const Vector& residuals, const GarchParams& p, double h0) {
  Vector h(residuals.size());
  for (Index t = 0; t < residuals.size(); ++t) {
    h(t) = t == 0 ? h0 : p.omega + p.alpha * residuals(t - 1) * residuals(t - 1) + p.beta * h(t - 1);
  }
  return h;
}

/// Gaussian QML fit. Falls back to (a, b) = (0.05, 0.90) with omega
/// targeting the sample variance when the optimizer does not converge.
inline GarchFit fit_garch11(const Vector& residuals, const GarchOptions& opt = {}) {
  const Index n = residuals.size();
  if (n < opt.min_length) {
    throw DataError("fit_garch11: need at least " + std::to_string(opt.min_length) +
                    " residuals, got " + std::to_string(n));
  }
  if (!residuals.allFinite()) throw NumericalError("fit_garch11: non-finite residuals");
  const double var = residuals.squaredNorm() / static_cast<double>(n);
  if (!(var > 0.0)) throw NumericalError("fit_garch11: degenerate likelihood (zero variance)");

  const Vector e2 = residuals.array().square().matrix() / var;
  auto objective = [&](const Vector& th) {
    double w, a, b;
    detail::GarchTransform::decode(th, w, a, b);
    return detail::garch_nll(e2, w, a, b);
  };

  struct Start {
    double alpha, beta;
  };
  const Start starts[] = {{0.05, 0.90}, {0.10, 0.80}, {0.02, 0.30}};
  MinimizeResult best;
  best.value = std::numeric_limits<double>::infinity();
  bool any_converged = false;
  for (const auto& s : starts) {
    const Vector th0 = detail::GarchTransform::encode(1.0 - s.alpha - s.beta, s.alpha, s.beta);
    auto r = nelder_mead(objective, th0, {0.5, 1e-8, 3000});
    if (r.converged) any_converged = true;
    if (r.converged && r.value < best.value) best = r;
  }

  GarchFit fit;
  double w, a, b;
  if (any_converged) {
    detail::GarchTransform::decode(best.x, w, a, b);
    fit.log_likelihood = -best.value;
  } else {
    a = 0.05;
    b = 0.90;
    w = 1.0 - a - b;
    fit.fallback = true;
    fit.log_likelihood = -detail::garch_nll(e2, w, a, b);
  }
  fit.params.omega = w * var;
  fit.params.alpha = a;
  fit.params.beta = b;
  fit.variances = garch_filter(residuals, fit.params, var);
  fit.params.h_last = fit.variances(n - 1);
  fit.next_variance = fit.params.omega + a * residuals(n - 1) * residuals(n - 1) + b * fit.params.h_last;
  fit.standardized = residuals.cwiseQuotient(fit.variances.cwiseSqrt());
  return fit;
}

/// h_{t+f} = sum_{j<f} w (a+b)^j + (a+b)^f h_t for f = 1..steps, with h_t = h_last.
inline Vector garch_variance_path(const GarchParams& p, int steps) {
  if (steps < 1) throw ConfigError("garch_variance_path: steps must be >= 1");
  const double k = p.persistence();
  Vector out(steps);
  double geometric = 0.0;  // sum_{j<f} k^j
  double power = 1.0;      // k^f
  for (int f = 1; f <= steps; ++f) {
    geometric += power;
    power *= k;
    out(f - 1) = p.omega * geometric + power * p.h_last;
  }
  return out;
}

/// h_{t+1..t+F}: the one-step value, then mean reversion from it.
inline Vector garch_forecast(const GarchFit& fit, int horizon) {
  Vector out(horizon);
  out(0) = fit.next_variance;
  if (horizon > 1) {
    GarchParams from_next = fit.params;
    from_next.h_last = fit.next_variance;
    out.tail(horizon - 1) = garch_variance_path(from_next, horizon - 1);
  }
  return out;
}

/// Pearson correlation of the columns of z.
inline Matrix sample_correlation(const Matrix& z) {
  if (z.rows() < 2) throw DataError("sample_correlation: need at least 2 rows");
  const Eigen::RowVectorXd mu = z.colwise().mean();
  const Matrix c = z.rowwise() - mu;
  const Matrix cov = (c.transpose() * c) / static_cast<double>(z.rows() - 1);
  for (Index i = 0; i < cov.rows(); ++i) {
    if (!(cov(i, i) > 0.0)) throw NumericalError("sample_correlation: zero-variance column");
  }
  return normalize_to_correlation(cov);
}

/// (1/F) sum_f D_{t+f} R_{t+f} D_{t+f} with D = diag(sqrt(h)).
/// `variances` is N x F, `correlations` holds F matrices (or one, reused).
inline Matrix average_conditional_cov(const Matrix& variances, const std::vector<Matrix>& correlations) {
  const Index n = variances.rows();
  const Index horizon = variances.cols();
  Matrix acc = Matrix::Zero(n, n);
  for (Index f = 0; f < horizon; ++f) {
    const Vector d = variances.col(f).cwiseSqrt();
    const Matrix& r = correlations.size() == 1 ? correlations.front()
                                               : correlations[static_cast<std::size_t>(f)];
    acc += d.asDiagonal() * r * d.asDiagonal();
  }
  return symmetrize(acc / static_cast<double>(horizon));
}

// ---------------------------------------------------------------------------
// DCC

struct DccParams {
  double alpha = 0.0;
  double beta = 0.0;
  Matrix qbar;    // unconditional correlation target (unit diagonal)
  Matrix q_last;  // Q one step beyond the sample
  Matrix r_last;  // normalized q_last
  bool fallback = false;

  double persistence() const { return alpha + beta; }
};

/// Q_{t+1} = (1 - a - b) Qbar + a z_t z_t' + b Q_t.
inline Matrix dcc_update(const Matrix& qbar, double alpha, double beta, const Matrix& q,
                         const Vector& z) {
  return (1.0 - alpha - beta) * qbar + alpha * (z * z.transpose()) + beta * q;
}

namespace detail {

/// Second-stage negative log-likelihood sum_t 0.5 (log|R_t| + z_t' R_t^-1 z_t).
inline double dcc_nll(const Matrix& z, const Matrix& qbar, double alpha, double beta) {
  Matrix q = qbar;
  double nll = 0.0;
  Eigen::LLT<Matrix> llt;
  for (Index t = 0; t < z.rows(); ++t) {
    if (t > 0) q = dcc_update(qbar, alpha, beta, q, z.row(t - 1).transpose());
    const Vector inv = q.diagonal().cwiseSqrt().cwiseInverse();
    const Matrix r = inv.asDiagonal() * q * inv.asDiagonal();
    llt.compute(r);
    if (llt.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
    const Vector y = llt.matrixL().solve(z.row(t).transpose());
    double logdet = 0.0;
    for (Index i = 0; i < r.rows(); ++i) logdet += std::log(llt.matrixL()(i, i));
    nll += logdet + 0.5 * y.squaredNorm();
  }
  return nll;
}

}  // namespace detail

/// Fits (a, b) of the correlation recursion by maximum likelihood.
/// `qbar` defaults to the sample correlation of z.
inline DccParams fit_dcc(const Matrix& z, const Matrix* qbar_override = nullptr) {
  if (z.rows() < 3) throw DataError("fit_dcc: need at least 3 observations");
  if (!z.allFinite()) throw NumericalError("fit_dcc: non-finite residuals");
  DccParams p;
  p.qbar = qbar_override ? normalize_to_correlation(*qbar_override) : sample_correlation(z);

  auto decode = [](const Vector& th, double& a, double& b) {
    const double pers = (1.0 - kPersistenceMargin) * detail::logistic(th(0));
    a = pers * detail::logistic(th(1));
    b = pers - a;
  };
  auto objective = [&](const Vector& th) {
    double a, b;
    decode(th, a, b);
    return detail::dcc_nll(z, p.qbar, a, b);
  };
  Vector th0(2);
  th0 << detail::logit(0.97 / (1.0 - kPersistenceMargin)), detail::logit(0.02 / 0.97);
  const auto r = nelder_mead(objective, th0, {0.5, 1e-8, 2000});
  if (r.converged) {
    decode(r.x, p.alpha, p.beta);
  } else {
    p.alpha = 0.02;
    p.beta = 0.95;
    p.fallback = true;
  }

  Matrix q = p.qbar;
  for (Index t = 0; t < z.rows(); ++t) q = dcc_update(p.qbar, p.alpha, p.beta, q, z.row(t).transpose());
  p.q_last = q;
  p.r_last = normalize_to_correlation(q);
  return p;
}

/// R_{t+1} = r_last; R_{t+f} = (1 - k^{f-1}) Qbar + k^{f-1} R_{t+1}, k = a + b,
/// each renormalized to unit diagonal.
inline std::vector<Matrix> dcc_correlation_path(const DccParams& p, int horizon) {
  if (horizon < 1) throw ConfigError("dcc_correlation_path: horizon must be >= 1");
  std::vector<Matrix> out;
  out.reserve(static_cast<std::size_t>(horizon));
  const double k = p.persistence();
  double power = 1.0;
  for (int f = 1; f <= horizon; ++f) {
    out.push_back(normalize_to_correlation((1.0 - power) * p.qbar + power * p.r_last));
    power *= k;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Nonlinear shrinkage

struct NlShrinkConfig {
  double bandwidth_exponent = 0.35;  // h = T^-exponent
};

/// Analytical nonlinear shrinkage of a sample correlation matrix: eigenvalues
/// pass through the oracle map using an Epanechnikov kernel estimate of the
/// spectral density and its Hilbert transform, then the diagonal is rescaled
/// back to one.
inline Matrix nl_shrink_correlation(const Matrix& upsilon, Index sample_size,
                                    const NlShrinkConfig& cfg = {}) {
  require_square(upsilon, "nl_shrink_correlation");
  const Index n = upsilon.rows();
  if (sample_size <= 0) throw ConfigError("nl_shrink_correlation: sample size must be positive");
  const double c = static_cast<double>(n) / static_cast<double>(sample_size);
  if (c >= 1.0) {
    throw NumericalError("nl_shrink_correlation: concentration N/T = " + std::to_string(c) +
                         " outside the supported regime (< 1)");
  }
  const double h = std::pow(static_cast<double>(sample_size), -cfg.bandwidth_exponent);
  const double pi = std::numbers::pi;
  const double sqrt5 = std::sqrt(5.0);

  Matrix shrunk = spectral_map(upsilon, [&](const Vector& lam) {
    Vector out(n);
    for (Index i = 0; i < n; ++i) {
      double dens = 0.0;
      double hilbert = 0.0;
      for (Index j = 0; j < n; ++j) {
        const double bw = h * lam(j);
        const double x = (lam(i) - lam(j)) / bw;
        const double kern = 1.0 - x * x / 5.0;
        dens += std::max(kern, 0.0) * 3.0 / (4.0 * sqrt5 * bw);
        double ht = -3.0 * x / (10.0 * pi);
        if (std::abs(std::abs(x) - sqrt5) > 1e-12) {
          ht += 3.0 / (4.0 * sqrt5 * pi) * kern * std::log(std::abs((sqrt5 - x) / (sqrt5 + x)));
        }
        hilbert += ht / bw;
      }
      dens /= static_cast<double>(n);
      hilbert /= static_cast<double>(n);
      const double a = pi * c * lam(i) * dens;
      const double b = 1.0 - c - pi * c * lam(i) * hilbert;
      out(i) = lam(i) / (a * a + b * b);
    }
    return out;
  });
  return normalize_to_correlation(shrunk);
}

// ---------------------------------------------------------------------------
// Forecasters

enum class GarchKind { Ccc, Dcc, DccNl };

struct GarchForecastOptions {
  GarchOptions garch;
  NlShrinkConfig shrink;
  Index estimation_window = 0;  // 0 = expanding history
};

/// Residual matrix e_t = r_t - mu_t for rows F-1..t (rolling F-day mean).
inline Matrix rolling_residuals(const History& history, int window) {
  const Index t = history.rows();
  if (t < window) throw DataError("rolling_residuals: insufficient history");
  Matrix out(t - window + 1, history.cols());
  const Matrix head = history.topRows(window);
  Eigen::RowVectorXd sum = head.colwise().sum();
  for (Index k = window - 1; k < t; ++k) {
    if (k >= window) sum += history.row(k) - history.row(k - window);
    out.row(k - window + 1) = history.row(k) - sum / static_cast<double>(window);
  }
  return out;
}

struct GarchFamilyDiagnostics {
  int garch_fallbacks = 0;
  int dcc_fallbacks = 0;
  int shrink_fallbacks = 0;
};

/// CCC / DCC / DCC-NL refit on every call over the expanding (or trailing)
/// residual window.
class GarchForecaster final : public Forecaster {
 public:
  GarchForecaster(GarchKind kind, int window, GarchForecastOptions opt = {})
      : kind_(kind), window_(window), opt_(opt) {
    if (window < 2) throw ConfigError("window F must be >= 2");
  }

  std::string id() const override {
    switch (kind_) {
      case GarchKind::Ccc: return "ccc";
      case GarchKind::Dcc: return "dcc";
      case GarchKind::DccNl: return "dcc_nl";
    }
    return "unknown";
  }

  Index min_history() const override { return window_ - 1 + opt_.garch.min_length; }

  const GarchFamilyDiagnostics& diagnostics() const { return diag_; }

  Matrix forecast(const History& history) override {
    Matrix e = rolling_residuals(history, window_);
    if (opt_.estimation_window > 0 && e.rows() > opt_.estimation_window) {
      e = e.bottomRows(opt_.estimation_window).eval();
    }
    const Index n = e.cols();
    Matrix z(e.rows(), n);
    Matrix variances(n, window_);
    for (Index i = 0; i < n; ++i) {
      const GarchFit fit = fit_garch11(e.col(i), opt_.garch);
      if (fit.fallback) ++diag_.garch_fallbacks;
      z.col(i) = fit.standardized;
      variances.row(i) = garch_forecast(fit, window_).transpose();
    }
    if (n == 1) return average_conditional_cov(variances, {Matrix::Ones(1, 1)});

    if (kind_ == GarchKind::Ccc) return average_conditional_cov(variances, {sample_correlation(z)});

    DccParams params;
    if (kind_ == GarchKind::DccNl) {
      try {
        const Matrix target = nl_shrink_correlation(sample_correlation(z), z.rows(), opt_.shrink);
        params = fit_dcc(z, &target);
      } catch (const Error&) {
        ++diag_.shrink_fallbacks;
        params = fit_dcc(z);
      }
    } else {
      params = fit_dcc(z);
    }
    if (params.fallback) ++diag_.dcc_fallbacks;
    return average_conditional_cov(variances, dcc_correlation_path(params, window_));
  }

 private:
  GarchKind kind_;
  int window_;
  GarchForecastOptions opt_;
  GarchFamilyDiagnostics diag_;
};

}  // namespace covcast
