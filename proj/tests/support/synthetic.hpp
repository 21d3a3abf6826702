#pragma once

// Simulated data and finite-difference helpers shared by the unit tests and
// the acceptance runner.

#include "covcast/core.hpp"
#include "covcast/data_ingest.hpp"
#include "covcast/nn/layers.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace covcast::synth {

inline Matrix random_matrix(Index rows, Index cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> n(0.0, sd);
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline Matrix random_symmetric(Index n, std::mt19937_64& rng) { return symmetrize(random_matrix(n, n, rng)); }

/// A A^T / n + eps I: symmetric positive definite.
inline Matrix random_spd(Index n, std::mt19937_64& rng, double eps = 0.1) {
  const Matrix a = random_matrix(n, n, rng);
  return symmetrize(a * a.transpose() / static_cast<double>(n) + eps * Matrix::Identity(n, n));
}

/// Rank-deficient PSD matrix A A^T with A n x rank.
inline Matrix random_psd_rank(Index n, Index rank, std::mt19937_64& rng) {
  const Matrix a = random_matrix(n, rank, rng);
  return symmetrize(a * a.transpose());
}

/// T x N Gaussian draws with covariance `cov` (and zero mean).
inline Matrix gaussian_returns(const Matrix& cov, Index t, std::mt19937_64& rng) {
  const Matrix l = Eigen::LLT<Matrix>(cov).matrixL();
  return random_matrix(t, cov.rows(), rng) * l.transpose();
}

/// Univariate GARCH(1,1) residuals.
inline Vector simulate_garch(double omega, double alpha, double beta, Index t, std::mt19937_64& rng,
                             Index burn = 500) {
  std::normal_distribution<double> n(0.0, 1.0);
  double h = omega / (1.0 - alpha - beta);
  double e = 0.0;
  Vector out(t);
  for (Index k = -burn; k < t; ++k) {
    h = omega + alpha * e * e + beta * h;
    e = std::sqrt(h) * n(rng);
    if (k >= 0) out(k) = e;
  }
  return out;
}

/// Equicorrelation matrix with off-diagonal rho.
inline Matrix equicorrelation(Index n, double rho) {
  Matrix r = Matrix::Constant(n, n, rho);
  r.diagonal().setOnes();
  return r;
}

inline ReturnPanel make_panel(const Matrix& returns, Date start = Date{std::chrono::year{2015}, std::chrono::month{1},
                                                                      std::chrono::day{1}}) {
  ReturnPanel p;
  p.dates = business_days(start, static_cast<std::size_t>(returns.rows()));
  for (Index i = 0; i < returns.cols(); ++i) p.tickers.push_back("A" + std::to_string(i));
  p.returns = returns;
  p.mode = ReturnMode::Raw;
  return p;
}

/// Daily returns whose covariance switches between `regimes` every `block`
/// days, with volatilities scaled to daily magnitudes (~1%).
inline Matrix regime_switching_returns(Index n, Index t, Index block, std::mt19937_64& rng, int regimes = 2) {
  std::vector<Matrix> covs;
  for (int r = 0; r < regimes; ++r) {
    const double rho = r % 2 == 0 ? 0.2 : 0.7;
    const double vol = r % 2 == 0 ? 0.008 : 0.02;
    covs.push_back(equicorrelation(n, rho) * vol * vol);
  }
  Matrix out(t, n);
  for (Index s = 0; s < t; s += block) {
    const Index len = std::min(block, t - s);
    out.middleRows(s, len) = gaussian_returns(covs[static_cast<std::size_t>((s / block) % regimes)], len, rng);
  }
  return out;
}

/// Returns whose covariance follows a slow persistent process: volatility
/// moves along a long sinusoid plus a persistent AR(1) in log-volatility,
/// correlation drifts slowly.
inline Matrix persistent_returns(Index n, Index t, std::mt19937_64& rng, std::vector<Matrix>* true_cov = nullptr) {
  std::normal_distribution<double> z(0.0, 1.0);
  Vector logv = Vector::Zero(n);
  Matrix out(t, n);
  const double pi = 3.14159265358979323846;
  for (Index k = 0; k < t; ++k) {
    for (Index i = 0; i < n; ++i) logv(i) = 0.995 * logv(i) + 0.03 * z(rng);
    const double cycle = std::sin(2.0 * pi * static_cast<double>(k) / 250.0);
    const double rho = 0.4 + 0.25 * std::sin(2.0 * pi * static_cast<double>(k) / 400.0);
    Vector vol(n);
    for (Index i = 0; i < n; ++i) vol(i) = 0.01 * std::exp(0.5 * cycle + logv(i) + 0.1 * static_cast<double>(i));
    const Matrix cov = vol.asDiagonal() * equicorrelation(n, rho) * vol.asDiagonal();
    if (true_cov) true_cov->push_back(cov);
    out.row(k) = gaussian_returns(cov, 1, rng).row(0);
  }
  return out;
}

/// Long-format price CSV for a return matrix (prices start at 100).
inline std::string price_csv(const ReturnPanel& p) {
  std::ostringstream os;
  os.precision(17);
  os << "date,ticker,adj_close\n";
  std::vector<double> px(p.tickers.size(), 100.0);
  const Date first = from_day_number(to_day_number(p.dates.front()) - 1);
  for (std::size_t i = 0; i < px.size(); ++i) os << format_date(first) << ',' << p.tickers[i] << ',' << px[i] << '\n';
  for (Index t = 0; t < p.days(); ++t)
    for (std::size_t i = 0; i < px.size(); ++i) {
      px[i] *= 1.0 + p.returns(t, static_cast<Index>(i));
      os << format_date(p.dates[static_cast<std::size_t>(t)]) << ',' << p.tickers[i] << ',' << px[i] << '\n';
    }
  return os.str();
}

// ---------------------------------------------------------------------------
// Gradient checks

struct GradCheck {
  double max_rel_error = 0.0;
  int checked = 0;
};

/// Central differences (step h) on up to `samples` random entries of every
/// parameter; `loss` must be a deterministic function of the parameters.
inline GradCheck check_gradients(const std::vector<nn::Tensor>& params, const std::function<nn::Tensor()>& loss,
                                 int samples, std::mt19937_64& rng, double h = 1e-4, double floor = 1e-6) {
  for (auto p : params) p.zero_grad();
  nn::backward(loss());
  std::vector<nn::Buffer> analytic;
  for (const auto& p : params) analytic.push_back(p.grad_or_zero());
  GradCheck out;
  auto eval = [&] {
    nn::NoGradGuard g;
    return loss().item();
  };
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Tensor p = params[k];
    const Index n = p.numel();
    std::uniform_int_distribution<Index> pick(0, n - 1);
    const int m = static_cast<int>(std::min<Index>(n, samples));
    for (int s = 0; s < m; ++s) {
      const Index idx = n <= samples ? s : pick(rng);
      double& v = p.mutable_value().data()[idx];
      const double orig = v;
      v = orig + h;
      const double up = eval();
      v = orig - h;
      const double down = eval();
      v = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[k].data()[idx];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, rel);
      ++out.checked;
    }
  }
  return out;
}

}  // namespace covcast::synth
