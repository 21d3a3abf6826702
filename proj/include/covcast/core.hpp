#pragma once

// Shared vocabulary: matrix aliases, error categories, calendar dates and a
// handful of symmetric-matrix helpers used by every forecaster.

#include <Eigen/Dense>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace covcast {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration or arguments (CLI exit code 2).
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Malformed, misaligned or insufficient input data (CLI exit code 3).
class DataError : public Error {
 public:
  using Error::Error;
};

/// Numerical breakdown: non-finite values, failed decompositions, NaN loss
/// (CLI exit code 4).
class NumericalError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Dates

using Date = std::chrono::year_month_day;

inline Date parse_date(std::string_view text) {
  int y = 0;
  unsigned m = 0, d = 0;
  char tail = 0;
  std::string buf(text);
  if (std::sscanf(buf.c_str(), "%d-%u-%u%c", &y, &m, &d, &tail) != 3) {
    throw DataError("invalid ISO-8601 date '" + buf + "'");
  }
  Date date{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!date.ok()) throw DataError("invalid calendar date '" + buf + "'");
  return date;
}

inline std::string format_date(const Date& d) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(d.year()),
                static_cast<unsigned>(d.month()), static_cast<unsigned>(d.day()));
  return buf;
}

inline int to_day_number(const Date& d) {
  return std::chrono::sys_days{d}.time_since_epoch().count();
}

inline Date from_day_number(int n) {
  return Date{std::chrono::sys_days{std::chrono::days{n}}};
}

/// Monday..Friday calendar starting at `start` (weekend starts roll forward).
inline std::vector<Date> business_days(Date start, std::size_t count) {
  std::vector<Date> out;
  out.reserve(count);
  std::chrono::sys_days day{start};
  while (out.size() < count) {
    std::chrono::weekday wd{day};
    if (wd != std::chrono::Saturday && wd != std::chrono::Sunday) out.emplace_back(day);
    day += std::chrono::days{1};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Symmetric matrix helpers

inline void require_square(const Matrix& m, std::string_view what) {
  if (m.rows() != m.cols()) {
    throw ConfigError(std::string(what) + ": matrix must be square, got " +
                      std::to_string(m.rows()) + "x" + std::to_string(m.cols()));
  }
}

inline void require_finite(const Matrix& m, std::string_view what) {
  if (!m.allFinite()) throw NumericalError(std::string(what) + ": non-finite entries");
}

/// (Y + Y^T) / 2, the nearest symmetric matrix in Frobenius norm.
inline Matrix symmetrize(const Matrix& y) {
  require_square(y, "symmetrize");
  return 0.5 * (y + y.transpose());
}

inline double max_asymmetry(const Matrix& m) {
  return (m - m.transpose()).cwiseAbs().maxCoeff();
}

inline Vector eigenvalues_sym(const Matrix& m) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(m, Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw NumericalError("eigenvalue decomposition failed");
  return es.eigenvalues();
}

inline double min_eigenvalue(const Matrix& m) { return eigenvalues_sym(m).minCoeff(); }

/// Symmetric to 1e-12 and min eigenvalue >= -1e-10 * trace.
inline bool is_valid_covariance(const Matrix& m, double sym_tol = 1e-12, double psd_rel = 1e-10) {
  if (m.rows() != m.cols() || !m.allFinite()) return false;
  if (max_asymmetry(m) >= sym_tol) return false;
  const double tr = std::max(m.trace(), 0.0);
  return min_eigenvalue(m) >= -psd_rel * tr;
}

/// D^{-1/2} M D^{-1/2} with D = diag(M); exact unit diagonal.
inline Matrix normalize_to_correlation(const Matrix& m) {
  require_square(m, "normalize_to_correlation");
  Vector inv = m.diagonal().cwiseSqrt().cwiseInverse();
  Matrix r = inv.asDiagonal() * m * inv.asDiagonal();
  r = symmetrize(r);
  r.diagonal().setOnes();
  return r;
}

/// U f(Lambda) U^T for a symmetric input, symmetrized on the way out.
template <typename Fn>
Matrix spectral_map(const Matrix& m, Fn&& fn) {
  require_square(m, "spectral_map");
  require_finite(m, "spectral_map");
  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  if (es.info() != Eigen::Success) throw NumericalError("eigen decomposition failed");
  Vector lam = es.eigenvalues();
  Vector mapped = fn(lam);
  Matrix out = es.eigenvectors() * mapped.asDiagonal() * es.eigenvectors().transpose();
  return symmetrize(out);
}

}  // namespace covcast
