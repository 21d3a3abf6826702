#pragma once

#include "covcast/core.hpp"

#include <algorithm>
#include <functional>
#include <numeric>
#include <vector>

namespace covcast {

struct MinimizeResult {
  Vector x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

struct NelderMeadOptions {
  double initial_step = 0.5;
  double tolerance = 1e-8;  // spread of objective values across the simplex
  int max_iterations = 2000;
};

/// Derivative-free simplex minimizer (standard reflection / expansion /
/// contraction / shrink coefficients). Non-finite objective values are
/// treated as +inf so the simplex walks away from them.
inline MinimizeResult nelder_mead(const std::function<double(const Vector&)>& objective,
                                  const Vector& x0, const NelderMeadOptions& opt = {}) {
  const Index n = x0.size();
  auto f = [&](const Vector& x) {
    const double v = objective(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  std::vector<Vector> pts(static_cast<std::size_t>(n + 1), x0);
  std::vector<double> vals(static_cast<std::size_t>(n + 1));
  for (Index i = 0; i < n; ++i) pts[static_cast<std::size_t>(i + 1)](i) += opt.initial_step;
  for (std::size_t i = 0; i < pts.size(); ++i) vals[i] = f(pts[i]);

  std::vector<std::size_t> order(pts.size());
  MinimizeResult res;
  for (res.iterations = 0; res.iterations < opt.max_iterations; ++res.iterations) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
    const std::size_t best = order.front();
    const std::size_t worst = order.back();
    const std::size_t second = order[order.size() - 2];

    if (std::isfinite(vals[worst]) && vals[worst] - vals[best] < opt.tolerance) {
      res.converged = true;
      break;
    }

    Vector centroid = Vector::Zero(n);
    for (std::size_t i = 0; i + 1 < order.size(); ++i) centroid += pts[order[i]];
    centroid /= static_cast<double>(n);

    const Vector xr = centroid + (centroid - pts[worst]);
    const double fr = f(xr);
    if (fr < vals[best]) {
      const Vector xe = centroid + 2.0 * (centroid - pts[worst]);
      const double fe = f(xe);
      if (fe < fr) {
        pts[worst] = xe;
        vals[worst] = fe;
      } else {
        pts[worst] = xr;
        vals[worst] = fr;
      }
      continue;
    }
    if (fr < vals[second]) {
      pts[worst] = xr;
      vals[worst] = fr;
      continue;
    }
    const bool outside = fr < vals[worst];
    const Vector xc = outside ? Vector(centroid + 0.5 * (xr - centroid))
                              : Vector(centroid + 0.5 * (pts[worst] - centroid));
    const double fc = f(xc);
    if (fc < (outside ? fr : vals[worst])) {
      pts[worst] = xc;
      vals[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (i == best) continue;
      pts[i] = pts[best] + 0.5 * (pts[i] - pts[best]);
      vals[i] = f(pts[i]);
    }
  }
  const auto it = std::min_element(vals.begin(), vals.end());
  res.x = pts[static_cast<std::size_t>(it - vals.begin())];
  res.value = *it;
  return res;
}

}  // namespace covcast
