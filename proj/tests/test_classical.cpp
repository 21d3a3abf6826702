#include "covcast/estimators_classical.hpp"
#include "support/synthetic.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace covcast;

namespace {

void expect_valid(const Matrix& m) {
  EXPECT_LT(max_asymmetry(m), 1e-12);
  EXPECT_GE(min_eigenvalue(m), -1e-10 * std::abs(m.trace()));
}

}  // namespace

TEST(Classical, NaiveIsTrailingRealizedCovariance) {
  std::mt19937_64 rng(1);
  const Matrix r = synth::random_matrix(50, 4, rng, 0.01);
  const Matrix f = forecast_na(r, 20);
  EXPECT_TRUE(f == realized_cov(r, 20, 49));
  EXPECT_TRUE(f == forecast_na(r, 20));
  EXPECT_TRUE(forecast_na(r.topRows(20), 20) == forecast_na_full(r.topRows(20)));
  EXPECT_TRUE(forecast_na_full(r) == full_sample_cov(r, 49));
  EXPECT_THROW(forecast_na(r.topRows(10), 20), DataError);
}

TEST(Classical, NaiveLossOnSimulationMatchesHandLoop) {
  std::mt19937_64 rng(2);
  const Matrix r = synth::random_matrix(120, 3, rng, 0.01);
  const int f = 10;
  double total = 0.0, loop = 0.0;
  for (Index t = f - 1; t + f < r.rows(); ++t) {
    const Matrix fc = forecast_na(r.topRows(t + 1), f);
    const Matrix target = realized_cov(r, f, t + f);
    total += (fc - target).norm();
    double s = 0.0;
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 3; ++j) s += (fc(i, j) - target(i, j)) * (fc(i, j) - target(i, j));
    loop += std::sqrt(s);
  }
  EXPECT_NEAR(total, loop, 1e-15 * std::max(1.0, loop));
}

TEST(Classical, EwmaBoundariesAndConvexity) {
  std::mt19937_64 rng(3);
  const Matrix r = synth::random_matrix(40, 5, rng, 0.01);
  EXPECT_TRUE(forecast_ewma(r, 20, {1.0}) == forecast_na(r, 20));
  const Vector e = rolling_residual(r, 20);
  EXPECT_TRUE(forecast_ewma(r, 20, {0.0}) == Matrix(e * e.transpose()));
  EXPECT_EQ(EwmaConfig{}.eta, 0.94);
  const Matrix a = e * e.transpose();
  const Matrix b = forecast_na(r, 20);
  const Matrix mix = forecast_ewma(r, 20, {0.3});
  EXPECT_LT((mix - 0.7 * a - 0.3 * b).cwiseAbs().maxCoeff(), 1e-18);
  expect_valid(forecast_ewma(r, 20));
  EXPECT_THROW(forecast_ewma(r, 20, {1.5}), ConfigError);
}

TEST(Classical, PcaThresholds) {
  std::mt19937_64 rng(4);
  const Matrix s = synth::random_spd(5, rng);
  EXPECT_LT((pca_filter(s, {1.0}).values - s).cwiseAbs().maxCoeff(), 1e-10);

  const Vector v = synth::random_matrix(5, 1, rng).col(0);
  const Matrix rank1 = v * v.transpose();
  const auto p1 = pca_filter(rank1, {0.95});
  EXPECT_EQ(p1.components, 1);
  EXPECT_LT((p1.values - rank1).cwiseAbs().maxCoeff(), 1e-12);

  const auto p = pca_filter(s, {0.95});
  const Vector lam = eigenvalues_sym(s);
  const Vector kept = eigenvalues_sym(p.values);
  EXPECT_GE(kept.sum(), 0.95 * s.trace() * (1 - 1e-12));
  double partial = 0.0;
  for (Index k = 0; k < p.components - 1; ++k) partial += lam(4 - k);
  EXPECT_LT(partial, 0.95 * lam.sum());
  expect_valid(p.values);
}

TEST(Classical, RmtBandAndReplacement) {
  const auto band = marchenko_pastur_band(20.0 / 14.0);
  EXPECT_NEAR(band.upper, std::pow(1.0 + std::sqrt(14.0 / 20.0), 2), 1e-15);
  EXPECT_NEAR(band.lower, std::pow(1.0 - std::sqrt(14.0 / 20.0), 2), 1e-15);
  EXPECT_THROW(marchenko_pastur_band(0.0), ConfigError);

  // Eigenvalues {0.01, 0.5, 1.0, 5.0}: only the inside ones move to the midpoint.
  std::mt19937_64 rng(5);
  const Matrix q = Eigen::HouseholderQR<Matrix>(synth::random_matrix(4, 4, rng)).householderQ();
  Vector lam(4);
  lam << 0.01, 0.5, 1.0, 5.0;
  const Matrix cov = symmetrize(q * lam.asDiagonal() * q.transpose());
  const double mid = 0.5 * (band.lower + band.upper);
  const Vector out = eigenvalues_sym(rmt_filter(cov, 20.0 / 14.0));
  Vector expect(4);
  expect << 0.01, mid, mid, 5.0;
  std::sort(expect.data(), expect.data() + 4);
  EXPECT_LT((out - expect).cwiseAbs().maxCoeff(), 1e-12);

  Vector outside(4);
  outside << 1e-4, 2e-4, 3e-4, 50.0;
  const Matrix c2 = symmetrize(q * outside.asDiagonal() * q.transpose());
  EXPECT_TRUE(rmt_filter(c2, 20.0 / 14.0) == c2);

  const auto wide = marchenko_pastur_band(1e12);
  EXPECT_NEAR(wide.lower, 1.0, 1e-5);
  EXPECT_NEAR(wide.upper, 1.0, 1e-5);
  Vector near_one(3);
  near_one << 1.0, 2.0, 3.0;
  const Vector o3 = eigenvalues_sym(rmt_filter(Matrix(near_one.asDiagonal()), 1e12));
  EXPECT_NEAR(o3(0), 0.5 * (wide.lower + wide.upper), 1e-12);
  EXPECT_EQ(o3(1), 2.0);
}

TEST(Classical, LedoitWolfContract) {
  std::mt19937_64 rng(6);
  const Matrix window = synth::random_matrix(30, 4, rng);
  const Matrix s = realized_cov(window, 30, 29);
  const auto [shrunk, res] = lw_shrink(s, window);
  EXPECT_GE(res.rho, 0.0);
  EXPECT_LE(res.rho, 1.0);
  EXPECT_TRUE(res.target.isApprox(Matrix::Identity(4, 4) * s.trace() / 4.0));
  EXPECT_LT((shrunk - (res.rho * res.target + (1 - res.rho) * s)).cwiseAbs().maxCoeff(), 1e-15);
  EXPECT_TRUE(shrink_to_target(s, res.target, 1.0) == res.target);
  EXPECT_TRUE(shrink_to_target(s, res.target, 0.0) == s);
  expect_valid(shrunk);

  const Matrix target_like = Matrix::Identity(4, 4) * 2.0;
  const auto [same, r2] = lw_shrink(target_like, window);
  EXPECT_TRUE(r2.degenerate);
  EXPECT_EQ(r2.rho, 0.0);
  EXPECT_TRUE(same == target_like);
}

TEST(Classical, LedoitWolfRhoInRangeAcrossPanel) {
  std::mt19937_64 rng(7);
  const Matrix r = synth::random_matrix(200, 6, rng, 0.01);
  for (Index t = 19; t < r.rows(); t += 7) {
    const auto h = r.topRows(t + 1);
    const auto [m, res] = lw_shrink(forecast_na(h, 20), h.middleRows(t - 19, 20));
    EXPECT_GE(res.rho, 0.0);
    EXPECT_LE(res.rho, 1.0);
    EXPECT_TRUE(m == forecast_lw(h, 20));
    expect_valid(forecast_lw_full(h));
  }
}

TEST(Classical, ForecasterAdaptersProduceValidMatrices) {
  std::mt19937_64 rng(8);
  const Matrix r = synth::random_matrix(80, 5, rng, 0.01);
  for (auto kind : {ClassicalKind::Naive, ClassicalKind::NaiveFull, ClassicalKind::Ewma, ClassicalKind::Pca,
                    ClassicalKind::Rmt, ClassicalKind::LedoitWolf, ClassicalKind::LedoitWolfFull}) {
    ClassicalForecaster f(kind, 20);
    EXPECT_EQ(f.min_history(), 20);
    expect_valid(f.forecast(r));
  }
  EXPECT_EQ(ClassicalForecaster(ClassicalKind::LedoitWolfFull, 20).id(), "lw_full");
}
