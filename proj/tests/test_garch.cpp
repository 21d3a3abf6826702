#include "covcast/estimators_garch.hpp"
#include "support/synthetic.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace covcast;

TEST(Garch, VariancePathMatchesRecursion) {
  GarchParams p{1e-6, 0.10, 0.85, 1e-4};
  const Vector path = garch_variance_path(p, 30);
  EXPECT_NEAR(path(0), 1e-6 + 0.95 * 1e-4, 1e-20);
  double h = p.h_last;
  for (int f = 0; f < 30; ++f) {
    h = p.omega + p.persistence() * h;
    EXPECT_NEAR(path(f), h, 1e-18);
  }
  GarchParams at_mean = p;
  at_mean.h_last = p.unconditional_variance();
  const Vector flat = garch_variance_path(at_mean, 10);
  EXPECT_LT((flat.array() - at_mean.h_last).abs().maxCoeff(), 1e-18);
  EXPECT_THROW(garch_variance_path(p, 0), ConfigError);
}

TEST(Garch, FilterAndForecastTiming) {
  std::mt19937_64 rng(1);
  const Vector e = synth::simulate_garch(1e-6, 0.08, 0.9, 600, rng);
  const GarchFit fit = fit_garch11(e);
  const auto& p = fit.params;
  const Index n = e.size();
  EXPECT_NEAR(fit.next_variance, p.omega + p.alpha * e(n - 1) * e(n - 1) + p.beta * fit.variances(n - 1), 1e-20);
  const Vector f = garch_forecast(fit, 5);
  EXPECT_EQ(f(0), fit.next_variance);
  for (int k = 1; k < 5; ++k) EXPECT_NEAR(f(k), p.omega + p.persistence() * f(k - 1), 1e-18);
  EXPECT_LT(p.persistence(), 1.0);
  EXPECT_GT(p.omega, 0.0);
  EXPECT_LT((fit.standardized.cwiseProduct(fit.variances.cwiseSqrt()) - e).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Garch, FitErrors) {
  EXPECT_THROW(fit_garch11(Vector::Zero(20)), DataError);
  EXPECT_THROW(fit_garch11(Vector::Zero(100)), NumericalError);
}

TEST(Garch, RecoversSimulationParameters) {
  std::vector<double> da, db;
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const GarchFit fit = fit_garch11(synth::simulate_garch(2e-6, 0.08, 0.90, 4000, rng));
    da.push_back(std::abs(fit.params.alpha - 0.08));
    db.push_back(std::abs(fit.params.beta - 0.90));
  }
  std::sort(da.begin(), da.end());
  std::sort(db.begin(), db.end());
  EXPECT_LE(da[2], 0.04);
  EXPECT_LE(db[2], 0.04);
}

TEST(Garch, SingleAssetCccIsGarchVariance) {
  std::mt19937_64 rng(2);
  Matrix r(300, 1);
  r.col(0) = synth::simulate_garch(1e-6, 0.08, 0.9, 300, rng);
  GarchForecaster ccc(GarchKind::Ccc, 20);
  const Matrix f = ccc.forecast(r);
  const GarchFit fit = fit_garch11(rolling_residuals(r, 20).col(0));
  EXPECT_NEAR(f(0, 0), garch_forecast(fit, 20).mean(), 1e-18);
}

TEST(Garch, DccLimits) {
  std::mt19937_64 rng(3);
  const Matrix z = synth::gaussian_returns(synth::equicorrelation(3, 0.5), 200, rng);
  DccParams p;
  p.qbar = sample_correlation(z);
  p.alpha = 0.0;
  p.beta = 0.0;
  Matrix q = p.qbar;
  for (Index t = 0; t < z.rows(); ++t) q = dcc_update(p.qbar, 0.0, 0.0, q, z.row(t).transpose());
  EXPECT_LT((q - p.qbar).cwiseAbs().maxCoeff(), 1e-15);
  p.r_last = synth::equicorrelation(3, 0.9);
  const auto path = dcc_correlation_path(p, 5);
  EXPECT_LT((path[0] - p.r_last).cwiseAbs().maxCoeff(), 1e-15);
  for (std::size_t f = 1; f < path.size(); ++f) EXPECT_LT((path[f] - p.qbar).cwiseAbs().maxCoeff(), 1e-15);

  p.alpha = 0.05;
  p.beta = 0.9;
  const auto slow = dcc_correlation_path(p, 200);
  EXPECT_LT((slow.back() - p.qbar).cwiseAbs().maxCoeff(), 1e-3);
  for (const auto& r : slow) {
    EXPECT_LT((r.diagonal().array() - 1.0).abs().maxCoeff(), 1e-15);
    EXPECT_GT(min_eigenvalue(r), 0.0);
  }
}

TEST(Garch, DccConstantCorrelationHasSmallAlpha) {
  std::mt19937_64 rng(4);
  const Matrix z = synth::gaussian_returns(synth::equicorrelation(3, 0.4), 1500, rng);
  const DccParams p = fit_dcc(z);
  EXPECT_LE(p.alpha, 0.03);
  EXPECT_LT(p.persistence(), 1.0);
  EXPECT_GE(p.alpha, 0.0);
  EXPECT_GE(p.beta, 0.0);
}

TEST(Garch, NlShrinkIdentityAndRegime) {
  const Matrix eye = Matrix::Identity(5, 5);
  EXPECT_LT((nl_shrink_correlation(eye, 100) - eye).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(nl_shrink_correlation(eye, 5), NumericalError);
  EXPECT_THROW(nl_shrink_correlation(eye, 0), ConfigError);
}

TEST(Garch, NlShrinkBeatsSampleCorrelationOnAverage) {
  std::mt19937_64 rng(5);
  const Matrix truth = synth::equicorrelation(10, 0.3);
  double err_sample = 0.0, err_shrunk = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const Matrix z = synth::gaussian_returns(truth, 40, rng);
    const Matrix s = sample_correlation(z);
    const Matrix nl = nl_shrink_correlation(s, 40);
    EXPECT_LT((nl.diagonal().array() - 1.0).abs().maxCoeff(), 1e-12);
    EXPECT_GT(min_eigenvalue(nl), 0.0);
    err_sample += (s - truth).norm();
    err_shrunk += (nl - truth).norm();
  }
  EXPECT_LT(err_shrunk, err_sample);
}

TEST(Garch, TwoAssetDccAndCccAreValidAndAgreeOnVariances) {
  std::mt19937_64 rng(6);
  Matrix r(400, 2);
  r.col(0) = synth::simulate_garch(1e-6, 0.08, 0.9, 400, rng);
  r.col(1) = 0.5 * r.col(0) + synth::simulate_garch(1e-6, 0.05, 0.9, 400, rng);
  GarchForecaster ccc(GarchKind::Ccc, 20), dcc(GarchKind::Dcc, 20), nl(GarchKind::DccNl, 20);
  const Matrix a = ccc.forecast(r), b = dcc.forecast(r), c = nl.forecast(r);
  for (const Matrix* m : {&a, &b, &c}) EXPECT_TRUE(is_valid_covariance(*m));
  EXPECT_LT((a.diagonal() - b.diagonal()).cwiseAbs().maxCoeff(), 1e-18);
  EXPECT_LT((a.diagonal() - c.diagonal()).cwiseAbs().maxCoeff(), 1e-18);
  EXPECT_GT(a(0, 1), 0.0);
  EXPECT_EQ(nl.id(), "dcc_nl");
}
