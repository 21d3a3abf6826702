#include "covcast/cab.hpp"
#include "support/synthetic.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace covcast;

namespace {

CabConfig tiny() {
  CabConfig c;
  c.lookback = 4;
  c.kernel_size = 3;
  c.hidden = 8;
  c.layers = 2;
  c.heads = 2;
  c.dropout = 0.0;
  c.epochs = 3;
  c.batch_size = 16;
  c.learning_rate = 1e-3;
  c.online_window = 5;
  return c;
}

Matrix panel_returns(Index n, Index t, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return synth::regime_switching_returns(n, t, 60, rng);
}

}  // namespace

TEST(Cab, BlendBoundariesAreExact) {
  std::mt19937_64 rng(1);
  const Matrix y = synth::random_spd(4, rng), s = synth::random_spd(4, rng);
  EXPECT_TRUE(shrink_blend(y, s, 0.0) == s);
  EXPECT_TRUE(shrink_blend(y, s, 1.0) == y);
  EXPECT_LT((shrink_blend(y, s, 0.8) - (0.8 * y + 0.2 * s)).cwiseAbs().maxCoeff(), 1e-15 * y.cwiseAbs().maxCoeff());
}

TEST(Cab, ProjectPsdHandExample) {
  Matrix y(2, 2);
  y << 1, 2, 2, 1;  // eigenvalues 3 and -1
  Matrix expect(2, 2);
  expect << 1.5, 1.5, 1.5, 1.5;
  EXPECT_LT((project_psd(y) - expect).cwiseAbs().maxCoeff(), 1e-14);
  std::mt19937_64 rng(2);
  const Matrix spd = synth::random_spd(5, rng);
  EXPECT_LT((project_psd(spd) - spd).cwiseAbs().maxCoeff(), 1e-13);
  const Matrix sym = synth::random_symmetric(6, rng);
  const Matrix p = project_psd(sym);
  EXPECT_GE(min_eigenvalue(p), -1e-12);
  EXPECT_LT(max_asymmetry(p), 1e-15);
}

TEST(Cab, SymmetrizedOutputAndFlatten) {
  std::mt19937_64 rng(3);
  const Matrix m = synth::random_matrix(3, 3, rng);
  EXPECT_TRUE(unflatten_row_major(flatten_row_major(m), 3) == m);
  EXPECT_EQ(flatten_row_major(m)(1), m(0, 1));

  CabModel model(3, tiny());
  const nn::Buffer y = synth::random_matrix(2, 9, rng);
  const nn::Buffer s = model.symmetrized(nn::Tensor::matrix(y)).value();
  for (Index r = 0; r < 2; ++r) {
    const Matrix a = unflatten_row_major(y.row(r), 3);
    EXPECT_LT((unflatten_row_major(s.row(r), 3) - 0.5 * (a + a.transpose())).cwiseAbs().maxCoeff(), 1e-16);
  }
}

TEST(Cab, ZeroHeadGivesFrobeniusNormOfTargets) {
  std::mt19937_64 rng(4);
  CabModel model(3, tiny());
  model.head().weight.mutable_value().setZero();
  model.head().bias.mutable_value().setZero();
  const nn::Buffer in = synth::random_matrix(5, 5 * 9, rng);
  const nn::Buffer tg = synth::random_matrix(5, 9, rng);
  nn::NoGradGuard g;
  EXPECT_NEAR(model.loss(in, tg, nullptr).item(), tg.rowwise().norm().mean(), 1e-14);
}

TEST(Cab, EmittedForecastsAreValidCovariances) {
  const Matrix r = panel_returns(4, 220, 5);
  for (double phi : {0.0, 0.5, 1.0}) {
    CabConfig c = tiny();
    c.phi = phi;
    auto f = CabForecaster::train(r.topRows(150), 20, 149, c);
    for (Index t = 150; t < 170; ++t) {
      const Matrix out = f->forecast(r.topRows(t + 1));
      EXPECT_LT(max_asymmetry(out), 1e-12);
      EXPECT_GE(min_eigenvalue(out), -1e-10 * out.trace());
      if (phi == 0.0) EXPECT_TRUE(out == realized_cov(r, 20, t));
    }
  }
}

TEST(Cab, PhiOneEqualsProjectedNetworkOutput) {
  const Matrix r = panel_returns(3, 160, 6);
  CabConfig c = tiny();
  c.phi = 1.0;
  c.update_policy = OnlineUpdatePolicy::None;
  auto f = CabForecaster::train(r.topRows(140), 20, 139, c);
  const Index t = 150;
  const CovWindow covs(r.topRows(t + 1), 20, t - 4, t);
  const Matrix y = project_psd(f->model().unscaled_output(sequence_row(covs, f->model().scaler(), t, 4)));
  EXPECT_TRUE(f->forecast(r.topRows(t + 1)) == y);
}

TEST(Cab, TrainingIsDeterministicForSeed) {
  const Matrix r = panel_returns(3, 160, 7);
  CabConfig c = tiny();
  c.dropout = 0.2;
  TrainReport a, b;
  auto fa = CabForecaster::train(r, 20, 159, c, &a);
  auto fb = CabForecaster::train(r, 20, 159, c, &b);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_EQ(a.validation_loss, b.validation_loss);
  EXPECT_EQ(a.fit_samples + a.validation_samples, 159 - 20 - (20 - 1 + 4) + 1);
  c.seed = 43;
  TrainReport d;
  CabForecaster::train(r, 20, 159, c, &d);
  EXPECT_NE(a.loss, d.loss);
}

TEST(Cab, RestoreBestKeepsLowestValidationEpoch) {
  const Matrix r = panel_returns(3, 200, 11);
  CabConfig c = tiny();
  c.epochs = 12;
  c.learning_rate = 1e-2;
  c.restore_best = true;
  CabModel model(3, c);
  CabTrainer trainer(model);
  const TrainReport rep = fit_cab(model, trainer, r, 20, 199);
  const auto best = std::min_element(rep.validation_loss.begin(), rep.validation_loss.end());
  EXPECT_EQ(rep.best_epoch, best - rep.validation_loss.begin());

  const CovWindow covs(r, 20, 19, 199);
  const CabSamples all = make_samples(covs, model.scaler(), 19 + c.lookback, 199 - 20, c.lookback, 20);
  std::vector<Index> idx;
  for (Index k = rep.fit_samples; k < all.size(); ++k) idx.push_back(k);
  EXPECT_DOUBLE_EQ(evaluate_loss(model, select_samples(all, idx)), *best);

  c.restore_best = false;
  CabModel plain(3, c);
  CabTrainer plain_trainer(plain);
  const TrainReport last = fit_cab(plain, plain_trainer, r, 20, 199);
  EXPECT_EQ(last.best_epoch, -1);
  EXPECT_DOUBLE_EQ(evaluate_loss(plain, select_samples(all, idx)), last.validation_loss.back());
}

TEST(Cab, TrainingReducesLoss) {
  const Matrix r = panel_returns(3, 260, 8);
  CabConfig c = tiny();
  c.epochs = 40;
  c.learning_rate = 3e-3;
  TrainReport rep;
  CabForecaster::train(r, 20, 259, c, &rep);
  EXPECT_LT(rep.loss.back(), 0.7 * rep.loss.front());
}

TEST(Cab, NoLookaheadWithOnlineUpdates) {
  const Matrix r = panel_returns(3, 200, 9);
  CabConfig c = tiny();
  auto full = CabForecaster::train(r.topRows(140), 20, 139, c);
  auto cut = CabForecaster::train(r.topRows(140), 20, 139, c);
  for (Index t = 140; t < 170; ++t) {
    Matrix truncated = r.topRows(t + 1);
    EXPECT_TRUE(full->forecast(r.topRows(t + 1)) == cut->forecast(truncated));
  }
  const Matrix next_a = full->forecast(r.topRows(171));
  Matrix changed = r.topRows(171);
  changed.row(170) *= 3.0;
  const Matrix next_b = cut->forecast(changed);
  EXPECT_FALSE(next_a == next_b);
}

TEST(Cab, ForecastIgnoresRowsAfterDate) {
  const Matrix r = panel_returns(3, 200, 10);
  CabConfig c = tiny();
  c.update_policy = OnlineUpdatePolicy::None;
  auto f = CabForecaster::train(r.topRows(140), 20, 139, c);
  Matrix future = r;
  future.bottomRows(30) = Matrix::Constant(30, 3, 0.5);
  EXPECT_TRUE(f->forecast(r.topRows(161)) == f->forecast(future.topRows(161)));
}

TEST(Cab, CheckpointRoundTrip) {
  const Matrix r = panel_returns(3, 160, 11);
  auto f = CabForecaster::train(r, 20, 159, tiny());
  const auto path = (std::filesystem::temp_directory_path() / "covcast_cab_test.ckpt").string();
  f->model().save(path);
  const CabModel back = CabModel::load(path);
  std::filesystem::remove(path);
  EXPECT_TRUE(back.scaler().means == f->model().scaler().means);
  const CovWindow covs(r, 20, 150, 159);
  const auto seq = sequence_row(covs, back.scaler(), 159, 4);
  EXPECT_TRUE(back.forward(seq, covs.at(159)) == f->model().forward(seq, covs.at(159)));
  EXPECT_EQ(back.config().hidden, 8);
}

TEST(Cab, ConfigValidation) {
  CabConfig c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = tiny();
  c.phi = 1.5;
  c.kernel_size = 4;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("phi"), std::string::npos);
    EXPECT_NE(msg.find("kernel_size"), std::string::npos);
  }
  EXPECT_TRUE(CabConfig{}.grid_violations().empty());
  EXPECT_FALSE(tiny().grid_violations().empty());
  nlohmann::json j = tiny();
  const CabConfig back = j.get<CabConfig>();
  EXPECT_EQ(back.hidden, 8);
  EXPECT_EQ(back.update_policy, OnlineUpdatePolicy::Daily);
  EXPECT_THROW(parse_update_policy("weekly"), ConfigError);
}

TEST(Cab, InsufficientTrainingHistory) {
  const Matrix r = panel_returns(3, 40, 12);
  EXPECT_THROW(CabForecaster::train(r, 20, 39, tiny()), DataError);
}

TEST(Cab, FullGraphGradientCheck) {
  std::mt19937_64 rng(13);
  CabConfig c = tiny();
  c.hidden = 8;
  c.layers = 2;
  c.heads = 2;
  CabModel model(3, c);
  const nn::Buffer in = synth::random_matrix(2, 5 * 9, rng);
  const nn::Buffer tg = synth::random_matrix(2, 9, rng);
  const auto r = synth::check_gradients(model.parameters(), [&] { return model.loss(in, tg, nullptr); }, 6, rng);
  EXPECT_LT(r.max_rel_error, 1e-3);
  EXPECT_GT(r.checked, 50);
}
