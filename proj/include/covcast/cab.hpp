#pragma once

// CNN + BiLSTM + attention covariance forecaster.
//
// Pipeline for one sequence of L+1 scaled covariance matrices:
//   conv3d (same padding) -> flatten per step -> stacked BiLSTM -> dropout ->
//   multi-head self-attention -> mean over steps -> dense head (N^2) ->
//   symmetrize -> unscale -> PSD projection -> blend with the trailing
//   realized covariance: phi * Y_psd + (1 - phi) * Sigma_{t-F:t}.
//
// Training minimizes the mean Frobenius distance in scaled space on the
// symmetrized head output; unscaling, PSD projection and the blend only run
// at inference.

#include "covcast/core.hpp"
#include "covcast/estimators_classical.hpp"
#include "covcast/forecaster.hpp"
#include "covcast/nn/adam.hpp"
#include "covcast/nn/checkpoint.hpp"
#include "covcast/nn/layers.hpp"
#include "covcast/rolling_stats.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace covcast {

enum class OnlineUpdatePolicy { None, Daily };

inline std::string to_string(OnlineUpdatePolicy p) { return p == OnlineUpdatePolicy::None ? "none" : "daily"; }

inline OnlineUpdatePolicy parse_update_policy(std::string_view s) {
  if (s == "none") return OnlineUpdatePolicy::None;
  if (s == "daily") return OnlineUpdatePolicy::Daily;
  throw ConfigError("online update policy must be 'none' or 'daily', got '" + std::string(s) + "'");
}

struct CabConfig {
  int lookback = 100;     // L
  int kernel_size = 5;    // ks
  int hidden = 128;       // h_d
  int layers = 7;         // u
  int heads = 16;         // h_e
  double dropout = 0.2;
  double phi = 0.8;
  int epochs = 100;
  int batch_size = 128;
  double learning_rate = 1e-4;
  std::uint64_t seed = 42;
  double validation_fraction = 0.2;
  bool restore_best = false;  // keep the weights of the lowest validation-loss epoch
  OnlineUpdatePolicy update_policy = OnlineUpdatePolicy::Daily;
  int online_window = 60;
  int online_epochs = 1;

  /// Structural invariants; throws ConfigError listing every violation.
  void validate() const {
    std::vector<std::string> errs;
    if (lookback < 0) errs.push_back("cab.lookback must be >= 0");
    if (kernel_size < 1 || kernel_size % 2 == 0) errs.push_back("cab.kernel_size must be odd and >= 1");
    if (hidden < 1) errs.push_back("cab.hidden must be >= 1");
    if (layers < 1) errs.push_back("cab.layers must be >= 1");
    if (heads < 1 || (2 * hidden) % heads != 0) errs.push_back("cab.heads must divide 2 * hidden");
    if (!(dropout >= 0.0 && dropout < 1.0)) errs.push_back("cab.dropout must lie in [0, 1)");
    if (!(phi >= 0.0 && phi <= 1.0)) errs.push_back("cab.phi must lie in [0, 1]");
    if (epochs < 1) errs.push_back("cab.epochs must be >= 1");
    if (batch_size < 1) errs.push_back("cab.batch_size must be >= 1");
    if (!(learning_rate > 0.0)) errs.push_back("cab.learning_rate must be positive");
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
      errs.push_back("cab.validation_fraction must lie in [0, 1)");
    }
    if (online_window < 1) errs.push_back("cab.online_window must be >= 1");
    if (online_epochs < 1) errs.push_back("cab.online_epochs must be >= 1");
    if (!errs.empty()) {
      std::string msg;
      for (const auto& e : errs) msg += (msg.empty() ? "" : "; ") + e;
      throw ConfigError(msg);
    }
  }

  /// Values outside the hyperparameter search ranges (batch 32-256,
  /// lr 1e-5..1e-3, L 20-250, ks 3-7, h_d 32-256, u 3-7, h_e 2-32, phi 0-1).
  std::vector<std::string> grid_violations() const {
    std::vector<std::string> out;
    auto check = [&](bool ok, const char* what) {
      if (!ok) out.emplace_back(what);
    };
    check(batch_size >= 32 && batch_size <= 256, "cab.batch_size outside [32, 256]");
    check(learning_rate >= 1e-5 && learning_rate <= 1e-3, "cab.learning_rate outside [1e-5, 1e-3]");
    check(lookback >= 20 && lookback <= 250, "cab.lookback outside [20, 250]");
    check(kernel_size >= 3 && kernel_size <= 7, "cab.kernel_size outside [3, 7]");
    check(hidden >= 32 && hidden <= 256, "cab.hidden outside [32, 256]");
    check(layers >= 3 && layers <= 7, "cab.layers outside [3, 7]");
    check(heads >= 2 && heads <= 32, "cab.heads outside [2, 32]");
    return out;
  }
};

inline void to_json(nlohmann::json& j, const CabConfig& c) {
  j = nlohmann::json{{"lookback", c.lookback},
                     {"kernel_size", c.kernel_size},
                     {"hidden", c.hidden},
                     {"layers", c.layers},
                     {"heads", c.heads},
                     {"dropout", c.dropout},
                     {"phi", c.phi},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"learning_rate", c.learning_rate},
                     {"seed", c.seed},
                     {"validation_fraction", c.validation_fraction},
                     {"restore_best", c.restore_best},
                     {"update_policy", to_string(c.update_policy)},
                     {"online_window", c.online_window},
                     {"online_epochs", c.online_epochs}};
}

inline void from_json(const nlohmann::json& j, CabConfig& c) {
  CabConfig d;
  c.lookback = j.value("lookback", d.lookback);
  c.kernel_size = j.value("kernel_size", d.kernel_size);
  c.hidden = j.value("hidden", d.hidden);
  c.layers = j.value("layers", d.layers);
  c.heads = j.value("heads", d.heads);
  c.dropout = j.value("dropout", d.dropout);
  c.phi = j.value("phi", d.phi);
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.seed = j.value("seed", d.seed);
  c.validation_fraction = j.value("validation_fraction", d.validation_fraction);
  c.restore_best = j.value("restore_best", d.restore_best);
  c.update_policy = parse_update_policy(j.value("update_policy", to_string(d.update_policy)));
  c.online_window = j.value("online_window", d.online_window);
  c.online_epochs = j.value("online_epochs", d.online_epochs);
}

/// Eigenvalue clamp max(lambda, 0): the nearest PSD matrix in Frobenius norm.
inline Matrix project_psd(const Matrix& y) {
  return spectral_map(y, [](const Vector& lam) { return lam.cwiseMax(0.0); });
}

/// phi * Y_psd + (1 - phi) * trailing.
inline Matrix shrink_blend(const Matrix& y_psd, const Matrix& trailing, double phi) {
  if (phi == 0.0) return trailing;
  if (phi == 1.0) return y_psd;
  return phi * y_psd + (1.0 - phi) * trailing;
}

/// Row-major flatten of an N x N matrix (entry (i, j) at i * N + j).
inline Eigen::RowVectorXd flatten_row_major(const Matrix& m) {
  Eigen::RowVectorXd out(m.size());
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) out(i * m.cols() + j) = m(i, j);
  return out;
}

inline Matrix unflatten_row_major(const Eigen::Ref<const Eigen::RowVectorXd>& v, Index n) {
  Matrix m(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) m(i, j) = v(i * n + j);
  return m;
}

class CabModel {
 public:
  CabModel(Index assets, CabConfig cfg) : assets_(assets), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (assets < 1) throw ConfigError("CAB needs at least one asset");
    std::mt19937_64 rng(cfg_.seed);
    const Index features = assets * assets;
    conv_ = nn::Conv3d(cfg_.kernel_size, rng);
    bilstm_ = nn::BiLstm(features, cfg_.hidden, cfg_.layers, rng);
    mha_ = nn::MultiHeadAttention(2 * cfg_.hidden, cfg_.heads, rng);
    head_ = nn::Linear(2 * cfg_.hidden, features, rng);
    scaler_.means = Matrix::Zero(assets, assets);
    scaler_.stds = Matrix::Ones(assets, assets);
    transpose_perm_.resize(static_cast<std::size_t>(features));
    for (Index i = 0; i < assets; ++i)
      for (Index j = 0; j < assets; ++j) transpose_perm_[static_cast<std::size_t>(i * assets + j)] = j * assets + i;
  }

  Index assets() const { return assets_; }
  Index steps() const { return cfg_.lookback + 1; }
  const CabConfig& config() const { return cfg_; }
  CabConfig& mutable_config() { return cfg_; }
  const Scaler& scaler() const { return scaler_; }
  void set_scaler(Scaler s) {
    if (s.means.rows() != assets_ || s.means.cols() != assets_) throw ConfigError("scaler has wrong dimension");
    scaler_ = std::move(s);
  }

  nn::Linear& head() { return head_; }
  nn::Conv3d& conv() { return conv_; }

  std::vector<nn::NamedParam> named_parameters() const {
    std::vector<nn::NamedParam> out;
    conv_.collect("conv", out);
    bilstm_.collect("bilstm", out);
    mha_.collect("attention", out);
    head_.collect("head", out);
    return out;
  }

  std::vector<nn::Tensor> parameters() const {
    std::vector<nn::Tensor> out;
    for (auto& p : named_parameters()) out.push_back(p.tensor);
    return out;
  }

  /// Head output y (batch x N^2) for flattened scaled sequences
  /// (batch x (L+1) * N^2). Dropout is active iff `dropout_rng` is given.
  nn::Tensor network(const nn::Buffer& inputs, std::mt19937_64* dropout_rng) const {
    const Index n2 = assets_ * assets_;
    const Index s = steps();
    if (inputs.cols() != s * n2) {
      throw ConfigError("CAB input width " + std::to_string(inputs.cols()) + " != (L+1) * N^2 = " +
                        std::to_string(s * n2));
    }
    const Index batch = inputs.rows();
    const nn::Tensor x = nn::Tensor::from(inputs, {batch, 1, s, assets_, assets_});
    const nn::Tensor conv = conv_.forward(x);
    std::vector<nn::Tensor> seq;
    seq.reserve(static_cast<std::size_t>(s));
    for (Index t = 0; t < s; ++t) seq.push_back(nn::slice_cols(conv, t * n2, n2));
    nn::Tensor h = nn::concat_rows(bilstm_.forward(std::move(seq)));
    if (dropout_rng) h = nn::dropout(h, cfg_.dropout, true, *dropout_rng);
    const nn::Tensor a = mha_.forward(h, s, batch);
    return head_.forward(nn::mean_over_steps(a, s, batch));
  }

  /// (y + y^T) / 2 on flattened rows.
  nn::Tensor symmetrized(const nn::Tensor& y) const {
    return nn::scale(nn::add(y, nn::permute_cols(y, transpose_perm_)), 0.5);
  }

  /// Mean Frobenius distance between symmetrized outputs and scaled targets.
  nn::Tensor loss(const nn::Buffer& inputs, const nn::Buffer& targets, std::mt19937_64* dropout_rng) const {
    const nn::Tensor y = symmetrized(network(inputs, dropout_rng));
    const nn::Tensor target = nn::Tensor::matrix(targets);
    return nn::mean(nn::row_norm(nn::sub(y, target)));
  }

  /// Symmetrized, unscaled network output (before the PSD projection).
  Matrix unscaled_output(const Eigen::Ref<const Eigen::RowVectorXd>& sequence) const {
    nn::NoGradGuard guard;
    nn::Buffer in = sequence;
    const nn::Tensor y = symmetrized(network(in, nullptr));
    Matrix sym = unflatten_row_major(y.value().row(0), assets_);
    sym = symmetrize(sym);
    return symmetrize(scaler_.invert(sym));
  }

  /// Full inference pipeline for one flattened scaled sequence.
  Matrix forward(const Eigen::Ref<const Eigen::RowVectorXd>& sequence, const Matrix& trailing) const {
    if (trailing.rows() != assets_ || trailing.cols() != assets_) {
      throw ConfigError("CAB forward: trailing covariance has wrong dimension");
    }
    const Matrix y_psd = project_psd(unscaled_output(sequence));
    return shrink_blend(y_psd, trailing, cfg_.phi);
  }

  /// Convenience overload taking a built sequence of scaled matrices.
  Matrix forward(const CovSequence& seq, const Matrix& trailing) const {
    if (static_cast<Index>(seq.matrices.size()) != steps()) {
      throw ConfigError("CAB forward: sequence length must be L+1 = " + std::to_string(steps()));
    }
    Eigen::RowVectorXd flat(steps() * assets_ * assets_);
    for (Index k = 0; k < steps(); ++k) {
      flat.segment(k * assets_ * assets_, assets_ * assets_) = flatten_row_major(seq.matrices[static_cast<std::size_t>(k)]);
    }
    return forward(flat, trailing);
  }

  std::string metadata() const {
    nlohmann::json meta;
    meta["format"] = "covcast-cab";
    meta["assets"] = assets_;
    meta["config"] = cfg_;
    return meta.dump();
  }

  std::vector<nn::NamedParam> checkpoint_tensors() const {
    auto out = named_parameters();
    out.push_back({"scaler.means", nn::Tensor::matrix(scaler_.means)});
    out.push_back({"scaler.stds", nn::Tensor::matrix(scaler_.stds)});
    return out;
  }

  void save(const std::string& path) const { nn::save_checkpoint(path, checkpoint_tensors(), metadata()); }

  static CabModel load(const std::string& path) {
    const nn::Checkpoint ck = nn::load_checkpoint(path);
    const auto meta = nlohmann::json::parse(ck.meta);
    if (meta.value("format", "") != "covcast-cab") throw DataError("not a CAB checkpoint: " + path);
    CabModel model(meta.at("assets").get<Index>(), meta.at("config").get<CabConfig>());
    auto params = model.checkpoint_tensors();
    nn::restore_parameters(ck, params);
    Scaler s;
    s.means = params[params.size() - 2].tensor.value();
    s.stds = params.back().tensor.value();
    model.set_scaler(std::move(s));
    return model;
  }

 private:
  Index assets_;
  CabConfig cfg_;
  nn::Conv3d conv_;
  nn::BiLstm bilstm_;
  nn::MultiHeadAttention mha_;
  nn::Linear head_;
  Scaler scaler_;
  std::vector<Index> transpose_perm_;
};

// ---------------------------------------------------------------------------
// Samples

/// Realized covariances (window F) for a contiguous row range of a history.
class CovWindow {
 public:
  CovWindow(const History& history, int window, Index first, Index last) : first_(first) {
    if (first < window - 1 || last >= history.rows() || first > last) {
      throw DataError("CAB: covariance rows [" + std::to_string(first) + ", " + std::to_string(last) +
                      "] not available");
    }
    covs_.reserve(static_cast<std::size_t>(last - first + 1));
    for (Index r = first; r <= last; ++r) covs_.push_back(realized_cov(history, window, r));
  }

  const Matrix& at(Index row) const { return covs_.at(static_cast<std::size_t>(row - first_)); }
  Index first() const { return first_; }
  Index last() const { return first_ + static_cast<Index>(covs_.size()) - 1; }

 private:
  Index first_;
  std::vector<Matrix> covs_;
};

struct CabSamples {
  nn::Buffer inputs;   // M x (L+1) N^2, scaled
  nn::Buffer targets;  // M x N^2, scaled realized covariance over t+1..t+F
  std::vector<Index> rows;

  Index size() const { return inputs.rows(); }
};

/// Flattened scaled sequence ending at `row`.
inline Eigen::RowVectorXd sequence_row(const CovWindow& covs, const Scaler& scaler, Index row, int lookback) {
  const Index n = scaler.means.rows();
  const Index n2 = n * n;
  Eigen::RowVectorXd out((lookback + 1) * n2);
  for (Index k = 0; k <= lookback; ++k) {
    out.segment(k * n2, n2) = flatten_row_major(scaler.apply(covs.at(row - lookback + k)));
  }
  return out;
}

/// Samples for sequence end rows [first, last]; targets at row + F.
inline CabSamples make_samples(const CovWindow& covs, const Scaler& scaler, Index first, Index last,
                               int lookback, int horizon) {
  CabSamples s;
  if (last < first) return s;
  const Index n = scaler.means.rows();
  const Index count = last - first + 1;
  s.inputs.resize(count, (lookback + 1) * n * n);
  s.targets.resize(count, n * n);
  for (Index k = 0; k < count; ++k) {
    const Index row = first + k;
    s.inputs.row(k) = sequence_row(covs, scaler, row, lookback);
    s.targets.row(k) = flatten_row_major(scaler.apply(covs.at(row + horizon)));
    s.rows.push_back(row);
  }
  return s;
}

inline CabSamples select_samples(const CabSamples& all, const std::vector<Index>& idx) {
  CabSamples out;
  out.inputs.resize(static_cast<Index>(idx.size()), all.inputs.cols());
  out.targets.resize(static_cast<Index>(idx.size()), all.targets.cols());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    out.inputs.row(static_cast<Index>(k)) = all.inputs.row(idx[k]);
    out.targets.row(static_cast<Index>(k)) = all.targets.row(idx[k]);
    out.rows.push_back(all.rows[static_cast<std::size_t>(idx[k])]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct TrainReport {
  std::vector<double> loss;             // mean per-sample training loss per epoch
  std::vector<double> validation_loss;  // empty when no validation split
  Index fit_samples = 0;
  Index validation_samples = 0;
  int best_epoch = -1;  // 0-based; set when restore_best applied
};

/// Evaluation-mode loss (no dropout, no graph).
inline double evaluate_loss(const CabModel& model, const CabSamples& samples) {
  if (samples.size() == 0) throw DataError("evaluate_loss: no samples");
  nn::NoGradGuard guard;
  return model.loss(samples.inputs, samples.targets, nullptr).item();
}

/// Owns the optimizer and the shuffling/dropout random stream so training
/// and online updates continue one deterministic sequence.
class CabTrainer {
 public:
  explicit CabTrainer(CabModel& model)
      : model_(&model),
        adam_(model.parameters(), nn::AdamConfig{model.config().learning_rate}),
        rng_(model.config().seed ^ 0x9E3779B97F4A7C15ULL) {}

  /// One pass of mini-batch Adam over `samples` (shuffled); returns the mean
  /// per-sample loss observed during the pass.
  double run_epoch(const CabSamples& samples) {
    const Index m = samples.size();
    if (m == 0) throw DataError("CAB training: empty training set");
    std::vector<Index> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng_);
    const Index bs = model_->config().batch_size;
    double total = 0.0;
    for (Index start = 0; start < m; start += bs) {
      const Index count = std::min(bs, m - start);
      nn::Buffer in(count, samples.inputs.cols());
      nn::Buffer tg(count, samples.targets.cols());
      for (Index k = 0; k < count; ++k) {
        in.row(k) = samples.inputs.row(order[static_cast<std::size_t>(start + k)]);
        tg.row(k) = samples.targets.row(order[static_cast<std::size_t>(start + k)]);
      }
      std::mt19937_64* drop = model_->config().dropout > 0.0 ? &rng_ : nullptr;
      const nn::Tensor loss = model_->loss(in, tg, drop);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NumericalError("CAB training: non-finite loss at step " + std::to_string(adam_.step_count() + 1));
      }
      adam_.zero_grad();
      nn::backward(loss);
      adam_.step();
      total += value * static_cast<double>(count);
    }
    return total / static_cast<double>(m);
  }

  /// Chronological split: the first (1 - validation_fraction) share is fitted,
  /// the remainder only scored.
  TrainReport train(const CabSamples& samples) {
    if (samples.size() == 0) throw DataError("CAB training: empty training set");
    const auto& cfg = model_->config();
    Index n_fit = samples.size();
    if (cfg.validation_fraction > 0.0 && samples.size() >= 2) {
      n_fit = std::clamp<Index>(static_cast<Index>(std::llround((1.0 - cfg.validation_fraction) *
                                                                 static_cast<double>(samples.size()))),
                                1, samples.size() - 1);
    }
    std::vector<Index> fit_idx(static_cast<std::size_t>(n_fit));
    std::iota(fit_idx.begin(), fit_idx.end(), 0);
    std::vector<Index> val_idx(static_cast<std::size_t>(samples.size() - n_fit));
    std::iota(val_idx.begin(), val_idx.end(), n_fit);
    const CabSamples fit = select_samples(samples, fit_idx);
    const CabSamples val = select_samples(samples, val_idx);

    TrainReport report;
    report.fit_samples = fit.size();
    report.validation_samples = val.size();
    const bool keep_best = cfg.restore_best && val.size() > 0;
    const auto params = model_->parameters();
    std::vector<nn::Buffer> best;
    double best_loss = std::numeric_limits<double>::infinity();
    for (int e = 0; e < cfg.epochs; ++e) {
      report.loss.push_back(run_epoch(fit));
      if (val.size() == 0) continue;
      const double v = evaluate_loss(*model_, val);
      report.validation_loss.push_back(v);
      if (keep_best && v < best_loss) {
        best_loss = v;
        report.best_epoch = e;
        best.clear();
        for (const auto& p : params) best.push_back(p.value());
      }
    }
    if (keep_best && !best.empty()) {
      for (std::size_t k = 0; k < params.size(); ++k) {
        nn::Tensor t = params[k];
        t.mutable_value() = best[k];
      }
      adam_ = nn::Adam(params, nn::AdamConfig{cfg.learning_rate});
    }
    return report;
  }

  void online_update(const CabSamples& recent) {
    for (int e = 0; e < model_->config().online_epochs; ++e) run_epoch(recent);
  }

 private:
  CabModel* model_;
  nn::Adam adam_;
  std::mt19937_64 rng_;
};

/// Fits the scaler on realized covariances of rows [F-1, train_last] and
/// trains on every sequence whose target window ends by train_last.
inline TrainReport fit_cab(CabModel& model, CabTrainer& trainer, const History& history, int horizon,
                           Index train_last) {
  const int lookback = model.config().lookback;
  if (train_last >= history.rows()) throw DataError("CAB: training end beyond history");
  const Index first_cov = horizon - 1;
  const Index first_seq = first_cov + lookback;
  const Index last_seq = train_last - horizon;
  if (last_seq < first_seq) {
    throw DataError("CAB: training period too short for L = " + std::to_string(lookback) +
                    " and F = " + std::to_string(horizon));
  }
  const CovWindow covs(history, horizon, first_cov, train_last);
  std::vector<Matrix> training;
  for (Index r = first_cov; r <= train_last; ++r) training.push_back(covs.at(r));
  model.set_scaler(fit_scaler(training));
  const CabSamples samples = make_samples(covs, model.scaler(), first_seq, last_seq, lookback, horizon);
  return trainer.train(samples);
}

inline void write_loss_curve(std::ostream& os, const TrainReport& report) {
  os << "epoch,loss\n";
  os.precision(17);
  for (std::size_t e = 0; e < report.loss.size(); ++e) os << (e + 1) << ',' << report.loss[e] << '\n';
}

/// Rolling forecaster: forecast for t from history [0, t], then (policy
/// permitting) one online update over the most recent sequences whose target
/// windows end by t. Must be fed consecutive dates.
class CabForecaster final : public Forecaster {
 public:
  /// Wraps an already trained model; online updates start a fresh optimizer.
  CabForecaster(CabModel model, int horizon)
      : model_(std::make_unique<CabModel>(std::move(model))),
        horizon_(horizon),
        trainer_(std::make_unique<CabTrainer>(*model_)) {}

  /// Builds, scales and trains a fresh model on rows [0, train_last].
  static std::unique_ptr<CabForecaster> train(const History& history, int horizon, Index train_last,
                                              const CabConfig& cfg, TrainReport* report = nullptr) {
    auto f = std::make_unique<CabForecaster>(CabModel(history.cols(), cfg), horizon);
    TrainReport r = fit_cab(*f->model_, *f->trainer_, history, horizon, train_last);
    if (report) *report = std::move(r);
    return f;
  }

  std::string id() const override { return "cab"; }

  Index min_history() const override { return horizon_ - 1 + model_->config().lookback + 1; }

  const CabModel& model() const { return *model_; }
  CabModel& model() { return *model_; }

  Matrix forecast(const History& history) override {
    const Index t = history.rows() - 1;
    const int lookback = model_->config().lookback;
    const Index first_seq = horizon_ - 1 + lookback;
    if (t < first_seq) throw DataError("cab: insufficient history");

    const auto& cfg = model_->config();
    const bool update = cfg.update_policy == OnlineUpdatePolicy::Daily;
    const Index upd_last = t - horizon_;
    const Index upd_first = std::max(first_seq, upd_last - cfg.online_window + 1);
    const Index cov_first = update && upd_last >= upd_first ? upd_first - lookback : t - lookback;
    const CovWindow covs(history, horizon_, cov_first, t);

    const Matrix out = model_->forward(sequence_row(covs, model_->scaler(), t, lookback), covs.at(t));
    if (update && upd_last >= upd_first) {
      trainer_->online_update(make_samples(covs, model_->scaler(), upd_first, upd_last, lookback, horizon_));
    }
    return out;
  }

 private:
  std::unique_ptr<CabModel> model_;
  int horizon_;
  std::unique_ptr<CabTrainer> trainer_;
};

}  // namespace covcast
