#pragma once

// Experiment configuration and the forecast -> evaluate -> backtest pipeline
// used by the command-line tool.

#include "covcast/cab.hpp"
#include "covcast/core.hpp"
#include "covcast/data_ingest.hpp"
#include "covcast/estimators_classical.hpp"
#include "covcast/estimators_garch.hpp"
#include "covcast/evaluation.hpp"
#include "covcast/forecast_run.hpp"
#include "covcast/portfolio.hpp"

#include <json.hpp>

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace covcast {

inline const std::vector<std::string>& registered_models() {
  static const std::vector<std::string> ids = {"na",  "na_full", "ewma", "pca",    "rmt", "lw",
                                               "lw_full", "ccc", "dcc", "dcc_nl", "cab"};
  return ids;
}

struct ExperimentConfig {
  std::string prices;
  std::string riskfree;  // empty: none
  ReturnMode return_mode = ReturnMode::Excess;
  int horizon = 20;
  std::string test_start = "2021-01-01";
  std::string test_end;  // empty: through the last date
  std::vector<std::string> models = registered_models();
  CabConfig cab;
  RegimeCalendar regimes = default_regimes();
  std::vector<RebalanceFrequency> frequencies = {RebalanceFrequency::Daily, RebalanceFrequency::Weekly,
                                                 RebalanceFrequency::Monthly};
  std::string out = "out";
  std::uint64_t seed = 42;
  int jobs = 1;
  double ewma_eta = 0.94;
  double pca_fraction = 0.95;
  double nemenyi_alpha = 0.05;
  Index garch_estimation_window = 0;
  bool csv = false;
  bool allow_outside_grid = false;

  /// Every violated invariant, one message each.
  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (prices.empty()) v.push_back("prices: path is required");
    if (horizon < 10 || horizon > 250) v.push_back("horizon: F must lie in [10, 250], got " + std::to_string(horizon));
    try {
      parse_date(test_start);
    } catch (const Error&) {
      v.push_back("test_start: not a date: '" + test_start + "'");
    }
    if (!test_end.empty()) {
      try {
        parse_date(test_end);
      } catch (const Error&) {
        v.push_back("test_end: not a date: '" + test_end + "'");
      }
    }
    if (return_mode == ReturnMode::Excess && riskfree.empty()) {
      v.push_back("riskfree: required when return_mode is excess");
    }
    if (models.empty()) v.push_back("models: list is empty");
    std::set<std::string> seen;
    const auto& known = registered_models();
    for (const auto& m : models) {
      if (std::find(known.begin(), known.end(), m) == known.end() && m != kEqualWeightId) {
        v.push_back("models: unknown model id '" + m + "'");
      }
      if (!seen.insert(m).second) v.push_back("models: duplicate id '" + m + "'");
    }
    if (frequencies.empty()) v.push_back("frequencies: list is empty");
    std::set<RebalanceFrequency> fseen;
    for (auto f : frequencies)
      if (!fseen.insert(f).second) v.push_back("frequencies: duplicate '" + to_string(f) + "'");
    try {
      validate_regimes(regimes);
    } catch (const Error& e) {
      v.push_back(std::string("regimes: ") + e.what());
    }
    try {
      cab.validate();
    } catch (const Error& e) {
      v.push_back(e.what());
    }
    if (!allow_outside_grid)
      for (const auto& g : cab.grid_violations()) v.push_back(g + " (set allow_outside_grid to permit)");
    if (jobs < 1) v.push_back("jobs: must be >= 1");
    if (!(ewma_eta >= 0.0 && ewma_eta <= 1.0)) v.push_back("ewma_eta: must lie in [0, 1]");
    if (!(pca_fraction > 0.0 && pca_fraction <= 1.0)) v.push_back("pca_fraction: must lie in (0, 1]");
    if (nemenyi_alpha != 0.05 && nemenyi_alpha != 0.10) v.push_back("nemenyi_alpha: must be 0.05 or 0.10");
    if (garch_estimation_window < 0) v.push_back("garch_estimation_window: must be >= 0");
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid configuration:";
    for (const auto& s : v) msg += "\n  - " + s;
    throw ConfigError(msg);
  }

  /// Model ids excluding the 1/N benchmark (which needs no forecast).
  std::vector<std::string> forecast_models() const {
    std::vector<std::string> out;
    for (const auto& m : models)
      if (m != kEqualWeightId) out.push_back(m);
    return out;
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json regimes = nlohmann::json::array();
  for (const auto& s : c.regimes.segments) {
    regimes.push_back({{"label", s.label}, {"start", format_date(s.start)}, {"end", format_date(s.end)}});
  }
  std::vector<std::string> freqs;
  for (auto f : c.frequencies) freqs.push_back(to_string(f));
  CabConfig cab = c.cab;
  cab.seed = c.seed;
  j = nlohmann::json{{"prices", c.prices},
                     {"riskfree", c.riskfree},
                     {"return_mode", to_string(c.return_mode)},
                     {"horizon", c.horizon},
                     {"test_start", c.test_start},
                     {"test_end", c.test_end},
                     {"models", c.models},
                     {"cab", cab},
                     {"regimes", regimes},
                     {"frequencies", freqs},
                     {"out", c.out},
                     {"seed", c.seed},
                     {"jobs", c.jobs},
                     {"ewma_eta", c.ewma_eta},
                     {"pca_fraction", c.pca_fraction},
                     {"nemenyi_alpha", c.nemenyi_alpha},
                     {"garch_estimation_window", c.garch_estimation_window},
                     {"csv", c.csv},
                     {"allow_outside_grid", c.allow_outside_grid}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  static const std::set<std::string> keys = {"prices",       "riskfree", "return_mode", "horizon",
                                             "test_start",   "test_end", "models",      "cab",
                                             "regimes",      "frequencies", "out",      "seed",
                                             "jobs",         "ewma_eta", "pca_fraction", "nemenyi_alpha",
                                             "garch_estimation_window", "csv", "allow_outside_grid"};
  if (!j.is_object()) throw ConfigError("configuration must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) throw ConfigError("unknown configuration key '" + k + "'");
  const ExperimentConfig d;
  try {
    c.prices = j.value("prices", d.prices);
    c.riskfree = j.value("riskfree", d.riskfree);
    c.return_mode = parse_return_mode(j.value("return_mode", to_string(d.return_mode)));
    c.horizon = j.value("horizon", d.horizon);
    c.test_start = j.value("test_start", d.test_start);
    c.test_end = j.value("test_end", d.test_end);
    c.models = j.value("models", d.models);
    c.seed = j.value("seed", d.seed);
    c.cab = j.contains("cab") ? j.at("cab").get<CabConfig>() : d.cab;
    c.cab.seed = c.seed;
    if (j.contains("regimes")) {
      c.regimes.segments.clear();
      for (const auto& s : j.at("regimes")) {
        c.regimes.segments.push_back({s.at("label").get<std::string>(), parse_date(s.at("start").get<std::string>()),
                                      parse_date(s.at("end").get<std::string>())});
      }
    }
    if (j.contains("frequencies")) {
      c.frequencies.clear();
      for (const auto& f : j.at("frequencies")) c.frequencies.push_back(parse_frequency(f.get<std::string>()));
    }
    c.out = j.value("out", d.out);
    c.jobs = j.value("jobs", d.jobs);
    c.ewma_eta = j.value("ewma_eta", d.ewma_eta);
    c.pca_fraction = j.value("pca_fraction", d.pca_fraction);
    c.nemenyi_alpha = j.value("nemenyi_alpha", d.nemenyi_alpha);
    c.garch_estimation_window = j.value("garch_estimation_window", d.garch_estimation_window);
    c.csv = j.value("csv", d.csv);
    c.allow_outside_grid = j.value("allow_outside_grid", d.allow_outside_grid);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("configuration: ") + e.what());
  } catch (const DataError& e) {
    throw ConfigError(std::string("configuration: ") + e.what());
  }
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text, nullptr, true, true);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("configuration is not valid JSON: ") + e.what());
  }
  return j.get<ExperimentConfig>();
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open configuration file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline std::string serialize_config(const ExperimentConfig& c) { return nlohmann::json(c).dump(2); }

/// FNV-1a 64 over the canonical JSON, excluding settings that do not change
/// results (output directory, worker count).
inline std::string config_hash(const ExperimentConfig& c) {
  nlohmann::json j = c;
  j.erase("out");
  j.erase("jobs");
  const std::string s = j.dump();
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

inline std::string provenance_line(const ExperimentConfig& c) {
  return "# config_hash=" + config_hash(c) + " seed=" + std::to_string(c.seed) + "\n";
}

// ---------------------------------------------------------------------------
// Data and models

struct ExperimentData {
  ReturnPanel panel;
  std::vector<Index> rows;  // test rows
};

inline ExperimentData load_experiment_data(const ExperimentConfig& cfg) {
  const PricePanel prices = load_prices(cfg.prices);
  std::optional<RiskFreeSeries> rf;
  if (!cfg.riskfree.empty()) rf = load_riskfree(cfg.riskfree);
  ExperimentData d;
  d.panel = to_returns(prices, rf, cfg.return_mode);
  std::optional<Date> end;
  if (!cfg.test_end.empty()) end = parse_date(cfg.test_end);
  d.rows = test_rows(d.panel, parse_date(cfg.test_start), end);
  if (d.rows.empty()) throw DataError("no return dates in the test window starting " + cfg.test_start);
  return d;
}

inline GarchForecastOptions garch_options(const ExperimentConfig& cfg) {
  GarchForecastOptions o;
  o.estimation_window = cfg.garch_estimation_window;
  return o;
}

/// Builds the forecaster for `id`; CAB is trained here on rows before the
/// first test row.
inline ForecasterPtr make_forecaster(const std::string& id, const ExperimentConfig& cfg, const ReturnPanel& panel,
                                     Index first_test_row, TrainReport* cab_report = nullptr) {
  const int f = cfg.horizon;
  const EwmaConfig ewma{cfg.ewma_eta};
  const PcaConfig pca{cfg.pca_fraction};
  if (id == "na") return std::make_unique<ClassicalForecaster>(ClassicalKind::Naive, f, ewma, pca);
  if (id == "na_full") return std::make_unique<ClassicalForecaster>(ClassicalKind::NaiveFull, f, ewma, pca);
  if (id == "ewma") return std::make_unique<ClassicalForecaster>(ClassicalKind::Ewma, f, ewma, pca);
  if (id == "pca") return std::make_unique<ClassicalForecaster>(ClassicalKind::Pca, f, ewma, pca);
  if (id == "rmt") return std::make_unique<ClassicalForecaster>(ClassicalKind::Rmt, f, ewma, pca);
  if (id == "lw") return std::make_unique<ClassicalForecaster>(ClassicalKind::LedoitWolf, f, ewma, pca);
  if (id == "lw_full") return std::make_unique<ClassicalForecaster>(ClassicalKind::LedoitWolfFull, f, ewma, pca);
  if (id == "ccc") return std::make_unique<GarchForecaster>(GarchKind::Ccc, f, garch_options(cfg));
  if (id == "dcc") return std::make_unique<GarchForecaster>(GarchKind::Dcc, f, garch_options(cfg));
  if (id == "dcc_nl") return std::make_unique<GarchForecaster>(GarchKind::DccNl, f, garch_options(cfg));
  if (id == "cab") {
    CabConfig cab = cfg.cab;
    cab.seed = cfg.seed;
    if (first_test_row < 1) throw DataError("cab: no training rows before the test window");
    return CabForecaster::train(panel.returns.topRows(first_test_row), f, first_test_row - 1, cab, cab_report);
  }
  throw ConfigError("unknown model id '" + id + "'");
}

// ---------------------------------------------------------------------------
// Worker pool

/// Runs tasks on `jobs` threads; rethrows the first failure in task order.
inline void run_parallel(std::size_t count, int jobs, const std::function<void(std::size_t)>& task) {
  std::vector<std::exception_ptr> errors(count);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < count; i = next++) {
      try {
        task(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), count);
  std::vector<std::thread> threads;
  for (std::size_t t = 1; t < n; ++t) threads.emplace_back(worker);
  worker();
  for (auto& t : threads) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// Commands

using LogFn = std::function<void(const std::string&)>;

namespace fs = std::filesystem;

inline fs::path output_path(const ExperimentConfig& cfg, const std::string& rel) {
  const fs::path p = fs::path(cfg.out) / rel;
  fs::create_directories(p.parent_path());
  return p;
}

inline std::ofstream open_output(const ExperimentConfig& cfg, const std::string& rel) {
  const fs::path p = output_path(cfg, rel);
  std::ofstream os(p, std::ios::binary);
  if (!os) throw DataError("cannot write '" + p.string() + "'");
  return os;
}

inline std::map<std::string, ForecastRun> cmd_forecast(const ExperimentConfig& cfg, const LogFn& log = {}) {
  cfg.validate();
  const ExperimentData data = load_experiment_data(cfg);
  const auto models = cfg.forecast_models();
  std::vector<ForecastRun> runs(models.size());
  std::mutex log_mutex;
  auto say = [&](const std::string& s) {
    if (!log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    log(s);
  };
  say("forecasting " + std::to_string(models.size()) + " model(s) over " + std::to_string(data.rows.size()) +
      " test dates");
  run_parallel(models.size(), cfg.jobs, [&](std::size_t i) {
    const std::string& id = models[i];
    TrainReport report;
    ForecasterPtr model = make_forecaster(id, cfg, data.panel, data.rows.front(), &report);
    if (id == "cab") {
      auto os = open_output(cfg, "cab/loss.csv");
      os << provenance_line(cfg);
      write_loss_curve(os, report);
      say("cab: trained " + std::to_string(report.loss.size()) + " epochs on " +
          std::to_string(report.fit_samples) + " sequences");
    }
    runs[i] = run_forecast(*model, data.panel, cfg.horizon, data.rows);
    if (id == "cab") {
      const auto& cab = dynamic_cast<const CabForecaster&>(*model);
      cab.model().save(output_path(cfg, "cab/model.ckpt").string());
    }
    say(id + ": done");
  });

  nlohmann::json index;
  index["config_hash"] = config_hash(cfg);
  index["seed"] = cfg.seed;
  index["models"] = nlohmann::json::array();
  for (const auto& run : runs) {
    const std::string file = "forecasts/" + run.model + ".bin";
    write_forecast_binary(output_path(cfg, file).string(), run);
    index["models"].push_back(forecast_index(run, run.model + ".bin"));
    if (cfg.csv) {
      auto os = open_output(cfg, "forecasts/" + run.model + ".csv");
      os << provenance_line(cfg);
      write_forecast_csv(os, run);
    }
  }
  {
    auto os = open_output(cfg, "forecasts/index.json");
    os << index.dump(2) << '\n';
  }
  std::map<std::string, ForecastRun> out;
  for (auto& r : runs) out.emplace(r.model, std::move(r));
  return out;
}

/// Reads the runs listed in forecasts/index.json, in config model order.
inline std::vector<ForecastRun> load_forecasts(const ExperimentConfig& cfg) {
  const fs::path dir = fs::path(cfg.out) / "forecasts";
  std::ifstream in(dir / "index.json");
  if (!in) throw DataError("no forecast index in '" + dir.string() + "'; run the forecast command first");
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("forecast index: ") + e.what());
  }
  std::map<std::string, nlohmann::json> by_model;
  for (const auto& m : index.at("models")) by_model[m.at("model").get<std::string>()] = m;
  std::vector<ForecastRun> runs;
  for (const auto& id : cfg.forecast_models()) {
    auto it = by_model.find(id);
    if (it == by_model.end()) throw DataError("no forecasts stored for model '" + id + "'");
    runs.push_back(read_forecast_binary((dir / it->second.at("file").get<std::string>()).string(), it->second));
  }
  return runs;
}

struct EvaluationReport {
  std::vector<LossSeries> losses;
  std::vector<RegimeRow> regimes;
  std::map<LossMetric, FriedmanResult> friedman;
  std::map<LossMetric, NemenyiResult> nemenyi;
};

inline EvaluationReport cmd_evaluate(const ExperimentConfig& cfg, const LogFn& log = {}) {
  cfg.validate();
  const auto runs = load_forecasts(cfg);
  EvaluationReport rep;
  for (const auto& r : runs) rep.losses.push_back(compute_losses(r));
  if (rep.losses.empty()) throw ConfigError("evaluate: no forecasting models configured");
  require_aligned(rep.losses);
  if (rep.losses.front().size() == 0) throw DataError("evaluate: no forecast date has a realized target");
  rep.regimes = aggregate_by_regime(rep.losses, cfg.regimes);
  {
    auto os = open_output(cfg, "evaluation/results.csv");
    os << provenance_line(cfg) << "# losses x1e5\n";
    write_results_csv(os, rep.regimes);
  }
  {
    auto os = open_output(cfg, "evaluation/normality.csv");
    os << provenance_line(cfg) << "model,metric,n,jarque_bera,p_value\n";
    for (const auto& s : rep.losses)
      for (auto metric : {LossMetric::Euclidean, LossMetric::Frobenius}) {
        char buf[128];
        try {
          const auto nr = normality_screen(s.values(metric));
          std::snprintf(buf, sizeof buf, ",%lld,%.6g,%.6g\n", static_cast<long long>(nr.n), nr.statistic, nr.p_value);
        } catch (const Error&) {
          std::snprintf(buf, sizeof buf, ",%zu,,\n", s.size());
        }
        os << s.model << ',' << to_string(metric) << buf;
      }
  }
  const Index k = static_cast<Index>(rep.losses.size());
  const Index n = static_cast<Index>(rep.losses.front().size());
  if (k < 3) {
    if (log) log("evaluate: fewer than 3 models, Friedman/Nemenyi skipped");
    return rep;
  }
  std::ofstream txt = open_output(cfg, "evaluation/significance.txt");
  txt << provenance_line(cfg);
  for (auto metric : {LossMetric::Euclidean, LossMetric::Frobenius}) {
    const auto fr = friedman_test(rep.losses, metric);
    const auto nm = nemenyi(fr.mean_ranks, n, cfg.nemenyi_alpha);
    rep.friedman[metric] = fr;
    rep.nemenyi[metric] = nm;
    const std::string m = to_string(metric);
    {
      auto os = open_output(cfg, "evaluation/ranks_" + m + ".json");
      auto j = ranks_json(fr, nm, metric);
      j["config_hash"] = config_hash(cfg);
      j["seed"] = cfg.seed;
      os << j.dump(2) << '\n';
    }
    {
      auto os = open_output(cfg, "evaluation/cd_" + m + ".svg");
      os << "<!-- config_hash=" << config_hash(cfg) << " seed=" << cfg.seed << " -->\n";
      write_cd_svg(os, fr.models, fr.mean_ranks, nm.cd, m + " loss");
    }
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s: Friedman chi2=%.4f (df=%lld) p=%.4g; Nemenyi CD=%.4f (k=%lld, n=%lld, alpha=%.2f)\n",
                  m.c_str(), fr.statistic, static_cast<long long>(k - 1), fr.p_value, nm.cd,
                  static_cast<long long>(k), static_cast<long long>(n), cfg.nemenyi_alpha);
    txt << buf;
    for (Index i = 0; i < k; ++i)
      for (Index j = i + 1; j < k; ++j)
        if (nm.significant[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]) {
          std::snprintf(buf, sizeof buf, "  %s vs %s: |rank diff| = %.3f > CD\n", fr.models[static_cast<std::size_t>(i)].c_str(),
                        fr.models[static_cast<std::size_t>(j)].c_str(), nm.rank_diff(i, j));
          txt << buf;
        }
    if (log) log(m + ": CD=" + std::to_string(nm.cd));
  }
  return rep;
}

struct BacktestReport {
  std::vector<BacktestLedger> ledgers;
  std::vector<SummaryRow> summary;
};

inline BacktestReport cmd_backtest(const ExperimentConfig& cfg, const LogFn& log = {}) {
  cfg.validate();
  const ExperimentData data = load_experiment_data(cfg);
  const auto runs = cfg.forecast_models().empty() ? std::vector<ForecastRun>{} : load_forecasts(cfg);
  for (const auto& r : runs) {
    if (r.rows != data.rows) {
      throw DataError(r.model + ": stored forecasts do not cover the configured test dates");
    }
  }
  BacktestReport rep;
  for (auto freq : cfg.frequencies) {
    std::vector<BacktestLedger> ledgers(runs.size());
    run_parallel(runs.size(), cfg.jobs, [&](std::size_t i) { ledgers[i] = run_backtest(runs[i], data.panel, freq); });
    const BacktestLedger ew = equal_weight_ledger(data.panel, data.rows, freq);
    std::vector<BacktestLedger> ordered;
    std::size_t next = 0;
    for (const auto& id : cfg.models) ordered.push_back(id == kEqualWeightId ? ew : ledgers[next++]);
    if (std::find(cfg.models.begin(), cfg.models.end(), std::string(kEqualWeightId)) == cfg.models.end()) {
      ordered.push_back(ew);
    }
    for (const auto& l : ordered) {
      SummaryRow row;
      row.strategy = l.strategy;
      row.frequency = freq;
      row.variance = annualized_variance(l);
      row.turnover = turnover(l);
      if (l.strategy != kEqualWeightId && l.entries.size() >= 30 && ew.entries.size() >= 30) {
        try {
          row.vs_equal_weight = variance_f_test(l, ew);
        } catch (const NumericalError&) {
        }
      }
      rep.summary.push_back(row);
    }
    {
      auto os = open_output(cfg, "backtest/ledger_" + to_string(freq) + ".csv");
      os << provenance_line(cfg);
      write_ledger_csv(os, ordered);
    }
    for (auto& l : ordered) rep.ledgers.push_back(std::move(l));
    if (log) log("backtest " + to_string(freq) + ": " + std::to_string(ordered.size()) + " strategies");
  }
  {
    auto os = open_output(cfg, "backtest/summary.csv");
    os << provenance_line(cfg) << "# variance: annualized (x252) variance of daily portfolio returns\n";
    write_summary_csv(os, rep.summary);
  }
  {
    auto os = open_output(cfg, "backtest/ftest.csv");
    os << provenance_line(cfg) << "# one-sided F-test, H1: strategy variance < equal_weight variance\n";
    write_ftest_csv(os, rep.summary);
  }
  return rep;
}

}  // namespace covcast
