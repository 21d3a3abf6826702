// covcast: forecast / evaluate / backtest / report from the command line.

#include "covcast/experiment.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

namespace {

struct Overrides {
  std::string config;
  std::string prices;
  std::string riskfree;
  std::string mode;
  std::string out;
  std::string models;
  std::string test_start;
  std::string test_end;
  std::optional<int> horizon;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  bool csv = false;
  bool quiet = false;
  bool print_config = false;
};

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (c != ' ') {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

template <typename T>
std::optional<T> env_number(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  char* end = nullptr;
  const unsigned long long x = std::strtoull(v, &end, 10);
  if (*end != '\0') throw covcast::ConfigError(std::string(name) + " is not an integer: '" + v + "'");
  return static_cast<T>(x);
}

/// defaults < file < environment < flags
covcast::ExperimentConfig resolve(const Overrides& o) {
  covcast::ExperimentConfig cfg;
  if (!o.config.empty()) cfg = covcast::load_config(o.config);
  if (auto s = env_number<std::uint64_t>("COVCAST_SEED")) cfg.seed = *s;
  if (auto j = env_number<int>("COVCAST_JOBS")) cfg.jobs = *j;
  if (!o.prices.empty()) cfg.prices = o.prices;
  if (!o.riskfree.empty()) cfg.riskfree = o.riskfree;
  if (!o.mode.empty()) cfg.return_mode = covcast::parse_return_mode(o.mode);
  if (!o.out.empty()) cfg.out = o.out;
  if (!o.models.empty()) cfg.models = split_list(o.models);
  if (!o.test_start.empty()) cfg.test_start = o.test_start;
  if (!o.test_end.empty()) cfg.test_end = o.test_end;
  if (o.horizon) cfg.horizon = *o.horizon;
  if (o.seed) cfg.seed = *o.seed;
  if (o.jobs) cfg.jobs = *o.jobs;
  if (o.csv) cfg.csv = true;
  cfg.cab.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

void add_common(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "JSON configuration file");
  cmd->add_option("--prices", o.prices, "long-format price CSV (date,ticker,adj_close)");
  cmd->add_option("--riskfree", o.riskfree, "risk-free CSV (date,rate_pct_annual)");
  cmd->add_option("--mode", o.mode, "return mode: raw or excess");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--models", o.models, "comma-separated model ids");
  cmd->add_option("--test-start", o.test_start, "first test date (YYYY-MM-DD)");
  cmd->add_option("--test-end", o.test_end, "last test date (YYYY-MM-DD)");
  cmd->add_option("--horizon", o.horizon, "forecast horizon F in trading days");
  cmd->add_option("--seed", o.seed, "random seed (env COVCAST_SEED)");
  cmd->add_option("--jobs", o.jobs, "worker threads (env COVCAST_JOBS)");
  cmd->add_flag("--csv", o.csv, "write forecasts in the CSV audit format as well");
  cmd->add_flag("-q,--quiet", o.quiet, "suppress progress messages");
  cmd->add_flag("--print-config", o.print_config, "print the resolved configuration and exit");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"covcast: covariance forecasting and minimum-variance backtests"};
  app.require_subcommand(1);
  Overrides o;
  auto* forecast = app.add_subcommand("forecast", "run the rolling forecasts for every configured model");
  auto* evaluate = app.add_subcommand("evaluate", "loss tables, Friedman/Nemenyi tests and CD diagrams");
  auto* backtest = app.add_subcommand("backtest", "GMV backtests, summary table and variance F-tests");
  auto* report = app.add_subcommand("report", "forecast, evaluate and backtest in one go");
  for (auto* c : {forecast, evaluate, backtest, report}) add_common(c, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const covcast::ExperimentConfig cfg = resolve(o);
    if (o.print_config) {
      std::cout << covcast::serialize_config(cfg) << '\n';
      return 0;
    }
    covcast::LogFn log;
    if (!o.quiet) log = [](const std::string& s) { std::fprintf(stderr, "[covcast] %s\n", s.c_str()); };
    if (log) log("config hash " + covcast::config_hash(cfg) + ", seed " + std::to_string(cfg.seed));
    const bool all = report->parsed();
    if (forecast->parsed() || all) {
      if (!cfg.forecast_models().empty()) covcast::cmd_forecast(cfg, log);
    }
    if (evaluate->parsed() || all) {
      if (!cfg.forecast_models().empty()) covcast::cmd_evaluate(cfg, log);
    }
    if (backtest->parsed() || all) covcast::cmd_backtest(cfg, log);
    if (log) log("outputs in " + cfg.out);
    return 0;
  } catch (const covcast::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const covcast::DataError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const covcast::NumericalError& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 4;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
