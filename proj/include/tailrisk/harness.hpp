#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tailrisk/diagnostics.hpp"
#include "tailrisk/distributions.hpp"
#include "tailrisk/erm.hpp"
#include "tailrisk/errors.hpp"
#include "tailrisk/numeric.hpp"
#include "tailrisk/parallel.hpp"
#include "tailrisk/risk_core.hpp"
#include "tailrisk/robust_mom.hpp"
#include "tailrisk/rng.hpp"

namespace tailrisk {

// ---------------------------------------------------------------------------
// Flat key-value configuration: `key = value`, '#' comments, dotted keys.
// ---------------------------------------------------------------------------

class KeyValueConfig {
 public:
  static KeyValueConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return from_string(buffer.str(), path);
  }

  static KeyValueConfig from_string(const std::string& text,
                                    const std::string& origin = "<string>") {
    KeyValueConfig cfg;
    cfg.origin_ = origin;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      const auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return std::string();
        const auto e = s.find_last_not_of(" \t\r");
        return s.substr(b, e - b + 1);
      };
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) +
                          ": expected `key = value`, got: " + trimmed);
      }
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty()) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
      }
      cfg.values_[key] = value;
      cfg.lines_[key] = lineno;
    }
    return cfg;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key, const std::string& fallback) const {
    const auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  std::string require_string(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing required config key: " + key);
    return it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    return parse_double(key);
  }

  double require_double(const std::string& key) const {
    require_string(key);
    return parse_double(key);
  }

  long long get_int(const std::string& key, long long fallback) const {
    if (!has(key)) return fallback;
    const double v = parse_double(key);
    return static_cast<long long>(std::llround(v));
  }

  std::vector<double> get_double_list(const std::string& key,
                                      std::vector<double> fallback) const {
    if (!has(key)) return fallback;
    std::vector<double> out;
    std::istringstream in(values_.at(key));
    std::string item;
    while (std::getline(in, item, ',')) {
      if (item.find_first_not_of(" \t") == std::string::npos) continue;
      out.push_back(parse_double_value(key, item));
    }
    if (out.empty()) fail(key, "empty list");
    return out;
  }

  std::vector<std::size_t> get_size_list(const std::string& key,
                                         std::vector<std::size_t> fallback) const {
    if (!has(key)) return fallback;
    std::vector<std::size_t> out;
    for (double v : get_double_list(key, {})) {
      if (v < 1.0) fail(key, "list entries must be >= 1");
      out.push_back(static_cast<std::size_t>(std::llround(v)));
    }
    return out;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  [[noreturn]] void fail(const std::string& key, const std::string& why) const {
    const auto it = lines_.find(key);
    const std::string loc =
        it == lines_.end() ? origin_ : origin_ + ":" + std::to_string(it->second);
    throw ConfigError(loc + ": key `" + key + "`: " + why);
  }

  double parse_double(const std::string& key) const {
    return parse_double_value(key, values_.at(key));
  }

  double parse_double_value(const std::string& key, const std::string& text) const {
    try {
      std::size_t pos = 0;
      const double v = std::stod(text, &pos);
      while (pos < text.size() && (text[pos] == ' ' || text[pos] == '\t')) ++pos;
      if (pos != text.size()) throw std::invalid_argument("trailing characters");
      return v;
    } catch (const std::exception&) {
      fail(key, "cannot parse number from `" + text + "`");
    }
  }

  std::string origin_;
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
};

// ---------------------------------------------------------------------------
// Experiment configuration
// ---------------------------------------------------------------------------

enum class Experiment {
  kEstimate,
  kRateSweep,
  kContamSweep,
  kErm,
  kBk,
  kStability,
  kIfCheck,
  kFlip,
  kDepSweep
};

inline const char* experiment_name(Experiment e) {
  switch (e) {
    case Experiment::kEstimate: return "estimate";
    case Experiment::kRateSweep: return "rate-sweep";
    case Experiment::kContamSweep: return "contam-sweep";
    case Experiment::kErm: return "erm";
    case Experiment::kBk: return "bk";
    case Experiment::kStability: return "stability";
    case Experiment::kIfCheck: return "ifcheck";
    case Experiment::kFlip: return "flip";
    case Experiment::kDepSweep: return "dep-sweep";
  }
  return "unknown";
}

struct ExperimentConfig {
  Experiment experiment = Experiment::kRateSweep;
  std::uint64_t seed = 1;
  std::size_t replications = 2000;
  std::vector<std::size_t> n_grid;
  std::vector<double> eps_grid;
  std::size_t sweep_n = 4096;
  RiskSpec spec;
  DistributionModel dist = DistributionModel::pareto(1.0, 2.5);
  EstimatorMethod estimator = EstimatorMethod::kEmpirical;
  MomConfig mom;
  ContaminationPlan contam;
  // erm
  std::string erm_class = "finite";
  std::string erm_loss = "abs";
  ErmObjective erm_objective = ErmObjective::kEmp;
  std::vector<std::vector<double>> erm_hypotheses;
  BallNet net;
  std::string data_file;
  // diagnostics
  FlipConfig flip;
  std::vector<double> delta_grid = {0.0, 0.01, 0.02, 0.04, 0.08};
  std::vector<double> if_eps_grid = {1e-2, 1e-3};
  double if_z = 6.0;
  double if_mean = 0.0;
  double if_sd = 1.0;
  std::vector<double> bk_scales = {1.0, 1.5, 2.0};
  // outputs and control
  std::string output_dir = "out";
  unsigned threads = 0;
  std::optional<double> target_slope;
  std::optional<double> target_tol;
  bool target_disabled = false;

  void validate() const {
    spec.validate();
    if (replications < 1) throw ConfigError("replications must be >= 1");
    const auto check_sorted = [](const auto& grid, const char* name) {
      for (std::size_t i = 1; i < grid.size(); ++i) {
        if (!(grid[i] > grid[i - 1])) {
          throw ConfigError(std::string(name) + " must be strictly increasing");
        }
      }
    };
    check_sorted(n_grid, "n_grid");
    check_sorted(eps_grid, "eps_grid");
  }
};

inline DistributionModel parse_distribution(const KeyValueConfig& kv,
                                            const std::string& kind_key,
                                            const std::string& kind_value) {
  if (kind_value == "pareto") {
    return DistributionModel::pareto(kv.get_double("dist.scale", 1.0),
                                     kv.get_double("dist.shape", 2.5));
  }
  if (kind_value == "logtail") {
    return DistributionModel::log_corrected_tail(kv.get_double("dist.p", 1.5));
  }
  if (kind_value == "atoms") {
    const std::string text = kv.require_string("dist.atoms");
    std::vector<std::pair<double, double>> atoms;
    std::istringstream in(text);
    std::string pair_text;
    while (std::getline(in, pair_text, ';')) {
      const auto colon = pair_text.find(':');
      if (colon == std::string::npos) {
        throw ConfigError("dist.atoms entries must look like value:prob");
      }
      atoms.emplace_back(std::stod(pair_text.substr(0, colon)),
                         std::stod(pair_text.substr(colon + 1)));
    }
    return DistributionModel::discrete_atoms(std::move(atoms));
  }
  if (kind_value == "zeromix") {
    const std::string body = kv.get_string("dist.body", "pareto");
    return DistributionModel::zero_inflated(kv.require_double("dist.zero_mass"),
                                            parse_distribution(kv, kind_key, body));
  }
  if (kind_value == "chain") {
    const std::string marginal = kv.get_string("dist.marginal", "pareto");
    return DistributionModel::mixing_chain(parse_distribution(kv, kind_key, marginal),
                                           kv.require_double("dist.rho"));
  }
  throw ConfigError("unknown " + kind_key + ": " + kind_value);
}

inline ExperimentConfig parse_experiment_config(const KeyValueConfig& kv, Experiment exp) {
  ExperimentConfig cfg;
  cfg.experiment = exp;
  cfg.seed = static_cast<std::uint64_t>(kv.get_int("seed", 1));
  cfg.replications = static_cast<std::size_t>(kv.get_int("replications", 2000));
  cfg.spec.alpha = kv.get_double("risk.alpha", 0.1);
  cfg.spec.lambda = kv.get_double("risk.lambda", 1.0);
  cfg.spec.moment_bound = kv.get_double("risk.m", 1.0);
  cfg.n_grid = kv.get_size_list("n_grid", {128, 256, 512, 1024, 2048, 4096, 8192, 16384});
  cfg.eps_grid = kv.get_double_list("eps_grid", {0.01, 0.02, 0.04, 0.08, 0.16});
  cfg.sweep_n = static_cast<std::size_t>(kv.get_int("sweep.n", 8192));
  if (kv.has("dist.kind")) {
    cfg.dist = parse_distribution(kv, "dist.kind", kv.require_string("dist.kind"));
  }

  const std::string est = kv.get_string("estimator", "emp");
  if (est == "emp") {
    cfg.estimator = EstimatorMethod::kEmpirical;
  } else if (est == "trunc") {
    cfg.estimator = EstimatorMethod::kTruncated;
  } else if (est == "tmom") {
    cfg.estimator = EstimatorMethod::kTmom;
  } else {
    throw ConfigError("estimator must be emp | trunc | tmom");
  }

  cfg.mom.k_blocks = static_cast<std::size_t>(kv.get_int("mom.k", 0));
  cfg.mom.delta = kv.get_double("mom.delta", 0.05);
  cfg.mom.gamma = kv.get_double("mom.gamma", 0.25);
  cfg.mom.d_complexity = static_cast<std::size_t>(kv.get_int("mom.d", 1));
  cfg.mom.eta_theta = kv.get_double("mom.eta_theta", 0.0);
  const std::string trunc = kv.get_string("mom.trunc", "min");
  if (trunc == "stat") {
    cfg.mom.truncation_mode = TruncationMode::kStat;
  } else if (trunc == "adv") {
    cfg.mom.truncation_mode = TruncationMode::kAdv;
  } else if (trunc == "min") {
    cfg.mom.truncation_mode = TruncationMode::kMinOfBoth;
  } else if (trunc == "manual") {
    cfg.mom.truncation_mode = TruncationMode::kManual;
    cfg.mom.manual_b = kv.require_double("mom.b");
  } else {
    throw ConfigError("mom.trunc must be stat | adv | min | manual");
  }

  cfg.contam.epsilon = kv.get_double("contam.eps", 0.0);
  cfg.mom.epsilon_assumed = cfg.contam.epsilon;
  const std::string strategy = kv.get_string("contam.strategy", "atom");
  if (strategy == "atom") {
    cfg.contam.strategy = ContaminationStrategy::kLargeAtom;
  } else if (strategy == "shift") {
    cfg.contam.strategy = ContaminationStrategy::kTailShift;
  } else if (strategy == "zero") {
    cfg.contam.strategy = ContaminationStrategy::kZeroOut;
  } else {
    throw ConfigError("contam.strategy must be atom | shift | zero");
  }
  cfg.contam.value = kv.get_double("contam.value", 1e6);

  cfg.erm_class = kv.get_string("erm.class", "finite");
  cfg.erm_loss = kv.get_string("erm.loss", "abs");
  const std::string objective = kv.get_string("erm.objective", "emp");
  if (objective == "emp") {
    cfg.erm_objective = ErmObjective::kEmp;
  } else if (objective == "trunc") {
    cfg.erm_objective = ErmObjective::kTrunc;
  } else if (objective == "tmom") {
    cfg.erm_objective = ErmObjective::kTmom;
  } else {
    throw ConfigError("erm.objective must be emp | trunc | tmom");
  }
  if (kv.has("erm.hypotheses")) {
    std::istringstream in(kv.require_string("erm.hypotheses"));
    std::string vec_text;
    while (std::getline(in, vec_text, ';')) {
      std::vector<double> params;
      std::istringstream vin(vec_text);
      std::string num;
      while (std::getline(vin, num, ',')) params.push_back(std::stod(num));
      if (!params.empty()) cfg.erm_hypotheses.push_back(std::move(params));
    }
  }
  cfg.net.dim = static_cast<std::size_t>(kv.get_int("net.dim", 1));
  cfg.net.radius = kv.get_double("net.radius", 1.0);
  cfg.net.eta = kv.get_double("net.eta", 0.125);
  cfg.data_file = kv.get_string("data.file", "");

  cfg.flip.p = kv.get_double("flip.p", 1.5);
  cfg.flip.alpha = kv.get_double("flip.alpha", 0.3);
  cfg.flip.eps_mix = kv.get_double("flip.eps", 0.05);
  cfg.flip.gamma = kv.get_double("flip.gamma", 0.5);
  cfg.flip.c_frac = kv.get_double("flip.c", 0.5);

  cfg.delta_grid = kv.get_double_list("stab.delta_grid", cfg.delta_grid);
  cfg.if_eps_grid = kv.get_double_list("if.eps_grid", cfg.if_eps_grid);
  cfg.if_z = kv.get_double("if.z", cfg.if_z);
  cfg.if_mean = kv.get_double("if.mean", cfg.if_mean);
  cfg.if_sd = kv.get_double("if.sd", cfg.if_sd);
  cfg.bk_scales = kv.get_double_list("bk.scales", cfg.bk_scales);

  cfg.output_dir = kv.get_string("out", "out");
  cfg.threads = static_cast<unsigned>(kv.get_int("threads", 0));
  if (kv.has("target.slope")) cfg.target_slope = kv.require_double("target.slope");
  if (kv.has("target.tol")) cfg.target_tol = kv.require_double("target.tol");
  cfg.target_disabled = kv.get_int("target.none", 0) != 0;
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Reports and artifacts
// ---------------------------------------------------------------------------

struct ExperimentReport {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
  double fitted_slope = 0.0;
  double slope_halfwidth = 0.0;
  double target_slope = 0.0;
  double target_tol = 0.0;
  bool has_target = false;
  bool pass = true;
  double wall_seconds = 0.0;
  nlohmann::json extras;
};

inline std::string format_full(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline void write_rows_csv(const std::string& path, const ExperimentReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (std::size_t c = 0; c < report.columns.size(); ++c) {
    out << (c ? "," : "") << report.columns[c];
  }
  out << "\n";
  for (const auto& row : report.rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      out << (c ? "," : "") << format_full(row[c]);
    }
    out << "\n";
  }
}

inline void write_summary_json(const std::string& path, const ExperimentConfig& cfg,
                               const ExperimentReport& report) {
  nlohmann::json j;
  j["experiment"] = experiment_name(cfg.experiment);
  j["seed"] = cfg.seed;
  j["fitted_slope"] = report.fitted_slope;
  j["halfwidth"] = report.slope_halfwidth;
  j["target"] = report.has_target ? nlohmann::json(report.target_slope) : nlohmann::json();
  j["pass"] = report.pass;
  j["wall_time_seconds"] = report.wall_seconds;
  if (!report.extras.is_null()) j["extras"] = report.extras;
  std::ofstream out(path, std::ios::binary);
  out << j.dump(2) << "\n";
}

inline void write_resolved_config(const std::string& path, const ExperimentConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  out << "experiment = " << experiment_name(cfg.experiment) << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "replications = " << cfg.replications << "\n";
  out << "threads = " << cfg.threads << "\n";
  out << "risk.alpha = " << format_full(cfg.spec.alpha) << "\n";
  out << "risk.lambda = " << format_full(cfg.spec.lambda) << "\n";
  out << "risk.m = " << format_full(cfg.spec.moment_bound) << "\n";
  out << "n_grid =";
  for (std::size_t i = 0; i < cfg.n_grid.size(); ++i) {
    out << (i ? "," : " ") << cfg.n_grid[i];
  }
  out << "\n";
  out << "eps_grid =";
  for (std::size_t i = 0; i < cfg.eps_grid.size(); ++i) {
    out << (i ? "," : " ") << format_full(cfg.eps_grid[i]);
  }
  out << "\n";
  if (cfg.mom.k_blocks > 0) {
    out << "mom.k = " << cfg.mom.k_blocks << "\n";
  } else {
    out << "mom.k_default = " << mom_k_default(cfg.mom.delta) << "\n";
  }
  out << "mom.k_theory = " << mom_k_theory(cfg.mom.delta, cfg.mom.gamma) << "\n";
  out << "contam.eps = " << format_full(cfg.contam.epsilon) << "\n";
}

// ---------------------------------------------------------------------------
// Sweep engine
// ---------------------------------------------------------------------------

namespace detail {

struct SweepCell {
  double mean = 0.0;
  double median = 0.0;
  double stddev = 0.0;
  std::size_t count = 0;
  std::size_t failures = 0;
};

/// Replications of metric(grid_index, rep, out_values...) reduced in
/// replication order; failed replications are counted and excluded.
template <class Metric>
SweepCell sweep_cell(std::size_t grid_index, std::size_t reps, unsigned threads,
                     const Metric& metric) {
  std::vector<double> values(reps, std::numeric_limits<double>::quiet_NaN());
  parallel_for(reps, threads, [&](std::size_t rep) {
    try {
      values[rep] = metric(grid_index, rep);
    } catch (const std::exception&) {
      // recorded as a failure below
    }
  });
  SweepCell cell;
  std::vector<double> ok;
  ok.reserve(reps);
  for (double v : values) {
    if (std::isnan(v)) {
      ++cell.failures;
    } else {
      ok.push_back(v);
    }
  }
  cell.count = ok.size();
  if (!ok.empty()) {
    cell.mean = mean_of(ok);
    cell.stddev = sample_std(ok);
    cell.median = lower_median(ok);
  }
  return cell;
}

inline void fit_and_fill(ExperimentReport& report, std::span<const double> x,
                         std::span<const double> y) {
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] > 0.0 && y[i] > 0.0) {
      lx.push_back(std::log(x[i]));
      ly.push_back(std::log(y[i]));
    }
  }
  if (lx.size() < 3) throw InsufficientPointsError("slope fit needs >= 3 positive points");
  const OlsFit fit = ols_fit(lx, ly);
  report.fitted_slope = fit.slope;
  report.slope_halfwidth = 1.96 * fit.slope_se;
}

}  // namespace detail

/// Log-log least squares y ~ x^slope; halfwidth is 1.96 standard errors.
/// Requires at least three strictly positive points.
inline std::pair<double, double> fit_slope(std::span<const std::pair<double, double>> pts) {
  std::vector<double> lx, ly;
  for (const auto& [x, y] : pts) {
    if (x > 0.0 && y > 0.0) {
      lx.push_back(std::log(x));
      ly.push_back(std::log(y));
    }
  }
  if (lx.size() < 3) throw InsufficientPointsError("fit_slope needs >= 3 positive points");
  const OlsFit fit = ols_fit(lx, ly);
  return {fit.slope, 1.96 * fit.slope_se};
}

inline CvarEstimate run_estimator(const ExperimentConfig& cfg, EstimatorMethod method,
                                  std::span<const double> values, RngStream block_stream) {
  switch (method) {
    case EstimatorMethod::kEmpirical:
      return empirical_cvar(values, cfg.spec.alpha);
    case EstimatorMethod::kTruncated:
      return truncated_cvar(values, cfg.spec.alpha, cfg.spec);
    case EstimatorMethod::kTmom:
      return tmom_cvar(values, cfg.spec.alpha, cfg.spec, cfg.mom, block_stream);
  }
  throw std::logic_error("unreachable");
}

// per-experiment runners ------------------------------------------------------

inline ExperimentReport run_rate_sweep(const ExperimentConfig& cfg) {
  ExperimentReport report;
  report.columns = {"n", "mean_error", "median_error", "std_error", "count"};
  const double pop = cfg.dist.population_var_cvar(cfg.spec.alpha).second;
  std::vector<double> xs, ys;
  for (std::size_t gi = 0; gi < cfg.n_grid.size(); ++gi) {
    const std::size_t n = cfg.n_grid[gi];
    const auto cell = detail::sweep_cell(
        gi, cfg.replications, cfg.threads, [&](std::size_t g, std::size_t rep) {
          RngStream draw = RngStream::substream(cfg.seed, stage::kRateSweep, g, rep);
          const SampleSet s = sample(cfg.dist, n, draw);
          RngStream blocks = RngStream::substream(cfg.seed, stage::kBlocks, g, rep);
          const CvarEstimate est = run_estimator(cfg, cfg.estimator, s.values, blocks);
          return std::abs(est.value - pop);
        });
    report.rows.push_back({static_cast<double>(n), cell.mean, cell.median, cell.stddev,
                           static_cast<double>(cell.count)});
    xs.push_back(static_cast<double>(n));
    ys.push_back(cell.mean);
  }
  detail::fit_and_fill(report, xs, ys);
  report.has_target = true;
  report.target_slope = -cfg.spec.lambda / (1.0 + cfg.spec.lambda);
  return report;
}

inline ExperimentReport run_contam_sweep(const ExperimentConfig& cfg) {
  ExperimentReport report;
  report.columns = {"eps",   "mean_error", "median_error",
                    "std_error", "count",  "mean_error_empirical"};
  const double pop = cfg.dist.population_var_cvar(cfg.spec.alpha).second;
  const std::size_t n = cfg.sweep_n;
  std::vector<double> xs, ys;
  for (std::size_t gi = 0; gi < cfg.eps_grid.size(); ++gi) {
    const double eps = cfg.eps_grid[gi];
    ContaminationPlan plan = cfg.contam;
    plan.epsilon = eps;
    MomConfig mom = cfg.mom;
    mom.epsilon_assumed = eps;
    const auto tmom_cell = detail::sweep_cell(
        gi, cfg.replications, cfg.threads, [&](std::size_t g, std::size_t rep) {
          RngStream draw = RngStream::substream(cfg.seed, stage::kContamSweep, g, rep);
          SampleSet s = sample(cfg.dist, n, draw);
          RngStream adv = RngStream::substream(cfg.seed, stage::kContaminate, g, rep);
          s = contaminate(s, plan, adv);
          RngStream blocks = RngStream::substream(cfg.seed, stage::kBlocks, g, rep);
          const CvarEstimate est = tmom_cvar(s.values, cfg.spec.alpha, cfg.spec, mom, blocks);
          return std::abs(est.value - pop);
        });
    const auto emp_cell = detail::sweep_cell(
        gi, cfg.replications, cfg.threads, [&](std::size_t g, std::size_t rep) {
          RngStream draw = RngStream::substream(cfg.seed, stage::kContamSweep, g, rep);
          SampleSet s = sample(cfg.dist, n, draw);
          RngStream adv = RngStream::substream(cfg.seed, stage::kContaminate, g, rep);
          s = contaminate(s, plan, adv);
          return std::abs(empirical_cvar(s.values, cfg.spec.alpha).value - pop);
        });
    report.rows.push_back({eps, tmom_cell.mean, tmom_cell.median, tmom_cell.stddev,
                           static_cast<double>(tmom_cell.count), emp_cell.mean});
    xs.push_back(eps);
    ys.push_back(tmom_cell.mean);
  }
  detail::fit_and_fill(report, xs, ys);
  report.has_target = true;
  report.target_slope = cfg.spec.lambda / (1.0 + cfg.spec.lambda);
  return report;
}

inline ExperimentReport run_dep_sweep(const ExperimentConfig& cfg) {
  if (cfg.dist.kind() != DistributionModel::Kind::kChain) {
    throw ConfigError("dep-sweep requires dist.kind = chain");
  }
  ExperimentReport report;
  report.columns = {"n",     "mean_error_dep", "median_error_dep", "std_error_dep",
                    "count", "mean_error_iid", "std_error_iid"};
  const DistributionModel marginal = cfg.dist.body();
  const double pop = marginal.population_var_cvar(cfg.spec.alpha).second;
  std::vector<double> xs_eff, ys;
  std::vector<double> slope_n_x;
  for (std::size_t gi = 0; gi < cfg.n_grid.size(); ++gi) {
    const std::size_t n = cfg.n_grid[gi];
    const auto dep_cell = detail::sweep_cell(
        gi, cfg.replications, cfg.threads, [&](std::size_t g, std::size_t rep) {
          RngStream draw = RngStream::substream(cfg.seed, stage::kDepSweep, g, rep);
          const SampleSet s = sample(cfg.dist, n, draw);
          RngStream blocks = RngStream::substream(cfg.seed, stage::kBlocks, g, rep);
          const CvarEstimate est = run_estimator(cfg, cfg.estimator, s.values, blocks);
          return std::abs(est.value - pop);
        });
    const auto iid_cell = detail::sweep_cell(
        gi, cfg.replications, cfg.threads, [&](std::size_t g, std::size_t rep) {
          RngStream draw = RngStream::substream(cfg.seed, stage::kIidBaseline, g, rep);
          const SampleSet s = sample(marginal, n, draw);
          RngStream blocks = RngStream::substream(cfg.seed, stage::kBlocks, g, rep);
          const CvarEstimate est = run_estimator(cfg, cfg.estimator, s.values, blocks);
          return std::abs(est.value - pop);
        });
    report.rows.push_back({static_cast<double>(n), dep_cell.mean, dep_cell.median,
                           dep_cell.stddev, static_cast<double>(dep_cell.count),
                           iid_cell.mean, iid_cell.stddev});
    const double dn = static_cast<double>(n);
    xs_eff.push_back(dn / std::log(dn));
    slope_n_x.push_back(dn);
    ys.push_back(dep_cell.mean);
  }
  detail::fit_and_fill(report, xs_eff, ys);  // slope against n / log n
  {
    ExperimentReport raw;
    detail::fit_and_fill(raw, slope_n_x, ys);
    report.extras["slope_vs_n"] = raw.fitted_slope;
  }
  report.has_target = true;
  report.target_slope = -cfg.spec.lambda / (1.0 + cfg.spec.lambda);
  report.target_tol = 0.12;
  return report;
}

inline ExperimentReport run_bk(const ExperimentConfig& cfg) {
  ExperimentReport report;
  report.columns = {"n",        "sup_main", "sup_correction", "sup_remainder",
                    "eps_real", "delta_n",  "count"};
  std::vector<double> xs, rem, main_terms;
  for (std::size_t gi = 0; gi < cfg.n_grid.size(); ++gi) {
    const std::size_t n = cfg.n_grid[gi];
    RngStream base = RngStream::substream(cfg.seed, stage::kBk, gi, 0);
    const BkReport bk = bk_decompose(cfg.dist, cfg.spec.alpha, cfg.bk_scales, n,
                                     cfg.replications, base, cfg.threads);
    report.rows.push_back({static_cast<double>(n), bk.sup_main, bk.sup_correction,
                           bk.sup_remainder, bk.eps_n_realized, bk.delta_n,
                           static_cast<double>(cfg.replications)});
    xs.push_back(static_cast<double>(n));
    rem.push_back(bk.sup_remainder);
    main_terms.push_back(bk.sup_main);
  }
  detail::fit_and_fill(report, xs, rem);
  {
    ExperimentReport main_fit;
    detail::fit_and_fill(main_fit, xs, main_terms);
    report.extras["main_slope"] = main_fit.fitted_slope;
  }
  report.has_target = true;
  report.target_slope = -1.0;
  report.target_tol = 0.2;
  return report;
}

inline ExperimentReport run_stability(const ExperimentConfig& cfg) {
  ExperimentReport report;
  report.columns = {"n", "mean_abs_dev", "std_abs_dev", "count"};
  RngStream base = RngStream::substream(cfg.seed, stage::kThresholdDev, 0, 0);
  const ThresholdDeviationReport dev = threshold_deviation(
      cfg.dist, cfg.spec.alpha, cfg.n_grid, cfg.replications, base, cfg.threads);
  for (std::size_t gi = 0; gi < dev.n_grid.size(); ++gi) {
    report.rows.push_back({static_cast<double>(dev.n_grid[gi]), dev.mean_abs_dev[gi],
                           dev.std_abs_dev[gi], static_cast<double>(cfg.replications)});
  }
  report.fitted_slope = dev.slope;
  report.slope_halfwidth = dev.halfwidth;
  const LpStabilityReport lp = lp_threshold_stability(cfg.dist, cfg.spec.alpha, cfg.delta_grid);
  report.extras["lp_margin"] = lp.margin;
  report.extras["lp_fitted_c"] = lp.fitted_c;
  report.extras["lp_plateau_jump"] = lp.plateau_jump;
  report.extras["lp_plateau_width"] = lp.plateau_width;
  for (const auto& row : lp.rows) {
    report.extras["lp_rows"].push_back({{"delta", row.delta},
                                        {"shift", row.shift},
                                        {"bound", row.bound}});
  }
  report.has_target = true;
  report.target_slope = -0.5;
  report.target_tol = 0.1;
  return report;
}

inline ExperimentReport run_ifcheck(const ExperimentConfig& cfg) {
  ExperimentReport report;
  report.columns = {"eps", "fd_h", "fd_theta", "error", "count"};
  QuadraticCvarToy toy;
  toy.alpha = cfg.spec.alpha;
  toy.data.components = {{cfg.if_mean, cfg.if_sd, 1.0}};
  InfluenceReport inf = influence_check(toy, cfg.if_z, cfg.if_eps_grid);
  for (const auto& row : inf.fd_path) {
    report.rows.push_back({row.eps, row.fd_h, row.fd_theta, row.error, 1.0});
  }
  std::vector<double> z_grid;
  for (double z = -2.0 * cfg.if_z; z <= 2.0 * cfg.if_z; z += cfg.if_z / 4.0) {
    z_grid.push_back(z);
  }
  const double radius = robustness_radius(inf, 0.1, z_grid);
  report.extras["if_h"] = inf.influence[0];
  report.extras["if_theta"] = inf.influence[1];
  report.extras["margin"] = inf.margin;
  report.extras["condition_number"] = inf.condition_number;
  report.extras["radius_lower_bound"] = radius;
  report.extras["h_star"] = inf.h_star;
  report.extras["theta_star"] = inf.theta_star;
  if (inf.fd_path.size() >= 2) {
    report.extras["error_ratio"] =
        inf.fd_path.front().error / std::max(inf.fd_path.back().error, 1e-300);
  }
  return report;
}

inline ExperimentReport run_flip(const ExperimentConfig& cfg) {
  ExperimentReport report;
  report.columns = {"n", "witnesses", "flips", "frequency", "population_gap", "count"};
  FlipConfig flip = cfg.flip;
  flip.n_grid = cfg.n_grid;
  flip.replications = cfg.replications;
  RngStream base = RngStream::substream(cfg.seed, stage::kFlip, 0, 0);
  const FlipReport fr = flip_experiment(flip, base, cfg.threads);
  for (const auto& row : fr.rows) {
    report.rows.push_back({static_cast<double>(row.n), static_cast<double>(row.witnesses),
                           static_cast<double>(row.flips), row.frequency,
                           row.population_gap, static_cast<double>(row.replications)});
  }
  report.fitted_slope = fr.slope;
  report.slope_halfwidth = fr.halfwidth;
  report.has_target = true;
  report.target_slope = fr.target;
  report.target_tol = 0.3;
  report.extras["fit_points"] = fr.fit_points;
  return report;
}

inline std::vector<double> read_loss_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open data file: " + path);
  std::vector<double> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    try {
      out.push_back(std::stod(line));
    } catch (const std::exception&) {
      if (out.empty()) continue;  // tolerate a header line
      throw ConfigError("cannot parse loss value: " + line);
    }
  }
  if (out.empty()) throw ConfigError("no losses in " + path);
  return out;
}

inline std::vector<Record> read_records_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open data file: " + path);
  std::string header;
  if (!std::getline(in, header)) throw ConfigError("empty data file: " + path);
  std::vector<std::string> names;
  {
    std::istringstream hs(header);
    std::string col;
    while (std::getline(hs, col, ',')) names.push_back(col);
  }
  std::ptrdiff_t y_col = -1;
  std::vector<std::size_t> x_cols;
  for (std::size_t c = 0; c < names.size(); ++c) {
    if (names[c] == "y") {
      y_col = static_cast<std::ptrdiff_t>(c);
    } else {
      x_cols.push_back(c);
    }
  }
  std::vector<Record> records;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::vector<double> fields;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) fields.push_back(std::stod(cell));
    if (fields.size() != names.size()) {
      throw ConfigError("row width mismatch in " + path);
    }
    Record r;
    for (std::size_t c : x_cols) r.x.push_back(fields[c]);
    if (y_col >= 0) r.y = fields[static_cast<std::size_t>(y_col)];
    records.push_back(std::move(r));
  }
  if (records.empty()) throw ConfigError("no records in " + path);
  return records;
}

inline ExperimentReport run_estimate(const ExperimentConfig& cfg) {
  ExperimentReport report;
  report.columns = {"index", "value", "threshold", "truncation_level", "n_effective"};
  if (cfg.data_file.empty()) throw ConfigError("estimate requires data.file");
  const std::vector<double> losses = read_loss_csv(cfg.data_file);
  RngStream blocks = RngStream::substream(cfg.seed, stage::kBlocks, 0, 0);
  const CvarEstimate est = run_estimator(cfg, cfg.estimator, losses, blocks);
  report.rows.push_back({0.0, est.value, est.threshold,
                         est.truncation_level ? *est.truncation_level : 0.0,
                         static_cast<double>(est.n_effective)});
  report.extras["value"] = est.value;
  report.extras["threshold"] = est.threshold;
  return report;
}

inline ExperimentReport run_erm(const ExperimentConfig& cfg) {
  ExperimentReport report;
  report.columns = {"hypothesis", "cvar_value"};
  if (cfg.data_file.empty()) throw ConfigError("erm requires data.file");
  const std::vector<Record> records = read_records_csv(cfg.data_file);

  HypothesisClass cls = FiniteExplicit{};
  if (cfg.erm_class == "net") {
    BallNetClass ball;
    ball.net = cfg.net;
    ball.loss = cfg.erm_loss == "sq" ? LossKind::kSq : LossKind::kAbs;
    cls = ball;
  } else {
    FiniteExplicit finite;
    if (cfg.erm_loss == "flip") {
      FlipPair a;
      a.n_scale = records.size();
      a.gamma = cfg.flip.gamma;
      a.c_frac = cfg.flip.c_frac;
      a.which = FlipPair::Which::kA;
      FlipPair b = a;
      b.which = FlipPair::Which::kB;
      finite.hypotheses = {a, b};
    } else {
      if (cfg.erm_hypotheses.empty()) {
        throw ConfigError("erm.class = finite requires erm.hypotheses (or erm.loss = flip)");
      }
      for (const auto& params : cfg.erm_hypotheses) {
        if (cfg.erm_loss == "sq") {
          finite.hypotheses.push_back(SqLinear{params});
        } else {
          finite.hypotheses.push_back(AbsLinear{params});
        }
      }
    }
    cls = finite;
  }

  RngStream stream = RngStream::substream(cfg.seed, stage::kErm, 0, 0);
  const ErmResult result = erm_finite(records, cls, cfg.spec.alpha, cfg.erm_objective,
                                      cfg.spec, cfg.mom, stream, cfg.threads);
  for (std::size_t i = 0; i < result.per_hypothesis_values.size(); ++i) {
    report.rows.push_back({static_cast<double>(i), result.per_hypothesis_values[i]});
  }
  report.extras["chosen_index"] = result.chosen_index;
  report.extras["objective_value"] = result.objective_value;
  report.extras["threshold"] = result.threshold;
  if (result.chosen_params) report.extras["chosen_params"] = *result.chosen_params;
  return report;
}

/// Runs the experiment, applies the pass rule, writes rows.csv, summary.json
/// and resolved_config.txt under cfg.output_dir.
inline ExperimentReport run(const ExperimentConfig& cfg) {
  const auto start = std::chrono::steady_clock::now();
  ExperimentReport report;
  switch (cfg.experiment) {
    case Experiment::kEstimate: report = run_estimate(cfg); break;
    case Experiment::kRateSweep: report = run_rate_sweep(cfg); break;
    case Experiment::kContamSweep: report = run_contam_sweep(cfg); break;
    case Experiment::kErm: report = run_erm(cfg); break;
    case Experiment::kBk: report = run_bk(cfg); break;
    case Experiment::kStability: report = run_stability(cfg); break;
    case Experiment::kIfCheck: report = run_ifcheck(cfg); break;
    case Experiment::kFlip: report = run_flip(cfg); break;
    case Experiment::kDepSweep: report = run_dep_sweep(cfg); break;
  }
  if (report.has_target && report.target_tol == 0.0) report.target_tol = 0.15;
  if (cfg.target_slope) {
    report.has_target = true;
    report.target_slope = *cfg.target_slope;
  }
  if (cfg.target_tol) report.target_tol = *cfg.target_tol;
  if (cfg.target_disabled) report.has_target = false;
  report.pass = !report.has_target ||
                std::abs(report.fitted_slope - report.target_slope) <= report.target_tol;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  std::filesystem::create_directories(cfg.output_dir);
  write_rows_csv(cfg.output_dir + "/rows.csv", report);
  write_summary_json(cfg.output_dir + "/summary.json", cfg, report);
  write_resolved_config(cfg.output_dir + "/resolved_config.txt", cfg);
  return report;
}

}  // namespace tailrisk
