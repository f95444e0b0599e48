#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "tailrisk/distributions.hpp"
#include "tailrisk/numeric.hpp"

namespace tailrisk {

enum class EstimatorMethod { kEmpirical, kTruncated, kTmom };

/// Output of a CVaR estimator: the value, the minimal RU-minimizing threshold,
/// and method metadata.
struct CvarEstimate {
  double value = 0.0;
  double threshold = 0.0;
  EstimatorMethod method = EstimatorMethod::kEmpirical;
  std::optional<double> truncation_level;
  std::size_t n_effective = 0;
};

/// Diagnostic trace of the empirical RU objective on its knot set.
struct RuObjectiveTrace {
  std::vector<double> knots;
  std::vector<double> objective_at_knots;
};

/// Rockafellar-Uryasev objective theta + (alpha n)^{-1} sum (x_i - theta)_+.
/// Hinge sums are Kahan-compensated throughout; heavy tails mix magnitudes badly.
inline double ru_objective(std::span<const double> samples, double alpha, double theta) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0,1)");
  KahanSum hinge;
  for (double x : samples) {
    if (x > theta) hinge.add(x - theta);
  }
  return theta + hinge.value() / (alpha * static_cast<double>(samples.size()));
}

/// Minimal empirical RU threshold inf{theta : P_n(X > theta) <= alpha}: the
/// order statistic x_(n - floor(alpha n)) in ascending 1-indexed order. Ties
/// are handled by the order statistic itself; no jitter.
inline double empirical_var_threshold(std::span<const double> samples, double alpha) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0,1)");
  const std::size_t n = samples.size();
  if (n < 1) throw std::invalid_argument("need at least one sample");
  const std::size_t k = std::min(floor_alpha_n(alpha, n), n - 1);  // #samples allowed strictly above
  std::vector<double> work(samples.begin(), samples.end());
  const std::size_t idx = n - k - 1;  // 0-based index of x_(n-k)
  std::nth_element(work.begin(), work.begin() + idx, work.end());
  return work[idx];
}

/// Exact empirical CVaR through the RU representation; the returned threshold
/// is the minimal minimizer (a sample order statistic).
inline CvarEstimate empirical_cvar(std::span<const double> samples, double alpha) {
  CvarEstimate est;
  est.threshold = empirical_var_threshold(samples, alpha);
  est.value = ru_objective(samples, alpha, est.threshold);
  est.method = EstimatorMethod::kEmpirical;
  est.n_effective = samples.size();
  return est;
}

inline CvarEstimate empirical_cvar(const SampleSet& samples, double alpha) {
  return empirical_cvar(std::span<const double>(samples.values), alpha);
}

/// Truncation level for the truncated estimator: B = (M n)^{1/(1+lambda)}.
inline double empirical_truncation_level(const RiskSpec& spec, std::size_t n) {
  spec.validate();
  return std::pow(spec.moment_bound * static_cast<double>(n), 1.0 / (1.0 + spec.lambda));
}

/// Empirical CVaR of the losses capped at B = (M n)^{1/(1+lambda)}.
inline CvarEstimate truncated_cvar(std::span<const double> samples, double alpha,
                                   const RiskSpec& spec) {
  const double cap = empirical_truncation_level(spec, samples.size());
  std::vector<double> capped(samples.begin(), samples.end());
  for (double& x : capped) x = std::min(x, cap);
  CvarEstimate est = empirical_cvar(std::span<const double>(capped), alpha);
  est.method = EstimatorMethod::kTruncated;
  est.truncation_level = cap;
  return est;
}

inline CvarEstimate truncated_cvar(const SampleSet& samples, double alpha,
                                   const RiskSpec& spec) {
  return truncated_cvar(std::span<const double>(samples.values), alpha, spec);
}

/// RU objective evaluated at every sample knot plus 0.
inline RuObjectiveTrace ru_trace(std::span<const double> samples, double alpha) {
  RuObjectiveTrace trace;
  trace.knots.assign(samples.begin(), samples.end());
  trace.knots.push_back(0.0);
  std::sort(trace.knots.begin(), trace.knots.end());
  trace.knots.erase(std::unique(trace.knots.begin(), trace.knots.end()), trace.knots.end());
  trace.objective_at_knots.reserve(trace.knots.size());
  for (double theta : trace.knots) {
    trace.objective_at_knots.push_back(ru_objective(samples, alpha, theta));
  }
  return trace;
}

}  // namespace tailrisk
