#pragma once

#include <algorithm>
#include <cassert>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "tailrisk/distributions.hpp"
#include "tailrisk/errors.hpp"
#include "tailrisk/numeric.hpp"
#include "tailrisk/risk_core.hpp"
#include "tailrisk/rng.hpp"

namespace tailrisk {

enum class TruncationMode { kStat, kAdv, kMinOfBoth, kManual };

/// Median-of-means configuration. k_blocks == 0 selects the default
/// ceil(8 ln(4/delta)) clamped to [3, n/2]; the theoretical
/// ceil((8/gamma^2) ln(4/delta)) is reported alongside, never imposed.
struct MomConfig {
  std::size_t k_blocks = 0;
  double delta = 0.05;
  double gamma = 0.25;
  TruncationMode truncation_mode = TruncationMode::kMinOfBoth;
  std::optional<double> manual_b;
  std::size_t d_complexity = 1;
  double epsilon_assumed = 0.0;  // contamination level the estimator guards against
  double eta_theta = 0.0;        // theta lattice step; 0 selects T/256
  double c_lambda = 0.0;         // moment inflation constant; 0 selects 2^lambda * 2
};

enum class ContaminationStrategy { kLargeAtom, kTailShift, kZeroOut };

/// Oblivious adversary: floor(eps n) uniformly chosen indices replaced per
/// strategy; index choice never reads the clean values.
struct ContaminationPlan {
  double epsilon = 0.0;
  ContaminationStrategy strategy = ContaminationStrategy::kLargeAtom;
  double value = 0.0;  // atom value or tail-shift offset
};

inline SampleSet contaminate(const SampleSet& samples, const ContaminationPlan& plan,
                             RngStream& stream) {
  if (plan.epsilon < 0.0 || plan.epsilon >= 0.5) {
    throw std::invalid_argument("contamination epsilon must be in [0, 1/2)");
  }
  const std::size_t n = samples.values.size();
  const std::size_t m = static_cast<std::size_t>(
      std::floor(plan.epsilon * static_cast<double>(n) + 1e-12));
  SampleSet out = samples;
  if (m == 0) return out;
  // partial Fisher-Yates: first m entries of a virtual permutation
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = 0; i < m; ++i) {
    std::swap(idx[i], idx[i + stream.next_index(n - i)]);
  }
  for (std::size_t i = 0; i < m; ++i) {
    double& x = out.values[idx[i]];
    switch (plan.strategy) {
      case ContaminationStrategy::kLargeAtom:
        x = plan.value;
        break;
      case ContaminationStrategy::kTailShift:
        x += plan.value;
        break;
      case ContaminationStrategy::kZeroOut:
        x = 0.0;
        break;
    }
  }
  return out;
}

/// Uniform random permutation split into K equal blocks of m = floor(n/K);
/// leftover indices are discarded and reported.
struct BlockAssignment {
  std::vector<std::vector<std::size_t>> blocks;
  std::size_t block_size = 0;
  std::size_t discarded = 0;
  bool singleton_blocks = false;  // degenerate m == 1 case, flagged not fatal
};

inline BlockAssignment mom_block_scheme(std::size_t n, std::size_t k_blocks,
                                        RngStream& stream) {
  if (k_blocks < 1 || k_blocks > n) throw std::invalid_argument("need 1 <= K <= n");
  BlockAssignment out;
  out.block_size = n / k_blocks;
  out.discarded = n - k_blocks * out.block_size;
  out.singleton_blocks = out.block_size == 1;
  const std::vector<std::size_t> perm = random_permutation(n, stream);
  out.blocks.resize(k_blocks);
  std::size_t pos = 0;
  for (std::size_t j = 0; j < k_blocks; ++j) {
    out.blocks[j].assign(perm.begin() + pos, perm.begin() + pos + out.block_size);
    pos += out.block_size;
  }
  return out;
}

/// Theoretical block count ceil((8/gamma^2) ln(4/delta)) from the
/// majority-of-good-blocks lemma.
inline std::size_t mom_k_theory(double delta, double gamma) {
  if (!(delta > 0.0 && delta < 1.0)) throw std::invalid_argument("delta must be in (0,1)");
  if (!(gamma > 0.0 && gamma < 0.5)) throw std::invalid_argument("gamma must be in (0,1/2)");
  return static_cast<std::size_t>(std::ceil(8.0 / (gamma * gamma) * std::log(4.0 / delta)));
}

/// Practical corruption-agnostic default ceil(8 ln(4/delta)), floor-clamped
/// at 3; the caller clamps above at n/2.
inline std::size_t mom_k_default(double delta) {
  const double raw = 8.0 * std::log(4.0 / delta);
  const auto k = static_cast<long long>(std::ceil(raw));
  return static_cast<std::size_t>(std::max(k, 3LL));
}

struct ResolvedK {
  std::size_t k_used = 0;
  std::size_t k_theory = 0;
};

inline ResolvedK resolve_k(const MomConfig& cfg, std::size_t n) {
  ResolvedK r;
  r.k_theory = mom_k_theory(cfg.delta, cfg.gamma);
  if (cfg.k_blocks > 0) {
    r.k_used = cfg.k_blocks;  // explicit override, taken as-is
  } else {
    r.k_used = std::max<std::size_t>(
        std::min(mom_k_default(cfg.delta), std::max<std::size_t>(n / 2, 1)), 1);
  }
  return r;
}

/// Moment bound for the lifted RU loss: M_phi = c_lambda M / alpha^{1+lambda},
/// c_lambda = 2^lambda * 2 by default.
inline double lifted_moment_bound(const RiskSpec& spec, double c_lambda = 0.0) {
  spec.validate();
  const double c = c_lambda > 0.0 ? c_lambda : std::pow(2.0, spec.lambda) * 2.0;
  return c * spec.moment_bound / std::pow(spec.alpha, 1.0 + spec.lambda);
}

/// Truncation level B = min(B_stat, B_adv) with
/// B_stat = (M_phi n / d)^{1/(1+lambda)} and B_adv = (M_phi / eps)^{1/(1+lambda)};
/// eps = 0 selects B_stat alone.
inline double truncation_level_from_mphi(double m_phi, std::size_t n, std::size_t d,
                                         double epsilon, double lambda) {
  if (epsilon < 0.0) throw std::invalid_argument("epsilon must be >= 0");
  const double expo = 1.0 / (1.0 + lambda);
  const double b_stat =
      std::pow(m_phi * static_cast<double>(n) / static_cast<double>(std::max<std::size_t>(d, 1)),
               expo);
  if (epsilon == 0.0) return b_stat;
  const double b_adv = std::pow(m_phi / epsilon, expo);
  return std::min(b_stat, b_adv);
}

inline double truncation_level(const RiskSpec& spec, std::size_t n, double epsilon,
                               const MomConfig& cfg) {
  const double m_phi = lifted_moment_bound(spec, cfg.c_lambda);
  switch (cfg.truncation_mode) {
    case TruncationMode::kStat:
      return truncation_level_from_mphi(m_phi, n, cfg.d_complexity, 0.0, spec.lambda);
    case TruncationMode::kAdv:
      if (epsilon <= 0.0) {
        return truncation_level_from_mphi(m_phi, n, cfg.d_complexity, 0.0, spec.lambda);
      }
      return std::pow(m_phi / epsilon, 1.0 / (1.0 + spec.lambda));
    case TruncationMode::kMinOfBoth:
      return truncation_level_from_mphi(m_phi, n, cfg.d_complexity, epsilon, spec.lambda);
    case TruncationMode::kManual:
      if (!cfg.manual_b || !(*cfg.manual_b > 0.0)) {
        throw std::invalid_argument("manual truncation mode requires manual_b > 0");
      }
      return *cfg.manual_b;
  }
  return 0.0;
}

namespace detail {

// Per-block mean of the truncated lifted loss min(theta + (x-theta)_+/alpha, b_phi)
// for every theta on a sorted grid. Both the hinge knee (theta itself) and the
// cap knee theta (1-alpha) + alpha b_phi grow with theta, so a single monotone
// sweep with prefix sums covers the whole grid in O(grid + m) per block.
inline void block_means_over_grid(std::span<const double> sorted_block, double alpha,
                                  double b_phi, std::span<const double> grid,
                                  std::span<double> out) {
  const std::size_t m = sorted_block.size();
  std::vector<double> prefix(m + 1, 0.0);
  {
    KahanSum acc;
    for (std::size_t i = 0; i < m; ++i) {
      acc.add(sorted_block[i]);
      prefix[i + 1] = acc.value();
    }
  }
  const double inv_alpha = 1.0 / alpha;
  const double inv_m = 1.0 / static_cast<double>(m);
  std::size_t lo = 0;  // first index with x > theta
  std::size_t hi = 0;  // first index with lifted value >= b_phi
  const bool capped = std::isfinite(b_phi);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const double theta = grid[g];
    while (lo < m && sorted_block[lo] <= theta) ++lo;
    const double x_cap = theta + alpha * (b_phi - theta);
    if (capped) {
      while (hi < m && sorted_block[hi] < x_cap) ++hi;
    } else {
      hi = m;
    }
    const std::size_t cut = std::max(lo, hi);
    // below lo: phi = theta; in [lo, cut): phi = theta + (x-theta)/alpha; above: b_phi
    const double mid_sum = prefix[cut] - prefix[lo];
    const double mid_count = static_cast<double>(cut - lo);
    double total = theta * static_cast<double>(lo) + mid_count * theta +
                   inv_alpha * (mid_sum - mid_count * theta) +
                   (capped ? b_phi * static_cast<double>(m - cut) : 0.0);
    out[g] = total * inv_m;
    assert(!(capped && out[g] > b_phi * (1.0 + 1e-12)));
  }
}

}  // namespace detail

/// Truncated median-of-means CVaR with a caller-supplied block assignment
/// (ERM reuses one permutation across all hypotheses).
///
/// The theta grid is the lattice {0, eta, 2 eta, ...} on [0, T] with
/// T = M^{1/(1+lambda)}/alpha, augmented with every sample knot <= T. The
/// lifted loss is truncated at the envelope B_phi = B/alpha + T (manual mode
/// caps raw losses instead and leaves the lift uncapped). The reported value
/// is the grid argmin of the blockwise lower median; ties pick the smallest
/// theta.
inline CvarEstimate tmom_cvar_with_blocks(std::span<const double> samples, double alpha,
                                          const RiskSpec& spec, const MomConfig& cfg,
                                          const BlockAssignment& assignment) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0,1)");
  spec.validate();
  if (assignment.block_size < 2) {
    throw DegenerateBlocksError("tmom requires block size m >= 2");
  }
  if (cfg.epsilon_assumed > 0.5 - cfg.gamma) {
    throw std::invalid_argument("requires epsilon <= 1/2 - gamma");
  }
  const std::size_t k = assignment.blocks.size();
  const std::size_t m = assignment.block_size;

  const double t_bound = spec.threshold_bound();
  const double b = truncation_level(spec, samples.size(), cfg.epsilon_assumed, cfg);
  const bool manual = cfg.truncation_mode == TruncationMode::kManual;
  const double b_phi = manual ? std::numeric_limits<double>::infinity() : b / alpha + t_bound;

  // grid = lattice on [0, T] plus sample knots <= T
  const double eta = cfg.eta_theta > 0.0 ? cfg.eta_theta : t_bound / 256.0;
  std::vector<double> grid;
  for (double theta = 0.0; theta <= t_bound + 1e-12; theta += eta) grid.push_back(theta);
  for (double x : samples) {
    const double knot = manual ? std::min(x, b) : x;
    if (knot <= t_bound) grid.push_back(knot);
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  std::vector<std::vector<double>> sorted_blocks(k);
  for (std::size_t j = 0; j < k; ++j) {
    sorted_blocks[j].reserve(m);
    for (std::size_t idx : assignment.blocks[j]) {
      const double x = samples[idx];
      sorted_blocks[j].push_back(manual ? std::min(x, b) : x);
    }
    std::sort(sorted_blocks[j].begin(), sorted_blocks[j].end());
  }

  std::vector<std::vector<double>> block_values(k, std::vector<double>(grid.size()));
  for (std::size_t j = 0; j < k; ++j) {
    detail::block_means_over_grid(sorted_blocks[j], alpha, b_phi, grid, block_values[j]);
  }

  CvarEstimate est;
  est.method = EstimatorMethod::kTmom;
  est.truncation_level = manual ? b : b_phi;
  est.n_effective = k * m;
  double best = std::numeric_limits<double>::infinity();
  double best_theta = 0.0;
  std::vector<double> column(k);
  for (std::size_t g = 0; g < grid.size(); ++g) {
    for (std::size_t j = 0; j < k; ++j) column[j] = block_values[j][g];
    const double med = lower_median_inplace(column);
    if (med < best) {
      best = med;
      best_theta = grid[g];
    }
  }
  est.value = best;
  est.threshold = best_theta;
  return est;
}

/// Truncated median-of-means CVaR; draws its own uniform block permutation.
inline CvarEstimate tmom_cvar(std::span<const double> samples, double alpha,
                              const RiskSpec& spec, const MomConfig& cfg,
                              RngStream& stream) {
  const ResolvedK k = resolve_k(cfg, samples.size());
  const BlockAssignment assignment = mom_block_scheme(samples.size(), k.k_used, stream);
  return tmom_cvar_with_blocks(samples, alpha, spec, cfg, assignment);
}

inline CvarEstimate tmom_cvar(const SampleSet& samples, double alpha, const RiskSpec& spec,
                              const MomConfig& cfg, RngStream& stream) {
  return tmom_cvar(std::span<const double>(samples.values), alpha, spec, cfg, stream);
}

}  // namespace tailrisk
