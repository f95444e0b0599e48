#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "tailrisk/errors.hpp"
#include "tailrisk/parallel.hpp"
#include "tailrisk/risk_core.hpp"
#include "tailrisk/robust_mom.hpp"

namespace tailrisk {

/// Data record z = (x, y); losses that act on a bare scalar read it from y.
struct Record {
  std::vector<double> x;
  double y = 0.0;
};

/// |<h, x> - y|
struct AbsLinear {
  std::vector<double> params;
};

/// (<h, x> - y)^2
struct SqLinear {
  std::vector<double> params;
};

/// The two-point flip pair on scalar z (read from Record::y):
///   loss(A, z) = z
///   loss(B, 0) = 0,  loss(B, z) = z + gamma - C n 1{z in (n, 2n]}  for z > 0.
/// Requires C < 1 so the discounted bin value (1-C) n + gamma stays positive.
struct FlipPair {
  std::size_t n_scale = 0;
  double gamma = 0.0;
  double c_frac = 0.0;
  enum class Which { kA, kB };
  Which which = Which::kA;
};

using LossMap = std::variant<AbsLinear, SqLinear, FlipPair>;

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double loss_value(const LossMap& map, const Record& z) {
  if (const auto* abs = std::get_if<AbsLinear>(&map)) {
    return std::abs(dot(abs->params, z.x) - z.y);
  }
  if (const auto* sq = std::get_if<SqLinear>(&map)) {
    const double r = dot(sq->params, z.x) - z.y;
    return r * r;
  }
  const auto& fp = std::get<FlipPair>(map);
  const double v = z.y;
  if (fp.which == FlipPair::Which::kA) return v;
  if (v == 0.0) return 0.0;
  const double nn = static_cast<double>(fp.n_scale);
  const double discount = (v > nn && v <= 2.0 * nn) ? fp.c_frac * nn : 0.0;
  return v + fp.gamma - discount;
}

inline std::optional<std::vector<double>> loss_params(const LossMap& map) {
  if (const auto* abs = std::get_if<AbsLinear>(&map)) return abs->params;
  if (const auto* sq = std::get_if<SqLinear>(&map)) return sq->params;
  return std::nullopt;
}

/// Lattice eta-net of the closed l2 ball of radius R in dimension d.
struct BallNet {
  std::size_t dim = 1;
  double radius = 1.0;
  double eta = 1.0;
  std::size_t cardinality_cap = 1'000'000;
};

/// Lattice of mesh eta/sqrt(d) intersected with the closed ball. Rounding any
/// ball point toward the origin lands on a net point within eta, so the net is
/// an eta-cover of the ball.
inline std::vector<std::vector<double>> build_net(const BallNet& net) {
  if (net.dim < 1 || !(net.radius > 0.0) || !(net.eta > 0.0)) {
    throw std::invalid_argument("build_net requires d >= 1, R > 0, eta > 0");
  }
  const double mesh = net.eta / std::sqrt(static_cast<double>(net.dim));
  const auto half_span = static_cast<long long>(std::floor(net.radius / mesh + 1e-12));
  const double per_dim = 2.0 * static_cast<double>(half_span) + 1.0;
  if (std::pow(per_dim, static_cast<double>(net.dim)) >
      static_cast<double>(net.cardinality_cap) * 4.0 + 16.0) {
    // box strictly larger than any admissible net; bail before enumerating
    throw NetTooLargeError("net cardinality exceeds the configured cap");
  }
  std::vector<std::vector<double>> points;
  std::vector<long long> index(net.dim, -half_span);
  const double r2 = net.radius * net.radius * (1.0 + 1e-12);
  while (true) {
    double norm2 = 0.0;
    for (long long ix : index) {
      const double c = static_cast<double>(ix) * mesh;
      norm2 += c * c;
    }
    if (norm2 <= r2) {
      std::vector<double> p(net.dim);
      for (std::size_t d = 0; d < net.dim; ++d) p[d] = static_cast<double>(index[d]) * mesh;
      points.push_back(std::move(p));
      if (points.size() > net.cardinality_cap) {
        throw NetTooLargeError("net cardinality exceeds the configured cap");
      }
    }
    std::size_t d = 0;
    while (d < net.dim && index[d] == half_span) {
      index[d] = -half_span;
      ++d;
    }
    if (d == net.dim) break;
    ++index[d];
  }
  return points;
}

enum class LossKind { kAbs, kSq };

struct BallNetClass {
  BallNet net;
  LossKind loss = LossKind::kAbs;
};

struct FiniteExplicit {
  std::vector<LossMap> hypotheses;
};

using HypothesisClass = std::variant<FiniteExplicit, BallNetClass>;

inline std::vector<LossMap> materialize(const HypothesisClass& cls) {
  if (const auto* finite = std::get_if<FiniteExplicit>(&cls)) {
    if (finite->hypotheses.empty()) throw std::invalid_argument("empty hypothesis class");
    return finite->hypotheses;
  }
  const auto& ball = std::get<BallNetClass>(cls);
  std::vector<LossMap> maps;
  for (auto& p : build_net(ball.net)) {
    if (ball.loss == LossKind::kAbs) {
      maps.push_back(AbsLinear{std::move(p)});
    } else {
      maps.push_back(SqLinear{std::move(p)});
    }
  }
  return maps;
}

enum class ErmObjective { kEmp, kTrunc, kTmom };

struct ErmResult {
  std::size_t chosen_index = 0;
  std::optional<std::vector<double>> chosen_params;
  double threshold = 0.0;
  double objective_value = 0.0;
  std::vector<double> per_hypothesis_values;
};

/// CVaR-ERM over a finite class (or materialized net): per-hypothesis CVaR by
/// the selected estimator on the losses loss(h, z_i); least-index argmin. The
/// TMOM objective fixes one block permutation before the hypothesis loop and
/// reuses it for every (h, theta) pair. Hypotheses are evaluated by a worker
/// pool into per-index slots; the argmin reduction is sequential.
inline ErmResult erm_finite(std::span<const Record> data, const HypothesisClass& cls,
                            double alpha, ErmObjective objective, const RiskSpec& spec,
                            const MomConfig& mom, RngStream& stream, unsigned threads = 1) {
  if (data.empty()) throw std::invalid_argument("erm_finite needs data");
  const std::vector<LossMap> hypotheses = materialize(cls);

  BlockAssignment blocks;
  if (objective == ErmObjective::kTmom) {
    blocks = mom_block_scheme(data.size(), resolve_k(mom, data.size()).k_used, stream);
  }

  std::vector<CvarEstimate> estimates(hypotheses.size());
  parallel_for(hypotheses.size(), threads, [&](std::size_t hi) {
    std::vector<double> losses(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      losses[i] = loss_value(hypotheses[hi], data[i]);
      if (losses[i] < 0.0) throw std::invalid_argument("loss map produced a negative loss");
    }
    switch (objective) {
      case ErmObjective::kEmp:
        estimates[hi] = empirical_cvar(std::span<const double>(losses), alpha);
        break;
      case ErmObjective::kTrunc:
        estimates[hi] = truncated_cvar(std::span<const double>(losses), alpha, spec);
        break;
      case ErmObjective::kTmom:
        estimates[hi] =
            tmom_cvar_with_blocks(std::span<const double>(losses), alpha, spec, mom, blocks);
        break;
    }
  });

  ErmResult result;
  result.per_hypothesis_values.reserve(hypotheses.size());
  double best = std::numeric_limits<double>::infinity();
  double best_threshold = 0.0;
  std::size_t best_index = 0;
  for (std::size_t hi = 0; hi < hypotheses.size(); ++hi) {
    result.per_hypothesis_values.push_back(estimates[hi].value);
    if (estimates[hi].value < best) {
      best = estimates[hi].value;
      best_threshold = estimates[hi].threshold;
      best_index = hi;
    }
  }
  result.chosen_index = best_index;
  result.chosen_params = loss_params(hypotheses[best_index]);
  result.threshold = best_threshold;
  result.objective_value = best;
  return result;
}

/// Population excess risk R(chosen) - min_h R(h), given the per-hypothesis
/// population CVaRs computed from the distribution oracles.
inline double excess_risk(const ErmResult& result,
                          std::span<const double> population_cvars) {
  if (population_cvars.size() != result.per_hypothesis_values.size()) {
    throw std::invalid_argument("population CVaR table size mismatch");
  }
  const double best = *std::min_element(population_cvars.begin(), population_cvars.end());
  return population_cvars[result.chosen_index] - best;
}

}  // namespace tailrisk
