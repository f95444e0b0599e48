#pragma once

// Test-only oracles, kept independent of the implementation paths they check.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "tailrisk/numeric.hpp"
#include "tailrisk/rng.hpp"

namespace testsupport {

// Brute-force RU minimization over a dense theta grid (step 1e-4 of the data
// range) augmented with every sample knot.
inline double dense_grid_ru_min(std::span<const double> samples, double alpha) {
  std::vector<double> grid(samples.begin(), samples.end());
  grid.push_back(0.0);
  const auto [lo_it, hi_it] = std::minmax_element(samples.begin(), samples.end());
  const double lo = std::min(0.0, *lo_it);
  const double hi = *hi_it;
  const double step = std::max((hi - lo) * 1e-4, 1e-12);
  for (double t = lo; t <= hi; t += step) grid.push_back(t);
  double best = std::numeric_limits<double>::infinity();
  const double inv = 1.0 / (alpha * static_cast<double>(samples.size()));
  for (double theta : grid) {
    tailrisk::KahanSum hinge;
    for (double x : samples) {
      if (x > theta) hinge.add(x - theta);
    }
    best = std::min(best, theta + hinge.value() * inv);
  }
  return best;
}

inline double pareto_cvar(double scale, double shape, double alpha) {
  return scale * std::pow(alpha, -1.0 / shape) * shape / (shape - 1.0);
}

inline double pareto_var(double scale, double shape, double alpha) {
  return scale * std::pow(alpha, -1.0 / shape);
}

inline std::vector<double> pareto_draws(double scale, double shape, std::size_t n,
                                        tailrisk::RngStream& stream) {
  std::vector<double> out(n);
  for (auto& x : out) x = scale * std::pow(stream.next_open_unit(), -1.0 / shape);
  return out;
}

}  // namespace testsupport
