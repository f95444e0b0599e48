#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "tailrisk/distributions.hpp"
#include "tailrisk/errors.hpp"
#include "tailrisk/numeric.hpp"
#include "tailrisk/parallel.hpp"
#include "tailrisk/risk_core.hpp"
#include "tailrisk/rng.hpp"

namespace tailrisk {

// ---------------------------------------------------------------------------
// Bahadur-Kiefer decomposition
// ---------------------------------------------------------------------------

/// Per-hypothesis MC means of the decomposition
///   emp - pop = main + correction + remainder,
/// main = (1/alpha) (P_n - P)[(X - theta*)_+],
/// correction = (1/alpha) (theta_hat - theta*) (alpha - P(X > theta*)).
struct BkRow {
  double scale = 1.0;
  double emp_cvar = 0.0;
  double pop_cvar = 0.0;
  double main_term = 0.0;
  double correction_term = 0.0;
  double remainder = 0.0;
  double abs_main = 0.0;
  double abs_correction = 0.0;
  double abs_remainder = 0.0;
};

struct BkReport {
  std::vector<BkRow> rows;
  double sup_remainder = 0.0;   // MC means of sup over hypotheses of each |term|
  double sup_main = 0.0;
  double sup_correction = 0.0;
  double eps_n_realized = 0.0;  // MC mean of sup_theta |P_n(X>theta) - P(X>theta)|
  double eps_n_envelope = 0.0;  // sqrt((log(e n) + log(2/delta)) / n), delta = 0.05
  double kappa = 1.0;
  double c_minus = 0.0;
  double c_plus = 0.0;
  double delta_n = 0.0;  // (2 eps_realized / c_-)^{1/kappa}
  std::size_t n = 0;
  std::size_t reps = 0;
};

namespace detail {

struct MarginFit {
  double c_minus;
  double c_plus;
};

// Two-sided margin constants fitted from the analytic tail around theta*.
inline MarginFit fit_margin_constants(const DistributionModel& model, double alpha,
                                      double theta_star, double kappa) {
  const double u0 = std::max(theta_star, 1.0) / 8.0;
  double c_minus = std::numeric_limits<double>::infinity();
  double c_plus = 0.0;
  for (int i = 1; i <= 16; ++i) {
    const double u = u0 * static_cast<double>(i) / 16.0;
    const double uk = std::pow(u, kappa);
    const double left = (model.survival(theta_star - u) - alpha) / uk;
    const double right = (alpha - model.survival(theta_star + u)) / uk;
    c_minus = std::min({c_minus, left, right});
    c_plus = std::max({c_plus, left, right});
  }
  return {std::max(c_minus, 1e-12), c_plus};
}

}  // namespace detail

/// Monte-Carlo Bahadur-Kiefer decomposition over the positive scaling family
/// {c X : c in scales}. Scaling keeps every population oracle closed form:
/// theta*(cX) = c theta*, hinge_{cX}(c t) = c hinge(t), survival unchanged.
inline BkReport bk_decompose(const DistributionModel& model, double alpha,
                             std::span<const double> scales, std::size_t n,
                             std::size_t reps, RngStream stream, unsigned threads = 0) {
  if (scales.empty()) throw std::invalid_argument("bk_decompose needs a scale grid");
  const auto [theta_star, pop_cvar] = model.population_var_cvar(alpha);
  const double surv_at_star = model.survival(theta_star);
  const double hinge_at_star = model.hinge_mean(theta_star);
  const std::uint64_t seed = stream.key();

  // fixed probability grid for the realized tail deviation
  constexpr std::size_t kTailGrid = 512;
  std::vector<double> grid_theta(kTailGrid);
  std::vector<double> grid_surv(kTailGrid);
  for (std::size_t g = 0; g < kTailGrid; ++g) {
    const double q = (static_cast<double>(g) + 0.5) / kTailGrid;
    grid_theta[g] = model.quantile(q);
    grid_surv[g] = model.survival(grid_theta[g]);
  }

  const std::size_t h_count = scales.size();
  struct RepOut {
    std::vector<double> emp, main, corr, rem;
    double sup_rem = 0.0;
    double sup_main = 0.0;
    double sup_corr = 0.0;
    double eps_real = 0.0;
  };
  std::vector<RepOut> outs(reps);

  parallel_for(reps, threads, [&](std::size_t rep) {
    RngStream sub = RngStream::substream(seed, stage::kBk, 0, rep);
    const SampleSet base = sample(model, n, sub);
    std::vector<double> sorted = base.values;
    std::sort(sorted.begin(), sorted.end());

    RepOut& out = outs[rep];
    out.emp.resize(h_count);
    out.main.resize(h_count);
    out.corr.resize(h_count);
    out.rem.resize(h_count);

    // realized eps_n: scale-invariant, so the base sample suffices
    double eps = 0.0;
    for (std::size_t g = 0; g < kTailGrid; ++g) {
      const auto above = sorted.end() - std::upper_bound(sorted.begin(), sorted.end(),
                                                         grid_theta[g]);
      const double emp_surv = static_cast<double>(above) / static_cast<double>(n);
      eps = std::max(eps, std::abs(emp_surv - grid_surv[g]));
    }
    out.eps_real = eps;

    std::vector<double> losses(n);
    for (std::size_t hi = 0; hi < h_count; ++hi) {
      const double c = scales[hi];
      for (std::size_t i = 0; i < n; ++i) losses[i] = c * base.values[i];
      const CvarEstimate est = empirical_cvar(std::span<const double>(losses), alpha);
      const double theta_c = c * theta_star;
      KahanSum hinge;
      for (double x : losses) {
        if (x > theta_c) hinge.add(x - theta_c);
      }
      const double emp_hinge = hinge.value() / static_cast<double>(n);
      const double main = (emp_hinge - c * hinge_at_star) / alpha;
      const double corr = (est.threshold - theta_c) * (alpha - surv_at_star) / alpha;
      const double rem = est.value - c * pop_cvar - main - corr;
      out.emp[hi] = est.value;
      out.main[hi] = main;
      out.corr[hi] = corr;
      out.rem[hi] = rem;
      out.sup_rem = std::max(out.sup_rem, std::abs(rem));
      out.sup_main = std::max(out.sup_main, std::abs(main));
      out.sup_corr = std::max(out.sup_corr, std::abs(corr));
    }
  });

  BkReport report;
  report.n = n;
  report.reps = reps;
  report.kappa = 1.0;
  const auto fit = detail::fit_margin_constants(model, alpha, theta_star, report.kappa);
  report.c_minus = fit.c_minus;
  report.c_plus = fit.c_plus;
  report.eps_n_envelope =
      std::sqrt((std::log(DistributionModel::kE * static_cast<double>(n)) +
                 std::log(2.0 / 0.05)) /
                static_cast<double>(n));

  report.rows.resize(h_count);
  KahanSum sup_rem_sum;
  KahanSum sup_main_sum;
  KahanSum sup_corr_sum;
  KahanSum eps_sum;
  std::vector<KahanSum> emp(h_count), main(h_count), corr(h_count), rem(h_count);
  std::vector<KahanSum> amain(h_count), acorr(h_count), arem(h_count);
  for (std::size_t rep = 0; rep < reps; ++rep) {
    sup_rem_sum.add(outs[rep].sup_rem);
    sup_main_sum.add(outs[rep].sup_main);
    sup_corr_sum.add(outs[rep].sup_corr);
    eps_sum.add(outs[rep].eps_real);
    for (std::size_t hi = 0; hi < h_count; ++hi) {
      emp[hi].add(outs[rep].emp[hi]);
      main[hi].add(outs[rep].main[hi]);
      corr[hi].add(outs[rep].corr[hi]);
      rem[hi].add(outs[rep].rem[hi]);
      amain[hi].add(std::abs(outs[rep].main[hi]));
      acorr[hi].add(std::abs(outs[rep].corr[hi]));
      arem[hi].add(std::abs(outs[rep].rem[hi]));
    }
  }
  const double inv_reps = 1.0 / static_cast<double>(reps);
  for (std::size_t hi = 0; hi < h_count; ++hi) {
    BkRow& row = report.rows[hi];
    row.scale = scales[hi];
    row.emp_cvar = emp[hi].value() * inv_reps;
    row.pop_cvar = scales[hi] * pop_cvar;
    row.main_term = main[hi].value() * inv_reps;
    row.correction_term = corr[hi].value() * inv_reps;
    row.remainder = rem[hi].value() * inv_reps;
    row.abs_main = amain[hi].value() * inv_reps;
    row.abs_correction = acorr[hi].value() * inv_reps;
    row.abs_remainder = arem[hi].value() * inv_reps;
  }
  report.sup_remainder = sup_rem_sum.value() * inv_reps;
  report.sup_main = sup_main_sum.value() * inv_reps;
  report.sup_correction = sup_corr_sum.value() * inv_reps;
  report.eps_n_realized = eps_sum.value() * inv_reps;
  report.delta_n = std::pow(2.0 * report.eps_n_realized / report.c_minus, 1.0 / report.kappa);
  return report;
}

// ---------------------------------------------------------------------------
// Threshold deviation
// ---------------------------------------------------------------------------

struct ThresholdDeviationReport {
  std::vector<std::size_t> n_grid;
  std::vector<double> mean_abs_dev;
  std::vector<double> std_abs_dev;
  double slope = 0.0;
  double halfwidth = 0.0;
};

/// MC mean of |theta_hat_n - theta*| per n, with the fitted log-log slope.
inline ThresholdDeviationReport threshold_deviation(const DistributionModel& model,
                                                    double alpha,
                                                    std::span<const std::size_t> n_grid,
                                                    std::size_t reps, RngStream stream,
                                                    unsigned threads = 0) {
  const double theta_star = model.population_var_cvar(alpha).first;
  const std::uint64_t seed = stream.key();
  ThresholdDeviationReport report;
  report.n_grid.assign(n_grid.begin(), n_grid.end());
  report.mean_abs_dev.resize(n_grid.size());
  report.std_abs_dev.resize(n_grid.size());
  for (std::size_t gi = 0; gi < n_grid.size(); ++gi) {
    const std::size_t n = n_grid[gi];
    std::vector<double> devs(reps);
    parallel_for(reps, threads, [&](std::size_t rep) {
      RngStream sub = RngStream::substream(seed, stage::kThresholdDev, gi, rep);
      const SampleSet s = sample(model, n, sub);
      devs[rep] = std::abs(empirical_var_threshold(s.values, alpha) - theta_star);
    });
    report.mean_abs_dev[gi] = mean_of(devs);
    report.std_abs_dev[gi] = sample_std(devs);
  }
  std::vector<double> lx, ly;
  for (std::size_t gi = 0; gi < n_grid.size(); ++gi) {
    if (report.mean_abs_dev[gi] > 0.0) {
      lx.push_back(std::log(static_cast<double>(n_grid[gi])));
      ly.push_back(std::log(report.mean_abs_dev[gi]));
    }
  }
  if (lx.size() >= 3) {
    const OlsFit fit = ols_fit(lx, ly);
    report.slope = fit.slope;
    report.halfwidth = 1.96 * fit.slope_se;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Quantile margin
// ---------------------------------------------------------------------------

/// Generalized density-at-quantile: min over the r grid of
/// P(0 < |X - theta*| <= r) / r. The atom exactly at theta* is excluded, so a
/// law whose threshold sits on an isolated atom (the flat-plateau family)
/// reports margin 0, matching the instability it exhibits.
inline double quantile_margin(const DistributionModel& model, double alpha,
                              std::span<const double> r_grid) {
  const double theta_star = model.population_var_cvar(alpha).first;
  double margin = std::numeric_limits<double>::infinity();
  for (double r : r_grid) {
    if (!(r > 0.0)) throw std::invalid_argument("r grid must be positive");
    const double lo = theta_star - r;
    const double mass = model.survival(lo) + model.point_mass(lo) -
                        model.survival(theta_star + r) - model.point_mass(theta_star);
    margin = std::min(margin, mass / r);
  }
  return std::max(margin, 0.0);
}

// ---------------------------------------------------------------------------
// Quadratic toy: stationarity system, influence function, decision radius
// ---------------------------------------------------------------------------

/// Scalar data law: finite mixture of Gaussians. Every expectation the RU
/// stationarity map needs is closed form.
struct GaussianMixtureLaw {
  struct Component {
    double mean = 0.0;
    double sd = 1.0;
    double weight = 1.0;
  };
  std::vector<Component> components;

  double cdf(double x) const {
    double s = 0.0;
    for (const auto& c : components) s += c.weight * normal_cdf((x - c.mean) / c.sd);
    return s;
  }
  double pdf(double x) const {
    double s = 0.0;
    for (const auto& c : components) s += c.weight * normal_pdf((x - c.mean) / c.sd) / c.sd;
    return s;
  }
  // E[z 1{z > a}]
  double first_moment_above(double a) const {
    double s = 0.0;
    for (const auto& c : components) {
      const double t = (a - c.mean) / c.sd;
      s += c.weight * (c.mean * (1.0 - normal_cdf(t)) + c.sd * normal_pdf(t));
    }
    return s;
  }
  // E[z 1{z < b}]
  double first_moment_below(double b) const {
    double s = 0.0;
    for (const auto& c : components) {
      const double t = (b - c.mean) / c.sd;
      s += c.weight * (c.mean * normal_cdf(t) - c.sd * normal_pdf(t));
    }
    return s;
  }
  double mean() const {
    double s = 0.0;
    for (const auto& c : components) s += c.weight * c.mean;
    return s;
  }
};

/// 1-d quadratic CVaR toy with loss (z - h)^2; the RU stationarity map
///   H(h, theta; P) = ( (1/alpha) E[d_h loss 1{loss > theta}],
///                      1 - (1/alpha) P(loss > theta) )
/// is closed form under the Gaussian mixture, and the gross-error path
/// (1 - eps) P + eps delta_z stays closed form.
struct QuadraticCvarToy {
  GaussianMixtureLaw data;
  double alpha = 0.1;

  double tail_prob(double h, double theta) const {
    if (theta <= 0.0) return 1.0;
    const double s = std::sqrt(theta);
    return (1.0 - data.cdf(h + s)) + data.cdf(h - s);
  }
  double grad_expectation(double h, double theta) const {
    // E[-2 (z-h) 1{|z-h| > sqrt(theta)}]
    const double s = theta > 0.0 ? std::sqrt(theta) : 0.0;
    const double above = data.first_moment_above(h + s);
    const double below = data.first_moment_below(h - s);
    const double tail = tail_prob(h, theta);
    return -2.0 * (above + below - h * tail);
  }
  std::array<double, 2> stationarity(double h, double theta) const {
    return {grad_expectation(h, theta) / alpha, 1.0 - tail_prob(h, theta) / alpha};
  }
  /// g(z; h, theta): the stationarity map of the point mass at z.
  std::array<double, 2> point_score(double z, double h, double theta) const {
    const double loss = (z - h) * (z - h);
    const double ind = loss > theta ? 1.0 : 0.0;
    return {-2.0 * (z - h) * ind / alpha, 1.0 - ind / alpha};
  }
  std::array<double, 2> stationarity_contaminated(double h, double theta, double z,
                                                  double eps) const {
    const auto clean = stationarity(h, theta);
    const auto point = point_score(z, h, theta);
    return {(1.0 - eps) * clean[0] + eps * point[0],
            (1.0 - eps) * clean[1] + eps * point[1]};
  }
  /// Density of the loss (z-h)^2 at level theta > 0.
  double loss_density(double h, double theta) const {
    const double s = std::sqrt(theta);
    return (data.pdf(h + s) + data.pdf(h - s)) / (2.0 * s);
  }
  /// Quantile margin of the loss law at its alpha threshold: 2 f(theta*).
  double margin(double h, double theta) const { return 2.0 * loss_density(h, theta); }
};

/// Damped Newton on the contaminated stationarity system, warm started; the
/// z-indicator is locally constant so finite-difference Jacobians see only
/// the smooth mixture part.
inline std::array<double, 2> stationarity_solve(const QuadraticCvarToy& toy, double z,
                                                double eps, double h0, double theta0,
                                                double residual_tol = 1e-10,
                                                int max_iters = 200) {
  double h = h0;
  double theta = theta0;
  const auto residual = [&](double hh, double tt) {
    return toy.stationarity_contaminated(hh, tt, z, eps);
  };
  const auto norm = [](const std::array<double, 2>& v) {
    return std::max(std::abs(v[0]), std::abs(v[1]));
  };
  auto res = residual(h, theta);
  for (int it = 0; it < max_iters; ++it) {
    if (norm(res) <= residual_tol) return {h, theta};
    Matrix jac(2, 2);
    const double sh = 1e-6 * (1.0 + std::abs(h));
    const double st = 1e-6 * (1.0 + std::abs(theta));
    const auto rhp = residual(h + sh, theta);
    const auto rhm = residual(h - sh, theta);
    const auto rtp = residual(h, theta + st);
    const auto rtm = residual(h, theta - st);
    jac(0, 0) = (rhp[0] - rhm[0]) / (2.0 * sh);
    jac(1, 0) = (rhp[1] - rhm[1]) / (2.0 * sh);
    jac(0, 1) = (rtp[0] - rtm[0]) / (2.0 * st);
    jac(1, 1) = (rtp[1] - rtm[1]) / (2.0 * st);
    std::vector<double> step;
    try {
      step = jac.solve({res[0], res[1]});
    } catch (const SingularJacobianError&) {
      throw SingularJacobianError("singular Jacobian in stationarity solve");
    }
    double scale = 1.0;
    bool accepted = false;
    for (int halving = 0; halving < 60; ++halving) {
      const double hn = h - scale * step[0];
      const double tn = theta - scale * step[1];
      if (tn > 0.0) {
        const auto rn = residual(hn, tn);
        if (norm(rn) < norm(res)) {
          h = hn;
          theta = tn;
          res = rn;
          accepted = true;
          break;
        }
      }
      scale *= 0.5;
    }
    if (!accepted) {
      throw NoConvergenceError("stationarity solve stalled");
    }
  }
  if (norm(res) <= residual_tol) return {h, theta};
  throw NoConvergenceError("stationarity solve did not reach tolerance");
}

/// Clean population stationary point of the toy (eps = 0), from a heuristic
/// start: mixture mean and the tail-matched theta.
inline std::array<double, 2> solve_clean_optimum(const QuadraticCvarToy& toy) {
  const double h0 = toy.data.mean();
  double lo = 0.0;
  double hi = 1.0;
  while (toy.tail_prob(h0, hi) > toy.alpha) hi *= 2.0;
  const double theta0 = bisect_nonincreasing(
      [&](double t) { return toy.tail_prob(h0, t) - toy.alpha; }, lo, hi, 1e-12);
  return stationarity_solve(toy, 0.0, 0.0, h0, std::max(theta0, 1e-8));
}

struct FdPathRow {
  double eps = 0.0;
  double fd_h = 0.0;
  double fd_theta = 0.0;
  double error = 0.0;  // || fd - analytic IF ||_2
};

struct InfluenceReport {
  Matrix jacobian;
  double condition_number = 0.0;
  std::vector<double> g_at_z;
  std::vector<double> g_mean;
  std::vector<double> influence;  // -J^{-1} (g(z) - E g)
  std::vector<FdPathRow> fd_path;
  double margin = 0.0;
  double radius_lower = 0.0;
  double h_star = 0.0;
  double theta_star = 0.0;
  QuadraticCvarToy toy;
};

/// Influence function of the CVaR decision at contamination point z: analytic
/// -J^{-1}(g(z) - E g) against path finite differences (sol(eps)-sol(0))/eps.
inline InfluenceReport influence_check(const QuadraticCvarToy& toy, double z,
                                       std::span<const double> eps_grid) {
  InfluenceReport report;
  report.toy = toy;
  const auto clean = solve_clean_optimum(toy);
  report.h_star = clean[0];
  report.theta_star = clean[1];

  Matrix jac(2, 2);
  const double sh = 1e-5 * (1.0 + std::abs(clean[0]));
  const double st = 1e-5 * (1.0 + std::abs(clean[1]));
  const auto hp = toy.stationarity(clean[0] + sh, clean[1]);
  const auto hm = toy.stationarity(clean[0] - sh, clean[1]);
  const auto tp = toy.stationarity(clean[0], clean[1] + st);
  const auto tm = toy.stationarity(clean[0], clean[1] - st);
  jac(0, 0) = (hp[0] - hm[0]) / (2.0 * sh);
  jac(1, 0) = (hp[1] - hm[1]) / (2.0 * sh);
  jac(0, 1) = (tp[0] - tm[0]) / (2.0 * st);
  jac(1, 1) = (tp[1] - tm[1]) / (2.0 * st);
  report.jacobian = jac;

  const Matrix inv = jac.inverse();
  report.condition_number = jac.norm2() * inv.norm2();
  if (report.condition_number > 1e12) {
    throw SingularJacobianError("stationarity Jacobian condition number above 1e12");
  }

  const auto g_mean_arr = toy.stationarity(clean[0], clean[1]);
  const auto g_z = toy.point_score(z, clean[0], clean[1]);
  report.g_mean = {g_mean_arr[0], g_mean_arr[1]};
  report.g_at_z = {g_z[0], g_z[1]};
  const std::vector<double> diff = {g_z[0] - g_mean_arr[0], g_z[1] - g_mean_arr[1]};
  std::vector<double> jinv_diff = inv.apply(diff);
  report.influence = {-jinv_diff[0], -jinv_diff[1]};

  for (double eps : eps_grid) {
    const auto sol = stationarity_solve(toy, z, eps, clean[0], clean[1]);
    FdPathRow row;
    row.eps = eps;
    row.fd_h = (sol[0] - clean[0]) / eps;
    row.fd_theta = (sol[1] - clean[1]) / eps;
    const double dh = row.fd_h - report.influence[0];
    const double dt = row.fd_theta - report.influence[1];
    row.error = std::sqrt(dh * dh + dt * dt);
    report.fd_path.push_back(row);
  }
  report.margin = toy.margin(clean[0], clean[1]);
  return report;
}

/// Lower bound on the local decision-robustness radius:
///   eps_rob(r) >= r / (C ||J^{-1}||) * (sup_z ||g(z) - E g||)^{-1},
/// with the sup taken over the supplied z grid only. Updates
/// report.radius_lower and returns the bound.
inline double robustness_radius(InfluenceReport& report, double r,
                                std::span<const double> z_grid, double c_constant = 1.0) {
  if (!(r > 0.0)) throw std::invalid_argument("radius tolerance must be positive");
  const Matrix inv = report.jacobian.inverse();
  double sup_norm = 0.0;
  for (double z : z_grid) {
    const auto g = report.toy.point_score(z, report.h_star, report.theta_star);
    const double d0 = g[0] - report.g_mean[0];
    const double d1 = g[1] - report.g_mean[1];
    sup_norm = std::max(sup_norm, std::sqrt(d0 * d0 + d1 * d1));
  }
  if (sup_norm == 0.0) return std::numeric_limits<double>::infinity();
  const double bound = r / (c_constant * inv.norm2()) / sup_norm;
  report.radius_lower = bound;
  return bound;
}

// ---------------------------------------------------------------------------
// Tail-scarcity flip experiment
// ---------------------------------------------------------------------------

/// Parameters of the tail-scarcity construction: data law
/// Z = 0 w.p. 1 - alpha + eps_mix, else Y with survival y^{-p} (log y)^{-2}.
struct FlipConfig {
  double p = 1.5;
  double alpha = 0.3;
  double eps_mix = 0.05;
  double gamma = 0.5;
  double c_frac = 0.5;
  std::vector<std::size_t> n_grid;
  std::size_t replications = 200000;

  void validate() const {
    if (!(p > 1.0 && p < 2.0)) throw std::invalid_argument("p must be in (1,2)");
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0,1)");
    if (!(eps_mix > 0.0 && eps_mix < alpha / 4.0)) {
      throw std::invalid_argument("eps_mix must be in (0, alpha/4)");
    }
    if (!(c_frac > alpha * gamma && c_frac < 1.0)) {
      throw std::invalid_argument("requires alpha*gamma < C < 1");
    }
    if (n_grid.empty() || replications < 1) {
      throw std::invalid_argument("need a nonempty n grid and replications >= 1");
    }
  }
};

struct FlipRow {
  std::size_t n = 0;
  std::size_t replications = 0;
  std::size_t witnesses = 0;  // constructive-witness events
  std::size_t flips = 0;      // witnesses whose argmin flips B -> A after zeroing
  double frequency = 0.0;
  double population_gap = 0.0;  // ((alpha-eps)/alpha)(gamma - C n P(Y in (n,2n]))
};

struct FlipReport {
  std::vector<FlipRow> rows;
  double slope = 0.0;      // slope of log(freq (log n)^2) vs log n
  double halfwidth = 0.0;
  double target = 0.0;     // 1 - p
  std::size_t fit_points = 0;
};

/// Constructive one-point flip frequency. Per replication the witness event is
///   { exactly one Z_i in (n, 2n] } and { max Z_i <= 2n }
///   and { N_0 >= (1-alpha) n + 1 } and { N_+ >= 2 };
/// on it, both argmins reduce to the scaled-mean identity, so the flip is
/// certified from streamed counts: argmin(D) = B iff N_+ gamma - C n < 0, and
/// zeroing the unique bin point gives argmin(D') = A iff N_+ - 1 >= 1.
inline FlipReport flip_experiment(const FlipConfig& cfg, RngStream stream,
                                  unsigned threads = 0) {
  cfg.validate();
  const DistributionModel tail_law = DistributionModel::log_corrected_tail(cfg.p);
  const double zero_mass = 1.0 - cfg.alpha + cfg.eps_mix;
  const std::uint64_t seed = stream.key();

  FlipReport report;
  report.target = 1.0 - cfg.p;
  report.rows.resize(cfg.n_grid.size());

  for (std::size_t gi = 0; gi < cfg.n_grid.size(); ++gi) {
    const std::size_t n = cfg.n_grid[gi];
    const double dn = static_cast<double>(n);
    const double bin_prob = tail_law.survival(dn) - tail_law.survival(2.0 * dn);

    const std::size_t chunk = 1024;
    const std::size_t chunks = (cfg.replications + chunk - 1) / chunk;
    std::vector<std::size_t> witness_per_chunk(chunks, 0);
    std::vector<std::size_t> flips_per_chunk(chunks, 0);
    parallel_for(chunks, threads, [&](std::size_t ci) {
      std::size_t witnesses = 0;
      std::size_t flips = 0;
      const std::size_t rep_lo = ci * chunk;
      const std::size_t rep_hi = std::min(rep_lo + chunk, cfg.replications);
      for (std::size_t rep = rep_lo; rep < rep_hi; ++rep) {
        RngStream sub = RngStream::substream(seed, stage::kFlip, gi, rep);
        std::size_t n_zero = 0;
        std::size_t n_pos = 0;
        std::size_t n_bin = 0;
        double max_value = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double u = sub.next_unit();
          if (u < zero_mass) {
            ++n_zero;
            continue;
          }
          const double y = tail_law.draw_one(sub);
          ++n_pos;
          max_value = std::max(max_value, y);
          if (y > dn && y <= 2.0 * dn) ++n_bin;
        }
        const bool witness = n_bin == 1 && max_value <= 2.0 * dn &&
                             static_cast<double>(n_zero) >= (1.0 - cfg.alpha) * dn + 1.0 - 1e-9 &&
                             n_pos >= 2;
        if (!witness) continue;
        ++witnesses;
        const double gap_d = cfg.gamma * static_cast<double>(n_pos) - cfg.c_frac * dn;
        const double gap_dprime = cfg.gamma * static_cast<double>(n_pos - 1);
        if (gap_d < 0.0 && gap_dprime > 0.0) ++flips;
      }
      witness_per_chunk[ci] = witnesses;
      flips_per_chunk[ci] = flips;
    });

    FlipRow& row = report.rows[gi];
    row.n = n;
    row.replications = cfg.replications;
    for (std::size_t ci = 0; ci < chunks; ++ci) {
      row.witnesses += witness_per_chunk[ci];
      row.flips += flips_per_chunk[ci];
    }
    row.frequency = static_cast<double>(row.flips) / static_cast<double>(cfg.replications);
    row.population_gap = (cfg.alpha - cfg.eps_mix) / cfg.alpha *
                         (cfg.gamma - cfg.c_frac * dn * bin_prob);
  }

  std::vector<double> lx, ly;
  for (const FlipRow& row : report.rows) {
    if (row.flips == 0) continue;  // zero-frequency points are flagged, never logged
    const double ln = std::log(static_cast<double>(row.n));
    lx.push_back(ln);
    ly.push_back(std::log(row.frequency * ln * ln));
  }
  report.fit_points = lx.size();
  if (lx.size() >= 3) {
    const OlsFit fit = ols_fit(lx, ly);
    report.slope = fit.slope;
    report.halfwidth = 1.96 * fit.slope_se;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Threshold stability under Levy-Prokhorov perturbations
// ---------------------------------------------------------------------------

struct LpStabilityRow {
  double delta = 0.0;
  double shift = 0.0;
  double bound = 0.0;  // C delta / m_0 with C fitted on the smallest delta
};

struct LpStabilityReport {
  std::vector<LpStabilityRow> rows;
  double fitted_c = 0.0;
  double margin = 0.0;
  double plateau_width = 0.0;
  double plateau_jump = 0.0;  // observed O(1) jump of the flat-margin converse
};

/// Location-shift perturbations Q_delta = law(X + delta) (d_LP <= delta,
/// analytic threshold shift), plus the converse flat-plateau construction
/// where any delta > 0 moves the threshold by the full plateau width.
inline LpStabilityReport lp_threshold_stability(const DistributionModel& model, double alpha,
                                                std::span<const double> delta_grid) {
  if (delta_grid.empty()) throw std::invalid_argument("need a delta grid");
  LpStabilityReport report;
  const std::array<double, 3> r_grid = {1e-2, 1e-3, 1e-4};
  report.margin = quantile_margin(model, alpha, r_grid);

  std::vector<double> deltas(delta_grid.begin(), delta_grid.end());
  std::sort(deltas.begin(), deltas.end());
  const double theta_p = model.population_var_cvar(alpha).first;
  double fitted_c = 0.0;
  for (double d : deltas) {
    LpStabilityRow row;
    row.delta = d;
    // theta*(law of X + delta) = theta*(X) + delta
    row.shift = d == 0.0 ? 0.0 : std::abs((theta_p + d) - theta_p);
    if (fitted_c == 0.0 && d > 0.0) {
      fitted_c = row.shift * report.margin / d;
    }
    report.rows.push_back(row);
  }
  for (auto& row : report.rows) {
    row.bound = report.margin > 0.0 ? fitted_c * row.delta / report.margin : 0.0;
  }
  report.fitted_c = fitted_c;

  // flat plateau at level alpha: atoms {0: 1-alpha, w: alpha}; tilting any
  // delta of mass upward moves the minimal threshold across the whole plateau
  const double width = 2.0;
  report.plateau_width = width;
  const double probe_delta = std::max(deltas.front() > 0.0 ? deltas.front() : 1e-6, 1e-12);
  const auto plateau = DistributionModel::discrete_atoms({{0.0, 1.0 - alpha}, {width, alpha}});
  const auto tilted = DistributionModel::discrete_atoms(
      {{0.0, 1.0 - alpha - probe_delta}, {width, alpha + probe_delta}});
  report.plateau_jump = std::abs(tilted.population_var_cvar(alpha).first -
                                 plateau.population_var_cvar(alpha).first);
  return report;
}

}  // namespace tailrisk
