#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tailrisk/errors.hpp"
#include "tailrisk/numeric.hpp"
#include "tailrisk/rng.hpp"

namespace tailrisk {

/// The (alpha, lambda, M) triple every bound in the library is parameterized by:
/// tail level alpha in (0,1), moment exponent lambda in (0,1], and a bound M on
/// E[loss^(1+lambda)].
struct RiskSpec {
  double alpha = 0.1;
  double lambda = 1.0;
  double moment_bound = 1.0;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0,1)");
    if (!(lambda > 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda must be in (0,1]");
    if (!(moment_bound > 0.0)) throw std::invalid_argument("moment_bound must be positive");
  }

  /// Population bound on any RU minimizer: R = M^{1/(1+lambda)} / alpha.
  double threshold_bound() const {
    return std::pow(moment_bound, 1.0 / (1.0 + lambda)) / alpha;
  }
};

/// Realized losses plus the stream tag they were drawn from.
struct SampleSet {
  std::vector<double> values;
  std::uint64_t seed_tag = 0;
};

/// Nonnegative loss-generating law with exact analytic oracles (tail, hinge
/// mean, quantile, population CVaR), so Monte-Carlo estimates can be checked
/// against true population quantities.
///
/// Supported families:
///   Pareto{scale x_m > 0, shape a > 1}
///   LogCorrectedTail{p in (1,2)}: survival y^{-p} (log y)^{-2} for y >= e.
///     The law below e is not pinned down by that tail; the deficit mass
///     1 - e^{-p} sits as an atom at y = e.
///   DiscreteAtoms{(value >= 0, prob)...}
///   ZeroInflatedMix{zero_mass in (0,1), body}
///   MixingChain{marginal, rho in (-1,1)}: strictly stationary Gaussian-copula
///     AR(1) chain with the declared marginal.
class DistributionModel {
 public:
  enum class Kind { kPareto, kLogTail, kAtoms, kZeroMix, kChain };

  static DistributionModel pareto(double scale, double shape) {
    if (!(scale > 0.0) || !(shape > 1.0)) {
      throw std::invalid_argument("pareto requires scale > 0 and shape > 1");
    }
    DistributionModel m(Kind::kPareto);
    m.scale_ = scale;
    m.shape_ = shape;
    return m;
  }

  static DistributionModel log_corrected_tail(double p) {
    if (!(p > 1.0 && p < 2.0)) throw std::invalid_argument("log tail requires p in (1,2)");
    DistributionModel m(Kind::kLogTail);
    m.p_ = p;
    return m;
  }

  static DistributionModel discrete_atoms(std::vector<std::pair<double, double>> atoms) {
    DistributionModel m(Kind::kAtoms);
    double total = 0.0;
    for (const auto& [v, pr] : atoms) {
      if (v < 0.0) throw std::invalid_argument("atom values must be nonnegative");
      if (pr < 0.0) throw std::invalid_argument("atom probabilities must be nonnegative");
      total += pr;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw std::invalid_argument("atom probabilities must sum to 1 within 1e-12");
    }
    std::sort(atoms.begin(), atoms.end());
    // merge duplicates so the support is strictly increasing
    std::vector<std::pair<double, double>> merged;
    for (const auto& a : atoms) {
      if (!merged.empty() && merged.back().first == a.first) {
        merged.back().second += a.second;
      } else {
        merged.push_back(a);
      }
    }
    m.atoms_ = std::move(merged);
    return m;
  }

  static DistributionModel zero_inflated(double zero_mass, DistributionModel body) {
    if (!(zero_mass > 0.0 && zero_mass < 1.0)) {
      throw std::invalid_argument("zero_mass must be in (0,1)");
    }
    if (body.kind() == Kind::kChain) {
      throw std::invalid_argument("zero_inflated body cannot be a chain");
    }
    DistributionModel m(Kind::kZeroMix);
    m.zero_mass_ = zero_mass;
    m.body_ = std::make_shared<const DistributionModel>(std::move(body));
    return m;
  }

  static DistributionModel mixing_chain(DistributionModel marginal, double rho) {
    if (!(rho > -1.0 && rho < 1.0)) throw std::invalid_argument("rho must be in (-1,1)");
    if (marginal.kind() == Kind::kChain) {
      throw std::invalid_argument("chain marginal cannot itself be a chain");
    }
    DistributionModel m(Kind::kChain);
    m.rho_ = rho;
    m.body_ = std::make_shared<const DistributionModel>(std::move(marginal));
    return m;
  }

  Kind kind() const { return kind_; }
  double pareto_scale() const { return scale_; }
  double pareto_shape() const { return shape_; }
  double log_tail_p() const { return p_; }
  double zero_mass() const { return zero_mass_; }
  double rho() const { return rho_; }
  const std::vector<std::pair<double, double>>& atoms() const { return atoms_; }
  const DistributionModel& body() const { return *body_; }

  /// Strict tail probability P(X > theta); right-continuous, nonincreasing.
  double survival(double theta) const {
    switch (kind_) {
      case Kind::kPareto:
        return theta < scale_ ? 1.0 : std::pow(scale_ / theta, shape_);
      case Kind::kLogTail: {
        if (theta < kE) return 1.0;
        const double t = std::log(theta);
        return std::exp(-p_ * t) / (t * t);
      }
      case Kind::kAtoms: {
        double s = 0.0;
        for (auto it = atoms_.rbegin(); it != atoms_.rend() && it->first > theta; ++it) {
          s += it->second;
        }
        return s;
      }
      case Kind::kZeroMix:
        return theta < 0.0 ? 1.0 : (1.0 - zero_mass_) * body_->survival(theta);
      case Kind::kChain:
        return body_->survival(theta);
    }
    return 0.0;
  }

  /// Mass of the atom at x (0 for continuous parts).
  double point_mass(double x) const {
    switch (kind_) {
      case Kind::kPareto:
        return 0.0;
      case Kind::kLogTail:
        return x == kE ? 1.0 - std::exp(-p_) : 0.0;
      case Kind::kAtoms: {
        for (const auto& [v, pr] : atoms_) {
          if (v == x) return pr;
          if (v > x) break;
        }
        return 0.0;
      }
      case Kind::kZeroMix:
        return (x == 0.0 ? zero_mass_ : 0.0) + (1.0 - zero_mass_) * body_->point_mass(x);
      case Kind::kChain:
        return body_->point_mass(x);
    }
    return 0.0;
  }

  /// E[X]; throws NonIntegrableError when the mean diverges.
  double mean() const { return hinge_mean(0.0); }

  /// E[(X - theta)_+] = integral of the survival from theta; exact closed form
  /// where available, adaptive quadrature for the log-corrected tail.
  double hinge_mean(double theta) const {
    switch (kind_) {
      case Kind::kPareto: {
        if (!(shape_ > 1.0)) throw NonIntegrableError("pareto mean diverges for shape <= 1");
        const double m = shape_ * scale_ / (shape_ - 1.0);
        if (theta <= scale_) return m - theta;
        return std::pow(scale_, shape_) * std::pow(theta, 1.0 - shape_) / (shape_ - 1.0);
      }
      case Kind::kLogTail: {
        if (theta <= kE) return log_tail_mean() - theta;
        // integral over t = log s of e^{(1-p) t} / t^2
        const double t0 = std::log(theta);
        return integrate_log_tail(1.0, t0);
      }
      case Kind::kAtoms: {
        KahanSum s;
        for (const auto& [v, pr] : atoms_) {
          if (v > theta) s.add(pr * (v - theta));
        }
        return s.value();
      }
      case Kind::kZeroMix: {
        if (theta <= 0.0) return (1.0 - zero_mass_) * body_->mean() - theta;
        return (1.0 - zero_mass_) * body_->hinge_mean(theta);
      }
      case Kind::kChain:
        return body_->hinge_mean(theta);
    }
    return 0.0;
  }

  /// inf{theta : P(X > theta) <= beta} for beta in (0,1).
  double tail_inverse(double beta) const {
    switch (kind_) {
      case Kind::kPareto:
        return scale_ * std::pow(beta, -1.0 / shape_);
      case Kind::kLogTail: {
        if (std::exp(-p_) <= beta) return kE;
        // solve p t + 2 log t = -log(beta) on t >= 1: g is increasing and
        // concave, so Newton from the log-free start converges monotonically;
        // bisection is the fallback if an iterate ever leaves the bracket
        const double rhs = -std::log(beta);
        double t = std::max(1.0, (rhs - 2.0 * std::log(std::max(rhs / p_, 1.0))) / p_);
        bool converged = false;
        for (int i = 0; i < 60; ++i) {
          const double g = p_ * t + 2.0 * std::log(t) - rhs;
          const double step = g / (p_ + 2.0 / t);
          t -= step;
          if (t < 1.0) break;
          if (std::abs(step) <= 1e-13 * t) {
            converged = true;
            break;
          }
        }
        if (!converged) {
          double hi = 2.0;
          while (p_ * hi + 2.0 * std::log(hi) < rhs) hi *= 2.0;
          t = bisect_nonincreasing(
              [&](double tt) { return rhs - (p_ * tt + 2.0 * std::log(tt)); }, 1.0, hi,
              1e-13);
          for (int i = 0; i < 4; ++i) {
            const double g = p_ * t + 2.0 * std::log(t) - rhs;
            t -= g / (p_ + 2.0 / t);
          }
        }
        return std::exp(t);
      }
      case Kind::kAtoms: {
        double tail = 0.0;
        // walk from the top; theta* is the smallest atom with tail-above <= beta
        for (auto it = atoms_.rbegin(); it != atoms_.rend(); ++it) {
          if (tail + it->second > beta + 1e-15) return it->first;
          tail += it->second;
        }
        return atoms_.front().first;
      }
      case Kind::kZeroMix: {
        if (1.0 - zero_mass_ <= beta) return 0.0;
        return body_->tail_inverse(beta / (1.0 - zero_mass_));
      }
      case Kind::kChain:
        return body_->tail_inverse(beta);
    }
    return 0.0;
  }

  /// Minimal inverse CDF: inf{x : F(x) >= q}.
  double quantile(double q) const { return tail_inverse(1.0 - q); }

  /// Population (VaR threshold, CVaR) at tail level alpha, via monotone tail
  /// inversion (closed form where available) and the hinge identity
  /// CVaR = theta* + E(X - theta*)_+ / alpha.
  std::pair<double, double> population_var_cvar(double alpha) const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0,1)");
    const double theta_star = tail_inverse(alpha);
    const double cvar = theta_star + hinge_mean(theta_star) / alpha;
    return {theta_star, cvar};
  }

  /// Raw moment E[X^r]; nullopt means the moment is infinite. For the
  /// log-corrected tail the moment is finite iff r <= p (finite at r = p).
  std::optional<double> moment(double r) const {
    switch (kind_) {
      case Kind::kPareto:
        if (r >= shape_) return std::nullopt;
        return shape_ * std::pow(scale_, r) / (shape_ - r);
      case Kind::kLogTail: {
        if (r > p_) return std::nullopt;
        const double atom = (1.0 - std::exp(-p_)) * std::exp(r);
        if (r == p_) return atom + p_ + 1.0;  // integral of (p/t^2 + 2/t^3) over t >= 1
        return atom + integrate_log_tail_moment(r);
      }
      case Kind::kAtoms: {
        KahanSum s;
        for (const auto& [v, pr] : atoms_) s.add(pr * std::pow(v, r));
        return s.value();
      }
      case Kind::kZeroMix: {
        const auto body_m = body_->moment(r);
        if (!body_m) return std::nullopt;
        return (1.0 - zero_mass_) * *body_m;
      }
      case Kind::kChain:
        return body_->moment(r);
    }
    return std::nullopt;
  }

  /// Density of the law at the VaR threshold theta*(alpha); ABSENT (nullopt)
  /// when the law has an atom or no density there.
  std::optional<double> density_at_quantile(double alpha) const {
    const double theta = tail_inverse(alpha);
    return density_at(theta);
  }

  std::optional<double> density_at(double x) const {
    switch (kind_) {
      case Kind::kPareto:
        if (x < scale_) return std::nullopt;
        return shape_ * std::pow(scale_, shape_) * std::pow(x, -shape_ - 1.0);
      case Kind::kLogTail: {
        if (x <= kE) return std::nullopt;  // atom sits at e
        const double t = std::log(x);
        return std::exp(-p_ * t) / (x * t * t) * (p_ + 2.0 / t);
      }
      case Kind::kAtoms:
        return std::nullopt;
      case Kind::kZeroMix: {
        if (x <= 0.0) return std::nullopt;
        const auto fb = body_->density_at(x);
        if (!fb) return std::nullopt;
        return (1.0 - zero_mass_) * *fb;
      }
      case Kind::kChain:
        return body_->density_at(x);
    }
    return std::nullopt;
  }

  /// One draw for i.i.d.-able kinds (everything except the chain).
  double draw_one(RngStream& stream) const {
    switch (kind_) {
      case Kind::kPareto:
        return scale_ * std::pow(stream.next_open_unit(), -1.0 / shape_);
      case Kind::kLogTail: {
        const double u = stream.next_open_unit();
        if (u >= std::exp(-p_)) return kE;
        return tail_inverse(u);
      }
      case Kind::kAtoms: {
        const double u = stream.next_unit();
        double acc = 0.0;
        for (const auto& [v, pr] : atoms_) {
          acc += pr;
          if (u < acc) return v;
        }
        return atoms_.back().first;
      }
      case Kind::kZeroMix: {
        const double u = stream.next_unit();
        if (u < zero_mass_) return 0.0;
        return body_->draw_one(stream);
      }
      case Kind::kChain:
        throw std::logic_error("draw_one does not apply to chains; use sample()");
    }
    return 0.0;
  }

  static constexpr double kE = 2.718281828459045235360287471352662498;

 private:
  explicit DistributionModel(Kind k) : kind_(k) {}

  double log_tail_mean() const {
    // E[Y] = (1 - e^{-p}) e + integral over t >= 1 of e^{(1-p)t} (p + 2/t) / t^2
    return (1.0 - std::exp(-p_)) * kE + integrate_log_tail_moment(1.0);
  }

  // integral over t >= t0 of coeff * e^{(1-p) t} / t^2  (hinge tail integral)
  double integrate_log_tail(double coeff, double t0) const {
    const double rate = p_ - 1.0;
    const double t_hi = t0 + 80.0 / rate;
    const auto f = [&](double t) { return coeff * std::exp((1.0 - p_) * t) / (t * t); };
    const double scale_guess = f(t0) / rate;
    return integrate(f, t0, t_hi, std::max(scale_guess, 1e-12) * 1e-9);
  }

  // integral over t >= 1 of e^{(r-p) t} (p + 2/t) / t^2, for r < p
  double integrate_log_tail_moment(double r) const {
    const double rate = p_ - r;
    const double t_hi = 1.0 + 80.0 / rate;
    const auto f = [&](double t) {
      return std::exp((r - p_) * t) * (p_ + 2.0 / t) / (t * t);
    };
    return integrate(f, 1.0, t_hi, 1e-11);
  }

  Kind kind_;
  double scale_ = 1.0;
  double shape_ = 2.0;
  double p_ = 1.5;
  double zero_mass_ = 0.5;
  double rho_ = 0.0;
  std::vector<std::pair<double, double>> atoms_;
  std::shared_ptr<const DistributionModel> body_;
};

/// n draws from the model. Non-chain kinds are i.i.d.; the chain is the
/// strictly stationary Gaussian-copula AR(1): latent u_t = rho u_{t-1} +
/// sqrt(1-rho^2) g_t with u_0 ~ N(0,1), value_t = marginal-quantile(Phi(u_t)).
inline SampleSet sample(const DistributionModel& model, std::size_t n, RngStream& stream) {
  if (n < 1) throw std::invalid_argument("sample requires n >= 1");
  SampleSet out;
  out.seed_tag = stream.key();
  out.values.resize(n);
  if (model.kind() == DistributionModel::Kind::kChain) {
    const double rho = model.rho();
    const double noise = std::sqrt(1.0 - rho * rho);
    const DistributionModel& marginal = model.body();
    const double q_hi = std::nextafter(1.0, 0.0);
    const auto push = [&](std::size_t t, double u) {
      out.values[t] = marginal.quantile(std::clamp(normal_cdf(u), 1e-300, q_hi));
    };
    double u = stream.next_gaussian();
    push(0, u);
    for (std::size_t t = 1; t < n; ++t) {
      u = rho * u + noise * stream.next_gaussian();
      push(t, u);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) out.values[i] = model.draw_one(stream);
  }
  return out;
}

/// Total variation distance between two discrete laws: half the L1 distance
/// of atom masses over the merged support.
inline double tv_distance(const DistributionModel& p, const DistributionModel& q) {
  if (p.kind() != DistributionModel::Kind::kAtoms ||
      q.kind() != DistributionModel::Kind::kAtoms) {
    throw std::invalid_argument("tv_distance is defined for discrete atom laws");
  }
  std::map<double, double> diff;
  for (const auto& [v, pr] : p.atoms()) diff[v] += pr;
  for (const auto& [v, pr] : q.atoms()) diff[v] -= pr;
  KahanSum l1;
  for (const auto& [v, d] : diff) l1.add(std::abs(d));
  return 0.5 * l1.value();
}

namespace detail {
// Weighted support (sorted values with probabilities) for W1 integration.
struct WeightedSupport {
  std::vector<double> values;
  std::vector<double> probs;
};

inline WeightedSupport weighted_support(const SampleSet& s) {
  WeightedSupport w;
  w.values = s.values;
  std::sort(w.values.begin(), w.values.end());
  w.probs.assign(w.values.size(), 1.0 / static_cast<double>(w.values.size()));
  return w;
}

inline WeightedSupport weighted_support(const DistributionModel& m) {
  if (m.kind() != DistributionModel::Kind::kAtoms) {
    throw std::invalid_argument("wasserstein1 needs samples or discrete atoms");
  }
  WeightedSupport w;
  for (const auto& [v, pr] : m.atoms()) {
    w.values.push_back(v);
    w.probs.push_back(pr);
  }
  return w;
}

inline double wasserstein1_supports(const WeightedSupport& a, const WeightedSupport& b) {
  // integral over u in (0,1) of |F_a^{-1}(u) - F_b^{-1}(u)| on merged steps
  KahanSum total;
  std::size_t i = 0;
  std::size_t j = 0;
  double ca = a.probs[0];
  double cb = b.probs[0];
  double prev = 0.0;
  while (prev < 1.0 - 1e-15) {
    const double next = std::min(ca, cb);
    total.add((next - prev) * std::abs(a.values[i] - b.values[j]));
    prev = next;
    if (ca <= next + 1e-15 && i + 1 < a.values.size()) ca += a.probs[++i];
    if (cb <= next + 1e-15 && j + 1 < b.values.size()) cb += b.probs[++j];
    if (next >= 1.0 - 1e-15) break;
  }
  return total.value();
}
}  // namespace detail

/// 1-d Wasserstein-1 distance via merged quantile integration.
template <class A, class B>
double wasserstein1(const A& a, const B& b) {
  return detail::wasserstein1_supports(detail::weighted_support(a),
                                       detail::weighted_support(b));
}

}  // namespace tailrisk
