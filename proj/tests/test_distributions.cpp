#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "support.hpp"
#include "tailrisk/distributions.hpp"

using namespace tailrisk;

namespace {

DistributionModel two_atoms() {
  return DistributionModel::discrete_atoms({{0.0, 0.7}, {10.0, 0.3}});
}

}  // namespace

TEST_CASE("sampling respects support") {
  RngStream s(11);
  const auto pareto = sample(DistributionModel::pareto(1.0, 2.0), 4, s);
  for (double x : pareto.values) CHECK(x >= 1.0);

  RngStream s2(12);
  const auto degenerate = sample(DistributionModel::discrete_atoms({{0.0, 1.0}}), 3, s2);
  for (double x : degenerate.values) CHECK(x == 0.0);
}

TEST_CASE("log-corrected tail atom mass matches 1 - e^{-p}") {
  const double p = 1.5;
  const DistributionModel model = DistributionModel::log_corrected_tail(p);
  RngStream s(13);
  const std::size_t n = 1000000;
  const SampleSet draws = sample(model, n, s);
  std::size_t at_atom = 0;
  for (double x : draws.values) {
    CHECK(x >= DistributionModel::kE);
    if (x == DistributionModel::kE) ++at_atom;
  }
  const double expected = 1.0 - std::exp(-p);
  const double sigma = std::sqrt(expected * (1.0 - expected) / static_cast<double>(n));
  CHECK(std::abs(static_cast<double>(at_atom) / n - expected) < 3.0 * sigma);
}

TEST_CASE("survival oracles") {
  CHECK(DistributionModel::pareto(1, 2).survival(2.0) == doctest::Approx(0.25));
  CHECK(DistributionModel::pareto(1, 2).survival(-1.0) == 1.0);
  CHECK(two_atoms().survival(-1.0) == 1.0);
  CHECK(two_atoms().survival(0.0) == doctest::Approx(0.3));
  CHECK(two_atoms().survival(10.0) == 0.0);
  const DistributionModel lt = DistributionModel::log_corrected_tail(1.5);
  CHECK(lt.survival(-1.0) == 1.0);
  CHECK(lt.survival(DistributionModel::kE) == doctest::Approx(std::exp(-1.5)));
}

TEST_CASE("survival is nonincreasing, right-continuous, and vanishes") {
  const std::vector<DistributionModel> models = {
      DistributionModel::pareto(1.0, 2.5),
      DistributionModel::log_corrected_tail(1.5),
      two_atoms(),
      DistributionModel::zero_inflated(0.4, DistributionModel::pareto(1.0, 2.5)),
  };
  for (const auto& model : models) {
    double prev = 1.0;
    CHECK(model.survival(-1.0) == 1.0);
    for (double theta = 0.0; theta <= 60.0; theta += 0.25) {
      const double s = model.survival(theta);
      CHECK(s <= prev + 1e-15);
      // right-continuity on the scan grid
      CHECK(model.survival(theta + 1e-12) == doctest::Approx(s).epsilon(1e-6));
      prev = s;
    }
    CHECK(model.survival(1e9) < 1e-3);
  }
}

TEST_CASE("hinge mean oracles and properties") {
  CHECK(DistributionModel::pareto(1, 2).hinge_mean(2.0) == doctest::Approx(0.5));
  CHECK(two_atoms().hinge_mean(4.0) == doctest::Approx(1.8));

  const std::vector<DistributionModel> models = {
      DistributionModel::pareto(1.0, 2.5),
      DistributionModel::log_corrected_tail(1.5),
      two_atoms(),
      DistributionModel::zero_inflated(0.4, DistributionModel::pareto(1.0, 2.5)),
  };
  for (const auto& model : models) {
    const double mean = model.mean();
    CHECK(model.hinge_mean(0.0) == doctest::Approx(mean).epsilon(1e-9));
    // dominated tail: monotone to zero
    double prev = mean;
    for (double theta : {1.0, 2.0, 4.0, 8.0, 16.0, 64.0, 256.0}) {
      const double h = model.hinge_mean(theta);
      CHECK(h <= prev + 1e-12);
      prev = h;
    }
    CHECK(prev < 0.2);
    // convexity on a grid
    for (double theta = 0.5; theta < 20.0; theta += 0.5) {
      const double d2 = model.hinge_mean(theta - 0.5) - 2.0 * model.hinge_mean(theta) +
                        model.hinge_mean(theta + 0.5);
      CHECK(d2 >= -1e-10);
    }
    // derivative equals -survival at continuity points
    for (double theta : {1.3, 3.7, 9.1}) {
      const double step = 1e-6;
      const double deriv =
          (model.hinge_mean(theta + step) - model.hinge_mean(theta - step)) / (2.0 * step);
      CHECK(deriv == doctest::Approx(-model.survival(theta)).epsilon(1e-5));
    }
  }
}

TEST_CASE("population VaR/CVaR oracles") {
  SUBCASE("pareto closed form") {
    const auto [theta, cvar] = DistributionModel::pareto(1, 2).population_var_cvar(0.25);
    CHECK(theta == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(cvar == doctest::Approx(4.0).epsilon(1e-12));
    for (double alpha : {0.05, 0.1, 0.3}) {
      const auto [t, c] = DistributionModel::pareto(1.0, 2.5).population_var_cvar(alpha);
      CHECK(t == doctest::Approx(testsupport::pareto_var(1.0, 2.5, alpha)).epsilon(1e-9));
      CHECK(c == doctest::Approx(testsupport::pareto_cvar(1.0, 2.5, alpha)).epsilon(1e-9));
    }
  }
  SUBCASE("constant loss") {
    const auto model = DistributionModel::discrete_atoms({{3.0, 1.0}});
    const auto [theta, cvar] = model.population_var_cvar(0.37);
    CHECK(theta == 3.0);
    CHECK(cvar == doctest::Approx(3.0));
  }
  SUBCASE("zero-heavy atoms match a brute-force RU grid") {
    const auto [theta, cvar] = two_atoms().population_var_cvar(0.4);
    CHECK(theta == 0.0);
    CHECK(cvar == doctest::Approx(7.5));
    double best = 1e300;
    for (double t = -1.0; t <= 12.0; t += 1e-4) {
      const double hinge = 0.7 * std::max(0.0 - t, 0.0) + 0.3 * std::max(10.0 - t, 0.0);
      best = std::min(best, t + hinge / 0.4);
    }
    CHECK(cvar == doctest::Approx(best).epsilon(1e-6));
  }
}

TEST_CASE("moments") {
  CHECK(!DistributionModel::pareto(1, 2).moment(3.0).has_value());
  CHECK(!DistributionModel::pareto(1, 2).moment(2.0).has_value());
  CHECK(*DistributionModel::pareto(1, 2).moment(1.0) == doctest::Approx(2.0));
  CHECK(*two_atoms().moment(2.0) == doctest::Approx(30.0));
  const DistributionModel lt = DistributionModel::log_corrected_tail(1.5);
  CHECK(!lt.moment(2.0).has_value());
  CHECK(!lt.moment(1.51).has_value());
  CHECK(lt.moment(1.5).has_value());
  CHECK(lt.moment(1.0).has_value());
  // closed form at r = p: atom + p + 1
  CHECK(*lt.moment(1.5) ==
        doctest::Approx((1.0 - std::exp(-1.5)) * std::exp(1.5) + 2.5).epsilon(1e-12));
}

TEST_CASE("log-corrected truncated moments: bounded at r=p, divergent above") {
  const double p = 1.5;
  const DistributionModel model = DistributionModel::log_corrected_tail(p);
  // E[min(Y,T)^r] = (1-e^{-p}) e^r + int_e^T y^r f(y) dy + T^r S(T)
  const auto truncated_moment = [&](double r, double cap) {
    const auto integrand = [&](double t) {
      // after substituting t = log y
      return std::exp((r - p) * t) * (p + 2.0 / t) / (t * t);
    };
    const double body = integrate(integrand, 1.0, std::log(cap), 1e-10);
    return (1.0 - std::exp(-p)) * std::exp(r) + body +
           std::pow(cap, r) * model.survival(cap);
  };
  std::vector<double> caps;
  for (double k : {2.0, 4.0, 6.0, 8.0}) caps.push_back(std::exp(k));

  std::vector<double> at_p, above_p;
  for (double cap : caps) {
    at_p.push_back(truncated_moment(p, cap));
    above_p.push_back(truncated_moment(p + 0.2, cap));
  }
  // r = p: strictly increasing toward the finite limit (atom + p + 1), with
  // the tail contribution dying out
  const double limit = *model.moment(p);
  for (std::size_t i = 0; i < caps.size(); ++i) {
    CHECK(at_p[i] <= limit + 1e-6);
    if (i > 0) CHECK(at_p[i] > at_p[i - 1]);
  }
  CHECK(at_p[3] - at_p[2] < 0.1);
  CHECK(limit - at_p[3] < 0.25);
  // r = p + 0.2: strictly increasing on the same grid, with increments bounded
  // away from zero, and still growing at much larger caps (no finite limit)
  for (std::size_t i = 1; i < caps.size(); ++i) {
    CHECK(above_p[i] - above_p[i - 1] > 0.25 * (above_p[1] - above_p[0]));
  }
  const double far = truncated_moment(p + 0.2, std::exp(16.0));
  const double farther = truncated_moment(p + 0.2, std::exp(24.0));
  CHECK(far > above_p[3] + 0.5);
  CHECK(farther > far + 1.0);
  CHECK(!model.moment(p + 0.2).has_value());
}

TEST_CASE("tv distance") {
  const auto p = DistributionModel::discrete_atoms({{0.0, 0.5}, {1.0, 0.5}});
  CHECK(tv_distance(p, p) == 0.0);
  const auto q = DistributionModel::discrete_atoms({{0.0, 0.2}, {1.0, 0.8}});
  CHECK(tv_distance(p, q) == doctest::Approx(0.3));
  const auto d0 = DistributionModel::discrete_atoms({{0.0, 1.0}});
  const auto mix = DistributionModel::discrete_atoms({{0.0, 0.96}, {5.0, 0.04}});
  CHECK(tv_distance(d0, mix) == doctest::Approx(0.04));
}

TEST_CASE("wasserstein1") {
  SampleSet a{{1.0, 2.0}, 0};
  SampleSet b{{2.0, 4.0}, 0};
  CHECK(wasserstein1(a, a) == 0.0);
  CHECK(wasserstein1(a, b) == doctest::Approx(1.5));
  const auto d0 = DistributionModel::discrete_atoms({{0.0, 1.0}});
  const auto d3 = DistributionModel::discrete_atoms({{3.0, 1.0}});
  CHECK(wasserstein1(d0, d3) == doctest::Approx(3.0));
  const auto split = DistributionModel::discrete_atoms({{0.0, 0.25}, {4.0, 0.75}});
  CHECK(wasserstein1(d0, split) == doctest::Approx(3.0));
}

TEST_CASE("empirical survival within a Dvoretzky band at 20 grid points") {
  const std::vector<DistributionModel> models = {
      DistributionModel::pareto(1.0, 2.5),
      DistributionModel::log_corrected_tail(1.5),
      two_atoms(),
      DistributionModel::zero_inflated(0.4, DistributionModel::pareto(1.0, 2.5)),
  };
  const std::size_t n = 1000000;
  const double band = 2.0 * std::sqrt(std::log(2.0 / 0.001) / (2.0 * n));
  std::uint64_t seed = 400;
  for (const auto& model : models) {
    RngStream s(seed++);
    SampleSet draws = sample(model, n, s);
    std::sort(draws.values.begin(), draws.values.end());
    for (int g = 0; g < 20; ++g) {
      const double q = (g + 0.5) / 20.0;
      const double theta = model.quantile(q);
      const auto above = draws.values.end() - std::upper_bound(draws.values.begin(),
                                                               draws.values.end(), theta);
      const double emp = static_cast<double>(above) / static_cast<double>(n);
      CHECK(std::abs(emp - model.survival(theta)) < band);
    }
  }
}

TEST_CASE("mixing chain marginals match the declared law (KS < 0.01)") {
  const auto marginal = DistributionModel::pareto(1.0, 2.5);
  const auto chain = DistributionModel::mixing_chain(marginal, 0.6);
  RngStream s(500);
  const std::size_t n = 100000;
  SampleSet draws = sample(chain, n, s);
  std::sort(draws.values.begin(), draws.values.end());
  double ks = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double cdf = 1.0 - marginal.survival(draws.values[i]);
    const double hi = static_cast<double>(i + 1) / n;
    const double lo = static_cast<double>(i) / n;
    ks = std::max({ks, std::abs(hi - cdf), std::abs(cdf - lo)});
  }
  CHECK(ks < 0.01);
}

TEST_CASE("chain with rho = 0 degenerates to i.i.d. marginal sampling") {
  const auto marginal = DistributionModel::pareto(1.0, 2.5);
  const auto chain = DistributionModel::mixing_chain(marginal, 0.0);
  RngStream s(501);
  const SampleSet draws = sample(chain, 20000, s);
  // lag-1 sample autocorrelation of the latent-uniform transform should vanish
  std::vector<double> u(draws.values.size());
  for (std::size_t i = 0; i < u.size(); ++i) {
    u[i] = 1.0 - marginal.survival(draws.values[i]);
  }
  double num = 0.0;
  double den = 0.0;
  for (std::size_t i = 0; i + 1 < u.size(); ++i) num += (u[i] - 0.5) * (u[i + 1] - 0.5);
  for (double v : u) den += (v - 0.5) * (v - 0.5);
  CHECK(std::abs(num / den) < 0.03);
}

TEST_CASE("density at quantile: present for pareto, absent for atoms") {
  const auto pareto = DistributionModel::pareto(1.0, 2.0);
  const auto f = pareto.density_at_quantile(0.25);
  REQUIRE(f.has_value());
  CHECK(*f == doctest::Approx(2.0 / 8.0));
  CHECK(!two_atoms().density_at_quantile(0.25).has_value());
}

TEST_CASE("model validation rejects bad parameters") {
  CHECK_THROWS(DistributionModel::pareto(0.0, 2.0));
  CHECK_THROWS(DistributionModel::pareto(1.0, 1.0));
  CHECK_THROWS(DistributionModel::log_corrected_tail(2.5));
  CHECK_THROWS(DistributionModel::discrete_atoms({{0.0, 0.5}, {1.0, 0.6}}));
  CHECK_THROWS(DistributionModel::discrete_atoms({{-1.0, 1.0}}));
  CHECK_THROWS(DistributionModel::zero_inflated(1.5, DistributionModel::pareto(1, 2)));
  CHECK_THROWS(DistributionModel::mixing_chain(DistributionModel::pareto(1, 2), 1.5));
}

TEST_CASE("seed_tag records the generating stream") {
  RngStream s = RngStream::substream(9, 1, 2, 3);
  const std::uint64_t key = s.key();
  const SampleSet draws = sample(DistributionModel::pareto(1.0, 2.0), 5, s);
  CHECK(draws.seed_tag == key);
}
