#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

namespace tailrisk {

/// Counter-based splittable random stream.
///
/// Every stream is a pure function of (key, counter); substreams are derived
/// by hashing (seed, stage, grid_index, replication_index), so a replication
/// draws the same numbers no matter which worker runs it or in which order.
/// The generator is the SplitMix64 output function over a strided counter.
class RngStream {
 public:
  explicit RngStream(std::uint64_t key) : key_(key) {}

  static std::uint64_t mix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
  }

  /// Derives the stream key for (seed, stage, grid point, replication).
  static RngStream substream(std::uint64_t seed, std::uint64_t stage,
                             std::uint64_t grid_index, std::uint64_t rep_index) {
    std::uint64_t k = mix(seed);
    k = mix(k ^ (0x8000000000000000ULL | stage));
    k = mix(k ^ grid_index);
    k = mix(k ^ rep_index);
    return RngStream(k);
  }

  std::uint64_t next_u64() { return mix(key_ + (counter_++) * 0xA0761D6478BD642FULL); }

  /// Uniform on [0, 1) with 53 random bits.
  double next_unit() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  /// Uniform on the open interval (0, 1); safe to feed into quantile inversions.
  double next_open_unit() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  /// Standard normal via inverse-CDF of an open uniform (one draw consumed).
  double next_gaussian();

  /// Uniform integer in [0, bound), one draw consumed. bound must be >= 1.
  /// Modulo bias is below bound / 2^64.
  std::size_t next_index(std::size_t bound) {
    return static_cast<std::size_t>(next_u64() % static_cast<std::uint64_t>(bound));
  }

  std::uint64_t key() const { return key_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

/// Standard normal CDF.
inline double normal_cdf(double x) { return 0.5 * std::erfc(-x * 0.70710678118654752440); }

/// Standard normal density.
inline double normal_pdf(double x) {
  return 0.39894228040143267794 * std::exp(-0.5 * x * x);
}

/// Inverse standard normal CDF for p in (0,1).
///
/// Acklam's rational approximation polished with one Halley step against
/// erfc; absolute error is at the 1e-15 level across the open interval.
inline double normal_quantile(double p) {
  static const double a[6] = {-3.969683028665376e+01, 2.209460984245205e+02,
                              -2.759285104469687e+02, 1.383577518672690e+02,
                              -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[5] = {-5.447609879822406e+01, 1.615858368580409e+02,
                              -1.556989798598866e+02, 6.680131188771972e+01,
                              -1.328068155288572e+01};
  static const double c[6] = {-7.784894002430293e-03, -3.223964580411365e-01,
                              -2.400758277161838e+00, -2.549732539343734e+00,
                              4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[4] = {7.784695709041462e-03, 3.224671290700398e-01,
                              2.445134137142996e+00, 3.754408661907416e+00};
  const double plow = 0.02425;
  double x;
  if (p < plow) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - plow) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = normal_cdf(x) - p;
  const double u = e * 2.50662827463100050242 * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

inline double RngStream::next_gaussian() { return normal_quantile(next_open_unit()); }

/// Fisher-Yates permutation of 0..n-1 driven by the stream.
inline std::vector<std::size_t> random_permutation(std::size_t n, RngStream& stream) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    std::swap(perm[i - 1], perm[stream.next_index(i)]);
  }
  return perm;
}

}  // namespace tailrisk
