#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "tailrisk/errors.hpp"

namespace tailrisk {

/// Kahan-compensated accumulator.
class KahanSum {
 public:
  void add(double x) {
    const double y = x - carry_;
    const double t = sum_ + y;
    carry_ = (t - sum_) - y;
    sum_ = t;
  }
  double value() const { return sum_; }

 private:
  double sum_ = 0.0;
  double carry_ = 0.0;
};

inline double kahan_total(std::span<const double> xs) {
  KahanSum s;
  for (double x : xs) s.add(x);
  return s.value();
}

inline double mean_of(std::span<const double> xs) {
  return xs.empty() ? 0.0 : kahan_total(xs) / static_cast<double>(xs.size());
}

inline double sample_std(std::span<const double> xs) {
  const std::size_t n = xs.size();
  if (n < 2) return 0.0;
  const double m = mean_of(xs);
  KahanSum s;
  for (double x : xs) s.add((x - m) * (x - m));
  return std::sqrt(s.value() / static_cast<double>(n - 1));
}

/// Lower median: the ceil(k/2)-th smallest value (1-indexed). Deterministic
/// for even counts. Mutates the argument.
inline double lower_median_inplace(std::vector<double>& xs) {
  const std::size_t k = xs.size();
  const std::size_t rank = (k + 1) / 2;  // ceil(k/2)
  std::nth_element(xs.begin(), xs.begin() + (rank - 1), xs.end());
  return xs[rank - 1];
}

inline double lower_median(std::span<const double> xs) {
  std::vector<double> copy(xs.begin(), xs.end());
  return lower_median_inplace(copy);
}

/// floor(alpha*n) with a relative nudge so that exactly-integer products of
/// non-representable decimals (0.3 * 10, ...) land on the intended integer.
inline std::size_t floor_alpha_n(double alpha, std::size_t n) {
  const double an = alpha * static_cast<double>(n);
  return static_cast<std::size_t>(std::floor(an + an * 1e-12 + 1e-12));
}

namespace detail {
inline double simpson(const std::function<double(double)>& f, double a, double fa,
                      double b, double fb, double fm) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

inline double adaptive_simpson_rec(const std::function<double(double)>& f, double a,
                                   double b, double fa, double fb, double fm,
                                   double whole, double tol, int depth) {
  const double m = 0.5 * (a + b);
  const double lm = 0.5 * (a + m);
  const double rm = 0.5 * (m + b);
  const double flm = f(lm);
  const double frm = f(rm);
  const double left = simpson(f, a, fa, m, fm, flm);
  const double right = simpson(f, m, fm, b, fb, frm);
  const double delta = left + right - whole;
  if (depth <= 0 || std::abs(delta) <= 15.0 * tol) {
    return left + right + delta / 15.0;
  }
  return adaptive_simpson_rec(f, a, m, fa, fm, flm, left, 0.5 * tol, depth - 1) +
         adaptive_simpson_rec(f, m, b, fm, fb, frm, right, 0.5 * tol, depth - 1);
}
}  // namespace detail

/// Adaptive Simpson quadrature on [a,b] to the given absolute tolerance.
inline double integrate(const std::function<double(double)>& f, double a, double b,
                        double abs_tol, int max_depth = 40) {
  if (!(b > a)) return 0.0;
  const double fa = f(a);
  const double fb = f(b);
  const double fm = f(0.5 * (a + b));
  const double whole = detail::simpson(f, a, fa, b, fb, fm);
  return detail::adaptive_simpson_rec(f, a, b, fa, fb, fm, whole, abs_tol, max_depth);
}

/// Root of a monotone nonincreasing g on [lo, hi] with g(lo) >= 0 >= g(hi),
/// bisected to the given absolute tolerance on the argument.
inline double bisect_nonincreasing(const std::function<double(double)>& g, double lo,
                                   double hi, double x_tol) {
  for (int i = 0; i < 200 && (hi - lo) > x_tol; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (g(mid) > 0.0) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

/// Small dense matrix with row-major storage; enough linear algebra for the
/// (d+1)-dimensional stationarity systems.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  /// Solves A x = b by partial-pivot Gaussian elimination.
  std::vector<double> solve(std::vector<double> b) const {
    Matrix a = *this;
    const std::size_t n = rows_;
    std::vector<std::size_t> piv(n);
    for (std::size_t i = 0; i < n; ++i) piv[i] = i;
    for (std::size_t col = 0; col < n; ++col) {
      std::size_t best = col;
      for (std::size_t r = col + 1; r < n; ++r) {
        if (std::abs(a(r, col)) > std::abs(a(best, col))) best = r;
      }
      if (std::abs(a(best, col)) < 1e-300) {
        throw SingularJacobianError("singular matrix in solve");
      }
      if (best != col) {
        for (std::size_t c = 0; c < n; ++c) std::swap(a(col, c), a(best, c));
        std::swap(b[col], b[best]);
      }
      for (std::size_t r = col + 1; r < n; ++r) {
        const double f = a(r, col) / a(col, col);
        a(r, col) = 0.0;
        for (std::size_t c = col + 1; c < n; ++c) a(r, c) -= f * a(col, c);
        b[r] -= f * b[col];
      }
    }
    std::vector<double> x(n);
    for (std::size_t ri = n; ri-- > 0;) {
      double s = b[ri];
      for (std::size_t c = ri + 1; c < n; ++c) s -= a(ri, c) * x[c];
      x[ri] = s / a(ri, ri);
    }
    return x;
  }

  Matrix inverse() const {
    const std::size_t n = rows_;
    Matrix inv(n, n);
    for (std::size_t c = 0; c < n; ++c) {
      std::vector<double> e(n, 0.0);
      e[c] = 1.0;
      const std::vector<double> col = solve(std::move(e));
      for (std::size_t r = 0; r < n; ++r) inv(r, c) = col[r];
    }
    return inv;
  }

  std::vector<double> apply(std::span<const double> v) const {
    std::vector<double> out(rows_, 0.0);
    for (std::size_t r = 0; r < rows_; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols_; ++c) s += (*this)(r, c) * v[c];
      out[r] = s;
    }
    return out;
  }

  /// Spectral norm by power iteration on A^T A (deterministic start).
  double norm2() const {
    std::vector<double> v(cols_, 1.0 / std::sqrt(static_cast<double>(cols_)));
    double lambda = 0.0;
    for (int it = 0; it < 200; ++it) {
      const std::vector<double> av = apply(v);
      std::vector<double> atav(cols_, 0.0);
      for (std::size_t c = 0; c < cols_; ++c) {
        double s = 0.0;
        for (std::size_t r = 0; r < rows_; ++r) s += (*this)(r, c) * av[r];
        atav[c] = s;
      }
      double nrm = 0.0;
      for (double x : atav) nrm += x * x;
      nrm = std::sqrt(nrm);
      if (nrm < 1e-300) return 0.0;
      const double next = nrm;
      for (std::size_t c = 0; c < cols_; ++c) v[c] = atav[c] / nrm;
      if (it > 4 && std::abs(next - lambda) <= 1e-13 * next) {
        lambda = next;
        break;
      }
      lambda = next;
    }
    return std::sqrt(lambda);
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline double euclidean_norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

struct OlsFit {
  double slope = 0.0;
  double intercept = 0.0;
  double slope_se = 0.0;
};

/// Ordinary least squares y ~ a + b x; slope_se is the classical standard
/// error (0 when the fit is exact or n == 2).
inline OlsFit ols_fit(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  if (n < 2 || y.size() != n) {
    throw InsufficientPointsError("ols_fit needs at least two points");
  }
  const double mx = mean_of(x);
  const double my = mean_of(y);
  double sxx = 0.0;
  double sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  OlsFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  if (n > 2) {
    double ssr = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = y[i] - fit.intercept - fit.slope * x[i];
      ssr += r * r;
    }
    fit.slope_se = std::sqrt(ssr / static_cast<double>(n - 2) / sxx);
  }
  return fit;
}

}  // namespace tailrisk
