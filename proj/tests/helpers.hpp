#pragma once

#include <vector>

#include "galr/galr.hpp"

namespace testutil {

template <typename S>
galr::Tensor<S> random_tensor(galr::Shape shape, galr::Rng& rng, double lo = -1.0,
                              double hi = 1.0) {
  galr::Tensor<S> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

template <typename S>
double max_abs_diff(const galr::Tensor<S>& a, const galr::Tensor<S>& b) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  return m;
}

/// Independent reference for the encoder: direct strided cross-correlation
/// plus rectification, no tensor machinery.
inline std::vector<double> reference_encode(const std::vector<double>& x,
                                            const std::vector<double>& basis, std::int64_t d,
                                            std::int64_t m, bool rectify) {
  const std::int64_t hop = m / 2;
  const std::int64_t frames = galr::frame_count(static_cast<std::int64_t>(x.size()), m);
  std::vector<double> out(static_cast<std::size_t>(d * frames), 0.0);
  for (std::int64_t di = 0; di < d; ++di) {
    for (std::int64_t f = 0; f < frames; ++f) {
      double acc = 0.0;
      for (std::int64_t mi = 0; mi < m; ++mi) {
        const std::int64_t t = f * hop + mi;
        const double xv = t < static_cast<std::int64_t>(x.size()) ? x[static_cast<std::size_t>(t)] : 0.0;
        acc += basis[static_cast<std::size_t>(di * m + mi)] * xv;
      }
      out[static_cast<std::size_t>(di * frames + f)] = rectify ? std::max(acc, 0.0) : acc;
    }
  }
  return out;
}

/// Solves A x = b by Gaussian elimination with partial pivoting (small
/// systems only; used to build pseudo-inverses in tests).
inline std::vector<double> solve_dense(std::vector<double> a, std::vector<double> b,
                                       std::int64_t n) {
  for (std::int64_t col = 0; col < n; ++col) {
    std::int64_t piv = col;
    for (std::int64_t r = col + 1; r < n; ++r)
      if (std::abs(a[static_cast<std::size_t>(r * n + col)]) >
          std::abs(a[static_cast<std::size_t>(piv * n + col)]))
        piv = r;
    for (std::int64_t c = 0; c < n; ++c)
      std::swap(a[static_cast<std::size_t>(col * n + c)], a[static_cast<std::size_t>(piv * n + c)]);
    std::swap(b[static_cast<std::size_t>(col)], b[static_cast<std::size_t>(piv)]);
    const double d = a[static_cast<std::size_t>(col * n + col)];
    for (std::int64_t r = col + 1; r < n; ++r) {
      const double f = a[static_cast<std::size_t>(r * n + col)] / d;
      for (std::int64_t c = col; c < n; ++c)
        a[static_cast<std::size_t>(r * n + c)] -= f * a[static_cast<std::size_t>(col * n + c)];
      b[static_cast<std::size_t>(r)] -= f * b[static_cast<std::size_t>(col)];
    }
  }
  std::vector<double> x(static_cast<std::size_t>(n), 0.0);
  for (std::int64_t r = n - 1; r >= 0; --r) {
    double acc = b[static_cast<std::size_t>(r)];
    for (std::int64_t c = r + 1; c < n; ++c)
      acc -= a[static_cast<std::size_t>(r * n + c)] * x[static_cast<std::size_t>(c)];
    x[static_cast<std::size_t>(r)] = acc / a[static_cast<std::size_t>(r * n + r)];
  }
  return x;
}

}  // namespace testutil
