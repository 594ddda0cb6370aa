#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "galr/tensor.hpp"

namespace galr {

namespace detail {

/// C[M,N] += opA(A) * opB(B) where opX transposes when the flag is set.
/// A is physically am x an, B is bm x bn.
template <typename S>
void gemm_acc(const S* A, bool ta, std::int64_t am, std::int64_t an, const S* B,
              bool tb, std::int64_t bm, std::int64_t bn, S* C) {
  const std::int64_t M = ta ? an : am;
  const std::int64_t K = ta ? am : an;
  const std::int64_t Kb = tb ? bn : bm;
  const std::int64_t N = tb ? bm : bn;
  require(K == Kb, Error::Kind::dimension,
          "matmul inner extents differ: " + std::to_string(K) + " vs " + std::to_string(Kb));
  if (!ta && !tb) {
    for (std::int64_t i = 0; i < M; ++i) {
      S* crow = C + i * N;
      const S* arow = A + i * an;
      for (std::int64_t k = 0; k < K; ++k) {
        const S a = arow[k];
        if (a == S(0)) continue;
        const S* brow = B + k * bn;
        for (std::int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    }
  } else if (ta && !tb) {
    for (std::int64_t k = 0; k < K; ++k) {
      const S* arow = A + k * an;
      const S* brow = B + k * bn;
      for (std::int64_t i = 0; i < M; ++i) {
        const S a = arow[i];
        if (a == S(0)) continue;
        S* crow = C + i * N;
        for (std::int64_t j = 0; j < N; ++j) crow[j] += a * brow[j];
      }
    }
  } else if (!ta && tb) {
    for (std::int64_t i = 0; i < M; ++i) {
      const S* arow = A + i * an;
      S* crow = C + i * N;
      for (std::int64_t j = 0; j < N; ++j) {
        const S* brow = B + j * bn;
        S acc = S(0);
        for (std::int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
        crow[j] += acc;
      }
    }
  } else {
    for (std::int64_t i = 0; i < M; ++i) {
      S* crow = C + i * N;
      for (std::int64_t j = 0; j < N; ++j) {
        const S* brow = B + j * bn;
        S acc = S(0);
        for (std::int64_t k = 0; k < K; ++k) acc += A[k * an + i] * brow[k];
        crow[j] += acc;
      }
    }
  }
}

enum class Bcast { same, scalar, lead };

/// Broadcast rule: operands must have equal shapes, or the smaller one is a
/// scalar, or its shape equals the leading dims of the larger one (it is then
/// replicated along all trailing axes).
inline Bcast bcast_kind(const Shape& big, const Shape& small, const char* op) {
  if (big == small) return Bcast::same;
  if (shape_numel(small) == 1) return Bcast::scalar;
  if (small.size() < big.size() &&
      std::equal(small.begin(), small.end(), big.begin()))
    return Bcast::lead;
  throw Error(Error::Kind::dimension, std::string(op) + ": shapes " + shape_str(big) +
                                          " and " + shape_str(small) +
                                          " are not broadcast-compatible");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops

namespace detail {

template <typename S, typename Fwd, typename BwdA, typename BwdB>
Tensor<S> binary_op(const char* name, const Tensor<S>& a, const Tensor<S>& b, Fwd fwd,
                    BwdA bwd_a, BwdB bwd_b, bool count_as_mul) {
  // Orient so `x` is the larger operand; `swapped` remembers the original order.
  const bool swapped = b.numel() > a.numel();
  const Tensor<S>& x = swapped ? b : a;
  const Tensor<S>& y = swapped ? a : b;
  const Bcast kind = bcast_kind(x.shape(), y.shape(), name);
  const std::int64_t n = x.numel();
  const std::int64_t ny = y.numel();
  const std::int64_t rep = kind == Bcast::lead ? n / ny : n;

  Tensor<S> out(x.shape());
  const S* xd = x.data();
  const S* yd = y.data();
  S* od = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t iy = kind == Bcast::same ? i : (kind == Bcast::scalar ? 0 : i / rep);
    const S xv = xd[i];
    const S yv = yd[iy];
    od[i] = swapped ? fwd(yv, xv) : fwd(xv, yv);
  }
  if (count_as_mul)
    count_macs(static_cast<std::uint64_t>(n));
  else
    count_adds(static_cast<std::uint64_t>(n));
  count_alloc(static_cast<std::uint64_t>(n));

  auto backward = [kind, n, rep, swapped, bwd_a, bwd_b](Tensor<S>& o) {
    Tensor<S>& x2 = o.node->parents[0];
    Tensor<S>& y2 = o.node->parents[1];
    const S* g = o.grad();
    const S* xd2 = x2.data();
    const S* yd2 = y2.data();
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t iy = kind == Bcast::same ? i : (kind == Bcast::scalar ? 0 : i / rep);
      const S xv = xd2[i];
      const S yv = yd2[iy];
      const S av = swapped ? yv : xv;
      const S bv = swapped ? xv : yv;
      // x2 holds the larger operand; route the right partial to each side.
      if (x2.requires_grad()) x2.grad()[i] += g[i] * (swapped ? bwd_b(av, bv) : bwd_a(av, bv));
      if (y2.requires_grad()) y2.grad()[iy] += g[i] * (swapped ? bwd_a(av, bv) : bwd_b(av, bv));
    }
  };
  return finish_op(name, std::move(out), {x, y}, std::move(backward));
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      "add", a, b, [](S x, S y) { return x + y; }, [](S, S) { return S(1); },
      [](S, S) { return S(1); }, false);
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      "sub", a, b, [](S x, S y) { return x - y; }, [](S, S) { return S(1); },
      [](S, S) { return S(-1); }, false);
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      "mul", a, b, [](S x, S y) { return x * y; }, [](S, S y) { return y; },
      [](S x, S) { return x; }, true);
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op(
      "div", a, b, [](S x, S y) { return x / y; }, [](S, S y) { return S(1) / y; },
      [](S x, S y) { return -x / (y * y); }, true);
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

namespace detail {

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary_op(const char* name, const Tensor<S>& x, Fwd fwd, Bwd bwd_from_out) {
  const std::int64_t n = x.numel();
  Tensor<S> out(x.shape());
  const S* xd = x.data();
  S* od = out.data();
  for (std::int64_t i = 0; i < n; ++i) od[i] = fwd(xd[i]);
  count_nonlin(static_cast<std::uint64_t>(n));
  count_alloc(static_cast<std::uint64_t>(n));
  auto backward = [n, bwd_from_out](Tensor<S>& o) {
    Tensor<S>& p = o.node->parents[0];
    if (!p.requires_grad()) return;
    const S* g = o.grad();
    const S* ov = o.data();
    const S* xv = p.data();
    S* pg = p.grad();
    for (std::int64_t i = 0; i < n; ++i) pg[i] += g[i] * bwd_from_out(xv[i], ov[i]);
  };
  return finish_op(name, std::move(out), {x}, std::move(backward));
}

}  // namespace detail

template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  return detail::unary_op(
      "relu", x, [](S v) { return v > S(0) ? v : S(0); },
      [](S v, S) { return v > S(0) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  return detail::unary_op(
      "sigmoid", x, [](S v) { return S(1) / (S(1) + std::exp(-v)); },
      [](S, S y) { return y * (S(1) - y); });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& x) {
  return detail::unary_op(
      "tanh", x, [](S v) { return std::tanh(v); },
      [](S, S y) { return S(1) - y * y; });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& x) {
  return detail::unary_op(
      "exp", x, [](S v) { return std::exp(v); }, [](S, S y) { return y; });
}

/// Natural logarithm.
template <typename S>
Tensor<S> log(const Tensor<S>& x) {
  return detail::unary_op(
      "log", x, [](S v) { return std::log(v); }, [](S v, S) { return S(1) / v; });
}

/// Gradient is passed through strictly inside (lo, hi) and zeroed outside.
template <typename S>
Tensor<S> clamp(const Tensor<S>& x, S lo, S hi) {
  require(lo <= hi, Error::Kind::usage, "clamp bounds inverted");
  return detail::unary_op(
      "clamp", x, [lo, hi](S v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](S v, S) { return (v > lo && v < hi) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> scale(const Tensor<S>& x, S c) {
  const std::int64_t n = x.numel();
  Tensor<S> out(x.shape());
  const S* xd = x.data();
  S* od = out.data();
  for (std::int64_t i = 0; i < n; ++i) od[i] = c * xd[i];
  count_macs(static_cast<std::uint64_t>(n));
  count_alloc(static_cast<std::uint64_t>(n));
  auto backward = [n, c](Tensor<S>& o) {
    Tensor<S>& p = o.node->parents[0];
    if (!p.requires_grad()) return;
    const S* g = o.grad();
    S* pg = p.grad();
    for (std::int64_t i = 0; i < n; ++i) pg[i] += c * g[i];
  };
  return detail::finish_op("scale", std::move(out), {x}, std::move(backward));
}

template <typename S>
Tensor<S> neg(const Tensor<S>& x) {
  return scale(x, S(-1));
}

// ---------------------------------------------------------------------------
// Matrix products

/// a is [m x k]; b's leading extent must be k, any trailing extents are
/// treated as flattened columns. Result is [m, b_rest...].
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  require(a.rank() == 2, Error::Kind::dimension, "matmul: left operand must be rank 2");
  require(b.rank() >= 1, Error::Kind::dimension, "matmul: right operand must have rank >= 1");
  const std::int64_t m = a.dim(0);
  const std::int64_t k = a.dim(1);
  require(b.dim(0) == k, Error::Kind::dimension,
          "matmul: inner extents differ: " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  const std::int64_t n = b.numel() / k;

  Shape out_shape = b.shape();
  out_shape[0] = m;
  Tensor<S> out(out_shape);
  detail::gemm_acc(a.data(), false, m, k, b.data(), false, k, n, out.data());
  count_macs(static_cast<std::uint64_t>(m * n * k));
  count_alloc(static_cast<std::uint64_t>(m * n));

  auto backward = [m, k, n](Tensor<S>& o) {
    Tensor<S>& pa = o.node->parents[0];
    Tensor<S>& pb = o.node->parents[1];
    if (pa.requires_grad())
      detail::gemm_acc(o.grad(), false, m, n, pb.data(), true, k, n, pa.grad());
    if (pb.requires_grad())
      detail::gemm_acc(pa.data(), true, m, k, o.grad(), false, m, n, pb.grad());
  };
  return detail::finish_op("matmul", std::move(out), {a, b}, std::move(backward));
}

/// Per-batch product over the leading axis: a is [B, p, q], b is [B, r, s];
/// each batch computes opA(a_b) * opB(b_b). transA && transB is unsupported.
template <typename S>
Tensor<S> batched_matmul(const Tensor<S>& a, const Tensor<S>& b, bool trans_a = false,
                         bool trans_b = false) {
  require(a.rank() == 3 && b.rank() == 3, Error::Kind::dimension,
          "batched_matmul expects rank-3 operands");
  require(a.dim(0) == b.dim(0), Error::Kind::dimension, "batched_matmul: batch extents differ");
  require(!(trans_a && trans_b), Error::Kind::usage,
          "batched_matmul: simultaneous transposes unsupported");
  const std::int64_t batch = a.dim(0);
  const std::int64_t p = a.dim(1), q = a.dim(2);
  const std::int64_t r = b.dim(1), s = b.dim(2);
  const std::int64_t mm = trans_a ? q : p;
  const std::int64_t kk = trans_a ? p : q;
  const std::int64_t kb = trans_b ? s : r;
  const std::int64_t nn = trans_b ? r : s;
  require(kk == kb, Error::Kind::dimension, "batched_matmul: inner extents differ");

  Tensor<S> out(Shape{batch, mm, nn});
  for (std::int64_t bi = 0; bi < batch; ++bi) {
    detail::gemm_acc(a.data() + bi * p * q, trans_a, p, q, b.data() + bi * r * s, trans_b, r,
                     s, out.data() + bi * mm * nn);
  }
  count_macs(static_cast<std::uint64_t>(batch * mm * nn * kk));
  count_alloc(static_cast<std::uint64_t>(batch * mm * nn));

  auto backward = [batch, p, q, r, s, mm, nn, trans_a, trans_b](Tensor<S>& o) {
    Tensor<S>& pa = o.node->parents[0];
    Tensor<S>& pb = o.node->parents[1];
    for (std::int64_t bi = 0; bi < batch; ++bi) {
      const S* ga = o.grad() + bi * mm * nn;
      const S* av = pa.data() + bi * p * q;
      const S* bv = pb.data() + bi * r * s;
      if (pa.requires_grad()) {
        S* da = pa.grad() + bi * p * q;
        if (!trans_a && !trans_b)
          detail::gemm_acc(ga, false, mm, nn, bv, true, r, s, da);
        else if (trans_a)
          detail::gemm_acc(bv, false, r, s, ga, true, mm, nn, da);
        else  // trans_b
          detail::gemm_acc(ga, false, mm, nn, bv, false, r, s, da);
      }
      if (pb.requires_grad()) {
        S* db = pb.grad() + bi * r * s;
        if (!trans_a && !trans_b)
          detail::gemm_acc(av, true, p, q, ga, false, mm, nn, db);
        else if (trans_a)
          detail::gemm_acc(av, false, p, q, ga, false, mm, nn, db);
        else  // trans_b
          detail::gemm_acc(ga, true, mm, nn, av, false, p, q, db);
      }
    }
  };
  return detail::finish_op("batched_matmul", std::move(out), {a, b}, std::move(backward));
}

/// Affine map over the last axis: x is [..., K], w is [Q, K], optional bias
/// [Q]; result is [..., Q]. Shared across all leading positions.
template <typename S>
Tensor<S> affine_last(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias = {}) {
  require(x.rank() >= 1 && w.rank() == 2, Error::Kind::dimension,
          "affine_last: bad operand ranks");
  const std::int64_t k = x.dim(x.rank() - 1);
  require(w.dim(1) == k, Error::Kind::dimension,
          "affine_last: weight " + shape_str(w.shape()) + " does not match input last axis " +
              std::to_string(k));
  const std::int64_t qdim = w.dim(0);
  const bool has_bias = bias.defined();
  if (has_bias)
    require(bias.rank() == 1 && bias.dim(0) == qdim, Error::Kind::dimension,
            "affine_last: bias shape mismatch");
  const std::int64_t pcount = x.numel() / k;

  Shape out_shape = x.shape();
  out_shape.back() = qdim;
  Tensor<S> out(out_shape);
  const S* xd = x.data();
  const S* wd = w.data();
  S* od = out.data();
  for (std::int64_t pi = 0; pi < pcount; ++pi) {
    const S* xrow = xd + pi * k;
    S* orow = od + pi * qdim;
    for (std::int64_t qi = 0; qi < qdim; ++qi) {
      const S* wrow = wd + qi * k;
      S acc = has_bias ? bias.data()[qi] : S(0);
      for (std::int64_t ki = 0; ki < k; ++ki) acc += xrow[ki] * wrow[ki];
      orow[qi] = acc;
    }
  }
  count_macs(static_cast<std::uint64_t>(pcount * qdim * k));
  if (has_bias) count_adds(static_cast<std::uint64_t>(pcount * qdim));
  count_alloc(static_cast<std::uint64_t>(pcount * qdim));

  auto backward = [pcount, qdim, k, has_bias](Tensor<S>& o) {
    Tensor<S>& px = o.node->parents[0];
    Tensor<S>& pw = o.node->parents[1];
    const S* g = o.grad();
    for (std::int64_t pi = 0; pi < pcount; ++pi) {
      const S* grow = g + pi * qdim;
      if (px.requires_grad()) {
        S* dx = px.grad() + pi * k;
        for (std::int64_t qi = 0; qi < qdim; ++qi) {
          const S gv = grow[qi];
          if (gv == S(0)) continue;
          const S* wrow = pw.data() + qi * k;
          for (std::int64_t ki = 0; ki < k; ++ki) dx[ki] += gv * wrow[ki];
        }
      }
      if (pw.requires_grad()) {
        const S* xrow = px.data() + pi * k;
        for (std::int64_t qi = 0; qi < qdim; ++qi) {
          const S gv = grow[qi];
          if (gv == S(0)) continue;
          S* dw = pw.grad() + qi * k;
          for (std::int64_t ki = 0; ki < k; ++ki) dw[ki] += gv * xrow[ki];
        }
      }
    }
    if (has_bias) {
      Tensor<S>& pbias = o.node->parents[2];
      if (pbias.requires_grad()) {
        S* db = pbias.grad();
        for (std::int64_t pi = 0; pi < pcount; ++pi)
          for (std::int64_t qi = 0; qi < qdim; ++qi) db[qi] += g[pi * qdim + qi];
      }
    }
  };
  std::vector<Tensor<S>> parents = {x, w};
  if (has_bias) parents.push_back(bias);
  return detail::finish_op("affine_last", std::move(out), std::move(parents),
                           std::move(backward));
}

// ---------------------------------------------------------------------------
// Convolution

/// Valid (no padding) cross-correlation. x is [Cin, L], w is [Cout, Cin, M].
template <typename S>
Tensor<S> conv1d(const Tensor<S>& x, const Tensor<S>& w, std::int64_t stride,
                 const Tensor<S>& bias = {}) {
  require(x.rank() == 2 && w.rank() == 3, Error::Kind::dimension, "conv1d: bad operand ranks");
  require(stride >= 1, Error::Kind::usage, "conv1d: stride must be >= 1");
  const std::int64_t cin = x.dim(0), len = x.dim(1);
  const std::int64_t cout = w.dim(0), m = w.dim(2);
  require(w.dim(1) == cin, Error::Kind::dimension, "conv1d: channel extents differ");
  require(len >= m, Error::Kind::dimension,
          "conv1d: input length " + std::to_string(len) + " shorter than kernel " +
              std::to_string(m));
  const bool has_bias = bias.defined();
  if (has_bias)
    require(bias.rank() == 1 && bias.dim(0) == cout, Error::Kind::dimension,
            "conv1d: bias shape mismatch");
  const std::int64_t lp = (len - m) / stride + 1;

  Tensor<S> out(Shape{cout, lp});
  const S* xd = x.data();
  const S* wd = w.data();
  S* od = out.data();
  for (std::int64_t co = 0; co < cout; ++co) {
    for (std::int64_t ol = 0; ol < lp; ++ol) {
      S acc = has_bias ? bias.data()[co] : S(0);
      const std::int64_t base = ol * stride;
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const S* xrow = xd + ci * len + base;
        const S* wrow = wd + (co * cin + ci) * m;
        for (std::int64_t mi = 0; mi < m; ++mi) acc += wrow[mi] * xrow[mi];
      }
      od[co * lp + ol] = acc;
    }
  }
  count_macs(static_cast<std::uint64_t>(cout * lp * cin * m));
  if (has_bias) count_adds(static_cast<std::uint64_t>(cout * lp));
  count_alloc(static_cast<std::uint64_t>(cout * lp));

  auto backward = [cin, len, cout, m, lp, stride, has_bias](Tensor<S>& o) {
    Tensor<S>& px = o.node->parents[0];
    Tensor<S>& pw = o.node->parents[1];
    const S* g = o.grad();
    for (std::int64_t co = 0; co < cout; ++co) {
      for (std::int64_t ol = 0; ol < lp; ++ol) {
        const S gv = g[co * lp + ol];
        if (gv == S(0)) continue;
        const std::int64_t base = ol * stride;
        for (std::int64_t ci = 0; ci < cin; ++ci) {
          const std::int64_t woff = (co * cin + ci) * m;
          const std::int64_t xoff = ci * len + base;
          if (px.requires_grad()) {
            S* dx = px.grad();
            const S* wv = pw.data();
            for (std::int64_t mi = 0; mi < m; ++mi) dx[xoff + mi] += gv * wv[woff + mi];
          }
          if (pw.requires_grad()) {
            S* dw = pw.grad();
            const S* xv = px.data();
            for (std::int64_t mi = 0; mi < m; ++mi) dw[woff + mi] += gv * xv[xoff + mi];
          }
        }
      }
    }
    if (has_bias) {
      Tensor<S>& pbias = o.node->parents[2];
      if (pbias.requires_grad()) {
        S* db = pbias.grad();
        for (std::int64_t co = 0; co < cout; ++co)
          for (std::int64_t ol = 0; ol < lp; ++ol) db[co] += g[co * lp + ol];
      }
    }
  };
  std::vector<Tensor<S>> parents = {x, w};
  if (has_bias) parents.push_back(bias);
  return detail::finish_op("conv1d", std::move(out), std::move(parents), std::move(backward));
}

// ---------------------------------------------------------------------------
// Softmax / layer norm

/// Numerically stable softmax (max subtraction) along `axis`; each slice sums
/// to one.
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  require(axis >= 0 && axis < x.rank(), Error::Kind::usage, "softmax: axis out of range");
  std::int64_t outer = 1, inner = 1;
  const std::int64_t len = x.dim(axis);
  for (int d = 0; d < axis; ++d) outer *= x.dim(d);
  for (int d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);

  Tensor<S> out(x.shape());
  const S* xd = x.data();
  S* od = out.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      S mx = xd[base];
      for (std::int64_t l = 1; l < len; ++l) mx = std::max(mx, xd[base + l * inner]);
      S sum = S(0);
      for (std::int64_t l = 0; l < len; ++l) {
        const S e = std::exp(xd[base + l * inner] - mx);
        od[base + l * inner] = e;
        sum += e;
      }
      const S inv = S(1) / sum;
      for (std::int64_t l = 0; l < len; ++l) od[base + l * inner] *= inv;
    }
  }
  count_softmax(static_cast<std::uint64_t>(x.numel()));
  count_alloc(static_cast<std::uint64_t>(x.numel()));

  auto backward = [outer, len, inner](Tensor<S>& o) {
    Tensor<S>& p = o.node->parents[0];
    if (!p.requires_grad()) return;
    const S* g = o.grad();
    const S* y = o.data();
    S* pg = p.grad();
    for (std::int64_t ou = 0; ou < outer; ++ou) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = ou * len * inner + in;
        S dot = S(0);
        for (std::int64_t l = 0; l < len; ++l) {
          const std::int64_t i = base + l * inner;
          dot += g[i] * y[i];
        }
        for (std::int64_t l = 0; l < len; ++l) {
          const std::int64_t i = base + l * inner;
          pg[i] += y[i] * (g[i] - dot);
        }
      }
    }
  };
  return detail::finish_op("softmax", std::move(out), {x}, std::move(backward));
}

namespace detail {

/// Maps a flat index to (group, position-within-normalized-axes) for layer
/// norm over an arbitrary axis subset.
struct LnIndexer {
  Shape shape;
  std::vector<int> axes;  // sorted
  std::int64_t group_count = 1;
  std::int64_t pos_count = 1;
  bool axis0_only = false;
  std::int64_t inner = 1;  // fast path: numel / dim0

  LnIndexer(const Shape& s, std::vector<int> ax) : shape(s), axes(std::move(ax)) {
    require(shape.size() <= 8, Error::Kind::usage, "layer_norm: rank > 8 unsupported");
    for (int a : axes) pos_count *= shape[static_cast<std::size_t>(a)];
    group_count = shape_numel(shape) / pos_count;
    axis0_only = axes.size() == 1 && axes[0] == 0;
    inner = shape_numel(shape) / shape[0];
  }

  void locate(std::int64_t flat, std::int64_t& group, std::int64_t& pos) const {
    if (axis0_only) {
      group = flat % inner;
      pos = flat / inner;
      return;
    }
    group = 0;
    pos = 0;
    std::int64_t rem = flat;
    std::int64_t coords[8];
    const int r = static_cast<int>(shape.size());
    for (int d = r - 1; d >= 0; --d) {
      coords[d] = rem % shape[static_cast<std::size_t>(d)];
      rem /= shape[static_cast<std::size_t>(d)];
    }
    std::size_t k = 0;
    for (int d = 0; d < r; ++d) {
      if (k < axes.size() && axes[k] == d) {
        pos = pos * shape[static_cast<std::size_t>(d)] + coords[d];
        ++k;
      } else {
        group = group * shape[static_cast<std::size_t>(d)] + coords[d];
      }
    }
  }
};

}  // namespace detail

/// Normalizes to zero mean / unit variance over the given axes, then applies
/// a learned per-position affine. gain/bias are shaped like the normalized
/// extents (for the usual feature-axis case: [D]).
template <typename S>
Tensor<S> layer_norm(const Tensor<S>& x, std::vector<int> axes, const Tensor<S>& gain,
                     const Tensor<S>& bias, S eps = S(1e-5)) {
  require(!axes.empty(), Error::Kind::usage, "layer_norm: no axes given");
  std::sort(axes.begin(), axes.end());
  for (std::size_t i = 0; i < axes.size(); ++i) {
    require(axes[i] >= 0 && axes[i] < x.rank(), Error::Kind::usage,
            "layer_norm: axis out of range");
    require(i == 0 || axes[i] != axes[i - 1], Error::Kind::usage,
            "layer_norm: duplicate axis");
  }
  Shape norm_shape;
  for (int a : axes) norm_shape.push_back(x.dim(a));
  require(gain.shape() == norm_shape && bias.shape() == norm_shape, Error::Kind::dimension,
          "layer_norm: gain/bias must be shaped " + shape_str(norm_shape));

  detail::LnIndexer ix(x.shape(), axes);
  const std::int64_t n = x.numel();
  const std::int64_t groups = ix.group_count;
  const S group_size = static_cast<S>(ix.pos_count);

  std::vector<S> mean(static_cast<std::size_t>(groups), S(0));
  std::vector<S> inv_std(static_cast<std::size_t>(groups), S(0));
  const S* xd = x.data();
  {
    std::int64_t g, p;
    for (std::int64_t i = 0; i < n; ++i) {
      ix.locate(i, g, p);
      mean[static_cast<std::size_t>(g)] += xd[i];
    }
    for (auto& m : mean) m /= group_size;
    for (std::int64_t i = 0; i < n; ++i) {
      ix.locate(i, g, p);
      const S d = xd[i] - mean[static_cast<std::size_t>(g)];
      inv_std[static_cast<std::size_t>(g)] += d * d;
    }
    for (auto& v : inv_std) v = S(1) / std::sqrt(v / group_size + eps);
  }

  Tensor<S> out(x.shape());
  S* od = out.data();
  {
    std::int64_t g, p;
    for (std::int64_t i = 0; i < n; ++i) {
      ix.locate(i, g, p);
      const S xhat = (xd[i] - mean[static_cast<std::size_t>(g)]) *
                     inv_std[static_cast<std::size_t>(g)];
      od[i] = gain.data()[p] * xhat + bias.data()[p];
    }
  }
  count_ln(static_cast<std::uint64_t>(n));
  count_alloc(static_cast<std::uint64_t>(n));

  auto backward = [ix, n, groups, group_size, mean, inv_std](Tensor<S>& o) {
    Tensor<S>& px = o.node->parents[0];
    Tensor<S>& pgain = o.node->parents[1];
    Tensor<S>& pbias = o.node->parents[2];
    const S* g = o.grad();
    const S* xv = px.data();
    const S* gainv = pgain.data();

    std::vector<S> sum_gy(static_cast<std::size_t>(groups), S(0));
    std::vector<S> sum_gy_xhat(static_cast<std::size_t>(groups), S(0));
    std::int64_t gr, p;
    for (std::int64_t i = 0; i < n; ++i) {
      ix.locate(i, gr, p);
      const S xhat = (xv[i] - mean[static_cast<std::size_t>(gr)]) *
                     inv_std[static_cast<std::size_t>(gr)];
      const S gy = g[i] * gainv[p];
      sum_gy[static_cast<std::size_t>(gr)] += gy;
      sum_gy_xhat[static_cast<std::size_t>(gr)] += gy * xhat;
      if (pgain.requires_grad()) pgain.grad()[p] += g[i] * xhat;
      if (pbias.requires_grad()) pbias.grad()[p] += g[i];
    }
    if (px.requires_grad()) {
      S* dx = px.grad();
      for (std::int64_t i = 0; i < n; ++i) {
        ix.locate(i, gr, p);
        const std::size_t gi = static_cast<std::size_t>(gr);
        const S xhat = (xv[i] - mean[gi]) * inv_std[gi];
        const S gy = g[i] * gainv[p];
        dx[i] += inv_std[gi] *
                 (gy - sum_gy[gi] / group_size - xhat * sum_gy_xhat[gi] / group_size);
      }
    }
  };
  return detail::finish_op("layer_norm", std::move(out), {x, gain, bias},
                           std::move(backward));
}

/// Feature-axis layer norm (axis 0), the form every normalization site in the
/// network uses.
template <typename S>
Tensor<S> layer_norm_features(const Tensor<S>& x, const Tensor<S>& gain,
                              const Tensor<S>& bias, S eps = S(1e-5)) {
  return layer_norm(x, {0}, gain, bias, eps);
}

// ---------------------------------------------------------------------------
// Shape surgery

/// Free: shares storage, only the shape changes.
template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape shape) {
  Tensor<S> out = x.with_shape(std::move(shape));
  // Gradients flow through shared storage, so the record is a pass-through.
  return detail::finish_op("reshape", std::move(out), {x}, [](Tensor<S>&) {});
}

/// Copies into the axis order given by perm (out axis d = in axis perm[d]).
template <typename S>
Tensor<S> permute(const Tensor<S>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  require(static_cast<int>(perm.size()) == r, Error::Kind::usage, "permute: rank mismatch");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int d : perm) {
    require(d >= 0 && d < r && !seen[static_cast<std::size_t>(d)], Error::Kind::usage,
            "permute: invalid permutation");
    seen[static_cast<std::size_t>(d)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(r));
  for (int d = 0; d < r; ++d)
    out_shape[static_cast<std::size_t>(d)] = x.dim(perm[static_cast<std::size_t>(d)]);

  // out_stride_for_in_axis[a] = stride in the output of input axis a.
  std::vector<std::int64_t> out_strides(static_cast<std::size_t>(r), 1);
  for (int d = r - 2; d >= 0; --d)
    out_strides[static_cast<std::size_t>(d)] =
        out_strides[static_cast<std::size_t>(d + 1)] * out_shape[static_cast<std::size_t>(d + 1)];
  std::vector<std::int64_t> map(static_cast<std::size_t>(r));
  for (int d = 0; d < r; ++d)
    map[static_cast<std::size_t>(perm[static_cast<std::size_t>(d)])] =
        out_strides[static_cast<std::size_t>(d)];

  const std::int64_t n = x.numel();
  Tensor<S> out(out_shape);
  const S* xd = x.data();
  S* od = out.data();
  const Shape& in_shape = x.shape();
  std::vector<std::int64_t> coord(static_cast<std::size_t>(r), 0);
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t oi = 0;
    for (int d = 0; d < r; ++d) oi += coord[static_cast<std::size_t>(d)] * map[static_cast<std::size_t>(d)];
    od[oi] = xd[i];
    for (int d = r - 1; d >= 0; --d) {
      if (++coord[static_cast<std::size_t>(d)] < in_shape[static_cast<std::size_t>(d)]) break;
      coord[static_cast<std::size_t>(d)] = 0;
    }
  }
  count_alloc(static_cast<std::uint64_t>(n));

  auto backward = [n, r, map, in_shape](Tensor<S>& o) {
    Tensor<S>& p = o.node->parents[0];
    if (!p.requires_grad()) return;
    const S* g = o.grad();
    S* pg = p.grad();
    std::vector<std::int64_t> coord(static_cast<std::size_t>(r), 0);
    for (std::int64_t i = 0; i < n; ++i) {
      std::int64_t oi = 0;
      for (int d = 0; d < r; ++d) oi += coord[static_cast<std::size_t>(d)] * map[static_cast<std::size_t>(d)];
      pg[i] += g[oi];
      for (int d = r - 1; d >= 0; --d) {
        if (++coord[static_cast<std::size_t>(d)] < in_shape[static_cast<std::size_t>(d)]) break;
        coord[static_cast<std::size_t>(d)] = 0;
      }
    }
  };
  return detail::finish_op("permute", std::move(out), {x}, std::move(backward));
}

/// Drops the last axis at the given index: [..., L] -> [...].
template <typename S>
Tensor<S> slice_last(const Tensor<S>& x, std::int64_t idx) {
  require(x.rank() >= 2, Error::Kind::usage, "slice_last: rank must be >= 2");
  const std::int64_t l = x.dim(x.rank() - 1);
  require(idx >= 0 && idx < l, Error::Kind::usage, "slice_last: index out of range");
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  const std::int64_t n = shape_numel(out_shape);
  Tensor<S> out(out_shape);
  const S* xd = x.data();
  S* od = out.data();
  for (std::int64_t i = 0; i < n; ++i) od[i] = xd[i * l + idx];
  count_alloc(static_cast<std::uint64_t>(n));
  auto backward = [n, l, idx](Tensor<S>& o) {
    Tensor<S>& p = o.node->parents[0];
    if (!p.requires_grad()) return;
    const S* g = o.grad();
    S* pg = p.grad();
    for (std::int64_t i = 0; i < n; ++i) pg[i * l + idx] += g[i];
  };
  return detail::finish_op("slice_last", std::move(out), {x}, std::move(backward));
}

/// Inverse of slice_last: stacks equal-shaped tensors along a new last axis.
template <typename S>
Tensor<S> stack_last(const std::vector<Tensor<S>>& parts) {
  require(!parts.empty(), Error::Kind::usage, "stack_last: empty input");
  const Shape& base = parts[0].shape();
  for (const auto& p : parts)
    require(p.shape() == base, Error::Kind::dimension, "stack_last: shapes differ");
  const std::int64_t np = static_cast<std::int64_t>(parts.size());
  const std::int64_t inner = shape_numel(base);
  Shape out_shape = base;
  out_shape.push_back(np);
  Tensor<S> out(out_shape);
  S* od = out.data();
  for (std::int64_t pi = 0; pi < np; ++pi) {
    const S* src = parts[static_cast<std::size_t>(pi)].data();
    for (std::int64_t i = 0; i < inner; ++i) od[i * np + pi] = src[i];
  }
  count_alloc(static_cast<std::uint64_t>(inner * np));
  auto backward = [np, inner](Tensor<S>& o) {
    const S* g = o.grad();
    for (std::int64_t pi = 0; pi < np; ++pi) {
      Tensor<S>& p = o.node->parents[static_cast<std::size_t>(pi)];
      if (!p.requires_grad()) continue;
      S* pg = p.grad();
      for (std::int64_t i = 0; i < inner; ++i) pg[i] += g[i * np + pi];
    }
  };
  return detail::finish_op("stack_last", std::move(out), parts, std::move(backward));
}

/// Concatenates along axis 0; trailing shapes must agree.
template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  require(!parts.empty(), Error::Kind::usage, "concat_rows: empty input");
  Shape rest(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    Shape prest(p.shape().begin() + 1, p.shape().end());
    require(prest == rest, Error::Kind::dimension, "concat_rows: trailing shapes differ");
    rows += p.dim(0);
  }
  Shape out_shape = parts[0].shape();
  out_shape[0] = rows;
  Tensor<S> out(out_shape);
  S* od = out.data();
  std::int64_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data(), p.data() + p.numel(), od + off);
    off += p.numel();
  }
  count_alloc(static_cast<std::uint64_t>(out.numel()));
  auto backward = [](Tensor<S>& o) {
    const S* g = o.grad();
    std::int64_t off = 0;
    for (auto& p : o.node->parents) {
      if (p.requires_grad()) {
        S* pg = p.grad();
        for (std::int64_t i = 0; i < p.numel(); ++i) pg[i] += g[off + i];
      }
      off += p.numel();
    }
  };
  return detail::finish_op("concat_rows", std::move(out), parts, std::move(backward));
}

/// Rows [r0, r1) along axis 0 (a contiguous block in row-major layout).
template <typename S>
Tensor<S> slice_rows(const Tensor<S>& x, std::int64_t r0, std::int64_t r1) {
  require(x.rank() >= 1, Error::Kind::usage, "slice_rows: rank must be >= 1");
  require(0 <= r0 && r0 < r1 && r1 <= x.dim(0), Error::Kind::usage,
          "slice_rows: bad row range");
  const std::int64_t inner = x.numel() / x.dim(0);
  Shape out_shape = x.shape();
  out_shape[0] = r1 - r0;
  Tensor<S> out(out_shape);
  std::copy(x.data() + r0 * inner, x.data() + r1 * inner, out.data());
  count_alloc(static_cast<std::uint64_t>(out.numel()));
  auto backward = [r0, inner](Tensor<S>& o) {
    Tensor<S>& p = o.node->parents[0];
    if (!p.requires_grad()) return;
    const S* g = o.grad();
    S* pg = p.grad() + r0 * inner;
    for (std::int64_t i = 0; i < o.numel(); ++i) pg[i] += g[i];
  };
  return detail::finish_op("slice_rows", std::move(out), {x}, std::move(backward));
}

/// Full reduction to a [1] scalar tensor.
template <typename S>
Tensor<S> sum_all(const Tensor<S>& x) {
  S acc = S(0);
  const S* xd = x.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += xd[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  count_adds(static_cast<std::uint64_t>(x.numel()));
  count_alloc(1);
  auto backward = [](Tensor<S>& o) {
    Tensor<S>& p = o.node->parents[0];
    if (!p.requires_grad()) return;
    const S g = o.grad()[0];
    S* pg = p.grad();
    for (std::int64_t i = 0; i < p.numel(); ++i) pg[i] += g;
  };
  return detail::finish_op("sum_all", std::move(out), {x}, std::move(backward));
}

/// Inverted-scale dropout; identity when not training or rate is zero.
template <typename S>
Tensor<S> dropout(const Tensor<S>& x, double rate, Rng& rng, bool training) {
  require(rate >= 0.0 && rate < 1.0, Error::Kind::usage, "dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) return x;
  const std::int64_t n = x.numel();
  const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<S>>(static_cast<std::size_t>(n));
  Tensor<S> out(x.shape());
  const S* xd = x.data();
  S* od = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const S m = rng.uniform() < rate ? S(0) : keep_scale;
    (*mask)[static_cast<std::size_t>(i)] = m;
    od[i] = xd[i] * m;
  }
  count_macs(static_cast<std::uint64_t>(n));
  count_alloc(static_cast<std::uint64_t>(n));
  auto backward = [n, mask](Tensor<S>& o) {
    Tensor<S>& p = o.node->parents[0];
    if (!p.requires_grad()) return;
    const S* g = o.grad();
    S* pg = p.grad();
    for (std::int64_t i = 0; i < n; ++i) pg[i] += g[i] * (*mask)[static_cast<std::size_t>(i)];
  };
  return detail::finish_op("dropout", std::move(out), {x}, std::move(backward));
}

}  // namespace galr
