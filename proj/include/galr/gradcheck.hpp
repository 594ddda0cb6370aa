#pragma once

#include <functional>
#include <string>
#include <vector>

#include "galr/training.hpp"

namespace galr {

/// Central finite-difference verification of reverse-mode gradients.
///
/// `fn` must rebuild the scalar loss from scratch on every call, reading the
/// leaf tensors' current values (leaves share storage, so perturbing them in
/// place is visible to the rebuild). The oracle side only ever evaluates the
/// forward pass, so it is independent of every backward rule it checks.
struct GradCheckResult {
  double max_rel_err = 0.0;
  std::string worst_leaf;
  std::int64_t worst_index = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

template <typename F>
GradCheckResult gradcheck(F&& fn, std::vector<std::pair<std::string, Tensor<double>>> leaves,
                          double step = 1e-5) {
  for (auto& [name, t] : leaves) {
    t.set_requires_grad(true);
    t.ensure_grad();
    t.zero_grad();
  }

  Tensor<double> loss = fn();
  require(loss.numel() == 1, Error::Kind::usage, "gradcheck: fn must return a scalar");
  backward(loss);

  GradCheckResult res;
  for (auto& [name, t] : leaves) {
    for (std::int64_t i = 0; i < t.numel(); ++i) {
      const double saved = t.data()[i];
      double fplus, fminus;
      {
        NoGradGuard ng;
        t.data()[i] = saved + step;
        fplus = fn().item();
        t.data()[i] = saved - step;
        fminus = fn().item();
        t.data()[i] = saved;
      }
      const double numeric = (fplus - fminus) / (2.0 * step);
      const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
      const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-6});
      const double rel = std::abs(numeric - analytic) / denom;
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_leaf = name;
        res.worst_index = i;
        res.analytic = analytic;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// The f64 verification suite: every differentiable operation on small random
// shapes, the block layers, and the full toy separator with its PIT loss.

struct SuiteEntry {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 1e-4;
  bool passed() const { return max_rel_err <= tolerance; }
};

namespace gradcheck_detail {

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = rng.uniform(lo, hi);
  return t;
}

/// Random values bounded away from zero (for kinked or singular ops).
inline Tensor<double> random_offzero(Shape shape, Rng& rng, double min_abs = 0.2) {
  Tensor<double> t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    const double mag = rng.uniform(min_abs, 1.0);
    t.data()[i] = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

/// Scalar loss with non-uniform weighting so gradients are informative. The
/// weights are a pure function of the element index, so repeated evaluations
/// (the finite-difference probes) see the identical function.
inline Tensor<double> weighted_sum(const Tensor<double>& x) {
  Tensor<double> w(x.shape());
  for (std::int64_t i = 0; i < w.numel(); ++i) {
    const std::uint64_t h = (static_cast<std::uint64_t>(i) + 1) * 2654435761ull;
    w.data()[i] = 0.5 + static_cast<double>(h % 1024) / 1024.0;
  }
  return sum_all(mul(x, w));
}

}  // namespace gradcheck_detail

/// Runs the whole finite-difference suite; per-op entries carry a 1e-4
/// tolerance, whole-network entries 1e-3.
inline std::vector<SuiteEntry> run_gradient_suite(std::uint64_t seed = 42) {
  using gradcheck_detail::random_offzero;
  using gradcheck_detail::random_tensor;
  using gradcheck_detail::weighted_sum;
  std::vector<SuiteEntry> results;
  Rng rng(seed);

  auto check = [&](const std::string& name,
                   std::vector<std::pair<std::string, Tensor<double>>> leaves,
                   std::function<Tensor<double>()> fn, double tol = 1e-4) {
    auto res = gradcheck(fn, std::move(leaves), 1e-5);
    results.push_back({name, res.max_rel_err, tol});
  };

  {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({4, 5}, rng);
    check("matmul", {{"a", a}, {"b", b}}, [&] { return weighted_sum(matmul(a, b)); });
  }
  {
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({2, 3, 5}, rng);
    check("batched_matmul_transA", {{"a", a}, {"b", b}},
          [&] { return weighted_sum(batched_matmul(a, b, true, false)); });
  }
  {
    auto a = random_tensor({2, 3, 4}, rng);
    auto b = random_tensor({2, 5, 4}, rng);
    check("batched_matmul_transB", {{"a", a}, {"b", b}},
          [&] { return weighted_sum(batched_matmul(a, b, false, true)); });
  }
  {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_tensor({3}, rng);
    check("add_broadcast", {{"a", a}, {"b", b}}, [&] { return weighted_sum(add(a, b)); });
    check("sub", {{"a", a}, {"b", b}}, [&] { return weighted_sum(sub(a, b)); });
    check("mul_broadcast", {{"a", a}, {"b", b}}, [&] { return weighted_sum(mul(a, b)); });
  }
  {
    auto a = random_tensor({3, 4}, rng);
    auto b = random_offzero({3, 4}, rng, 0.4);
    check("div", {{"a", a}, {"b", b}}, [&] { return weighted_sum(div(a, b)); });
  }
  {
    auto x = random_offzero({4, 5}, rng);
    check("relu", {{"x", x}}, [&] { return weighted_sum(relu(x)); });
    check("scale", {{"x", x}}, [&] { return weighted_sum(scale(x, 1.7)); });
  }
  {
    auto x = random_tensor({4, 5}, rng);
    check("sigmoid", {{"x", x}}, [&] { return weighted_sum(sigmoid(x)); });
    check("tanh", {{"x", x}}, [&] { return weighted_sum(tanh(x)); });
    check("exp", {{"x", x}}, [&] { return weighted_sum(exp(x)); });
    check("softmax", {{"x", x}}, [&] { return weighted_sum(softmax(x, 1)); });
  }
  {
    auto x = random_tensor({4, 5}, rng, 0.5, 2.0);
    check("log", {{"x", x}}, [&] { return weighted_sum(log(x)); });
  }
  {
    auto x = random_offzero({4, 5}, rng, 0.3);  // away from the clamp edges at +-2
    check("clamp", {{"x", x}}, [&] { return weighted_sum(clamp(x, -2.0, 2.0)); });
  }
  {
    auto x = random_tensor({5, 3, 4}, rng);
    auto gain = random_tensor({5}, rng, 0.5, 1.5);
    auto bias = random_tensor({5}, rng);
    check("layer_norm", {{"x", x}, {"gain", gain}, {"bias", bias}}, [&] {
      return weighted_sum(layer_norm_features(x, gain, bias));
    }, 1e-4);
  }
  {
    auto x = random_tensor({2, 12}, rng);
    auto w = random_tensor({3, 2, 4}, rng);
    auto b = random_tensor({3}, rng);
    check("conv1d", {{"x", x}, {"w", w}, {"b", b}},
          [&] { return weighted_sum(conv1d(x, w, 2, b)); });
  }
  {
    auto x = random_tensor({3, 4, 6}, rng);
    auto w = random_tensor({2, 6}, rng);
    auto b = random_tensor({2}, rng);
    check("affine_last", {{"x", x}, {"w", w}, {"b", b}},
          [&] { return weighted_sum(affine_last(x, w, b)); });
  }
  {
    auto x = random_tensor({2, 3, 4}, rng);
    check("permute", {{"x", x}},
          [&] { return weighted_sum(permute(x, {2, 0, 1})); });
    check("slice_last", {{"x", x}}, [&] { return weighted_sum(slice_last(x, 2)); });
    check("slice_rows", {{"x", x}}, [&] { return weighted_sum(slice_rows(x, 0, 1)); });
    check("reshape", {{"x", x}}, [&] { return weighted_sum(reshape(x, {6, 4})); });
    check("sum_all", {{"x", x}}, [&] { return sum_all(x); });
  }
  {
    auto a = random_tensor({2, 3}, rng);
    auto b = random_tensor({2, 3}, rng);
    check("stack_last", {{"a", a}, {"b", b}},
          [&] { return weighted_sum(stack_last<double>({a, b})); });
    check("concat_rows", {{"a", a}, {"b", b}},
          [&] { return weighted_sum(concat_rows<double>({a, b})); });
  }
  {
    auto x = random_tensor({3, 10}, rng);
    check("segment", {{"x", x}}, [&] { return weighted_sum(segment_features(x, 4)); });
  }
  {
    auto t = random_tensor({3, segment_count(10, 4), 4}, rng);
    check("merge_segments", {{"t", t}},
          [&] { return weighted_sum(merge_segments(t, 10, false)); });
    check("merge_segments_normalized", {{"t", t}},
          [&] { return weighted_sum(merge_segments(t, 10, true)); });
  }
  {
    auto frames = random_tensor({4, 5}, rng);
    check("overlap_add", {{"frames", frames}},
          [&] { return weighted_sum(overlap_add(frames, 2, false, 10)); });
    check("overlap_add_normalized", {{"frames", frames}},
          [&] { return weighted_sum(overlap_add(frames, 2, true, 10)); });
  }
  {
    Rng init(seed + 1);
    auto lstm = BiLstm<double>::init(3, 2, init);
    auto x = random_tensor({3, 4}, rng);
    std::vector<std::pair<std::string, Tensor<double>>> leaves = {
        {"x", x},           {"f.w_ih", lstm.fwd.w_ih}, {"f.w_hh", lstm.fwd.w_hh},
        {"f.b", lstm.fwd.bias}, {"b.w_ih", lstm.bwd.w_ih}, {"b.w_hh", lstm.bwd.w_hh},
        {"b.b", lstm.bwd.bias}};
    check("bilstm", leaves, [&] { return weighted_sum(bilstm_forward(x, lstm)); });
  }
  {
    auto est = random_tensor({40}, rng);
    std::vector<double> target(40);
    Rng trng(seed + 2);
    for (auto& v : target) v = trng.uniform(-1.0, 1.0);
    check("si_snr", {{"est", est}}, [&] { return si_snr_graph(est, target); });
  }
  {
    // Full toy separator with the PIT SI-SNR loss, all parameters checked.
    HyperParams hp;
    hp.feature_dim = 8;
    hp.window = 4;
    hp.segment_size = 8;
    hp.low_dim = 4;
    hp.hidden = 4;
    hp.heads = 2;
    hp.num_blocks = 1;
    hp.num_sources = 2;
    hp.dropout = 0.0;
    auto model = SeparatorModel<double>::init(hp, seed + 3);
    auto data = gen_synthetic(seed + 4, 1, 0.025, SyntheticKind::disjoint_band_noise);
    std::vector<std::vector<double>> targets;
    for (const auto& s : data[0].sources) targets.push_back(s.samples);
    std::vector<std::pair<std::string, Tensor<double>>> leaves;
    for (std::size_t i = 0; i < model.params.size(); ++i) leaves.push_back(model.params.item(i));
    check(
        "separator_end_to_end", leaves,
        [&] {
          ForwardContext<double> ctx;
          auto est = forward_sources(model, data[0].mixture, ctx);
          return pit_loss(est, targets).first;
        },
        1e-3);
  }
  return results;
}

}  // namespace galr
