#pragma once

#include <algorithm>
#include <limits>
#include <numeric>
#include <ostream>
#include <vector>

#include "galr/separator.hpp"

namespace galr {

// ---------------------------------------------------------------------------
// Scale-invariant source-to-noise ratio

/// Loss-mode clamp: the energy ratio is limited to [1e-3, 1e3], i.e. +-30 dB,
/// so exact reconstructions do not blow up the objective. Metric mode is
/// unclamped.
inline constexpr double kSiSnrClampDb = 30.0;

struct SiSnrOptions {
  /// The projection formula is applied literally by default; enabling this
  /// removes the mean of both signals first, matching the zero-mean variant
  /// some toolkits use.
  bool zero_mean = false;
};

/// Raw metric in dB (unclamped): 10*log10(|proj|^2 / |est - proj|^2) where
/// proj is the projection of the estimate onto the target line. A zero
/// estimate yields -inf; an exact reconstruction yields +inf.
inline double si_snr(const std::vector<double>& estimate, const std::vector<double>& target,
                     const SiSnrOptions& opts = {}) {
  require(estimate.size() == target.size(), Error::Kind::dimension,
          "si_snr: signal lengths differ");
  require(!estimate.empty(), Error::Kind::usage, "si_snr: empty signals");
  std::vector<double> e = estimate, t = target;
  if (opts.zero_mean) {
    const double me = std::accumulate(e.begin(), e.end(), 0.0) / static_cast<double>(e.size());
    const double mt = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
    for (auto& v : e) v -= me;
    for (auto& v : t) v -= mt;
  }
  double tt = 0.0, te = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    tt += t[i] * t[i];
    te += t[i] * e[i];
  }
  require(tt > 0.0, Error::Kind::input, "si_snr: target signal is all zero");
  const double coef = te / tt;
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double p = coef * t[i];
    const double r = e[i] - p;
    num += p * p;
    den += r * r;
  }
  if (num == 0.0) return -std::numeric_limits<double>::infinity();
  if (den == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(num / den);
}

/// Differentiable SI-SNR in dB with the loss-mode clamp. The target is a
/// constant; gradients flow through the estimate only.
template <typename S>
Tensor<S> si_snr_graph(const Tensor<S>& estimate, const std::vector<S>& target,
                       const SiSnrOptions& opts = {}) {
  const std::int64_t n = estimate.numel();
  require(n == static_cast<std::int64_t>(target.size()), Error::Kind::dimension,
          "si_snr: signal lengths differ");
  std::vector<S> t = target;
  if (opts.zero_mean) {
    const S mt = std::accumulate(t.begin(), t.end(), S(0)) / static_cast<S>(t.size());
    for (auto& v : t) v -= mt;
  }
  double tt_d = 0.0;
  for (const S v : t) tt_d += static_cast<double>(v) * static_cast<double>(v);
  require(tt_d > 0.0, Error::Kind::input, "si_snr: target signal is all zero");

  Tensor<S> e = reshape(estimate, {n});
  if (opts.zero_mean) {
    Tensor<S> mean_e = scale(sum_all(e), static_cast<S>(1.0 / static_cast<double>(n)));
    e = sub(e, mean_e);
  }
  Tensor<S> t_const = Tensor<S>::from(std::move(t), {n});
  Tensor<S> coef = scale(sum_all(mul(t_const, e)), static_cast<S>(1.0 / tt_d));
  Tensor<S> proj = mul(t_const, coef);
  Tensor<S> resid = sub(e, proj);
  Tensor<S> num = sum_all(mul(proj, proj));
  Tensor<S> den = clamp(sum_all(mul(resid, resid)), static_cast<S>(1e-12),
                        std::numeric_limits<S>::max());
  Tensor<S> ratio = clamp(div(num, den), static_cast<S>(1e-3), static_cast<S>(1e3));
  // 10*log10(x) = (10/ln 10) * ln(x)
  return scale(log(ratio), static_cast<S>(10.0 / 2.302585092994045684));
}

// ---------------------------------------------------------------------------
// Permutation-invariant training loss

struct PitResult {
  std::vector<int> permutation;  // estimate c is matched to target permutation[c]
  double value = 0.0;            // loss value (mean negative SI-SNR, dB)
};

/// Loss = min over source assignments of the mean negative SI-SNR. The
/// assignment is picked by value and the returned graph covers only the
/// selected pairs, so gradients flow through the best permutation.
/// Assignments are enumerated exactly; C is limited to 5.
template <typename S>
std::pair<Tensor<S>, PitResult> pit_loss(const std::vector<Tensor<S>>& estimates,
                                         const std::vector<std::vector<S>>& targets,
                                         const SiSnrOptions& opts = {}) {
  const int c = static_cast<int>(estimates.size());
  require(c >= 1 && c == static_cast<int>(targets.size()), Error::Kind::usage,
          "pit_loss: estimate/target counts differ");
  require(c <= 5, Error::Kind::usage, "pit_loss: exhaustive assignment limited to C <= 5");

  std::vector<std::vector<Tensor<S>>> pair_snr(static_cast<std::size_t>(c));
  for (int i = 0; i < c; ++i)
    for (int j = 0; j < c; ++j)
      pair_snr[static_cast<std::size_t>(i)].push_back(
          si_snr_graph(estimates[static_cast<std::size_t>(i)],
                       targets[static_cast<std::size_t>(j)], opts));

  std::vector<int> perm(static_cast<std::size_t>(c));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best = perm;
  double best_sum = -std::numeric_limits<double>::infinity();
  do {
    double sum = 0.0;
    for (int i = 0; i < c; ++i)
      sum += static_cast<double>(
          pair_snr[static_cast<std::size_t>(i)][static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])]
              .item());
    if (sum > best_sum) {
      best_sum = sum;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));

  Tensor<S> total = pair_snr[0][static_cast<std::size_t>(best[0])];
  for (int i = 1; i < c; ++i)
    total = add(total, pair_snr[static_cast<std::size_t>(i)][static_cast<std::size_t>(best[static_cast<std::size_t>(i)])]);
  Tensor<S> loss = scale(total, static_cast<S>(-1.0 / c));
  return {loss, PitResult{best, static_cast<double>(loss.item())}};
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-6;  // decoupled
  double clip_norm = 5.0;      // global l2 clip applied before the update
};

template <typename S>
struct AdamState {
  std::vector<std::vector<S>> m;
  std::vector<std::vector<S>> v;
  std::int64_t step = 0;
};

/// Global gradient norm across every parameter in the store.
template <typename S>
double global_grad_norm(const ParamStore<S>& params) {
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params.item(i).second;
    if (!t.has_grad()) continue;
    for (std::int64_t j = 0; j < t.numel(); ++j) {
      const double g = static_cast<double>(t.grad()[j]);
      sq += g * g;
    }
  }
  return std::sqrt(sq);
}

/// One update: clip the global gradient norm to clip_norm, then Adam with
/// bias correction and decoupled weight decay.
template <typename S>
void adam_step(ParamStore<S>& params, AdamState<S>& state, const AdamConfig& cfg, double lr) {
  require(lr > 0.0, Error::Kind::usage, "adam_step: learning rate must be positive");
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::int64_t n = params.item(i).second.numel();
      state.m[i].assign(static_cast<std::size_t>(n), S(0));
      state.v[i].assign(static_cast<std::size_t>(n), S(0));
    }
  }
  require(state.m.size() == params.size(), Error::Kind::usage,
          "adam_step: state does not match parameter store");

  if (cfg.clip_norm > 0.0) {
    const double norm = global_grad_norm(params);
    if (norm > cfg.clip_norm) {
      const S factor = static_cast<S>(cfg.clip_norm / norm);
      for (std::size_t i = 0; i < params.size(); ++i) {
        auto& t = params.item(i).second;
        if (!t.has_grad()) continue;
        for (std::int64_t j = 0; j < t.numel(); ++j) t.grad()[j] *= factor;
      }
    }
  }

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params.item(i).second;
    if (!t.has_grad()) continue;
    S* p = t.data();
    const S* g = t.grad();
    S* mi = state.m[i].data();
    S* vi = state.v[i].data();
    for (std::int64_t j = 0; j < t.numel(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = cfg.beta1 * static_cast<double>(mi[j]) + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * static_cast<double>(vi[j]) + (1.0 - cfg.beta2) * gj * gj;
      mi[j] = static_cast<S>(mj);
      vi[j] = static_cast<S>(vj);
      const double mhat = mj / bc1;
      const double vhat = vj / bc2;
      const double decay = cfg.weight_decay * static_cast<double>(p[j]);
      p[j] -= static_cast<S>(lr * (mhat / (std::sqrt(vhat) + cfg.eps) + decay));
    }
  }
}

/// lr(epoch) = initial * 0.96^floor(epoch / 2).
inline double lr_schedule(int epoch, double initial_lr = 1e-3) {
  require(epoch >= 0, Error::Kind::usage, "lr_schedule: epoch must be >= 0");
  return initial_lr * std::pow(0.96, epoch / 2);
}

/// Converged when no lower validation loss has been seen for `patience`
/// consecutive epochs.
struct EarlyStopping {
  int patience = 10;
  double best = std::numeric_limits<double>::infinity();
  int epochs_since_best = 0;

  /// Feed one validation loss; true means stop now.
  bool update(double val_loss) {
    if (val_loss < best) {
      best = val_loss;
      epochs_since_best = 0;
    } else {
      ++epochs_since_best;
    }
    return epochs_since_best >= patience;
  }
};

// ---------------------------------------------------------------------------
// Synthetic data

enum class SyntheticKind { disjoint_band_noise, sinusoid_pair };

struct MixtureExample {
  Waveform mixture;
  std::vector<Waveform> sources;  // already SNR-scaled; mixture is their exact sum
  double snr_db = 0.0;
};

namespace detail {

/// Random-phase sum of sinusoids confined to [f_lo, f_hi], unit peak.
inline std::vector<double> band_tones(Rng& rng, std::int64_t len, int rate, double f_lo,
                                      double f_hi, int tones) {
  std::vector<double> s(static_cast<std::size_t>(len), 0.0);
  for (int i = 0; i < tones; ++i) {
    const double f = rng.uniform(f_lo, f_hi);
    const double amp = rng.uniform(0.5, 1.0);
    const double phase = rng.uniform(0.0, 6.283185307179586);
    const double w = 6.283185307179586 * f / rate;
    for (std::int64_t t = 0; t < len; ++t)
      s[static_cast<std::size_t>(t)] += amp * std::sin(w * static_cast<double>(t) + phase);
  }
  double peak = 0.0;
  for (double v : s) peak = std::max(peak, std::abs(v));
  if (peak > 0.0)
    for (double& v : s) v /= peak;
  return s;
}

}  // namespace detail

/// Deterministic stream of synthetic mixtures. Each source occupies its own
/// frequency band, is normalized to unit peak, and the non-reference sources
/// are scaled so the drawn SNR (energy ratio to source 1) holds exactly; the
/// mixture is the exact sample-wise sum of the stored sources.
inline std::vector<MixtureExample> gen_synthetic(std::uint64_t seed, int n, double length_s,
                                                 SyntheticKind kind,
                                                 std::pair<double, double> snr_range = {0.0, 5.0},
                                                 int sample_rate = 8000, int num_sources = 2) {
  require(n >= 1, Error::Kind::usage, "gen_synthetic: need at least one example");
  require(num_sources >= 2, Error::Kind::usage, "gen_synthetic: need at least two sources");
  const auto len = static_cast<std::int64_t>(length_s * sample_rate);
  require(len >= 2, Error::Kind::usage, "gen_synthetic: length too short");

  Rng rng(seed);
  std::vector<MixtureExample> out;
  out.reserve(static_cast<std::size_t>(n));
  // Disjoint bands across [250, 3400] Hz with guard gaps.
  const double band_lo = 250.0, band_hi = 3400.0;
  const double span = (band_hi - band_lo) / num_sources;

  for (int i = 0; i < n; ++i) {
    MixtureExample ex;
    ex.snr_db = rng.uniform(snr_range.first, snr_range.second);
    std::vector<std::vector<double>> srcs;
    for (int c = 0; c < num_sources; ++c) {
      const double lo = band_lo + c * span;
      const double hi = lo + span * 0.8;  // guard gap keeps bands disjoint
      const int tones = kind == SyntheticKind::sinusoid_pair ? 1 : 8;
      srcs.push_back(detail::band_tones(rng, len, sample_rate, lo, hi, tones));
    }
    // Energy of source 1 fixes the reference; later sources are scaled so
    // 10*log10(E_ref / E_c) equals the drawn SNR.
    auto energy = [](const std::vector<double>& s) {
      double e = 0.0;
      for (double v : s) e += v * v;
      return e;
    };
    const double e_ref = energy(srcs[0]);
    for (int c = 1; c < num_sources; ++c) {
      const double g =
          std::sqrt(e_ref / (energy(srcs[static_cast<std::size_t>(c)]) *
                             std::pow(10.0, ex.snr_db / 10.0)));
      for (double& v : srcs[static_cast<std::size_t>(c)]) v *= g;
    }
    std::vector<double> mix(static_cast<std::size_t>(len), 0.0);
    for (const auto& s : srcs)
      for (std::int64_t t = 0; t < len; ++t) mix[static_cast<std::size_t>(t)] += s[static_cast<std::size_t>(t)];
    for (auto& s : srcs) {
      Waveform w;
      w.sample_rate = sample_rate;
      w.samples = std::move(s);
      ex.sources.push_back(std::move(w));
    }
    ex.mixture.sample_rate = sample_rate;
    ex.mixture.samples = std::move(mix);
    out.push_back(std::move(ex));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Metrics

/// SI-SNR improvement of the estimates over the unprocessed mixture, under
/// the best source assignment (unclamped metric mode).
inline double si_snr_improvement(const std::vector<std::vector<double>>& estimates,
                                 const MixtureExample& ex, const SiSnrOptions& opts = {}) {
  const int c = static_cast<int>(estimates.size());
  std::vector<int> perm(static_cast<std::size_t>(c));
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best = perm;
  double best_sum = -std::numeric_limits<double>::infinity();
  do {
    double sum = 0.0;
    for (int i = 0; i < c; ++i)
      sum += si_snr(estimates[static_cast<std::size_t>(i)],
                    ex.sources[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])].samples, opts);
    if (sum > best_sum) {
      best_sum = sum;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  double improvement = 0.0;
  for (int i = 0; i < c; ++i) {
    const auto& src = ex.sources[static_cast<std::size_t>(best[static_cast<std::size_t>(i)])].samples;
    improvement += si_snr(estimates[static_cast<std::size_t>(i)], src, opts) -
                   si_snr(ex.mixture.samples, src, opts);
  }
  return improvement / c;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainSettings {
  int epochs = 50;
  int batch_size = 4;
  std::uint64_t seed = 0;
  double initial_lr = 1e-3;
  int early_stop_patience = 10;
  AdamConfig adam;
  SiSnrOptions si_snr_opts;
  std::ostream* metrics_out = nullptr;  // line-delimited JSON records
  std::ostream* log = nullptr;
};

struct EpochMetrics {
  int epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_si_snri = 0.0;
};

namespace detail {

inline void emit_metric(std::ostream* os, int epoch, const char* split, double loss,
                        double si_snri, bool has_si_snri) {
  if (!os) return;
  (*os) << "{\"epoch\":" << epoch << ",\"split\":\"" << split << "\",\"loss\":" << loss;
  if (has_si_snri) (*os) << ",\"si_snri\":" << si_snri;
  (*os) << "}\n";
}

template <typename S>
std::vector<std::vector<S>> targets_of(const MixtureExample& ex) {
  std::vector<std::vector<S>> t;
  for (const auto& src : ex.sources) {
    std::vector<S> v(src.samples.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<S>(src.samples[i]);
    t.push_back(std::move(v));
  }
  return t;
}

}  // namespace detail

/// Validation pass: mean PIT loss (unclamped metric mode) and mean SI-SNRi.
template <typename S>
std::pair<double, double> evaluate(const SeparatorModel<S>& model,
                                   const std::vector<MixtureExample>& data,
                                   const SiSnrOptions& opts = {}) {
  double loss_sum = 0.0, snri_sum = 0.0;
  for (const auto& ex : data) {
    std::vector<Waveform> est = separate(model, ex.mixture);
    std::vector<std::vector<double>> est_s;
    for (auto& e : est) est_s.push_back(e.samples);
    const int c = static_cast<int>(est_s.size());
    std::vector<int> perm(static_cast<std::size_t>(c));
    std::iota(perm.begin(), perm.end(), 0);
    double best = -std::numeric_limits<double>::infinity();
    do {
      double sum = 0.0;
      for (int i = 0; i < c; ++i)
        sum += si_snr(est_s[static_cast<std::size_t>(i)],
                      ex.sources[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])].samples, opts);
      best = std::max(best, sum);
    } while (std::next_permutation(perm.begin(), perm.end()));
    loss_sum += -best / c;
    snri_sum += si_snr_improvement(est_s, ex, opts);
  }
  const double denom = data.empty() ? 1.0 : static_cast<double>(data.size());
  return {loss_sum / denom, snri_sum / denom};
}

/// Single-threaded training: PIT SI-SNR maximization with Adam, the
/// exponential learning-rate schedule, gradient accumulation over the batch,
/// and early stopping on validation loss. Deterministic for a fixed seed.
/// Aborts with a numeric error if the loss turns non-finite.
template <typename S>
std::vector<EpochMetrics> train(SeparatorModel<S>& model,
                                const std::vector<MixtureExample>& train_set,
                                const std::vector<MixtureExample>& val_set,
                                const TrainSettings& cfg) {
  require(!train_set.empty(), Error::Kind::usage, "train: empty training set");
  AdamState<S> opt_state;
  EarlyStopping stopper{cfg.early_stop_patience};
  std::vector<EpochMetrics> history;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_schedule(epoch, cfg.initial_lr);
    Rng shuffle_rng(cfg.seed * 9176 + static_cast<std::uint64_t>(epoch));
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.integer(i)]);

    double loss_sum = 0.0;
    std::size_t done = 0;
    while (done < order.size()) {
      const std::size_t batch_end =
          std::min(done + static_cast<std::size_t>(cfg.batch_size), order.size());
      const std::size_t batch_n = batch_end - done;
      model.params.zero_grads();
      for (std::size_t bi = done; bi < batch_end; ++bi) {
        const MixtureExample& ex = train_set[order[bi]];
        Rng dropout_rng(cfg.seed ^ (static_cast<std::uint64_t>(epoch) << 32) ^
                        (order[bi] * 2654435761ull));
        ForwardContext<S> ctx;
        ctx.training = true;
        ctx.dropout = model.hp.dropout;
        ctx.rng = &dropout_rng;
        std::vector<Tensor<S>> est = forward_sources(model, ex.mixture, ctx);
        auto [loss, pit] = pit_loss(est, detail::targets_of<S>(ex), cfg.si_snr_opts);
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv))
          throw Error(Error::Kind::numeric,
                      "training diverged (non-finite loss) at epoch " + std::to_string(epoch));
        loss_sum += lv;
        backward(loss);
      }
      // Mean gradient over the batch, then clip + update.
      const S inv = static_cast<S>(1.0 / static_cast<double>(batch_n));
      for (std::size_t pi = 0; pi < model.params.size(); ++pi) {
        auto& t = model.params.item(pi).second;
        for (std::int64_t j = 0; j < t.numel(); ++j) t.grad()[j] *= inv;
      }
      adam_step(model.params, opt_state, cfg.adam, lr);
      done = batch_end;
    }

    EpochMetrics em;
    em.epoch = epoch;
    em.lr = lr;
    em.train_loss = loss_sum / static_cast<double>(order.size());
    auto [val_loss, val_snri] = evaluate(model, val_set, cfg.si_snr_opts);
    em.val_loss = val_loss;
    em.val_si_snri = val_snri;
    history.push_back(em);
    detail::emit_metric(cfg.metrics_out, epoch, "train", em.train_loss, 0.0, false);
    detail::emit_metric(cfg.metrics_out, epoch, "val", em.val_loss, em.val_si_snri, true);
    if (cfg.log)
      (*cfg.log) << "epoch " << epoch << " lr " << lr << " train_loss " << em.train_loss
                 << " val_loss " << em.val_loss << " val_si_snri " << em.val_si_snri << "\n";
    if (!val_set.empty() && stopper.update(val_loss)) break;
  }
  return history;
}

}  // namespace galr
