#pragma once

#include <cstdint>
#include <vector>

#include "galr/ops.hpp"

namespace galr {

/// Mono waveform. Samples are expected in [-1, 1] once normalized; metrics
/// and file I/O stay in double regardless of the network precision.
struct Waveform {
  std::vector<double> samples;
  int sample_rate = 8000;

  std::int64_t length() const { return static_cast<std::int64_t>(samples.size()); }
};

/// Number of half-overlapping analysis frames of `window` samples covering
/// `samples` (after tail zero-padding so the final frame is complete).
inline std::int64_t frame_count(std::int64_t samples, std::int64_t window) {
  if (samples <= 0) return 0;
  const std::int64_t hop = window / 2;
  if (samples <= window) return 1;
  return (samples - window + hop - 1) / hop + 1;
}

/// Segment count over `frames` half-overlapping segments of size K:
/// S = ceil(2I/K) + 1.
inline std::int64_t segment_count(std::int64_t frames, std::int64_t segment_size) {
  return (2 * frames + segment_size - 1) / segment_size + 1;
}

template <typename S>
struct EncodedSignal {
  Tensor<S> features;             // [D, I], non-negative after the encoder
  std::int64_t original_length;   // samples before tail padding
  std::int64_t window;            // M; the frame hop is M/2
};

template <typename S>
struct SegmentTensor {
  Tensor<S> data;             // [D, S, K]
  std::int64_t valid_length;  // I, the pre-padding frame count
};

/// Learned encoder: frame i covers samples [i*M/2, i*M/2 + M), the basis is
/// applied as a strided convolution, and the result is rectified so features
/// stay non-negative. `rectify = false` exists for linear round-trip checks.
template <typename S>
EncodedSignal<S> encode(const Waveform& w, const Tensor<S>& basis, bool rectify = true) {
  require(basis.rank() == 3 && basis.dim(1) == 1, Error::Kind::dimension,
          "encode: basis must be [D, 1, M]");
  const std::int64_t m = basis.dim(2);
  const std::int64_t len = w.length();
  require(len >= m, Error::Kind::input,
          "encode: input of " + std::to_string(len) + " samples is shorter than the window " +
              std::to_string(m));
  const std::int64_t hop = m / 2;
  const std::int64_t frames = frame_count(len, m);
  const std::int64_t padded = (frames - 1) * hop + m;

  std::vector<S> buf(static_cast<std::size_t>(padded), S(0));
  for (std::int64_t i = 0; i < len; ++i) buf[static_cast<std::size_t>(i)] = static_cast<S>(w.samples[static_cast<std::size_t>(i)]);
  Tensor<S> x = Tensor<S>::from(std::move(buf), {1, padded});

  Tensor<S> feats = conv1d(x, basis, hop);
  if (rectify) feats = relu(feats);
  return EncodedSignal<S>{std::move(feats), len, m};
}

/// Splits [D, I] features into S half-overlapping segments of length K, zero
/// padded at both ends so every frame lands in exactly two segments:
/// out[d, s, k] = x[d, s*K/2 - K/2 + k] (zero outside [0, I)).
template <typename S>
Tensor<S> segment_features(const Tensor<S>& x, std::int64_t segment_size) {
  require(x.rank() == 2, Error::Kind::dimension, "segment: features must be [D, I]");
  require(segment_size >= 2 && segment_size % 2 == 0, Error::Kind::usage,
          "segment: segment size must be even and >= 2");
  const std::int64_t d = x.dim(0), frames = x.dim(1);
  const std::int64_t hop = segment_size / 2;
  const std::int64_t nseg = segment_count(frames, segment_size);

  Tensor<S> out(Shape{d, nseg, segment_size});
  const S* xd = x.data();
  S* od = out.data();
  for (std::int64_t di = 0; di < d; ++di) {
    for (std::int64_t si = 0; si < nseg; ++si) {
      const std::int64_t start = si * hop - hop;
      S* orow = od + (di * nseg + si) * segment_size;
      const S* xrow = xd + di * frames;
      for (std::int64_t ki = 0; ki < segment_size; ++ki) {
        const std::int64_t fi = start + ki;
        orow[ki] = (fi >= 0 && fi < frames) ? xrow[fi] : S(0);
      }
    }
  }
  count_alloc(static_cast<std::uint64_t>(out.numel()));

  auto backward = [d, frames, nseg, segment_size, hop](Tensor<S>& o) {
    Tensor<S>& p = o.node->parents[0];
    if (!p.requires_grad()) return;
    const S* g = o.grad();
    S* pg = p.grad();
    for (std::int64_t di = 0; di < d; ++di) {
      for (std::int64_t si = 0; si < nseg; ++si) {
        const std::int64_t start = si * hop - hop;
        const S* grow = g + (di * nseg + si) * segment_size;
        for (std::int64_t ki = 0; ki < segment_size; ++ki) {
          const std::int64_t fi = start + ki;
          if (fi >= 0 && fi < frames) pg[di * frames + fi] += grow[ki];
        }
      }
    }
  };
  return detail::finish_op("segment", std::move(out), {x}, std::move(backward));
}

template <typename S>
SegmentTensor<S> segment(const EncodedSignal<S>& enc, std::int64_t segment_size) {
  return SegmentTensor<S>{segment_features(enc.features, segment_size), enc.features.dim(1)};
}

/// Inverse of segment_features: sums the shifted segments back to [D, I].
/// With normalize every position is divided by its overlap count, making the
/// round trip exact; the in-network mask path runs unnormalized.
template <typename S>
Tensor<S> merge_segments(const Tensor<S>& t, std::int64_t frames, bool normalize) {
  require(t.rank() == 3, Error::Kind::dimension, "merge_segments: input must be [D, S, K]");
  const std::int64_t d = t.dim(0), nseg = t.dim(1), k = t.dim(2);
  const std::int64_t hop = k / 2;
  require(k % 2 == 0, Error::Kind::usage, "merge_segments: segment size must be even");
  require(nseg == segment_count(frames, k), Error::Kind::dimension,
          "merge_segments: segment count does not match frame count");

  std::vector<S> weight(static_cast<std::size_t>(frames), S(1));
  if (normalize) {
    std::vector<std::int64_t> cnt(static_cast<std::size_t>(frames), 0);
    for (std::int64_t si = 0; si < nseg; ++si) {
      const std::int64_t start = si * hop - hop;
      for (std::int64_t ki = 0; ki < k; ++ki) {
        const std::int64_t fi = start + ki;
        if (fi >= 0 && fi < frames) ++cnt[static_cast<std::size_t>(fi)];
      }
    }
    for (std::int64_t i = 0; i < frames; ++i)
      weight[static_cast<std::size_t>(i)] = cnt[static_cast<std::size_t>(i)] > 0
                                                ? S(1) / static_cast<S>(cnt[static_cast<std::size_t>(i)])
                                                : S(1);
  }

  Tensor<S> out(Shape{d, frames});
  const S* td = t.data();
  S* od = out.data();
  for (std::int64_t di = 0; di < d; ++di) {
    S* orow = od + di * frames;
    for (std::int64_t si = 0; si < nseg; ++si) {
      const std::int64_t start = si * hop - hop;
      const S* trow = td + (di * nseg + si) * k;
      for (std::int64_t ki = 0; ki < k; ++ki) {
        const std::int64_t fi = start + ki;
        if (fi >= 0 && fi < frames) orow[fi] += trow[ki];
      }
    }
    if (normalize)
      for (std::int64_t fi = 0; fi < frames; ++fi) orow[fi] *= weight[static_cast<std::size_t>(fi)];
  }
  count_adds(static_cast<std::uint64_t>(t.numel()));
  count_alloc(static_cast<std::uint64_t>(out.numel()));

  auto backward = [d, nseg, k, hop, frames, weight](Tensor<S>& o) {
    Tensor<S>& p = o.node->parents[0];
    if (!p.requires_grad()) return;
    const S* g = o.grad();
    S* pg = p.grad();
    for (std::int64_t di = 0; di < d; ++di) {
      const S* grow = g + di * frames;
      for (std::int64_t si = 0; si < nseg; ++si) {
        const std::int64_t start = si * hop - hop;
        S* prow = pg + (di * nseg + si) * k;
        for (std::int64_t ki = 0; ki < k; ++ki) {
          const std::int64_t fi = start + ki;
          if (fi >= 0 && fi < frames) prow[ki] += grow[fi] * weight[static_cast<std::size_t>(fi)];
        }
      }
    }
  };
  return detail::finish_op("merge_segments", std::move(out), {t}, std::move(backward));
}

template <typename S>
Tensor<S> overlap_add(const SegmentTensor<S>& t, bool normalize) {
  return merge_segments(t.data, t.valid_length, normalize);
}

/// Overlap-add of a frame stack: frames is [F, N] (one frame per column),
/// shifted by `hop` (which must be half the frame length) and summed. The
/// result is trimmed to `target_len`.
template <typename S>
Tensor<S> overlap_add(const Tensor<S>& frames, std::int64_t hop, bool normalize,
                      std::int64_t target_len) {
  require(frames.rank() == 2, Error::Kind::dimension, "overlap_add: frames must be [F, N]");
  const std::int64_t f = frames.dim(0), n = frames.dim(1);
  require(hop >= 1 && 2 * hop == f, Error::Kind::usage,
          "overlap_add: hop must be half the frame length");
  const std::int64_t full = (n - 1) * hop + f;
  require(target_len >= 1 && target_len <= full, Error::Kind::usage,
          "overlap_add: target length exceeds reconstructable span");

  std::vector<S> weight;
  if (normalize) {
    std::vector<std::int64_t> cnt(static_cast<std::size_t>(full), 0);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t mi = 0; mi < f; ++mi) ++cnt[static_cast<std::size_t>(i * hop + mi)];
    weight.resize(static_cast<std::size_t>(full));
    for (std::int64_t i = 0; i < full; ++i)
      weight[static_cast<std::size_t>(i)] = S(1) / static_cast<S>(cnt[static_cast<std::size_t>(i)]);
  }

  Tensor<S> out(Shape{target_len});
  const S* fd = frames.data();
  S* od = out.data();
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t mi = 0; mi < f; ++mi) {
      const std::int64_t t = i * hop + mi;
      if (t < target_len) od[t] += fd[mi * n + i];
    }
  }
  if (normalize)
    for (std::int64_t t = 0; t < target_len; ++t) od[t] *= weight[static_cast<std::size_t>(t)];
  count_adds(static_cast<std::uint64_t>(frames.numel()));
  count_alloc(static_cast<std::uint64_t>(target_len));

  auto backward = [f, n, hop, target_len, normalize, weight](Tensor<S>& o) {
    Tensor<S>& p = o.node->parents[0];
    if (!p.requires_grad()) return;
    const S* g = o.grad();
    S* pg = p.grad();
    for (std::int64_t i = 0; i < n; ++i) {
      for (std::int64_t mi = 0; mi < f; ++mi) {
        const std::int64_t t = i * hop + mi;
        if (t < target_len)
          pg[mi * n + i] += normalize ? g[t] * weight[static_cast<std::size_t>(t)] : g[t];
      }
    }
  };
  return detail::finish_op("overlap_add", std::move(out), {frames}, std::move(backward));
}

/// Decoder: maps each masked feature column back to a window of samples and
/// overlap-adds at hop M/2 (unnormalized, matching the learned basis), then
/// trims to the original length. Returns the sample tensor so the training
/// graph can flow through it.
template <typename S>
Tensor<S> decode_features(const Tensor<S>& masked, const Tensor<S>& basis_out,
                          std::int64_t original_length) {
  require(masked.rank() == 2 && basis_out.rank() == 2, Error::Kind::dimension,
          "decode: operands must be [D, I] and [M, D]");
  require(basis_out.dim(1) == masked.dim(0), Error::Kind::dimension,
          "decode: basis columns must match feature dim");
  const std::int64_t m = basis_out.dim(0);
  const std::int64_t frames = masked.dim(1);
  const std::int64_t full = (frames - 1) * (m / 2) + m;
  const std::int64_t target = std::min(original_length, full);
  Tensor<S> sample_frames = matmul(basis_out, masked);  // [M, I]
  return overlap_add(sample_frames, m / 2, false, target);
}

template <typename S>
Waveform decode(const Tensor<S>& masked, const Tensor<S>& basis_out,
                std::int64_t original_length, int sample_rate = 8000) {
  NoGradGuard ng;
  Tensor<S> samples = decode_features(masked, basis_out, original_length);
  Waveform w;
  w.sample_rate = sample_rate;
  w.samples.assign(samples.data(), samples.data() + samples.numel());
  return w;
}

}  // namespace galr
