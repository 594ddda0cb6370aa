#pragma once

#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "galr/lstm.hpp"
#include "galr/ops.hpp"

namespace galr {

enum class LayerKind { recurrent, attentive };

inline const char* layer_kind_name(LayerKind k) {
  return k == LayerKind::recurrent ? "recurrent" : "attentive";
}

/// Which model runs each phase of a dual-path block. The default pairing is
/// a recurrent local phase with an attentive global phase; the other three
/// combinations make up the ablation matrix. use_lowdim enables the
/// down-projected global attention and requires an attentive global phase.
struct BlockVariant {
  LayerKind local = LayerKind::recurrent;
  LayerKind global = LayerKind::attentive;
  bool use_lowdim = false;
};

/// Sinusoidal positional table: P[2d, s] = sin(s / 10000^{2d/D}),
/// P[2d+1, s] = cos(s / 10000^{2d/D}). Values lie in [-1, 1].
template <typename S>
Tensor<S> positional_encoding(std::int64_t feature_dim, std::int64_t positions) {
  Tensor<S> p(Shape{feature_dim, positions});
  for (std::int64_t d = 0; d < feature_dim; ++d) {
    const double rate =
        std::pow(10000.0, static_cast<double>(d - (d % 2)) / static_cast<double>(feature_dim));
    for (std::int64_t s = 0; s < positions; ++s) {
      const double angle = static_cast<double>(s) / rate;
      p.data()[d * positions + s] =
          static_cast<S>(d % 2 == 0 ? std::sin(angle) : std::cos(angle));
    }
  }
  return p;
}

/// Precomputed positional table sliced per use; rebuilt locally if a longer
/// sequence shows up, so shared models stay read-only.
template <typename S>
struct PositionalTable {
  Tensor<S> table;  // [D, max_positions]

  static PositionalTable build(std::int64_t feature_dim, std::int64_t max_positions) {
    return PositionalTable{positional_encoding<S>(feature_dim, max_positions)};
  }

  Tensor<S> slice(std::int64_t positions) const {
    const std::int64_t d = table.dim(0);
    if (positions > table.dim(1)) return positional_encoding<S>(d, positions);
    Tensor<S> out(Shape{d, positions});
    for (std::int64_t di = 0; di < d; ++di)
      std::copy(table.data() + di * table.dim(1), table.data() + di * table.dim(1) + positions,
                out.data() + di * positions);
    return out;
  }
};

/// Shared plus per-head projection weights. The per-head maps are a second
/// stage on top of the shared [D, D] affine, so the parameter count is
/// independent of how many sequences attend with them.
template <typename S>
struct AttentionParams {
  Tensor<S> w_query, w_key, w_value;  // [D, D]
  Tensor<S> b_query, b_key, b_value;  // [D]
  std::vector<Tensor<S>> head_query, head_key, head_value;  // J x [D/J, D]
  Tensor<S> w_out;  // [D, D]
  Tensor<S> b_out;  // [D]
  int heads = 0;
};

template <typename S>
struct RecurrentLayerParams {
  BiLstm<S> lstm;
  Tensor<S> proj_w;   // [D, 2H]
  Tensor<S> proj_b;   // [D]
  Tensor<S> ln_gain;  // [D]
  Tensor<S> ln_bias;  // [D]
};

template <typename S>
struct AttentiveLayerParams {
  Tensor<S> prenorm_gain, prenorm_bias;    // feature-axis LN before attention
  AttentionParams<S> attn;
  Tensor<S> postnorm_gain, postnorm_bias;  // LN inside the sub-layer connection
};

template <typename S>
struct LowDimParams {
  Tensor<S> down_w;  // [Q, K]
  Tensor<S> down_b;  // [Q]
  Tensor<S> up_w;    // [K, Q]
  Tensor<S> up_b;    // [K]
};

template <typename S>
struct BlockParams {
  BlockVariant variant;
  std::optional<RecurrentLayerParams<S>> local_rec;
  std::optional<AttentiveLayerParams<S>> local_attn;
  std::optional<RecurrentLayerParams<S>> global_rec;
  std::optional<AttentiveLayerParams<S>> global_attn;
  std::optional<LowDimParams<S>> lowdim;
};

/// Softmax matrices recorded from one attention layer: values [B, T, T]
/// where B indexes the tied sequences and rows are attention targets.
template <typename S>
struct AttentionRecord {
  int block = 0;
  int head = 0;
  Shape shape;          // [B, T, T]
  std::vector<S> weights;
};

template <typename S>
struct AttentionCapture {
  int block = -1;  // which block to record (-1: none)
  int head = -1;   // which head (-1: all heads)
  int current_block = 0;
  std::vector<AttentionRecord<S>> records;

  bool wants(int head_idx) const {
    return current_block == block && (head == -1 || head == head_idx);
  }
};

/// Everything a forward pass needs beyond parameters.
template <typename S>
struct ForwardContext {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;
  AttentionCapture<S>* capture = nullptr;
};

namespace detail {

/// Multi-head scaled dot-product attention over the middle axis of
/// x [D, T, B]: every trailing-axis index b is an independent sequence of
/// length T, all sharing the same projection weights.
template <typename S>
Tensor<S> attention_over_middle(const Tensor<S>& x, const AttentionParams<S>& p,
                                ForwardContext<S>& ctx) {
  const std::int64_t d = x.dim(0);
  const int heads = p.heads;
  require(d % heads == 0, Error::Kind::config,
          "attention: feature dim " + std::to_string(d) + " not divisible by " +
              std::to_string(heads) + " heads");
  const std::int64_t dh = d / heads;
  const S inv_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

  Tensor<S> xq = add(matmul(p.w_query, x), p.b_query);
  Tensor<S> xk = add(matmul(p.w_key, x), p.b_key);
  Tensor<S> xv = add(matmul(p.w_value, x), p.b_value);

  std::vector<Tensor<S>> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (int j = 0; j < heads; ++j) {
    Tensor<S> qj = permute(matmul(p.head_query[static_cast<std::size_t>(j)], xq), {2, 0, 1});
    Tensor<S> kj = permute(matmul(p.head_key[static_cast<std::size_t>(j)], xk), {2, 0, 1});
    Tensor<S> vj = permute(matmul(p.head_value[static_cast<std::size_t>(j)], xv), {2, 0, 1});
    // qj/kj/vj: [B, D/J, T]
    Tensor<S> scores = scale(batched_matmul(qj, kj, /*trans_a=*/true), inv_scale);
    Tensor<S> alpha = softmax(scores, 2);  // rows are attention targets
    if (ctx.capture && ctx.capture->wants(j)) {
      AttentionRecord<S> rec;
      rec.block = ctx.capture->current_block;
      rec.head = j;
      rec.shape = alpha.shape();
      rec.weights.assign(alpha.data(), alpha.data() + alpha.numel());
      ctx.capture->records.push_back(std::move(rec));
    }
    Tensor<S> mixed = batched_matmul(vj, alpha, /*trans_a=*/false, /*trans_b=*/true);
    head_outs.push_back(permute(mixed, {1, 2, 0}));  // back to [D/J, T, B]
  }
  Tensor<S> cat = concat_rows(head_outs);            // [D, T, B]
  return add(matmul(p.w_out, cat), p.b_out);
}

/// Sub-layer connection around the attention output:
/// LN(g + Dropout(attention(g))) — dropout only while training.
template <typename S>
Tensor<S> attentive_sublayer(const Tensor<S>& g, const AttentiveLayerParams<S>& p,
                             ForwardContext<S>& ctx) {
  Tensor<S> a = attention_over_middle(g, p.attn, ctx);
  if (ctx.training && ctx.dropout > 0.0) {
    require(ctx.rng != nullptr, Error::Kind::usage, "training forward needs an rng");
    a = dropout(a, ctx.dropout, *ctx.rng, true);
  }
  return layer_norm_features(add(g, a), p.postnorm_gain, p.postnorm_bias);
}

}  // namespace detail

/// Locally recurrent layer: per segment s, a Bi-LSTM runs along the
/// intra-segment axis, is projected back to D, normalized, and added to the
/// layer input. Segments are processed as independent batch columns.
template <typename S>
Tensor<S> local_recurrent_layer(const Tensor<S>& t, const RecurrentLayerParams<S>& p) {
  require(t.rank() == 3, Error::Kind::dimension, "local layer: input must be [D, S, K]");
  Tensor<S> rnn = bilstm_run(t, p.lstm);            // [2H, S, K]
  Tensor<S> proj = add(matmul(p.proj_w, rnn), p.proj_b);
  Tensor<S> normed = layer_norm_features(proj, p.ln_gain, p.ln_bias);
  return add(normed, t);
}

/// Globally recurrent layer (the dual-RNN style global phase): the same
/// construction with the sequence running across segments for each
/// intra-segment position.
template <typename S>
Tensor<S> global_recurrent_layer(const Tensor<S>& lhat, const RecurrentLayerParams<S>& p) {
  require(lhat.rank() == 3, Error::Kind::dimension, "global layer: input must be [D, S, K]");
  Tensor<S> x = permute(lhat, {0, 2, 1});           // [D, K, S]
  Tensor<S> rnn = bilstm_run(x, p.lstm);            // [2H, K, S]
  Tensor<S> proj = add(matmul(p.proj_w, rnn), p.proj_b);
  Tensor<S> normed = layer_norm_features(proj, p.ln_gain, p.ln_bias);
  Tensor<S> back = permute(normed, {0, 2, 1});      // [D, S, K]
  return add(back, lhat);
}

/// Globally attentive layer. Sequences run across segments (length S), one
/// per intra-segment position, with weights tied across all of them. The
/// optional low-dimension maps project the intra-segment axis K down to Q
/// before attention and back after, cutting the number of attended
/// sequences.
///
/// Note on the inverse map: it is applied to the attention sub-layer output,
/// not to the pre-attention tensor; the literal alternative would leave the
/// attention result unused.
template <typename S>
Tensor<S> global_attentive_layer(const Tensor<S>& lhat, const AttentiveLayerParams<S>& p,
                                 const LowDimParams<std::type_identity_t<S>>* lowdim,
                                 const Tensor<S>& pos, ForwardContext<S>& ctx) {
  require(lhat.rank() == 3, Error::Kind::dimension, "global layer: input must be [D, S, K]");
  Tensor<S> pre = lhat;
  if (lowdim) {
    require(lowdim->down_w.dim(1) == lhat.dim(2), Error::Kind::config,
            "low-dim map built for segment size " + std::to_string(lowdim->down_w.dim(1)) +
                " but input has " + std::to_string(lhat.dim(2)));
    pre = affine_last(lhat, lowdim->down_w, lowdim->down_b);  // [D, S, Q]
  }
  Tensor<S> g = add(layer_norm_features(pre, p.prenorm_gain, p.prenorm_bias), pos);
  Tensor<S> ghat = detail::attentive_sublayer(g, p, ctx);
  if (lowdim) ghat = affine_last(ghat, lowdim->up_w, lowdim->up_b);  // [D, S, K]
  return add(ghat, lhat);
}

/// Locally attentive layer (ablation variant): the same attention machinery
/// with sequences along the intra-segment axis, weights tied across
/// segments, and positional encoding along K.
template <typename S>
Tensor<S> local_attentive_layer(const Tensor<S>& t, const AttentiveLayerParams<S>& p,
                                const Tensor<S>& pos, ForwardContext<S>& ctx) {
  require(t.rank() == 3, Error::Kind::dimension, "local layer: input must be [D, S, K]");
  Tensor<S> x = permute(t, {0, 2, 1});  // [D, K, S]: sequence axis K, batch S
  Tensor<S> g = add(layer_norm_features(x, p.prenorm_gain, p.prenorm_bias), pos);
  Tensor<S> ghat = detail::attentive_sublayer(g, p, ctx);
  Tensor<S> back = permute(ghat, {0, 2, 1});
  return add(back, t);
}

/// One dual-path block: the selected local phase followed by the selected
/// global phase. Shape-preserving on [D, S, K].
template <typename S>
Tensor<S> galr_block(const Tensor<S>& t, const BlockParams<S>& p,
                     const PositionalTable<S>& pos_table, ForwardContext<S>& ctx) {
  Tensor<S> lhat;
  if (p.variant.local == LayerKind::recurrent) {
    lhat = local_recurrent_layer(t, *p.local_rec);
  } else {
    Tensor<S> pos = pos_table.slice(t.dim(2));
    lhat = local_attentive_layer(t, *p.local_attn, pos, ctx);
  }
  if (p.variant.global == LayerKind::recurrent) {
    return global_recurrent_layer(lhat, *p.global_rec);
  }
  Tensor<S> pos = pos_table.slice(t.dim(1));
  const LowDimParams<S>* lowdim = p.variant.use_lowdim ? &*p.lowdim : nullptr;
  return global_attentive_layer(lhat, *p.global_attn, lowdim, pos, ctx);
}

}  // namespace galr
