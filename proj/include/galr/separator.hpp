#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "galr/blocks.hpp"
#include "galr/frontend.hpp"

namespace galr {

/// Architecture hyperparameters; short aliases follow the conventional
/// letters used throughout the docs and CLI: D = feature_dim, M = window,
/// K = segment_size, Q = low_dim (0 disables the down-projection),
/// H = hidden, J = heads, N = num_blocks, C = num_sources.
struct HyperParams {
  int feature_dim = 64;
  int window = 16;
  int segment_size = 100;
  int low_dim = 32;
  int hidden = 128;
  int heads = 8;
  int num_blocks = 6;
  int num_sources = 2;
  BlockVariant variant{LayerKind::recurrent, LayerKind::attentive, true};
  double dropout = 0.1;

  void validate() const {
    require(feature_dim >= 1 && window >= 2 && segment_size >= 2 && hidden >= 1 && heads >= 1,
            Error::Kind::config, "hyperparameters must be positive");
    require(num_blocks >= 1, Error::Kind::config, "need at least one block");
    require(num_sources >= 2, Error::Kind::config, "need at least two sources");
    require(window % 2 == 0, Error::Kind::config, "window must be even");
    require(segment_size % 2 == 0, Error::Kind::config, "segment size must be even");
    require(feature_dim % heads == 0, Error::Kind::config,
            "feature dim must be divisible by the head count");
    require(dropout >= 0.0 && dropout < 1.0, Error::Kind::config, "dropout must be in [0, 1)");
    if (variant.use_lowdim) {
      require(variant.global == LayerKind::attentive, Error::Kind::config,
              "low-dim mapping requires an attentive global phase");
      require(low_dim >= 1 && low_dim <= segment_size, Error::Kind::config,
              "low dim must satisfy 1 <= Q <= K");
    } else {
      require(low_dim == 0, Error::Kind::config,
              "low dim must be 0 when the low-dim mapping is disabled");
    }
  }
};

/// Named, ordered collection of trainable tensors. Entries share storage
/// with the tensors wired into the network, so in-place optimizer updates
/// are visible everywhere; names are stable across save/load.
template <typename S>
class ParamStore {
 public:
  Tensor<S>& add(const std::string& name, Tensor<S> t) {
    require(!index_.count(name), Error::Kind::usage, "duplicate parameter name " + name);
    t.set_requires_grad(true);
    index_[name] = items_.size();
    items_.emplace_back(name, std::move(t));
    return items_.back().second;
  }

  std::size_t size() const { return items_.size(); }
  const std::pair<std::string, Tensor<S>>& item(std::size_t i) const { return items_[i]; }
  std::pair<std::string, Tensor<S>>& item(std::size_t i) { return items_[i]; }

  const Tensor<S>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
  }
  Tensor<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
  }

  std::int64_t total_scalars() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : items_) {
      t.ensure_grad();
      t.zero_grad();
    }
  }

 private:
  std::vector<std::pair<std::string, Tensor<S>>> items_;
  std::unordered_map<std::string, std::size_t> index_;
};

template <typename S>
struct MaskHeadParams {
  Tensor<S> split_w;  // [C*D, D] pointwise channel map producing C feature maps
  Tensor<S> split_b;  // [C*D]
  Tensor<S> gate_tanh_w, gate_tanh_b;        // [D, D], [D]
  Tensor<S> gate_sigmoid_w, gate_sigmoid_b;  // [D, D], [D]
  Tensor<S> mask_relu_w, mask_relu_b;        // [D, D], [D]
};

namespace detail {

template <typename S>
Tensor<S> uniform_init(Shape shape, std::int64_t fan_in, Rng& rng) {
  Tensor<S> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
  return t;
}

}  // namespace detail

/// The full separation network: encoder -> segmentation -> N blocks -> mask
/// estimation -> masking -> decoder, for C sources.
template <typename S>
struct SeparatorModel {
  HyperParams hp;
  Tensor<S> encoder_w;  // [D, 1, M]
  Tensor<S> decoder_w;  // [M, D]
  std::vector<BlockParams<S>> blocks;
  MaskHeadParams<S> mask;
  PositionalTable<S> pos_table;
  ParamStore<S> params;

  static SeparatorModel init(const HyperParams& hp, std::uint64_t seed) {
    hp.validate();
    Rng rng(seed);
    SeparatorModel m;
    m.hp = hp;
    const int d = hp.feature_dim;
    const int h = hp.hidden;

    auto& ps = m.params;
    m.encoder_w = ps.add("encoder.weight",
                         detail::uniform_init<S>({d, 1, hp.window}, hp.window, rng));
    m.decoder_w =
        ps.add("decoder.weight", detail::uniform_init<S>({hp.window, d}, d, rng));

    auto add_ln = [&](const std::string& prefix, Tensor<S>& gain, Tensor<S>& bias) {
      gain = ps.add(prefix + ".gain", Tensor<S>::ones({d}));
      bias = ps.add(prefix + ".bias", Tensor<S>::zeros({d}));
    };
    auto add_recurrent = [&](const std::string& prefix) {
      RecurrentLayerParams<S> p;
      p.lstm = BiLstm<S>::init(d, h, rng);
      auto add_dir = [&](const std::string& dp, LstmDirection<S>& dir) {
        dir.w_ih = ps.add(dp + ".w_ih", dir.w_ih);
        dir.w_hh = ps.add(dp + ".w_hh", dir.w_hh);
        dir.bias = ps.add(dp + ".bias", dir.bias);
      };
      add_dir(prefix + ".lstm.fwd", p.lstm.fwd);
      add_dir(prefix + ".lstm.bwd", p.lstm.bwd);
      p.proj_w = ps.add(prefix + ".proj.weight", detail::uniform_init<S>({d, 2 * h}, 2 * h, rng));
      p.proj_b = ps.add(prefix + ".proj.bias", detail::uniform_init<S>({d}, 2 * h, rng));
      add_ln(prefix + ".norm", p.ln_gain, p.ln_bias);
      return p;
    };
    auto add_attentive = [&](const std::string& prefix) {
      AttentiveLayerParams<S> p;
      add_ln(prefix + ".prenorm", p.prenorm_gain, p.prenorm_bias);
      auto& a = p.attn;
      a.heads = hp.heads;
      const int dh = d / hp.heads;
      auto add_stage = [&](const std::string& sp, Tensor<S>& w, Tensor<S>& b) {
        w = ps.add(sp + ".weight", detail::uniform_init<S>({d, d}, d, rng));
        b = ps.add(sp + ".bias", detail::uniform_init<S>({d}, d, rng));
      };
      add_stage(prefix + ".attn.query", a.w_query, a.b_query);
      add_stage(prefix + ".attn.key", a.w_key, a.b_key);
      add_stage(prefix + ".attn.value", a.w_value, a.b_value);
      for (int j = 0; j < hp.heads; ++j) {
        const std::string hp_prefix = prefix + ".attn.head" + std::to_string(j);
        a.head_query.push_back(
            ps.add(hp_prefix + ".query", detail::uniform_init<S>({dh, d}, d, rng)));
        a.head_key.push_back(
            ps.add(hp_prefix + ".key", detail::uniform_init<S>({dh, d}, d, rng)));
        a.head_value.push_back(
            ps.add(hp_prefix + ".value", detail::uniform_init<S>({dh, d}, d, rng)));
      }
      add_stage(prefix + ".attn.out", a.w_out, a.b_out);
      add_ln(prefix + ".postnorm", p.postnorm_gain, p.postnorm_bias);
      return p;
    };

    for (int n = 0; n < hp.num_blocks; ++n) {
      const std::string bp = "blocks." + std::to_string(n);
      BlockParams<S> blk;
      blk.variant = hp.variant;
      if (hp.variant.local == LayerKind::recurrent)
        blk.local_rec = add_recurrent(bp + ".local");
      else
        blk.local_attn = add_attentive(bp + ".local");
      if (hp.variant.global == LayerKind::recurrent) {
        blk.global_rec = add_recurrent(bp + ".global");
      } else {
        blk.global_attn = add_attentive(bp + ".global");
        if (hp.variant.use_lowdim) {
          LowDimParams<S> ld;
          const int k = hp.segment_size, q = hp.low_dim;
          ld.down_w = ps.add(bp + ".global.downmap.weight",
                             detail::uniform_init<S>({q, k}, k, rng));
          ld.down_b =
              ps.add(bp + ".global.downmap.bias", detail::uniform_init<S>({q}, k, rng));
          ld.up_w = ps.add(bp + ".global.upmap.weight",
                           detail::uniform_init<S>({k, q}, q, rng));
          ld.up_b = ps.add(bp + ".global.upmap.bias", detail::uniform_init<S>({k}, q, rng));
          blk.lowdim = std::move(ld);
        }
      }
      m.blocks.push_back(std::move(blk));
    }

    const int c = hp.num_sources;
    m.mask.split_w = ps.add("mask.split.weight", detail::uniform_init<S>({c * d, d}, d, rng));
    m.mask.split_b = ps.add("mask.split.bias", detail::uniform_init<S>({c * d}, d, rng));
    auto add_gate = [&](const std::string& gp, Tensor<S>& w, Tensor<S>& b) {
      w = ps.add(gp + ".weight", detail::uniform_init<S>({d, d}, d, rng));
      b = ps.add(gp + ".bias", detail::uniform_init<S>({d}, d, rng));
    };
    add_gate("mask.gate_tanh", m.mask.gate_tanh_w, m.mask.gate_tanh_b);
    add_gate("mask.gate_sigmoid", m.mask.gate_sigmoid_w, m.mask.gate_sigmoid_b);
    add_gate("mask.mask_relu", m.mask.mask_relu_w, m.mask.mask_relu_b);

    // Positions cover the larger of the two sequence axes for 10 s of input;
    // longer inputs fall back to an on-the-fly table.
    const std::int64_t frames10 = frame_count(10 * 8000, hp.window);
    const std::int64_t max_pos =
        std::max<std::int64_t>(segment_count(frames10, hp.segment_size), hp.segment_size) + 1;
    m.pos_table = PositionalTable<S>::build(d, max_pos);
    return m;
  }
};

/// Mask estimation head: a pointwise channel map splits the block output
/// into C tensors, each is overlap-added back to [D, I], passed through the
/// gated pair of pointwise convolutions, and rectified into a non-negative
/// mask.
template <typename S>
std::vector<Tensor<S>> mask_head(const Tensor<S>& t_n, std::int64_t frames,
                                 const MaskHeadParams<S>& p, int num_sources) {
  const std::int64_t d = t_n.dim(0);
  Tensor<S> split = add(matmul(p.split_w, t_n), p.split_b);  // [C*D, S, K]
  std::vector<Tensor<S>> masks;
  masks.reserve(static_cast<std::size_t>(num_sources));
  for (int c = 0; c < num_sources; ++c) {
    Tensor<S> yc = slice_rows(split, c * d, (c + 1) * d);
    Tensor<S> sc = merge_segments(yc, frames, false);  // [D, I]
    Tensor<S> gated = mul(tanh(add(matmul(p.gate_tanh_w, sc), p.gate_tanh_b)),
                          sigmoid(add(matmul(p.gate_sigmoid_w, sc), p.gate_sigmoid_b)));
    masks.push_back(relu(add(matmul(p.mask_relu_w, gated), p.mask_relu_b)));
  }
  return masks;
}

/// Full forward pass to C estimated source signals (graph-recording when
/// gradients are enabled). Estimates keep the input's original length.
template <typename S>
std::vector<Tensor<S>> forward_sources(const SeparatorModel<S>& m, const Waveform& w,
                                       ForwardContext<S>& ctx) {
  EncodedSignal<S> enc = encode(w, m.encoder_w);
  SegmentTensor<S> seg = segment(enc, m.hp.segment_size);
  Tensor<S> t = seg.data;
  for (std::size_t n = 0; n < m.blocks.size(); ++n) {
    if (ctx.capture) ctx.capture->current_block = static_cast<int>(n);
    t = galr_block(t, m.blocks[n], m.pos_table, ctx);
  }
  std::vector<Tensor<S>> masks = mask_head(t, seg.valid_length, m.mask, m.hp.num_sources);
  std::vector<Tensor<S>> estimates;
  estimates.reserve(masks.size());
  for (auto& mask_c : masks)
    estimates.push_back(
        decode_features(mul(enc.features, mask_c), m.decoder_w, enc.original_length));
  return estimates;
}

/// Inference entry point: deterministic (dropout off, no graph), reentrant
/// with a shared read-only model.
template <typename S>
std::vector<Waveform> separate(const SeparatorModel<S>& m, const Waveform& w) {
  require(w.length() >= m.hp.window, Error::Kind::input,
          "separate: input shorter than the analysis window");
  NoGradGuard ng;
  ForwardContext<S> ctx;  // inference: no dropout, no capture
  std::vector<Tensor<S>> ests = forward_sources(m, w, ctx);
  std::vector<Waveform> out;
  out.reserve(ests.size());
  for (auto& e : ests) {
    Waveform s;
    s.sample_rate = w.sample_rate;
    s.samples.assign(e.data(), e.data() + e.numel());
    out.push_back(std::move(s));
  }
  return out;
}

/// Closed-form trainable parameter count; kept independent of model
/// construction so the two can be checked against each other.
inline std::int64_t count_params(const HyperParams& hp) {
  hp.validate();
  const std::int64_t d = hp.feature_dim, h = hp.hidden, m = hp.window;
  const std::int64_t k = hp.segment_size, q = hp.low_dim, c = hp.num_sources;
  const std::int64_t recurrent_layer =
      2 * (4 * h * d + 4 * h * h + 4 * h)  // two LSTM directions
      + d * 2 * h + d                      // projection back to D
      + 2 * d;                             // layer norm
  const std::int64_t attention = 3 * (d * d + d)  // shared q/k/v stages
                                 + 3 * d * d      // per-head second stages
                                 + d * d + d;     // head mixing
  const std::int64_t attentive_layer = 2 * d + attention + 2 * d;  // pre/post norms
  const std::int64_t lowdim = q * (k + 1) + k * (q + 1);

  std::int64_t per_block = 0;
  per_block += hp.variant.local == LayerKind::recurrent ? recurrent_layer : attentive_layer;
  per_block += hp.variant.global == LayerKind::recurrent ? recurrent_layer : attentive_layer;
  if (hp.variant.use_lowdim) per_block += lowdim;

  const std::int64_t mask_head_params = (c * d * d + c * d) + 3 * (d * d + d);
  return d * m            // encoder basis
         + m * d          // decoder basis
         + hp.num_blocks * per_block + mask_head_params;
}

}  // namespace galr
