#include <catch2/catch_amalgamated.hpp>

#include "helpers.hpp"

using namespace galr;
using Catch::Approx;

namespace {

/// Index permutation along the middle axis of [D, S, K].
Tensor<float> shuffle_segments(const Tensor<float>& t, const std::vector<std::int64_t>& perm) {
  Tensor<float> out(t.shape());
  const std::int64_t d = t.dim(0), s = t.dim(1), k = t.dim(2);
  for (std::int64_t di = 0; di < d; ++di)
    for (std::int64_t si = 0; si < s; ++si)
      for (std::int64_t ki = 0; ki < k; ++ki)
        out.data()[(di * s + si) * k + ki] =
            t.data()[(di * s + perm[static_cast<std::size_t>(si)]) * k + ki];
  return out;
}

Tensor<float> shuffle_positions(const Tensor<float>& t, const std::vector<std::int64_t>& perm) {
  Tensor<float> out(t.shape());
  const std::int64_t d = t.dim(0), s = t.dim(1), k = t.dim(2);
  for (std::int64_t di = 0; di < d; ++di)
    for (std::int64_t si = 0; si < s; ++si)
      for (std::int64_t ki = 0; ki < k; ++ki)
        out.data()[(di * s + si) * k + ki] =
            t.data()[(di * s + si) * k + perm[static_cast<std::size_t>(ki)]];
  return out;
}

HyperParams tiny_hp(BlockVariant variant, int low_dim = 0) {
  HyperParams hp;
  hp.feature_dim = 8;
  hp.window = 4;
  hp.segment_size = 8;
  hp.low_dim = low_dim;
  hp.hidden = 4;
  hp.heads = 2;
  hp.num_blocks = 1;
  hp.num_sources = 2;
  hp.dropout = 0.0;
  hp.variant = variant;
  hp.variant.use_lowdim = low_dim > 0;
  return hp;
}

template <typename S>
void zero_params_matching(SeparatorModel<S>& m, const std::string& needle) {
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    auto& [name, t] = m.params.item(i);
    if (name.find(needle) != std::string::npos && name.find(".gain") == std::string::npos)
      std::fill(t.values().begin(), t.values().end(), S(0));
  }
}

}  // namespace

TEST_CASE("positional encoding values", "[blocks]") {
  const std::int64_t d = 6, len = 10;
  auto p = positional_encoding<double>(d, len);
  REQUIRE(p.shape() == Shape{d, len});
  for (std::int64_t row = 0; row < d; ++row) {
    const double rate = std::pow(10000.0, static_cast<double>(row - (row % 2)) / d);
    for (std::int64_t s = 0; s < len; ++s) {
      const double angle = static_cast<double>(s) / rate;
      const double want = row % 2 == 0 ? std::sin(angle) : std::cos(angle);
      CHECK(p.data()[row * len + s] == Approx(want).margin(1e-12));
      CHECK(std::abs(p.data()[row * len + s]) <= 1.0);
    }
  }
  // Sliced tables agree with direct construction.
  auto table = PositionalTable<double>::build(d, 32);
  auto sliced = table.slice(len);
  CHECK(testutil::max_abs_diff(sliced, p) == 0.0);
  auto grown = table.slice(64);  // beyond the table: rebuilt on the fly
  CHECK(grown.shape() == Shape{d, 64});
}

TEST_CASE("bilstm zero fixed point and mirrored directions", "[blocks]") {
  Rng rng(20);
  auto p = BiLstm<double>::init(3, 2, rng);
  for (auto* dir : {&p.fwd, &p.bwd}) {
    std::fill(dir->w_ih.values().begin(), dir->w_ih.values().end(), 0.0);
    std::fill(dir->w_hh.values().begin(), dir->w_hh.values().end(), 0.0);
    std::fill(dir->bias.values().begin(), dir->bias.values().end(), 0.0);
  }
  auto out = bilstm_forward(Tensor<double>::zeros({3, 5}), p);
  REQUIRE(out.shape() == Shape{4, 5});
  for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == 0.0);

  // K=1 with the backward direction mirroring the forward one.
  auto q = BiLstm<double>::init(3, 2, rng);
  q.bwd = q.fwd;
  auto one = bilstm_forward(testutil::random_tensor<double>({3, 1}, rng), q);
  for (int h = 0; h < 2; ++h) CHECK(one.data()[h * 1] == Approx(one.data()[(h + 2) * 1]));
}

TEST_CASE("local recurrent layer is the identity at zero weights", "[blocks]") {
  auto hp = tiny_hp({LayerKind::recurrent, LayerKind::attentive, false});
  auto model = SeparatorModel<float>::init(hp, 21);
  zero_params_matching(model, "blocks.0.local");

  Rng rng(22);
  auto t = testutil::random_tensor<float>({8, 3, 8}, rng);
  auto out = local_recurrent_layer(t, *model.blocks[0].local_rec);
  REQUIRE(out.shape() == t.shape());
  CHECK(testutil::max_abs_diff(out, t) == 0.0);
}

TEST_CASE("recurrent layers preserve shape and segment independence", "[blocks]") {
  auto hp = tiny_hp({LayerKind::recurrent, LayerKind::recurrent, false});
  auto model = SeparatorModel<float>::init(hp, 23);
  Rng rng(24);
  auto t = testutil::random_tensor<float>({8, 5, 8}, rng);

  auto out = local_recurrent_layer(t, *model.blocks[0].local_rec);
  REQUIRE(out.shape() == t.shape());

  // Segments are independent batch items: permuting them permutes outputs.
  std::vector<std::int64_t> perm{3, 0, 4, 1, 2};
  auto out_perm = local_recurrent_layer(shuffle_segments(t, perm), *model.blocks[0].local_rec);
  CHECK(testutil::max_abs_diff(out_perm, shuffle_segments(out, perm)) < 1e-6);

  // The global recurrent layer runs across segments: permuting the segment
  // order is NOT equivariant for it.
  auto g = global_recurrent_layer(t, *model.blocks[0].global_rec);
  auto g_perm = global_recurrent_layer(shuffle_segments(t, perm), *model.blocks[0].global_rec);
  CHECK(testutil::max_abs_diff(g_perm, shuffle_segments(g, perm)) > 1e-2);

  // Zero weights: identity via the residual path.
  zero_params_matching(model, "blocks.0.global");
  auto ident = global_recurrent_layer(t, *model.blocks[0].global_rec);
  CHECK(testutil::max_abs_diff(ident, t) == 0.0);
}

TEST_CASE("global attention shapes, softmax rows, equivariance", "[blocks]") {
  auto hp = tiny_hp({LayerKind::recurrent, LayerKind::attentive, false});
  auto model = SeparatorModel<float>::init(hp, 25);
  const auto& layer = *model.blocks[0].global_attn;
  Rng rng(26);

  // S=1 degenerate sequence still works and preserves shape.
  {
    auto t1 = testutil::random_tensor<float>({8, 1, 8}, rng);
    ForwardContext<float> ctx;
    auto out = global_attentive_layer(t1, layer, nullptr, positional_encoding<float>(8, 1), ctx);
    REQUIRE(out.shape() == t1.shape());
  }

  auto t = testutil::random_tensor<float>({8, 6, 8}, rng);

  // Softmax rows sum to one (checked through the capture hook).
  {
    AttentionCapture<float> cap;
    cap.block = 0;
    cap.head = -1;
    ForwardContext<float> ctx;
    ctx.capture = &cap;
    cap.current_block = 0;
    auto out = global_attentive_layer(t, layer, nullptr, positional_encoding<float>(8, 6), ctx);
    REQUIRE(out.shape() == t.shape());
    REQUIRE(cap.records.size() == 2);  // J heads
    for (const auto& rec : cap.records) {
      const std::int64_t b = rec.shape[0], s = rec.shape[1];
      REQUIRE(s == 6);
      for (std::int64_t bi = 0; bi < b; ++bi)
        for (std::int64_t si = 0; si < s; ++si) {
          double sum = 0;
          for (std::int64_t sj = 0; sj < s; ++sj)
            sum += rec.weights[static_cast<std::size_t>((bi * s + si) * s + sj)];
          CHECK(sum == Approx(1.0).epsilon(1e-6));
        }
    }
  }

  // Without positional encoding the layer is permutation-equivariant
  // along S; the positional table re-instates order sensitivity.
  {
    auto zero_pos = Tensor<float>::zeros({8, 6});
    ForwardContext<float> ctx;
    auto base = global_attentive_layer(t, layer, nullptr, zero_pos, ctx);
    std::vector<std::int64_t> perm{2, 5, 0, 3, 1, 4};
    auto permuted = global_attentive_layer(shuffle_segments(t, perm), layer, nullptr, zero_pos, ctx);
    CHECK(testutil::max_abs_diff(permuted, shuffle_segments(base, perm)) <= 1e-5);
  }
}

TEST_CASE("local attention mirrors the global construction along K", "[blocks]") {
  auto hp = tiny_hp({LayerKind::attentive, LayerKind::attentive, false});
  auto model = SeparatorModel<float>::init(hp, 27);
  Rng rng(28);
  auto t = testutil::random_tensor<float>({8, 3, 8}, rng);
  const auto& layer = *model.blocks[0].local_attn;

  ForwardContext<float> ctx;
  auto out = local_attentive_layer(t, layer, Tensor<float>::zeros({8, 8}), ctx);
  REQUIRE(out.shape() == t.shape());

  std::vector<std::int64_t> perm{4, 2, 7, 0, 5, 1, 3, 6};
  auto permuted =
      local_attentive_layer(shuffle_positions(t, perm), layer, Tensor<float>::zeros({8, 8}), ctx);
  CHECK(testutil::max_abs_diff(permuted, shuffle_positions(out, perm)) <= 1e-5);
}

TEST_CASE("low-dim identity maps reproduce the full-dimension layer", "[blocks]") {
  const int k = 8;
  auto hp = tiny_hp({LayerKind::recurrent, LayerKind::attentive, true}, k);  // Q = K
  auto model64 = SeparatorModel<double>::init(hp, 29);
  auto& ld = *model64.blocks[0].lowdim;
  std::fill(ld.down_w.values().begin(), ld.down_w.values().end(), 0.0);
  std::fill(ld.up_w.values().begin(), ld.up_w.values().end(), 0.0);
  std::fill(ld.down_b.values().begin(), ld.down_b.values().end(), 0.0);
  std::fill(ld.up_b.values().begin(), ld.up_b.values().end(), 0.0);
  for (int i = 0; i < k; ++i) {
    ld.down_w.data()[i * k + i] = 1.0;
    ld.up_w.data()[i * k + i] = 1.0;
  }

  Rng rng(30);
  auto t = testutil::random_tensor<double>({8, 4, k}, rng);
  auto pos = positional_encoding<double>(8, 4);
  ForwardContext<double> ctx;
  auto with_lowdim = global_attentive_layer(t, *model64.blocks[0].global_attn, &ld, pos, ctx);
  auto full = global_attentive_layer(t, *model64.blocks[0].global_attn, nullptr, pos, ctx);
  REQUIRE(with_lowdim.shape() == full.shape());
  // Bitwise in f64.
  for (std::int64_t i = 0; i < full.numel(); ++i)
    CHECK(with_lowdim.data()[i] == full.data()[i]);

  // Same check in f32 within 1e-6.
  auto model32 = SeparatorModel<float>::init(hp, 29);
  auto& ld32 = *model32.blocks[0].lowdim;
  std::fill(ld32.down_w.values().begin(), ld32.down_w.values().end(), 0.f);
  std::fill(ld32.up_w.values().begin(), ld32.up_w.values().end(), 0.f);
  std::fill(ld32.down_b.values().begin(), ld32.down_b.values().end(), 0.f);
  std::fill(ld32.up_b.values().begin(), ld32.up_b.values().end(), 0.f);
  for (int i = 0; i < k; ++i) {
    ld32.down_w.data()[i * k + i] = 1.f;
    ld32.up_w.data()[i * k + i] = 1.f;
  }
  Rng rng32(30);
  auto t32 = testutil::random_tensor<float>({8, 4, k}, rng32);
  ForwardContext<float> ctx32;
  auto pos32 = positional_encoding<float>(8, 4);
  auto a32 = global_attentive_layer(t32, *model32.blocks[0].global_attn, &ld32, pos32, ctx32);
  auto b32 = global_attentive_layer(t32, *model32.blocks[0].global_attn, nullptr, pos32, ctx32);
  CHECK(testutil::max_abs_diff(a32, b32) <= 1e-6);
}

TEST_CASE("low-dim output shape is independent of Q and params match the closed form",
          "[blocks]") {
  for (int q : {2, 4, 8}) {
    auto hp = tiny_hp({LayerKind::recurrent, LayerKind::attentive, true}, q);
    auto model = SeparatorModel<float>::init(hp, 31);
    Rng rng(32);
    auto t = testutil::random_tensor<float>({8, 3, 8}, rng);
    ForwardContext<float> ctx;
    auto out = global_attentive_layer(t, *model.blocks[0].global_attn, &*model.blocks[0].lowdim,
                                      positional_encoding<float>(8, 3), ctx);
    CHECK(out.shape() == t.shape());

    std::int64_t lowdim_params = 0;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      const auto& [name, tensor] = model.params.item(i);
      if (name.find("downmap") != std::string::npos || name.find("upmap") != std::string::npos)
        lowdim_params += tensor.numel();
    }
    const std::int64_t k = hp.segment_size;
    CHECK(lowdim_params == q * (k + 1) + k * (q + 1));
  }
}

TEST_CASE("head tying keeps attention parameters independent of K", "[blocks]") {
  auto count_attention_params = [](int k, bool lowdim) {
    HyperParams hp;
    hp.feature_dim = 16;
    hp.window = 4;
    hp.segment_size = k;
    hp.low_dim = lowdim ? 8 : 0;
    hp.hidden = 4;
    hp.heads = 4;
    hp.num_blocks = 1;
    hp.num_sources = 2;
    hp.variant = {LayerKind::recurrent, LayerKind::attentive, lowdim};
    auto model = SeparatorModel<float>::init(hp, 33);
    std::int64_t attn = 0, maps = 0;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      const auto& [name, t] = model.params.item(i);
      if (name.find(".attn.") != std::string::npos) attn += t.numel();
      if (name.find("downmap") != std::string::npos || name.find("upmap") != std::string::npos)
        maps += t.numel();
    }
    return std::pair<std::int64_t, std::int64_t>{attn, maps};
  };

  auto [attn50, maps50] = count_attention_params(50, false);
  auto [attn200, maps200] = count_attention_params(200, false);
  CHECK(attn50 == attn200);
  CHECK(maps50 == 0);
  CHECK(maps200 == 0);

  auto [attn50ld, maps50ld] = count_attention_params(50, true);
  auto [attn200ld, maps200ld] = count_attention_params(200, true);
  CHECK(attn50ld == attn200ld);
  CHECK(maps50ld != maps200ld);  // only the affine maps depend on K
}

TEST_CASE("stacked blocks preserve shape across the variant matrix", "[blocks]") {
  Rng rng(34);
  for (auto local : {LayerKind::recurrent, LayerKind::attentive}) {
    for (auto global : {LayerKind::recurrent, LayerKind::attentive}) {
      auto hp = tiny_hp({local, global, false});
      hp.num_blocks = 2;
      auto model = SeparatorModel<float>::init(hp, 35);
      auto t = testutil::random_tensor<float>({8, 4, 8}, rng);
      ForwardContext<float> ctx;
      Tensor<float> cur = t;
      for (const auto& blk : model.blocks) cur = galr_block(cur, blk, model.pos_table, ctx);
      CHECK(cur.shape() == t.shape());
    }
  }
}

TEST_CASE("full block gradient check", "[blocks]") {
  auto hp = tiny_hp({LayerKind::recurrent, LayerKind::attentive, true}, 4);
  auto model = SeparatorModel<double>::init(hp, 36);
  Rng rng(37);
  auto t = testutil::random_tensor<double>({8, 4, 8}, rng);

  std::vector<std::pair<std::string, Tensor<double>>> leaves = {{"input", t}};
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const auto& [name, tensor] = model.params.item(i);
    if (name.rfind("blocks.0", 0) == 0) leaves.push_back({name, tensor});
  }
  auto res = gradcheck(
      [&] {
        ForwardContext<double> ctx;
        return sum_all(tanh(galr_block(t, model.blocks[0], model.pos_table, ctx)));
      },
      leaves);
  INFO("worst " << res.worst_leaf << " err " << res.max_rel_err);
  CHECK(res.max_rel_err <= 1e-3);
}

TEST_CASE("inference is deterministic with dropout disabled", "[blocks]") {
  auto hp = tiny_hp({LayerKind::recurrent, LayerKind::attentive, true}, 4);
  hp.dropout = 0.1;  // configured, but inactive outside training
  auto model = SeparatorModel<float>::init(hp, 38);
  auto data = gen_synthetic(39, 1, 0.05, SyntheticKind::sinusoid_pair);
  auto a = separate(model, data[0].mixture);
  auto b = separate(model, data[0].mixture);
  for (std::size_t c = 0; c < a.size(); ++c) {
    REQUIRE(a[c].samples.size() == b[c].samples.size());
    for (std::size_t i = 0; i < a[c].samples.size(); ++i)
      CHECK(a[c].samples[i] == b[c].samples[i]);
  }
}

TEST_CASE("dropout regularizes only in training mode", "[blocks]") {
  Rng rng(40);
  auto x = testutil::random_tensor<float>({4, 4}, rng);
  Rng drop_rng(41);
  auto same = dropout(x, 0.5, drop_rng, false);
  CHECK(testutil::max_abs_diff(same, x) == 0.0);
  auto dropped = dropout(x, 0.5, drop_rng, true);
  CHECK(testutil::max_abs_diff(dropped, x) > 0.0);
}

TEST_CASE("attention dump matrices are constant across tied sequences", "[blocks]") {
  auto hp = tiny_hp({LayerKind::recurrent, LayerKind::attentive, false});
  auto model = SeparatorModel<float>::init(hp, 42);
  Rng rng(43);

  // Constant along k: every tied sequence sees identical values.
  Tensor<float> t({8, 5, 8});
  for (std::int64_t d = 0; d < 8; ++d)
    for (std::int64_t s = 0; s < 5; ++s) {
      const float v = static_cast<float>(rng.uniform(-1, 1));
      for (std::int64_t k = 0; k < 8; ++k) t.data()[(d * 5 + s) * 8 + k] = v;
    }

  AttentionCapture<float> cap;
  cap.block = 0;
  cap.head = 0;
  cap.current_block = 0;
  ForwardContext<float> ctx;
  ctx.capture = &cap;
  global_attentive_layer(t, *model.blocks[0].global_attn, nullptr,
                         positional_encoding<float>(8, 5), ctx);
  REQUIRE(cap.records.size() == 1);
  const auto& rec = cap.records[0];
  REQUIRE(rec.shape == Shape{8, 5, 5});  // K sequences of S x S weights
  for (std::int64_t b = 1; b < 8; ++b)
    for (std::int64_t i = 0; i < 25; ++i)
      CHECK(rec.weights[static_cast<std::size_t>(b * 25 + i)] ==
            Approx(rec.weights[static_cast<std::size_t>(i)]).margin(1e-6));
}

TEST_CASE("path length: attention is constant-depth, recurrence is linear", "[blocks]") {
  auto hp = tiny_hp({LayerKind::recurrent, LayerKind::recurrent, false});
  auto model = SeparatorModel<float>::init(hp, 44);
  auto hp_att = tiny_hp({LayerKind::recurrent, LayerKind::attentive, false});
  auto model_att = SeparatorModel<float>::init(hp_att, 44);
  Rng rng(45);

  auto depth_of_global = [&](int s, bool attentive) {
    auto t = testutil::random_tensor<float>({8, s, 8}, rng);
    t.set_requires_grad(true);
    ForwardContext<float> ctx;
    Tensor<float> out =
        attentive ? global_attentive_layer(t, *model_att.blocks[0].global_attn, nullptr,
                                           positional_encoding<float>(8, s), ctx)
                  : global_recurrent_layer(t, *model.blocks[0].global_rec);
    return graph_depth(out);
  };

  // Attentive global path: depth does not grow with the segment count.
  CHECK(depth_of_global(4, true) == depth_of_global(16, true));
  // Recurrent global path: depth grows linearly with the segment count.
  const auto d4 = depth_of_global(4, false);
  const auto d16 = depth_of_global(16, false);
  CHECK(d16 > d4 + 3 * (16 - 4));

  // Both variants pay the local recurrent chain along K, so the dual-path
  // classes are O(K) with global attention and O(S+K) with global
  // recurrence.
  CHECK(std::string(mpl(Arch::galr)) == "O(K)");
  CHECK(std::string(mpl(Arch::dprnn)) == "O(S+K)");
  CHECK(std::string(mpl(Arch::dptnet)) == "O(S+K)");

  // One attention hop connects every pair of segment positions: zeroing a
  // single input segment changes the output at every other segment.
  auto base = testutil::random_tensor<float>({8, 6, 8}, rng);
  ForwardContext<float> ctx;
  auto pos = positional_encoding<float>(8, 6);
  auto ref = global_attentive_layer(base, *model_att.blocks[0].global_attn, nullptr, pos, ctx);
  Tensor<float> copy(base.shape());
  std::copy(base.data(), base.data() + base.numel(), copy.data());
  for (std::int64_t d = 0; d < 8; ++d)
    for (std::int64_t k = 0; k < 8; ++k) copy.data()[(d * 6 + 2) * 8 + k] += 1.0f;
  auto out2 = global_attentive_layer(copy, *model_att.blocks[0].global_attn, nullptr, pos, ctx);
  for (std::int64_t s = 0; s < 6; ++s) {
    double diff = 0;
    for (std::int64_t d = 0; d < 8; ++d)
      for (std::int64_t k = 0; k < 8; ++k)
        diff = std::max(diff, std::abs(static_cast<double>(out2.data()[(d * 6 + s) * 8 + k]) -
                                       ref.data()[(d * 6 + s) * 8 + k]));
    CHECK(diff > 0.0);
  }
}
