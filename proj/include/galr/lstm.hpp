#pragma once

#include <vector>

#include "galr/ops.hpp"

namespace galr {

/// One LSTM direction. Gates are packed in the row order input, forget,
/// cell-candidate, output.
template <typename S>
struct LstmDirection {
  Tensor<S> w_ih;  // [4H, Din]
  Tensor<S> w_hh;  // [4H, H]
  Tensor<S> bias;  // [4H]
};

template <typename S>
struct BiLstm {
  LstmDirection<S> fwd;
  LstmDirection<S> bwd;
  int hidden = 0;

  /// All weights uniform in +-1/sqrt(H); the forget-gate bias starts at 1.
  static BiLstm init(int input_dim, int hidden, Rng& rng) {
    BiLstm p;
    p.hidden = hidden;
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden));
    auto make_dir = [&](LstmDirection<S>& d) {
      auto fill = [&](Tensor<S>& t, Shape shape) {
        t = Tensor<S>(std::move(shape), true);
        for (std::int64_t i = 0; i < t.numel(); ++i)
          t.data()[i] = static_cast<S>(rng.uniform(-bound, bound));
      };
      fill(d.w_ih, {4 * hidden, input_dim});
      fill(d.w_hh, {4 * hidden, hidden});
      fill(d.bias, {4 * hidden});
      for (std::int64_t i = hidden; i < 2 * hidden; ++i) d.bias.data()[i] = S(1);
    };
    make_dir(p.fwd);
    make_dir(p.bwd);
    return p;
  }
};

namespace detail {

template <typename S>
struct LstmState {
  Tensor<S> h;
  Tensor<S> c;
};

template <typename S>
LstmState<S> lstm_cell(const LstmDirection<S>& dir, int hidden, const Tensor<S>& x_t,
                       const LstmState<S>& prev) {
  Tensor<S> gates = add(add(matmul(dir.w_ih, x_t), matmul(dir.w_hh, prev.h)), dir.bias);
  Tensor<S> gi = sigmoid(slice_rows(gates, 0, hidden));
  Tensor<S> gf = sigmoid(slice_rows(gates, hidden, 2 * hidden));
  Tensor<S> gc = tanh(slice_rows(gates, 2 * hidden, 3 * hidden));
  Tensor<S> go = sigmoid(slice_rows(gates, 3 * hidden, 4 * hidden));
  Tensor<S> c = add(mul(gf, prev.c), mul(gi, gc));
  Tensor<S> h = mul(go, tanh(c));
  return {std::move(h), std::move(c)};
}

}  // namespace detail

/// Bi-directional LSTM over the last axis of x [Din, B, T]; every batch
/// column b runs an independent sequence with shared weights. Zero initial
/// state; the two directions' hidden states are concatenated to [2H, B, T].
template <typename S>
Tensor<S> bilstm_run(const Tensor<S>& x, const BiLstm<S>& p) {
  require(x.rank() == 3, Error::Kind::dimension, "bilstm: input must be [Din, B, T]");
  const std::int64_t batch = x.dim(1);
  const std::int64_t steps = x.dim(2);
  const int h = p.hidden;

  std::vector<Tensor<S>> inputs;
  inputs.reserve(static_cast<std::size_t>(steps));
  for (std::int64_t t = 0; t < steps; ++t) inputs.push_back(slice_last(x, t));

  std::vector<Tensor<S>> out_f(static_cast<std::size_t>(steps));
  std::vector<Tensor<S>> out_b(static_cast<std::size_t>(steps));
  detail::LstmState<S> state{Tensor<S>(Shape{h, batch}), Tensor<S>(Shape{h, batch})};
  for (std::int64_t t = 0; t < steps; ++t) {
    state = detail::lstm_cell(p.fwd, h, inputs[static_cast<std::size_t>(t)], state);
    out_f[static_cast<std::size_t>(t)] = state.h;
  }
  state = {Tensor<S>(Shape{h, batch}), Tensor<S>(Shape{h, batch})};
  for (std::int64_t t = steps - 1; t >= 0; --t) {
    state = detail::lstm_cell(p.bwd, h, inputs[static_cast<std::size_t>(t)], state);
    out_b[static_cast<std::size_t>(t)] = state.h;
  }

  std::vector<Tensor<S>> merged(static_cast<std::size_t>(steps));
  for (std::int64_t t = 0; t < steps; ++t)
    merged[static_cast<std::size_t>(t)] = concat_rows<S>(
        {out_f[static_cast<std::size_t>(t)], out_b[static_cast<std::size_t>(t)]});
  return stack_last(merged);
}

/// Single-sequence form: seq is [Din, K], result [2H, K].
template <typename S>
Tensor<S> bilstm_forward(const Tensor<S>& seq, const BiLstm<S>& p) {
  require(seq.rank() == 2, Error::Kind::dimension, "bilstm_forward: input must be [Din, K]");
  Tensor<S> x3 = reshape(seq, {seq.dim(0), std::int64_t(1), seq.dim(1)});
  Tensor<S> out = bilstm_run(x3, p);
  return reshape(out, {out.dim(0), out.dim(2)});
}

}  // namespace galr
