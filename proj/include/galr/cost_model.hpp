#pragma once

#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "galr/separator.hpp"

namespace galr {

enum class Arch { galr, dprnn, dptnet };

inline Arch arch_from_string(const std::string& s) {
  if (s == "galr") return Arch::galr;
  if (s == "dprnn") return Arch::dprnn;
  if (s == "dptnet") return Arch::dptnet;
  throw Error(Error::Kind::usage, "unknown architecture '" + s + "'");
}

inline const char* arch_name(Arch a) {
  switch (a) {
    case Arch::galr: return "galr";
    case Arch::dprnn: return "dprnn";
    case Arch::dptnet: return "dptnet";
  }
  return "?";
}

/// Maximum-path-length class: the number of sequential operations needed to
/// connect any two positions of the dual-path grid.
inline const char* mpl(Arch a) {
  return a == Arch::galr ? "O(K)" : "O(S+K)";
}

// ---------------------------------------------------------------------------
// Leading complexity terms

struct TermValue {
  std::string expr;
  double value = 0.0;
};

struct ComplexityDims {
  std::int64_t feature_dim = 64;  // D
  std::int64_t hidden = 128;      // H
  std::int64_t segment_size = 100;  // K
  std::int64_t low_dim = 32;      // Q
  std::int64_t segments = 100;    // S
};

struct ComplexityTerms {
  std::vector<TermValue> local;
  std::vector<TermValue> global;
  std::string mpl_class;
};

/// The tabulated leading terms of the three dual-path block types,
/// instantiated numerically.
inline ComplexityTerms complexity_terms(Arch arch, const ComplexityDims& dims) {
  const double d = static_cast<double>(dims.feature_dim);
  const double h = static_cast<double>(dims.hidden);
  const double k = static_cast<double>(dims.segment_size);
  const double q = static_cast<double>(dims.low_dim);
  const double s = static_cast<double>(dims.segments);
  require(d > 0 && h > 0 && k > 0 && s > 0, Error::Kind::usage,
          "complexity_terms: dimensions must be positive");

  ComplexityTerms out;
  out.mpl_class = mpl(arch);
  const TermValue rnn_term{"K*S*H^2", k * s * h * h};
  switch (arch) {
    case Arch::galr:
      require(q > 0, Error::Kind::usage, "complexity_terms: GALR needs Q > 0");
      out.local = {rnn_term};
      out.global = {{"Q*S^2*D", q * s * s * d}};
      break;
    case Arch::dprnn:
      out.local = {rnn_term};
      out.global = {rnn_term};
      break;
    case Arch::dptnet:
      out.local = {rnn_term, {"K^2*S*D", k * k * s * d}};
      out.global = {rnn_term, {"K*S^2*D", k * s * s * d}};
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Exact analytic counters
//
// The functions below mirror the reference forward pass operation by
// operation, so their MAC / activation counts match the instrumented
// implementation exactly (the test suite checks this). Conventions live in
// OpCounters::flops().

namespace cost_detail {

struct Mirror {
  OpCounters c;

  void matmul(std::int64_t m, std::int64_t k, std::int64_t n) {
    c.macs += static_cast<std::uint64_t>(m * k * n);
    c.alloc_elems += static_cast<std::uint64_t>(m * n);
  }
  void bmm(std::int64_t b, std::int64_t m, std::int64_t n, std::int64_t k) {
    c.macs += static_cast<std::uint64_t>(b * m * n * k);
    c.alloc_elems += static_cast<std::uint64_t>(b * m * n);
  }
  void ew_add(std::int64_t n) {
    c.adds += static_cast<std::uint64_t>(n);
    c.alloc_elems += static_cast<std::uint64_t>(n);
  }
  void ew_mul(std::int64_t n) {
    c.macs += static_cast<std::uint64_t>(n);
    c.alloc_elems += static_cast<std::uint64_t>(n);
  }
  void nonlinearity(std::int64_t n) {
    c.nonlin += static_cast<std::uint64_t>(n);
    c.alloc_elems += static_cast<std::uint64_t>(n);
  }
  void softmax_op(std::int64_t n) {
    c.softmax_elems += static_cast<std::uint64_t>(n);
    c.alloc_elems += static_cast<std::uint64_t>(n);
  }
  void layer_norm(std::int64_t n) {
    c.ln_elems += static_cast<std::uint64_t>(n);
    c.alloc_elems += static_cast<std::uint64_t>(n);
  }
  void copy(std::int64_t n) { c.alloc_elems += static_cast<std::uint64_t>(n); }
  void affine_last(std::int64_t p, std::int64_t q, std::int64_t k) {
    c.macs += static_cast<std::uint64_t>(p * q * k);
    c.adds += static_cast<std::uint64_t>(p * q);  // bias
    c.alloc_elems += static_cast<std::uint64_t>(p * q);
  }
  void conv(std::int64_t cout, std::int64_t lp, std::int64_t cin, std::int64_t m) {
    c.macs += static_cast<std::uint64_t>(cout * lp * cin * m);
    c.alloc_elems += static_cast<std::uint64_t>(cout * lp);
  }
  void overlap(std::int64_t in_elems, std::int64_t out_elems) {
    c.adds += static_cast<std::uint64_t>(in_elems);
    c.alloc_elems += static_cast<std::uint64_t>(out_elems);
  }
};

/// Bi-LSTM over [Din, B, T]: per-timestep input slices, two directions of
/// the gate pipeline, per-step direction concat, and the final stack.
inline OpCounters bilstm_cost(std::int64_t din, std::int64_t h, std::int64_t b,
                              std::int64_t t) {
  Mirror m;
  m.copy(din * b * t);  // T slice_last copies of [Din, B]
  for (int dir = 0; dir < 2; ++dir) {
    for (std::int64_t step = 0; step < t; ++step) {
      m.matmul(4 * h, din, b);
      m.matmul(4 * h, h, b);
      m.ew_add(4 * h * b);  // sum the two products
      m.ew_add(4 * h * b);  // bias
      m.copy(4 * h * b);    // four gate slices
      m.nonlinearity(3 * h * b);  // three sigmoids
      m.nonlinearity(h * b);      // candidate tanh
      m.ew_mul(h * b);            // forget * cell
      m.ew_mul(h * b);            // input * candidate
      m.ew_add(h * b);            // new cell
      m.nonlinearity(h * b);      // tanh(cell)
      m.ew_mul(h * b);            // output gate
    }
  }
  m.copy(2 * h * b * t);  // per-step direction concats
  m.copy(2 * h * b * t);  // stack_last
  return m.c;
}

/// Recurrent phase on [D, S, K]: sequence axis `t_axis`, batch `b_axis`.
/// The global orientation pays two permute copies.
inline OpCounters recurrent_layer_cost(std::int64_t d, std::int64_t h, std::int64_t seq,
                                       std::int64_t batch, bool permuted) {
  Mirror m;
  const std::int64_t dsk = d * seq * batch;
  if (permuted) m.copy(dsk);
  m.c += bilstm_cost(d, h, batch, seq);
  m.matmul(d, 2 * h, batch * seq);
  m.ew_add(dsk);  // projection bias
  m.layer_norm(dsk);
  if (permuted) m.copy(dsk);
  m.ew_add(dsk);  // residual
  return m.c;
}

/// Multi-head attention over [D, T, B] plus the sub-layer connection.
inline OpCounters attentive_sublayer_cost(std::int64_t d, std::int64_t heads,
                                          std::int64_t t, std::int64_t b) {
  Mirror m;
  const std::int64_t dh = d / heads;
  const std::int64_t dtb = d * t * b;
  for (int stage = 0; stage < 3; ++stage) {  // shared q/k/v maps
    m.matmul(d, d, t * b);
    m.ew_add(dtb);
  }
  for (std::int64_t j = 0; j < heads; ++j) {
    for (int stage = 0; stage < 3; ++stage) {  // per-head maps + permutes
      m.matmul(dh, d, t * b);
      m.copy(dh * t * b);
    }
    m.bmm(b, t, t, dh);      // scores
    m.ew_mul(b * t * t);     // 1/sqrt(dh) scaling
    m.softmax_op(b * t * t);
    m.bmm(b, dh, t, t);      // apply to values
    m.copy(dh * t * b);      // permute back
  }
  m.copy(dtb);        // head concat
  m.matmul(d, d, t * b);  // head mixing
  m.ew_add(dtb);      // mixing bias
  m.ew_add(dtb);      // sub-layer sum (dropout is off at inference)
  m.layer_norm(dtb);
  return m.c;
}

inline OpCounters global_attentive_cost(std::int64_t d, std::int64_t heads, std::int64_t s,
                                        std::int64_t k, std::int64_t q /* 0 = full */) {
  Mirror m;
  const std::int64_t width = q > 0 ? q : k;
  if (q > 0) m.affine_last(d * s, q, k);  // down map
  m.layer_norm(d * s * width);
  m.ew_add(d * s * width);  // positional encoding
  m.c += attentive_sublayer_cost(d, heads, s, width);
  if (q > 0) m.affine_last(d * s, k, q);  // up map
  m.ew_add(d * s * k);  // residual
  return m.c;
}

inline OpCounters local_attentive_cost(std::int64_t d, std::int64_t heads, std::int64_t s,
                                       std::int64_t k) {
  Mirror m;
  const std::int64_t dsk = d * s * k;
  m.copy(dsk);  // permute to [D, K, S]
  m.layer_norm(dsk);
  m.ew_add(dsk);  // positional encoding
  m.c += attentive_sublayer_cost(d, heads, k, s);
  m.copy(dsk);  // permute back
  m.ew_add(dsk);  // residual
  return m.c;
}

}  // namespace cost_detail

// ---------------------------------------------------------------------------
// Cost report

struct CostComponent {
  std::string name;
  OpCounters counters;
  std::int64_t params = 0;
};

struct CostReport {
  HyperParams hp;
  double input_seconds = 0.0;
  int sample_rate = 8000;
  std::int64_t samples = 0;
  std::int64_t frames = 0;    // I
  std::int64_t segments = 0;  // S
  std::vector<CostComponent> components;
  OpCounters total;
  std::int64_t param_count = 0;
  std::string mpl_class;

  double gflops() const { return total.flops() / 1e9; }
  std::uint64_t activation_elements() const { return total.alloc_elems; }

  std::string to_text() const {
    std::ostringstream os;
    os << "config: D=" << hp.feature_dim << " M=" << hp.window << " K=" << hp.segment_size
       << " Q=" << hp.low_dim << " H=" << hp.hidden << " J=" << hp.heads
       << " N=" << hp.num_blocks << " C=" << hp.num_sources << " local="
       << layer_kind_name(hp.variant.local) << " global=" << layer_kind_name(hp.variant.global)
       << "\n";
    os << "input: " << input_seconds << " s @ " << sample_rate << " Hz (" << samples
       << " samples, I=" << frames << " frames, S=" << segments << " segments)\n";
    os << "params: " << param_count << "\n";
    os << "mpl: " << mpl_class << "\n";
    for (const auto& comp : components) {
      os << "  " << comp.name << ": macs=" << comp.counters.macs
         << " flops=" << comp.counters.flops() << " activations=" << comp.counters.alloc_elems;
      if (comp.params > 0) os << " params=" << comp.params;
      os << "\n";
    }
    os << "total: macs=" << total.macs << " gflops=" << gflops()
       << " activation_elements=" << total.alloc_elems << "\n";
    return os.str();
  }

  std::string csv_header() const {
    return "arch,D,M,K,Q,H,J,N,params,gflops,activation_elements";
  }
  std::string to_csv_row(const std::string& arch) const {
    std::ostringstream os;
    os << arch << "," << hp.feature_dim << "," << hp.window << "," << hp.segment_size << ","
       << hp.low_dim << "," << hp.hidden << "," << hp.heads << "," << hp.num_blocks << ","
       << param_count << "," << gflops() << "," << total.alloc_elems;
    return os.str();
  }
};

namespace cost_detail {

inline std::int64_t recurrent_layer_params(const HyperParams& hp) {
  const std::int64_t d = hp.feature_dim, h = hp.hidden;
  return 2 * (4 * h * d + 4 * h * h + 4 * h) + d * 2 * h + d + 2 * d;
}

inline std::int64_t attentive_layer_params(const HyperParams& hp, bool lowdim) {
  const std::int64_t d = hp.feature_dim, k = hp.segment_size, q = hp.low_dim;
  std::int64_t n = 2 * d + (3 * (d * d + d) + 3 * d * d + d * d + d) + 2 * d;
  if (lowdim) n += q * (k + 1) + k * (q + 1);
  return n;
}

}  // namespace cost_detail

/// Exact analytic cost of one inference forward pass (the separate pipeline)
/// for a given input duration. All counts mirror the reference
/// implementation one operation at a time.
inline CostReport flops_estimate(const HyperParams& hp, double input_seconds,
                                 int sample_rate = 8000) {
  hp.validate();
  CostReport rep;
  rep.hp = hp;
  rep.input_seconds = input_seconds;
  rep.sample_rate = sample_rate;
  rep.samples = static_cast<std::int64_t>(std::llround(input_seconds * sample_rate));
  rep.frames = frame_count(rep.samples, hp.window);
  rep.param_count = count_params(hp);
  rep.mpl_class = hp.variant.global == LayerKind::attentive ? "O(K)" : "O(S+K)";
  if (rep.frames == 0) {
    rep.segments = 0;
    return rep;
  }
  rep.segments = segment_count(rep.frames, hp.segment_size);

  const std::int64_t d = hp.feature_dim, m = hp.window, k = hp.segment_size;
  const std::int64_t q = hp.low_dim, h = hp.hidden, j = hp.heads;
  const std::int64_t c = hp.num_sources;
  const std::int64_t frames = rep.frames, s = rep.segments;
  const std::int64_t dsk = d * s * k;
  const std::int64_t di = d * frames;

  {
    cost_detail::Mirror enc;
    enc.conv(d, frames, 1, m);
    enc.nonlinearity(di);  // rectifier
    rep.components.push_back({"encoder", enc.c, d * m});
  }
  {
    cost_detail::Mirror seg;
    seg.copy(dsk);
    rep.components.push_back({"segmentation", seg.c, 0});
  }
  {
    OpCounters local =
        hp.variant.local == LayerKind::recurrent
            ? cost_detail::recurrent_layer_cost(d, h, k, s, /*permuted=*/false)
            : cost_detail::local_attentive_cost(d, j, s, k);
    OpCounters per_block_local{};
    for (int n = 0; n < hp.num_blocks; ++n) per_block_local += local;
    std::int64_t lp = hp.variant.local == LayerKind::recurrent
                          ? cost_detail::recurrent_layer_params(hp)
                          : cost_detail::attentive_layer_params(hp, false);
    rep.components.push_back({"blocks.local", per_block_local, hp.num_blocks * lp});

    OpCounters global =
        hp.variant.global == LayerKind::recurrent
            ? cost_detail::recurrent_layer_cost(d, h, s, k, /*permuted=*/true)
            : cost_detail::global_attentive_cost(d, j, s, k,
                                                 hp.variant.use_lowdim ? q : 0);
    OpCounters per_block_global{};
    for (int n = 0; n < hp.num_blocks; ++n) per_block_global += global;
    std::int64_t gp = hp.variant.global == LayerKind::recurrent
                          ? cost_detail::recurrent_layer_params(hp)
                          : cost_detail::attentive_layer_params(hp, hp.variant.use_lowdim);
    rep.components.push_back({"blocks.global", per_block_global, hp.num_blocks * gp});
  }
  {
    cost_detail::Mirror mh;
    mh.matmul(c * d, d, s * k);
    mh.ew_add(c * dsk);  // split bias
    for (std::int64_t ci = 0; ci < c; ++ci) {
      mh.copy(dsk);        // per-source row slice
      mh.overlap(dsk, di); // merge segments
      mh.matmul(d, d, frames);
      mh.ew_add(di);
      mh.nonlinearity(di);  // tanh branch
      mh.matmul(d, d, frames);
      mh.ew_add(di);
      mh.nonlinearity(di);  // sigmoid branch
      mh.ew_mul(di);        // gate product
      mh.matmul(d, d, frames);
      mh.ew_add(di);
      mh.nonlinearity(di);  // mask rectifier
    }
    rep.components.push_back(
        {"mask_head", mh.c, (c * d * d + c * d) + 3 * (d * d + d)});
  }
  {
    cost_detail::Mirror dec;
    for (std::int64_t ci = 0; ci < c; ++ci) {
      dec.ew_mul(di);  // apply mask to the encoded mixture
      dec.matmul(m, d, frames);
      dec.overlap(m * frames, rep.samples);
    }
    rep.components.push_back({"decoder", dec.c, m * d});
  }

  for (const auto& comp : rep.components) rep.total += comp.counters;
  return rep;
}

/// Activation elements materialized by one forward pass (the memory figure;
/// reported in elements and compared only as ratios/orderings).
inline std::uint64_t memory_estimate(const HyperParams& hp, double input_seconds,
                                     int sample_rate = 8000) {
  return flops_estimate(hp, input_seconds, sample_rate).total.alloc_elems;
}

/// Hyperparameters for the reference architectures of the comparison tables.
inline HyperParams table_config(Arch arch, int feature_dim, int window, int segment_size,
                                int low_dim) {
  HyperParams hp;
  hp.feature_dim = feature_dim;
  hp.window = window;
  hp.segment_size = segment_size;
  hp.hidden = 128;
  hp.heads = 8;
  hp.num_blocks = 6;
  hp.num_sources = 2;
  switch (arch) {
    case Arch::galr:
      hp.low_dim = low_dim;
      hp.variant = {LayerKind::recurrent, LayerKind::attentive, low_dim > 0};
      break;
    case Arch::dprnn:
      hp.low_dim = 0;
      hp.variant = {LayerKind::recurrent, LayerKind::recurrent, false};
      break;
    case Arch::dptnet:
      throw Error(Error::Kind::usage,
                  "dptnet is available as complexity terms only, not as a runnable config");
  }
  return hp;
}

}  // namespace galr
