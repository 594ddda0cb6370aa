#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace galr {

/// Error taxonomy shared by the whole library. Every throw site picks a kind
/// so callers (and the CLI) can report a machine-greppable `error[kind]:`
/// prefix without string matching on free-form messages.
class Error : public std::runtime_error {
 public:
  enum class Kind {
    dimension,           // shape / extent mismatch
    usage,               // API misuse (bad argument, wrong call order)
    config,              // invalid hyperparameter combination
    input,               // unusable input data (too short, all-zero target)
    format,              // unsupported file format
    io,                  // filesystem failure
    numeric,             // NaN/Inf detected, divergence
    bad_magic,           // checkpoint: wrong magic bytes
    bad_version,         // checkpoint: unknown format version
    truncated,           // checkpoint: file shorter than its header claims
    payload_mismatch,    // checkpoint: directory and payload disagree
    directory_mismatch,  // checkpoint: tensor directory does not match model
  };

  Error(Kind kind, const std::string& msg)
      : std::runtime_error(std::string("error[") + kind_name(kind) + "]: " + msg),
        kind_(kind) {}

  Kind kind() const { return kind_; }

  static const char* kind_name(Kind k) {
    switch (k) {
      case Kind::dimension: return "dimension";
      case Kind::usage: return "usage";
      case Kind::config: return "config";
      case Kind::input: return "input";
      case Kind::format: return "format";
      case Kind::io: return "io";
      case Kind::numeric: return "numeric";
      case Kind::bad_magic: return "bad_magic";
      case Kind::bad_version: return "bad_version";
      case Kind::truncated: return "truncated";
      case Kind::payload_mismatch: return "payload_mismatch";
      case Kind::directory_mismatch: return "directory_mismatch";
    }
    return "unknown";
  }

 private:
  Kind kind_;
};

inline void require(bool ok, Error::Kind kind, const std::string& msg) {
  if (!ok) throw Error(kind, msg);
}

/// Deterministic random source. mt19937_64 has a standardized sequence and we
/// derive doubles from raw 53-bit draws, so streams are bit-identical across
/// platforms and standard libraries (std::uniform_real_distribution is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t raw() { return eng_(); }

  /// Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0);
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  /// Uniform integer in [0, n).
  std::uint64_t integer(std::uint64_t n) {
    return n == 0 ? 0 : eng_() % n;
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

/// Forward-pass instrumentation. When a scope is active, every tensor op
/// reports its work here; the analytic cost model reproduces the same counts
/// closed-form and the test suite checks exact agreement.
struct OpCounters {
  std::uint64_t macs = 0;           // scalar multiplies (matmul/conv/mul/scale)
  std::uint64_t adds = 0;           // elementwise add/sub outputs
  std::uint64_t nonlin = 0;         // tanh/sigmoid/relu/exp/log/clamp/div outputs
  std::uint64_t softmax_elems = 0;  // softmax output elements
  std::uint64_t ln_elems = 0;       // layer-norm output elements
  std::uint64_t alloc_elems = 0;    // activation elements materialized

  OpCounters& operator+=(const OpCounters& o) {
    macs += o.macs;
    adds += o.adds;
    nonlin += o.nonlin;
    softmax_elems += o.softmax_elems;
    ln_elems += o.ln_elems;
    alloc_elems += o.alloc_elems;
    return *this;
  }

  /// FLOP convention: 2 per MAC, 1 per add and per pointwise nonlinearity,
  /// 4 per softmax element, 8 per layer-norm element.
  double flops() const {
    return 2.0 * static_cast<double>(macs) + static_cast<double>(adds) +
           static_cast<double>(nonlin) + 4.0 * static_cast<double>(softmax_elems) +
           8.0 * static_cast<double>(ln_elems);
  }
};

namespace detail {
inline thread_local OpCounters* tl_counters = nullptr;
inline thread_local bool tl_grad_enabled = true;
inline std::atomic<bool> g_check_finite{false};
}  // namespace detail

struct CounterScope {
  explicit CounterScope(OpCounters& c) : prev_(detail::tl_counters) {
    detail::tl_counters = &c;
  }
  ~CounterScope() { detail::tl_counters = prev_; }
  CounterScope(const CounterScope&) = delete;
  CounterScope& operator=(const CounterScope&) = delete;

 private:
  OpCounters* prev_;
};

inline void count_macs(std::uint64_t n) {
  if (detail::tl_counters) detail::tl_counters->macs += n;
}
inline void count_adds(std::uint64_t n) {
  if (detail::tl_counters) detail::tl_counters->adds += n;
}
inline void count_nonlin(std::uint64_t n) {
  if (detail::tl_counters) detail::tl_counters->nonlin += n;
}
inline void count_softmax(std::uint64_t n) {
  if (detail::tl_counters) detail::tl_counters->softmax_elems += n;
}
inline void count_ln(std::uint64_t n) {
  if (detail::tl_counters) detail::tl_counters->ln_elems += n;
}
inline void count_alloc(std::uint64_t n) {
  if (detail::tl_counters) detail::tl_counters->alloc_elems += n;
}

/// Gradient recording is on by default; wrap inference in a NoGradGuard to
/// skip graph construction.
inline bool grad_enabled() { return detail::tl_grad_enabled; }

struct NoGradGuard {
  NoGradGuard() : prev_(detail::tl_grad_enabled) { detail::tl_grad_enabled = false; }
  ~NoGradGuard() { detail::tl_grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Debug toggle: when enabled, every op output is scanned for NaN/Inf and a
/// numeric error is raised at the op that produced it.
inline void set_debug_check_finite(bool on) { detail::g_check_finite.store(on); }
inline bool debug_check_finite_enabled() {
  return detail::g_check_finite.load(std::memory_order_relaxed);
}

}  // namespace galr
