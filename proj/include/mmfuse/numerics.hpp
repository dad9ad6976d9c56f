#pragma once

// Deterministic low-level math used by every other component: finite-checked
// vector types, a counter-based splittable RNG, radix-2 FFT, circular
// convolution and a numerically stable softmax. Everything here is a pure
// function over value types, so all of it is safe to call concurrently.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmfuse/errors.hpp"

namespace mmfuse {

inline bool is_power_of_two(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

// Dense real vector. Constructors reject NaN/Inf so downstream code can rely
// on finite entries; in-place mutation through operator[] is the caller's
// responsibility.
class RealVec {
 public:
  RealVec() = default;
  explicit RealVec(std::size_t n, double fill = 0.0) : v_(n, fill) { check(fill); }
  RealVec(std::initializer_list<double> xs) : v_(xs) { check_all(); }
  RealVec(std::vector<double> xs) : v_(std::move(xs)) { check_all(); }  // NOLINT: implicit by design

  std::size_t size() const { return v_.size(); }
  bool empty() const { return v_.empty(); }
  double operator[](std::size_t i) const { return v_[i]; }
  double& operator[](std::size_t i) { return v_[i]; }
  const double* data() const { return v_.data(); }
  auto begin() const { return v_.begin(); }
  auto end() const { return v_.end(); }
  const std::vector<double>& values() const { return v_; }

  friend bool operator==(const RealVec& a, const RealVec& b) { return a.v_ == b.v_; }

 private:
  static void check(double x) {
    if (!std::isfinite(x)) throw DataError("RealVec: non-finite entry");
  }
  void check_all() const {
    for (double x : v_) check(x);
  }
  std::vector<double> v_;
};

// Split real/imaginary representation; lengths must agree.
struct ComplexVec {
  std::vector<double> re;
  std::vector<double> im;

  ComplexVec() = default;
  explicit ComplexVec(std::size_t n) : re(n, 0.0), im(n, 0.0) {}
  ComplexVec(std::vector<double> r, std::vector<double> i) : re(std::move(r)), im(std::move(i)) {
    if (re.size() != im.size()) throw DimensionError("ComplexVec: re/im length mismatch");
    for (double x : re)
      if (!std::isfinite(x)) throw DataError("ComplexVec: non-finite entry");
    for (double x : im)
      if (!std::isfinite(x)) throw DataError("ComplexVec: non-finite entry");
  }
  static ComplexVec from_real(const RealVec& x) {
    ComplexVec c(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) c.re[i] = x[i];
    return c;
  }
  std::size_t size() const { return re.size(); }
};

// ---------------------------------------------------------------------------
// RngStream: counter-based generator built on the SplitMix64 finalizer.
//
// The k-th output of stream (seed, stream_id) is
//     fmix64(key + (k + 1) * GOLDEN),   key = fmix64(fmix64(seed + GOLDEN) ^
//                                              fmix64(stream_id + 2 * GOLDEN))
// with fmix64 the standard 64-bit avalanche (xorshift-multiply) finalizer and
// GOLDEN = 0x9E3779B97F4A7C15. Outputs depend only on (seed, stream_id, k), so
// sequences are identical across platforms and substreams never overlap in
// practice (distinct keys). Copying a stream replays its remaining sequence.
// ---------------------------------------------------------------------------
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id)
      : seed_(seed), stream_(stream_id), key_(derive_key(seed, stream_id)) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream_id() const { return stream_; }

  // Independent stream derived from this one; pure function of (seed,
  // stream_id, salt).
  RngStream substream(std::uint64_t salt) const {
    return RngStream(seed_, fmix64(stream_ ^ fmix64(salt + GOLDEN)));
  }

  std::uint64_t next_u64() { return fmix64(key_ + (++counter_) * GOLDEN); }

  // Uniform in [0, 1) with 53 random bits.
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double next_sign() { return (next_u64() >> 63) ? 1.0 : -1.0; }

  // Uniform in {0, ..., n-1} via 128-bit multiply-shift (bias < 2^-64).
  std::uint64_t next_below(std::uint64_t n) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  // Standard normal via Box-Muller (two uniforms per draw, no cached spare).
  double next_gaussian() {
    double u1 = next_unit();
    double u2 = next_unit();
    // map u1 to (0,1] so the log is finite
    return std::sqrt(-2.0 * std::log(1.0 - u1)) * std::cos(2.0 * M_PI * u2);
  }

  static std::uint64_t fmix64(std::uint64_t z) {
    z ^= z >> 30;
    z *= 0xBF58476D1CE4E5B9ULL;
    z ^= z >> 27;
    z *= 0x94D049BB133111EBULL;
    z ^= z >> 31;
    return z;
  }

 private:
  static constexpr std::uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL;
  static std::uint64_t derive_key(std::uint64_t seed, std::uint64_t stream) {
    return fmix64(fmix64(seed + GOLDEN) ^ fmix64(stream + 2 * GOLDEN));
  }
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

// FNV-1a over bytes; used for config hashes and for deriving stream ids from
// string identifiers.
inline std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

// Vector of n independent +-1 entries.
inline RealVec uniform_signs(RngStream& rng, std::size_t n) {
  if (n == 0) throw DimensionError("uniform_signs: n must be >= 1");
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = rng.next_sign();
  return RealVec(std::move(out));
}

// ---------------------------------------------------------------------------
// FFT: iterative radix-2 decimation in time. Lengths are restricted to powers
// of two; callers that need other sizes must pad before transforming.
// ---------------------------------------------------------------------------
namespace detail {

inline void fft_in_place(std::vector<double>& re, std::vector<double>& im, bool inverse) {
  const std::size_t n = re.size();
  // bit-reversal permutation
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * M_PI / static_cast<double>(len);
    for (std::size_t blk = 0; blk < n; blk += len) {
      for (std::size_t j = 0; j < len / 2; ++j) {
        const double wr = std::cos(ang * static_cast<double>(j));
        const double wi = std::sin(ang * static_cast<double>(j));
        const std::size_t a = blk + j;
        const std::size_t b = blk + j + len / 2;
        const double tr = re[b] * wr - im[b] * wi;
        const double ti = re[b] * wi + im[b] * wr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      re[i] *= inv;
      im[i] *= inv;
    }
  }
}

inline void require_pow2(std::size_t n, const char* who) {
  if (!is_power_of_two(n))
    throw DimensionError(std::string(who) + ": length must be a power of two, got " +
                         std::to_string(n));
}

}  // namespace detail

inline ComplexVec fft(ComplexVec x) {
  detail::require_pow2(x.size(), "fft");
  detail::fft_in_place(x.re, x.im, /*inverse=*/false);
  return x;
}

inline ComplexVec inverse_fft(ComplexVec x) {
  detail::require_pow2(x.size(), "inverse_fft");
  detail::fft_in_place(x.re, x.im, /*inverse=*/true);
  return x;
}

// Circular convolution over the given length d (d must be a power of two):
// out[k] = sum_m a[m] * b[(k - m) mod d], computed in the frequency domain.
inline RealVec circular_convolve(const RealVec& a, const RealVec& b) {
  if (a.size() != b.size())
    throw DimensionError("circular_convolve: length mismatch (" + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()) + ")");
  detail::require_pow2(a.size(), "circular_convolve");
  ComplexVec fa = fft(ComplexVec::from_real(a));
  ComplexVec fb = fft(ComplexVec::from_real(b));
  for (std::size_t i = 0; i < fa.size(); ++i) {
    const double r = fa.re[i] * fb.re[i] - fa.im[i] * fb.im[i];
    const double j = fa.re[i] * fb.im[i] + fa.im[i] * fb.re[i];
    fa.re[i] = r;
    fa.im[i] = j;
  }
  ComplexVec out = inverse_fft(std::move(fa));
  return RealVec(std::move(out.re));
}

// Circular index reversal: out[i] = x[(d - i) mod d]. Convolving a gradient
// with the reversal of one factor yields the circular correlation, i.e. the
// adjoint of circular_convolve in that factor.
inline RealVec circular_reverse(const RealVec& x) {
  const std::size_t d = x.size();
  std::vector<double> out(d);
  out[0] = x[0];
  for (std::size_t i = 1; i < d; ++i) out[i] = x[d - i];
  return RealVec(std::move(out));
}

// Shift-invariant softmax; entries positive, summing to one.
inline RealVec softmax(const RealVec& logits) {
  if (logits.empty()) throw DimensionError("softmax: empty input");
  double mx = logits[0];
  for (double x : logits) mx = std::max(mx, x);
  std::vector<double> out(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (double& x : out) x /= sum;
  return RealVec(std::move(out));
}

inline double dot(const RealVec& a, const RealVec& b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace mmfuse
