// Generalized sparse block codes: block-partitioned nonnegative vectors,
// FPE / categorical codebooks, and the four algebra operations (binding as
// block-wise circular convolution, unbinding as correlation, normalized
// bundling, cosine similarity).
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "arlc/common.hpp"
#include "arlc/fft.hpp"

namespace arlc::vsa {

struct Dims {
  int D = 1024;
  int B = 4;
  int L() const { return D / B; }
  bool operator==(const Dims&) const = default;
};

inline void check_dims(const Dims& d) {
  if (d.D <= 0 || d.B <= 0 || d.D % d.B != 0)
    throw ConfigError("vsa: D=" + std::to_string(d.D) + " not divisible into B=" +
                      std::to_string(d.B) + " blocks");
}

struct BlockVector {
  Dims dims;
  std::vector<real_t> data;

  BlockVector() = default;
  explicit BlockVector(Dims d) : dims(d), data(static_cast<std::size_t>(d.D), 0.0) {
    check_dims(d);
  }

  real_t* block(int b) { return data.data() + b * dims.L(); }
  const real_t* block(int b) const { return data.data() + b * dims.L(); }

  bool operator==(const BlockVector& o) const {
    return dims == o.dims && data == o.data;
  }
};

inline void check_same_dims(const BlockVector& a, const BlockVector& b,
                            const char* op) {
  if (!(a.dims == b.dims))
    throw ShapeError(std::string(op) + ": operand dimensions differ (" +
                     std::to_string(a.dims.D) + "/" + std::to_string(a.dims.B) +
                     " vs " + std::to_string(b.dims.D) + "/" +
                     std::to_string(b.dims.B) + ")");
}

// One-hot in each block at position 0: the binding identity (FPE exponent 0).
inline BlockVector identity_vector(Dims d) {
  BlockVector e(d);
  for (int b = 0; b < d.B; ++b) e.block(b)[0] = 1.0;
  return e;
}

inline bool is_crisp(const BlockVector& v) {
  for (int b = 0; b < v.dims.B; ++b) {
    int ones = 0;
    for (int i = 0; i < v.dims.L(); ++i) {
      real_t x = v.block(b)[i];
      if (x == 1.0)
        ++ones;
      else if (x != 0.0)
        return false;
    }
    if (ones != 1) return false;
  }
  return true;
}

// ---- core operations ---------------------------------------------------

// Block-wise circular convolution. Reference implementation: exact for
// crisp operands (identity and inverse properties hold bitwise).
inline BlockVector bind(const BlockVector& a, const BlockVector& b) {
  check_same_dims(a, b, "bind");
  const int L = a.dims.L();
  BlockVector out(a.dims);
  for (int blk = 0; blk < a.dims.B; ++blk) {
    const real_t* pa = a.block(blk);
    const real_t* pb = b.block(blk);
    real_t* po = out.block(blk);
    for (int t = 0; t < L; ++t) {
      real_t acc = 0.0;
      for (int s = 0; s < L; ++s) {
        int u = t - s;
        if (u < 0) u += L;
        acc += pa[s] * pb[u];
      }
      po[t] = acc;
    }
  }
  return out;
}

// Block-wise circular correlation; inverts bind when b is crisp.
inline BlockVector unbind(const BlockVector& a, const BlockVector& b) {
  check_same_dims(a, b, "unbind");
  const int L = a.dims.L();
  BlockVector out(a.dims);
  for (int blk = 0; blk < a.dims.B; ++blk) {
    const real_t* pa = a.block(blk);
    const real_t* pb = b.block(blk);
    real_t* po = out.block(blk);
    for (int t = 0; t < L; ++t) {
      real_t acc = 0.0;
      for (int s = 0; s < L; ++s) {
        int u = t + s;
        if (u >= L) u -= L;
        acc += pa[u] * pb[s];
      }
      po[t] = acc;
    }
  }
  return out;
}

// Same contract as bind, via per-block spectral transform (O(L log L)).
// Falls back to the direct form when L is not a power of two.
inline BlockVector bind_fft(const BlockVector& a, const BlockVector& b) {
  check_same_dims(a, b, "bind");
  const int L = a.dims.L();
  if (!spectral::is_pow2(L)) return bind(a, b);
  const int nb = spectral::bins(L);
  std::vector<double> sa(static_cast<std::size_t>(2 * nb));
  std::vector<double> sb(static_cast<std::size_t>(2 * nb));
  std::vector<double> sc(static_cast<std::size_t>(2 * nb));
  BlockVector out(a.dims);
  for (int blk = 0; blk < a.dims.B; ++blk) {
    spectral::rfft_block(a.block(blk), L, sa.data());
    spectral::rfft_block(b.block(blk), L, sb.data());
    spectral::cmul(sa.data(), sb.data(), sc.data(), nb);
    spectral::irfft_block(sc.data(), L, out.block(blk));
  }
  return out;
}

// Weighted elementwise sum, then each block rescaled to unit sum.
inline BlockVector bundle(std::span<const BlockVector> vs,
                          std::span<const real_t> weights) {
  if (vs.empty()) throw DegenerateInputError("bundle: no input vectors");
  if (vs.size() != weights.size())
    throw ShapeError("bundle: " + std::to_string(vs.size()) + " vectors vs " +
                     std::to_string(weights.size()) + " weights");
  bool any = false;
  for (real_t w : weights) {
    if (w < 0.0) throw ValidationError("bundle: negative weight");
    if (w > 0.0) any = true;
  }
  if (!any) throw DegenerateInputError("bundle: all weights zero");
  BlockVector out(vs[0].dims);
  for (std::size_t i = 0; i < vs.size(); ++i) {
    check_same_dims(vs[0], vs[i], "bundle");
    for (int d = 0; d < out.dims.D; ++d) out.data[static_cast<std::size_t>(d)] +=
        weights[i] * vs[i].data[static_cast<std::size_t>(d)];
  }
  const int L = out.dims.L();
  for (int blk = 0; blk < out.dims.B; ++blk) {
    real_t* p = out.block(blk);
    real_t s = std::accumulate(p, p + L, real_t(0.0));
    if (s <= 0.0) throw DegenerateInputError("bundle: zero block sum");
    for (int i = 0; i < L; ++i) p[i] /= s;
  }
  return out;
}

inline real_t norm(const BlockVector& v) {
  real_t s = 0.0;
  for (real_t x : v.data) s += x * x;
  return std::sqrt(s);
}

// Cosine over the full D-dimensional vectors; in [0,1] since entries are
// nonnegative.
inline real_t cosine(const BlockVector& a, const BlockVector& b) {
  check_same_dims(a, b, "cosine");
  real_t na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0)
    throw DegenerateInputError("cosine: zero vector operand");
  real_t dot = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) dot += a.data[i] * b.data[i];
  return dot / (na * nb);
}

// ---- codebooks ----------------------------------------------------------

enum class CodebookKind { Fpe, Categorical };

// An ordered family of crisp codewords over a contiguous integer index
// range. FPE codebooks are generated by repeated self-binding of a base
// vector with odd per-block offsets, so binding is isomorphic to integer
// addition and distinct in-range codewords are exactly orthogonal.
// Canonical on-disk form is the parameter header (kind, D, B, size, seed);
// vectors are regenerated, never stored.
struct Codebook {
  CodebookKind kind = CodebookKind::Fpe;
  Dims dims;
  int size = 0;
  std::uint64_t seed = 0;
  int index_lo = 0;                 // index_range = [index_lo, index_lo + size)
  std::vector<int> offsets;         // FPE: per-block base offset p_b, odd
  std::vector<BlockVector> vectors; // regenerated, indexed by idx - index_lo

  int index_hi() const { return index_lo + size; }
  bool contains(int idx) const { return idx >= index_lo && idx < index_hi(); }

  const BlockVector& at(int idx) const {
    if (!contains(idx))
      throw RangeError("codebook: index " + std::to_string(idx) +
                       " outside [" + std::to_string(index_lo) + ", " +
                       std::to_string(index_hi()) + ")");
    return vectors[static_cast<std::size_t>(idx - index_lo)];
  }

  BlockVector identity() const { return identity_vector(dims); }
};

// FPE codebooks use a centered index range so rule intermediates that go
// negative stay decodable; categorical ones start at 0.
inline Codebook new_codebook(std::uint64_t seed, int size, CodebookKind kind,
                             Dims dims) {
  check_dims(dims);
  const int L = dims.L();
  if (size <= 0) throw ConfigError("codebook: size must be positive");
  if (kind == CodebookKind::Fpe && size > L)
    throw RangeError("codebook: fpe size " + std::to_string(size) +
                     " exceeds block length " + std::to_string(L));
  Codebook cb;
  cb.kind = kind;
  cb.dims = dims;
  cb.size = size;
  cb.seed = seed;
  cb.vectors.reserve(static_cast<std::size_t>(size));
  Rng rng(seed);
  if (kind == CodebookKind::Fpe) {
    cb.index_lo = -size / 2;
    cb.offsets.resize(static_cast<std::size_t>(dims.B));
    for (int b = 0; b < dims.B; ++b)
      cb.offsets[static_cast<std::size_t>(b)] =
          L == 1 ? 0 : 2 * rng.range(0, L / 2 - 1) + 1;  // odd, coprime with 2^k
    for (int idx = cb.index_lo; idx < cb.index_lo + size; ++idx) {
      BlockVector v(dims);
      for (int b = 0; b < dims.B; ++b) {
        long long pos = static_cast<long long>(idx) * cb.offsets[static_cast<std::size_t>(b)];
        pos %= L;
        if (pos < 0) pos += L;
        v.block(b)[pos] = 1.0;
      }
      cb.vectors.push_back(std::move(v));
    }
  } else {
    cb.index_lo = 0;
    for (int i = 0; i < size; ++i) {
      BlockVector v(dims);
      for (int b = 0; b < dims.B; ++b) v.block(b)[rng.range(0, L - 1)] = 1.0;
      cb.vectors.push_back(std::move(v));
    }
  }
  return cb;
}

// Projects a probability mass function over codeword indices into the VSA
// space: v = sum_k pmf[k] * codeword(first_index + k).
inline BlockVector pmf_to_vector(std::span<const real_t> pmf, int first_index,
                                 const Codebook& cb) {
  if (pmf.empty()) throw ValidationError("pmf_to_vector: empty pmf");
  real_t sum = 0.0;
  for (real_t p : pmf) {
    if (p < 0.0) throw ValidationError("pmf_to_vector: negative mass");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    throw ValidationError("pmf_to_vector: masses sum to " + std::to_string(sum));
  BlockVector out(cb.dims);
  for (std::size_t k = 0; k < pmf.size(); ++k) {
    const BlockVector& bk = cb.at(first_index + static_cast<int>(k));
    for (int d = 0; d < out.dims.D; ++d)
      out.data[static_cast<std::size_t>(d)] += pmf[k] * bk.data[static_cast<std::size_t>(d)];
  }
  return out;
}

struct Decoded {
  int index = 0;
  real_t similarity = 0.0;
};

// Argmax-cosine readout over the codebook; ties break to the lowest index.
inline Decoded decode(const BlockVector& v, const Codebook& cb) {
  if (cb.size == 0) throw ConfigError("decode: empty codebook");
  Decoded best{cb.index_lo, -1.0};
  for (int idx = cb.index_lo; idx < cb.index_hi(); ++idx) {
    real_t c = cosine(v, cb.at(idx));
    if (c > best.similarity) best = {idx, c};
  }
  return best;
}

}  // namespace arlc::vsa
