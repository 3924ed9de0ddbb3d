// Block-wise spectral kernels: radix-2 FFT, half-spectrum storage, and the
// handful of complex primitives the reasoner's hot path is built from.
#pragma once

#include <algorithm>
#include <complex>
#include <cstring>
#include <unordered_map>
#include <vector>

#include "arlc/common.hpp"

namespace arlc::spectral {

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

namespace detail {

// Twiddle table for length n: w[k] = exp(-2*pi*i*k/n), k < n/2.
inline const std::vector<std::complex<double>>& twiddles(int n) {
  thread_local std::unordered_map<int, std::vector<std::complex<double>>> cache;
  auto it = cache.find(n);
  if (it != cache.end()) return it->second;
  std::vector<std::complex<double>> w(static_cast<std::size_t>(n / 2));
  for (int k = 0; k < n / 2; ++k) {
    double ang = -2.0 * 3.14159265358979323846 * k / n;
    w[static_cast<std::size_t>(k)] = {std::cos(ang), std::sin(ang)};
  }
  return cache.emplace(n, std::move(w)).first->second;
}

// In-place iterative radix-2 DIT. inverse=true applies conjugate twiddles;
// caller divides by n.
inline void fft_pow2(std::complex<double>* a, int n, bool inverse) {
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const auto& w = twiddles(n);
  for (int len = 2; len <= n; len <<= 1) {
    int stride = n / len;
    for (int i = 0; i < n; i += len) {
      for (int k = 0; k < len / 2; ++k) {
        std::complex<double> tw = w[static_cast<std::size_t>(k * stride)];
        if (inverse) tw = std::conj(tw);
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * tw;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
      }
    }
  }
}

}  // namespace detail

// Half-spectrum of one real block of length L: L/2+1 complex bins,
// interleaved re/im. Bins 0 and L/2 are real for real input.
inline int bins(int L) { return L / 2 + 1; }

inline void rfft_block(const double* x, int L, double* out) {
  std::vector<std::complex<double>> tmp(static_cast<std::size_t>(L));
  for (int i = 0; i < L; ++i) tmp[static_cast<std::size_t>(i)] = {x[i], 0.0};
  detail::fft_pow2(tmp.data(), L, false);
  for (int f = 0; f < bins(L); ++f) {
    out[2 * f] = tmp[static_cast<std::size_t>(f)].real();
    out[2 * f + 1] = tmp[static_cast<std::size_t>(f)].imag();
  }
}

inline void irfft_block(const double* spec, int L, double* out) {
  std::vector<std::complex<double>> tmp(static_cast<std::size_t>(L));
  for (int f = 0; f < bins(L); ++f)
    tmp[static_cast<std::size_t>(f)] = {spec[2 * f], spec[2 * f + 1]};
  for (int f = bins(L); f < L; ++f)
    tmp[static_cast<std::size_t>(f)] = std::conj(tmp[static_cast<std::size_t>(L - f)]);
  detail::fft_pow2(tmp.data(), L, true);
  for (int i = 0; i < L; ++i) out[i] = tmp[static_cast<std::size_t>(i)].real() / L;
}

// ---- packed multi-block spectra ----------------------------------------
// A D-dimensional vector with B blocks of length L is stored as B
// consecutive half-spectra: total 2*B*(L/2+1) doubles.

inline int packed_len(int D, int B) { return 2 * B * bins(D / B); }

inline void rfft_packed(const double* x, int D, int B, double* out) {
  int L = D / B;
  for (int b = 0; b < B; ++b) rfft_block(x + b * L, L, out + 2 * b * bins(L));
}

inline void irfft_packed(const double* spec, int D, int B, double* out) {
  int L = D / B;
  for (int b = 0; b < B; ++b) irfft_block(spec + 2 * b * bins(L), L, out + b * L);
}

// dst = a * b, complexwise over all packed bins (n = packed_len/2).
inline void cmul(const double* a, const double* b, double* dst, int ncomplex) {
  for (int i = 0; i < ncomplex; ++i) {
    double ar = a[2 * i], ai = a[2 * i + 1];
    double br = b[2 * i], bi = b[2 * i + 1];
    dst[2 * i] = ar * br - ai * bi;
    dst[2 * i + 1] = ar * bi + ai * br;
  }
}

// dst = a * conj(b).
inline void cmul_conj(const double* a, const double* b, double* dst, int ncomplex) {
  for (int i = 0; i < ncomplex; ++i) {
    double ar = a[2 * i], ai = a[2 * i + 1];
    double br = b[2 * i], bi = -b[2 * i + 1];
    dst[2 * i] = ar * br - ai * bi;
    dst[2 * i + 1] = ar * bi + ai * br;
  }
}

// dst += w * src (real weight on packed complex data).
inline void axpy(double w, const double* src, double* dst, int ndoubles) {
  for (int i = 0; i < ndoubles; ++i) dst[i] += w * src[i];
}

// dst = sum_i w[i] * src[i].
inline void mix(const double* const* srcs, const double* w, int k, double* dst,
                int ndoubles) {
  std::memset(dst, 0, static_cast<std::size_t>(ndoubles) * sizeof(double));
  for (int i = 0; i < k; ++i) axpy(w[i], srcs[i], dst, ndoubles);
}

// Time-domain inner product of the underlying real vectors, via Parseval.
// Interior bins count twice (conjugate-symmetric halves).
inline double pdot(const double* a, const double* b, int D, int B) {
  int L = D / B;
  int nb = bins(L);
  double total = 0.0;
  for (int blk = 0; blk < B; ++blk) {
    const double* pa = a + 2 * blk * nb;
    const double* pb = b + 2 * blk * nb;
    double edge = pa[0] * pb[0] + pa[1] * pb[1] +
                  pa[2 * (nb - 1)] * pb[2 * (nb - 1)] +
                  pa[2 * (nb - 1) + 1] * pb[2 * (nb - 1) + 1];
    double mid = 0.0;
    for (int f = 1; f < nb - 1; ++f)
      mid += pa[2 * f] * pb[2 * f] + pa[2 * f + 1] * pb[2 * f + 1];
    total += edge + 2.0 * mid;
  }
  return total / L;
}

}  // namespace arlc::spectral
