#pragma once

// Direct 3x3 same-padding convolution kernels on a zero-padded layout.
//
// An activation of C channels over N images of H x W is stored as C rows of
// N planes. In the padded layout each plane is (H + 2) x (W + 2) plus some
// slack, with the image at offset (1, 1). Output position q = y * (W + 2) + x
// then reads input q + ky * (W + 2) + kx for tap (ky, kx), with no boundary
// tests; the two columns per row with x >= W are junk and are dropped on
// unpacking. Accumulators are register-blocked over 8 output channels and two
// vectors of pixels.

#include <algorithm>
#include <cstddef>
#include <vector>

namespace asymseg::detail {

template <class T>
struct Simd;

#if defined(__AVX512F__)
inline constexpr int kVecBytes = 64;
#else
inline constexpr int kVecBytes = 32;
#endif

template <>
struct Simd<float> {
  typedef float vec __attribute__((vector_size(kVecBytes)));
  typedef float uvec __attribute__((vector_size(kVecBytes), aligned(4)));
  static constexpr int lanes = kVecBytes / 4;
};

template <>
struct Simd<double> {
  typedef double vec __attribute__((vector_size(kVecBytes)));
  typedef double uvec __attribute__((vector_size(kVecBytes), aligned(8)));
  static constexpr int lanes = kVecBytes / 8;
};

struct PadGeom {
  int n = 0, h = 0, w = 0;

  int wp() const { return w + 2; }
  // Output positions computed per image, rounded up to two vectors.
  template <class T>
  std::size_t span() const {
    const std::size_t step = 2 * Simd<T>::lanes;
    return (std::size_t(h) * wp() + step - 1) / step * step;
  }
  // Padded input plane; the slack covers reads past the last row by the
  // rounded-up span.
  template <class T>
  std::size_t plane() const {
    return std::size_t(h + 2) * wp() + 2 * Simd<T>::lanes + 2;
  }
};

/// x (C, N*H*W) -> padded planes (C, N*plane). Only the borders are zeroed,
/// so `out` can be reused across calls.
template <class T>
void pad3(const T* x, int channels, PadGeom g, std::vector<T>& out) {
  const std::size_t plane = g.plane<T>(), hw = std::size_t(g.h) * g.w;
  const int wp = g.wp();
  out.resize(std::size_t(channels) * g.n * plane);
  for (int c = 0; c < channels; ++c) {
    for (int n = 0; n < g.n; ++n) {
      const T* src = x + (std::size_t(c) * g.n + n) * hw;
      T* dst = out.data() + (std::size_t(c) * g.n + n) * plane;
      std::fill_n(dst, wp, T(0));
      for (int y = 0; y < g.h; ++y) {
        T* row = dst + std::size_t(y + 1) * wp;
        row[0] = T(0);
        std::copy_n(src + std::size_t(y) * g.w, g.w, row + 1);
        row[g.w + 1] = T(0);
      }
      std::fill(dst + std::size_t(g.h + 1) * wp, dst + plane, T(0));
    }
  }
}

/// Output-position view of padded planes: position q = y * (W + 2) + x of
/// the view is padded position q + W + 3, and every junk position falls on
/// a zero border.
template <class T>
const T* output_view(const std::vector<T>& padded, PadGeom g) {
  return padded.data() + g.wp() + 1;
}

/// Output-position layout (C, N*span) -> (C, N*H*W), adding a per-channel
/// bias and optionally clamping at zero.
template <class T>
void gather3(const T* q, int channels, PadGeom g, T* out, const T* bias = nullptr, bool relu = false) {
  const std::size_t span = g.span<T>(), hw = std::size_t(g.h) * g.w;
  for (int c = 0; c < channels; ++c) {
    const T b = bias ? bias[c] : T(0);
    for (int n = 0; n < g.n; ++n) {
      const T* src = q + (std::size_t(c) * g.n + n) * span;
      T* dst = out + (std::size_t(c) * g.n + n) * hw;
      for (int y = 0; y < g.h; ++y) {
        const T* s = src + std::size_t(y) * g.wp();
        T* d = dst + std::size_t(y) * g.w;
        if (relu) {
          for (int x = 0; x < g.w; ++x) d[x] = std::max(s[x] + b, T(0));
        } else {
          for (int x = 0; x < g.w; ++x) d[x] = s[x] + b;
        }
      }
    }
  }
}

template <class T, int CB>
void conv3_block(const T* xp, int cin, const T* wt, int cout, int co0, PadGeom g, T* out) {
  using S = Simd<T>;
  using vec = typename S::vec;
  using uvec = typename S::uvec;
  constexpr int L = S::lanes;
  const std::size_t plane = g.plane<T>(), span = g.span<T>();
  const int wp = g.wp();
  const std::ptrdiff_t off[9] = {0, 1, 2, wp, wp + 1, wp + 2, 2 * wp, 2 * wp + 1, 2 * wp + 2};
  for (int n = 0; n < g.n; ++n) {
    for (std::size_t q = 0; q < span; q += 2 * L) {
      vec a0[CB], a1[CB];
      for (int c = 0; c < CB; ++c) a0[c] = a1[c] = vec{};
      for (int ci = 0; ci < cin; ++ci) {
        const T* base = xp + (std::size_t(ci) * g.n + n) * plane + q;
        const T* wk = wt + std::size_t(ci) * 9 * cout + co0;
#pragma GCC unroll 9
        for (int k = 0; k < 9; ++k) {
          const vec v0 = *reinterpret_cast<const uvec*>(base + off[k]);
          const vec v1 = *reinterpret_cast<const uvec*>(base + off[k] + L);
          const T* wc = wk + std::size_t(k) * cout;
#pragma GCC unroll 8
          for (int c = 0; c < CB; ++c) {
            a0[c] += wc[c] * v0;
            a1[c] += wc[c] * v1;
          }
        }
      }
      for (int c = 0; c < CB; ++c) {
        T* o = out + (std::size_t(co0 + c) * g.n + n) * span + q;
        *reinterpret_cast<uvec*>(o) = a0[c];
        *reinterpret_cast<uvec*>(o + L) = a1[c];
      }
    }
  }
}

/// out (cout, N*span) = correlation of padded xp (cin, N*plane) with weights
/// wt laid out [ci][tap][co].
template <class T>
void conv3_forward(const T* xp, int cin, const T* wt, int cout, PadGeom g, T* out) {
  int co = 0;
  for (; co + 8 <= cout; co += 8) conv3_block<T, 8>(xp, cin, wt, cout, co, g, out);
  if (co + 4 <= cout) conv3_block<T, 4>(xp, cin, wt, cout, co, g, out), co += 4;
  if (co + 2 <= cout) conv3_block<T, 2>(xp, cin, wt, cout, co, g, out), co += 2;
  if (co < cout) conv3_block<T, 1>(xp, cin, wt, cout, co, g, out);
}

// One pass covers CB output channels, one input channel and the three taps
// of kernel row ky.
template <class T, int CB>
void conv3_weight_grad_block(const T* dq, int co0, const T* xp, int cin, PadGeom g, T* dw) {
  using S = Simd<T>;
  using vec = typename S::vec;
  using uvec = typename S::uvec;
  constexpr int L = S::lanes;
  const std::size_t plane = g.plane<T>(), span = g.span<T>();
  const int wp = g.wp();
  for (int ci = 0; ci < cin; ++ci) {
    for (int ky = 0; ky < 3; ++ky) {
      vec acc[CB][3];
      for (int c = 0; c < CB; ++c) acc[c][0] = acc[c][1] = acc[c][2] = vec{};
      for (int n = 0; n < g.n; ++n) {
        const T* base = xp + (std::size_t(ci) * g.n + n) * plane + std::size_t(ky) * wp;
        const T* d0 = dq + (std::size_t(co0) * g.n + n) * plane;
        const std::size_t dstride = std::size_t(g.n) * plane;
        for (std::size_t q = 0; q < span; q += L) {
          const vec v0 = *reinterpret_cast<const uvec*>(base + q);
          const vec v1 = *reinterpret_cast<const uvec*>(base + q + 1);
          const vec v2 = *reinterpret_cast<const uvec*>(base + q + 2);
#pragma GCC unroll 8
          for (int c = 0; c < CB; ++c) {
            const vec d = *reinterpret_cast<const uvec*>(d0 + c * dstride + q);
            acc[c][0] += d * v0;
            acc[c][1] += d * v1;
            acc[c][2] += d * v2;
          }
        }
      }
      for (int c = 0; c < CB; ++c) {
        for (int kx = 0; kx < 3; ++kx) {
          T s = 0;
          for (int l = 0; l < L; ++l) s += acc[c][kx][l];
          dw[(std::size_t(co0 + c) * cin + ci) * 9 + ky * 3 + kx] += s;
        }
      }
    }
  }
}

/// dw [co][ci][tap] += sum over output positions of dq times the shifted
/// padded input. `dq` is the output_view of padded (cout, N*plane) planes.
template <class T>
void conv3_weight_grad(const T* dq, int cout, const T* xp, int cin, PadGeom g, T* dw) {
  int co = 0;
  for (; co + 8 <= cout; co += 8) conv3_weight_grad_block<T, 8>(dq, co, xp, cin, g, dw);
  if (co + 4 <= cout) conv3_weight_grad_block<T, 4>(dq, co, xp, cin, g, dw), co += 4;
  if (co + 2 <= cout) conv3_weight_grad_block<T, 2>(dq, co, xp, cin, g, dw), co += 2;
  if (co < cout) conv3_weight_grad_block<T, 1>(dq, co, xp, cin, g, dw);
}

}  // namespace asymseg::detail
