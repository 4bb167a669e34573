#pragma once

// Raw loops behind the tape primitives. Everything here works on contiguous row-major buffers and
// accumulates into its output (callers zero-initialize when they need assignment).

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cmath>
#include <cstring>
#include <type_traits>
#include <vector>

#if IMFORMER_HAVE_CBLAS
#include <cblas.h>
#endif

#include "tensor.hpp"

namespace imformer::kernels {

// Branch-free exp that the compiler can vectorise: Cody-Waite reduction and a degree-6 polynomial
// (about 2 ulp in float). Double precision defers to the library.
template <class S>
[[gnu::always_inline]] inline S vexp(S x)
{
  if constexpr (std::is_same_v<S, float>) {
    x = std::min(std::max(x, -87.0f), 88.0f);
    float const shifted = x * 1.44269504088896341f + 12582912.0f; // 1.5 * 2^23 rounds to nearest
    float const n = shifted - 12582912.0f;
    float const r = (x - n * 0.693359375f) + n * 2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    std::int32_t const e = std::bit_cast<std::int32_t>(shifted) - 0x4B400000;
    return p * std::bit_cast<float>((e + 127) << 23);
  } else {
    return std::exp(x);
  }
}

template <class S>
[[gnu::always_inline]] inline S vtanh(S u)
{
  if constexpr (std::is_same_v<S, float>) {
    return 1.0f - 2.0f / (vexp(2.0f * u) + 1.0f);
  } else {
    return std::tanh(u);
  }
}

// tanh-form GELU and its derivative.
template <class S>
void gelu_forward(Index n, S const *__restrict x, S *__restrict out)
{
  S const c = S(0.7978845608028654), a = S(0.044715);
  for (Index i = 0; i < n; ++i) {
    S const v = x[i];
    out[i] = S(0.5) * v * (S(1) + vtanh(c * (v + a * v * v * v)));
  }
}

template <class S>
void gelu_backward(Index n, S const *__restrict x, S const *__restrict g, S *__restrict gx)
{
  S const c = S(0.7978845608028654), a = S(0.044715);
  for (Index i = 0; i < n; ++i) {
    S const v = x[i];
    S const th = vtanh(c * (v + a * v * v * v));
    S const du = c * (S(1) + S(3) * a * v * v);
    gx[i] += g[i] * (S(0.5) * (S(1) + th) + S(0.5) * v * (S(1) - th * th) * du);
  }
}

// c[M,N] = alpha op(a) op(b) + beta c with leading dimensions; op transposes when the flag is set.
template <class S>
void gemm(bool ta, bool tb, Index M, Index N, Index K, S alpha, S const *a, Index lda, S const *b, Index ldb, S beta,
          S *c, Index ldc)
{
  if (M == 0 || N == 0) { return; }
#if IMFORMER_HAVE_CBLAS
  if constexpr (std::is_same_v<S, float> || std::is_same_v<S, double>) {
    auto const TA = ta ? CblasTrans : CblasNoTrans, TB = tb ? CblasTrans : CblasNoTrans;
    int const m = static_cast<int>(M), n = static_cast<int>(N), k = static_cast<int>(K);
    if constexpr (std::is_same_v<S, float>) {
      cblas_sgemm(CblasRowMajor, TA, TB, m, n, k, alpha, a, int(lda), b, int(ldb), beta, c, int(ldc));
    } else {
      cblas_dgemm(CblasRowMajor, TA, TB, m, n, k, alpha, a, int(lda), b, int(ldb), beta, c, int(ldc));
    }
    return;
  }
#endif
  for (Index i = 0; i < M; ++i) {
    S *crow = c + i * ldc;
    if (beta == S(0)) {
      for (Index j = 0; j < N; ++j) { crow[j] = 0; }
    } else if (beta != S(1)) {
      for (Index j = 0; j < N; ++j) { crow[j] *= beta; }
    }
    for (Index kk = 0; kk < K; ++kk) {
      S const aik = alpha * (ta ? a[kk * lda + i] : a[i * lda + kk]);
      if (aik == S(0)) { continue; }
      if (!tb) {
        S const *brow = b + kk * ldb;
        for (Index j = 0; j < N; ++j) { crow[j] += aik * brow[j]; }
      } else {
        for (Index j = 0; j < N; ++j) { crow[j] += aik * b[j * ldb + kk]; }
      }
    }
  }
}

// Accumulating contiguous forms: c[M,N] += op(a) op(b).
template <class S>
void gemm_acc(bool ta, bool tb, Index M, Index N, Index K, S const *a, S const *b, S *c)
{
  gemm(ta, tb, M, N, K, S(1), a, ta ? M : K, b, tb ? K : N, S(1), c, N);
}

// Generic axis permutation: out.shape[i] = in.shape[perm[i]].
template <class S>
void permute(Shape const &in_shape, std::vector<int> const &perm, S const *in, S *out, bool accumulate = false)
{
  std::size_t const r = in_shape.size();
  std::vector<Index> in_strides(r, 1);
  for (int i = static_cast<int>(r) - 2; i >= 0; --i) { in_strides[i] = in_strides[i + 1] * in_shape[i + 1]; }
  std::vector<Index> out_shape(r), stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[perm[i]];
    stride[i] = in_strides[perm[i]];
  }
  Index const total = numel(in_shape);
  if (total == 0) { return; }
  Index const inner = out_shape[r - 1];
  Index const inner_stride = stride[r - 1];
  std::vector<Index> counter(r, 0);
  Index offset = 0;
  for (Index o = 0; o < total; o += inner) {
    S const *src = in + offset;
    S *dst = out + o;
    if (accumulate) {
      for (Index j = 0; j < inner; ++j) { dst[j] += src[j * inner_stride]; }
    } else {
      for (Index j = 0; j < inner; ++j) { dst[j] = src[j * inner_stride]; }
    }
    for (int ax = static_cast<int>(r) - 2; ax >= 0; --ax) {
      ++counter[ax];
      offset += stride[ax];
      if (counter[ax] < out_shape[ax]) { break; }
      offset -= stride[ax] * out_shape[ax];
      counter[ax] = 0;
    }
  }
}

// Column buffer for one output frame: rows ((ci * kt + dt) * k + ky) * k + kx, columns H*W.
// src[dt] points at a [Ci,H,W] frame or is null for out-of-range frames (zeros).
template <class S>
void im2col(Index Ci, Index H, Index W, Index kt, Index k, S const *const *src, S *col)
{
  Index const p = k / 2, plane = H * W;
  for (Index ci = 0; ci < Ci; ++ci) {
    for (Index dt = 0; dt < kt; ++dt) {
      S const *x = src[dt] ? src[dt] + ci * plane : nullptr;
      for (Index ky = 0; ky < k; ++ky) {
        for (Index kx = 0; kx < k; ++kx) {
          S *row = col + (((ci * kt + dt) * k + ky) * k + kx) * plane;
          std::fill(row, row + plane, S(0));
          if (!x) { continue; }
          Index const dy = ky - p, dx = kx - p;
          Index const y0 = std::max<Index>(0, -dy), y1 = std::min<Index>(H, H - dy);
          Index const x0 = std::max<Index>(0, -dx), x1 = std::min<Index>(W, W - dx);
          for (Index yy = y0; yy < y1; ++yy) {
            S const *irow = x + (yy + dy) * W + dx;
            S *orow = row + yy * W;
            for (Index xx = x0; xx < x1; ++xx) { orow[xx] = irow[xx]; }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters column gradients back into the frames (null entries are skipped).
template <class S>
void col2im(Index Ci, Index H, Index W, Index kt, Index k, S const *col, S *const *dst)
{
  Index const p = k / 2, plane = H * W;
  for (Index ci = 0; ci < Ci; ++ci) {
    for (Index dt = 0; dt < kt; ++dt) {
      if (!dst[dt]) { continue; }
      S *x = dst[dt] + ci * plane;
      for (Index ky = 0; ky < k; ++ky) {
        for (Index kx = 0; kx < k; ++kx) {
          S const *row = col + (((ci * kt + dt) * k + ky) * k + kx) * plane;
          Index const dy = ky - p, dx = kx - p;
          Index const y0 = std::max<Index>(0, -dy), y1 = std::min<Index>(H, H - dy);
          Index const x0 = std::max<Index>(0, -dx), x1 = std::min<Index>(W, W - dx);
          for (Index yy = y0; yy < y1; ++yy) {
            S *irow = x + (yy + dy) * W + dx;
            S const *orow = row + yy * W;
            for (Index xx = x0; xx < x1; ++xx) { irow[xx] += orow[xx]; }
          }
        }
      }
    }
  }
}

// Same-size zero-padded 3D convolution over (T,H,W) with data laid out [T,Ci,H,W]; w [Co,Ci,kt,k,k].
// kt = 1 is the per-frame 2D convolution with w [Co,Ci,k,k].
template <class S>
void conv3d_forward(Index T, Index Ci, Index Co, Index H, Index W, Index kt, Index k, S const *x, S const *w,
                    S *out)
{
  Index const pt = kt / 2, plane = H * W, rows = Ci * kt * k * k;
  std::vector<S> col(static_cast<std::size_t>(rows * plane));
  std::vector<S const *> src(static_cast<std::size_t>(kt));
  for (Index t = 0; t < T; ++t) {
    for (Index dt = 0; dt < kt; ++dt) {
      Index const ts = t + dt - pt;
      src[dt] = ts >= 0 && ts < T ? x + ts * Ci * plane : nullptr;
    }
    im2col(Ci, H, W, kt, k, src.data(), col.data());
    gemm(false, false, Co, plane, rows, S(1), w, rows, col.data(), plane, S(1), out + t * Co * plane, plane);
  }
}

template <class S>
void conv3d_backward(Index T, Index Ci, Index Co, Index H, Index W, Index kt, Index k, S const *x, S const *w,
                     S const *gout, S *gx, S *gw)
{
  Index const pt = kt / 2, plane = H * W, rows = Ci * kt * k * k;
  std::vector<S> col(static_cast<std::size_t>(rows * plane));
  std::vector<S const *> src(static_cast<std::size_t>(kt));
  std::vector<S *> dst(static_cast<std::size_t>(kt));
  for (Index t = 0; t < T; ++t) {
    for (Index dt = 0; dt < kt; ++dt) {
      Index const ts = t + dt - pt;
      bool const ok = ts >= 0 && ts < T;
      src[dt] = ok ? x + ts * Ci * plane : nullptr;
      dst[dt] = ok && gx ? gx + ts * Ci * plane : nullptr;
    }
    S const *g = gout + t * Co * plane;
    if (gw) {
      im2col(Ci, H, W, kt, k, src.data(), col.data());
      gemm(false, true, Co, rows, plane, S(1), g, plane, col.data(), plane, S(1), gw, rows);
    }
    if (gx) {
      gemm(true, false, rows, plane, Co, S(1), w, rows, g, plane, S(0), col.data(), plane);
      col2im(Ci, H, W, kt, k, col.data(), dst.data());
    }
  }
}

// Same-size zero-padded 2D convolution. x [N,Ci,H,W], w [Co,Ci,k,k], out [N,Co,H,W].
template <class S>
void conv2d_forward(Index N, Index Ci, Index Co, Index H, Index W, Index k, S const *x, S const *w, S *out)
{
  conv3d_forward(N, Ci, Co, H, W, Index{1}, k, x, w, out);
}

template <class S>
void conv2d_backward(Index N, Index Ci, Index Co, Index H, Index W, Index k, S const *x, S const *w, S const *gout,
                     S *gx, S *gw)
{
  conv3d_backward(N, Ci, Co, H, W, Index{1}, k, x, w, gout, gx, gw);
}

namespace detail {

// Gathers one head of k and v into [d,N] rows so the token loops are unit-stride.
template <class S>
void gather_head(Index N, Index C, Index d, S const *k, S const *v, S *kt, S *vt)
{
  for (Index j = 0; j < N; ++j) {
    for (Index e = 0; e < d; ++e) {
      kt[e * N + j] = k[j * C + e];
      vt[e * N + j] = v[j * C + e];
    }
  }
}

// row[j] = scale q_i . k_j (+ bias row).
template <class S>
void attention_logits(Index N, Index C, Index d, S scale, S const *qi, S const *kt, S const *brow, S *__restrict row)
{
  if (brow) {
    std::copy(brow, brow + N, row);
  } else {
    std::fill(row, row + N, S(0));
  }
  for (Index e = 0; e < d; ++e) {
    S const qe = qi[e] * scale;
    S const *__restrict krow = kt + e * N;
#pragma omp simd
    for (Index j = 0; j < N; ++j) { row[j] += qe * krow[j]; }
  }
}

// Logit block s[i*N+j] = scale q_i . k_j (+ bias) for one group and head.
template <class S>
void logit_block(Index N, Index C, Index d, S scale, S const *q, S const *k, S const *bias, S *__restrict s)
{
  for (Index i = 0; i < N; ++i) {
    S *__restrict row = s + i * N;
    S const *qi = q + i * C;
    for (Index j = 0; j < N; ++j) {
      S const *kj = k + j * C;
      S acc = 0;
      for (Index e = 0; e < d; ++e) { acc += qi[e] * kj[e]; }
      row[j] = acc * scale;
    }
    if (bias) {
      for (Index j = 0; j < N; ++j) { row[j] += bias[i * N + j]; }
    }
  }
}

// Short sequences: whole N x N logit blocks keep the exp loop long.
template <class S>
void attention_forward_small(Index G, Index N, Index C, Index heads, S const *q, S const *k, S const *v,
                             S const *bias, S *out, S *lse)
{
  Index const d = C / heads, NN = N * N;
  S const scale = S(1) / std::sqrt(S(d));
  std::vector<S> sb(static_cast<std::size_t>(NN)), rs(static_cast<std::size_t>(N));
  S *__restrict s = sb.data();
  for (Index g = 0; g < G; ++g) {
    for (Index h = 0; h < heads; ++h) {
      Index const off = g * N * C + h * d;
      detail::logit_block<S>(N, C, d, scale, q + off, k + off, bias ? bias + h * NN : nullptr, s);
      for (Index i = 0; i < N; ++i) {
        S mx = s[i * N];
        for (Index j = 1; j < N; ++j) { mx = std::max(mx, s[i * N + j]); }
        for (Index j = 0; j < N; ++j) { s[i * N + j] -= mx; }
        rs[i] = mx;
      }
#pragma omp simd
      for (Index t = 0; t < NN; ++t) { s[t] = vexp(s[t]); }
      for (Index i = 0; i < N; ++i) {
        S sum = 0;
        for (Index j = 0; j < N; ++j) { sum += s[i * N + j]; }
        lse[(g * heads + h) * N + i] = rs[i] + std::log(sum);
        S const inv = S(1) / sum;
        S *o = out + off + i * C;
        for (Index e = 0; e < d; ++e) { o[e] = 0; }
        for (Index j = 0; j < N; ++j) {
          S const p = s[i * N + j] * inv;
          S const *vj = v + off + j * C;
          for (Index e = 0; e < d; ++e) { o[e] += p * vj[e]; }
        }
      }
    }
  }
}
template <class S>
void attention_backward_small(Index G, Index N, Index C, Index heads, S const *q, S const *k, S const *v,
                              S const *bias, S const *lse, S const *gout, S *gq, S *gk, S *gv, S *gbias)
{
  Index const d = C / heads, NN = N * N;
  S const scale = S(1) / std::sqrt(S(d));
  std::vector<S> pb(static_cast<std::size_t>(NN)), db(pb.size());
  S *__restrict p = pb.data();
  S *__restrict ds = db.data();
  for (Index g = 0; g < G; ++g) {
    for (Index h = 0; h < heads; ++h) {
      Index const off = g * N * C + h * d;
      S const *L = lse + (g * heads + h) * N;
      detail::logit_block<S>(N, C, d, scale, q + off, k + off, bias ? bias + h * NN : nullptr, p);
      for (Index i = 0; i < N; ++i) {
        for (Index j = 0; j < N; ++j) { p[i * N + j] -= L[i]; }
      }
#pragma omp simd
      for (Index t = 0; t < NN; ++t) { p[t] = vexp(p[t]); }
      detail::logit_block<S>(N, C, d, S(1), gout + off, v + off, nullptr, ds);
      for (Index i = 0; i < N; ++i) {
        S const *gi = gout + off + i * C;
        S dot = 0;
        for (Index j = 0; j < N; ++j) { dot += ds[i * N + j] * p[i * N + j]; }
        for (Index j = 0; j < N; ++j) { ds[i * N + j] = p[i * N + j] * (ds[i * N + j] - dot); }
        if (gv) {
          for (Index j = 0; j < N; ++j) {
            S const pij = p[i * N + j];
            S *gvj = gv + off + j * C;
            for (Index e = 0; e < d; ++e) { gvj[e] += pij * gi[e]; }
          }
        }
      }
      if (gbias) {
        S *gb = gbias + h * NN;
#pragma omp simd
        for (Index t = 0; t < NN; ++t) { gb[t] += ds[t]; }
      }
      for (Index i = 0; i < N; ++i) {
        S const *qi = q + off + i * C;
        S *gqi = gq ? gq + off + i * C : nullptr;
        for (Index j = 0; j < N; ++j) {
          S const dij = ds[i * N + j] * scale;
          S const *kj = k + off + j * C;
          if (gqi) {
            for (Index e = 0; e < d; ++e) { gqi[e] += dij * kj[e]; }
          }
          if (gk) {
            S *gkj = gk + off + j * C;
            for (Index e = 0; e < d; ++e) { gkj[e] += dij * qi[e]; }
          }
        }
      }
    }
  }
}

} // namespace detail

/// Multi-head scaled dot-product attention over groups of tokens.
/// q,k,v,out: [G,N,C]; lse: [G,heads,N] log-sum-exp of each logit row (what the backward pass needs to rebuild
/// the probabilities); bias (optional): [heads,N,N] added to the logits.
template <class S>
void attention_forward(Index G, Index N, Index C, Index heads, S const *q, S const *k, S const *v, S const *bias,
                       S *out, S *lse)
{
  if (N < 16) { return detail::attention_forward_small(G, N, C, heads, q, k, v, bias, out, lse); }
  Index const d = C / heads;
  S const scale = S(1) / std::sqrt(S(d));
  std::vector<S> kt(static_cast<std::size_t>(d * N)), vt(kt.size()), rowbuf(static_cast<std::size_t>(N));
  S *__restrict row = rowbuf.data();
  for (Index g = 0; g < G; ++g) {
    for (Index h = 0; h < heads; ++h) {
      Index const off = g * N * C + h * d;
      detail::gather_head(N, C, d, k + off, v + off, kt.data(), vt.data());
      for (Index i = 0; i < N; ++i) {
        detail::attention_logits(N, C, d, scale, q + off + i * C, kt.data(), bias ? bias + (h * N + i) * N : nullptr,
                                 row);
        S mx = row[0];
#pragma omp simd reduction(max : mx)
        for (Index j = 0; j < N; ++j) { mx = std::max(mx, row[j]); }
        S sum = 0;
#pragma omp simd reduction(+ : sum)
        for (Index j = 0; j < N; ++j) {
          row[j] = vexp(row[j] - mx);
          sum += row[j];
        }
        S const inv = S(1) / sum;
        lse[(g * heads + h) * N + i] = mx + std::log(sum);
        for (Index e = 0; e < d; ++e) {
          S const *__restrict vrow = vt.data() + e * N;
          S acc = 0;
#pragma omp simd reduction(+ : acc)
          for (Index j = 0; j < N; ++j) { acc += row[j] * vrow[j]; }
          out[off + i * C + e] = acc * inv;
        }
      }
    }
  }
}

/// Attention probabilities [G,heads,N,N] rebuilt from the inputs and the saved log-sum-exp.
template <class S>
void attention_probs(Index G, Index N, Index C, Index heads, S const *q, S const *k, S const *bias, S const *lse,
                     S *probs)
{
  Index const d = C / heads;
  S const scale = S(1) / std::sqrt(S(d));
  std::vector<S> kt(static_cast<std::size_t>(d * N)), vt(kt.size());
  for (Index g = 0; g < G; ++g) {
    for (Index h = 0; h < heads; ++h) {
      Index const off = g * N * C + h * d;
      detail::gather_head(N, C, d, k + off, k + off, kt.data(), vt.data());
      for (Index i = 0; i < N; ++i) {
        S *row = probs + ((g * heads + h) * N + i) * N;
        detail::attention_logits(N, C, d, scale, q + off + i * C, kt.data(), bias ? bias + (h * N + i) * N : nullptr,
                                 row);
        S const l = lse[(g * heads + h) * N + i];
        for (Index j = 0; j < N; ++j) { row[j] = vexp(row[j] - l); }
      }
    }
  }
}

template <class S>
void attention_backward(Index G, Index N, Index C, Index heads, S const *q, S const *k, S const *v, S const *bias,
                        S const *lse, S const *gout, S *gq, S *gk, S *gv, S *gbias)
{
  if (N < 16) { return detail::attention_backward_small(G, N, C, heads, q, k, v, bias, lse, gout, gq, gk, gv, gbias); }
  Index const d = C / heads;
  S const scale = S(1) / std::sqrt(S(d));
  std::size_t const dn = static_cast<std::size_t>(d * N);
  std::vector<S> kt(dn), vt(dn), gkt(dn), gvt(dn), pbuf(static_cast<std::size_t>(N)), dbuf(pbuf.size());
  S *__restrict prow = pbuf.data();
  S *__restrict drow = dbuf.data();
  for (Index g = 0; g < G; ++g) {
    for (Index h = 0; h < heads; ++h) {
      Index const off = g * N * C + h * d;
      detail::gather_head(N, C, d, k + off, v + off, kt.data(), vt.data());
      std::fill(gkt.begin(), gkt.end(), S(0));
      std::fill(gvt.begin(), gvt.end(), S(0));
      for (Index i = 0; i < N; ++i) {
        detail::attention_logits(N, C, d, scale, q + off + i * C, kt.data(), bias ? bias + (h * N + i) * N : nullptr,
                                 prow);
        S const l = lse[(g * heads + h) * N + i];
#pragma omp simd
        for (Index j = 0; j < N; ++j) { prow[j] = vexp(prow[j] - l); }
        std::fill(drow, drow + N, S(0));
        for (Index e = 0; e < d; ++e) {
          S const goe = gout[off + i * C + e];
          S const *__restrict vrow = vt.data() + e * N;
          S *__restrict gvrow = gvt.data() + e * N;
#pragma omp simd
          for (Index j = 0; j < N; ++j) {
            drow[j] += goe * vrow[j];
            gvrow[j] += goe * prow[j];
          }
        }
        S dot = 0;
#pragma omp simd reduction(+ : dot)
        for (Index j = 0; j < N; ++j) { dot += drow[j] * prow[j]; }
#pragma omp simd
        for (Index j = 0; j < N; ++j) { drow[j] = prow[j] * (drow[j] - dot); }
        if (gbias) {
          S *__restrict gb = gbias + (h * N + i) * N;
#pragma omp simd
          for (Index j = 0; j < N; ++j) { gb[j] += drow[j]; }
        }
        for (Index e = 0; e < d; ++e) {
          S const *__restrict krow = kt.data() + e * N;
          S acc = 0;
#pragma omp simd reduction(+ : acc)
          for (Index j = 0; j < N; ++j) { acc += drow[j] * krow[j]; }
          if (gq) { gq[off + i * C + e] += acc * scale; }
          S const qe = q[off + i * C + e] * scale;
          S *__restrict gkrow = gkt.data() + e * N;
#pragma omp simd
          for (Index j = 0; j < N; ++j) { gkrow[j] += qe * drow[j]; }
        }
      }
      for (Index j = 0; j < N; ++j) {
        for (Index e = 0; e < d; ++e) {
          if (gk) { gk[off + j * C + e] += gkt[e * N + j]; }
          if (gv) { gv[off + j * C + e] += gvt[e * N + j]; }
        }
      }
    }
  }
}

// Layer norm over contiguous rows [rows, n]; saves mean and reciprocal std per row.
template <class S>
void layernorm_rows(Index rows, Index n, S const *x, S const *gain, S const *bias, S eps, S *out, S *mean, S *rstd)
{
  S const inv_n = S(1) / S(n);
  for (Index r = 0; r < rows; ++r) {
    S const *__restrict xr = x + r * n;
    S *__restrict o = out + r * n;
    S m = 0;
#pragma omp simd reduction(+ : m)
    for (Index c = 0; c < n; ++c) { m += xr[c]; }
    m *= inv_n;
    S var = 0;
#pragma omp simd reduction(+ : var)
    for (Index c = 0; c < n; ++c) { var += (xr[c] - m) * (xr[c] - m); }
    S const rs = S(1) / std::sqrt(var * inv_n + eps);
#pragma omp simd
    for (Index c = 0; c < n; ++c) { o[c] = (xr[c] - m) * rs * gain[c] + bias[c]; }
    mean[r] = m;
    rstd[r] = rs;
  }
}

template <class S>
void layernorm_rows_backward(Index rows, Index n, S const *x, S const *gain, S const *mean, S const *rstd,
                             S const *gout, S *gx, S *ggain, S *gbias)
{
  S const inv_n = S(1) / S(n);
  std::vector<S> acc_g(static_cast<std::size_t>(n)), acc_b(acc_g.size());
  S *__restrict ag = acc_g.data();
  S *__restrict ab = acc_b.data();
  for (Index r = 0; r < rows; ++r) {
    S const *__restrict xr = x + r * n;
    S const *__restrict go = gout + r * n;
    S const m = mean[r], rs = rstd[r];
    S m1 = 0, m2 = 0;
#pragma omp simd reduction(+ : m1, m2)
    for (Index c = 0; c < n; ++c) {
      S const xhat = (xr[c] - m) * rs;
      S const dxhat = go[c] * gain[c];
      m1 += dxhat;
      m2 += dxhat * xhat;
      ag[c] += go[c] * xhat;
      ab[c] += go[c];
    }
    if (gx) {
      S *__restrict gr = gx + r * n;
      m1 *= inv_n;
      m2 *= inv_n;
#pragma omp simd
      for (Index c = 0; c < n; ++c) {
        S const xhat = (xr[c] - m) * rs;
        gr[c] += rs * (go[c] * gain[c] - m1 - xhat * m2);
      }
    }
  }
  for (Index c = 0; c < n; ++c) {
    if (ggain) { ggain[c] += ag[c]; }
    if (gbias) { gbias[c] += ab[c]; }
  }
}

// Row-wise dense layer: out[r,:] = x[r,:] W + b with W [K,N]. Small layers stay in one pass over the rows.
template <class S>
void linear_forward(Index rows, Index K, Index N, S const *x, S const *w, S const *b, S *out)
{
  if (K > 64 || N > 64) {
    for (Index r = 0; r < rows; ++r) {
      if (b) {
        std::copy(b, b + N, out + r * N);
      } else {
        std::fill(out + r * N, out + (r + 1) * N, S(0));
      }
    }
    gemm(false, false, rows, N, K, S(1), x, K, w, N, S(1), out, N);
    return;
  }
  for (Index r = 0; r < rows; ++r) {
    S const *__restrict xr = x + r * K;
    S *__restrict o = out + r * N;
    if (b) {
      std::copy(b, b + N, o);
    } else {
      std::fill(o, o + N, S(0));
    }
    for (Index k = 0; k < K; ++k) {
      S const xv = xr[k];
      S const *__restrict wr = w + k * N;
#pragma omp simd
      for (Index j = 0; j < N; ++j) { o[j] += xv * wr[j]; }
    }
  }
}

template <class S>
void linear_backward(Index rows, Index K, Index N, S const *x, S const *w, S const *g, S *gx, S *gw, S *gb)
{
  if (K > 64 || N > 64) {
    if (gx) { gemm(false, true, rows, K, N, S(1), g, N, w, N, S(1), gx, K); }
    if (gw) { gemm(true, false, K, N, rows, S(1), x, K, g, N, S(1), gw, N); }
    if (gb) {
      for (Index r = 0; r < rows; ++r) {
        for (Index j = 0; j < N; ++j) { gb[j] += g[r * N + j]; }
      }
    }
    return;
  }
  std::vector<S> wt(static_cast<std::size_t>(N * K)), acc_w(static_cast<std::size_t>(K * N));
  std::vector<S> acc_b(static_cast<std::size_t>(N));
  for (Index k = 0; k < K; ++k) {
    for (Index j = 0; j < N; ++j) { wt[j * K + k] = w[k * N + j]; }
  }
  S *__restrict aw = acc_w.data();
  S *__restrict ab = acc_b.data();
  for (Index r = 0; r < rows; ++r) {
    S const *__restrict gr = g + r * N;
    S const *__restrict xr = x + r * K;
#pragma omp simd
    for (Index j = 0; j < N; ++j) { ab[j] += gr[j]; }
    for (Index k = 0; k < K; ++k) {
      S const xv = xr[k];
      S *__restrict awr = aw + k * N;
#pragma omp simd
      for (Index j = 0; j < N; ++j) { awr[j] += xv * gr[j]; }
    }
    if (gx) {
      S *__restrict gxr = gx + r * K;
      for (Index j = 0; j < N; ++j) {
        S const gv = gr[j];
        S const *__restrict wtr = wt.data() + j * K;
#pragma omp simd
        for (Index k = 0; k < K; ++k) { gxr[k] += gv * wtr[k]; }
      }
    }
  }
  if (gw) {
    for (Index i = 0; i < K * N; ++i) { gw[i] += aw[i]; }
  }
  if (gb) {
    for (Index j = 0; j < N; ++j) { gb[j] += ab[j]; }
  }
}

// Pre-norm token MLP with residual, row-wise over [rows, C]:
//   y = x + gelu(LN(x) W1 + b1) W2 + b2,  W1 [C,E], W2 [E,C].
// Nothing is saved; the backward pass recomputes each row.
template <class S>
void token_mlp_forward(Index rows, Index C, Index E, S const *x, S const *lg, S const *lb, S const *w1, S const *b1,
                       S const *w2, S const *b2, S eps, S *out)
{
  std::vector<S> xn(static_cast<std::size_t>(C)), h(static_cast<std::size_t>(E)), a(h.size());
  S const inv_c = S(1) / S(C);
  for (Index r = 0; r < rows; ++r) {
    S const *__restrict xr = x + r * C;
    S *__restrict o = out + r * C;
    S m = 0;
#pragma omp simd reduction(+ : m)
    for (Index c = 0; c < C; ++c) { m += xr[c]; }
    m *= inv_c;
    S var = 0;
#pragma omp simd reduction(+ : var)
    for (Index c = 0; c < C; ++c) { var += (xr[c] - m) * (xr[c] - m); }
    S const rs = S(1) / std::sqrt(var * inv_c + eps);
    for (Index c = 0; c < C; ++c) { xn[c] = (xr[c] - m) * rs * lg[c] + lb[c]; }
    linear_forward(Index{1}, C, E, xn.data(), w1, b1, h.data());
    gelu_forward(E, h.data(), a.data());
    for (Index c = 0; c < C; ++c) { o[c] = xr[c] + b2[c]; }
    for (Index e = 0; e < E; ++e) {
      S const av = a[e];
      S const *__restrict wr = w2 + e * C;
#pragma omp simd
      for (Index c = 0; c < C; ++c) { o[c] += av * wr[c]; }
    }
  }
}

template <class S>
void token_mlp_backward(Index rows, Index C, Index E, S const *x, S const *lg, S const *lb, S const *w1,
                        S const *b1, S const *w2, S eps, S const *g, S *gx, S *glg, S *glb, S *gw1, S *gb1, S *gw2,
                        S *gb2)
{
  auto const sz = [](Index n) { return static_cast<std::size_t>(n); };
  std::vector<S> xhat(sz(C)), xn(sz(C)), h(sz(E)), a(sz(E)), ga(sz(E)), gh(sz(E)), gxn(sz(C));
  std::vector<S> w1t(sz(E * C)), aw1(sz(C * E)), ab1(sz(E)), aw2(sz(E * C)), ab2(sz(C)), alg(sz(C)), alb(sz(C));
  for (Index c = 0; c < C; ++c) {
    for (Index e = 0; e < E; ++e) { w1t[e * C + c] = w1[c * E + e]; }
  }
  S const inv_c = S(1) / S(C);
  S const k0 = S(0.7978845608028654), k1 = S(0.044715);
  for (Index r = 0; r < rows; ++r) {
    S const *__restrict xr = x + r * C;
    S const *__restrict gr = g + r * C;
    S m = 0;
#pragma omp simd reduction(+ : m)
    for (Index c = 0; c < C; ++c) { m += xr[c]; }
    m *= inv_c;
    S var = 0;
#pragma omp simd reduction(+ : var)
    for (Index c = 0; c < C; ++c) { var += (xr[c] - m) * (xr[c] - m); }
    S const rs = S(1) / std::sqrt(var * inv_c + eps);
    for (Index c = 0; c < C; ++c) {
      xhat[c] = (xr[c] - m) * rs;
      xn[c] = xhat[c] * lg[c] + lb[c];
    }
    linear_forward(Index{1}, C, E, xn.data(), w1, b1, h.data());
    gelu_forward(E, h.data(), a.data());
    // Output layer.
    for (Index c = 0; c < C; ++c) { ab2[c] += gr[c]; }
    for (Index e = 0; e < E; ++e) {
      S const av = a[e];
      S *__restrict awr = aw2.data() + e * C;
      S const *__restrict wr = w2 + e * C;
      S acc = 0;
#pragma omp simd reduction(+ : acc)
      for (Index c = 0; c < C; ++c) {
        awr[c] += av * gr[c];
        acc += wr[c] * gr[c];
      }
      ga[e] = acc;
    }
    // GELU.
#pragma omp simd
    for (Index e = 0; e < E; ++e) {
      S const v = h[e];
      S const th = vtanh(k0 * (v + k1 * v * v * v));
      S const du = k0 * (S(1) + S(3) * k1 * v * v);
      gh[e] = ga[e] * (S(0.5) * (S(1) + th) + S(0.5) * v * (S(1) - th * th) * du);
      ab1[e] += gh[e];
    }
    // Hidden layer.
    std::fill(gxn.begin(), gxn.end(), S(0));
    for (Index c = 0; c < C; ++c) {
      S const xv = xn[c];
      S *__restrict awr = aw1.data() + c * E;
#pragma omp simd
      for (Index e = 0; e < E; ++e) { awr[e] += xv * gh[e]; }
    }
    for (Index e = 0; e < E; ++e) {
      S const gv = gh[e];
      S const *__restrict wtr = w1t.data() + e * C;
#pragma omp simd
      for (Index c = 0; c < C; ++c) { gxn[c] += gv * wtr[c]; }
    }
    // Layer norm and residual.
    S m1 = 0, m2 = 0;
    for (Index c = 0; c < C; ++c) {
      S const d = gxn[c] * lg[c];
      alg[c] += gxn[c] * xhat[c];
      alb[c] += gxn[c];
      m1 += d;
      m2 += d * xhat[c];
    }
    m1 *= inv_c;
    m2 *= inv_c;
    if (gx) {
      S *__restrict gxr = gx + r * C;
      for (Index c = 0; c < C; ++c) { gxr[c] += gr[c] + rs * (gxn[c] * lg[c] - m1 - xhat[c] * m2); }
    }
  }
  auto flush = [](S *dst, std::vector<S> const &src) {
    if (dst) {
      for (std::size_t i = 0; i < src.size(); ++i) { dst[i] += src[i]; }
    }
  };
  flush(glg, alg);
  flush(glb, alb);
  flush(gw1, aw1);
  flush(gb1, ab1);
  flush(gw2, aw2);
  flush(gb2, ab2);
}

// Bilinear x2 (half-pixel centres, edge clamped) along one axis of a [outer, n, inner] view.
template <class S>
void upsample_linear_axis(Index outer, Index n, Index inner, S const *in, S *out)
{
  for (Index o = 0; o < outer; ++o) {
    S const *src = in + o * n * inner;
    S *dst = out + o * 2 * n * inner;
    for (Index i = 0; i < n; ++i) {
      S const *c = src + i * inner;
      S const *l = src + std::max<Index>(i - 1, 0) * inner;
      S const *r = src + std::min<Index>(i + 1, n - 1) * inner;
      S *d0 = dst + 2 * i * inner;
      S *d1 = d0 + inner;
      for (Index j = 0; j < inner; ++j) {
        d0[j] = S(0.75) * c[j] + S(0.25) * l[j];
        d1[j] = S(0.75) * c[j] + S(0.25) * r[j];
      }
    }
  }
}

template <class S>
void upsample_linear_axis_adjoint(Index outer, Index n, Index inner, S const *gout, S *gin)
{
  for (Index o = 0; o < outer; ++o) {
    S const *src = gout + o * 2 * n * inner;
    S *dst = gin + o * n * inner;
    for (Index i = 0; i < n; ++i) {
      S const *g0 = src + 2 * i * inner;
      S const *g1 = g0 + inner;
      S *c = dst + i * inner;
      S *l = dst + std::max<Index>(i - 1, 0) * inner;
      S *r = dst + std::min<Index>(i + 1, n - 1) * inner;
      for (Index j = 0; j < inner; ++j) {
        c[j] += S(0.75) * (g0[j] + g1[j]);
        l[j] += S(0.25) * g0[j];
        r[j] += S(0.25) * g1[j];
      }
    }
  }
}

} // namespace imformer::kernels
