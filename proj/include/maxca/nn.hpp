#pragma once

#include <memory>

#include "maxca/tape.hpp"

namespace maxca {

// ---------------------------------------------------------------------------
// conv3d: "same" zero-padded cross-correlation, stride 1, kernel k (odd).
// x [Cin][H][W][D], w [Cout][Cin][k][k][k] -> [Cout][H][W][D].

namespace detail {

// Copies [C][H][W][D] into a zero-padded [C][H+2p][W+2p][D+2p] buffer.
template <typename T>
Tensor<T> pad_spatial(const Tensor<T>& x, int p) {
  const std::int64_t C = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
  const std::int64_t Hp = H + 2 * p, Wp = W + 2 * p, Dp = D + 2 * p;
  Tensor<T> out(Shape{C, Hp, Wp, Dp});
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t h = 0; h < H; ++h)
      for (std::int64_t w = 0; w < W; ++w)
        std::memcpy(out.data() + ((c * Hp + h + p) * Wp + w + p) * Dp + p,
                    x.data() + ((c * H + h) * W + w) * D, static_cast<std::size_t>(D) * sizeof(T));
  return out;
}

// y[co] += sum over (ci, kernel offset) of w * padded x; y must be zeroed.
template <typename T>
void conv3d_direct_fwd(const Tensor<T>& xp, const Tensor<T>& w, int k, Tensor<T>& y) {
  const std::int64_t cout = y.dim(0), H = y.dim(1), W = y.dim(2), D = y.dim(3);
  const std::int64_t cin = xp.dim(0), Wp = xp.dim(2), Dp = xp.dim(3);
  const std::int64_t Hp = xp.dim(1);
  const std::int64_t kk = static_cast<std::int64_t>(k) * k * k;
  for (std::int64_t co = 0; co < cout; ++co) {
    T* dst = y.data() + co * H * W * D;
    for (std::int64_t ci = 0; ci < cin; ++ci) {
      const T* s = xp.data() + ci * Hp * Wp * Dp;
      const T* wk = w.data() + (co * cin + ci) * kk;
      if (k == 3) {
        // One sweep per (kh, kw) plane with the three kd taps fused keeps
        // each output row in registers instead of re-streaming it per tap.
        for (int kh = 0; kh < 3; ++kh)
          for (int kw = 0; kw < 3; ++kw) {
            const T w0 = wk[(kh * 3 + kw) * 3 + 0];
            const T w1 = wk[(kh * 3 + kw) * 3 + 1];
            const T w2w = wk[(kh * 3 + kw) * 3 + 2];
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w2 = 0; w2 < W; ++w2) {
                const T* src = s + ((h + kh) * Wp + (w2 + kw)) * Dp;
                T* q = dst + (h * W + w2) * D;
#pragma omp simd
                for (std::int64_t d = 0; d < D; ++d)
                  q[d] += w0 * src[d] + w1 * src[d + 1] + w2w * src[d + 2];
              }
          }
        continue;
      }
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw)
          for (int kd = 0; kd < k; ++kd) {
            const T wgt = wk[(kh * k + kw) * k + kd];
            if (wgt == T(0)) continue;
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w2 = 0; w2 < W; ++w2) {
                const T* src = s + ((h + kh) * Wp + (w2 + kw)) * Dp + kd;
                T* q = dst + (h * W + w2) * D;
                for (std::int64_t d = 0; d < D; ++d) q[d] += wgt * src[d];
              }
          }
    }
  }
}

// gx[ci] += transpose-conv of padded output gradient (kernel flipped).
template <typename T>
void conv3d_direct_gx(const Tensor<T>& gp, const Tensor<T>& w, int k, Tensor<T>& gx) {
  const std::int64_t cin = gx.dim(0), H = gx.dim(1), W = gx.dim(2), D = gx.dim(3);
  const std::int64_t cout = gp.dim(0), Hp = gp.dim(1), Wp = gp.dim(2), Dp = gp.dim(3);
  const std::int64_t kk = static_cast<std::int64_t>(k) * k * k;
  for (std::int64_t ci = 0; ci < cin; ++ci) {
    T* dst = gx.data() + ci * H * W * D;
    for (std::int64_t co = 0; co < cout; ++co) {
      const T* s = gp.data() + co * Hp * Wp * Dp;
      const T* wk = w.data() + (co * cin + ci) * kk;
      if (k == 3) {
        for (int kh = 0; kh < 3; ++kh)
          for (int kw = 0; kw < 3; ++kw) {
            // Flipped kernel: kd tap j reads src offset 2 - j.
            const T w0 = wk[(kh * 3 + kw) * 3 + 2];
            const T w1 = wk[(kh * 3 + kw) * 3 + 1];
            const T w2w = wk[(kh * 3 + kw) * 3 + 0];
            const int fh = 2 - kh, fw = 2 - kw;
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w2 = 0; w2 < W; ++w2) {
                const T* src = s + ((h + fh) * Wp + (w2 + fw)) * Dp;
                T* q = dst + (h * W + w2) * D;
#pragma omp simd
                for (std::int64_t d = 0; d < D; ++d)
                  q[d] += w0 * src[d] + w1 * src[d + 1] + w2w * src[d + 2];
              }
          }
        continue;
      }
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw)
          for (int kd = 0; kd < k; ++kd) {
            const T wgt = wk[(kh * k + kw) * k + kd];
            if (wgt == T(0)) continue;
            const int fh = k - 1 - kh, fw = k - 1 - kw, fd = k - 1 - kd;
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w2 = 0; w2 < W; ++w2) {
                const T* src = s + ((h + fh) * Wp + (w2 + fw)) * Dp + fd;
                T* q = dst + (h * W + w2) * D;
                for (std::int64_t d = 0; d < D; ++d) q[d] += wgt * src[d];
              }
          }
    }
  }
}

// gw[co][ci][off] += dot(g[co], shifted padded x[ci]).
template <typename T>
void conv3d_direct_gw(const Tensor<T>& g, const Tensor<T>& xp, int k, Tensor<T>& gw) {
  const std::int64_t cout = g.dim(0), H = g.dim(1), W = g.dim(2), D = g.dim(3);
  const std::int64_t cin = xp.dim(0), Hp = xp.dim(1), Wp = xp.dim(2), Dp = xp.dim(3);
  const std::int64_t kk = static_cast<std::int64_t>(k) * k * k;
  for (std::int64_t co = 0; co < cout; ++co) {
    const T* gc = g.data() + co * H * W * D;
    for (std::int64_t ci = 0; ci < cin; ++ci) {
      const T* s = xp.data() + ci * Hp * Wp * Dp;
      T* wk = gw.data() + (co * cin + ci) * kk;
      if (k == 3) {
        // One sweep per kh plane: each g row is loaded once and dotted
        // against the three (kw, kd) shifted x rows as nine independent
        // accumulation chains, which keeps the FMA pipeline busy while
        // cutting memory traffic 3x versus a sweep per kernel tap.
        for (int kh = 0; kh < 3; ++kh) {
          T a00 = 0, a01 = 0, a02 = 0, a10 = 0, a11 = 0, a12 = 0, a20 = 0, a21 = 0, a22 = 0;
          for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t w2 = 0; w2 < W; ++w2) {
              const T* r0 = s + ((h + kh) * Wp + w2) * Dp;
              const T* r1 = r0 + Dp;
              const T* r2 = r1 + Dp;
              const T* q = gc + (h * W + w2) * D;
#pragma omp simd reduction(+ : a00, a01, a02, a10, a11, a12, a20, a21, a22)
              for (std::int64_t d = 0; d < D; ++d) {
                const T gv = q[d];
                a00 += gv * r0[d];
                a01 += gv * r0[d + 1];
                a02 += gv * r0[d + 2];
                a10 += gv * r1[d];
                a11 += gv * r1[d + 1];
                a12 += gv * r1[d + 2];
                a20 += gv * r2[d];
                a21 += gv * r2[d + 1];
                a22 += gv * r2[d + 2];
              }
            }
          T* wrow = wk + kh * 9;
          wrow[0] += a00;
          wrow[1] += a01;
          wrow[2] += a02;
          wrow[3] += a10;
          wrow[4] += a11;
          wrow[5] += a12;
          wrow[6] += a20;
          wrow[7] += a21;
          wrow[8] += a22;
        }
        continue;
      }
      for (int kh = 0; kh < k; ++kh)
        for (int kw = 0; kw < k; ++kw)
          for (int kd = 0; kd < k; ++kd) {
            T acc = 0;
            for (std::int64_t h = 0; h < H; ++h)
              for (std::int64_t w2 = 0; w2 < W; ++w2) {
                const T* src = s + ((h + kh) * Wp + (w2 + kw)) * Dp + kd;
                const T* q = gc + (h * W + w2) * D;
#pragma omp simd reduction(+ : acc)
                for (std::int64_t d = 0; d < D; ++d) acc += q[d] * src[d];
              }
            wk[(kh * k + kw) * k + kd] += acc;
          }
    }
  }
}

// im2col / col2im back the GEMM path used at small spatial extents,
// where the direct kernels' short D rows vectorize poorly.
template <typename T>
void im2col(const Tensor<T>& x, int k, Tensor<T>& col) {
  const std::int64_t cin = x.dim(0), H = x.dim(1), W = x.dim(2), D = x.dim(3);
  const std::int64_t V = H * W * D;
  const int p = k / 2;
  const T* src = x.data();
  T* dst = col.data();
  // Every element of col is written exactly once (pad regions as zeros),
  // so the caller may pass an uninitialized buffer.
  for (std::int64_t ci = 0; ci < cin; ++ci)
    for (int kh = 0; kh < k; ++kh)
      for (int kw = 0; kw < k; ++kw)
        for (int kd = 0; kd < k; ++kd) {
          T* row = dst + (((ci * k + kh) * k + kw) * k + kd) * V;
          const std::int64_t dd = kd - p;
          const std::int64_t d0 = std::max<std::int64_t>(0, -dd);
          const std::int64_t d1 = std::max(d0, std::min<std::int64_t>(D, D - dd));
          for (std::int64_t h = 0; h < H; ++h) {
            const std::int64_t sh = h + kh - p;
            const bool h_ok = sh >= 0 && sh < H;
            for (std::int64_t w = 0; w < W; ++w) {
              const std::int64_t sw = w + kw - p;
              T* q = row + (h * W + w) * D;
              if (!h_ok || sw < 0 || sw >= W) {
                std::memset(q, 0, static_cast<std::size_t>(D) * sizeof(T));
                continue;
              }
              for (std::int64_t d = 0; d < d0; ++d) q[d] = T(0);
              if (d1 > d0)
                std::memcpy(q + d0, src + ((ci * H + sh) * W + sw) * D + d0 + dd,
                            static_cast<std::size_t>(d1 - d0) * sizeof(T));
              for (std::int64_t d = d1; d < D; ++d) q[d] = T(0);
            }
          }
        }
}

template <typename T>
void col2im_accum(const Tensor<T>& col, int k, Tensor<T>& gx) {
  const std::int64_t cin = gx.dim(0), H = gx.dim(1), W = gx.dim(2), D = gx.dim(3);
  const std::int64_t V = H * W * D;
  const int p = k / 2;
  const T* src = col.data();
  T* dst = gx.data();
  for (std::int64_t ci = 0; ci < cin; ++ci)
    for (int kh = 0; kh < k; ++kh)
      for (int kw = 0; kw < k; ++kw)
        for (int kd = 0; kd < k; ++kd) {
          const T* row = src + (((ci * k + kh) * k + kw) * k + kd) * V;
          const std::int64_t dd = kd - p;
          const std::int64_t d0 = std::max<std::int64_t>(0, -dd);
          const std::int64_t d1 = std::min<std::int64_t>(D, D - dd);
          if (d0 >= d1) continue;
          for (std::int64_t h = 0; h < H; ++h) {
            const std::int64_t sh = h + kh - p;
            if (sh < 0 || sh >= H) continue;
            for (std::int64_t w = 0; w < W; ++w) {
              const std::int64_t sw = w + kw - p;
              if (sw < 0 || sw >= W) continue;
              T* out = dst + ((ci * H + sh) * W + sw) * D + d0 + dd;
              const T* in = row + (h * W + w) * D + d0;
              for (std::int64_t d = 0; d < d1 - d0; ++d) out[d] += in[d];
            }
          }
        }
}

}  // namespace detail

template <typename T>
Var conv3d(Tape<T>& t, Var x, Var w, Var b) {
  const auto& vx = t.val(x);
  const auto& vw = t.val(w);
  if (vx.rank() != 4 || vw.rank() != 5) throw TensorError("conv3d: expects 4-D input, 5-D weight");
  const std::int64_t cin = vx.dim(0), H = vx.dim(1), W = vx.dim(2), D = vx.dim(3);
  const std::int64_t cout = vw.dim(0);
  const int k = static_cast<int>(vw.dim(2));
  if (vw.dim(1) != cin) throw TensorError("conv3d: channel mismatch");
  if (vw.dim(3) != k || vw.dim(4) != k || k % 2 == 0)
    throw TensorError("conv3d: kernel must be cubic with odd extent");
  const std::int64_t V = H * W * D;
  const std::int64_t kk = static_cast<std::int64_t>(k) * k * k;
  const int p = k / 2;
  // Three paths: k = 1 is a plain channel-mixing GEMM; larger kernels run
  // either a direct padded convolution (long D rows, which the vectorized
  // inner loops need) or im2col + GEMM (short D rows, small col buffers).
  const bool direct = k > 1 && D >= 24;
  Tensor<T> out = direct ? Tensor<T>(Shape{cout, H, W, D})
                         : Tensor<T>(Shape{cout, H, W, D}, uninit);
  if (k == 1) {
    gemm(false, false, cout, V, cin, T(1), vw.data(), cin, vx.data(), V, T(0), out.data(), V);
  } else if (direct) {
    Tensor<T> xp = detail::pad_spatial(vx, p);
    detail::conv3d_direct_fwd(xp, vw, k, out);
  } else {
    Tensor<T> col(Shape{cin * kk, V}, uninit);
    detail::im2col(vx, k, col);
    gemm(false, false, cout, V, cin * kk, T(1), vw.data(), cin * kk, col.data(), V, T(0),
         out.data(), V);
  }
  Var y = t.make(
      std::move(out),
      [=](Tape<T>& tp, std::int32_t self) {
        const Tensor<T>& g = tp.grad(Var{self});
        const auto& xin = tp.val(x);
        const auto& win = tp.val(w);
        Tensor<T>& gx = tp.grad_buf(x);
        Tensor<T>& gw = tp.grad_buf(w);
        if (k == 1) {
          gemm(false, true, cout, cin, V, T(1), g.data(), V, xin.data(), V, T(1), gw.data(), cin);
          gemm(true, false, cin, V, cout, T(1), win.data(), cin, g.data(), V, T(1), gx.data(), V);
        } else if (direct) {
          Tensor<T> xp = detail::pad_spatial(xin, p);
          Tensor<T> gp = detail::pad_spatial(g, p);
          detail::conv3d_direct_gx(gp, win, k, gx);
          detail::conv3d_direct_gw(g, xp, k, gw);
        } else {
          Tensor<T> col(Shape{cin * kk, V}, uninit);
          detail::im2col(xin, k, col);
          gemm(false, true, cout, cin * kk, V, T(1), g.data(), V, col.data(), V, T(1), gw.data(),
               cin * kk);
          Tensor<T> dcol(Shape{cin * kk, V}, uninit);
          gemm(true, false, cin * kk, V, cout, T(1), win.data(), cin * kk, g.data(), V, T(0),
               dcol.data(), V);
          detail::col2im_accum(dcol, k, gx);
        }
      },
      "conv3d");
  if (b.valid()) y = add_bias(t, y, b, 0);
  return y;
}

// ---------------------------------------------------------------------------
// Zero-padded sliding-window sum of width w along each spatial axis of
// [C][H][W][D], computed with running sums (one 1-D box pass per axis).

template <typename T>
void box_pass_axis(Tensor<T>& x, int axis, int w) {
  std::int64_t outer, ext, inner;
  detail::axis_split(x.shape(), axis, outer, ext, inner);
  const std::int64_t r = w / 2;
  std::vector<T> line(static_cast<std::size_t>(ext));
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      T* base = x.data() + o * ext * inner + i;
      for (std::int64_t j = 0; j < ext; ++j) line[static_cast<std::size_t>(j)] = base[j * inner];
      T run = 0;
      for (std::int64_t j = 0; j < std::min(r, ext); ++j) run += line[static_cast<std::size_t>(j)];
      for (std::int64_t j = 0; j < ext; ++j) {
        if (j + r < ext) run += line[static_cast<std::size_t>(j + r)];
        base[j * inner] = run;
        if (j - r >= 0) run -= line[static_cast<std::size_t>(j - r)];
      }
    }
}

template <typename T>
Tensor<T> box_sum_tensor(const Tensor<T>& x, int w) {
  if (w < 1 || w % 2 == 0) throw TensorError("box_sum: window must be odd and >= 1");
  Tensor<T> out = x;
  for (int axis = 1; axis <= 3; ++axis) box_pass_axis(out, axis, w);
  return out;
}

// Self-adjoint under zero padding, so the backward pass is the same box sum.
template <typename T>
Var box_sum(Tape<T>& t, Var x, int w) {
  const auto& vx = t.val(x);
  if (vx.rank() != 4) throw TensorError("box_sum: expects [C][H][W][D]");
  return t.make(box_sum_tensor(vx, w), [=](Tape<T>& tp, std::int32_t self) {
    tp.accum(x, box_sum_tensor(tp.grad(Var{self}), w));
  });
}

// ---------------------------------------------------------------------------
// Normalization cores (affine handled by the layer structs below).

namespace detail {

// Normalizes groups of `inner`-strided element sets; shared by instance
// (contiguous spatial groups) and layer (channel-strided groups) norm.
// Group g has elements x[base_g + j*stride], j in [0, ext).
template <typename T>
Var normalize_groups(Tape<T>& t, Var x, std::int64_t outer, std::int64_t ext, std::int64_t inner,
                     T eps) {
  const auto& vx = t.val(x);
  Tensor<T> out(vx.shape(), uninit);
  const T invn = T(1) / static_cast<T>(ext);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const std::int64_t base = o * ext * inner + i;
      T mu = 0;
      for (std::int64_t j = 0; j < ext; ++j) mu += vx[base + j * inner];
      mu *= invn;
      T var = 0;
      for (std::int64_t j = 0; j < ext; ++j) {
        const T d = vx[base + j * inner] - mu;
        var += d * d;
      }
      var *= invn;
      const T inv_sigma = T(1) / static_cast<T>(std::sqrt(static_cast<double>(var + eps)));
      for (std::int64_t j = 0; j < ext; ++j)
        out[base + j * inner] = (vx[base + j * inner] - mu) * inv_sigma;
    }
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const Tensor<T>& y = tp.val(Var{self});
    const auto& xin = tp.val(x);
    Tensor<T> gx(g.shape(), uninit);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        const std::int64_t base = o * ext * inner + i;
        T mu = 0;
        for (std::int64_t j = 0; j < ext; ++j) mu += xin[base + j * inner];
        mu *= invn;
        T var = 0;
        for (std::int64_t j = 0; j < ext; ++j) {
          const T d = xin[base + j * inner] - mu;
          var += d * d;
        }
        var *= invn;
        const T inv_sigma = T(1) / static_cast<T>(std::sqrt(static_cast<double>(var + eps)));
        T gmean = 0, gymean = 0;
        for (std::int64_t j = 0; j < ext; ++j) {
          gmean += g[base + j * inner];
          gymean += g[base + j * inner] * y[base + j * inner];
        }
        gmean *= invn;
        gymean *= invn;
        for (std::int64_t j = 0; j < ext; ++j)
          gx[base + j * inner] =
              inv_sigma * (g[base + j * inner] - gmean - y[base + j * inner] * gymean);
      }
    tp.accum(x, std::move(gx));
  });
}

}  // namespace detail

// Per-channel zero-mean unit-variance over the spatial axes of [C][H][W][D].
template <typename T>
Var instance_norm_core(Tape<T>& t, Var x, T eps) {
  const auto& vx = t.val(x);
  if (vx.rank() != 4) throw TensorError("instance_norm: expects [C][H][W][D]");
  const std::int64_t C = vx.dim(0);
  const std::int64_t S = vx.numel() / C;
  return detail::normalize_groups(t, x, C, S, 1, eps);
}

// Per-voxel normalization over the channel axis (axis 0).
template <typename T>
Var layer_norm_core(Tape<T>& t, Var x, T eps) {
  const auto& vx = t.val(x);
  if (vx.rank() < 1) throw TensorError("layer_norm: expects channel-first input");
  const std::int64_t C = vx.dim(0);
  const std::int64_t S = vx.numel() / C;
  return detail::normalize_groups(t, x, 1, C, S, eps);
}

// Per-channel scale broadcast along `axis` (multiplicative add_bias).
template <typename T>
Var mul_bias(Tape<T>& t, Var x, Var s, int axis) {
  const auto& vx = t.val(x);
  const auto& vs = t.val(s);
  std::int64_t outer, ext, inner;
  detail::axis_split(vx.shape(), axis, outer, ext, inner);
  if (vs.rank() != 1 || vs.dim(0) != ext)
    throw TensorError("mul_bias: scale must be rank-1 matching the axis extent");
  Tensor<T> out(vx.shape(), uninit);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = 0; j < ext; ++j) {
      const std::int64_t base = (o * ext + j) * inner;
      const T sj = vs[j];
      for (std::int64_t i = 0; i < inner; ++i) out[base + i] = vx[base + i] * sj;
    }
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    const auto& xin = tp.val(x);
    const auto& sin = tp.val(s);
    Tensor<T> gx(g.shape(), uninit);
    Tensor<T> gs(Shape{ext});
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t j = 0; j < ext; ++j) {
        const std::int64_t base = (o * ext + j) * inner;
        T acc = 0;
        for (std::int64_t i = 0; i < inner; ++i) {
          gx[base + i] = g[base + i] * sin[j];
          acc += g[base + i] * xin[base + i];
        }
        gs[j] += acc;
      }
    tp.accum(x, std::move(gx));
    tp.accum(s, std::move(gs));
  });
}

// ---------------------------------------------------------------------------
// Trilinear 2x upsampling, align-corners = false; constants stay constant.

template <typename T>
Var upsample_trilinear2(Tape<T>& t, Var x) {
  const auto& vx = t.val(x);
  if (vx.rank() != 4) throw TensorError("upsample: expects [C][H][W][D]");
  const std::int64_t C = vx.dim(0), H = vx.dim(1), W = vx.dim(2), D = vx.dim(3);
  const std::int64_t H2 = 2 * H, W2 = 2 * W, D2 = 2 * D;
  // Per output index o the source coordinate is (o+0.5)/2-0.5, clamped.
  auto coords = [](std::int64_t out_ext, std::int64_t in_ext, std::vector<std::int64_t>& i0,
                   std::vector<std::int64_t>& i1, std::vector<T>& f) {
    i0.resize(static_cast<std::size_t>(out_ext));
    i1.resize(static_cast<std::size_t>(out_ext));
    f.resize(static_cast<std::size_t>(out_ext));
    for (std::int64_t o = 0; o < out_ext; ++o) {
      double c = (static_cast<double>(o) + 0.5) / 2.0 - 0.5;
      c = std::clamp(c, 0.0, static_cast<double>(in_ext - 1));
      const auto lo = static_cast<std::int64_t>(std::floor(c));
      i0[static_cast<std::size_t>(o)] = lo;
      i1[static_cast<std::size_t>(o)] = std::min(lo + 1, in_ext - 1);
      f[static_cast<std::size_t>(o)] = static_cast<T>(c - static_cast<double>(lo));
    }
  };
  std::vector<std::int64_t> h0, h1, w0, w1, d0, d1;
  std::vector<T> fh, fw, fd;
  coords(H2, H, h0, h1, fh);
  coords(W2, W, w0, w1, fw);
  coords(D2, D, d0, d1, fd);
  Tensor<T> out(Shape{C, H2, W2, D2}, uninit);
  for (std::int64_t c = 0; c < C; ++c) {
    const T* src = vx.data() + c * H * W * D;
    T* dst = out.data() + c * H2 * W2 * D2;
    for (std::int64_t h = 0; h < H2; ++h)
      for (std::int64_t w = 0; w < W2; ++w)
        for (std::int64_t d = 0; d < D2; ++d) {
          const T th = fh[h], tw = fw[w], td = fd[d];
          T v = 0;
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) {
                const T wgt = (a ? th : T(1) - th) * (b ? tw : T(1) - tw) * (e ? td : T(1) - td);
                v += wgt * src[((a ? h1[h] : h0[h]) * W + (b ? w1[w] : w0[w])) * D +
                               (e ? d1[d] : d0[d])];
              }
          dst[(h * W2 + w) * D2 + d] = v;
        }
  }
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T>& gx = tp.grad_buf(x);
    for (std::int64_t c = 0; c < C; ++c) {
      T* dst = gx.data() + c * H * W * D;
      const T* src = g.data() + c * H2 * W2 * D2;
      for (std::int64_t h = 0; h < H2; ++h)
        for (std::int64_t w = 0; w < W2; ++w)
          for (std::int64_t d = 0; d < D2; ++d) {
            const T th = fh[h], tw = fw[w], td = fd[d];
            const T gv = src[(h * W2 + w) * D2 + d];
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int e = 0; e < 2; ++e) {
                  const T wgt = (a ? th : T(1) - th) * (b ? tw : T(1) - tw) * (e ? td : T(1) - td);
                  dst[((a ? h1[h] : h0[h]) * W + (b ? w1[w] : w0[w])) * D + (e ? d1[d] : d0[d])] +=
                      wgt * gv;
                }
          }
    }
  });
}

// Nearest-neighbor 2x upsampling (ablation alternative for the decoder).
template <typename T>
Var upsample_nearest2(Tape<T>& t, Var x) {
  const auto& vx = t.val(x);
  const std::int64_t C = vx.dim(0), H = vx.dim(1), W = vx.dim(2), D = vx.dim(3);
  Tensor<T> out(Shape{C, 2 * H, 2 * W, 2 * D}, uninit);
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t h = 0; h < 2 * H; ++h)
      for (std::int64_t w = 0; w < 2 * W; ++w)
        for (std::int64_t d = 0; d < 2 * D; ++d)
          out.at(c, h, w, d) = vx.at(c, h / 2, w / 2, d / 2);
  return t.make(std::move(out), [=](Tape<T>& tp, std::int32_t self) {
    const Tensor<T>& g = tp.grad(Var{self});
    Tensor<T>& gx = tp.grad_buf(x);
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t h = 0; h < 2 * H; ++h)
        for (std::int64_t w = 0; w < 2 * W; ++w)
          for (std::int64_t d = 0; d < 2 * D; ++d)
            gx.at(c, h / 2, w / 2, d / 2) += g.at(c, h, w, d);
  });
}

// ---------------------------------------------------------------------------
// Parameter initialization.

template <typename T>
Tensor<T> init_fan_in(Shape shape, std::int64_t fan_in, Rng& rng) {
  Tensor<T> t(shape);
  const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(fan_in)));
  fill_uniform(t, rng, -bound, bound);
  return t;
}

// ---------------------------------------------------------------------------
// Layers.

template <typename T>
struct Conv3dLayer {
  Param<T> w, b;
  bool has_bias = true;

  Conv3dLayer() = default;
  Conv3dLayer(const std::string& name, std::int64_t cin, std::int64_t cout, int k, Rng& rng,
              bool bias = true)
      : has_bias(bias) {
    const std::int64_t kk = static_cast<std::int64_t>(k) * k * k;
    w = Param<T>(name + ".w", init_fan_in<T>({cout, cin, k, k, k}, cin * kk, rng));
    if (bias) b = Param<T>(name + ".b", Tensor<T>(Shape{cout}));
  }

  // Near-zero init for the displacement head: training starts close to
  // the identity transform.
  void init_near_zero(Rng& rng, T stddev) {
    fill_normal(w.value, rng, T(0), stddev);
    if (has_bias) b.value.fill(T(0));
  }

  Var operator()(Tape<T>& t, Var x) {
    Var wb;
    if (has_bias) wb = t.param(b);
    return conv3d(t, x, t.param(w), wb);
  }

  void params(std::vector<Param<T>*>& out) {
    out.push_back(&w);
    if (has_bias) out.push_back(&b);
  }
};

template <typename T>
struct LinearLayer {
  Param<T> w, b;  // w is [K][N]

  LinearLayer() = default;
  LinearLayer(const std::string& name, std::int64_t in, std::int64_t out_dim, Rng& rng) {
    w = Param<T>(name + ".w", init_fan_in<T>({in, out_dim}, in, rng));
    b = Param<T>(name + ".b", Tensor<T>(Shape{out_dim}));
  }

  Var operator()(Tape<T>& t, Var x) {
    Var y = matmul(t, x, t.param(w));
    return add_bias(t, y, t.param(b), static_cast<int>(t.val(y).rank()) - 1);
  }

  void params(std::vector<Param<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename T>
struct InstanceNormLayer {
  Param<T> gamma, beta;
  T eps = static_cast<T>(1e-5);

  InstanceNormLayer() = default;
  InstanceNormLayer(const std::string& name, std::int64_t channels) {
    gamma = Param<T>(name + ".gamma", Tensor<T>(Shape{channels}, T(1)));
    beta = Param<T>(name + ".beta", Tensor<T>(Shape{channels}));
  }

  Var operator()(Tape<T>& t, Var x) {
    Var y = instance_norm_core(t, x, eps);
    y = mul_bias(t, y, t.param(gamma), 0);
    return add_bias(t, y, t.param(beta), 0);
  }

  void params(std::vector<Param<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

template <typename T>
struct LayerNormLayer {
  Param<T> gamma, beta;
  T eps = static_cast<T>(1e-5);

  LayerNormLayer() = default;
  LayerNormLayer(const std::string& name, std::int64_t channels) {
    gamma = Param<T>(name + ".gamma", Tensor<T>(Shape{channels}, T(1)));
    beta = Param<T>(name + ".beta", Tensor<T>(Shape{channels}));
  }

  Var operator()(Tape<T>& t, Var x) {
    Var y = layer_norm_core(t, x, eps);
    y = mul_bias(t, y, t.param(gamma), 0);
    return add_bias(t, y, t.param(beta), 0);
  }

  void params(std::vector<Param<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

// Squeeze-and-excitation: global average pool -> C/r bottleneck -> sigmoid
// gate, applied per channel.
template <typename T>
struct SELayer {
  LinearLayer<T> fc1, fc2;
  std::int64_t channels = 0;

  SELayer() = default;
  SELayer(const std::string& name, std::int64_t c, int reduction, Rng& rng) : channels(c) {
    if (c < reduction || c % reduction != 0)
      throw TensorError("se: channels must be divisible by the reduction ratio");
    fc1 = LinearLayer<T>(name + ".fc1", c, c / reduction, rng);
    fc2 = LinearLayer<T>(name + ".fc2", c / reduction, c, rng);
  }

  Var operator()(Tape<T>& t, Var x) {
    Var pooled = mean_trailing(t, x, 1);              // [C]
    Var z = reshape(t, pooled, Shape{1, channels});   // [1][C]
    z = relu(t, fc1(t, z));
    z = sigmoid(t, fc2(t, z));
    Var gate = reshape(t, z, Shape{channels});
    return mul_bias(t, x, gate, 0);
  }

  void params(std::vector<Param<T>*>& out) {
    fc1.params(out);
    fc2.params(out);
  }
};

// Swin-style patch merging: 2x2x2 space-to-depth (8C channels) followed by
// a learnable 8C -> 2C channel projection.
template <typename T>
struct PatchMergingLayer {
  Conv3dLayer<T> proj;  // 1x1x1, 8C -> 2C
  std::int64_t cin = 0;

  PatchMergingLayer() = default;
  PatchMergingLayer(const std::string& name, std::int64_t c, Rng& rng) : cin(c) {
    proj = Conv3dLayer<T>(name + ".proj", 8 * c, 2 * c, 1, rng);
  }

  Var operator()(Tape<T>& t, Var x) {
    const auto& vx = t.val(x);
    const std::int64_t C = vx.dim(0), H = vx.dim(1), W = vx.dim(2), D = vx.dim(3);
    if (H % 2 || W % 2 || D % 2)
      throw TensorError("patch_merging: spatial extents must be even, got " +
                        shape_str(vx.shape()));
    Var y = reshape(t, x, Shape{C, H / 2, 2, W / 2, 2, D / 2, 2});
    y = permute(t, y, {2, 4, 6, 0, 1, 3, 5});
    y = reshape(t, y, Shape{8 * C, H / 2, W / 2, D / 2});
    return proj(t, y);
  }

  void params(std::vector<Param<T>*>& out) { proj.params(out); }
};

// Two conv3 + LeakyReLU(0.2) + instance norm units (the decoder Conv block).
template <typename T>
struct ConvBlock {
  Conv3dLayer<T> c1, c2;
  InstanceNormLayer<T> n1, n2;
  T slope = static_cast<T>(0.2);

  ConvBlock() = default;
  ConvBlock(const std::string& name, std::int64_t cin, std::int64_t cout, Rng& rng) {
    c1 = Conv3dLayer<T>(name + ".c1", cin, cout, 3, rng);
    n1 = InstanceNormLayer<T>(name + ".n1", cout);
    c2 = Conv3dLayer<T>(name + ".c2", cout, cout, 3, rng);
    n2 = InstanceNormLayer<T>(name + ".n2", cout);
  }

  Var operator()(Tape<T>& t, Var x) {
    x = n1(t, leaky_relu(t, c1(t, x), slope));
    x = n2(t, leaky_relu(t, c2(t, x), slope));
    return x;
  }

  void params(std::vector<Param<T>*>& out) {
    c1.params(out);
    n1.params(out);
    c2.params(out);
    n2.params(out);
  }
};

// ---------------------------------------------------------------------------
// Bias-corrected ADAM.

template <typename T>
struct Adam {
  T lr = static_cast<T>(1e-4);
  T beta1 = static_cast<T>(0.9);
  T beta2 = static_cast<T>(0.999);
  T eps = static_cast<T>(1e-8);
  std::int64_t step_count = 0;
  std::vector<Tensor<T>> m, v;

  void step(const std::vector<Param<T>*>& params) {
    if (m.empty()) {
      for (auto* p : params) {
        m.emplace_back(p->value.shape());
        v.emplace_back(p->value.shape());
      }
    }
    if (m.size() != params.size()) throw TensorError("adam: parameter set changed");
    ++step_count;
    const double bc1 = 1.0 - std::pow(static_cast<double>(beta1), static_cast<double>(step_count));
    const double bc2 = 1.0 - std::pow(static_cast<double>(beta2), static_cast<double>(step_count));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Param<T>& p = *params[i];
      if (!p.grad.same_shape(p.value)) throw TensorError("adam: gradient shape mismatch");
      for (std::int64_t j = 0; j < p.value.numel(); ++j) {
        const T g = p.grad[j];
        m[i][j] = beta1 * m[i][j] + (T(1) - beta1) * g;
        v[i][j] = beta2 * v[i][j] + (T(1) - beta2) * g * g;
        const double mhat = static_cast<double>(m[i][j]) / bc1;
        const double vhat = static_cast<double>(v[i][j]) / bc2;
        p.value[j] -= static_cast<T>(static_cast<double>(lr) * mhat /
                                     (std::sqrt(vhat) + static_cast<double>(eps)));
      }
    }
  }
};

}  // namespace maxca
