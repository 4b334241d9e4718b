#pragma once

#include <cmath>
#include <vector>

#include "recttt/tensor.hpp"

// Raw forward/backward kernels for the network ops, templated on the scalar
// type (float in production, double for shadow forwards). Batch statistics
// and reductions accumulate in double; every output element is produced by
// one thread with a fixed accumulation order, keeping results reproducible.

namespace recttt {

enum class BnMode {
  Train,       // normalize by batch statistics, update running statistics
  Eval,        // normalize by running statistics
  BatchStats,  // normalize by batch statistics, leave running statistics alone
};

inline int conv_out_extent(int in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

// Expands one image [C,H,W] into columns for GEMM. Rows are the C*KH*KW
// patch coordinates; `pitch` is the row stride of the destination, which
// lets one batch-wide buffer hold per-image column blocks side by side.
template <class T>
void im2col(const T* x, int c, int h, int w, int kh, int kw, int stride, int pad, int oh,
            int ow, T* cols, std::size_t pitch) {
  for (int ic = 0; ic < c; ++ic) {
    const T* xc = x + static_cast<std::size_t>(ic) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        T* row = cols + (static_cast<std::size_t>(ic) * kh * kw + ky * kw + kx) * pitch;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            for (int ox = 0; ox < ow; ++ox) row[oy * ow + ox] = T(0);
            continue;
          }
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * ow + ox] = (ix >= 0 && ix < w) ? xc[iy * w + ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_add(const T* cols, int c, int h, int w, int kh, int kw, int stride, int pad,
                int oh, int ow, T* x, std::size_t pitch) {
  for (int ic = 0; ic < c; ++ic) {
    T* xc = x + static_cast<std::size_t>(ic) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const T* row = cols + (static_cast<std::size_t>(ic) * kh * kw + ky * kw + kx) * pitch;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) xc[iy * w + ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

template <class T>
BasicTensor<T> conv2d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                              const BasicTensor<T>& b, int stride, int pad) {
  if (x.rank() != 4 || w.rank() != 4) throw ShapeError("conv2d: expects NCHW input and OIHW weight");
  const int n = x.shape[0], ic = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const int oc = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  if (w.shape[1] != ic)
    throw ShapeError("conv2d: input has " + std::to_string(ic) + " channels, weight expects " +
                     std::to_string(w.shape[1]));
  if (b.numel() != oc) throw ShapeError("conv2d: bias size mismatch");
  const int oh = conv_out_extent(h, kh, stride, pad);
  const int ow = conv_out_extent(wd, kw, stride, pad);
  if (oh < 1 || ow < 1) throw ShapeError("conv2d: kernel larger than padded input");

  BasicTensor<T> out = BasicTensor<T>::uninit({n, oc, oh, ow});
  const int ckk = ic * kh * kw;
  const std::size_t in_plane = static_cast<std::size_t>(ic) * h * wd;
  const std::size_t out_plane = static_cast<std::size_t>(oc) * oh * ow;
  const bool unit_kernel = (kh == 1 && kw == 1 && pad == 0 && stride == 1);
  const bool fork = n > 1 && static_cast<double>(n) * oc * ckk * oh * ow > 4e5;

#pragma omp parallel if (fork)
  {
    TensorData<T> cols;
    if (!unit_kernel) cols.resize(static_cast<std::size_t>(ckk) * oh * ow);
#pragma omp for schedule(static)
    for (int i = 0; i < n; ++i) {
      const T* xi = x.data.data() + i * in_plane;
      T* oi = out.data.data() + i * out_plane;
      if (unit_kernel) {
        gemm(w.data.data(), xi, oi, oc, ic, oh * ow, /*parallel=*/false);
      } else {
        im2col(xi, ic, h, wd, kh, kw, stride, pad, oh, ow, cols.data(),
               static_cast<std::size_t>(oh) * ow);
        gemm(w.data.data(), cols.data(), oi, oc, ckk, oh * ow, /*parallel=*/false);
      }
      for (int c = 0; c < oc; ++c) {
        const T bias = b.data[c];
        T* plane = oi + static_cast<std::size_t>(c) * oh * ow;
        for (int p = 0; p < oh * ow; ++p) plane[p] += bias;
      }
    }
  }
  return out;
}

// Backward via batch-wide column buffers: one GEMM for dw and one for dx
// across the whole batch, parallel over output rows only, so every gradient
// element keeps a fixed accumulation order.
template <class T>
void conv2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                     const BasicTensor<T>& gout, int stride, int pad, BasicTensor<T>* dx,
                     BasicTensor<T>* dw, BasicTensor<T>* db) {
  const int n = x.shape[0], ic = x.shape[1], h = x.shape[2], wd = x.shape[3];
  const int oc = w.shape[0], kh = w.shape[2], kw = w.shape[3];
  const int oh = gout.shape[2], ow = gout.shape[3];
  const int ckk = ic * kh * kw;
  const std::size_t hw_out = static_cast<std::size_t>(oh) * ow;
  const std::size_t np = static_cast<std::size_t>(n) * hw_out;
  const std::size_t in_plane = static_cast<std::size_t>(ic) * h * wd;
  const std::size_t out_plane = static_cast<std::size_t>(oc) * hw_out;

  if (db) {
    *db = BasicTensor<T>::uninit({oc});
    for (int c = 0; c < oc; ++c) {
      double acc = 0.0;
      for (int i = 0; i < n; ++i) {
        const T* plane = gout.data.data() + i * out_plane + c * hw_out;
        for (std::size_t p = 0; p < hw_out; ++p) acc += plane[p];
      }
      db->data[c] = static_cast<T>(acc);
    }
  }
  if (!dx && !dw) return;

  const bool fork = n > 1 && static_cast<double>(oc) * ckk * np > 4e5;
  // gout regrouped as [OC x N*OH*OW].
  TensorData<T> gt(static_cast<std::size_t>(oc) * np);
#pragma omp parallel for schedule(static) if (fork)
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < oc; ++c)
      std::copy_n(gout.data.data() + i * out_plane + c * hw_out, hw_out,
                  gt.data() + c * np + i * hw_out);

  if (dw) {
    // Input patches as [CKK x N*OH*OW], image blocks side by side.
    TensorData<T> cols(static_cast<std::size_t>(ckk) * np);
#pragma omp parallel for schedule(static) if (fork)
    for (int i = 0; i < n; ++i)
      im2col(x.data.data() + i * in_plane, ic, h, wd, kh, kw, stride, pad, oh, ow,
             cols.data() + i * hw_out, np);
    *dw = BasicTensor<T>::uninit(w.shape);
    gemm_abt(gt.data(), cols.data(), dw->data.data(), oc, static_cast<int>(np), ckk,
             /*accumulate=*/false);
  }

  if (dx) {
    BasicTensor<T> wt = BasicTensor<T>::uninit({ckk, oc});
    for (int o = 0; o < oc; ++o)
      for (int k = 0; k < ckk; ++k)
        wt.data[static_cast<std::size_t>(k) * oc + o] = w.data[static_cast<std::size_t>(o) * ckk + k];
    TensorData<T> dcols(static_cast<std::size_t>(ckk) * np);
    gemm(wt.data.data(), gt.data(), dcols.data(), ckk, oc, static_cast<int>(np));
    *dx = zeros<T>(x.shape);
#pragma omp parallel for schedule(static) if (fork)
    for (int i = 0; i < n; ++i)
      col2im_add(dcols.data() + i * hw_out, ic, h, wd, kh, kw, stride, pad, oh, ow,
                 dx->data.data() + i * in_plane, np);
  }
}

// Batch normalization over NCHW, statistics per channel across N*H*W.
// Running statistics are always float32 model state, whatever the compute
// type; saved_mean / saved_invstd receive the statistics actually used,
// which the backward pass needs.
template <class T>
BasicTensor<T> batchnorm_forward(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                                 const BasicTensor<T>& beta, Tensor& running_mean,
                                 Tensor& running_var, float momentum, float eps, BnMode mode,
                                 BasicTensor<T>& saved_mean, BasicTensor<T>& saved_invstd) {
  if (x.rank() != 4) throw ShapeError("batchnorm: expects NCHW input");
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
      running_var.numel() != c)
    throw ShapeError("batchnorm: channel parameter mismatch");
  if (mode != BnMode::Eval && n < 2)
    throw ShapeError("batchnorm: batch statistics require batch size >= 2");

  const std::int64_t m = static_cast<std::int64_t>(n) * h * w;
  saved_mean = BasicTensor<T>::uninit({c});
  saved_invstd = BasicTensor<T>::uninit({c});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t image = static_cast<std::size_t>(c) * plane;

#pragma omp parallel for schedule(static) if (c >= 16 && m * c > 100000)
  for (int ch = 0; ch < c; ++ch) {
    double mu, var;
    if (mode == BnMode::Eval) {
      mu = running_mean.data[ch];
      var = running_var.data[ch];
    } else {
      double s = 0.0;
      for (int i = 0; i < n; ++i) {
        const T* p = x.data.data() + i * image + ch * plane;
        for (std::size_t k = 0; k < plane; ++k) s += p[k];
      }
      mu = s / static_cast<double>(m);
      double sq = 0.0;
      for (int i = 0; i < n; ++i) {
        const T* p = x.data.data() + i * image + ch * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          const double d = p[k] - mu;
          sq += d * d;
        }
      }
      var = sq / static_cast<double>(m);
    }
    saved_mean.data[ch] = static_cast<T>(mu);
    saved_invstd.data[ch] = static_cast<T>(1.0 / std::sqrt(var + eps));
    if (mode == BnMode::Train) {
      running_mean.data[ch] =
          static_cast<float>((1.0 - momentum) * running_mean.data[ch] + momentum * mu);
      running_var.data[ch] =
          static_cast<float>((1.0 - momentum) * running_var.data[ch] + momentum * var);
    }
  }

  BasicTensor<T> out = BasicTensor<T>::uninit(x.shape);
#pragma omp parallel for schedule(static) if (n > 1 && x.numel() > 400000)
  for (int i = 0; i < n; ++i) {
    for (int ch = 0; ch < c; ++ch) {
      const T mu = saved_mean.data[ch];
      const T istd = saved_invstd.data[ch];
      const T g = gamma.data[ch], bt = beta.data[ch];
      const T* p = x.data.data() + i * image + ch * plane;
      T* q = out.data.data() + i * image + ch * plane;
      for (std::size_t k = 0; k < plane; ++k) q[k] = g * (p[k] - mu) * istd + bt;
    }
  }
  return out;
}

template <class T>
void batchnorm_backward(const BasicTensor<T>& x, const BasicTensor<T>& gamma,
                        const BasicTensor<T>& saved_mean, const BasicTensor<T>& saved_invstd,
                        const BasicTensor<T>& gout, BnMode mode, BasicTensor<T>* dx,
                        BasicTensor<T>* dgamma, BasicTensor<T>* dbeta) {
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  const std::int64_t m = static_cast<std::int64_t>(n) * h * w;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const std::size_t image = static_cast<std::size_t>(c) * plane;
  if (dx) *dx = BasicTensor<T>::uninit(x.shape);
  if (dgamma) *dgamma = BasicTensor<T>::uninit({c});
  if (dbeta) *dbeta = BasicTensor<T>::uninit({c});

#pragma omp parallel for schedule(static) if (c >= 16 && m * c > 100000)
  for (int ch = 0; ch < c; ++ch) {
    const double mu = saved_mean.data[ch];
    const double istd = saved_invstd.data[ch];
    double s0 = 0.0, s1 = 0.0;  // sum(g), sum(g * xhat)
    for (int i = 0; i < n; ++i) {
      const T* gp = gout.data.data() + i * image + ch * plane;
      const T* xp = x.data.data() + i * image + ch * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        s0 += gp[k];
        s1 += gp[k] * (xp[k] - mu) * istd;
      }
    }
    if (dgamma) dgamma->data[ch] = static_cast<T>(s1);
    if (dbeta) dbeta->data[ch] = static_cast<T>(s0);
    if (!dx) continue;
    const double g = gamma.data[ch];
    if (mode == BnMode::Eval) {
      const double k0 = g * istd;
      for (int i = 0; i < n; ++i) {
        const T* gp = gout.data.data() + i * image + ch * plane;
        T* dp = dx->data.data() + i * image + ch * plane;
        for (std::size_t k = 0; k < plane; ++k) dp[k] = static_cast<T>(k0 * gp[k]);
      }
    } else {
      const double k0 = g * istd / static_cast<double>(m);
      for (int i = 0; i < n; ++i) {
        const T* gp = gout.data.data() + i * image + ch * plane;
        const T* xp = x.data.data() + i * image + ch * plane;
        T* dp = dx->data.data() + i * image + ch * plane;
        for (std::size_t k = 0; k < plane; ++k) {
          const double xhat = (xp[k] - mu) * istd;
          dp[k] = static_cast<T>(k0 * (static_cast<double>(m) * gp[k] - s0 - xhat * s1));
        }
      }
    }
  }
}

template <class T>
BasicTensor<T> avgpool2d_forward(const BasicTensor<T>& x, int k, int s) {
  if (x.rank() != 4) throw ShapeError("avgpool2d: expects NCHW input");
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  if (k < 1 || s < 1 || k > h || k > w) throw ShapeError("avgpool2d: bad kernel/stride");
  const int oh = (h - k) / s + 1, ow = (w - k) / s + 1;
  BasicTensor<T> out = BasicTensor<T>::uninit({n, c, oh, ow});
  const double inv = 1.0 / (static_cast<double>(k) * k);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = 0.0;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) acc += x.at4(i, ch, oy * s + ky, ox * s + kx);
          out.at4(i, ch, oy, ox) = static_cast<T>(acc * inv);
        }
  return out;
}

template <class T>
BasicTensor<T> avgpool2d_backward(const BasicTensor<T>& x, const BasicTensor<T>& gout, int k,
                                  int s) {
  BasicTensor<T> dx = zeros<T>(x.shape);
  const int n = x.shape[0], c = x.shape[1];
  const int oh = gout.shape[2], ow = gout.shape[3];
  const T inv = T(1) / (static_cast<T>(k) * k);
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          const T g = gout.at4(i, ch, oy, ox) * inv;
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) dx.at4(i, ch, oy * s + ky, ox * s + kx) += g;
        }
  return dx;
}

template <class T>
BasicTensor<T> upsample2x_forward(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("upsample2x: expects NCHW input");
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  BasicTensor<T> out = BasicTensor<T>::uninit({n, c, 2 * h, 2 * w});
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x2 = 0; x2 < w; ++x2) {
          const T v = x.at4(i, ch, y, x2);
          out.at4(i, ch, 2 * y, 2 * x2) = v;
          out.at4(i, ch, 2 * y, 2 * x2 + 1) = v;
          out.at4(i, ch, 2 * y + 1, 2 * x2) = v;
          out.at4(i, ch, 2 * y + 1, 2 * x2 + 1) = v;
        }
  return out;
}

template <class T>
BasicTensor<T> upsample2x_backward(const BasicTensor<T>& x, const BasicTensor<T>& gout) {
  BasicTensor<T> dx = BasicTensor<T>::uninit(x.shape);
  const int n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3];
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x2 = 0; x2 < w; ++x2)
          dx.at4(i, ch, y, x2) = gout.at4(i, ch, 2 * y, 2 * x2) + gout.at4(i, ch, 2 * y, 2 * x2 + 1) +
                                 gout.at4(i, ch, 2 * y + 1, 2 * x2) +
                                 gout.at4(i, ch, 2 * y + 1, 2 * x2 + 1);
  return dx;
}

// Row softmax / log-softmax for [N, C] logits, evaluated in double.
template <class T>
BasicTensor<T> softmax_rows(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("softmax: expects [batch, classes]");
  const int n = x.shape[0], c = x.shape[1];
  BasicTensor<T> out = BasicTensor<T>::uninit(x.shape);
  for (int i = 0; i < n; ++i) {
    const T* row = x.data.data() + static_cast<std::size_t>(i) * c;
    T* orow = out.data.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    for (int j = 0; j < c; ++j)
      orow[j] = static_cast<T>(std::exp(row[j] - mx) / denom);
  }
  return out;
}

template <class T>
BasicTensor<T> log_softmax_rows(const BasicTensor<T>& x) {
  if (x.rank() != 2) throw ShapeError("log_softmax: expects [batch, classes]");
  const int n = x.shape[0], c = x.shape[1];
  BasicTensor<T> out = BasicTensor<T>::uninit(x.shape);
  for (int i = 0; i < n; ++i) {
    const T* row = x.data.data() + static_cast<std::size_t>(i) * c;
    T* orow = out.data.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (int j = 0; j < c; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    for (int j = 0; j < c; ++j) orow[j] = static_cast<T>(row[j] - lse);
  }
  return out;
}

}  // namespace recttt
