#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hsinet/graph.hpp"
#include "hsinet/parallel.hpp"
#include "hsinet/tensor.hpp"

namespace hsinet {

struct Conv2dSpec {
  int in_channels = 1;
  int out_channels = 1;
  int kh = 1;
  int kw = 1;
  int sh = 1;
  int sw = 1;
  int ph = 0;
  int pw = 0;
  int groups = 1;
  bool has_bias = false;

  // k x k kernel with "same" zero padding (k-1)/2.
  static Conv2dSpec square(int in, int out, int k, int stride = 1, int groups = 1, bool bias = false) {
    return Conv2dSpec{in, out, k, k, stride, stride, (k - 1) / 2, (k - 1) / 2, groups, bias};
  }

  Shape weight_shape() const { return Shape{out_channels, in_channels / groups, kh, kw}; }
  std::int64_t weight_count() const {
    return static_cast<std::int64_t>(out_channels) * (in_channels / groups) * kh * kw;
  }
  std::int64_t param_count() const { return weight_count() + (has_bias ? out_channels : 0); }

  void validate() const {
    if (in_channels < 1 || out_channels < 1 || groups < 1) {
      throw ShapeError("conv2d: channel counts and groups must be >= 1");
    }
    if (in_channels % groups != 0) {
      throw ShapeError("conv2d: in_channels " + std::to_string(in_channels) + " not divisible by groups " +
                       std::to_string(groups));
    }
    if (out_channels % groups != 0) {
      throw ShapeError("conv2d: out_channels " + std::to_string(out_channels) + " not divisible by groups " +
                       std::to_string(groups));
    }
    if (kh < 1 || kw < 1) throw ShapeError("conv2d: kernel must be >= 1");
    if (sh < 1 || sw < 1) throw ShapeError("conv2d: stride must be >= 1");
    if (ph < 0 || pw < 0) throw ShapeError("conv2d: padding must be >= 0");
  }

  Shape output_shape(const Shape& in) const {
    const std::int64_t oh = (in.h + 2 * ph - kh) / sh + 1;
    const std::int64_t ow = (in.w + 2 * pw - kw) / sw + 1;
    if (in.h + 2 * ph < kh || in.w + 2 * pw < kw) {
      throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                       " larger than padded input " + in.str());
    }
    return Shape{in.n, out_channels, oh, ow};
  }
};

enum class PoolMode { Max, Avg };

namespace detail {

template <class T>
inline void axpy(T a, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += a * x[i];
}

// Fixed four-way split keeps the summation order independent of data and
// thread count.
template <class T>
inline T dot(const T* a, const T* b, std::size_t n) {
  T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

template <class T>
void require_finite(const Tensor<T>& t, const char* op, const char* what) {
  if (t.materialized() && !t.all_finite()) {
    throw ValueError(std::string(op) + ": non-finite value in " + what);
  }
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return;
  const char* dim = a.n != b.n ? "batch" : a.c != b.c ? "channel" : a.h != b.h ? "height" : "width";
  throw ShapeError(std::string(op) + ": " + dim + " mismatch between " + a.str() + " and " + b.str());
}

// Column buffer for one (sample, group): rows are (cin, ky, kx), columns are
// output pixels.
template <class T>
void im2col(const T* in, std::int64_t channels, std::int64_t h, std::int64_t w, const Conv2dSpec& s,
            std::int64_t oh, std::int64_t ow, T* col) {
  const std::size_t P = static_cast<std::size_t>(oh * ow);
  for (std::int64_t c = 0; c < channels; ++c) {
    const T* plane = in + c * h * w;
    for (int ky = 0; ky < s.kh; ++ky) {
      for (int kx = 0; kx < s.kw; ++kx) {
        T* row = col + ((c * s.kh + ky) * s.kw + kx) * P;
        for (std::int64_t oy = 0; oy < oh; ++oy) {
          const std::int64_t iy = oy * s.sh - s.ph + ky;
          T* dst = row + oy * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = plane + iy * w;
          for (std::int64_t ox = 0; ox < ow; ++ox) {
            const std::int64_t ix = ox * s.sw - s.pw + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <class T>
void col2im_channel(const T* col, std::int64_t c, std::int64_t h, std::int64_t w, const Conv2dSpec& s,
                    std::int64_t oh, std::int64_t ow, T* plane) {
  const std::size_t P = static_cast<std::size_t>(oh * ow);
  for (int ky = 0; ky < s.kh; ++ky) {
    for (int kx = 0; kx < s.kw; ++kx) {
      const T* row = col + ((c * s.kh + ky) * s.kw + kx) * P;
      for (std::int64_t oy = 0; oy < oh; ++oy) {
        const std::int64_t iy = oy * s.sh - s.ph + ky;
        if (iy < 0 || iy >= h) continue;
        T* dst = plane + iy * w;
        const T* src = row + oy * ow;
        for (std::int64_t ox = 0; ox < ow; ++ox) {
          const std::int64_t ix = ox * s.sw - s.pw + kx;
          if (ix >= 0 && ix < w) dst[ix] += src[ox];
        }
      }
    }
  }
}

inline bool is_pointwise(const Conv2dSpec& s) {
  return s.kh == 1 && s.kw == 1 && s.sh == 1 && s.sw == 1 && s.ph == 0 && s.pw == 0;
}

// Output range [lo, hi) of positions whose input tap `k` lands inside [0, in).
inline void valid_range(std::int64_t out, std::int64_t in, int stride, int pad, int k, std::int64_t& lo,
                        std::int64_t& hi) {
  // need 0 <= o*stride - pad + k < in
  const std::int64_t a = pad - k;  // o*stride >= a
  lo = a <= 0 ? 0 : (a + stride - 1) / stride;
  const std::int64_t b = in + pad - k;  // o*stride < b
  hi = b <= 0 ? 0 : std::min<std::int64_t>(out, (b + stride - 1) / stride);
  if (lo > hi) lo = hi;
}

template <class T>
void conv_forward(const Tensor<T>& x, const Tensor<T>& wt, const Tensor<T>* bias, const Conv2dSpec& s,
                  Tensor<T>& y) {
  const Shape& is = x.shape();
  const Shape& os = y.shape();
  const std::int64_t cg = s.in_channels / s.groups;
  const std::int64_t og = s.out_channels / s.groups;
  const std::size_t P = os.plane();
  const std::size_t K = static_cast<std::size_t>(cg * s.kh * s.kw);
  const bool pointwise = is_pointwise(s);
  std::vector<T> col;
  if (cg > 1 && !pointwise) col.resize(K * P);

  for (std::int64_t n = 0; n < is.n; ++n) {
    for (std::int64_t g = 0; g < s.groups; ++g) {
      const T* xin = x.plane(n, g * cg);
      if (cg == 1) {
        // Depthwise (optionally with a channel multiplier): direct sliding window.
        parallel_for(static_cast<std::size_t>(og), P * K, [&](std::size_t ob, std::size_t oe) {
          for (std::size_t oi = ob; oi < oe; ++oi) {
            const std::int64_t o = g * og + static_cast<std::int64_t>(oi);
            T* out = y.plane(n, o);
            const T b0 = bias ? (*bias)[static_cast<std::size_t>(o)] : T(0);
            std::fill(out, out + P, b0);
            const T* wk = wt.ptr() + o * s.kh * s.kw;
            for (int ky = 0; ky < s.kh; ++ky) {
              std::int64_t ylo, yhi;
              valid_range(os.h, is.h, s.sh, s.ph, ky, ylo, yhi);
              for (int kx = 0; kx < s.kw; ++kx) {
                const T wv = wk[ky * s.kw + kx];
                std::int64_t xlo, xhi;
                valid_range(os.w, is.w, s.sw, s.pw, kx, xlo, xhi);
                for (std::int64_t oy = ylo; oy < yhi; ++oy) {
                  const T* src = xin + (oy * s.sh - s.ph + ky) * is.w;
                  T* dst = out + oy * os.w;
                  if (s.sw == 1) {
                    const std::int64_t off = kx - s.pw;
                    for (std::int64_t ox = xlo; ox < xhi; ++ox) dst[ox] += wv * src[ox + off];
                  } else {
                    for (std::int64_t ox = xlo; ox < xhi; ++ox) dst[ox] += wv * src[ox * s.sw - s.pw + kx];
                  }
                }
              }
            }
          }
        });
        continue;
      }
      const T* colp = xin;
      if (!pointwise) {
        im2col(xin, cg, is.h, is.w, s, os.h, os.w, col.data());
        colp = col.data();
      }
      constexpr std::size_t kBlock = 512;
      parallel_for(static_cast<std::size_t>(og), P * K, [&](std::size_t ob, std::size_t oe) {
        for (std::size_t pb = 0; pb < P; pb += kBlock) {
          const std::size_t pn = std::min(kBlock, P - pb);
          for (std::size_t oi = ob; oi < oe; ++oi) {
            const std::int64_t o = g * og + static_cast<std::int64_t>(oi);
            T* out = y.plane(n, o) + pb;
            const T b0 = bias ? (*bias)[static_cast<std::size_t>(o)] : T(0);
            std::fill(out, out + pn, b0);
            const T* wrow = wt.ptr() + o * static_cast<std::int64_t>(K);
            for (std::size_t k = 0; k < K; ++k) axpy(wrow[k], colp + k * P + pb, out, pn);
          }
        }
      });
    }
  }
}

template <class T>
void conv_backward(const Tensor<T>& x, const Tensor<T>& wt, const Conv2dSpec& s, const Tensor<T>& gy,
                   Tensor<T>* gx, Tensor<T>* gw, Tensor<T>* gb) {
  const Shape& is = x.shape();
  const Shape& os = gy.shape();
  const std::int64_t cg = s.in_channels / s.groups;
  const std::int64_t og = s.out_channels / s.groups;
  const std::size_t P = os.plane();
  const std::size_t K = static_cast<std::size_t>(cg * s.kh * s.kw);
  const bool pointwise = is_pointwise(s);

  if (gb) {
    for (std::int64_t n = 0; n < os.n; ++n) {
      for (std::int64_t o = 0; o < os.c; ++o) {
        const T* g = gy.plane(n, o);
        T acc = 0;
        for (std::size_t p = 0; p < P; ++p) acc += g[p];
        (*gb)[static_cast<std::size_t>(o)] += acc;
      }
    }
  }

  std::vector<T> col;
  std::vector<T> dcol;
  if (cg > 1 && !pointwise) {
    col.resize(K * P);
    dcol.resize(K * P);
  }

  for (std::int64_t n = 0; n < is.n; ++n) {
    for (std::int64_t g = 0; g < s.groups; ++g) {
      const T* xin = x.plane(n, g * cg);
      if (cg == 1) {
        // One input channel per group feeds og outputs.
        T* dx = gx ? gx->plane(n, g) : nullptr;
        for (std::int64_t oi = 0; oi < og; ++oi) {
          const std::int64_t o = g * og + oi;
          const T* dy = gy.plane(n, o);
          const T* wk = wt.ptr() + o * s.kh * s.kw;
          T* dwk = gw ? gw->ptr() + o * s.kh * s.kw : nullptr;
          for (int ky = 0; ky < s.kh; ++ky) {
            std::int64_t ylo, yhi;
            valid_range(os.h, is.h, s.sh, s.ph, ky, ylo, yhi);
            for (int kx = 0; kx < s.kw; ++kx) {
              std::int64_t xlo, xhi;
              valid_range(os.w, is.w, s.sw, s.pw, kx, xlo, xhi);
              const T wv = wk[ky * s.kw + kx];
              T acc = 0;
              for (std::int64_t oy = ylo; oy < yhi; ++oy) {
                const std::int64_t iy = oy * s.sh - s.ph + ky;
                const T* src = xin + iy * is.w;
                const T* gline = dy + oy * os.w;
                T* dline = dx ? dx + iy * is.w : nullptr;
                for (std::int64_t ox = xlo; ox < xhi; ++ox) {
                  const std::int64_t ix = ox * s.sw - s.pw + kx;
                  acc += gline[ox] * src[ix];
                  if (dline) dline[ix] += wv * gline[ox];
                }
              }
              if (dwk) dwk[ky * s.kw + kx] += acc;
            }
          }
        }
        continue;
      }

      const T* colp = xin;
      if (!pointwise) {
        im2col(xin, cg, is.h, is.w, s, os.h, os.w, col.data());
        colp = col.data();
      }
      if (gw) {
        parallel_for(static_cast<std::size_t>(og), P * K, [&](std::size_t ob, std::size_t oe) {
          for (std::size_t oi = ob; oi < oe; ++oi) {
            const std::int64_t o = g * og + static_cast<std::int64_t>(oi);
            const T* dy = gy.plane(n, o);
            T* dwrow = gw->ptr() + o * static_cast<std::int64_t>(K);
            for (std::size_t k = 0; k < K; ++k) dwrow[k] += dot(dy, colp + k * P, P);
          }
        });
      }
      if (gx) {
        T* dcolp = pointwise ? gx->plane(n, g * cg) : dcol.data();
        if (!pointwise) std::fill(dcol.begin(), dcol.end(), T(0));
        constexpr std::size_t kBlock = 512;
        parallel_for(K, P * static_cast<std::size_t>(og), [&](std::size_t kb, std::size_t ke) {
          for (std::size_t pb = 0; pb < P; pb += kBlock) {
            const std::size_t pn = std::min(kBlock, P - pb);
            for (std::size_t k = kb; k < ke; ++k) {
              T* drow = dcolp + k * P + pb;
              for (std::int64_t oi = 0; oi < og; ++oi) {
                const std::int64_t o = g * og + oi;
                axpy(wt[static_cast<std::size_t>(o) * K + k], gy.plane(n, o) + pb, drow, pn);
              }
            }
          }
        });
        if (!pointwise) {
          parallel_for(static_cast<std::size_t>(cg), P * s.kh * s.kw, [&](std::size_t cb, std::size_t ce) {
            for (std::size_t c = cb; c < ce; ++c) {
              col2im_channel(dcol.data(), static_cast<std::int64_t>(c), is.h, is.w, s, os.h, os.w,
                             gx->plane(n, g * cg + static_cast<std::int64_t>(c)));
            }
          });
        }
      }
    }
  }
}

}  // namespace detail

/// 1-D correlation over a sequence with zero "same" padding of (k-1)/2.
template <class T>
std::vector<T> conv1d_same(std::span<const T> seq, std::span<const T> kernel) {
  const std::size_t k = kernel.size();
  if (k == 0 || k % 2 == 0) throw ShapeError("conv1d_same: kernel length must be odd, got " + std::to_string(k));
  const std::int64_t half = static_cast<std::int64_t>(k / 2);
  const std::int64_t len = static_cast<std::int64_t>(seq.size());
  std::vector<T> out(seq.size(), T(0));
  for (std::int64_t i = 0; i < len; ++i) {
    T acc = 0;
    for (std::int64_t j = 0; j < static_cast<std::int64_t>(k); ++j) {
      const std::int64_t src = i + j - half;
      if (src >= 0 && src < len) acc += kernel[static_cast<std::size_t>(j)] * seq[static_cast<std::size_t>(src)];
    }
    out[static_cast<std::size_t>(i)] = acc;
  }
  return out;
}

namespace ops {

template <class T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& w, const Var<T>& bias, const Conv2dSpec& spec) {
  spec.validate();
  const Shape& is = x->value.shape();
  if (is.c != spec.in_channels) {
    throw ShapeError("conv2d: input channel count " + std::to_string(is.c) + " != in_channels " +
                     std::to_string(spec.in_channels));
  }
  const Shape ws = spec.weight_shape();
  const Shape& got = w->value.shape();
  if (got != ws) {
    const char* dim = got.n != ws.n ? "out_channels" : got.c != ws.c ? "in_channels/groups" : got.h != ws.h ? "kernel height" : "kernel width";
    throw ShapeError(std::string("conv2d: weight ") + dim + " mismatch, expected " + ws.str() + " got " +
                     got.str());
  }
  if (spec.has_bias != static_cast<bool>(bias)) throw ShapeError("conv2d: bias presence disagrees with spec");
  if (bias && bias->value.numel() != static_cast<std::size_t>(spec.out_channels)) {
    throw ShapeError("conv2d: bias length must equal out_channels");
  }
  const Shape os = spec.output_shape(is);
  g.record_cost("conv2d", os, spec.param_count(),
                2 * spec.weight_count() * os.h * os.w * os.n);
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(os), {}, nullptr);

  detail::require_finite(x->value, "conv2d", "input");
  detail::require_finite(w->value, "conv2d", "weight");
  Tensor<T> y(os);
  detail::conv_forward(x->value, w->value, bias ? &bias->value : nullptr, spec, y);
  return g.emit(std::move(y), {x, w, bias}, [x, w, bias, spec](const Tensor<T>& gy) {
    detail::conv_backward(x->value, w->value, spec, gy, x->requires_grad ? &x->grad_buffer() : nullptr,
                          w->requires_grad ? &w->grad_buffer() : nullptr,
                          bias && bias->requires_grad ? &bias->grad_buffer() : nullptr);
  });
}

// Channel-descriptor convolution: x is (n, c, 1, 1) read as a length-c
// sequence per sample; kernel is a length-k weight vector.
template <class T>
Var<T> conv1d_channels(Graph<T>& g, const Var<T>& x, const Var<T>& kernel) {
  const Shape& s = x->value.shape();
  if (s.h != 1 || s.w != 1) throw ShapeError("conv1d_channels: expects an (n, c, 1, 1) descriptor, got " + s.str());
  const std::size_t k = kernel->value.numel();
  if (k % 2 == 0) throw ShapeError("conv1d_channels: kernel length must be odd");
  g.record_cost("conv1d", s, static_cast<std::int64_t>(k), 2 * static_cast<std::int64_t>(k) * s.c * s.n);
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(s), {}, nullptr);
  Tensor<T> y(s);
  const std::size_t C = static_cast<std::size_t>(s.c);
  for (std::int64_t n = 0; n < s.n; ++n) {
    auto seq = std::span<const T>(x->value.ptr() + n * s.c, C);
    auto out = conv1d_same<T>(seq, kernel->value.data());
    std::copy(out.begin(), out.end(), y.ptr() + n * s.c);
  }
  return g.emit(std::move(y), {x, kernel}, [x, kernel](const Tensor<T>& gy) {
    const Shape& s = x->value.shape();
    const std::int64_t k = static_cast<std::int64_t>(kernel->value.numel());
    const std::int64_t half = k / 2;
    T* gx = x->requires_grad ? x->grad_buffer().ptr() : nullptr;
    T* gk = kernel->requires_grad ? kernel->grad_buffer().ptr() : nullptr;
    for (std::int64_t n = 0; n < s.n; ++n) {
      const T* xs = x->value.ptr() + n * s.c;
      const T* gs = gy.ptr() + n * s.c;
      for (std::int64_t i = 0; i < s.c; ++i) {
        for (std::int64_t j = 0; j < k; ++j) {
          const std::int64_t src = i + j - half;
          if (src < 0 || src >= s.c) continue;
          if (gk) gk[j] += gs[i] * xs[src];
          if (gx) gx[n * s.c + src] += kernel->value[static_cast<std::size_t>(j)] * gs[i];
        }
      }
    }
  });
}

// Reduce each h x w plane to one value: (n, c, h, w) -> (n, c, 1, 1).
template <class T>
Var<T> pool_spatial(Graph<T>& g, const Var<T>& x, PoolMode mode) {
  const Shape& s = x->value.shape();
  const Shape os{s.n, s.c, 1, 1};
  g.record_cost(mode == PoolMode::Max ? "maxpool_spatial" : "avgpool_spatial", os, 0,
                static_cast<std::int64_t>(s.numel()));
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(os), {}, nullptr);
  const std::size_t P = s.plane();
  Tensor<T> y(os);
  std::vector<std::size_t> argmax;
  if (mode == PoolMode::Max) argmax.resize(os.numel());
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::int64_t c = 0; c < s.c; ++c) {
      const T* p = x->value.plane(n, c);
      const std::size_t oi = static_cast<std::size_t>(n * s.c + c);
      if (mode == PoolMode::Max) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < P; ++i) {
          if (p[i] > p[best]) best = i;
        }
        argmax[oi] = best;
        y[oi] = p[best];
      } else {
        T acc = 0;
        for (std::size_t i = 0; i < P; ++i) acc += p[i];
        y[oi] = acc / static_cast<T>(P);
      }
    }
  }
  return g.emit(std::move(y), {x}, [x, mode, argmax = std::move(argmax)](const Tensor<T>& gy) {
    if (!x->requires_grad) return;
    const Shape& s = x->value.shape();
    const std::size_t P = s.plane();
    Tensor<T>& gx = x->grad_buffer();
    for (std::int64_t n = 0; n < s.n; ++n) {
      for (std::int64_t c = 0; c < s.c; ++c) {
        const std::size_t oi = static_cast<std::size_t>(n * s.c + c);
        T* d = gx.plane(n, c);
        if (mode == PoolMode::Max) {
          d[argmax[oi]] += gy[oi];
        } else {
          const T v = gy[oi] / static_cast<T>(P);
          for (std::size_t i = 0; i < P; ++i) d[i] += v;
        }
      }
    }
  });
}

// Reduce over channels at each pixel: (n, c, h, w) -> (n, 1, h, w).
template <class T>
Var<T> pool_channel(Graph<T>& g, const Var<T>& x, PoolMode mode) {
  const Shape& s = x->value.shape();
  const Shape os{s.n, 1, s.h, s.w};
  g.record_cost(mode == PoolMode::Max ? "maxpool_channel" : "avgpool_channel", os, 0,
                static_cast<std::int64_t>(s.numel()));
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(os), {}, nullptr);
  const std::size_t P = s.plane();
  Tensor<T> y(os);
  std::vector<std::int64_t> argmax;
  if (mode == PoolMode::Max) argmax.assign(os.numel(), 0);
  for (std::int64_t n = 0; n < s.n; ++n) {
    T* out = y.plane(n, 0);
    std::copy(x->value.plane(n, 0), x->value.plane(n, 0) + P, out);
    for (std::int64_t c = 1; c < s.c; ++c) {
      const T* p = x->value.plane(n, c);
      if (mode == PoolMode::Max) {
        std::int64_t* am = argmax.data() + n * static_cast<std::int64_t>(P);
        for (std::size_t i = 0; i < P; ++i) {
          if (p[i] > out[i]) {
            out[i] = p[i];
            am[i] = c;
          }
        }
      } else {
        for (std::size_t i = 0; i < P; ++i) out[i] += p[i];
      }
    }
    if (mode == PoolMode::Avg) {
      for (std::size_t i = 0; i < P; ++i) out[i] /= static_cast<T>(s.c);
    }
  }
  return g.emit(std::move(y), {x}, [x, mode, argmax = std::move(argmax)](const Tensor<T>& gy) {
    if (!x->requires_grad) return;
    const Shape& s = x->value.shape();
    const std::size_t P = s.plane();
    Tensor<T>& gx = x->grad_buffer();
    for (std::int64_t n = 0; n < s.n; ++n) {
      const T* gp = gy.plane(n, 0);
      if (mode == PoolMode::Max) {
        const std::int64_t* am = argmax.data() + n * static_cast<std::int64_t>(P);
        for (std::size_t i = 0; i < P; ++i) gx.plane(n, am[i])[i] += gp[i];
      } else {
        for (std::int64_t c = 0; c < s.c; ++c) {
          T* d = gx.plane(n, c);
          for (std::size_t i = 0; i < P; ++i) d[i] += gp[i] / static_cast<T>(s.c);
        }
      }
    }
  });
}

namespace detail_unary {

template <class T, class F, class DF>
Var<T> unary(Graph<T>& g, const Var<T>& x, const char* name, F f, DF df) {
  const Shape& s = x->value.shape();
  g.record_cost(name, s, 0, static_cast<std::int64_t>(s.numel()));
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(s), {}, nullptr);
  Tensor<T> y(s);
  const T* xp = x->value.ptr();
  T* yp = y.ptr();
  for (std::size_t i = 0; i < y.numel(); ++i) yp[i] = f(xp[i]);
  return g.emit(std::move(y), {x}, [x, df](const Tensor<T>& gy) {
    if (!x->requires_grad) return;
    T* gx = x->grad_buffer().ptr();
    const T* xp = x->value.ptr();
    for (std::size_t i = 0; i < gy.numel(); ++i) gx[i] += gy[i] * df(xp[i]);
  });
}

}  // namespace detail_unary

template <class T>
inline T sigmoid_scalar(T v) {
  return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

template <class T>
Var<T> relu(Graph<T>& g, const Var<T>& x) {
  return detail_unary::unary(
      g, x, "relu", [](T v) { return v > 0 ? v : T(0); }, [](T v) { return v > 0 ? T(1) : T(0); });
}

template <class T>
Var<T> sigmoid(Graph<T>& g, const Var<T>& x) {
  return detail_unary::unary(
      g, x, "sigmoid", [](T v) { return sigmoid_scalar(v); },
      [](T v) {
        const T s = sigmoid_scalar(v);
        return s * (T(1) - s);
      });
}

// x * relu6(x + 3) / 6
template <class T>
Var<T> hswish(Graph<T>& g, const Var<T>& x) {
  return detail_unary::unary(
      g, x, "hswish", [](T v) { return v * std::clamp(v + T(3), T(0), T(6)) / T(6); },
      [](T v) {
        if (v <= T(-3)) return T(0);
        if (v >= T(3)) return T(1);
        return (T(2) * v + T(3)) / T(6);
      });
}

template <class T>
Var<T> scale(Graph<T>& g, const Var<T>& x, T factor) {
  return detail_unary::unary(
      g, x, "scale", [factor](T v) { return v * factor; }, [factor](T) { return factor; });
}

template <class T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a->value.shape(), b->value.shape(), "add");
  const Shape& s = a->value.shape();
  g.record_cost("add", s, 0, static_cast<std::int64_t>(s.numel()));
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(s), {}, nullptr);
  Tensor<T> y(s);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a->value[i] + b->value[i];
  return g.emit(std::move(y), {a, b}, [a, b](const Tensor<T>& gy) {
    if (a->requires_grad) {
      T* d = a->grad_buffer().ptr();
      for (std::size_t i = 0; i < gy.numel(); ++i) d[i] += gy[i];
    }
    if (b->requires_grad) {
      T* d = b->grad_buffer().ptr();
      for (std::size_t i = 0; i < gy.numel(); ++i) d[i] += gy[i];
    }
  });
}

template <class T>
Var<T> mul(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a->value.shape(), b->value.shape(), "mul");
  const Shape& s = a->value.shape();
  g.record_cost("mul", s, 0, static_cast<std::int64_t>(s.numel()));
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(s), {}, nullptr);
  Tensor<T> y(s);
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] = a->value[i] * b->value[i];
  return g.emit(std::move(y), {a, b}, [a, b](const Tensor<T>& gy) {
    if (a->requires_grad) {
      T* d = a->grad_buffer().ptr();
      for (std::size_t i = 0; i < gy.numel(); ++i) d[i] += gy[i] * b->value[i];
    }
    if (b->requires_grad) {
      T* d = b->grad_buffer().ptr();
      for (std::size_t i = 0; i < gy.numel(); ++i) d[i] += gy[i] * a->value[i];
    }
  });
}

// x * gate where every gate dimension equals x's or is 1.
template <class T>
Var<T> mul_broadcast(Graph<T>& g, const Var<T>& x, const Var<T>& gate) {
  const Shape& s = x->value.shape();
  const Shape& gs = gate->value.shape();
  auto ok = [](std::int64_t a, std::int64_t b) { return b == a || b == 1; };
  if (!ok(s.n, gs.n) || !ok(s.c, gs.c) || !ok(s.h, gs.h) || !ok(s.w, gs.w)) {
    throw ShapeError("mul_broadcast: gate " + gs.str() + " does not broadcast to " + s.str());
  }
  g.record_cost("mul", s, 0, static_cast<std::int64_t>(s.numel()));
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(s), {}, nullptr);
  auto gidx = [s, gs](std::int64_t n, std::int64_t c, std::int64_t h, std::int64_t w) {
    return static_cast<std::size_t>((((gs.n == 1 ? 0 : n) * gs.c + (gs.c == 1 ? 0 : c)) * gs.h + (gs.h == 1 ? 0 : h)) *
                                        gs.w +
                                    (gs.w == 1 ? 0 : w));
  };
  Tensor<T> y(s);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c)
      for (std::int64_t h = 0; h < s.h; ++h)
        for (std::int64_t w = 0; w < s.w; ++w) {
          const std::size_t i = y.index(n, c, h, w);
          y[i] = x->value[i] * gate->value[gidx(n, c, h, w)];
        }
  return g.emit(std::move(y), {x, gate}, [x, gate, gidx](const Tensor<T>& gy) {
    const Shape& s = x->value.shape();
    T* gx = x->requires_grad ? x->grad_buffer().ptr() : nullptr;
    T* gg = gate->requires_grad ? gate->grad_buffer().ptr() : nullptr;
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c; ++c)
        for (std::int64_t h = 0; h < s.h; ++h)
          for (std::int64_t w = 0; w < s.w; ++w) {
            const std::size_t i = gy.index(n, c, h, w);
            const std::size_t j = gidx(n, c, h, w);
            if (gx) gx[i] += gy[i] * gate->value[j];
            if (gg) gg[j] += gy[i] * x->value[i];
          }
  });
}

template <class T>
struct BatchNormParams {
  Var<T> gamma;
  Var<T> beta;
  Var<T> running_mean;
  Var<T> running_var;
  T eps = T(1e-3);
  T momentum = T(0.03);
};

// Per-channel affine normalization. Uses batch statistics (and updates the
// running buffers) when the graph is in training mode, running statistics
// otherwise.
template <class T>
Var<T> batch_norm(Graph<T>& g, const Var<T>& x, const BatchNormParams<T>& p) {
  const Shape& s = x->value.shape();
  const std::size_t C = static_cast<std::size_t>(s.c);
  if (p.gamma->value.numel() != C || p.beta->value.numel() != C || p.running_mean->value.numel() != C ||
      p.running_var->value.numel() != C) {
    throw ShapeError("batch_norm: parameter length does not match channel count " + std::to_string(C));
  }
  g.record_cost("batch_norm", s, 2 * s.c, static_cast<std::int64_t>(s.numel()));
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(s), {}, nullptr);

  const std::size_t P = s.plane();
  const std::size_t M = P * static_cast<std::size_t>(s.n);
  std::vector<T> mean(C), invstd(C);
  const bool train = g.training();
  if (train) {
    for (std::size_t c = 0; c < C; ++c) {
      T acc = 0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* pl = x->value.plane(n, static_cast<std::int64_t>(c));
        for (std::size_t i = 0; i < P; ++i) acc += pl[i];
      }
      const T mu = acc / static_cast<T>(M);
      T var = 0;
      for (std::int64_t n = 0; n < s.n; ++n) {
        const T* pl = x->value.plane(n, static_cast<std::int64_t>(c));
        for (std::size_t i = 0; i < P; ++i) var += (pl[i] - mu) * (pl[i] - mu);
      }
      var /= static_cast<T>(M);
      mean[c] = mu;
      invstd[c] = T(1) / std::sqrt(var + p.eps);
      const T unbiased = M > 1 ? var * static_cast<T>(M) / static_cast<T>(M - 1) : var;
      T& rm = p.running_mean->value[c];
      T& rv = p.running_var->value[c];
      rm = (T(1) - p.momentum) * rm + p.momentum * mu;
      rv = (T(1) - p.momentum) * rv + p.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < C; ++c) {
      mean[c] = p.running_mean->value[c];
      invstd[c] = T(1) / std::sqrt(p.running_var->value[c] + p.eps);
    }
  }
  Tensor<T> y(s);
  for (std::int64_t n = 0; n < s.n; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T a = p.gamma->value[c] * invstd[c];
      const T b = p.beta->value[c] - mean[c] * a;
      const T* src = x->value.plane(n, static_cast<std::int64_t>(c));
      T* dst = y.plane(n, static_cast<std::int64_t>(c));
      for (std::size_t i = 0; i < P; ++i) dst[i] = src[i] * a + b;
    }
  }
  auto gamma = p.gamma;
  auto beta = p.beta;
  return g.emit(std::move(y), {x, gamma, beta},
                [x, gamma, beta, train, mean = std::move(mean), invstd = std::move(invstd)](const Tensor<T>& gy) {
                  const Shape& s = x->value.shape();
                  const std::size_t C = static_cast<std::size_t>(s.c);
                  const std::size_t P = s.plane();
                  const T M = static_cast<T>(P * static_cast<std::size_t>(s.n));
                  for (std::size_t c = 0; c < C; ++c) {
                    T sum_dy = 0, sum_dy_xhat = 0;
                    for (std::int64_t n = 0; n < s.n; ++n) {
                      const T* xp = x->value.plane(n, static_cast<std::int64_t>(c));
                      const T* gp = gy.plane(n, static_cast<std::int64_t>(c));
                      for (std::size_t i = 0; i < P; ++i) {
                        sum_dy += gp[i];
                        sum_dy_xhat += gp[i] * (xp[i] - mean[c]) * invstd[c];
                      }
                    }
                    if (gamma->requires_grad) gamma->grad_buffer()[c] += sum_dy_xhat;
                    if (beta->requires_grad) beta->grad_buffer()[c] += sum_dy;
                    if (!x->requires_grad) continue;
                    const T gm = gamma->value[c];
                    Tensor<T>& gx = x->grad_buffer();
                    for (std::int64_t n = 0; n < s.n; ++n) {
                      const T* xp = x->value.plane(n, static_cast<std::int64_t>(c));
                      const T* gp = gy.plane(n, static_cast<std::int64_t>(c));
                      T* dp = gx.plane(n, static_cast<std::int64_t>(c));
                      if (train) {
                        const T k = gm * invstd[c] / M;
                        for (std::size_t i = 0; i < P; ++i) {
                          const T xhat = (xp[i] - mean[c]) * invstd[c];
                          dp[i] += k * (M * gp[i] - sum_dy - xhat * sum_dy_xhat);
                        }
                      } else {
                        const T k = gm * invstd[c];
                        for (std::size_t i = 0; i < P; ++i) dp[i] += k * gp[i];
                      }
                    }
                  }
                });
}

template <class T>
Var<T> upsample_nearest_2x(Graph<T>& g, const Var<T>& x) {
  const Shape& s = x->value.shape();
  const Shape os{s.n, s.c, s.h * 2, s.w * 2};
  g.record_cost("upsample", os, 0, 0);
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(os), {}, nullptr);
  Tensor<T> y(os);
  for (std::int64_t n = 0; n < s.n; ++n)
    for (std::int64_t c = 0; c < s.c; ++c) {
      const T* src = x->value.plane(n, c);
      T* dst = y.plane(n, c);
      for (std::int64_t h = 0; h < os.h; ++h)
        for (std::int64_t w = 0; w < os.w; ++w) dst[h * os.w + w] = src[(h / 2) * s.w + w / 2];
    }
  return g.emit(std::move(y), {x}, [x](const Tensor<T>& gy) {
    if (!x->requires_grad) return;
    const Shape& s = x->value.shape();
    const std::int64_t ow = s.w * 2;
    Tensor<T>& gx = x->grad_buffer();
    for (std::int64_t n = 0; n < s.n; ++n)
      for (std::int64_t c = 0; c < s.c; ++c) {
        const T* src = gy.plane(n, c);
        T* dst = gx.plane(n, c);
        for (std::int64_t h = 0; h < s.h * 2; ++h)
          for (std::int64_t w = 0; w < ow; ++w) dst[(h / 2) * s.w + w / 2] += src[h * ow + w];
      }
  });
}

template <class T>
Var<T> concat_channels(Graph<T>& g, const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: empty input list");
  Shape os = parts.front()->value.shape();
  os.c = 0;
  for (const auto& p : parts) {
    const Shape& s = p->value.shape();
    if (s.n != os.n || s.h != os.h || s.w != os.w) {
      throw ShapeError("concat_channels: " + std::string(s.n != os.n ? "batch" : s.h != os.h ? "height" : "width") +
                       " mismatch, " + s.str() + " vs " + parts.front()->value.shape().str());
    }
    os.c += s.c;
  }
  g.record_cost("concat", os, 0, 0);
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(os), {}, nullptr);
  Tensor<T> y(os);
  const std::size_t P = os.plane();
  for (std::int64_t n = 0; n < os.n; ++n) {
    std::int64_t c0 = 0;
    for (const auto& p : parts) {
      const std::int64_t pc = p->value.shape().c;
      std::copy(p->value.plane(n, 0), p->value.plane(n, 0) + pc * static_cast<std::int64_t>(P), y.plane(n, c0));
      c0 += pc;
    }
  }
  return g.emit_many(std::move(y), parts, [parts](const Tensor<T>& gy) {
    const Shape& os = gy.shape();
    const std::size_t P = os.plane();
    for (std::int64_t n = 0; n < os.n; ++n) {
      std::int64_t c0 = 0;
      for (const auto& p : parts) {
        const std::int64_t pc = p->value.shape().c;
        if (p->requires_grad) {
          T* d = p->grad_buffer().plane(n, 0);
          const T* src = gy.plane(n, c0);
          for (std::size_t i = 0; i < static_cast<std::size_t>(pc) * P; ++i) d[i] += src[i];
        }
        c0 += pc;
      }
    }
  });
}

template <class T>
std::vector<Var<T>> split_channels(Graph<T>& g, const Var<T>& x, const std::vector<std::int64_t>& sizes) {
  const Shape& s = x->value.shape();
  std::int64_t total = 0;
  for (auto v : sizes) {
    if (v < 1) throw ShapeError("split_channels: every part needs at least one channel");
    total += v;
  }
  if (total != s.c) {
    throw ShapeError("split_channels: sizes sum to " + std::to_string(total) + " but tensor has " +
                     std::to_string(s.c) + " channels");
  }
  std::vector<Var<T>> out;
  std::int64_t c0 = 0;
  const std::size_t P = s.plane();
  for (auto pc : sizes) {
    const Shape ps{s.n, pc, s.h, s.w};
    g.record_cost("split", ps, 0, 0);
    if (g.shape_only()) {
      out.push_back(g.emit(Tensor<T>::shape_only(ps), {}, nullptr));
      c0 += pc;
      continue;
    }
    Tensor<T> y(ps);
    for (std::int64_t n = 0; n < s.n; ++n) {
      std::copy(x->value.plane(n, c0), x->value.plane(n, c0) + pc * static_cast<std::int64_t>(P), y.plane(n, 0));
    }
    out.push_back(g.emit(std::move(y), {x}, [x, c0, pc](const Tensor<T>& gy) {
      if (!x->requires_grad) return;
      const Shape& s = x->value.shape();
      const std::size_t P = s.plane();
      Tensor<T>& gx = x->grad_buffer();
      for (std::int64_t n = 0; n < s.n; ++n) {
        T* d = gx.plane(n, c0);
        const T* src = gy.plane(n, 0);
        for (std::size_t i = 0; i < static_cast<std::size_t>(pc) * P; ++i) d[i] += src[i];
      }
    }));
    c0 += pc;
  }
  return out;
}

template <class T>
Var<T> sum(Graph<T>& g, const Var<T>& x) {
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(Shape{}), {}, nullptr);
  T acc = 0;
  for (auto v : x->value.data()) acc += v;
  return g.emit(Tensor<T>(Shape{}, acc), {x}, [x](const Tensor<T>& gy) {
    if (!x->requires_grad) return;
    for (auto& d : x->grad_buffer().data()) d += gy[0];
  });
}

// sum(x * weights) for a constant weight tensor; a random projection turns
// any tensor-valued block into a scalar for gradient checking.
template <class T>
Var<T> weighted_sum(Graph<T>& g, const Var<T>& x, const Tensor<T>& weights) {
  detail::require_same_shape(x->value.shape(), weights.shape(), "weighted_sum");
  if (g.shape_only()) return g.emit(Tensor<T>::shape_only(Shape{}), {}, nullptr);
  T acc = 0;
  for (std::size_t i = 0; i < weights.numel(); ++i) acc += x->value[i] * weights[i];
  return g.emit(Tensor<T>(Shape{}, acc), {x}, [x, weights](const Tensor<T>& gy) {
    if (!x->requires_grad) return;
    T* d = x->grad_buffer().ptr();
    for (std::size_t i = 0; i < weights.numel(); ++i) d[i] += gy[0] * weights[i];
  });
}

}  // namespace ops
}  // namespace hsinet
