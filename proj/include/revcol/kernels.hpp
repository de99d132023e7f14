#pragma once

#include <cmath>
#include <type_traits>
#include <cstdint>
#include <optional>
#include <vector>

#include "revcol/tensor.hpp"

// Forward and backward compute kernels. Everything here is a pure function
// of its inputs with a fixed reduction order, so re-evaluation is bitwise
// reproducible; that property is what the reversible reconstruction relies
// on. Convolution accumulates starting from the bias so that zero-valued
// border taps (kernel padding) leave the partial sums bit-identical.
namespace revcol::kernels {

// ---------------------------------------------------------------- gemm ---

// C(MxN) += A(MxK) * B(KxN), row-major.
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      T* ci = c + i * n;
      const T* ai = a + i * k;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = ai[p];
        const T* bp = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
      }
    }
  }, 8);
}

// C(MxN) += A(MxK) * B(NxK)^T.
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  parallel_for(m, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i) {
      const T* ai = a + i * k;
      T* ci = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) {
        const T* bj = b + j * k;
        T acc = ci[j];
        for (std::int64_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
        ci[j] = acc;
      }
    }
  }, 8);
}

// C(MxN) += A(KxM)^T * B(KxN).
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const T av = ap[i];
      T* ci = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// ---------------------------------------------------------------- conv ---

struct ConvSpec {
  std::int64_t stride = 1;
  std::int64_t padding = 0;
  std::int64_t groups = 1;
};

inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                    std::int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

template <class T>
void check_conv_args(const Tensor<T>& x, const Tensor<T>& w,
                     const std::type_identity_t<Tensor<T>>* bias, const ConvSpec& spec) {
  if (x.rank() != 4) throw ShapeError("conv2d: input must be N,C,H,W, got " + shape_str(x.dims()));
  if (w.rank() != 4) throw ShapeError("conv2d: weight must be Cout,Cin/groups,k,k, got " + shape_str(w.dims()));
  if (w.dim(2) != w.dim(3)) throw ShapeError("conv2d: kernel must be square, got " + shape_str(w.dims()));
  if (spec.groups < 1 || x.dim(1) % spec.groups != 0)
    throw ShapeError("conv2d: input channel axis " + std::to_string(x.dim(1)) +
                     " not divisible by groups " + std::to_string(spec.groups));
  if (w.dim(0) % spec.groups != 0)
    throw ShapeError("conv2d: output channel axis " + std::to_string(w.dim(0)) +
                     " not divisible by groups " + std::to_string(spec.groups));
  if (w.dim(1) != x.dim(1) / spec.groups)
    throw ShapeError("conv2d: weight channel axis " + std::to_string(w.dim(1)) +
                     " does not match input channels/groups " +
                     std::to_string(x.dim(1) / spec.groups));
  if (bias && (bias->rank() != 1 || bias->dim(0) != w.dim(0)))
    throw ShapeError("conv2d: bias axis must be Cout=" + std::to_string(w.dim(0)));
  const std::int64_t k = w.dim(2);
  if (conv_out_extent(x.dim(2), k, spec.stride, spec.padding) < 1)
    throw ShapeError("conv2d: height axis " + std::to_string(x.dim(2)) + " too small for kernel " +
                     std::to_string(k));
  if (conv_out_extent(x.dim(3), k, spec.stride, spec.padding) < 1)
    throw ShapeError("conv2d: width axis " + std::to_string(x.dim(3)) + " too small for kernel " +
                     std::to_string(k));
}

template <class T>
Tensor<T> conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w,
                     const std::type_identity_t<Tensor<T>>* bias, const ConvSpec& spec) {
  check_conv_args(x, w, bias, spec);
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), win = x.dim(3);
  const std::int64_t cout = w.dim(0), k = w.dim(2);
  const std::int64_t oh = conv_out_extent(h, k, spec.stride, spec.padding);
  const std::int64_t ow = conv_out_extent(win, k, spec.stride, spec.padding);
  auto out = Tensor<T>::zeros({n, cout, oh, ow});

  // Pointwise convolutions reduce to a per-sample matmul.
  if (k == 1 && spec.stride == 1 && spec.padding == 0 && spec.groups == 1) {
    const std::int64_t hw = h * win;
    for (std::int64_t b = 0; b < n; ++b)
      gemm_nn(w.data(), x.data() + b * cin * hw, out.data() + b * cout * hw, cout, cin, hw);
    if (bias) {
      const T* bp = bias->data();
      T* op = out.data();
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t c = 0; c < cout; ++c) {
          const T bv = bp[c];
          T* row = op + (b * cout + c) * hw;
          for (std::int64_t i = 0; i < hw; ++i) row[i] += bv;
        }
    }
    return out;
  }

  const std::int64_t cin_g = cin / spec.groups;
  const std::int64_t cout_g = cout / spec.groups;
  const T* xp = x.data();
  const T* wp = w.data();
  const T* bp = bias ? bias->data() : nullptr;
  T* op = out.data();
  parallel_for(n, [&](std::int64_t blo, std::int64_t bhi) {
    for (std::int64_t b = blo; b < bhi; ++b)
      for (std::int64_t oc = 0; oc < cout; ++oc) {
        const std::int64_t g = oc / cout_g;
        const T* wc = wp + oc * cin_g * k * k;
        T* orow = op + (b * cout + oc) * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y)
          for (std::int64_t xo = 0; xo < ow; ++xo) {
            T acc = bp ? bp[oc] : T(0);
            const std::int64_t hbase = y * spec.stride - spec.padding;
            const std::int64_t wbase = xo * spec.stride - spec.padding;
            for (std::int64_t ic = 0; ic < cin_g; ++ic) {
              const T* xc = xp + (b * cin + g * cin_g + ic) * h * win;
              const T* wk = wc + ic * k * k;
              for (std::int64_t kh = 0; kh < k; ++kh) {
                const std::int64_t iy = hbase + kh;
                if (iy < 0 || iy >= h) continue;
                for (std::int64_t kw = 0; kw < k; ++kw) {
                  const std::int64_t ix = wbase + kw;
                  if (ix < 0 || ix >= win) continue;
                  acc += wk[kh * k + kw] * xc[iy * win + ix];
                }
              }
            }
            orow[y * ow + xo] = acc;
          }
      }
  }, 1);
  return out;
}

template <class T>
Tensor<T> conv2d_bwd_input(const Tensor<T>& gout, const Tensor<T>& w, const Shape& x_dims,
                           const ConvSpec& spec) {
  const std::int64_t n = x_dims[0], cin = x_dims[1], h = x_dims[2], win = x_dims[3];
  const std::int64_t cout = w.dim(0), k = w.dim(2);
  const std::int64_t oh = gout.dim(2), ow = gout.dim(3);
  auto gin = Tensor<T>::zeros(x_dims);

  if (k == 1 && spec.stride == 1 && spec.padding == 0 && spec.groups == 1) {
    const std::int64_t hw = h * win;
    for (std::int64_t b = 0; b < n; ++b)
      gemm_tn(w.data(), gout.data() + b * cout * hw, gin.data() + b * cin * hw, cin, cout, hw);
    return gin;
  }

  const std::int64_t cin_g = cin / spec.groups;
  const std::int64_t cout_g = cout / spec.groups;
  const T* gp = gout.data();
  const T* wp = w.data();
  T* ip = gin.data();
  parallel_for(n, [&](std::int64_t blo, std::int64_t bhi) {
    for (std::int64_t b = blo; b < bhi; ++b)
      for (std::int64_t oc = 0; oc < cout; ++oc) {
        const std::int64_t g = oc / cout_g;
        const T* wc = wp + oc * cin_g * k * k;
        const T* grow = gp + (b * cout + oc) * oh * ow;
        for (std::int64_t y = 0; y < oh; ++y)
          for (std::int64_t xo = 0; xo < ow; ++xo) {
            const T gv = grow[y * ow + xo];
            const std::int64_t hbase = y * spec.stride - spec.padding;
            const std::int64_t wbase = xo * spec.stride - spec.padding;
            for (std::int64_t ic = 0; ic < cin_g; ++ic) {
              T* xc = ip + (b * cin + g * cin_g + ic) * h * win;
              const T* wk = wc + ic * k * k;
              for (std::int64_t kh = 0; kh < k; ++kh) {
                const std::int64_t iy = hbase + kh;
                if (iy < 0 || iy >= h) continue;
                for (std::int64_t kw = 0; kw < k; ++kw) {
                  const std::int64_t ix = wbase + kw;
                  if (ix < 0 || ix >= win) continue;
                  xc[iy * win + ix] += wk[kh * k + kw] * gv;
                }
              }
            }
          }
      }
  }, 1);
  return gin;
}

template <class T>
Tensor<T> conv2d_bwd_weight(const Tensor<T>& gout, const Tensor<T>& x, const Shape& w_dims,
                            const ConvSpec& spec) {
  const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), win = x.dim(3);
  const std::int64_t cout = w_dims[0], k = w_dims[2];
  const std::int64_t oh = gout.dim(2), ow = gout.dim(3);
  auto gw = Tensor<T>::zeros(w_dims);

  if (k == 1 && spec.stride == 1 && spec.padding == 0 && spec.groups == 1) {
    const std::int64_t hw = h * win;
    for (std::int64_t b = 0; b < n; ++b)
      gemm_nt(gout.data() + b * cout * hw, x.data() + b * cin * hw, gw.data(), cout, hw, cin);
    return gw;
  }

  const std::int64_t cin_g = cin / spec.groups;
  const std::int64_t cout_g = cout / spec.groups;
  const T* gp = gout.data();
  const T* xp = x.data();
  T* wp = gw.data();
  parallel_for(cout, [&](std::int64_t clo, std::int64_t chi) {
    for (std::int64_t oc = clo; oc < chi; ++oc) {
      const std::int64_t g = oc / cout_g;
      T* wc = wp + oc * cin_g * k * k;
      for (std::int64_t ic = 0; ic < cin_g; ++ic)
        for (std::int64_t kh = 0; kh < k; ++kh)
          for (std::int64_t kw = 0; kw < k; ++kw) {
            T acc = 0;
            for (std::int64_t b = 0; b < n; ++b) {
              const T* grow = gp + (b * cout + oc) * oh * ow;
              const T* xc = xp + (b * cin + g * cin_g + ic) * h * win;
              for (std::int64_t y = 0; y < oh; ++y) {
                const std::int64_t iy = y * spec.stride - spec.padding + kh;
                if (iy < 0 || iy >= h) continue;
                for (std::int64_t xo = 0; xo < ow; ++xo) {
                  const std::int64_t ix = xo * spec.stride - spec.padding + kw;
                  if (ix < 0 || ix >= win) continue;
                  acc += grow[y * ow + xo] * xc[iy * win + ix];
                }
              }
            }
            wc[ic * k * k + kh * k + kw] = acc;
          }
    }
  }, 1);
  return gw;
}

template <class T>
Tensor<T> conv2d_bwd_bias(const Tensor<T>& gout) {
  const std::int64_t n = gout.dim(0), cout = gout.dim(1), hw = gout.dim(2) * gout.dim(3);
  auto gb = Tensor<T>::zeros({cout});
  T* bp = gb.data();
  const T* gp = gout.data();
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t c = 0; c < cout; ++c) {
      T acc = bp[c];
      const T* row = gp + (b * cout + c) * hw;
      for (std::int64_t i = 0; i < hw; ++i) acc += row[i];
      bp[c] = acc;
    }
  return gb;
}

// -------------------------------------------------------------- linear ---

template <class T>
Tensor<T> linear_fwd(const Tensor<T>& x, const Tensor<T>& w,
                     const std::type_identity_t<Tensor<T>>* bias) {
  if (x.rank() < 1 || x.dims().back() != w.dim(1))
    throw ShapeError("linear: trailing axis " + std::to_string(x.dims().back()) +
                     " does not match weight input axis " + std::to_string(w.dim(1)));
  if (bias && (bias->rank() != 1 || bias->dim(0) != w.dim(0)))
    throw ShapeError("linear: bias axis must match output axis " + std::to_string(w.dim(0)));
  const std::int64_t din = w.dim(1), dout = w.dim(0);
  const std::int64_t m = x.numel() / din;
  Shape odims = x.dims();
  odims.back() = dout;
  auto out = Tensor<T>::zeros(odims);
  gemm_nt(x.data(), w.data(), out.data(), m, din, dout);
  if (bias) {
    T* op = out.data();
    const T* bp = bias->data();
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t o = 0; o < dout; ++o) op[i * dout + o] += bp[o];
  }
  return out;
}

template <class T>
Tensor<T> linear_bwd_input(const Tensor<T>& gout, const Tensor<T>& w, const Shape& x_dims) {
  const std::int64_t din = w.dim(1), dout = w.dim(0);
  const std::int64_t m = gout.numel() / dout;
  auto gin = Tensor<T>::zeros(x_dims);
  gemm_nn(gout.data(), w.data(), gin.data(), m, dout, din);
  return gin;
}

template <class T>
Tensor<T> linear_bwd_weight(const Tensor<T>& gout, const Tensor<T>& x, const Shape& w_dims) {
  const std::int64_t din = w_dims[1], dout = w_dims[0];
  const std::int64_t m = gout.numel() / dout;
  auto gw = Tensor<T>::zeros(w_dims);
  gemm_tn(gout.data(), x.data(), gw.data(), dout, m, din);
  return gw;
}

template <class T>
Tensor<T> linear_bwd_bias(const Tensor<T>& gout, std::int64_t dout) {
  const std::int64_t m = gout.numel() / dout;
  auto gb = Tensor<T>::zeros({dout});
  T* bp = gb.data();
  const T* gp = gout.data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t o = 0; o < dout; ++o) bp[o] += gp[i * dout + o];
  return gb;
}

// ---------------------------------------------------------- layer norm ---

template <class T>
void check_layer_norm_args(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift) {
  const std::int64_t c = channel_extent(x.dims());
  if (gain.rank() != 1 || gain.dim(0) != c || shift.rank() != 1 || shift.dim(0) != c)
    throw ShapeError("layer_norm: gain/shift must have channel axis " + std::to_string(c) +
                     ", got " + shape_str(gain.dims()) + " and " + shape_str(shift.dims()));
}

// Normalizes over the channel axis per position (stride `inner`), then
// applies the affine gain/shift. Variance is the biased estimate.
template <class T>
Tensor<T> layer_norm_fwd(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                         double eps) {
  check_layer_norm_args(x, gain, shift);
  if (eps <= 0) throw ValueError("layer_norm: eps must be > 0");
  std::int64_t outer, c, inner;
  channel_split(x.dims(), outer, c, inner);
  auto out = Tensor<T>::zeros(x.dims());
  const T* xp = x.data();
  const T* gp = gain.data();
  const T* sp = shift.data();
  T* op = out.data();
  parallel_for(outer * inner, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t pos = lo; pos < hi; ++pos) {
      const std::int64_t o = pos / inner, i = pos % inner;
      const T* base = xp + o * c * inner + i;
      T mean = 0;
      for (std::int64_t ch = 0; ch < c; ++ch) mean += base[ch * inner];
      mean /= static_cast<T>(c);
      T var = 0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T d = base[ch * inner] - mean;
        var += d * d;
      }
      var /= static_cast<T>(c);
      const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
      T* obase = op + o * c * inner + i;
      for (std::int64_t ch = 0; ch < c; ++ch)
        obase[ch * inner] = gp[ch] * (base[ch * inner] - mean) * inv + sp[ch];
    }
  }, 64);
  return out;
}

template <class T>
struct LayerNormGrads {
  Tensor<T> input, gain, shift;
};

template <class T>
LayerNormGrads<T> layer_norm_bwd(const Tensor<T>& gout, const Tensor<T>& x, const Tensor<T>& gain,
                                 double eps) {
  std::int64_t outer, c, inner;
  channel_split(x.dims(), outer, c, inner);
  LayerNormGrads<T> g{Tensor<T>::zeros(x.dims()), Tensor<T>::zeros({c}), Tensor<T>::zeros({c})};
  const T* xp = x.data();
  const T* gp = gout.data();
  const T* gainp = gain.data();
  T* gxp = g.input.data();
  T* ggainp = g.gain.data();
  T* gshiftp = g.shift.data();
  std::vector<T> xhat(static_cast<std::size_t>(c));
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      const T* base = xp + o * c * inner + i;
      const T* gbase = gp + o * c * inner + i;
      T mean = 0;
      for (std::int64_t ch = 0; ch < c; ++ch) mean += base[ch * inner];
      mean /= static_cast<T>(c);
      T var = 0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T d = base[ch * inner] - mean;
        var += d * d;
      }
      var /= static_cast<T>(c);
      const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
      T m1 = 0, m2 = 0;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        xhat[static_cast<std::size_t>(ch)] = (base[ch * inner] - mean) * inv;
        const T h = gbase[ch * inner] * gainp[ch];
        m1 += h;
        m2 += h * xhat[static_cast<std::size_t>(ch)];
      }
      m1 /= static_cast<T>(c);
      m2 /= static_cast<T>(c);
      T* gx = gxp + o * c * inner + i;
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const T h = gbase[ch * inner] * gainp[ch];
        gx[ch * inner] = (h - m1 - xhat[static_cast<std::size_t>(ch)] * m2) * inv;
        ggainp[ch] += gbase[ch * inner] * xhat[static_cast<std::size_t>(ch)];
        gshiftp[ch] += gbase[ch * inner];
      }
    }
  return g;
}

// ---------------------------------------------------------- activation ---

// Exact Gaussian CDF form: x * Phi(x). The tanh approximation is not used.
template <class T>
Tensor<T> gelu_fwd(const Tensor<T>& x) {
  auto out = Tensor<T>::zeros(x.dims());
  const T* xp = x.data();
  T* op = out.data();
  const std::int64_t n = x.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = xp[i];
    const T phi = static_cast<T>(0.5) * std::erfc(static_cast<T>(-v * 0.7071067811865475244));
    op[i] = v * phi;
  }
  return out;
}

template <class T>
Tensor<T> gelu_bwd(const Tensor<T>& gout, const Tensor<T>& x) {
  auto gin = Tensor<T>::zeros(x.dims());
  const T* xp = x.data();
  const T* gp = gout.data();
  T* op = gin.data();
  const std::int64_t n = x.numel();
  const T inv_sqrt_2pi = static_cast<T>(0.3989422804014326779);
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = xp[i];
    const T phi = static_cast<T>(0.5) * std::erfc(static_cast<T>(-v * 0.7071067811865475244));
    const T pdf = inv_sqrt_2pi * std::exp(static_cast<T>(-0.5) * v * v);
    op[i] = gp[i] * (phi + v * pdf);
  }
  return gin;
}

// -------------------------------------------------------- interpolation ---

template <class T>
Tensor<T> nearest_upsample_fwd(const Tensor<T>& x, std::int64_t factor) {
  if (factor < 1) throw ValueError("nearest_upsample: factor must be >= 1");
  if (x.rank() != 4) throw ShapeError("nearest_upsample: input must be N,C,H,W");
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto out = Tensor<T>::zeros({n, c, h * factor, w * factor});
  const T* xp = x.data();
  T* op = out.data();
  const std::int64_t ow = w * factor;
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const T* xplane = xp + nc * h * w;
    T* oplane = op + nc * h * factor * ow;
    for (std::int64_t y = 0; y < h * factor; ++y) {
      const T* xrow = xplane + (y / factor) * w;
      T* orow = oplane + y * ow;
      for (std::int64_t xi = 0; xi < ow; ++xi) orow[xi] = xrow[xi / factor];
    }
  }
  return out;
}

template <class T>
Tensor<T> nearest_upsample_bwd(const Tensor<T>& gout, const Shape& x_dims, std::int64_t factor) {
  const std::int64_t n = x_dims[0], c = x_dims[1], h = x_dims[2], w = x_dims[3];
  auto gin = Tensor<T>::zeros(x_dims);
  const T* gp = gout.data();
  T* ip = gin.data();
  const std::int64_t ow = w * factor;
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const T* gplane = gp + nc * h * factor * ow;
    T* iplane = ip + nc * h * w;
    for (std::int64_t y = 0; y < h * factor; ++y) {
      const T* grow = gplane + y * ow;
      T* irow = iplane + (y / factor) * w;
      for (std::int64_t xi = 0; xi < ow; ++xi) irow[xi / factor] += grow[xi];
    }
  }
  return gin;
}

namespace detail {

template <class T>
T pairwise_sum(const T* v, std::int64_t n) {
  if (n == 1) return v[0];
  const std::int64_t half = n / 2;
  return pairwise_sum(v, half) + pairwise_sum(v + half, n - half);
}

}  // namespace detail

// Mean over each factor x factor block; extents must divide evenly. The
// block reduces pairwise, so pooling a nearest-upsampled tensor by the same
// power-of-two factor recovers it exactly.
template <class T>
Tensor<T> avg_pool_fwd(const Tensor<T>& x, std::int64_t factor) {
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % factor != 0 || w % factor != 0)
    throw ShapeError("avg_pool: spatial axes must be divisible by factor");
  const std::int64_t oh = h / factor, ow = w / factor;
  auto out = Tensor<T>::zeros({n, c, oh, ow});
  const T* xp = x.data();
  T* op = out.data();
  std::vector<T> block(static_cast<std::size_t>(factor * factor));
  for (std::int64_t nc = 0; nc < n * c; ++nc)
    for (std::int64_t y = 0; y < oh; ++y)
      for (std::int64_t xi = 0; xi < ow; ++xi) {
        for (std::int64_t dy = 0; dy < factor; ++dy)
          for (std::int64_t dx = 0; dx < factor; ++dx)
            block[static_cast<std::size_t>(dy * factor + dx)] =
                xp[nc * h * w + (y * factor + dy) * w + (xi * factor + dx)];
        op[nc * oh * ow + y * ow + xi] =
            detail::pairwise_sum(block.data(), factor * factor) / static_cast<T>(factor * factor);
      }
  return out;
}

template <class T>
Tensor<T> global_avg_pool_fwd(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: input must be N,C,H,W");
  const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  auto out = Tensor<T>::zeros({n, c});
  const T* xp = x.data();
  T* op = out.data();
  const T norm = T(1) / static_cast<T>(hw);
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    T acc = 0;
    const T* row = xp + nc * hw;
    for (std::int64_t i = 0; i < hw; ++i) acc += row[i];
    op[nc] = acc * norm;
  }
  return out;
}

template <class T>
Tensor<T> global_avg_pool_bwd(const Tensor<T>& gout, const Shape& x_dims) {
  const std::int64_t n = x_dims[0], c = x_dims[1], hw = x_dims[2] * x_dims[3];
  auto gin = Tensor<T>::zeros(x_dims);
  const T* gp = gout.data();
  T* ip = gin.data();
  const T norm = T(1) / static_cast<T>(hw);
  for (std::int64_t nc = 0; nc < n * c; ++nc) {
    const T gv = gp[nc] * norm;
    T* row = ip + nc * hw;
    for (std::int64_t i = 0; i < hw; ++i) row[i] = gv;
  }
  return gin;
}

// --------------------------------------------------------- elementwise ---

template <class T>
Tensor<T> add_fwd(const Tensor<T>& a, const Tensor<T>& b) {
  a.check_same_shape(b, "add");
  auto out = a.clone();
  out.add_(b);
  return out;
}

template <class T>
Tensor<T> sub_fwd(const Tensor<T>& a, const Tensor<T>& b) {
  a.check_same_shape(b, "sub");
  auto out = Tensor<T>::zeros(a.dims());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] - pb[i];
  return out;
}

template <class T>
Tensor<T> mul_fwd(const Tensor<T>& a, const Tensor<T>& b) {
  a.check_same_shape(b, "mul");
  auto out = Tensor<T>::zeros(a.dims());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * pb[i];
  return out;
}

template <class T>
Tensor<T> scale_fwd(const Tensor<T>& a, T s) {
  auto out = Tensor<T>::zeros(a.dims());
  const T* pa = a.data();
  T* po = out.data();
  for (std::int64_t i = 0; i < a.numel(); ++i) po[i] = pa[i] * s;
  return out;
}

// x * s with s broadcast along the channel axis.
template <class T>
Tensor<T> mul_channel_fwd(const Tensor<T>& x, const Tensor<T>& s) {
  std::int64_t outer, c, inner;
  channel_split(x.dims(), outer, c, inner);
  if (s.rank() != 1 || s.dim(0) != c)
    throw ShapeError("mul_channel: scale must have channel axis " + std::to_string(c) + ", got " +
                     shape_str(s.dims()));
  auto out = Tensor<T>::zeros(x.dims());
  const T* xp = x.data();
  const T* sp = s.data();
  T* op = out.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const T sv = sp[ch];
      const T* xrow = xp + (o * c + ch) * inner;
      T* orow = op + (o * c + ch) * inner;
      for (std::int64_t i = 0; i < inner; ++i) orow[i] = xrow[i] * sv;
    }
  return out;
}

// d(mul_channel)/ds: per-channel reduction of gout * x.
template <class T>
Tensor<T> mul_channel_bwd_scale(const Tensor<T>& gout, const Tensor<T>& x) {
  std::int64_t outer, c, inner;
  channel_split(x.dims(), outer, c, inner);
  auto gs = Tensor<T>::zeros({c});
  const T* gp = gout.data();
  const T* xp = x.data();
  T* sp = gs.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      T acc = sp[ch];
      const T* grow = gp + (o * c + ch) * inner;
      const T* xrow = xp + (o * c + ch) * inner;
      for (std::int64_t i = 0; i < inner; ++i) acc += grow[i] * xrow[i];
      sp[ch] = acc;
    }
  return gs;
}

template <class T>
Tensor<T> reciprocal(const Tensor<T>& s) {
  auto out = Tensor<T>::zeros(s.dims());
  const T* sp = s.data();
  T* op = out.data();
  for (std::int64_t i = 0; i < s.numel(); ++i) op[i] = T(1) / sp[i];
  return out;
}

template <class T>
T sum_all(const Tensor<T>& x) {
  T acc = 0;
  const T* p = x.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) acc += p[i];
  return acc;
}

// -------------------------------------------------------------- losses ---

// Mean over the batch of the label-smoothed negative log-likelihood.
template <class T>
T softmax_ce_fwd(const Tensor<T>& logits, const std::vector<std::int64_t>& targets,
                 double smoothing) {
  if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: logits must be N,K");
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  if (k < 2) throw ShapeError("softmax_cross_entropy: class axis must be >= 2");
  if (static_cast<std::int64_t>(targets.size()) != n)
    throw ShapeError("softmax_cross_entropy: target count " + std::to_string(targets.size()) +
                     " does not match batch axis " + std::to_string(n));
  if (smoothing < 0 || smoothing >= 1) throw ValueError("softmax_cross_entropy: smoothing must be in [0,1)");
  const T* lp = logits.data();
  T loss = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= k)
      throw ValueError("softmax_cross_entropy: target " + std::to_string(t) + " out of range [0," +
                       std::to_string(k) + ") at batch index " + std::to_string(i));
    const T* row = lp + i * k;
    T mx = row[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T se = 0, zsum = 0;
    for (std::int64_t j = 0; j < k; ++j) {
      se += std::exp(row[j] - mx);
      zsum += row[j];
    }
    const T lse = mx + std::log(se);
    const T eps = static_cast<T>(smoothing);
    loss += lse - (T(1) - eps) * row[t] - eps / static_cast<T>(k) * zsum;
  }
  return loss / static_cast<T>(n);
}

template <class T>
Tensor<T> softmax_ce_bwd(const Tensor<T>& logits, const std::vector<std::int64_t>& targets,
                         double smoothing, T gscale) {
  const std::int64_t n = logits.dim(0), k = logits.dim(1);
  auto gin = Tensor<T>::zeros(logits.dims());
  const T* lp = logits.data();
  T* gp = gin.data();
  const T eps = static_cast<T>(smoothing);
  const T gnorm = gscale / static_cast<T>(n);
  for (std::int64_t i = 0; i < n; ++i) {
    const T* row = lp + i * k;
    T* grow = gp + i * k;
    T mx = row[0];
    for (std::int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    T se = 0;
    for (std::int64_t j = 0; j < k; ++j) se += std::exp(row[j] - mx);
    for (std::int64_t j = 0; j < k; ++j) {
      const T smax = std::exp(row[j] - mx) / se;
      const T q = eps / static_cast<T>(k) +
                  (j == targets[static_cast<std::size_t>(i)] ? T(1) - eps : T(0));
      grow[j] = (smax - q) * gnorm;
    }
  }
  return gin;
}

// Mean element-wise binary cross-entropy on logits, log-sum-exp form.
template <class T>
T sigmoid_bce_fwd(const Tensor<T>& logits, const Tensor<T>& target) {
  logits.check_same_shape(target, "sigmoid_bce");
  const T* zp = logits.data();
  const T* yp = target.data();
  T loss = 0;
  const std::int64_t n = logits.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const T y = yp[i];
    if (y < 0 || y > 1)
      throw ValueError("sigmoid_bce: target " + std::to_string(static_cast<double>(y)) +
                       " outside [0,1] at flat index " + std::to_string(i));
    const T z = zp[i];
    loss += std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  return loss / static_cast<T>(n);
}

template <class T>
Tensor<T> sigmoid_bce_bwd(const Tensor<T>& logits, const Tensor<T>& target, T gscale) {
  auto gin = Tensor<T>::zeros(logits.dims());
  const T* zp = logits.data();
  const T* yp = target.data();
  T* gp = gin.data();
  const std::int64_t n = logits.numel();
  const T gnorm = gscale / static_cast<T>(n);
  for (std::int64_t i = 0; i < n; ++i) {
    const T z = zp[i];
    const T sig = z >= 0 ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
    gp[i] = (sig - yp[i]) * gnorm;
  }
  return gin;
}

}  // namespace revcol::kernels
