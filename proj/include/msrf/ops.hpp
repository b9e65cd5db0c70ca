#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "msrf/autodiff.hpp"
#include "msrf/parallel.hpp"
#include "msrf/random.hpp"
#include "msrf/tensor.hpp"

// Differentiable primitives. Every op validates shapes, computes its value
// eagerly and records a backward closure on the tape of its inputs.

namespace msrf {

enum class Padding { same, valid };

/// Geometry of a 2-D cross-correlation over one image. Same padding is
/// symmetric with the odd pixel on the bottom/right.
struct ConvGeometry {
  std::size_t channels = 0;
  std::size_t in_h = 0, in_w = 0;
  std::size_t kh = 0, kw = 0;
  std::size_t stride = 1;
  std::size_t pad_top = 0, pad_left = 0;
  std::size_t out_h = 0, out_w = 0;

  std::size_t col_rows() const { return channels * kh * kw; }
  std::size_t col_cols() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(std::size_t channels, std::size_t h, std::size_t w,
                                  std::size_t kh, std::size_t kw, std::size_t stride,
                                  Padding padding) {
  if (stride < 1) throw ConfigError("convolution stride must be >= 1");
  ConvGeometry g{channels, h, w, kh, kw, stride, 0, 0, 0, 0};
  if (padding == Padding::same) {
    g.out_h = (h + stride - 1) / stride;
    g.out_w = (w + stride - 1) / stride;
    const auto total = [&](std::size_t out, std::size_t k, std::size_t in) -> std::size_t {
      const std::size_t need = (out - 1) * stride + k;
      return need > in ? need - in : 0;
    };
    g.pad_top = total(g.out_h, kh, h) / 2;
    g.pad_left = total(g.out_w, kw, w) / 2;
  } else {
    if (h < kh || w < kw) {
      throw ShapeError("valid convolution: kernel " + std::to_string(kh) + "x" +
                       std::to_string(kw) + " larger than input " + std::to_string(h) + "x" +
                       std::to_string(w));
    }
    g.out_h = (h - kh) / stride + 1;
    g.out_w = (w - kw) / stride + 1;
  }
  return g;
}

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

inline bool is_pointwise(const ConvGeometry& g) {
  return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad_top == 0 && g.pad_left == 0;
}

// cols[(c, ky, kx), (oy, ox)] = img[c, oy*s + ky - top, ox*s + kx - left], zero outside.
// Output columns [lo, hi) whose input column ox * stride + k - pad lies inside the row.
inline std::pair<std::size_t, std::size_t> valid_span(std::size_t out, std::size_t in, std::size_t stride,
                                                      std::size_t k, std::size_t pad) {
  const auto off = static_cast<std::ptrdiff_t>(k) - static_cast<std::ptrdiff_t>(pad);
  const auto s = static_cast<std::ptrdiff_t>(stride);
  const std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
  const std::ptrdiff_t hi = (static_cast<std::ptrdiff_t>(in) - off + s - 1) / s;
  const auto clamp = [&](std::ptrdiff_t v) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(out)));
  };
  return {clamp(lo), std::max(clamp(lo), clamp(hi))};
}

template <class T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* src = img + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        T* row = cols + ((c * g.kh + ky) * g.kw + kx) * plane;
        const auto [lo, hi] = valid_span(g.out_w, g.in_w, g.stride, kx, g.pad_left);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad_top);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h) || lo == hi) {
            std::fill(dst, dst + g.out_w, T{0});
            continue;
          }
          // first valid input column; lo guarantees it is in range
          const T* line = src + static_cast<std::size_t>(iy) * g.in_w + (lo * g.stride + kx - g.pad_left);
          std::fill(dst, dst + lo, T{0});
          if (g.stride == 1) {
            std::copy(line, line + (hi - lo), dst + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = line[(ox - lo) * g.stride];
          }
          std::fill(dst + hi, dst + g.out_w, T{0});
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into the image.
template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* dst = img + c * g.in_h * g.in_w;
    for (std::size_t ky = 0; ky < g.kh; ++ky) {
      for (std::size_t kx = 0; kx < g.kw; ++kx) {
        const T* row = cols + ((c * g.kh + ky) * g.kw + kx) * plane;
        const auto [lo, hi] = valid_span(g.out_w, g.in_w, g.stride, kx, g.pad_left);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                          static_cast<std::ptrdiff_t>(g.pad_top);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
          if (lo == hi) continue;
          T* line = dst + static_cast<std::size_t>(iy) * g.in_w + (lo * g.stride + kx - g.pad_left);
          const T* src = row + oy * g.out_w;
          if (g.stride == 1) {
            for (std::size_t ox = lo; ox < hi; ++ox) line[ox - lo] += src[ox];
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) line[(ox - lo) * g.stride] += src[ox];
          }
        }
      }
    }
  }
}

template <class T>
void require_same_tape(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.tape != b.tape) throw UsageError(std::string(op) + ": operands on different tapes");
}

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* op) {
  require_same_tape(a, b, op);
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

// Sums per-sample partial gradients in sample order into dst.
template <class T>
void reduce_partials(Tensor<T>& dst, const std::vector<Tensor<T>>& partials) {
  for (const auto& p : partials) add_into(dst, p);
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

}  // namespace detail

// ---- convolutions ----

/// Cross-correlation. weight: [Cout, Cin, kh, kw], bias: [Cout].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride,
              Padding padding) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(weight.shape(), 4, "conv2d weight");
  require_rank(bias.shape(), 1, "conv2d bias");
  detail::require_same_tape(x, weight, "conv2d");
  detail::require_same_tape(x, bias, "conv2d");
  const std::size_t n = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw ShapeError("conv2d: input channels (dim 1) = " + std::to_string(cin) +
                     " but weight expects " + std::to_string(weight.dim(1)));
  }
  if (bias.dim(0) != cout) {
    throw ShapeError("conv2d: bias length " + std::to_string(bias.dim(0)) + " != output channels " +
                     std::to_string(cout));
  }
  const ConvGeometry g =
      conv_geometry(cin, x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), stride, padding);
  const std::size_t in_plane = cin * g.in_h * g.in_w;
  const std::size_t out_plane = cout * g.col_cols();

  Tensor<T> out({n, cout, g.out_h, g.out_w});
  {
    const T* xp = x.value().ptr();
    const T* bp = bias.value().ptr();
    detail::ConstMapMat<T> wm(weight.value().ptr(), cout, g.col_rows());
    T* op = out.ptr();
    parallel_for(n, [&](std::size_t s) {
      detail::MapMat<T> y(op + s * out_plane, cout, g.col_cols());
      if (detail::is_pointwise(g)) {
        y.noalias() = wm * detail::ConstMapMat<T>(xp + s * in_plane, cin, g.col_cols());
      } else {
        std::vector<T> cols(g.col_rows() * g.col_cols());
        detail::im2col(xp + s * in_plane, g, cols.data());
        y.noalias() = wm * detail::ConstMapMat<T>(cols.data(), g.col_rows(), g.col_cols());
      }
      for (std::size_t c = 0; c < cout; ++c) y.row(c).array() += bp[c];
    });
  }

  return x.tape->record(
      "conv2d", std::move(out), {x, weight, bias},
      [x, weight, bias, g, n, cin, cout, in_plane, out_plane](Tape<T>& tape, const Tensor<T>& gout) {
        Tensor<T>* dx = tape.grad_sink(x);
        Tensor<T>* dw = tape.grad_sink(weight);
        Tensor<T>* db = tape.grad_sink(bias);
        const T* xp = x.value().ptr();
        const T* gp = gout.ptr();
        detail::ConstMapMat<T> wm(weight.value().ptr(), cout, g.col_rows());
        std::vector<Tensor<T>> dw_parts(dw ? n : 0);
        parallel_for(n, [&](std::size_t s) {
          detail::ConstMapMat<T> gy(gp + s * out_plane, cout, g.col_cols());
          const bool pointwise = detail::is_pointwise(g);
          if (dw) {
            dw_parts[s] = Tensor<T>(weight.shape());
            detail::MapMat<T> dws(dw_parts[s].ptr(), cout, g.col_rows());
            if (pointwise) {
              dws.noalias() = gy * detail::ConstMapMat<T>(xp + s * in_plane, cin, g.col_cols()).transpose();
            } else {
              std::vector<T> cols(g.col_rows() * g.col_cols());
              detail::im2col(xp + s * in_plane, g, cols.data());
              dws.noalias() =
                  gy * detail::ConstMapMat<T>(cols.data(), g.col_rows(), g.col_cols()).transpose();
            }
          }
          if (dx) {
            if (pointwise) {
              detail::MapMat<T> dxs(dx->ptr() + s * in_plane, cin, g.col_cols());
              dxs.noalias() += wm.transpose() * gy;
            } else {
              std::vector<T> dcols(g.col_rows() * g.col_cols());
              detail::MapMat<T> dc(dcols.data(), g.col_rows(), g.col_cols());
              dc.noalias() = wm.transpose() * gy;
              detail::col2im(dcols.data(), g, dx->ptr() + s * in_plane);
            }
          }
        });
        if (dw) detail::reduce_partials(*dw, dw_parts);
        if (db) {
          for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t c = 0; c < cout; ++c) {
              const T* row = gp + s * out_plane + c * g.col_cols();
              T acc{0};
              for (std::size_t i = 0; i < g.col_cols(); ++i) acc += row[i];
              (*db)[c] += acc;
            }
          }
        }
      });
}

/// Transposed convolution (adjoint of a same-padded conv2d), output exactly
/// stride*H x stride*W. weight: [Cin, Cout, kh, kw], bias: [Cout].
template <class T>
Var<T> conv_transpose2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias,
                        std::size_t stride) {
  require_rank(x.shape(), 4, "conv_transpose2d input");
  require_rank(weight.shape(), 4, "conv_transpose2d weight");
  require_rank(bias.shape(), 1, "conv_transpose2d bias");
  detail::require_same_tape(x, weight, "conv_transpose2d");
  detail::require_same_tape(x, bias, "conv_transpose2d");
  if (stride < 1) throw ConfigError("conv_transpose2d stride must be >= 1");
  const std::size_t n = x.dim(0), cin = x.dim(1), cout = weight.dim(1);
  if (weight.dim(0) != cin) {
    throw ShapeError("conv_transpose2d: input channels (dim 1) = " + std::to_string(cin) +
                     " but weight expects " + std::to_string(weight.dim(0)));
  }
  if (bias.dim(0) != cout) {
    throw ShapeError("conv_transpose2d: bias length " + std::to_string(bias.dim(0)) +
                     " != output channels " + std::to_string(cout));
  }
  // Geometry of the forward convolution this op is the adjoint of.
  const ConvGeometry g = conv_geometry(cout, x.dim(2) * stride, x.dim(3) * stride, weight.dim(2),
                                       weight.dim(3), stride, Padding::same);
  const std::size_t in_plane = cin * x.dim(2) * x.dim(3);
  const std::size_t out_plane = cout * g.in_h * g.in_w;

  Tensor<T> out({n, cout, g.in_h, g.in_w});
  {
    const T* xp = x.value().ptr();
    const T* bp = bias.value().ptr();
    detail::ConstMapMat<T> wm(weight.value().ptr(), cin, g.col_rows());
    T* op = out.ptr();
    parallel_for(n, [&](std::size_t s) {
      std::vector<T> cols(g.col_rows() * g.col_cols());
      detail::MapMat<T> cm(cols.data(), g.col_rows(), g.col_cols());
      cm.noalias() = wm.transpose() * detail::ConstMapMat<T>(xp + s * in_plane, cin, g.col_cols());
      T* ys = op + s * out_plane;
      detail::col2im(cols.data(), g, ys);
      const std::size_t plane = g.in_h * g.in_w;
      for (std::size_t c = 0; c < cout; ++c) {
        for (std::size_t i = 0; i < plane; ++i) ys[c * plane + i] += bp[c];
      }
    });
  }

  return x.tape->record(
      "conv_transpose2d", std::move(out), {x, weight, bias},
      [x, weight, bias, g, n, cin, cout, in_plane, out_plane](Tape<T>& tape, const Tensor<T>& gout) {
        Tensor<T>* dx = tape.grad_sink(x);
        Tensor<T>* dw = tape.grad_sink(weight);
        Tensor<T>* db = tape.grad_sink(bias);
        const T* xp = x.value().ptr();
        const T* gp = gout.ptr();
        detail::ConstMapMat<T> wm(weight.value().ptr(), cin, g.col_rows());
        std::vector<Tensor<T>> dw_parts(dw ? n : 0);
        parallel_for(n, [&](std::size_t s) {
          if (!dx && !dw) return;
          std::vector<T> cols(g.col_rows() * g.col_cols());
          detail::im2col(gp + s * out_plane, g, cols.data());
          detail::ConstMapMat<T> cm(cols.data(), g.col_rows(), g.col_cols());
          if (dx) {
            detail::MapMat<T> dxs(dx->ptr() + s * in_plane, cin, g.col_cols());
            dxs.noalias() += wm * cm;
          }
          if (dw) {
            dw_parts[s] = Tensor<T>(weight.shape());
            detail::MapMat<T> dws(dw_parts[s].ptr(), cin, g.col_rows());
            dws.noalias() = detail::ConstMapMat<T>(xp + s * in_plane, cin, g.col_cols()) * cm.transpose();
          }
        });
        if (dw) detail::reduce_partials(*dw, dw_parts);
        if (db) {
          const std::size_t plane = g.in_h * g.in_w;
          for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t c = 0; c < cout; ++c) {
              const T* row = gp + s * out_plane + c * plane;
              T acc{0};
              for (std::size_t i = 0; i < plane; ++i) acc += row[i];
              (*db)[c] += acc;
            }
          }
        }
      });
}

/// Fully connected layer on [N, Cin]. weight: [Cout, Cin], bias: [Cout].
template <class T>
Var<T> dense(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(x.shape(), 2, "dense input");
  require_rank(weight.shape(), 2, "dense weight");
  require_rank(bias.shape(), 1, "dense bias");
  const std::size_t n = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  if (weight.dim(1) != cin || bias.dim(0) != cout) {
    throw ShapeError("dense: weight " + to_string(weight.shape()) + " / bias " +
                     to_string(bias.shape()) + " incompatible with input " + to_string(x.shape()));
  }
  Tensor<T> out({n, cout});
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t o = 0; o < cout; ++o) {
      T acc = bias.value()[o];
      for (std::size_t i = 0; i < cin; ++i) acc += wv[o * cin + i] * xv[s * cin + i];
      out[s * cout + o] = acc;
    }
  }
  return x.tape->record("dense", std::move(out), {x, weight, bias},
                        [x, weight, bias, n, cin, cout](Tape<T>& tape, const Tensor<T>& g) {
                          Tensor<T>* dx = tape.grad_sink(x);
                          Tensor<T>* dw = tape.grad_sink(weight);
                          Tensor<T>* db = tape.grad_sink(bias);
                          const Tensor<T>& xv = x.value();
                          const Tensor<T>& wv = weight.value();
                          for (std::size_t s = 0; s < n; ++s) {
                            for (std::size_t o = 0; o < cout; ++o) {
                              const T go = g[s * cout + o];
                              if (db) (*db)[o] += go;
                              for (std::size_t i = 0; i < cin; ++i) {
                                if (dw) (*dw)[o * cin + i] += go * xv[s * cin + i];
                                if (dx) (*dx)[s * cin + i] += go * wv[o * cin + i];
                              }
                            }
                          }
                        });
}

// ---- pooling and resampling ----

/// 2x2 max pooling with stride 2. Ties route the gradient to the first
/// element in row-major window order.
template <class T>
Var<T> maxpool2(const Var<T>& x) {
  require_rank(x.shape(), 4, "maxpool2 input");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw ConfigError("maxpool2: spatial dims must be even, got " + to_string(x.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> out({n, c, oh, ow});
  std::vector<std::uint32_t> argmax(out.size());
  const T* xp = x.value().ptr();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + (2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy) {
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = p * h * w + (2 * oy + dy) * w + 2 * ox + dx;
            if (xp[idx] > xp[best]) best = idx;
          }
        }
        const std::size_t o = p * oh * ow + oy * ow + ox;
        out[o] = xp[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return x.tape->record("maxpool2", std::move(out), {x},
                        [x, argmax = std::move(argmax)](Tape<T>& tape, const Tensor<T>& g) {
                          Tensor<T>* dx = tape.grad_sink(x);
                          if (!dx) return;
                          for (std::size_t o = 0; o < argmax.size(); ++o) (*dx)[argmax[o]] += g[o];
                        });
}

namespace detail {

struct LerpTap {
  std::size_t i0, i1;
  double frac;
};

// Half-pixel sample positions (align_corners = false), clamped at the edges.
inline std::vector<LerpTap> lerp_taps(std::size_t in, std::size_t out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
    if (src < 0.0) src = 0.0;
    auto i0 = static_cast<std::size_t>(std::floor(src));
    if (i0 >= in - 1) {
      taps[o] = {in - 1, in - 1, 0.0};
    } else {
      taps[o] = {i0, i0 + 1, src - static_cast<double>(i0)};
    }
  }
  return taps;
}

}  // namespace detail

/// Bilinear resize to out_h x out_w.
template <class T>
Var<T> bilinear_resize(const Var<T>& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x.shape(), 4, "bilinear_resize input");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: output size must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = detail::lerp_taps(h, out_h);
  const auto tx = detail::lerp_taps(w, out_w);
  Tensor<T> out({n, c, out_h, out_w});
  const T* xp = x.value().ptr();
  for (std::size_t p = 0; p < n * c; ++p) {
    const T* src = xp + p * h * w;
    T* dst = out.ptr() + p * out_h * out_w;
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& ry = ty[oy];
      const T ly = static_cast<T>(ry.frac);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& rx = tx[ox];
        const T lx = static_cast<T>(rx.frac);
        const T a = src[ry.i0 * w + rx.i0], b = src[ry.i0 * w + rx.i1];
        const T cc = src[ry.i1 * w + rx.i0], d = src[ry.i1 * w + rx.i1];
        const T top = a + lx * (b - a);
        const T bottom = cc + lx * (d - cc);
        dst[oy * out_w + ox] = top + ly * (bottom - top);
      }
    }
  }
  return x.tape->record(
      "bilinear_resize", std::move(out), {x},
      [x, ty, tx, n, c, h, w, out_h, out_w](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T>* dx = tape.grad_sink(x);
        if (!dx) return;
        for (std::size_t p = 0; p < n * c; ++p) {
          T* dst = dx->ptr() + p * h * w;
          const T* gp = g.ptr() + p * out_h * out_w;
          for (std::size_t oy = 0; oy < out_h; ++oy) {
            const T ly = static_cast<T>(ty[oy].frac);
            for (std::size_t ox = 0; ox < out_w; ++ox) {
              const T lx = static_cast<T>(tx[ox].frac);
              const T go = gp[oy * out_w + ox];
              dst[ty[oy].i0 * w + tx[ox].i0] += go * (T{1} - ly) * (T{1} - lx);
              dst[ty[oy].i0 * w + tx[ox].i1] += go * (T{1} - ly) * lx;
              dst[ty[oy].i1 * w + tx[ox].i0] += go * ly * (T{1} - lx);
              dst[ty[oy].i1 * w + tx[ox].i1] += go * ly * lx;
            }
          }
        }
      });
}

/// Mean over H x W: [N, C, H, W] -> [N, C].
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool input");
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out({n, c});
  const T* xp = x.value().ptr();
  for (std::size_t p = 0; p < n * c; ++p) {
    T acc{0};
    for (std::size_t i = 0; i < plane; ++i) acc += xp[p * plane + i];
    out[p] = acc / static_cast<T>(plane);
  }
  return x.tape->record("global_avg_pool", std::move(out), {x},
                        [x, n, c, plane](Tape<T>& tape, const Tensor<T>& g) {
                          Tensor<T>* dx = tape.grad_sink(x);
                          if (!dx) return;
                          for (std::size_t p = 0; p < n * c; ++p) {
                            const T share = g[p] / static_cast<T>(plane);
                            for (std::size_t i = 0; i < plane; ++i) (*dx)[p * plane + i] += share;
                          }
                        });
}

// ---- elementwise ----

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  Tensor<T> out = a.value();
  add_into(out, b.value());
  return a.tape->record("add", std::move(out), {a, b}, [a, b](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* da = tape.grad_sink(a)) add_into(*da, g);
    if (auto* db = tape.grad_sink(b)) add_into(*db, g);
  });
}

/// a + w * b. At w = 0 the value is a copy of a, bit for bit.
template <class T>
Var<T> add_scaled(const Var<T>& a, const Var<T>& b, T w) {
  detail::require_same_shape(a, b, "add_scaled");
  Tensor<T> out = a.value();
  if (w != T{0}) {
    const auto bv = b.value().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += w * bv[i];
  }
  return a.tape->record("add_scaled", std::move(out), {a, b},
                        [a, b, w](Tape<T>& tape, const Tensor<T>& g) {
                          if (auto* da = tape.grad_sink(a)) add_into(*da, g);
                          if (auto* db = tape.grad_sink(b)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += w * g[i];
                          }
                        });
}

template <class T>
Var<T> hadamard(const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "hadamard");
  Tensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return a.tape->record("hadamard", std::move(out), {a, b},
                        [a, b](Tape<T>& tape, const Tensor<T>& g) {
                          if (auto* da = tape.grad_sink(a)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * b.value()[i];
                          }
                          if (auto* db = tape.grad_sink(b)) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * a.value()[i];
                          }
                        });
}

/// x + c elementwise.
template <class T>
Var<T> add_scalar(const Var<T>& x, T c) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v += c;
  return x.tape->record("add_scalar", std::move(out), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* dx = tape.grad_sink(x)) add_into(*dx, g);
  });
}

/// c * x elementwise.
template <class T>
Var<T> scale(const Var<T>& x, T c) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v *= c;
  return x.tape->record("scale", std::move(out), {x}, [x, c](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* dx = tape.grad_sink(x)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += c * g[i];
    }
  });
}

/// x[n, c, :, :] * s[n, c] (per-channel gate).
template <class T>
Var<T> scale_channels(const Var<T>& x, const Var<T>& s) {
  require_rank(x.shape(), 4, "scale_channels input");
  require_rank(s.shape(), 2, "scale_channels scales");
  detail::require_same_tape(x, s, "scale_channels");
  if (s.dim(0) != x.dim(0) || s.dim(1) != x.dim(1)) {
    throw ShapeError("scale_channels: scales " + to_string(s.shape()) + " do not match input " +
                     to_string(x.shape()));
  }
  const std::size_t nc = x.dim(0) * x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out = x.value();
  for (std::size_t p = 0; p < nc; ++p) {
    const T k = s.value()[p];
    for (std::size_t i = 0; i < plane; ++i) out[p * plane + i] *= k;
  }
  return x.tape->record("scale_channels", std::move(out), {x, s},
                        [x, s, nc, plane](Tape<T>& tape, const Tensor<T>& g) {
                          Tensor<T>* dx = tape.grad_sink(x);
                          Tensor<T>* ds = tape.grad_sink(s);
                          for (std::size_t p = 0; p < nc; ++p) {
                            const T k = s.value()[p];
                            T acc{0};
                            for (std::size_t i = 0; i < plane; ++i) {
                              const std::size_t j = p * plane + i;
                              if (dx) (*dx)[j] += g[j] * k;
                              acc += g[j] * x.value()[j];
                            }
                            if (ds) (*ds)[p] += acc;
                          }
                        });
}

/// x[n, c, h, w] * a[n, 0, h, w] (single-channel map broadcast over channels).
template <class T>
Var<T> mul_map(const Var<T>& x, const Var<T>& a) {
  require_rank(x.shape(), 4, "mul_map input");
  require_rank(a.shape(), 4, "mul_map map");
  detail::require_same_tape(x, a, "mul_map");
  if (a.dim(0) != x.dim(0) || a.dim(1) != 1 || a.dim(2) != x.dim(2) || a.dim(3) != x.dim(3)) {
    throw ShapeError("mul_map: map " + to_string(a.shape()) + " does not broadcast over " +
                     to_string(x.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  Tensor<T> out = x.value();
  for (std::size_t s = 0; s < n; ++s) {
    const T* m = a.value().ptr() + s * plane;
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* row = out.ptr() + (s * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) row[i] *= m[i];
    }
  }
  return x.tape->record("mul_map", std::move(out), {x, a},
                        [x, a, n, c, plane](Tape<T>& tape, const Tensor<T>& g) {
                          Tensor<T>* dx = tape.grad_sink(x);
                          Tensor<T>* da = tape.grad_sink(a);
                          for (std::size_t s = 0; s < n; ++s) {
                            const T* m = a.value().ptr() + s * plane;
                            for (std::size_t ch = 0; ch < c; ++ch) {
                              const std::size_t base = (s * c + ch) * plane;
                              for (std::size_t i = 0; i < plane; ++i) {
                                if (dx) (*dx)[base + i] += g[base + i] * m[i];
                                if (da) (*da)[s * plane + i] += g[base + i] * x.value()[base + i];
                              }
                            }
                          }
                        });
}

template <class T>
Var<T> leaky_relu(const Var<T>& x, T slope) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T{0} ? v : slope * v;
  return x.tape->record("leaky_relu", std::move(out), {x},
                        [x, slope](Tape<T>& tape, const Tensor<T>& g) {
                          Tensor<T>* dx = tape.grad_sink(x);
                          if (!dx) return;
                          const auto xv = x.value().data();
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            (*dx)[i] += xv[i] > T{0} ? g[i] : slope * g[i];
                          }
                        });
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return x.tape->record("relu", std::move(out), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>* dx = tape.grad_sink(x);
    if (!dx) return;
    const auto xv = x.value().data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > T{0}) (*dx)[i] += g[i];
    }
  });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = detail::sigmoid_scalar(v);
  return x.tape->record("sigmoid", std::move(out), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    Tensor<T>* dx = tape.grad_sink(x);
    if (!dx) return;
    const auto xv = x.value().data();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T s = detail::sigmoid_scalar(xv[i]);
      (*dx)[i] += g[i] * s * (T{1} - s);
    }
  });
}

/// Inverted dropout: survivors are scaled by 1/(1-p); identity when not training.
template <class T>
Var<T> dropout(const Var<T>& x, T p, bool training, Rng& rng) {
  if (!(p >= T{0} && p < T{1})) throw ConfigError("dropout probability must be in [0, 1)");
  if (!training || p == T{0}) return x;
  const T keep_scale = T{1} / (T{1} - p);
  std::vector<T> mask(x.value().size());
  for (auto& m : mask) m = rng.uniform() >= static_cast<double>(p) ? keep_scale : T{0};
  Tensor<T> out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return x.tape->record("dropout", std::move(out), {x},
                        [x, mask = std::move(mask)](Tape<T>& tape, const Tensor<T>& g) {
                          Tensor<T>* dx = tape.grad_sink(x);
                          if (!dx) return;
                          for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i] * mask[i];
                        });
}

// ---- structural ----

/// Concatenation along axis 1 (channels for NCHW). All other extents must match.
template <class T>
Var<T> concat(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (ref.size() < 2) throw ShapeError("concat: inputs need rank >= 2");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    detail::require_same_tape(parts.front(), p, "concat");
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size() && s[0] == ref[0];
    for (std::size_t a = 2; ok && a < s.size(); ++a) ok = s[a] == ref[a];
    if (!ok) {
      throw ShapeError("concat: " + to_string(s) + " does not match " + to_string(ref) +
                       " outside the channel axis");
    }
    channels += s[1];
  }
  const std::size_t n = ref[0];
  std::size_t inner = 1;
  for (std::size_t a = 2; a < ref.size(); ++a) inner *= ref[a];
  Shape shape = ref;
  shape[1] = channels;
  Tensor<T> out(shape);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t block = p.dim(1) * inner;
    for (std::size_t s = 0; s < n; ++s) {
      std::copy_n(p.value().ptr() + s * block, block, out.ptr() + s * channels * inner + offset);
    }
    offset += block;
  }
  return parts.front().tape->record(
      "concat", std::move(out), parts,
      [parts, n, inner, channels](Tape<T>& tape, const Tensor<T>& g) {
        std::size_t offset = 0;
        for (const auto& p : parts) {
          const std::size_t block = p.dim(1) * inner;
          if (Tensor<T>* dp = tape.grad_sink(p)) {
            for (std::size_t s = 0; s < n; ++s) {
              const T* src = g.ptr() + s * channels * inner + offset;
              T* dst = dp->ptr() + s * block;
              for (std::size_t i = 0; i < block; ++i) dst[i] += src[i];
            }
          }
          offset += block;
        }
      });
}

/// Channels [begin, begin + count) of x (axis 1).
template <class T>
Var<T> slice_channels(const Var<T>& x, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  if (s.size() < 2 || count == 0 || begin + count > s[1]) {
    throw ShapeError("slice_channels: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " + to_string(s));
  }
  std::size_t inner = 1;
  for (std::size_t a = 2; a < s.size(); ++a) inner *= s[a];
  Shape shape = s;
  shape[1] = count;
  Tensor<T> out(shape);
  const std::size_t n = s[0], channels = s[1];
  for (std::size_t b = 0; b < n; ++b) {
    std::copy_n(x.value().ptr() + (b * channels + begin) * inner, count * inner,
                out.ptr() + b * count * inner);
  }
  return x.tape->record("slice_channels", std::move(out), {x},
                        [x, n, channels, begin, count, inner](Tape<T>& tape, const Tensor<T>& g) {
                          Tensor<T>* dx = tape.grad_sink(x);
                          if (!dx) return;
                          for (std::size_t b = 0; b < n; ++b) {
                            const T* src = g.ptr() + b * count * inner;
                            T* dst = dx->ptr() + (b * channels + begin) * inner;
                            for (std::size_t i = 0; i < count * inner; ++i) dst[i] += src[i];
                          }
                        });
}

/// Sum of all elements, as a [1] tensor.
template <class T>
Var<T> sum(const Var<T>& x) {
  T acc{0};
  for (T v : x.value().data()) acc += v;
  return x.tape->record("sum", Tensor<T>({1}, acc), {x}, [x](Tape<T>& tape, const Tensor<T>& g) {
    if (auto* dx = tape.grad_sink(x)) {
      for (auto& v : dx->data()) v += g[0];
    }
  });
}

/// Sum of c_i * x_i over scalar terms.
template <class T>
Var<T> weighted_sum(const std::vector<Var<T>>& terms, const std::vector<T>& weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw UsageError("weighted_sum: need one weight per term");
  }
  T acc{0};
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].value().size() != 1) throw ShapeError("weighted_sum: terms must be scalars");
    acc += weights[i] * terms[i].value()[0];
  }
  return terms.front().tape->record("weighted_sum", Tensor<T>({1}, acc), terms,
                                    [terms, weights](Tape<T>& tape, const Tensor<T>& g) {
                                      for (std::size_t i = 0; i < terms.size(); ++i) {
                                        if (auto* d = tape.grad_sink(terms[i])) {
                                          (*d)[0] += weights[i] * g[0];
                                        }
                                      }
                                    });
}

}  // namespace msrf
