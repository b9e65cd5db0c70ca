#pragma once

#include <string>
#include <utility>
#include <vector>

#include "msrf/blocks.hpp"

namespace msrf {

/// Dual-scale dense fusion block settings.
struct DsdfConfig {
  static constexpr std::size_t depth = 5;

  std::size_t ch_high = 0;  // channels of the high-resolution stream input
  std::size_t ch_low = 0;   // channels of the low-resolution stream input
  std::size_t k = 16;       // growth factor: output channels of every CLR
  double w = 0.4;           // residual scaling

  void validate() const {
    if (ch_high < 1 || ch_low < 1) throw ConfigError("dsdf: stream channels must be >= 1");
    if (k < 1) throw ConfigError("dsdf: growth factor k must be >= 1");
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("dsdf: residual scale w must lie in [0, 1]");
  }
};

enum class Stream { high, low };

/// One tensor feeding a CLR stage: either a stage output of the block's own
/// stream (M_index) or the resampled previous stage of the other stream.
struct StageSource {
  bool cross = false;
  std::size_t index = 0;  // own-stream stage index when !cross, else the other stream's stage
};

/// Concat order for stage d (1-based) on either stream:
/// [M_{d-1}, resampled other M_{d-1}, M_{d-2}, ..., M_0].
inline std::vector<StageSource> dsdf_stage_sources(std::size_t d) {
  if (d < 1 || d > DsdfConfig::depth) throw UsageError("dsdf stage index out of range");
  std::vector<StageSource> out;
  out.push_back({false, d - 1});
  out.push_back({true, d - 1});
  for (std::size_t j = d - 1; j-- > 0;) out.push_back({false, j});
  return out;
}

inline std::string dsdf_stream_prefix(const std::string& prefix, Stream s) {
  return prefix + (s == Stream::high ? ".h" : ".l");
}

/// Every tensor the block owns: per stream 5 CLR kernels, 5 cross-scale
/// kernels (transposed conv up into the high stream, strided conv down into
/// the low stream) and one 1x1 fusion kernel back to the stream's width.
inline ParamSpecs dsdf_param_shapes(const DsdfConfig& cfg, const std::string& prefix = "dsdf") {
  cfg.validate();
  ParamSpecs specs;
  for (Stream s : {Stream::high, Stream::low}) {
    const std::string p = dsdf_stream_prefix(prefix, s);
    const std::size_t own = s == Stream::high ? cfg.ch_high : cfg.ch_low;
    const std::size_t other = s == Stream::high ? cfg.ch_low : cfg.ch_high;
    for (std::size_t d = 1; d <= DsdfConfig::depth; ++d) {
      const std::size_t cross_in = d == 1 ? other : cfg.k;
      if (s == Stream::high) {
        add_conv_transpose_params(specs, p + ".up" + std::to_string(d), cross_in, cfg.k, 3);
      } else {
        add_conv_params(specs, p + ".down" + std::to_string(d), cross_in, cfg.k, 3);
      }
      clr_params(specs, p + ".clr" + std::to_string(d), own + (d - 1) * cfg.k + cfg.k, cfg.k);
    }
    add_conv_params(specs, p + ".fuse", cfg.k, own, 1);
  }
  return specs;
}

template <class T>
struct StreamPair {
  Var<T> high;
  Var<T> low;
};

/// Runs the block. `w` overrides cfg.w so callers can disable scaling (w = 1).
template <class T>
StreamPair<T> dsdf_forward(Graph<T>& g, const std::string& prefix, const Var<T>& x_high,
                           const Var<T>& x_low, const DsdfConfig& cfg, T slope, T w) {
  require_rank(x_high.shape(), 4, "dsdf high-resolution input");
  require_rank(x_low.shape(), 4, "dsdf low-resolution input");
  if (x_high.dim(2) != 2 * x_low.dim(2) || x_high.dim(3) != 2 * x_low.dim(3) ||
      x_high.dim(0) != x_low.dim(0)) {
    throw ShapeError(prefix + ": high-resolution input " + to_string(x_high.shape()) +
                     " must be exactly 2x the low-resolution input " + to_string(x_low.shape()));
  }
  if (x_high.dim(1) != cfg.ch_high || x_low.dim(1) != cfg.ch_low) {
    throw ShapeError(prefix + ": channels (" + std::to_string(x_high.dim(1)) + ", " +
                     std::to_string(x_low.dim(1)) + ") do not match configured (" +
                     std::to_string(cfg.ch_high) + ", " + std::to_string(cfg.ch_low) + ")");
  }
  const std::string ph = dsdf_stream_prefix(prefix, Stream::high);
  const std::string pl = dsdf_stream_prefix(prefix, Stream::low);

  std::vector<Var<T>> hist_h{x_high};
  std::vector<Var<T>> hist_l{x_low};
  for (std::size_t d = 1; d <= DsdfConfig::depth; ++d) {
    const std::string ds = std::to_string(d);
    Var<T> up = conv_transpose2d(hist_l[d - 1], g.param(ph + ".up" + ds + ".w"),
                                 g.param(ph + ".up" + ds + ".b"), 2);
    Var<T> down = conv2d(hist_h[d - 1], g.param(pl + ".down" + ds + ".w"),
                         g.param(pl + ".down" + ds + ".b"), 2, Padding::same);
    std::vector<Var<T>> parts_h, parts_l;
    for (const auto& src : dsdf_stage_sources(d)) {
      parts_h.push_back(src.cross ? up : hist_h[src.index]);
      parts_l.push_back(src.cross ? down : hist_l[src.index]);
    }
    Var<T> mh = clr(g, ph + ".clr" + ds, concat(parts_h), slope);
    Var<T> ml = clr(g, pl + ".clr" + ds, concat(parts_l), slope);
    hist_h.push_back(mh);
    hist_l.push_back(ml);
  }
  Var<T> fused_h = conv2d(hist_h.back(), g.param(ph + ".fuse.w"), g.param(ph + ".fuse.b"), 1,
                          Padding::same);
  Var<T> fused_l = conv2d(hist_l.back(), g.param(pl + ".fuse.w"), g.param(pl + ".fuse.b"), 1,
                          Padding::same);
  return {add_scaled(x_high, fused_h, w), add_scaled(x_low, fused_l, w)};
}

template <class T>
StreamPair<T> dsdf_forward(Graph<T>& g, const std::string& prefix, const Var<T>& x_high,
                           const Var<T>& x_low, const DsdfConfig& cfg, T slope) {
  return dsdf_forward(g, prefix, x_high, x_low, cfg, slope, static_cast<T>(cfg.w));
}

}  // namespace msrf
