#pragma once

#include <array>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "msrf/blocks.hpp"
#include "msrf/losses.hpp"
#include "msrf/msrf_subnet.hpp"

namespace msrf {

/// Architecture and loss settings of the full network.
struct MsrfNetConfig {
  std::size_t in_channels = 1;
  std::size_t height = 64;
  std::size_t width = 64;
  ScaleWidths widths{8, 16, 32, 64};
  std::array<std::size_t, 3> growth{16, 32, 64};  // scale pairs (1,2), (2,3), (3,4)
  std::size_t msrf_layers = 6;
  double w = 0.4;
  double leaky_slope = 0.01;
  double dropout = 0.2;
  std::size_t se_reduction = 8;
  std::size_t shape_channels = 8;
  bool shape_stream = true;
  bool deep_supervision = true;
  bool decoder_attention = true;
  SubnetVariant subnet_variant = SubnetVariant::full;
  LossWeights loss;

  /// 64x64 grayscale, widths [8, 16, 32, 64].
  static MsrfNetConfig toy() { return MsrfNetConfig{}; }

  /// 16x16 grayscale, widths [4, 8, 16, 32]; SE reduction 4 so the 4-channel
  /// encoder stage stays divisible.
  static MsrfNetConfig gradcheck_toy() {
    MsrfNetConfig c;
    c.height = c.width = 16;
    c.widths = {4, 8, 16, 32};
    c.se_reduction = 4;
    return c;
  }

  /// 256x256 RGB with widths [32, 64, 128, 256].
  static MsrfNetConfig paper_scale() {
    MsrfNetConfig c;
    c.in_channels = 3;
    c.height = c.width = 256;
    c.widths = {32, 64, 128, 256};
    c.shape_channels = 32;
    return c;
  }

  void validate() const {
    if (in_channels != 1 && in_channels != 3) throw ConfigError("in_channels must be 1 or 3");
    if (height < 8 || width < 8 || height % 8 != 0 || width % 8 != 0) {
      throw ConfigError("input size " + std::to_string(height) + "x" + std::to_string(width) +
                        " must be divisible by 8");
    }
    for (auto c : widths) {
      if (c < 1) throw ConfigError("encoder widths must be >= 1");
    }
    for (auto k : growth) {
      if (k < 1) throw ConfigError("growth factors must be >= 1");
    }
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("w must lie in [0, 1]");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    if (!(leaky_slope >= 0.0)) throw ConfigError("leaky_slope must be >= 0");
    if (shape_channels < 1) throw ConfigError("shape_channels must be >= 1");
    loss.validate();
  }

  MsrfWiring wiring() const {
    return msrf_ablation_variant(MsrfWiring::standard(msrf_layers, growth, w), subnet_variant);
  }
};

// ---- parameter layout ----

inline void encoder_params(ParamSpecs& specs, const MsrfNetConfig& cfg) {
  std::size_t cin = cfg.in_channels;
  for (std::size_t i = 0; i < kScales; ++i) {
    const std::string p = "enc" + std::to_string(i + 1);
    add_conv_params(specs, p + ".conv1", cin, cfg.widths[i], 3);
    add_conv_params(specs, p + ".conv2", cfg.widths[i], cfg.widths[i], 3);
    se_params(specs, p + ".se", cfg.widths[i], cfg.se_reduction);
    cin = cfg.widths[i];
  }
}

inline void shape_stream_params(ParamSpecs& specs, const MsrfNetConfig& cfg) {
  const std::size_t cs = cfg.shape_channels;
  add_conv_params(specs, "ss.proj", cfg.widths[0], cs, 1);
  for (std::size_t i = 1; i < kScales; ++i) {
    gated_conv_params(specs, "ss.g" + std::to_string(i), cs, cfg.widths[i]);
  }
  add_conv_params(specs, "ss.edge", cs, 1, 1);
  add_conv_params(specs, "ss.merge", 2, cs, 1);
}

/// extra: channels concatenated in front of the second CLR (shape features on the last block).
inline void decoder_block_params(ParamSpecs& specs, const std::string& prefix,
                                 std::size_t skip_channels, std::size_t prev_channels,
                                 bool attention, std::size_t se_reduction, std::size_t extra) {
  const std::size_t c = skip_channels;
  add_conv_transpose_params(specs, prefix + ".up", prev_channels, c, 3);
  if (attention) {
    se_params(specs, prefix + ".se", c, se_reduction);
    add_conv_params(specs, prefix + ".spatial", c, 1, 1);
    attention_gate_params(specs, prefix + ".ag", c, prev_channels);
    clr_params(specs, prefix + ".clr1", 3 * c, c);
  } else {
    clr_params(specs, prefix + ".clr1", 2 * c, c);
  }
  clr_params(specs, prefix + ".clr2", c + extra, c);
}

/// Every trainable tensor of the configured network.
inline ParamSpecs msrfnet_param_specs(const MsrfNetConfig& cfg) {
  cfg.validate();
  ParamSpecs specs;
  encoder_params(specs, cfg);
  auto sub = msrf_param_shapes(cfg.wiring(), cfg.widths);
  specs.insert(specs.end(), sub.begin(), sub.end());
  if (cfg.shape_stream) shape_stream_params(specs, cfg);
  const auto& c = cfg.widths;
  const std::size_t extra = cfg.shape_stream ? cfg.shape_channels : 0;
  decoder_block_params(specs, "dec2", c[2], c[3], cfg.decoder_attention, cfg.se_reduction, 0);
  decoder_block_params(specs, "dec3", c[1], c[2], cfg.decoder_attention, cfg.se_reduction, 0);
  decoder_block_params(specs, "dec4", c[0], c[1], cfg.decoder_attention, cfg.se_reduction, extra);
  if (cfg.deep_supervision) {
    add_conv_params(specs, "ds0", c[2], 1, 1);
    add_conv_params(specs, "ds1", c[1], 1, 1);
  }
  add_conv_params(specs, "head", c[0], 1, 1);
  return specs;
}

/// Parameter counts grouped by module (encoder, msrf, shape_stream, decoder, heads).
inline std::vector<std::pair<std::string, std::size_t>> parameter_report(const MsrfNetConfig& cfg) {
  std::map<std::string, std::size_t> counts;
  for (const auto& s : msrfnet_param_specs(cfg)) {
    const std::string top = s.name.substr(0, s.name.find('.'));
    std::string group = "heads";
    if (top.rfind("enc", 0) == 0) group = "encoder";
    else if (top == "msrf") group = "msrf";
    else if (top == "ss") group = "shape_stream";
    else if (top.rfind("dec", 0) == 0) group = "decoder";
    counts[group] += shape_numel(s.shape);
  }
  std::vector<std::pair<std::string, std::size_t>> out;
  for (const char* g : {"encoder", "msrf", "shape_stream", "decoder", "heads"}) {
    out.emplace_back(g, counts[g]);
  }
  return out;
}

// ---- image gradients ----

/// Sobel gradient magnitude of the intensity channel (channel mean), with
/// replicated borders, normalised per image to [0, 1].
template <class T>
Tensor<T> sobel_magnitude(const Tensor<T>& image) {
  require_rank(image.shape(), 4, "sobel_magnitude");
  const std::size_t n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  Tensor<T> out({n, 1, h, w});
  std::vector<T> gray(h * w);
  for (std::size_t s = 0; s < n; ++s) {
    std::fill(gray.begin(), gray.end(), T{0});
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < h * w; ++i) gray[i] += image[(s * c + ch) * h * w + i];
    }
    for (auto& v : gray) v /= static_cast<T>(c);
    auto px = [&](std::ptrdiff_t y, std::ptrdiff_t x) {
      y = std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(h) - 1);
      x = std::clamp<std::ptrdiff_t>(x, 0, static_cast<std::ptrdiff_t>(w) - 1);
      return gray[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
    };
    T peak{0};
    T* dst = out.ptr() + s * h * w;
    for (std::size_t yy = 0; yy < h; ++yy) {
      for (std::size_t xx = 0; xx < w; ++xx) {
        const auto y = static_cast<std::ptrdiff_t>(yy), x = static_cast<std::ptrdiff_t>(xx);
        const T gx = (px(y - 1, x + 1) + 2 * px(y, x + 1) + px(y + 1, x + 1)) -
                     (px(y - 1, x - 1) + 2 * px(y, x - 1) + px(y + 1, x - 1));
        const T gy = (px(y + 1, x - 1) + 2 * px(y + 1, x) + px(y + 1, x + 1)) -
                     (px(y - 1, x - 1) + 2 * px(y - 1, x) + px(y - 1, x + 1));
        const T m = std::sqrt(gx * gx + gy * gy);
        dst[yy * w + xx] = m;
        peak = std::max(peak, m);
      }
    }
    if (peak > T{0}) {
      for (std::size_t i = 0; i < h * w; ++i) dst[i] /= peak;
    }
  }
  return out;
}

// ---- forward ----

/// E1..E4: two CLRs and squeeze-excitation per stage; the next stage sees
/// max-pooled, dropped-out features. Returns the per-scale stage outputs.
template <class T>
ScaleVars<T> encoder_forward(Graph<T>& g, const Var<T>& image, const MsrfNetConfig& cfg) {
  require_rank(image.shape(), 4, "encoder input");
  if (image.dim(1) != cfg.in_channels || image.dim(2) != cfg.height || image.dim(3) != cfg.width) {
    throw ShapeError("encoder: image " + to_string(image.shape()) + " does not match config [N," +
                     std::to_string(cfg.in_channels) + "," + std::to_string(cfg.height) + "," +
                     std::to_string(cfg.width) + "]");
  }
  const T slope = static_cast<T>(cfg.leaky_slope);
  ScaleVars<T> out;
  Var<T> x = image;
  for (std::size_t i = 0; i < kScales; ++i) {
    const std::string p = "enc" + std::to_string(i + 1);
    x = leaky_relu(conv2d(x, g.param(p + ".conv1.w"), g.param(p + ".conv1.b"), 1, Padding::same), slope);
    x = leaky_relu(conv2d(x, g.param(p + ".conv2.w"), g.param(p + ".conv2.b"), 1, Padding::same), slope);
    x = se_block(g, p + ".se", x);
    out[i] = x;
    if (i + 1 < kScales) {
      x = dropout(maxpool2(x), static_cast<T>(cfg.dropout), g.training(), g.rng());
    }
  }
  return out;
}

template <class T>
struct ShapeStreamOutput {
  Var<T> edge;      // [N, 1, H, W], sigmoid
  Var<T> features;  // [N, Cs, H, W], merged into the last decoder block
};

/// Scale-1 features projected to Cs channels, gated three times by the
/// resized scale-2, 3 and 4 features, then an edge head; the edge map joined
/// with the image's Sobel magnitude gives the shape features.
template <class T>
ShapeStreamOutput<T> shape_stream_forward(Graph<T>& g, const ScaleVars<T>& msrf_out,
                                          const Tensor<T>& image, const MsrfNetConfig& cfg) {
  const T slope = static_cast<T>(cfg.leaky_slope);
  const std::size_t h = msrf_out[0].dim(2), w = msrf_out[0].dim(3);
  Var<T> s = conv2d(msrf_out[0], g.param("ss.proj.w"), g.param("ss.proj.b"), 1, Padding::same);
  for (std::size_t i = 1; i < kScales; ++i) {
    Var<T> gate = bilinear_resize(msrf_out[i], h, w);
    s = gated_conv(g, "ss.g" + std::to_string(i), s, gate, slope).shape;
  }
  Var<T> edge = sigmoid(conv2d(s, g.param("ss.edge.w"), g.param("ss.edge.b"), 1, Padding::same));
  Var<T> grad = g.input(sobel_magnitude(image));
  Var<T> features = conv2d(concat<T>({edge, grad}), g.param("ss.merge.w"), g.param("ss.merge.b"),
                           1, Padding::same);
  return {edge, features};
}

/// Triple-attention decoder block at the skip tensor's resolution. With
/// attention off it reduces to CLR(CLR(X ++ up(D))).
template <class T>
Var<T> decoder_block_forward(Graph<T>& g, const std::string& prefix, const Var<T>& skip,
                             const Var<T>& prev, const MsrfNetConfig& cfg,
                             const std::optional<Var<T>>& extra = std::nullopt) {
  require_pyramid_step(skip, prev, "decoder block");
  const T slope = static_cast<T>(cfg.leaky_slope);
  Var<T> up = conv_transpose2d(prev, g.param(prefix + ".up.w"), g.param(prefix + ".up.b"), 2);
  Var<T> merged = skip;
  if (cfg.decoder_attention) {
    // channel + spatial attention: (X_s + 1) * SE(X)
    Var<T> x_se = se_block(g, prefix + ".se", skip);
    Var<T> x_s = sigmoid(conv2d(skip, g.param(prefix + ".spatial.w"),
                                g.param(prefix + ".spatial.b"), 1, Padding::same));
    Var<T> d_sc = mul_map(x_se, add_scalar(x_s, T{1}));
    // gated attention
    Var<T> d_ag = attention_gate(g, prefix + ".ag", skip, prev);
    Var<T> gated = mul_map(skip, d_ag);
    merged = concat<T>({d_sc, gated, up});
  } else {
    merged = concat<T>({skip, up});
  }
  Var<T> x = clr(g, prefix + ".clr1", merged, slope);
  if (extra) x = concat<T>({x, *extra});
  return clr(g, prefix + ".clr2", x, slope);
}

template <class T>
struct NetOutputs {
  Var<T> pred;
  std::optional<Var<T>> ds0;
  std::optional<Var<T>> ds1;
  std::optional<Var<T>> edge;
};

/// Encoder -> MSRF sub-network -> shape stream -> decoders D2, D3, D4 -> heads.
template <class T>
NetOutputs<T> msrfnet_forward(Graph<T>& g, const Tensor<T>& image, const MsrfNetConfig& cfg) {
  cfg.validate();
  for (T v : image.data()) {
    if (!(v >= T{0} && v <= T{1})) throw UsageError("input image values must lie in [0, 1]");
  }
  const T slope = static_cast<T>(cfg.leaky_slope);
  Var<T> x = g.input(image);
  const ScaleVars<T> enc = encoder_forward(g, x, cfg);
  const ScaleVars<T> fused = msrf_forward(g, enc, cfg.wiring(), slope);

  NetOutputs<T> out;
  std::optional<Var<T>> shape_features;
  if (cfg.shape_stream) {
    auto ss = shape_stream_forward(g, fused, image, cfg);
    out.edge = ss.edge;
    shape_features = ss.features;
  }
  Var<T> d2 = decoder_block_forward(g, "dec2", fused[2], fused[3], cfg);
  Var<T> d3 = decoder_block_forward(g, "dec3", fused[1], d2, cfg);
  Var<T> d4 = decoder_block_forward(g, "dec4", fused[0], d3, cfg, shape_features);
  out.pred = sigmoid(conv2d(d4, g.param("head.w"), g.param("head.b"), 1, Padding::same));
  if (cfg.deep_supervision) {
    out.ds0 = bilinear_resize(
        sigmoid(conv2d(d2, g.param("ds0.w"), g.param("ds0.b"), 1, Padding::same)), cfg.height,
        cfg.width);
    out.ds1 = bilinear_resize(
        sigmoid(conv2d(d3, g.param("ds1.w"), g.param("ds1.b"), 1, Padding::same)), cfg.height,
        cfg.width);
  }
  return out;
}

/// Forward pass plus the weighted total loss against mask y and boundary map y_edge.
template <class T>
LossBreakdown<T> msrfnet_loss(Graph<T>& g, const Tensor<T>& image, const Tensor<T>& y,
                              const Tensor<T>& y_edge, const MsrfNetConfig& cfg) {
  const NetOutputs<T> out = msrfnet_forward(g, image, cfg);
  return total_loss(out.pred, out.ds0, out.ds1, out.edge, y, y_edge, cfg.loss);
}

}  // namespace msrf
