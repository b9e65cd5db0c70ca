#pragma once

#include <string>
#include <utility>

#include "msrf/ops.hpp"
#include "msrf/params.hpp"

// Composite layers shared by the encoder, the fusion sub-network, the shape
// stream and the decoder. Each block comes as a pair: *_params() lists the
// tensors it owns under a name prefix, the forward function consumes them.

namespace msrf {

// ---- CLR: 3x3 conv + LeakyReLU ----

inline void clr_params(ParamSpecs& specs, const std::string& prefix, std::size_t cin,
                       std::size_t cout) {
  add_conv_params(specs, prefix, cin, cout, 3);
}

template <class T>
Var<T> clr(Graph<T>& g, const std::string& prefix, const Var<T>& x, T slope) {
  return leaky_relu(conv2d(x, g.param(prefix + ".w"), g.param(prefix + ".b"), 1, Padding::same),
                    slope);
}

// ---- squeeze and excitation ----

inline void se_params(ParamSpecs& specs, const std::string& prefix, std::size_t channels,
                      std::size_t reduction) {
  if (reduction == 0 || channels % reduction != 0) {
    throw ConfigError(prefix + ": channels " + std::to_string(channels) +
                      " not divisible by SE reduction " + std::to_string(reduction));
  }
  add_dense_params(specs, prefix + ".fc1", channels, channels / reduction);
  add_dense_params(specs, prefix + ".fc2", channels / reduction, channels);
}

/// Per-channel sigmoid scales computed from the global average.
template <class T>
Var<T> se_scales(Graph<T>& g, const std::string& prefix, const Var<T>& x) {
  Var<T> squeeze = global_avg_pool(x);
  Var<T> hidden =
      relu(dense(squeeze, g.param(prefix + ".fc1.w"), g.param(prefix + ".fc1.b")));
  return sigmoid(dense(hidden, g.param(prefix + ".fc2.w"), g.param(prefix + ".fc2.b")));
}

template <class T>
Var<T> se_block(Graph<T>& g, const std::string& prefix, const Var<T>& x) {
  return scale_channels(x, se_scales(g, prefix, x));
}

// ---- residual block: x + CLR(CLR(x)) ----

inline void residual_params(ParamSpecs& specs, const std::string& prefix, std::size_t channels) {
  clr_params(specs, prefix + ".clr1", channels, channels);
  clr_params(specs, prefix + ".clr2", channels, channels);
}

template <class T>
Var<T> residual_block(Graph<T>& g, const std::string& prefix, const Var<T>& x, T slope) {
  return add(x, clr(g, prefix + ".clr2", clr(g, prefix + ".clr1", x, slope), slope));
}

// ---- gated convolution of the shape stream ----

inline void gated_conv_params(ParamSpecs& specs, const std::string& prefix,
                              std::size_t shape_channels, std::size_t feature_channels) {
  add_conv_params(specs, prefix + ".gate", shape_channels + feature_channels, 1, 1);
  residual_params(specs, prefix + ".rb", shape_channels);
}

template <class T>
struct GatedOutput {
  Var<T> shape;
  Var<T> alpha;
};

/// alpha = sigmoid(conv1x1(S ++ X)); S' = RB(S * alpha). X must already be
/// resized to S's spatial extent.
template <class T>
GatedOutput<T> gated_conv(Graph<T>& g, const std::string& prefix, const Var<T>& s,
                          const Var<T>& x, T slope) {
  require_rank(s.shape(), 4, "gated_conv shape features");
  require_rank(x.shape(), 4, "gated_conv gating features");
  if (s.dim(2) != x.dim(2) || s.dim(3) != x.dim(3)) {
    throw UsageError("gated_conv: gating features " + to_string(x.shape()) +
                     " not resized to shape stream " + to_string(s.shape()));
  }
  Var<T> alpha = sigmoid(conv2d(concat<T>({s, x}), g.param(prefix + ".gate.w"),
                                g.param(prefix + ".gate.b"), 1, Padding::same));
  Var<T> next = residual_block(g, prefix + ".rb", mul_map(s, alpha), slope);
  return {next, alpha};
}

// ---- attention gate ----

/// Intermediate channel count G equals the channels of the previous decoder tensor.
inline void attention_gate_params(ParamSpecs& specs, const std::string& prefix,
                                  std::size_t skip_channels, std::size_t prev_channels) {
  const std::size_t inter = prev_channels;
  add_conv_params(specs, prefix + ".theta", skip_channels, inter, 1);
  add_conv_params(specs, prefix + ".phi", prev_channels, inter, 1);
  add_conv_params(specs, prefix + ".psi", inter, 1, 1);
  add_conv_transpose_params(specs, prefix + ".omega", 1, 1, 3);
}

template <class T>
void require_pyramid_step(const Var<T>& fine, const Var<T>& coarse, const char* what) {
  require_rank(fine.shape(), 4, what);
  require_rank(coarse.shape(), 4, what);
  if (fine.dim(0) != coarse.dim(0) || fine.dim(2) != 2 * coarse.dim(2) ||
      fine.dim(3) != 2 * coarse.dim(3)) {
    throw ShapeError(std::string(what) + ": " + to_string(fine.shape()) +
                     " is not one pyramid level above " + to_string(coarse.shape()));
  }
}

/// Omega(sigmoid(Psi(theta(X) + phi(D)))): a single-channel map at X's resolution.
template <class T>
Var<T> attention_gate(Graph<T>& g, const std::string& prefix, const Var<T>& x,
                      const Var<T>& prev) {
  require_pyramid_step(x, prev, "attention_gate");
  Var<T> theta =
      conv2d(x, g.param(prefix + ".theta.w"), g.param(prefix + ".theta.b"), 2, Padding::same);
  Var<T> phi =
      conv2d(prev, g.param(prefix + ".phi.w"), g.param(prefix + ".phi.b"), 1, Padding::same);
  Var<T> psi = conv2d(add(theta, phi), g.param(prefix + ".psi.w"), g.param(prefix + ".psi.b"), 1,
                      Padding::same);
  return conv_transpose2d(sigmoid(psi), g.param(prefix + ".omega.w"),
                          g.param(prefix + ".omega.b"), 2);
}

}  // namespace msrf
