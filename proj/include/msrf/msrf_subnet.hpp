#pragma once

#include <array>
#include <string>
#include <vector>

#include "msrf/dsdf.hpp"

namespace msrf {

inline constexpr std::size_t kScales = 4;

using ScaleWidths = std::array<std::size_t, kScales>;

/// One DSDF block inside a sub-network layer; scales are 1-based.
struct DsdfSlot {
  std::size_t high = 1;
  std::size_t low = 2;
  std::size_t k = 16;
};

struct MsrfLayer {
  std::size_t index = 1;  // 1-based position in the full wiring, kept stable under ablation
  std::vector<DsdfSlot> blocks;
};

enum class SubnetVariant { full, no_subnet, subset, no_cross_23, no_scaling };

inline SubnetVariant parse_subnet_variant(const std::string& s) {
  if (s == "full") return SubnetVariant::full;
  if (s == "no_subnet") return SubnetVariant::no_subnet;
  if (s == "subset") return SubnetVariant::subset;
  if (s == "no_cross_23") return SubnetVariant::no_cross_23;
  if (s == "no_scaling") return SubnetVariant::no_scaling;
  throw ConfigError("unknown sub-network variant '" + s + "'");
}

inline std::string to_string(SubnetVariant v) {
  switch (v) {
    case SubnetVariant::full: return "full";
    case SubnetVariant::no_subnet: return "no_subnet";
    case SubnetVariant::subset: return "subset";
    case SubnetVariant::no_cross_23: return "no_cross_23";
    case SubnetVariant::no_scaling: return "no_scaling";
  }
  return "full";
}

/// Layer-by-layer arrangement of DSDF blocks over the four scales.
struct MsrfWiring {
  std::vector<MsrfLayer> layers;
  double w = 0.4;
  bool scaled = true;   // false: residual adds without multiplying by w
  bool enabled = true;  // false: the sub-network is bypassed

  /// Outer pairs (1,2) and (3,4) on layers 1, 2, 4, 6, ...; the middle pair
  /// (2,3) on odd layers from 3 on. The last layer is always an outer layer.
  /// growth = {k for (1,2), k for (2,3), k for (3,4)}.
  static MsrfWiring standard(std::size_t n_layers = 6, std::array<std::size_t, 3> growth = {16, 32, 64},
                             double w = 0.4) {
    if (n_layers < 1) throw ConfigError("msrf: need at least one layer");
    MsrfWiring out;
    out.w = w;
    for (std::size_t l = 1; l <= n_layers; ++l) {
      MsrfLayer layer{l, {}};
      const bool middle = l >= 3 && l % 2 == 1 && l < n_layers;
      if (middle) {
        layer.blocks.push_back({2, 3, growth[1]});
      } else {
        layer.blocks.push_back({1, 2, growth[0]});
        layer.blocks.push_back({3, 4, growth[2]});
      }
      out.layers.push_back(std::move(layer));
    }
    return out;
  }

  /// The first n layers only.
  MsrfWiring truncated(std::size_t n) const {
    MsrfWiring out = *this;
    if (n < out.layers.size()) out.layers.resize(n);
    return out;
  }

  void validate() const {
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("msrf: residual scale w must lie in [0, 1]");
    for (const auto& layer : layers) {
      std::array<bool, kScales + 1> used{};
      for (const auto& b : layer.blocks) {
        if (b.high < 1 || b.low > kScales || b.low != b.high + 1) {
          throw ConfigError("msrf layer " + std::to_string(layer.index) +
                            ": block must pair adjacent scales in 1..4");
        }
        if (used[b.high] || used[b.low]) {
          throw ConfigError("msrf layer " + std::to_string(layer.index) +
                            ": scale used by two blocks in one layer");
        }
        used[b.high] = used[b.low] = true;
        if (b.k < 1) throw ConfigError("msrf: growth factor must be >= 1");
      }
    }
  }
};

inline MsrfWiring msrf_ablation_variant(const MsrfWiring& wiring, SubnetVariant variant) {
  MsrfWiring out = wiring;
  switch (variant) {
    case SubnetVariant::full:
      break;
    case SubnetVariant::no_subnet:
      out.enabled = false;
      out.layers.clear();
      break;
    case SubnetVariant::subset:
      out = out.truncated(3);
      break;
    case SubnetVariant::no_cross_23: {
      std::vector<MsrfLayer> kept;
      for (const auto& l : out.layers) {
        if (!(l.blocks.size() == 1 && l.blocks[0].high == 2)) kept.push_back(l);
      }
      out.layers = std::move(kept);
      break;
    }
    case SubnetVariant::no_scaling:
      out.scaled = false;
      break;
  }
  return out;
}

inline std::string msrf_block_prefix(const MsrfLayer& layer, const DsdfSlot& slot) {
  return "msrf.l" + std::to_string(layer.index) + ".p" + std::to_string(slot.high) +
         std::to_string(slot.low);
}

inline DsdfConfig msrf_block_config(const MsrfWiring& wiring, const DsdfSlot& slot,
                                    const ScaleWidths& widths) {
  return DsdfConfig{widths[slot.high - 1], widths[slot.low - 1], slot.k, wiring.w};
}

inline ParamSpecs msrf_param_shapes(const MsrfWiring& wiring, const ScaleWidths& widths) {
  wiring.validate();
  ParamSpecs specs;
  if (!wiring.enabled) return specs;
  for (const auto& layer : wiring.layers) {
    for (const auto& slot : layer.blocks) {
      auto block = dsdf_param_shapes(msrf_block_config(wiring, slot, widths),
                                     msrf_block_prefix(layer, slot));
      specs.insert(specs.end(), block.begin(), block.end());
    }
  }
  return specs;
}

template <class T>
using ScaleVars = std::array<Var<T>, kScales>;

template <class T>
void require_pyramid(const ScaleVars<T>& x, const char* what) {
  for (std::size_t i = 0; i < kScales; ++i) require_rank(x[i].shape(), 4, what);
  for (std::size_t i = 0; i + 1 < kScales; ++i) {
    const auto& hi = x[i].shape();
    const auto& lo = x[i + 1].shape();
    if (hi[0] != lo[0] || hi[2] != 2 * lo[2] || hi[3] != 2 * lo[3]) {
      throw ShapeError(std::string(what) + ": scale " + std::to_string(i + 2) + " " +
                       to_string(lo) + " is not half of scale " + std::to_string(i + 1) + " " +
                       to_string(hi));
    }
  }
}

/// Applies the wired DSDF blocks layer by layer, then adds the scaled final
/// state to the sub-network's own inputs.
template <class T>
ScaleVars<T> msrf_forward(Graph<T>& g, const ScaleVars<T>& x, const MsrfWiring& wiring, T slope) {
  require_pyramid(x, "msrf sub-network");
  wiring.validate();
  if (!wiring.enabled) return x;
  ScaleWidths widths{};
  for (std::size_t i = 0; i < kScales; ++i) widths[i] = x[i].dim(1);
  const T w = wiring.scaled ? static_cast<T>(wiring.w) : T{1};

  ScaleVars<T> state = x;
  for (const auto& layer : wiring.layers) {
    for (const auto& slot : layer.blocks) {
      const auto out = dsdf_forward(g, msrf_block_prefix(layer, slot), state[slot.high - 1],
                                    state[slot.low - 1], msrf_block_config(wiring, slot, widths),
                                    slope, w);
      state[slot.high - 1] = out.high;
      state[slot.low - 1] = out.low;
    }
  }
  ScaleVars<T> result = x;
  for (std::size_t i = 0; i < kScales; ++i) result[i] = add_scaled(x[i], state[i], w);
  return result;
}

}  // namespace msrf
