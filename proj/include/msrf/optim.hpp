#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "msrf/autodiff.hpp"
#include "msrf/params.hpp"

namespace msrf {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr > 0.0)) throw ConfigError("learning rate must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
      throw ConfigError("Adam betas must lie in [0, 1)");
    }
    if (!(eps > 0.0)) throw ConfigError("Adam epsilon must be > 0");
  }
};

/// Adam with bias correction. Moments are created on the first step a
/// parameter receives a gradient; parameters without one are left untouched.
template <std::floating_point T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) { cfg_.validate(); }

  std::uint64_t step_count() const noexcept { return step_; }
  const AdamConfig& config() const noexcept { return cfg_; }

  void step(ParamStore<T>& params, const GradMap<T>& grads) {
    ++step_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (const auto& [name, g] : grads) {
      Tensor<T>& value = params.at(name);
      if (g.shape() != value.shape()) {
        throw ShapeError("adam: gradient for " + name + " has shape " + to_string(g.shape()));
      }
      auto it = moments_.try_emplace(name, Moments{Tensor<T>(g.shape()), Tensor<T>(g.shape())}).first;
      Moments& mo = it->second;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double m = cfg_.beta1 * static_cast<double>(mo.m[i]) + (1.0 - cfg_.beta1) * gi;
        const double v = cfg_.beta2 * static_cast<double>(mo.v[i]) + (1.0 - cfg_.beta2) * gi * gi;
        mo.m[i] = static_cast<T>(m);
        mo.v[i] = static_cast<T>(v);
        const double update = cfg_.lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
        value[i] = static_cast<T>(static_cast<double>(value[i]) - update);
      }
    }
  }

 private:
  struct Moments {
    Tensor<T> m, v;
  };
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace msrf
