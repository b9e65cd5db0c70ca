#pragma once

#include <optional>
#include <string>
#include <vector>

#include "msrf/ops.hpp"

namespace msrf {

inline constexpr double kBceEpsilon = 1e-7;

enum class LossMode { both, bce_only, dice_only };

inline LossMode parse_loss_mode(const std::string& s) {
  if (s == "both") return LossMode::both;
  if (s == "bce_only") return LossMode::bce_only;
  if (s == "dice_only") return LossMode::dice_only;
  throw ConfigError("unknown loss mode '" + s + "'");
}

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::both: return "both";
    case LossMode::bce_only: return "bce_only";
    case LossMode::dice_only: return "dice_only";
  }
  return "both";
}

/// lambda1/lambda2 weight BCE and Dice inside the combined loss; alpha,
/// beta1, beta2 and gamma weight the main, two deep-supervision and
/// shape-stream terms of the total.
struct LossWeights {
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double alpha = 1.0;
  double beta1 = 1.0;
  double beta2 = 1.0;
  double gamma = 1.0;
  LossMode mode = LossMode::both;

  void validate() const {
    for (double v : {lambda1, lambda2, alpha, beta1, beta2, gamma}) {
      if (!(v >= 0.0)) throw ConfigError("loss weights must be >= 0");
    }
  }
};

namespace detail {

template <class T>
void require_target(const Var<T>& yhat, const Tensor<T>& y, const char* what) {
  if (yhat.shape() != y.shape()) {
    throw ShapeError(std::string(what) + ": prediction " + to_string(yhat.shape()) +
                     " vs target " + to_string(y.shape()));
  }
}

}  // namespace detail

/// Mean binary cross-entropy with predictions clamped to [eps, 1 - eps].
template <class T>
Var<T> bce_loss(const Var<T>& yhat, const Tensor<T>& y) {
  detail::require_target(yhat, y, "bce_loss");
  const T eps = static_cast<T>(kBceEpsilon);
  const auto p = yhat.value().data();
  T acc{0};
  for (std::size_t i = 0; i < p.size(); ++i) {
    const T q = std::clamp(p[i], eps, T{1} - eps);
    acc += (y[i] - T{1}) * std::log(T{1} - q) - y[i] * std::log(q);
  }
  const T count = static_cast<T>(p.size());
  return yhat.tape->record("bce_loss", Tensor<T>({1}, acc / count), {yhat},
                           [yhat, y, eps, count](Tape<T>& tape, const Tensor<T>& g) {
                             Tensor<T>* d = tape.grad_sink(yhat);
                             if (!d) return;
                             const auto p = yhat.value().data();
                             for (std::size_t i = 0; i < p.size(); ++i) {
                               if (p[i] < eps || p[i] > T{1} - eps) continue;
                               (*d)[i] += g[0] * ((T{1} - y[i]) / (T{1} - p[i]) - y[i] / p[i]) / count;
                             }
                           });
}

/// 1 - (2 sum(y*yhat) + 1) / (sum(y) + sum(yhat) + 1), per batch element, averaged.
template <class T>
Var<T> dice_loss(const Var<T>& yhat, const Tensor<T>& y) {
  detail::require_target(yhat, y, "dice_loss");
  const std::size_t batch = yhat.dim(0);
  const std::size_t per = yhat.value().size() / batch;
  const auto p = yhat.value().data();
  std::vector<T> inter(batch, T{0}), total(batch, T{0});
  T acc{0};
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
      inter[b] += y[i] * p[i];
      total[b] += y[i] + p[i];
    }
    acc += T{1} - (T{2} * inter[b] + T{1}) / (total[b] + T{1});
  }
  return yhat.tape->record(
      "dice_loss", Tensor<T>({1}, acc / static_cast<T>(batch)), {yhat},
      [yhat, y, batch, per, inter, total](Tape<T>& tape, const Tensor<T>& g) {
        Tensor<T>* d = tape.grad_sink(yhat);
        if (!d) return;
        for (std::size_t b = 0; b < batch; ++b) {
          const T den = total[b] + T{1};
          const T num = T{2} * inter[b] + T{1};
          for (std::size_t i = b * per; i < (b + 1) * per; ++i) {
            (*d)[i] -= g[0] * (T{2} * y[i] * den - num) / (den * den) / static_cast<T>(batch);
          }
        }
      });
}

template <class T>
Var<T> combined_loss(const Var<T>& yhat, const Tensor<T>& y, const LossWeights& w) {
  switch (w.mode) {
    case LossMode::bce_only: return bce_loss(yhat, y);
    case LossMode::dice_only: return dice_loss(yhat, y);
    case LossMode::both: break;
  }
  return weighted_sum<T>({bce_loss(yhat, y), dice_loss(yhat, y)},
                         {static_cast<T>(w.lambda1), static_cast<T>(w.lambda2)});
}

template <class T>
struct LossBreakdown {
  Var<T> total;
  T main{0};
  std::optional<T> ds0, ds1, shape;
};

/// alpha*L(pred) + beta1*L(ds0) + beta2*L(ds1) + gamma*BCE(edge). Absent
/// heads (deep supervision or shape stream disabled) drop their term.
template <class T>
LossBreakdown<T> total_loss(const Var<T>& pred, const std::optional<Var<T>>& ds0,
                            const std::optional<Var<T>>& ds1, const std::optional<Var<T>>& edge,
                            const Tensor<T>& y, const Tensor<T>& y_edge, const LossWeights& w) {
  w.validate();
  LossBreakdown<T> out;
  std::vector<Var<T>> terms{combined_loss(pred, y, w)};
  std::vector<T> weights{static_cast<T>(w.alpha)};
  out.main = terms.back().value()[0];
  if (ds0) {
    terms.push_back(combined_loss(*ds0, y, w));
    weights.push_back(static_cast<T>(w.beta1));
    out.ds0 = terms.back().value()[0];
  }
  if (ds1) {
    terms.push_back(combined_loss(*ds1, y, w));
    weights.push_back(static_cast<T>(w.beta2));
    out.ds1 = terms.back().value()[0];
  }
  if (edge) {
    terms.push_back(bce_loss(*edge, y_edge));
    weights.push_back(static_cast<T>(w.gamma));
    out.shape = terms.back().value()[0];
  }
  out.total = weighted_sum(terms, weights);
  return out;
}

}  // namespace msrf
