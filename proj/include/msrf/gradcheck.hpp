#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "msrf/autodiff.hpp"
#include "msrf/ops.hpp"
#include "msrf/params.hpp"
#include "msrf/random.hpp"

namespace msrf {

inline constexpr double kGradcheckStep = 1e-5;

/// |analytic - numeric| / max(1, |numeric|)
inline double gradcheck_error(double analytic, double numeric) {
  return std::fabs(analytic - numeric) / std::max(1.0, std::fabs(numeric));
}

struct GradcheckEntry {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 1e-4;

  const GradcheckEntry* worst() const {
    const GradcheckEntry* w = nullptr;
    for (const auto& e : entries) {
      if (!w || e.error > w->error || std::isnan(e.error)) w = &e;
    }
    return w;
  }
  double worst_error() const {
    const auto* w = worst();
    return w ? w->error : 0.0;
  }
  bool passed() const {
    if (entries.empty()) return false;
    for (const auto& e : entries) {
      if (!(e.error <= tolerance)) return false;
    }
    return true;
  }
};

/// Compares analytic gradients of a scalar loss over named parameters with
/// central differences at `samples` sampled coordinates. Each sample picks a
/// tensor uniformly, then an element in it, so small tensors get covered too.
/// `loss` must be a pure function of the store.
inline GradcheckReport gradcheck_params(ParamStore<double> params,
                                        const std::function<double(const ParamStore<double>&)>& loss,
                                        const GradMap<double>& analytic, std::size_t samples,
                                        double tolerance, std::uint64_t seed,
                                        double h = kGradcheckStep) {
  if (samples < 1) throw UsageError("gradcheck: need at least one sample");
  std::vector<std::string> names;
  for (const auto& [name, _] : params) names.push_back(name);
  if (names.empty()) throw UsageError("gradcheck: no parameters");
  Rng rng(derive_seed(seed, "gradcheck"));
  GradcheckReport report;
  report.tolerance = tolerance;
  for (std::size_t s = 0; s < samples; ++s) {
    const std::string& name = names[rng.below(names.size())];
    Tensor<double>& t = params.at(name);
    const std::size_t i = rng.below(t.size());
    const double saved = t[i];
    t[i] = saved + h;
    const double up = loss(params);
    t[i] = saved - h;
    const double down = loss(params);
    t[i] = saved;
    GradcheckEntry e;
    e.name = name;
    e.index = i;
    e.numeric = (up - down) / (2.0 * h);
    auto it = analytic.find(name);
    e.analytic = it == analytic.end() ? 0.0 : it->second[i];
    e.error = gradcheck_error(e.analytic, e.numeric);
    report.entries.push_back(std::move(e));
  }
  return report;
}

/// Builds `fn(tape, inputs)` for differentiable inputs and reduces its output
/// to a scalar with a fixed random projection, then checks every input
/// coordinate against central differences.
template <class Fn>
GradcheckReport gradcheck_op(Fn&& fn, const std::vector<Tensor<double>>& inputs, std::uint64_t seed,
                             double tolerance = 1e-4, double h = kGradcheckStep) {
  Tensor<double> projection;
  auto build = [&](Tape<double>& tape, const std::vector<Tensor<double>>& values, bool grads,
                   std::vector<Var<double>>* leaves) {
    std::vector<Var<double>> vars;
    for (const auto& v : values) vars.push_back(grads ? tape.variable(v) : tape.constant(v));
    Var<double> out = fn(tape, vars);
    if (projection.empty()) {
      Rng rng(derive_seed(seed, "projection"));
      projection = Tensor<double>(out.shape());
      for (auto& p : projection.data()) p = rng.uniform(-1.0, 1.0);
    }
    if (leaves) *leaves = vars;
    return sum(hadamard(out, tape.constant(projection)));
  };

  Tape<double> tape;
  std::vector<Var<double>> leaves;
  Var<double> loss = build(tape, inputs, true, &leaves);
  tape.backward(loss);

  GradcheckReport report;
  report.tolerance = tolerance;
  std::vector<Tensor<double>> probe = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor<double> g = tape.grad(leaves[k]);
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double saved = probe[k][i];
      probe[k][i] = saved + h;
      Tape<double> up_tape;
      const double up = build(up_tape, probe, false, nullptr).value()[0];
      probe[k][i] = saved - h;
      Tape<double> down_tape;
      const double down = build(down_tape, probe, false, nullptr).value()[0];
      probe[k][i] = saved;
      GradcheckEntry e;
      e.name = "input" + std::to_string(k);
      e.index = i;
      e.numeric = (up - down) / (2.0 * h);
      e.analytic = g.empty() ? 0.0 : g[i];
      e.error = gradcheck_error(e.analytic, e.numeric);
      report.entries.push_back(std::move(e));
    }
  }
  return report;
}

}  // namespace msrf
