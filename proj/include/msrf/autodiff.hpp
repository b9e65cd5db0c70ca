#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "msrf/tensor.hpp"

namespace msrf {

template <std::floating_point T>
class Tape;

/// Handle to a value recorded on a Tape.
template <std::floating_point T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return tape->value(*this).shape(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Parameter gradients keyed like the ParamStore.
template <std::floating_point T>
using GradMap = std::map<std::string, Tensor<T>>;

/// Reverse-mode tape. Records are appended in execution order, so every
/// record's inputs precede it and a single reverse sweep is a valid
/// topological traversal.
template <std::floating_point T>
class Tape {
 public:
  // Called once during backward with the record's accumulated output gradient.
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& grad_out)>;

  struct Record {
    std::string_view op;
    std::vector<std::size_t> inputs;
    Tensor<T> value;
    Tensor<T> grad;
    BackwardFn backward;
    bool requires_grad = false;
    std::string param;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return leaf("constant", std::move(value), false, {}); }

  /// A differentiable leaf that is not a named parameter (used to check input gradients).
  Var<T> variable(Tensor<T> value) { return leaf("variable", std::move(value), true, {}); }

  Var<T> parameter(std::string name, Tensor<T> value) {
    return leaf("parameter", std::move(value), true, std::move(name));
  }

  /// Appends an operation. The backward closure is dropped when no input needs a gradient.
  Var<T> record(std::string_view op, Tensor<T> value, std::initializer_list<Var<T>> inputs,
                BackwardFn backward) {
    return record(op, std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
  }

  Var<T> record(std::string_view op, Tensor<T> value, const std::vector<Var<T>>& inputs,
                BackwardFn backward) {
    Record r;
    r.op = op;
    r.value = std::move(value);
    for (const auto& v : inputs) {
      if (v.tape != this) throw UsageError(std::string(op) + ": inputs recorded on another tape");
      r.inputs.push_back(v.id);
      r.requires_grad = r.requires_grad || records_[v.id].requires_grad;
    }
    if (r.requires_grad) r.backward = std::move(backward);
    records_.push_back(std::move(r));
    return Var<T>{this, records_.size() - 1};
  }

  const Tensor<T>& value(Var<T> v) const { return records_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return records_.at(v.id).requires_grad; }
  std::string_view op(Var<T> v) const { return records_.at(v.id).op; }
  std::size_t size() const noexcept { return records_.size(); }

  /// Gradient buffer of an input, zero-initialised on first use; null when
  /// the input does not require a gradient.
  Tensor<T>* grad_sink(Var<T> v) {
    Record& r = records_.at(v.id);
    if (!r.requires_grad) return nullptr;
    if (r.grad.empty()) r.grad = Tensor<T>(r.value.shape());
    return &r.grad;
  }

  /// Gradient of the last backward pass w.r.t. a leaf (empty if unreached).
  const Tensor<T>& grad(Var<T> v) const { return records_.at(v.id).grad; }

  /// Reverse sweep from a scalar. Returns gradients of every named
  /// parameter reachable from the loss.
  GradMap<T> backward(Var<T> loss) {
    if (loss.tape != this) throw UsageError("backward: loss recorded on another tape");
    const Tensor<T>& lv = records_.at(loss.id).value;
    if (lv.size() != 1) {
      throw UsageError("backward: loss must be scalar, got shape " + to_string(lv.shape()));
    }
    for (auto& r : records_) r.grad = Tensor<T>();
    GradMap<T> out;
    if (!records_[loss.id].requires_grad) return out;
    records_[loss.id].grad = Tensor<T>(lv.shape(), T{1});
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Record& r = records_[i];
      if (r.grad.empty()) continue;
      if (!r.param.empty()) {
        out.emplace(r.param, r.grad);
        continue;
      }
      if (r.backward) {
        Tensor<T> g = std::move(r.grad);
        r.backward(*this, g);
      }
    }
    return out;
  }

 private:
  Var<T> leaf(std::string_view op, Tensor<T> value, bool requires_grad, std::string param) {
    Record r;
    r.op = op;
    r.value = std::move(value);
    r.requires_grad = requires_grad;
    r.param = std::move(param);
    records_.push_back(std::move(r));
    return Var<T>{this, records_.size() - 1};
  }

  std::vector<Record> records_;
};

}  // namespace msrf
