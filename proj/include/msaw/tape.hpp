#pragma once

#include <cmath>
#include <functional>
#include <initializer_list>
#include <string>
#include <utility>
#include <vector>

#include "msaw/errors.hpp"
#include "msaw/tensor.hpp"

namespace msaw {

/// Ordered record of the differentiable operations executed in one forward
/// pass. backward() replays the record in exact reverse order. A tape is
/// single-use: it is consumed by backward() and then discarded.
template <typename T>
class Tape {
 public:
  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  /// A tape that never records; forward ops run as pure functions.
  static Tape inference() { return Tape(false); }

  bool enabled() const noexcept { return enabled_; }
  std::size_t size() const noexcept { return entries_.size(); }

  /// True when an op over these inputs must be recorded.
  bool tracks(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!enabled_) return false;
    for (const Tensor<T>* t : inputs) {
      if (t && t->defined() && t->requires_grad()) return true;
    }
    return false;
  }

  void record(std::string op, std::vector<Tensor<T>> inputs, std::function<void()> backward) {
    if (consumed_) throw ContractError("tape already consumed by backward()");
    entries_.push_back(Entry{std::move(op), std::move(inputs), std::move(backward)});
  }

  const std::string& op_name(std::size_t i) const { return entries_.at(i).op; }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every recorded input.
  /// Leaves that were recorded but received no contribution end up with a
  /// zero gradient.
  void backward(Tensor<T> loss) {
    if (!loss.defined() || loss.size() != 1) {
      throw ContractError("backward() requires a scalar loss");
    }
    if (!std::isfinite(loss.item())) throw NumericError("loss is not finite");
    if (consumed_) throw ContractError("tape already consumed by backward()");
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.grad_buffer()[0] += T{1};
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
      it->backward();
      for (auto& input : it->inputs) {
        if (!input.requires_grad()) continue;
        if (!all_finite<T>(input.grad_buffer())) {
          throw NumericError("non-finite gradient produced by " + it->op);
        }
      }
    }
  }

 private:
  struct Entry {
    std::string op;
    std::vector<Tensor<T>> inputs;
    std::function<void()> backward;
  };

  bool enabled_;
  bool consumed_ = false;
  std::vector<Entry> entries_;
};

}  // namespace msaw
