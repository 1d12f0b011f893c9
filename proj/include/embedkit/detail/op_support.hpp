#pragma once

#include <initializer_list>

#include "embedkit/tensor.hpp"

namespace embedkit::detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

inline Tensor make_output(Shape shape, std::vector<double> values,
                          std::initializer_list<const Tensor*> inputs) {
  return Tensor(std::move(shape), std::move(values), any_requires_grad(inputs));
}

inline void record(std::vector<Tensor> inputs, const Tensor& output, BackwardFn fn) {
  if (Tape* tape = active_tape()) tape->record(std::move(inputs), output, std::move(fn));
}

// Gradient sink for an input, or empty when the input does not need one.
inline std::span<double> grad_sink(const Tensor& t) {
  if (!t.requires_grad()) return {};
  return t.node()->grad_buffer();
}

}  // namespace embedkit::detail
