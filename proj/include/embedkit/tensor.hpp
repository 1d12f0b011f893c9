#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "embedkit/error.hpp"

namespace embedkit {

using Index = std::int64_t;
using Shape = std::vector<Index>;

using RowMatrixXd = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrixXd>;
using ConstMatrixMap = Eigen::Map<const RowMatrixXd>;

Index shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class TapeState;

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;

  // Set when the tensor is the output of an op recorded on a tape.
  std::weak_ptr<TapeState> producer;
  std::size_t producer_entry = 0;
  bool has_producer = false;

  std::span<double> grad_buffer();
};

}  // namespace detail

/// Handle to a dense row-major float64 array with an optional gradient slot.
///
/// Copies share storage; use `clone()` for an independent copy. Ops recorded
/// while a `TapeScope` is active can be differentiated with `backward`.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor from_matrix(const Eigen::Ref<const RowMatrixXd>& m, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index rank() const { return static_cast<Index>(node_->shape.size()); }
  // Negative axes count from the back.
  Index dim(Index axis) const;
  Index numel() const { return static_cast<Index>(node_->values.size()); }

  std::span<const double> values() const { return node_->values; }
  std::span<double> mutable_values() { return node_->values; }
  double operator[](Index i) const { return node_->values[static_cast<std::size_t>(i)]; }
  double item() const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  /// Rank-2 view of the values; rank-1 tensors read as a single row.
  ConstMatrixMap matrix() const;
  MatrixMap mutable_matrix();
  RowMatrixXd grad_matrix() const;

  Tensor clone() const;    // deep copy, keeps requires_grad, drops grad
  Tensor detach() const;   // deep copy without grad tracking

  bool same_node(const Tensor& other) const noexcept { return node_ == other.node_; }
  const std::shared_ptr<detail::TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend class Tape;
};

// Receives the output gradient; accumulates into input gradients.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

class TapeState {
 public:
  struct Entry {
    std::vector<std::shared_ptr<detail::TensorNode>> inputs;
    std::shared_ptr<detail::TensorNode> output;
    BackwardFn backward;
  };
  std::vector<Entry> entries;
};

/// Ordered record of executed ops. Backward replays it in reverse.
class Tape {
 public:
  Tape() : state_(std::make_shared<TapeState>()) {}

  void record(std::vector<Tensor> inputs, const Tensor& output, BackwardFn backward);
  std::size_t size() const { return state_->entries.size(); }

 private:
  std::shared_ptr<TapeState> state_;
};

/// Makes `tape` the active tape of the current thread for its lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
/// calls; intermediate gradients are recomputed on every call.
void backward(const Tensor& loss);

/// Named tensor owned by a model. Non-trainable parameters are never touched
/// by an optimizer step.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

}  // namespace embedkit
