#include "embedkit/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace embedkit {

namespace {
thread_local Tape* g_active_tape = nullptr;

void check_shape(const Shape& shape) {
  for (Index extent : shape) {
    if (extent < 1) {
      throw Error(Errc::ShapeMismatch, "tensor extents must be >= 1, got " + shape_str(shape));
    }
  }
}
}  // namespace

Index shape_numel(const Shape& shape) {
  Index n = 1;
  for (Index extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::span<double> detail::TensorNode::grad_buffer() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<detail::TensorNode>()) {
  check_shape(shape);
  node_->values.assign(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::TensorNode>()) {
  check_shape(shape);
  if (static_cast<Index>(values.size()) != shape_numel(shape)) {
    throw Error(Errc::ShapeMismatch, "value count " + std::to_string(values.size()) +
                                         " does not match shape " + shape_str(shape));
  }
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.node_->values.begin(), t.node_->values.end(), value);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

Tensor Tensor::from_matrix(const Eigen::Ref<const RowMatrixXd>& m, bool requires_grad) {
  Tensor t({m.rows(), m.cols()}, requires_grad);
  t.mutable_matrix() = m;
  return t;
}

Index Tensor::dim(Index axis) const {
  const Index r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw Error(Errc::ShapeMismatch, "axis out of range for shape " + shape_str(shape()));
  }
  return node_->shape[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (numel() != 1) throw Error(Errc::NotScalar, "item() on shape " + shape_str(shape()));
  return node_->values[0];
}

ConstMatrixMap Tensor::matrix() const {
  if (rank() == 1) return ConstMatrixMap(node_->values.data(), 1, dim(0));
  if (rank() != 2) throw Error(Errc::ShapeMismatch, "matrix() needs rank <= 2, got " + shape_str(shape()));
  return ConstMatrixMap(node_->values.data(), dim(0), dim(1));
}

MatrixMap Tensor::mutable_matrix() {
  if (rank() == 1) return MatrixMap(node_->values.data(), 1, dim(0));
  if (rank() != 2) throw Error(Errc::ShapeMismatch, "matrix() needs rank <= 2, got " + shape_str(shape()));
  return MatrixMap(node_->values.data(), dim(0), dim(1));
}

RowMatrixXd Tensor::grad_matrix() const {
  const Index rows = rank() == 1 ? 1 : dim(0);
  const Index cols = numel() / rows;
  if (!has_grad()) return RowMatrixXd::Zero(rows, cols);
  return ConstMatrixMap(node_->grad.data(), rows, cols);
}

Tensor Tensor::clone() const {
  return Tensor(node_->shape, node_->values, node_->requires_grad);
}

Tensor Tensor::detach() const {
  return Tensor(node_->shape, node_->values, false);
}

void Tape::record(std::vector<Tensor> inputs, const Tensor& output, BackwardFn backward) {
  TapeState::Entry entry;
  entry.inputs.reserve(inputs.size());
  for (auto& t : inputs) entry.inputs.push_back(t.node_);
  entry.output = output.node_;
  entry.backward = std::move(backward);
  output.node_->producer = state_;
  output.node_->producer_entry = state_->entries.size();
  output.node_->has_producer = true;
  state_->entries.push_back(std::move(entry));
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() noexcept { return g_active_tape; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw Error(Errc::NotScalar, "backward() needs a scalar loss");
  }
  const auto& loss_node = loss.node();
  if (!loss_node->has_producer) {
    throw Error(Errc::NoTape, "loss was not produced under an active tape");
  }
  auto state = loss_node->producer.lock();
  if (!state) throw Error(Errc::NoTape, "the tape that produced the loss no longer exists");

  const std::size_t last = loss_node->producer_entry;
  auto& entries = state->entries;
  for (std::size_t i = 0; i <= last; ++i) entries[i].output->grad.clear();
  if (!loss_node->requires_grad) return;

  loss_node->grad.assign(1, 1.0);
  for (std::size_t i = last + 1; i-- > 0;) {
    auto& entry = entries[i];
    if (!entry.output->requires_grad || entry.output->grad.empty()) continue;
    entry.backward(entry.output->grad);
  }
}

}  // namespace embedkit
