// SPDX-License-Identifier: Apache-2.0
#include "eegenc/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "eegenc/errors.hpp"

namespace eegenc {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;
  std::weak_ptr<TapeState> tape;

  void ensure_grad() {
    if (!has_grad) {
      grad.assign(data.size(), 0.0);
      has_grad = true;
    }
  }
};

struct TapeState {
  std::vector<std::shared_ptr<Node>> nodes;
  bool consumed = false;
};

}  // namespace detail

namespace {

thread_local std::shared_ptr<detail::TapeState> g_active_tape;
std::atomic<bool> g_debug_checks{false};

void check_finite(const char* op, const std::vector<double>& values) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// Reverse sweep over the recorded nodes, then release everything but leaf grads.
void run_backward(detail::TapeState& state, detail::Node& root) {
  root.ensure_grad();
  root.grad[0] += 1.0;

  std::vector<std::span<double>> grad_in;
  for (auto it = state.nodes.rbegin(); it != state.nodes.rend(); ++it) {
    detail::Node& node = **it;
    if (!node.has_grad || !node.backward) continue;
    grad_in.clear();
    for (const auto& input : node.inputs) {
      if (input->requires_grad) {
        input->ensure_grad();
        grad_in.emplace_back(input->grad);
      } else {
        grad_in.emplace_back();
      }
    }
    node.backward(node.grad, grad_in);
  }

  for (const auto& node : state.nodes) {
    node->grad.clear();
    node->grad.shrink_to_fit();
    node->has_grad = false;
    node->backward = nullptr;
    node->inputs.clear();
  }
  state.nodes.clear();
  state.consumed = true;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " + std::to_string(values.size()) +
                         " values");
  }
  node_ = std::make_shared<detail::Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw StateError("use of an undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return shape()[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) throw StateError("use of an undefined tensor");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw StateError("use of an undefined tensor");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (std::size_t i : index) {
    if (i >= s[axis]) throw DimensionError("index out of range for " + shape_str(s));
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!node_) throw StateError("use of an undefined tensor");
  if (!node_->is_leaf) throw StateError("requires_grad can only be changed on leaf tensors");
  node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return node_ && node_->has_grad; }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw StateError("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!has_grad()) throw StateError("tensor has no gradient");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) throw StateError("use of an undefined tensor");
  node_->grad.assign(node_->data.size(), 0.0);
  node_->has_grad = true;
}

void Tensor::clear_grad() {
  if (!node_) return;
  node_->grad.clear();
  node_->grad.shrink_to_fit();
  node_->has_grad = false;
}

Tensor Tensor::detach() const { return Tensor(shape(), node_->data, false); }

Tensor Tensor::clone() const { return Tensor(shape(), node_->data, node_->requires_grad); }

// ---------------------------------------------------------------------------

Tape::Tape() : state_(std::make_shared<detail::TapeState>()) {}
Tape::~Tape() = default;

std::size_t Tape::size() const { return state_->nodes.size(); }
bool Tape::consumed() const { return state_->consumed; }

void Tape::backward(const Tensor& loss) {
  if (state_->consumed) throw StateError("backward called on a consumed tape");
  if (!loss.defined()) throw ContractError("backward on an undefined tensor");
  if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  const auto& root = loss.node();
  if (root->is_leaf || root->tape.lock() != state_) {
    throw ContractError("loss was not recorded on this tape");
  }
  run_backward(*state_, *root);
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) {
  if (tape.state_->consumed) throw StateError("cannot record on a consumed tape");
  g_active_tape = tape.state_;
}

TapeScope::~TapeScope() { g_active_tape = previous_; }

NoGradScope::NoGradScope() : previous_(g_active_tape) { g_active_tape = nullptr; }
NoGradScope::~NoGradScope() { g_active_tape = previous_; }

bool recording_active() { return g_active_tape != nullptr; }

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on an undefined tensor");
  const auto& node = loss.node();
  if (node->is_leaf) throw ContractError("backward requires a loss produced under an active tape");
  auto state = node->tape.lock();
  if (!state) throw StateError("the tape that recorded this loss no longer exists");
  if (state->consumed) throw StateError("backward called on a consumed tape");
  if (loss.numel() != 1) throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  run_backward(*state, *node);
}

Tensor record_op(const char* name, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                 BackwardFn backward) {
  if (g_debug_checks.load(std::memory_order_relaxed)) check_finite(name, values);
  Tensor out(std::move(shape), std::move(values), false);
  auto& node = out.node_;
  node->op = name;

  if (!g_active_tape) return out;
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  if (g_active_tape->consumed) throw StateError("cannot record on a consumed tape");

  node->requires_grad = true;
  node->is_leaf = false;
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.node());
  node->backward = std::move(backward);
  node->tape = g_active_tape;
  g_active_tape->nodes.push_back(node);
  return out;
}

void set_debug_checks(bool enabled) { g_debug_checks.store(enabled, std::memory_order_relaxed); }
bool debug_checks() { return g_debug_checks.load(std::memory_order_relaxed); }

}  // namespace eegenc
