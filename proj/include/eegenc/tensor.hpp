// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major double tensors with reverse-mode autodiff.
//
// Operations record themselves on the thread's active Tape (see TapeScope)
// whenever at least one input requires a gradient. With no active tape every
// op is a plain value computation, which is how inference runs.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace eegenc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
struct TapeState;
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  // Size of an axis; negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct write access for parameter initialisation and optimizer updates.
  // Never call this on a tensor that is part of a live tape.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  // Allocates an all-zero gradient buffer (so the gradient is present).
  void zero_grad();
  // Drops the gradient buffer (so the gradient is absent).
  void clear_grad();

  // A copy that is disconnected from any tape and does not require grad.
  Tensor detach() const;
  // Deep copy of values and the requires_grad flag; no gradient.
  Tensor clone() const;

  // Identity comparison: both handles refer to the same node.
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor record_op(const char*, Shape, std::vector<double>, std::vector<Tensor>,
                          std::function<void(std::span<const double>, std::span<const std::span<double>>)>);
};

// Records the operations of one forward pass, in creation order.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const;
  bool consumed() const;

  // Reverse sweep from a scalar loss recorded on this tape. Leaf gradients
  // accumulate additively; the tape cannot be replayed afterwards.
  void backward(const Tensor& loss);

 private:
  std::shared_ptr<detail::TapeState> state_;
  friend class TapeScope;
};

// Makes a tape the active recorder for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  std::shared_ptr<detail::TapeState> previous_;
};

// Suspends recording for the current thread (inference inside a training step).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  std::shared_ptr<detail::TapeState> previous_;
};

bool recording_active();

// Runs the backward pass on the tape that recorded `loss`.
void backward(const Tensor& loss);

// Backward callback: grad_out has the output's shape; grad_in[i] is the
// accumulation buffer for input i, or empty when input i needs no gradient.
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<const std::span<double>> grad_in)>;

// Builds an op result. When recording is active and some input requires a
// gradient the result is linked into the tape with `backward`; otherwise the
// result is a constant.
Tensor record_op(const char* name, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
                 BackwardFn backward);

// Opt-in NaN/Inf detection on every op output.
void set_debug_checks(bool enabled);
bool debug_checks();

}  // namespace eegenc
