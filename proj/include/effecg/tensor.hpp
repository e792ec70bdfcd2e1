#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace effecg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Node;
}

/// Dense row-major array of doubles with an optional reverse-mode gradient.
///
/// A Tensor is a shared handle: copies alias the same storage, which is how
/// parameters are referenced from blocks and from the optimizer. Results of
/// operations on tensors that require gradients remember their inputs and an
/// adjoint rule; `backward` replays those rules in reverse order.
class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const&;
  /// A temporary handle may own the only reference to its storage.
  std::span<const double> values() const&& = delete;
  /// Writable view; only meaningful for leaves (parameters, inputs).
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat_index) const { return values()[flat_index]; }
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const;

  bool has_grad() const;
  /// Accumulated gradient; a zero tensor of this shape when nothing reached it.
  Tensor grad() const;
  void zero_grad();

  /// Deep copy of the values with no graph history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Adjoint rule. `input_grads[i]` is empty when input i does not need a
/// gradient; otherwise it is the accumulation buffer for that input.
using BackwardFn = std::function<void(std::span<const double> out_grad,
                                      std::span<const std::span<double>> input_grads)>;

/// Create the result of a differentiable operation. When no input requires a
/// gradient the result is a plain constant and `backward_fn` is dropped.
Tensor record_op(std::string name, Shape shape, std::vector<double> values,
                 std::vector<Tensor> inputs, BackwardFn backward_fn);

/// Reverse topological record of the operations reachable from a root.
class Tape {
 public:
  /// Walk the graph under `root`. Throws std::logic_error if any part of it
  /// has already been replayed.
  static Tape trace(const Tensor& root);

  std::size_t size() const { return order_.size(); }
  std::vector<std::string> op_names() const;

  /// Seed the root with 1 and run every adjoint in reverse execution order.
  /// Consumes the graph: interior nodes release their rules.
  void replay();

 private:
  std::shared_ptr<detail::Node> root_;
  std::vector<std::shared_ptr<detail::Node>> order_;
};

/// Populate gradients of every requires-grad leaf reachable from `loss`.
void backward(const Tensor& loss);

}  // namespace effecg
