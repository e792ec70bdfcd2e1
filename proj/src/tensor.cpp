#include "effecg/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace effecg {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool grad_ready = false;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (!grad_ready) {
      grad.assign(value.size(), 0.0);
      grad_ready = true;
    }
    return grad;
  }
};

}  // namespace detail

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor() : Tensor(Shape{}, 0.0) {}

Tensor::Tensor(Shape shape, double fill) : node_(std::make_shared<detail::Node>()) {
  node_->value.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor shape " + shape_str(shape) + " holds " +
                                std::to_string(shape_numel(shape)) + " values, got " +
                                std::to_string(values.size()));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

Tensor Tensor::vector(std::vector<double> values) {
  Shape s{values.size()};
  return Tensor(std::move(s), std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t m = rows.size();
  const std::size_t n = m ? rows.begin()->size() : 0;
  std::vector<double> v;
  v.reserve(m * n);
  for (const auto& r : rows) {
    if (r.size() != n) throw std::invalid_argument("ragged matrix literal");
    v.insert(v.end(), r.begin(), r.end());
  }
  return Tensor(Shape{m, n}, std::move(v));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= node_->shape.size()) {
    throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " +
                            shape_str(node_->shape));
  }
  return node_->shape[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::values() const& { return node_->value; }

std::span<double> Tensor::mutable_values() { return node_->value; }

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw std::invalid_argument("index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s[axis]) throw std::out_of_range("tensor index out of range");
    flat = flat * s[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_->leaf) throw std::logic_error("requires_grad can only be set on leaf tensors");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::is_leaf() const { return node_->leaf; }

bool Tensor::has_grad() const { return node_->grad_ready; }

Tensor Tensor::grad() const {
  if (!node_->grad_ready) return Tensor::zeros(node_->shape);
  return Tensor(node_->shape, node_->grad);
}

void Tensor::zero_grad() {
  node_->grad.clear();
  node_->grad_ready = false;
}

Tensor Tensor::detach() const { return Tensor(node_->shape, node_->value); }

Tensor record_op(std::string name, Shape shape, std::vector<double> values,
                 std::vector<Tensor> inputs, BackwardFn backward_fn) {
  Tensor out(std::move(shape), std::move(values));
  auto& node = *out.node();
  node.op = std::move(name);
  node.leaf = false;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;

  node.requires_grad = true;
  for (const auto& in : inputs) node.parents.push_back(in.node());
  node.backward = [fn = std::move(backward_fn)](detail::Node& self) {
    std::vector<std::span<double>> slots;
    slots.reserve(self.parents.size());
    for (auto& p : self.parents) {
      if (p->requires_grad) {
        slots.emplace_back(p->grad_buffer());
      } else {
        slots.emplace_back();
      }
    }
    fn(self.grad, slots);
  };
  return out;
}

Tape Tape::trace(const Tensor& root) {
  Tape tape;
  tape.root_ = root.node();
  if (root.node()->consumed) {
    throw std::logic_error("backward already ran on this graph; run a new forward pass");
  }
  // Iterative post-order DFS; `order_` ends up inputs-before-outputs.
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  if (root.requires_grad()) stack.emplace_back(root.node(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto parent = node->parents[next++];
      if (parent->requires_grad && !seen.count(parent.get())) {
        if (parent->consumed) {
          throw std::logic_error("graph contains a node consumed by an earlier backward pass");
        }
        seen.insert(parent.get());
        stack.emplace_back(parent, 0);
      }
    } else {
      tape.order_.push_back(node);
      stack.pop_back();
    }
  }
  return tape;
}

std::vector<std::string> Tape::op_names() const {
  std::vector<std::string> names;
  names.reserve(order_.size());
  for (const auto& n : order_) names.push_back(n->op);
  return names;
}

void Tape::replay() {
  if (!root_ || order_.empty()) return;
  if (root_->consumed) {
    throw std::logic_error("backward already ran on this graph; run a new forward pass");
  }
  auto& g = root_->grad_buffer();
  for (auto& v : g) v += 1.0;
  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    auto& node = **it;
    if (node.leaf || !node.backward || !node.grad_ready) continue;
    node.backward(node);
  }
  for (auto& n : order_) {
    if (n->leaf) continue;
    n->backward = nullptr;
    n->parents.clear();
    n->grad.clear();
    n->grad.shrink_to_fit();
    n->grad_ready = false;
    n->consumed = true;
  }
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward needs a scalar loss, got shape " +
                                shape_str(loss.shape()));
  }
  auto tape = Tape::trace(loss);
  tape.replay();
}

}  // namespace effecg
