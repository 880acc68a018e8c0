#pragma once

// Dense float64 tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a graph node. Ops create new nodes that
// remember their inputs and a local gradient rule; backward() visits every
// node reachable from a scalar root in reverse creation order. Node ids are
// drawn from a process-wide monotone counter, so an input always has a
// smaller id than any node computed from it.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace fsl {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  std::uint64_t id = 0;
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  // Lazily sized gradient buffer.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> values);
  static Tensor parameter(Shape shape, std::vector<double> values);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value);
  static Tensor scalar(double value);

  // Result node of an op. When gradient recording is off or no input needs a
  // gradient, the rule and inputs are dropped.
  static Tensor from_op(const char* op, Shape shape, std::vector<double> values,
                        std::vector<Tensor> inputs, BackwardFn rule);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  std::uint64_t id() const;
  bool requires_grad() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  double item() const;

  void zero_grad();
  // Fresh leaf holding a copy of the values; no gradient path back.
  Tensor detach() const;
  // Deep copy that keeps the requires_grad flag (for parameter snapshots).
  Tensor clone() const;

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

// Operation records reachable from a root, in topological (creation) order.
struct GraphRecord {
  std::uint64_t id;
  const char* op;
  Shape shape;
  std::vector<std::uint64_t> inputs;
};
using Graph = std::vector<GraphRecord>;

Graph trace(const Tensor& root);

// Accumulates d(root)/d(node) into the grad of every reachable node that
// requires a gradient. Intermediate grads are reset first, so calling it
// twice accumulates twice into leaves only.
void backward(const Tensor& root);

bool grad_enabled();

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

}  // namespace fsl
