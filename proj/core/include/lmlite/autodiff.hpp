// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace lmlite::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Thrown for any shape/arity violation while building or running a graph.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major float64 array.
struct Array {
  Shape shape;
  std::vector<double> data;

  Array() = default;
  explicit Array(Shape s, double fill = 0.0);
  Array(Shape s, std::vector<double> values);

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t axis) const { return shape.at(axis); }
  double item() const;

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // 2-D accessors, no bounds checks beyond debug asserts
  double& at(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  friend bool operator==(const Array&, const Array&) = default;
};

class Graph;

/// Handle to a node in a Graph. Cheap to copy.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Array& value() const;
  const Shape& shape() const;
  bool requires_grad() const;
};

/// Tape of operations. Ops evaluate eagerly when appended; forward() replays
/// every non-leaf node in order, which lets callers mutate leaves and
/// recompute without rebuilding. Nodes are appended in topological order by
/// construction.
class Graph {
 public:
  struct Node;

  // Per-op callbacks. Inputs are read through the graph so replay sees the
  // current leaf values.
  using ForwardFn = std::function<void(Graph&, Node&)>;
  using BackwardFn = std::function<void(Graph&, Node&)>;

  struct Node {
    std::string op;
    std::vector<std::size_t> inputs;
    Array value;
    Array grad;  // empty until backward touches it
    bool requires_grad = false;
    ForwardFn fwd;
    BackwardFn bwd;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Array value, bool requires_grad = false, std::string name = {});
  Var constant(Array value) { return leaf(std::move(value), false); }

  void set_value(Var leaf, Array value);

  /// Re-evaluates every op node. Returns the value of the last node.
  const Array& forward();
  /// Reverse sweep from a scalar root. Leaf gradients are reset first.
  void backward(Var root);

  const Array& value(Var v) const { return nodes_.at(v.id).value; }
  /// Gradient of the last backward root w.r.t. v, or nullptr if v does not
  /// require gradients.
  const Array* grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_.at(id); }

  // --- op-implementation helpers -------------------------------------------
  Var push(std::string op, std::vector<std::size_t> inputs, Shape out_shape,
           ForwardFn fwd, BackwardFn bwd);
  const Array& in(const Node& n, std::size_t k) const { return nodes_[n.inputs[k]].value; }
  // Gradient buffer for input k, zero-initialised on first use; nullptr when
  // that input does not need a gradient.
  Array* in_grad(const Node& n, std::size_t k);

  [[noreturn]] void fail(const std::string& op, const std::string& what) const;

 private:
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Primitive ops. Broadcasting is limited to a trailing-vector operand for
// add/multiply (bias and layer-norm affine).

Var matmul(Var a, Var b);  // [m,k]x[k,n] or batched [B,m,k]x[B,k,n]
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var multiply(Var a, Var b);
Var scale(Var a, double factor);
Var permute(Var a, std::vector<std::size_t> perm);
Var transpose(Var a);  // 2-D
Var reshape(Var a, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis = 0);
Var concat(std::initializer_list<Var> parts, std::size_t axis = 0);
Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
Var gather_rows(Var table, std::vector<std::size_t> rows);
Var sum(Var a);
Var mean(Var a);
Var sum(Var a, std::size_t axis);
Var mean(Var a, std::size_t axis);
Var softmax(Var a);      // over the last axis
Var log_softmax(Var a);  // over the last axis
Var log(Var a);
Var exp(Var a);
Var gelu(Var a);  // exact erf form
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6);
Var l2_normalize(Var x, double eps = 1e-12);  // rows of the last axis
Var pick(Var x, std::vector<std::size_t> cols);  // [n,c] -> [n], x[i, cols[i]]
Var smooth_l1(Var a, Var b, double beta = 1.0);  // elementwise

/// Softmax(q kᵀ / sqrt(dh)) v for q [h,n,dh], k,v [h,m,dh]. Composed from the
/// primitives above.
Var attention(Var q, Var k, Var v);

// ---------------------------------------------------------------------------

using ScalarFn = std::function<Var(Graph&, Var)>;

/// Max over coordinates of |analytic - numeric| / max(1e-8, |numeric|) using
/// central differences with step h.
double grad_check(const ScalarFn& f, const Array& x, double h = 1e-5);

}  // namespace lmlite::ad
