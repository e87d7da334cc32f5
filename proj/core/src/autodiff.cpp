// SPDX-License-Identifier: Apache-2.0
#include "lmlite/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <memory>
#include <cmath>
#include <numeric>
#include <sstream>

namespace lmlite::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

Graph& graph_of(Var a) {
  if (a.graph == nullptr) throw std::invalid_argument("Var is not attached to a graph");
  return *a.graph;
}

Graph& graph_of(Var a, Var b) {
  if (a.graph != b.graph) throw std::invalid_argument("Vars belong to different graphs");
  return graph_of(a);
}

std::size_t last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

// True when b is either the same shape as a or a vector matching a's last axis.
enum class Bcast { Same, Trailing };

Bcast check_broadcast(Graph& g, const std::string& op, const Shape& a, const Shape& b) {
  if (a == b) return Bcast::Same;
  if (b.size() == 1 && !a.empty() && a.back() == b[0]) return Bcast::Trailing;
  g.fail(op, "incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Array::Array(Shape s, double fill) : shape(std::move(s)), data(shape_numel(shape), fill) {}

Array::Array(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("Array: shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  }
}

double Array::item() const {
  if (data.size() != 1) throw ShapeError("Array::item on non-scalar " + shape_str(shape));
  return data[0];
}

const Array& Var::value() const { return graph->value(*this); }
const Shape& Var::shape() const { return graph->value(*this).shape; }
bool Var::requires_grad() const { return graph->node(id).requires_grad; }

// ---------------------------------------------------------------------------

Var Graph::leaf(Array value, bool requires_grad, std::string name) {
  Node n;
  n.op = name.empty() ? "leaf" : "leaf:" + name;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, nodes_.size() - 1};
}

void Graph::set_value(Var v, Array value) {
  Node& n = nodes_.at(v.id);
  if (n.fwd) throw std::invalid_argument("set_value on non-leaf node #" + std::to_string(v.id));
  if (value.shape != n.value.shape) fail(n.op, "set_value shape mismatch");
  n.value = std::move(value);
}

Var Graph::push(std::string op, std::vector<std::size_t> inputs, Shape out_shape, ForwardFn fwd,
                BackwardFn bwd) {
  Node n;
  n.op = std::move(op);
  n.inputs = std::move(inputs);
  n.value = Array(std::move(out_shape));
  for (std::size_t id : n.inputs) n.requires_grad = n.requires_grad || nodes_.at(id).requires_grad;
  n.fwd = std::move(fwd);
  n.bwd = std::move(bwd);
  nodes_.push_back(std::move(n));
  Node& ref = nodes_.back();
  ref.fwd(*this, ref);
  return Var{this, nodes_.size() - 1};
}

const Array& Graph::forward() {
  if (nodes_.empty()) throw std::logic_error("forward on empty graph");
  for (auto& n : nodes_) {
    if (n.fwd) n.fwd(*this, n);
  }
  return nodes_.back().value;
}

void Graph::backward(Var root) {
  Node& r = nodes_.at(root.id);
  if (r.value.size() != 1) {
    fail(r.op, "backward requires a scalar root, got " + shape_str(r.value.shape));
  }
  for (auto& n : nodes_) n.grad = Array();
  if (!r.requires_grad) return;
  r.grad = Array(r.value.shape, 1.0);
  for (std::size_t i = root.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || n.grad.data.empty() || !n.bwd) continue;
    n.bwd(*this, n);
  }
}

const Array* Graph::grad(Var v) const {
  const Node& n = nodes_.at(v.id);
  if (!n.requires_grad) return nullptr;
  return &n.grad;
}

Array* Graph::in_grad(const Node& n, std::size_t k) {
  Node& src = nodes_[n.inputs[k]];
  if (!src.requires_grad) return nullptr;
  if (src.grad.data.empty()) src.grad = Array(src.value.shape, 0.0);
  return &src.grad;
}

void Graph::fail(const std::string& op, const std::string& what) const {
  throw ShapeError("node #" + std::to_string(nodes_.size()) + " (" + op + "): " + what);
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  Graph& g = graph_of(a, b);
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  Shape out;
  if (sa.size() == 2 && sb.size() == 2) {
    if (sa[1] != sb[0]) g.fail("matmul", "inner dims differ: " + shape_str(sa) + " x " + shape_str(sb));
    out = {sa[0], sb[1]};
  } else if (sa.size() == 3 && sb.size() == 3) {
    if (sa[0] != sb[0] || sa[2] != sb[1]) {
      g.fail("matmul", "batched dims differ: " + shape_str(sa) + " x " + shape_str(sb));
    }
    out = {sa[0], sa[1], sb[2]};
  } else {
    g.fail("matmul", "expects 2-D or 3-D operands, got " + shape_str(sa) + " x " + shape_str(sb));
  }
  return g.push(
      "matmul", {a.id, b.id}, out,
      [](Graph& gr, Graph::Node& n) {
        const Array& A = gr.in(n, 0);
        const Array& B = gr.in(n, 1);
        const bool batched = A.rank() == 3;
        const std::size_t batches = batched ? A.dim(0) : 1;
        const auto m = static_cast<Eigen::Index>(A.shape[A.rank() - 2]);
        const auto k = static_cast<Eigen::Index>(A.shape.back());
        const auto nn = static_cast<Eigen::Index>(B.shape.back());
        for (std::size_t bi = 0; bi < batches; ++bi) {
          CMapMat ma(A.data.data() + bi * m * k, m, k);
          CMapMat mb(B.data.data() + bi * k * nn, k, nn);
          MapMat mc(n.value.data.data() + bi * m * nn, m, nn);
          mc.noalias() = ma * mb;
        }
      },
      [](Graph& gr, Graph::Node& n) {
        const Array& A = gr.in(n, 0);
        const Array& B = gr.in(n, 1);
        const bool batched = A.rank() == 3;
        const std::size_t batches = batched ? A.dim(0) : 1;
        const auto m = static_cast<Eigen::Index>(A.shape[A.rank() - 2]);
        const auto k = static_cast<Eigen::Index>(A.shape.back());
        const auto nn = static_cast<Eigen::Index>(B.shape.back());
        Array* ga = gr.in_grad(n, 0);
        Array* gb = gr.in_grad(n, 1);
        for (std::size_t bi = 0; bi < batches; ++bi) {
          CMapMat gc(n.grad.data.data() + bi * m * nn, m, nn);
          if (ga) {
            CMapMat mb(B.data.data() + bi * k * nn, k, nn);
            MapMat mga(ga->data.data() + bi * m * k, m, k);
            mga.noalias() += gc * mb.transpose();
          }
          if (gb) {
            CMapMat ma(A.data.data() + bi * m * k, m, k);
            MapMat mgb(gb->data.data() + bi * k * nn, k, nn);
            mgb.noalias() += ma.transpose() * gc;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

namespace {

Var binary_bcast(const std::string& op, Var a, Var b, bool is_mul) {
  Graph& g = graph_of(a, b);
  const Bcast mode = check_broadcast(g, op, a.shape(), b.shape());
  return g.push(
      op, {a.id, b.id}, a.shape(),
      [mode, is_mul](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        const auto& B = gr.in(n, 1).data;
        auto& C = n.value.data;
        const std::size_t w = mode == Bcast::Same ? A.size() : B.size();
        for (std::size_t i = 0; i < A.size(); ++i) {
          const double bv = B[mode == Bcast::Same ? i : i % w];
          C[i] = is_mul ? A[i] * bv : A[i] + bv;
        }
      },
      [mode, is_mul](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        const auto& B = gr.in(n, 1).data;
        const auto& G = n.grad.data;
        Array* ga = gr.in_grad(n, 0);
        Array* gb = gr.in_grad(n, 1);
        const std::size_t w = B.size();
        for (std::size_t i = 0; i < A.size(); ++i) {
          const std::size_t j = mode == Bcast::Same ? i : i % w;
          if (ga) ga->data[i] += is_mul ? G[i] * B[j] : G[i];
          if (gb) gb->data[j] += is_mul ? G[i] * A[i] : G[i];
        }
      });
}

}  // namespace

Var add(Var a, Var b) { return binary_bcast("add", a, b, false); }
Var multiply(Var a, Var b) { return binary_bcast("multiply", a, b, true); }
Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

Var scale(Var a, double factor) {
  Graph& g = graph_of(a);
  return g.push(
      "scale", {a.id}, a.shape(),
      [factor](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] = A[i] * factor;
      },
      [factor](Graph& gr, Graph::Node& n) {
        Array* ga = gr.in_grad(n, 0);
        for (std::size_t i = 0; i < n.grad.size(); ++i) ga->data[i] += n.grad.data[i] * factor;
      });
}

// ---------------------------------------------------------------------------
// Layout ops

Var permute(Var a, std::vector<std::size_t> perm) {
  Graph& g = graph_of(a);
  const Shape in = a.shape();
  if (perm.size() != in.size()) g.fail("permute", "perm rank differs from " + shape_str(in));
  std::vector<bool> seen(perm.size(), false);
  Shape out(in.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= in.size() || seen[perm[i]]) g.fail("permute", "invalid permutation");
    seen[perm[i]] = true;
    out[i] = in[perm[i]];
  }
  // Source offset for every destination element, computed once.
  std::vector<std::size_t> in_strides(in.size(), 1);
  for (std::size_t i = in.size(); i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  const std::size_t total = shape_numel(in);
  auto src = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(out.size(), 0);
  for (std::size_t flat = 0; flat < total; ++flat) {
    std::size_t off = 0;
    for (std::size_t d = 0; d < out.size(); ++d) off += idx[d] * in_strides[perm[d]];
    (*src)[flat] = off;
    for (std::size_t d = out.size(); d-- > 0;) {
      if (++idx[d] < out[d]) break;
      idx[d] = 0;
    }
  }
  return g.push(
      "permute", {a.id}, out,
      [src](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        for (std::size_t i = 0; i < src->size(); ++i) n.value.data[i] = A[(*src)[i]];
      },
      [src](Graph& gr, Graph::Node& n) {
        Array* ga = gr.in_grad(n, 0);
        for (std::size_t i = 0; i < src->size(); ++i) ga->data[(*src)[i]] += n.grad.data[i];
      });
}

Var transpose(Var a) {
  if (a.shape().size() != 2) graph_of(a).fail("transpose", "expects 2-D, got " + shape_str(a.shape()));
  return permute(a, {1, 0});
}

Var reshape(Var a, Shape shape) {
  Graph& g = graph_of(a);
  if (shape_numel(shape) != a.value().size()) {
    g.fail("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return g.push(
      "reshape", {a.id}, std::move(shape),
      [](Graph& gr, Graph::Node& n) { n.value.data = gr.in(n, 0).data; },
      [](Graph& gr, Graph::Node& n) {
        Array* ga = gr.in_grad(n, 0);
        for (std::size_t i = 0; i < n.grad.size(); ++i) ga->data[i] += n.grad.data[i];
      });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Graph& g = graph_of(parts[0]);
  const Shape first = parts[0].shape();
  if (axis >= first.size()) g.fail("concat", "axis out of range for " + shape_str(first));
  Shape out = first;
  out[axis] = 0;
  std::vector<std::size_t> ids;
  std::vector<std::size_t> widths;  // contiguous chunk per outer index
  for (const Var& p : parts) {
    graph_of(p, parts[0]);
    const Shape s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) g.fail("concat", "shape " + shape_str(s) + " incompatible with " + shape_str(first));
    out[axis] += s[axis];
    ids.push_back(p.id);
    std::size_t inner = 1;
    for (std::size_t d = axis; d < s.size(); ++d) inner *= s[d];
    widths.push_back(inner);
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  const std::size_t row = std::accumulate(widths.begin(), widths.end(), std::size_t{0});
  return g.push(
      "concat", std::move(ids), out,
      [outer, row, widths](Graph& gr, Graph::Node& n) {
        std::size_t col = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          const auto& src = gr.in(n, k).data;
          for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * widths[k]), widths[k],
                        n.value.data.begin() + static_cast<std::ptrdiff_t>(o * row + col));
          }
          col += widths[k];
        }
      },
      [outer, row, widths](Graph& gr, Graph::Node& n) {
        std::size_t col = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (Array* gk = gr.in_grad(n, k)) {
            for (std::size_t o = 0; o < outer; ++o) {
              for (std::size_t j = 0; j < widths[k]; ++j) {
                gk->data[o * widths[k] + j] += n.grad.data[o * row + col + j];
              }
            }
          }
          col += widths[k];
        }
      });
}

Var concat(std::initializer_list<Var> parts, std::size_t axis) {
  return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
  Graph& g = graph_of(a);
  const Shape s = a.shape();
  if (axis >= s.size() || begin > end || end > s[axis]) {
    g.fail("slice", "range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                        std::to_string(axis) + " of " + shape_str(s));
  }
  Shape out = s;
  out[axis] = end - begin;
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t src_row = s[axis] * inner;
  const std::size_t dst_row = (end - begin) * inner;
  const std::size_t offset = begin * inner;
  return g.push(
      "slice", {a.id}, out,
      [=](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        for (std::size_t o = 0; o < outer; ++o) {
          std::copy_n(A.begin() + static_cast<std::ptrdiff_t>(o * src_row + offset), dst_row,
                      n.value.data.begin() + static_cast<std::ptrdiff_t>(o * dst_row));
        }
      },
      [=](Graph& gr, Graph::Node& n) {
        Array* ga = gr.in_grad(n, 0);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < dst_row; ++j) ga->data[o * src_row + offset + j] += n.grad.data[o * dst_row + j];
        }
      });
}

Var gather_rows(Var table, std::vector<std::size_t> rows) {
  Graph& g = graph_of(table);
  const Shape s = table.shape();
  if (s.size() != 2) g.fail("gather_rows", "table must be 2-D, got " + shape_str(s));
  for (std::size_t r : rows) {
    if (r >= s[0]) g.fail("gather_rows", "row " + std::to_string(r) + " out of range " + shape_str(s));
  }
  const std::size_t w = s[1];
  Shape out{rows.size(), w};
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(rows));
  return g.push(
      "gather_rows", {table.id}, out,
      [idx, w](Graph& gr, Graph::Node& n) {
        const auto& T = gr.in(n, 0).data;
        for (std::size_t i = 0; i < idx->size(); ++i) {
          std::copy_n(T.begin() + static_cast<std::ptrdiff_t>((*idx)[i] * w), w,
                      n.value.data.begin() + static_cast<std::ptrdiff_t>(i * w));
        }
      },
      [idx, w](Graph& gr, Graph::Node& n) {
        Array* gt = gr.in_grad(n, 0);
        for (std::size_t i = 0; i < idx->size(); ++i) {
          for (std::size_t j = 0; j < w; ++j) gt->data[(*idx)[i] * w + j] += n.grad.data[i * w + j];
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

Var sum(Var a) {
  Graph& g = graph_of(a);
  return g.push(
      "sum", {a.id}, Shape{},
      [](Graph& gr, Graph::Node& n) {
        double acc = 0.0;
        for (double v : gr.in(n, 0).data) acc += v;
        n.value.data[0] = acc;
      },
      [](Graph& gr, Graph::Node& n) {
        Array* ga = gr.in_grad(n, 0);
        const double gv = n.grad.data[0];
        for (double& v : ga->data) v += gv;
      });
}

Var mean(Var a) {
  const std::size_t count = a.value().size();
  if (count == 0) graph_of(a).fail("mean", "empty input");
  return scale(sum(a), 1.0 / static_cast<double>(count));
}

Var sum(Var a, std::size_t axis) {
  Graph& g = graph_of(a);
  const Shape s = a.shape();
  if (axis >= s.size()) g.fail("sum", "axis out of range for " + shape_str(s));
  Shape out;
  for (std::size_t d = 0; d < s.size(); ++d) {
    if (d != axis) out.push_back(s[d]);
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t len = s[axis];
  return g.push(
      "sum_axis", {a.id}, out,
      [=](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        std::fill(n.value.data.begin(), n.value.data.end(), 0.0);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t l = 0; l < len; ++l) {
            for (std::size_t i = 0; i < inner; ++i) n.value.data[o * inner + i] += A[(o * len + l) * inner + i];
          }
        }
      },
      [=](Graph& gr, Graph::Node& n) {
        Array* ga = gr.in_grad(n, 0);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t l = 0; l < len; ++l) {
            for (std::size_t i = 0; i < inner; ++i) ga->data[(o * len + l) * inner + i] += n.grad.data[o * inner + i];
          }
        }
      });
}

Var mean(Var a, std::size_t axis) {
  const Shape s = a.shape();
  if (axis >= s.size() || s[axis] == 0) graph_of(a).fail("mean_axis", "empty or invalid axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(s[axis]));
}

// ---------------------------------------------------------------------------
// Nonlinearities

Var softmax(Var a) {
  Graph& g = graph_of(a);
  const std::size_t w = last_dim(a.shape());
  if (w == 0) g.fail("softmax", "empty last axis");
  return g.push(
      "softmax", {a.id}, a.shape(),
      [w](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        for (std::size_t r = 0; r < A.size() / w; ++r) {
          const double* x = A.data() + r * w;
          double* y = n.value.data.data() + r * w;
          const double mx = *std::max_element(x, x + w);
          double z = 0.0;
          for (std::size_t j = 0; j < w; ++j) z += (y[j] = std::exp(x[j] - mx));
          for (std::size_t j = 0; j < w; ++j) y[j] /= z;
        }
      },
      [w](Graph& gr, Graph::Node& n) {
        Array* ga = gr.in_grad(n, 0);
        const auto& Y = n.value.data;
        const auto& G = n.grad.data;
        for (std::size_t r = 0; r < Y.size() / w; ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < w; ++j) dot += G[r * w + j] * Y[r * w + j];
          for (std::size_t j = 0; j < w; ++j) ga->data[r * w + j] += Y[r * w + j] * (G[r * w + j] - dot);
        }
      });
}

Var log_softmax(Var a) {
  Graph& g = graph_of(a);
  const std::size_t w = last_dim(a.shape());
  if (w == 0) g.fail("log_softmax", "empty last axis");
  return g.push(
      "log_softmax", {a.id}, a.shape(),
      [w](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        for (std::size_t r = 0; r < A.size() / w; ++r) {
          const double* x = A.data() + r * w;
          double* y = n.value.data.data() + r * w;
          const double mx = *std::max_element(x, x + w);
          double z = 0.0;
          for (std::size_t j = 0; j < w; ++j) z += std::exp(x[j] - mx);
          const double lse = mx + std::log(z);
          for (std::size_t j = 0; j < w; ++j) y[j] = x[j] - lse;
        }
      },
      [w](Graph& gr, Graph::Node& n) {
        Array* ga = gr.in_grad(n, 0);
        const auto& Y = n.value.data;
        const auto& G = n.grad.data;
        for (std::size_t r = 0; r < Y.size() / w; ++r) {
          double gsum = 0.0;
          for (std::size_t j = 0; j < w; ++j) gsum += G[r * w + j];
          for (std::size_t j = 0; j < w; ++j) ga->data[r * w + j] += G[r * w + j] - std::exp(Y[r * w + j]) * gsum;
        }
      });
}

namespace {

template <typename F, typename D>
Var unary(const std::string& op, Var a, F f, D df) {
  Graph& g = graph_of(a);
  return g.push(
      op, {a.id}, a.shape(),
      [f](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        for (std::size_t i = 0; i < A.size(); ++i) n.value.data[i] = f(A[i]);
      },
      [df](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        Array* ga = gr.in_grad(n, 0);
        for (std::size_t i = 0; i < A.size(); ++i) ga->data[i] += n.grad.data[i] * df(A[i], n.value.data[i]);
      });
}

}  // namespace

Var log(Var a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var exp(Var a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var gelu(Var a) {
  return unary(
      "gelu", a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  Graph& g = graph_of(x, gamma);
  graph_of(x, beta);
  const std::size_t w = last_dim(x.shape());
  if (gamma.shape() != Shape{w} || beta.shape() != Shape{w}) {
    g.fail("layer_norm", "affine params must be [" + std::to_string(w) + "]");
  }
  // Cached per-row normalised values and inverse std for the backward pass.
  auto xhat = std::make_shared<std::vector<double>>();
  auto rstd = std::make_shared<std::vector<double>>();
  return g.push(
      "layer_norm", {x.id, gamma.id, beta.id}, x.shape(),
      [w, eps, xhat, rstd](Graph& gr, Graph::Node& n) {
        const auto& X = gr.in(n, 0).data;
        const auto& G = gr.in(n, 1).data;
        const auto& B = gr.in(n, 2).data;
        const std::size_t rows = X.size() / w;
        xhat->assign(X.size(), 0.0);
        rstd->assign(rows, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = X.data() + r * w;
          double mu = 0.0;
          for (std::size_t j = 0; j < w; ++j) mu += xr[j];
          mu /= static_cast<double>(w);
          double var = 0.0;
          for (std::size_t j = 0; j < w; ++j) var += (xr[j] - mu) * (xr[j] - mu);
          var /= static_cast<double>(w);
          const double rs = 1.0 / std::sqrt(var + eps);
          (*rstd)[r] = rs;
          for (std::size_t j = 0; j < w; ++j) {
            const double h = (xr[j] - mu) * rs;
            (*xhat)[r * w + j] = h;
            n.value.data[r * w + j] = h * G[j] + B[j];
          }
        }
      },
      [w, xhat, rstd](Graph& gr, Graph::Node& n) {
        const auto& G = gr.in(n, 1).data;
        const auto& D = n.grad.data;
        Array* gx = gr.in_grad(n, 0);
        Array* gg = gr.in_grad(n, 1);
        Array* gb = gr.in_grad(n, 2);
        const std::size_t rows = D.size() / w;
        const double inv_w = 1.0 / static_cast<double>(w);
        for (std::size_t r = 0; r < rows; ++r) {
          double s1 = 0.0;
          double s2 = 0.0;
          for (std::size_t j = 0; j < w; ++j) {
            const double dh = D[r * w + j] * G[j];
            s1 += dh;
            s2 += dh * (*xhat)[r * w + j];
            if (gg) gg->data[j] += D[r * w + j] * (*xhat)[r * w + j];
            if (gb) gb->data[j] += D[r * w + j];
          }
          if (!gx) continue;
          for (std::size_t j = 0; j < w; ++j) {
            const double dh = D[r * w + j] * G[j];
            gx->data[r * w + j] += (*rstd)[r] * (dh - inv_w * s1 - (*xhat)[r * w + j] * inv_w * s2);
          }
        }
      });
}

Var l2_normalize(Var x, double eps) {
  Graph& g = graph_of(x);
  const std::size_t w = last_dim(x.shape());
  auto norms = std::make_shared<std::vector<double>>();
  return g.push(
      "l2_normalize", {x.id}, x.shape(),
      [w, eps, norms](Graph& gr, Graph::Node& n) {
        const auto& X = gr.in(n, 0).data;
        const std::size_t rows = w == 0 ? 0 : X.size() / w;
        norms->assign(rows, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          double s = 0.0;
          for (std::size_t j = 0; j < w; ++j) s += X[r * w + j] * X[r * w + j];
          const double nv = std::max(std::sqrt(s), eps);
          (*norms)[r] = nv;
          for (std::size_t j = 0; j < w; ++j) n.value.data[r * w + j] = X[r * w + j] / nv;
        }
      },
      [w, eps, norms](Graph& gr, Graph::Node& n) {
        Array* gx = gr.in_grad(n, 0);
        const auto& Y = n.value.data;
        const auto& D = n.grad.data;
        for (std::size_t r = 0; r < norms->size(); ++r) {
          const double nv = (*norms)[r];
          if (nv <= eps) {
            // clamped branch: y = x / eps is linear in x
            for (std::size_t j = 0; j < w; ++j) gx->data[r * w + j] += D[r * w + j] / eps;
            continue;
          }
          double dot = 0.0;
          for (std::size_t j = 0; j < w; ++j) dot += D[r * w + j] * Y[r * w + j];
          for (std::size_t j = 0; j < w; ++j) gx->data[r * w + j] += (D[r * w + j] - Y[r * w + j] * dot) / nv;
        }
      });
}

Var pick(Var x, std::vector<std::size_t> cols) {
  Graph& g = graph_of(x);
  const Shape s = x.shape();
  if (s.size() != 2 || cols.size() != s[0]) g.fail("pick", "expects [n,c] with n column indices");
  for (std::size_t c : cols) {
    if (c >= s[1]) g.fail("pick", "column " + std::to_string(c) + " out of range");
  }
  const std::size_t w = s[1];
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(cols));
  return g.push(
      "pick", {x.id}, Shape{s[0]},
      [idx, w](Graph& gr, Graph::Node& n) {
        const auto& X = gr.in(n, 0).data;
        for (std::size_t i = 0; i < idx->size(); ++i) n.value.data[i] = X[i * w + (*idx)[i]];
      },
      [idx, w](Graph& gr, Graph::Node& n) {
        Array* gx = gr.in_grad(n, 0);
        for (std::size_t i = 0; i < idx->size(); ++i) gx->data[i * w + (*idx)[i]] += n.grad.data[i];
      });
}

Var smooth_l1(Var a, Var b, double beta) {
  Graph& g = graph_of(a, b);
  if (a.shape() != b.shape()) g.fail("smooth_l1", "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return g.push(
      "smooth_l1", {a.id, b.id}, a.shape(),
      [beta](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        const auto& B = gr.in(n, 1).data;
        for (std::size_t i = 0; i < A.size(); ++i) {
          const double d = std::abs(A[i] - B[i]);
          n.value.data[i] = d < beta ? 0.5 * d * d / beta : d - 0.5 * beta;
        }
      },
      [beta](Graph& gr, Graph::Node& n) {
        const auto& A = gr.in(n, 0).data;
        const auto& B = gr.in(n, 1).data;
        Array* ga = gr.in_grad(n, 0);
        Array* gb = gr.in_grad(n, 1);
        for (std::size_t i = 0; i < A.size(); ++i) {
          const double d = A[i] - B[i];
          const double s = std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : -1.0);
          if (ga) ga->data[i] += n.grad.data[i] * s;
          if (gb) gb->data[i] -= n.grad.data[i] * s;
        }
      });
}

Var attention(Var q, Var k, Var v) {
  const Shape sq = q.shape();
  if (sq.size() != 3) graph_of(q).fail("attention", "q must be [h,n,dh], got " + shape_str(sq));
  const double factor = 1.0 / std::sqrt(static_cast<double>(sq[2]));
  Var scores = scale(matmul(q, permute(k, {0, 2, 1})), factor);
  return matmul(softmax(scores), v);
}

// ---------------------------------------------------------------------------

double grad_check(const ScalarFn& f, const Array& x, double h) {
  Graph g;
  Var xv = g.leaf(x, true, "x");
  Var root = f(g, xv);
  if (root.value().size() != 1) throw ShapeError("grad_check: f must return a scalar");
  if (!std::isfinite(root.value().item())) throw std::domain_error("grad_check: f(x) is not finite");
  g.backward(root);
  const Array* analytic = g.grad(xv);
  const Array zeros(x.shape, 0.0);
  const Array& an = analytic && !analytic->data.empty() ? *analytic : zeros;

  auto eval_at = [&](const Array& point) {
    Graph ge;
    const double v = f(ge, ge.leaf(point, false)).value().item();
    if (!std::isfinite(v)) throw std::domain_error("grad_check: f is not finite near x");
    return v;
  };

  double worst = 0.0;
  Array probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + h;
    const double fp = eval_at(probe);
    probe.data[i] = orig - h;
    const double fm = eval_at(probe);
    probe.data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double err = std::abs(an.data[i] - numeric) / std::max(1e-8, std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace lmlite::ad
