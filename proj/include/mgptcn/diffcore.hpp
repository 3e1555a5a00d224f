/*
 * Copyright 2026 The mgptcn Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

// Reverse-mode differentiation over the small, fixed set of dense operations
// the MGP-TCN pipeline needs. A Graph owns its nodes; a Var is a lightweight
// handle (graph pointer + node index). Nodes are appended in evaluation order,
// so creation order is a topological order and backward() simply walks it in
// reverse. All arithmetic is double precision.
//
// Tensors are row-major. Shapes are 0-D (scalar, shape {}), 1-D or 2-D, plus
// 3-D for convolution kernels [out, in, width].

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mgptcn::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class OpKind {
  kLeaf,
  kConstant,
  kMatMul,
  kKronMatVec,
  kAdd,
  kSub,
  kMul,
  kNeg,
  kExp,
  kLog,
  kRelu,
  kSigmoid,
  kSoftplus,
  kLayerNorm,
  kCausalConv,
  kCholesky,
  kTriangularSolve,
  kSum,
  kMean,
  kBceWithLogits,
  kGather,
  kTranspose,
  kReshape,
};

std::string_view op_name(OpKind kind);

class Graph;

class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  std::size_t id() const { return id_; }

  const Shape& shape() const;
  std::size_t size() const;
  std::span<const double> values() const;
  double item() const;
  double operator[](std::size_t i) const { return values()[i]; }

 private:
  friend class Graph;
  Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

struct LeafGradient {
  Var leaf;
  std::vector<double> gradient;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t)>;

  struct Node {
    OpKind kind = OpKind::kConstant;
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until something accumulates into it
    std::vector<std::size_t> inputs;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Trainable input. Its gradient is reported by backward().
  Var leaf(Shape shape, std::vector<double> values);
  Var constant(Shape shape, std::vector<double> values);
  Var scalar(double value) { return constant({}, {value}); }

  // Appends an op node. Used by the op functions below.
  Var emit(OpKind kind, Shape shape, std::vector<double> value,
           std::vector<std::size_t> inputs, BackwardFn backward);

  // Reverse sweep from a scalar loss. Gradients from a previous sweep are
  // cleared first, so repeated calls give identical results.
  std::vector<LeafGradient> backward(Var loss);

  // d loss / d v after backward(); zeros if v did not influence the loss.
  std::vector<double> gradient(Var v) const;

  const Node& node(std::size_t id) const { return nodes_[id]; }
  Node& node(std::size_t id) { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  // Adds g (same size as the node) into node id's gradient.
  void accumulate(std::size_t id, std::span<const double> g);
  // Mutable gradient buffer for node id, zero-initialised on first access.
  std::vector<double>& grad_buffer(std::size_t id);

 private:
  std::vector<Node> nodes_;
  std::vector<std::size_t> leaves_;
};

// ---- Operations -----------------------------------------------------------

// 2-D x 2-D, or 2-D x 1-D (matrix-vector).
Var matmul(Var a, Var b);
Var transpose(Var a);

// (A kron B) v without materialising the Kronecker product. A is p x p2,
// B is q x q2, v has p2*q2 entries indexed i*q2 + j; the result has p*q
// entries indexed i*q + j.
Var kron_matvec(Var a, Var b, Var v);

// Elementwise; shapes must match or one side must be a single element.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var exp(Var a);
Var log(Var a);
Var relu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);

// x is [C, T] (or [C]); statistics over C independently for every column.
// Population variance.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);

// x [C_in, T], kernel [C_out, C_in, W], bias [C_out]. Tap j reads
// x[t - j*dilation]; positions before 0 read as zero, so the output has
// length T and is causal.
Var causal_dilated_conv(Var x, Var kernel, Var bias, std::size_t dilation);

// Lower Cholesky factor. Only the lower triangle of `a` is read, and the
// gradient is reported on the lower triangle (upper entries get zero).
Var cholesky(Var a);

// Solves L x = b (or L^T x = b when `transpose`), L lower triangular,
// b a vector or a matrix.
Var triangular_solve(Var lower, Var b, bool transpose = false);

Var sum(Var a);
Var mean(Var a);

// Elementwise numerically stable binary cross-entropy on logits.
Var bce_with_logits(Var logits, std::span<const double> labels);

// out[i] = x[indices[i]], or 0 where indices[i] < 0.
Var gather(Var x, std::vector<std::int64_t> indices, Shape shape);
Var reshape(Var x, Shape shape);

// Generic entry point keyed by op kind; attributes that the typed functions
// take as arguments are supplied here.
struct OpAttrs {
  std::size_t dilation = 1;
  double eps = 1e-5;
  bool transpose = false;
  std::vector<double> labels;
  std::vector<std::int64_t> indices;
  Shape shape;
};
Var forward_op(OpKind kind, std::span<const Var> inputs, const OpAttrs& attrs = {});

// ---- Plain dense kernels (no graph) ----------------------------------------
// Exposed for code paths that need factorizations outside a graph.

// Row-major n x n lower Cholesky. Throws FactorizationError with the failing
// pivot index.
std::vector<double> cholesky_lower(std::span<const double> a, std::size_t n);

}  // namespace mgptcn::ad
