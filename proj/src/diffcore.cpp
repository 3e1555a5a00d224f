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

#include "mgptcn/diffcore.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "mgptcn/errors.hpp"

namespace mgptcn::ad {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream ss;
  ss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) ss << (i ? "," : "") << shape[i];
  ss << ']';
  return ss.str();
}

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kKronMatVec: return "kron_structured_matvec";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "elementwise_mul";
    case OpKind::kNeg: return "neg";
    case OpKind::kExp: return "exp";
    case OpKind::kLog: return "log";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kSoftplus: return "softplus";
    case OpKind::kLayerNorm: return "layer_norm";
    case OpKind::kCausalConv: return "causal_dilated_conv";
    case OpKind::kCholesky: return "cholesky";
    case OpKind::kTriangularSolve: return "triangular_solve";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kBceWithLogits: return "bce_with_logits";
    case OpKind::kGather: return "gather";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
  }
  return "unknown";
}

// ---- Var -------------------------------------------------------------------

const Shape& Var::shape() const { return graph_->node(id_).shape; }
std::size_t Var::size() const { return graph_->node(id_).value.size(); }
std::span<const double> Var::values() const { return graph_->node(id_).value; }
double Var::item() const {
  if (size() != 1) throw ShapeError("item() on non-scalar of shape " + shape_str(shape()));
  return graph_->node(id_).value[0];
}

// ---- Graph -----------------------------------------------------------------

Var Graph::leaf(Shape shape, std::vector<double> values) {
  if (shape_size(shape) != values.size())
    throw ShapeError("leaf: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(values.size()));
  Node n;
  n.kind = OpKind::kLeaf;
  n.shape = std::move(shape);
  n.value = std::move(values);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  leaves_.push_back(nodes_.size() - 1);
  return Var(this, nodes_.size() - 1);
}

Var Graph::constant(Shape shape, std::vector<double> values) {
  if (shape_size(shape) != values.size())
    throw ShapeError("constant: shape " + shape_str(shape) + " holds " +
                     std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(values.size()));
  Node n;
  n.kind = OpKind::kConstant;
  n.shape = std::move(shape);
  n.value = std::move(values);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

Var Graph::emit(OpKind kind, Shape shape, std::vector<double> value,
                std::vector<std::size_t> inputs, BackwardFn backward) {
  Node n;
  n.kind = kind;
  n.shape = std::move(shape);
  n.value = std::move(value);
  for (auto i : inputs) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
  n.inputs = std::move(inputs);
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, nodes_.size() - 1);
}

std::vector<double>& Graph::grad_buffer(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

void Graph::accumulate(std::size_t id, std::span<const double> g) {
  if (!nodes_[id].requires_grad) return;
  auto& buf = grad_buffer(id);
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += g[i];
}

std::vector<LeafGradient> Graph::backward(Var loss) {
  if (&loss.graph() != this) throw ContractError("backward: loss belongs to another graph");
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  for (auto& n : nodes_) n.grad.clear();
  grad_buffer(loss.id())[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
  std::vector<LeafGradient> out;
  out.reserve(leaves_.size());
  for (auto id : leaves_) out.push_back({Var(this, id), gradient(Var(this, id))});
  return out;
}

std::vector<double> Graph::gradient(Var v) const {
  const auto& n = nodes_[v.id()];
  if (n.grad.empty()) return std::vector<double>(n.value.size(), 0.0);
  return n.grad;
}

// ---- dense helpers ---------------------------------------------------------

namespace {

// C (m x n) = A (m x k) * B (k x n)
std::vector<double> gemm_nn(std::span<const double> a, std::span<const double> b,
                            std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a[i * k + p];
      if (aip == 0.0) continue;
      const double* bp = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
  return c;
}

// C (m x n) = A (m x k) * B^T, B stored n x k
std::vector<double> gemm_nt(std::span<const double> a, std::span<const double> b,
                            std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b.data() + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] = s;
    }
  }
  return c;
}

// C (m x n) = A^T * B, A stored k x m, B stored k x n
std::vector<double> gemm_tn(std::span<const double> a, std::span<const double> b,
                            std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a.data() + p * m;
    const double* bp = b.data() + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = ap[i];
      if (api == 0.0) continue;
      double* ci = c.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
  return c;
}

// In-place solve of L X = B (or L^T X = B); L is n x n lower, B is n x r.
void trsm_lower(std::span<const double> l, std::span<double> b, std::size_t n, std::size_t r,
                bool transpose) {
  if (!transpose) {
    for (std::size_t i = 0; i < n; ++i) {
      double* bi = b.data() + i * r;
      for (std::size_t k = 0; k < i; ++k) {
        const double lik = l[i * n + k];
        if (lik == 0.0) continue;
        const double* bk = b.data() + k * r;
        for (std::size_t j = 0; j < r; ++j) bi[j] -= lik * bk[j];
      }
      const double inv = 1.0 / l[i * n + i];
      for (std::size_t j = 0; j < r; ++j) bi[j] *= inv;
    }
  } else {
    for (std::size_t i = n; i-- > 0;) {
      double* bi = b.data() + i * r;
      for (std::size_t k = i + 1; k < n; ++k) {
        const double lki = l[k * n + i];
        if (lki == 0.0) continue;
        const double* bk = b.data() + k * r;
        for (std::size_t j = 0; j < r; ++j) bi[j] -= lki * bk[j];
      }
      const double inv = 1.0 / l[i * n + i];
      for (std::size_t j = 0; j < r; ++j) bi[j] *= inv;
    }
  }
}

void require_same_graph(Var a, Var b, std::string_view op) {
  if (!a.valid() || !b.valid() || &a.graph() != &b.graph())
    throw ContractError(std::string(op) + ": operands belong to different graphs");
}

[[noreturn]] void shape_mismatch(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

// Elementwise unary op with derivative expressed through input x and output y.
template <typename F, typename DF>
Var unary(Var a, OpKind kind, F f, DF df) {
  auto& g = a.graph();
  const auto x = a.values();
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  const std::size_t in = a.id();
  return g.emit(kind, a.shape(), std::move(y), {in}, [in, df](Graph& gr, std::size_t self) {
    const auto& node = gr.node(self);
    const auto& xs = gr.node(in).value;
    std::vector<double> gx(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) gx[i] = node.grad[i] * df(xs[i], node.value[i]);
    gr.accumulate(in, gx);
  });
}

enum class Bin { kAdd, kSub, kMul };

Var binary(Var a, Var b, Bin op, OpKind kind) {
  require_same_graph(a, b, op_name(kind));
  auto& g = a.graph();
  const std::size_t na = a.size(), nb = b.size();
  Shape shape;
  if (na == nb && (a.shape() == b.shape() || na == 1)) {
    shape = a.shape().size() >= b.shape().size() ? a.shape() : b.shape();
  } else if (nb == 1) {
    shape = a.shape();
  } else if (na == 1) {
    shape = b.shape();
  } else {
    shape_mismatch(op_name(kind), a.shape(), b.shape());
  }
  const std::size_t n = std::max(na, nb);
  const auto xa = a.values();
  const auto xb = b.values();
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = xa[na == 1 ? 0 : i];
    const double v = xb[nb == 1 ? 0 : i];
    y[i] = op == Bin::kAdd ? u + v : op == Bin::kSub ? u - v : u * v;
  }
  const std::size_t ia = a.id(), ib = b.id();
  return g.emit(kind, std::move(shape), std::move(y), {ia, ib},
                [ia, ib, na, nb, n, op](Graph& gr, std::size_t self) {
                  const auto& gy = gr.node(self).grad;
                  if (gr.node(ia).requires_grad) {
                    auto& ga = gr.grad_buffer(ia);
                    const auto& vb = gr.node(ib).value;
                    for (std::size_t i = 0; i < n; ++i) {
                      const double d = op == Bin::kMul ? vb[nb == 1 ? 0 : i] : 1.0;
                      ga[na == 1 ? 0 : i] += gy[i] * d;
                    }
                  }
                  if (gr.node(ib).requires_grad) {
                    auto& gb = gr.grad_buffer(ib);
                    const auto& va = gr.node(ia).value;
                    for (std::size_t i = 0; i < n; ++i) {
                      const double d = op == Bin::kMul   ? va[na == 1 ? 0 : i]
                                       : op == Bin::kSub ? -1.0
                                                         : 1.0;
                      gb[nb == 1 ? 0 : i] += gy[i] * d;
                    }
                  }
                });
}

}  // namespace

std::vector<double> cholesky_lower(std::span<const double> a, std::size_t n) {
  std::vector<double> l(n * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double* lj = l.data() + j * n;
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= lj[k] * lj[k];
    if (!(d > 0.0) || !std::isfinite(d)) {
      std::ostringstream ss;
      ss << "cholesky: matrix is not positive definite (pivot " << j << " of " << n
         << ", value " << d << ")";
      throw FactorizationError(ss.str(), j);
    }
    const double ljj = std::sqrt(d);
    l[j * n + j] = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      const double* li = l.data() + i * n;
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
      l[i * n + j] = s / ljj;
    }
  }
  return l;
}

// ---- Operations ------------------------------------------------------------

Var matmul(Var a, Var b) {
  require_same_graph(a, b, "matmul");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || (sb.size() != 1 && sb.size() != 2) || sa[1] != sb[0])
    shape_mismatch("matmul", sa, sb);
  const std::size_t m = sa[0], k = sa[1], n = sb.size() == 2 ? sb[1] : 1;
  Shape out = sb.size() == 2 ? Shape{m, n} : Shape{m};
  auto y = gemm_nn(a.values(), b.values(), m, k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.graph().emit(OpKind::kMatMul, std::move(out), std::move(y), {ia, ib},
                        [ia, ib, m, k, n](Graph& gr, std::size_t self) {
                          const auto& gy = gr.node(self).grad;
                          if (gr.node(ia).requires_grad)
                            gr.accumulate(ia, gemm_nt(gy, gr.node(ib).value, m, n, k));
                          if (gr.node(ib).requires_grad)
                            gr.accumulate(ib, gemm_tn(gr.node(ia).value, gy, k, m, n));
                        });
}

Var transpose(Var a) {
  if (a.shape().size() != 2) throw ShapeError("transpose: expected 2-D, got " + shape_str(a.shape()));
  const std::size_t r = a.shape()[0], c = a.shape()[1];
  const auto x = a.values();
  std::vector<double> y(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) y[j * r + i] = x[i * c + j];
  const std::size_t in = a.id();
  return a.graph().emit(OpKind::kTranspose, {c, r}, std::move(y), {in},
                        [in, r, c](Graph& gr, std::size_t self) {
                          const auto& gy = gr.node(self).grad;
                          auto& gx = gr.grad_buffer(in);
                          for (std::size_t i = 0; i < r; ++i)
                            for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += gy[j * r + i];
                        });
}

Var kron_matvec(Var a, Var b, Var v) {
  require_same_graph(a, b, "kron_structured_matvec");
  require_same_graph(a, v, "kron_structured_matvec");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2) shape_mismatch("kron_structured_matvec", sa, sb);
  const std::size_t p = sa[0], p2 = sa[1], q = sb[0], q2 = sb[1];
  if (v.size() != p2 * q2)
    throw ShapeError("kron_structured_matvec: vector has " + std::to_string(v.size()) +
                     " entries, expected " + std::to_string(p2) + "*" + std::to_string(q2));
  // Treat v as V (p2 x q2); result is A V B^T (p x q).
  auto av = gemm_nn(a.values(), v.values(), p, p2, q2);  // p x q2
  auto y = gemm_nt(av, b.values(), p, q2, q);            // p x q
  const std::size_t ia = a.id(), ib = b.id(), iv = v.id();
  return a.graph().emit(
      OpKind::kKronMatVec, {p * q}, std::move(y), {ia, ib, iv},
      [ia, ib, iv, p, p2, q, q2](Graph& gr, std::size_t self) {
        const auto& gr_y = gr.node(self).grad;  // p x q
        const auto& va = gr.node(ia).value;
        const auto& vb = gr.node(ib).value;
        const auto& vv = gr.node(iv).value;
        auto ryb = gemm_nn(gr_y, vb, p, q, q2);  // p x q2 = Rbar B
        if (gr.node(ia).requires_grad) gr.accumulate(ia, gemm_nt(ryb, vv, p, q2, p2));
        if (gr.node(iv).requires_grad) gr.accumulate(iv, gemm_tn(va, ryb, p2, p, q2));
        if (gr.node(ib).requires_grad) {
          auto avm = gemm_nn(va, vv, p, p2, q2);              // p x q2
          gr.accumulate(ib, gemm_tn(gr_y, avm, q, p, q2));  // q x q2
        }
      });
}

Var add(Var a, Var b) { return binary(a, b, Bin::kAdd, OpKind::kAdd); }
Var sub(Var a, Var b) { return binary(a, b, Bin::kSub, OpKind::kSub); }
Var mul(Var a, Var b) { return binary(a, b, Bin::kMul, OpKind::kMul); }

Var neg(Var a) {
  return unary(a, OpKind::kNeg, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var exp(Var a) {
  return unary(a, OpKind::kExp, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var log(Var a) {
  return unary(a, OpKind::kLog, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var relu(Var a) {
  return unary(a, OpKind::kRelu, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

namespace {
double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace

Var sigmoid(Var a) {
  return unary(a, OpKind::kSigmoid, stable_sigmoid,
               [](double, double y) { return y * (1.0 - y); });
}

Var softplus(Var a) {
  return unary(a, OpKind::kSoftplus,
               [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
               [](double x, double) { return stable_sigmoid(x); });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  require_same_graph(x, gain, "layer_norm");
  require_same_graph(x, bias, "layer_norm");
  const auto& sx = x.shape();
  if (sx.empty() || sx.size() > 2) throw ShapeError("layer_norm: expected [C] or [C,T], got " + shape_str(sx));
  const std::size_t c = sx[0], t = sx.size() == 2 ? sx[1] : 1;
  if (gain.size() != c || bias.size() != c)
    throw ShapeError("layer_norm: gain/bias must have " + std::to_string(c) + " entries, got " +
                     shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> xhat(c * t), inv(t), y(c * t);
  for (std::size_t j = 0; j < t; ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < c; ++i) m += xv[i * t + j];
    m /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t i = 0; i < c; ++i) var += (xv[i * t + j] - m) * (xv[i * t + j] - m);
    var /= static_cast<double>(c);
    inv[j] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < c; ++i) {
      xhat[i * t + j] = (xv[i * t + j] - m) * inv[j];
      y[i * t + j] = xhat[i * t + j] * gv[i] + bv[i];
    }
  }
  const std::size_t ix = x.id(), ig = gain.id(), ib = bias.id();
  return x.graph().emit(
      OpKind::kLayerNorm, sx, std::move(y), {ix, ig, ib},
      [ix, ig, ib, c, t, xhat = std::move(xhat), inv = std::move(inv)](Graph& gr,
                                                                       std::size_t self) {
        const auto& gy = gr.node(self).grad;
        const auto& gv2 = gr.node(ig).value;
        if (gr.node(ig).requires_grad) {
          auto& gg = gr.grad_buffer(ig);
          for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < t; ++j) gg[i] += gy[i * t + j] * xhat[i * t + j];
        }
        if (gr.node(ib).requires_grad) {
          auto& gb = gr.grad_buffer(ib);
          for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = 0; j < t; ++j) gb[i] += gy[i * t + j];
        }
        if (gr.node(ix).requires_grad) {
          auto& gx = gr.grad_buffer(ix);
          const double cn = static_cast<double>(c);
          for (std::size_t j = 0; j < t; ++j) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t i = 0; i < c; ++i) {
              const double dh = gy[i * t + j] * gv2[i];
              s1 += dh;
              s2 += dh * xhat[i * t + j];
            }
            for (std::size_t i = 0; i < c; ++i) {
              const double dh = gy[i * t + j] * gv2[i];
              gx[i * t + j] += inv[j] / cn * (cn * dh - s1 - xhat[i * t + j] * s2);
            }
          }
        }
      });
}

Var causal_dilated_conv(Var x, Var kernel, Var bias, std::size_t dilation) {
  require_same_graph(x, kernel, "causal_dilated_conv");
  require_same_graph(x, bias, "causal_dilated_conv");
  const auto& sx = x.shape();
  const auto& sk = kernel.shape();
  if (sx.size() != 2 || sk.size() != 3 || sk[1] != sx[0])
    shape_mismatch("causal_dilated_conv", sx, sk);
  if (bias.size() != sk[0])
    throw ShapeError("causal_dilated_conv: bias must have " + std::to_string(sk[0]) +
                     " entries, got " + shape_str(bias.shape()));
  if (dilation < 1) throw ParameterError("causal_dilated_conv: dilation must be >= 1");
  const std::size_t cin = sx[0], t = sx[1], cout = sk[0], w = sk[2];
  const auto xv = x.values();
  const auto kv = kernel.values();
  const auto bv = bias.values();
  std::vector<double> y(cout * t);
  for (std::size_t o = 0; o < cout; ++o) {
    double* yo = y.data() + o * t;
    std::fill(yo, yo + t, bv[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* xc = xv.data() + c * t;
      for (std::size_t j = 0; j < w; ++j) {
        const double f = kv[(o * cin + c) * w + j];
        const std::size_t shift = j * dilation;
        if (f == 0.0 || shift >= t) continue;
        for (std::size_t s = shift; s < t; ++s) yo[s] += f * xc[s - shift];
      }
    }
  }
  const std::size_t ix = x.id(), ik = kernel.id(), ib = bias.id();
  return x.graph().emit(
      OpKind::kCausalConv, {cout, t}, std::move(y), {ix, ik, ib},
      [ix, ik, ib, cin, cout, t, w, dilation](Graph& gr, std::size_t self) {
        const auto& gy = gr.node(self).grad;
        const auto& xs = gr.node(ix).value;
        const auto& ks = gr.node(ik).value;
        if (gr.node(ib).requires_grad) {
          auto& gb = gr.grad_buffer(ib);
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t s = 0; s < t; ++s) gb[o] += gy[o * t + s];
        }
        const bool need_k = gr.node(ik).requires_grad;
        const bool need_x = gr.node(ix).requires_grad;
        std::vector<double>* gk = need_k ? &gr.grad_buffer(ik) : nullptr;
        std::vector<double>* gx = need_x ? &gr.grad_buffer(ix) : nullptr;
        for (std::size_t o = 0; o < cout; ++o) {
          const double* go = gy.data() + o * t;
          for (std::size_t c = 0; c < cin; ++c) {
            const double* xc = xs.data() + c * t;
            for (std::size_t j = 0; j < w; ++j) {
              const std::size_t shift = j * dilation;
              if (shift >= t) continue;
              const std::size_t kidx = (o * cin + c) * w + j;
              if (gk) {
                double acc = 0.0;
                for (std::size_t s = shift; s < t; ++s) acc += go[s] * xc[s - shift];
                (*gk)[kidx] += acc;
              }
              if (gx) {
                const double f = ks[kidx];
                if (f == 0.0) continue;
                double* gxc = gx->data() + c * t;
                for (std::size_t s = shift; s < t; ++s) gxc[s - shift] += f * go[s];
              }
            }
          }
        }
      });
}

Var cholesky(Var a) {
  const auto& sa = a.shape();
  if (sa.size() != 2 || sa[0] != sa[1]) throw ShapeError("cholesky: expected square matrix, got " + shape_str(sa));
  const std::size_t n = sa[0];
  auto l = cholesky_lower(a.values(), n);
  const std::size_t in = a.id();
  return a.graph().emit(OpKind::kCholesky, sa, std::move(l), {in}, [in, n](Graph& gr, std::size_t self) {
    const auto& lv = gr.node(self).value;
    const auto& gl = gr.node(self).grad;
    // P = Phi(L^T tril(Lbar)), Phi = lower triangle with halved diagonal.
    std::vector<double> lbar(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j <= i; ++j) lbar[i * n + j] = gl[i * n + j];
    auto p = gemm_tn(lv, lbar, n, n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) p[i * n + j] = 0.0;
      p[i * n + i] *= 0.5;
    }
    // G = L^-T P L^-1: solve L^T X = P, then G^T = L^-T X^T.
    trsm_lower(lv, p, n, n, true);
    std::vector<double> xt(n * n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) xt[j * n + i] = p[i * n + j];
    trsm_lower(lv, xt, n, n, true);  // xt now holds G^T
    auto& ga = gr.grad_buffer(in);
    for (std::size_t i = 0; i < n; ++i) {
      ga[i * n + i] += xt[i * n + i];
      for (std::size_t j = 0; j < i; ++j) ga[i * n + j] += xt[i * n + j] + xt[j * n + i];
    }
  });
}

Var triangular_solve(Var lower, Var b, bool transpose) {
  require_same_graph(lower, b, "triangular_solve");
  const auto& sl = lower.shape();
  const auto& sb = b.shape();
  if (sl.size() != 2 || sl[0] != sl[1] || sb.empty() || sb.size() > 2 || sb[0] != sl[0])
    shape_mismatch("triangular_solve", sl, sb);
  const std::size_t n = sl[0], r = sb.size() == 2 ? sb[1] : 1;
  std::vector<double> x(b.values().begin(), b.values().end());
  trsm_lower(lower.values(), x, n, r, transpose);
  const std::size_t il = lower.id(), ib = b.id();
  return lower.graph().emit(
      OpKind::kTriangularSolve, sb, std::move(x), {il, ib},
      [il, ib, n, r, transpose](Graph& gr, std::size_t self) {
        const auto& lv = gr.node(il).value;
        const auto& xv = gr.node(self).value;
        std::vector<double> bbar(gr.node(self).grad);
        // b_bar = L^-T x_bar (or L^-1 x_bar when transposed)
        trsm_lower(lv, bbar, n, r, !transpose);
        if (gr.node(il).requires_grad) {
          auto& gl = gr.grad_buffer(il);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j <= i; ++j) {
              double s = 0.0;
              for (std::size_t k = 0; k < r; ++k)
                s += transpose ? xv[i * r + k] * bbar[j * r + k] : bbar[i * r + k] * xv[j * r + k];
              gl[i * n + j] -= s;
            }
        }
        if (gr.node(ib).requires_grad) gr.accumulate(ib, bbar);
      });
}

Var sum(Var a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  const std::size_t in = a.id();
  return a.graph().emit(OpKind::kSum, {}, {s}, {in}, [in](Graph& gr, std::size_t self) {
    const double g = gr.node(self).grad[0];
    auto& gx = gr.grad_buffer(in);
    for (auto& v : gx) v += g;
  });
}

Var mean(Var a) {
  if (a.size() == 0) throw ShapeError("mean: empty input");
  double s = 0.0;
  for (double v : a.values()) s += v;
  const double n = static_cast<double>(a.size());
  const std::size_t in = a.id();
  return a.graph().emit(OpKind::kMean, {}, {s / n}, {in}, [in, n](Graph& gr, std::size_t self) {
    const double g = gr.node(self).grad[0] / n;
    auto& gx = gr.grad_buffer(in);
    for (auto& v : gx) v += g;
  });
}

Var bce_with_logits(Var logits, std::span<const double> labels) {
  if (labels.size() != logits.size())
    throw ShapeError("bce_with_logits: " + std::to_string(logits.size()) + " logits vs " +
                     std::to_string(labels.size()) + " labels");
  const auto z = logits.values();
  std::vector<double> y(z.size());
  for (std::size_t i = 0; i < z.size(); ++i)
    y[i] = std::max(z[i], 0.0) - z[i] * labels[i] + std::log1p(std::exp(-std::abs(z[i])));
  const std::size_t in = logits.id();
  std::vector<double> lab(labels.begin(), labels.end());
  return logits.graph().emit(OpKind::kBceWithLogits, logits.shape(), std::move(y), {in},
                             [in, lab = std::move(lab)](Graph& gr, std::size_t self) {
                               const auto& gy = gr.node(self).grad;
                               const auto& zs = gr.node(in).value;
                               auto& gz = gr.grad_buffer(in);
                               for (std::size_t i = 0; i < zs.size(); ++i)
                                 gz[i] += gy[i] * (stable_sigmoid(zs[i]) - lab[i]);
                             });
}

Var gather(Var x, std::vector<std::int64_t> indices, Shape shape) {
  if (shape_size(shape) != indices.size())
    throw ShapeError("gather: shape " + shape_str(shape) + " does not match " +
                     std::to_string(indices.size()) + " indices");
  const auto xv = x.values();
  std::vector<double> y(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto k = indices[i];
    if (k >= static_cast<std::int64_t>(xv.size()))
      throw ShapeError("gather: index " + std::to_string(k) + " out of range for " +
                       shape_str(x.shape()));
    y[i] = k < 0 ? 0.0 : xv[static_cast<std::size_t>(k)];
  }
  const std::size_t in = x.id();
  auto idx = std::make_shared<const std::vector<std::int64_t>>(std::move(indices));
  return x.graph().emit(OpKind::kGather, std::move(shape), std::move(y), {in},
                        [in, idx](Graph& gr, std::size_t self) {
                          const auto& gy = gr.node(self).grad;
                          auto& gx = gr.grad_buffer(in);
                          for (std::size_t i = 0; i < idx->size(); ++i)
                            if ((*idx)[i] >= 0) gx[static_cast<std::size_t>((*idx)[i])] += gy[i];
                        });
}

Var reshape(Var x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  const std::size_t in = x.id();
  std::vector<double> y(x.values().begin(), x.values().end());
  return x.graph().emit(OpKind::kReshape, std::move(shape), std::move(y), {in},
                        [in](Graph& gr, std::size_t self) { gr.accumulate(in, gr.node(self).grad); });
}

Var forward_op(OpKind kind, std::span<const Var> in, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (in.size() != n)
      throw ContractError(std::string(op_name(kind)) + ": expected " + std::to_string(n) +
                          " inputs, got " + std::to_string(in.size()));
  };
  switch (kind) {
    case OpKind::kMatMul: need(2); return matmul(in[0], in[1]);
    case OpKind::kKronMatVec: need(3); return kron_matvec(in[0], in[1], in[2]);
    case OpKind::kAdd: need(2); return add(in[0], in[1]);
    case OpKind::kSub: need(2); return sub(in[0], in[1]);
    case OpKind::kMul: need(2); return mul(in[0], in[1]);
    case OpKind::kNeg: need(1); return neg(in[0]);
    case OpKind::kExp: need(1); return exp(in[0]);
    case OpKind::kLog: need(1); return log(in[0]);
    case OpKind::kRelu: need(1); return relu(in[0]);
    case OpKind::kSigmoid: need(1); return sigmoid(in[0]);
    case OpKind::kSoftplus: need(1); return softplus(in[0]);
    case OpKind::kLayerNorm: need(3); return layer_norm(in[0], in[1], in[2], attrs.eps);
    case OpKind::kCausalConv: need(3); return causal_dilated_conv(in[0], in[1], in[2], attrs.dilation);
    case OpKind::kCholesky: need(1); return cholesky(in[0]);
    case OpKind::kTriangularSolve: need(2); return triangular_solve(in[0], in[1], attrs.transpose);
    case OpKind::kSum: need(1); return sum(in[0]);
    case OpKind::kMean: need(1); return mean(in[0]);
    case OpKind::kBceWithLogits: need(1); return bce_with_logits(in[0], attrs.labels);
    case OpKind::kGather: need(1); return gather(in[0], attrs.indices, attrs.shape);
    case OpKind::kTranspose: need(1); return transpose(in[0]);
    case OpKind::kReshape: need(1); return reshape(in[0], attrs.shape);
    case OpKind::kLeaf:
    case OpKind::kConstant: break;
  }
  throw ContractError("forward_op: " + std::string(op_name(kind)) + " is not an operation");
}

}  // namespace mgptcn::ad
