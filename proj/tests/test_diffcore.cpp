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

#include <cmath>
#include <random>

#include "doctest.h"
#include "mgptcn/diffcore.hpp"
#include "mgptcn/errors.hpp"
#include "oracles/finite_diff.hpp"

using namespace mgptcn;
using namespace mgptcn::ad;

namespace {

std::vector<double> random_vec(std::mt19937_64& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Well-conditioned SPD matrix: B B^T + n I.
std::vector<double> random_spd(std::mt19937_64& rng, std::size_t n) {
  auto b = random_vec(rng, n * n);
  std::vector<double> a(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < n; ++k) a[i * n + j] += b[i * n + k] * b[j * n + k];
      if (i == j) a[i * n + j] += static_cast<double>(n);
    }
  return a;
}

std::vector<double> random_lower(std::mt19937_64& rng, std::size_t n) {
  auto l = random_vec(rng, n * n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (j > i) l[i * n + j] = 0.0;
      if (i == j) l[i * n + j] = 1.5 + std::abs(l[i * n + j]);
    }
  return l;
}

// Weighted sum gives every output entry a distinct sensitivity.
Var weighted_sum(Var v) {
  std::vector<double> w(v.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 0.3 + 0.1 * static_cast<double>(i % 7);
  return sum(mul(v, v.graph().constant(v.shape(), w)));
}

}  // namespace

TEST_CASE("relu on [-1, 0, 2]") {
  Graph g;
  auto y = relu(g.constant({3}, {-1, 0, 2}));
  CHECK(y[0] == 0.0);
  CHECK(y[1] == 0.0);
  CHECK(y[2] == 2.0);
}

TEST_CASE("cholesky of identity is identity") {
  Graph g;
  auto l = cholesky(g.constant({2, 2}, {1, 0, 0, 1}));
  CHECK(l[0] == 1.0);
  CHECK(l[1] == 0.0);
  CHECK(l[2] == 0.0);
  CHECK(l[3] == 1.0);
}

TEST_CASE("layer_norm matches population-std oracle") {
  const std::vector<double> x{1, 2, 3};
  double m = (x[0] + x[1] + x[2]) / 3;
  double var = 0;
  for (double v : x) var += (v - m) * (v - m) / 3;
  std::vector<double> expect;
  for (double v : x) expect.push_back((v - m) / std::sqrt(var));

  Graph g;
  auto y = layer_norm(g.constant({3}, x), g.constant({3}, {1, 1, 1}), g.constant({3}, {0, 0, 0}));
  for (int i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(expect[i]).epsilon(1e-4));
  CHECK(y[0] == doctest::Approx(-1.2247).epsilon(1e-4));
  CHECK(y[2] == doctest::Approx(1.2247).epsilon(1e-4));
}

TEST_CASE("cholesky rejects non positive definite matrix with pivot index") {
  Graph g;
  auto a = g.constant({2, 2}, {1, 2, 2, 1});
  try {
    cholesky(a);
    FAIL("expected FactorizationError");
  } catch (const FactorizationError& e) {
    CHECK(e.pivot() == 1);
  }
}

TEST_CASE("shape mismatch names the op and dimensions") {
  Graph g;
  auto a = g.constant({2, 3}, std::vector<double>(6, 1.0));
  auto b = g.constant({2, 3}, std::vector<double>(6, 1.0));
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
  }
}

TEST_CASE("backward requires a scalar loss") {
  Graph g;
  auto x = g.leaf({3}, {1, 2, 3});
  CHECK_THROWS_AS(g.backward(exp(x)), ShapeError);
}

TEST_CASE("gradient of sum is all ones") {
  Graph g;
  auto x = g.leaf({2, 3}, {1, 2, 3, 4, 5, 6});
  g.backward(sum(x));
  for (double v : g.gradient(x)) CHECK(v == 1.0);
}

TEST_CASE("bce gradient at logit 0 with label 1 is -0.5") {
  Graph g;
  auto w = g.leaf({2}, {0.5, -0.25});
  auto x = g.constant({2}, {1.0, 2.0});
  auto logit = matmul(reshape(w, {1, 2}), x);
  std::vector<double> label{1.0};
  g.backward(sum(bce_with_logits(logit, label)));
  CHECK(logit.item() == 0.0);
  CHECK(g.gradient(logit)[0] == doctest::Approx(-0.5));
}

TEST_CASE("cholesky backward matches finite differences on random SPD") {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 5; ++rep) {
    auto a = random_spd(rng, 4);
    auto res = oracle::check_gradients(
        [](Graph&, std::span<const Var> v) { return sum(cholesky(v[0])); }, {{{4, 4}, a}});
    CHECK(res.max_rel_error < 1e-5);
  }
}

TEST_CASE("every op passes the finite-difference gradient check") {
  std::mt19937_64 rng(7);
  const double tol = 1e-4;
  auto check = [&](const char* name, oracle::LossBuilder fn, std::vector<oracle::LeafInit> in) {
    auto res = oracle::check_gradients(fn, std::move(in));
    INFO(name);
    CHECK(res.max_rel_error < tol);
  };
  for (int rep = 0; rep < 3; ++rep) {
    check("matmul", [](Graph&, std::span<const Var> v) { return weighted_sum(matmul(v[0], v[1])); },
          {{{3, 4}, random_vec(rng, 12)}, {{4, 2}, random_vec(rng, 8)}});
    check("matvec", [](Graph&, std::span<const Var> v) { return weighted_sum(matmul(v[0], v[1])); },
          {{{3, 4}, random_vec(rng, 12)}, {{4}, random_vec(rng, 4)}});
    check("kron_matvec",
          [](Graph&, std::span<const Var> v) { return weighted_sum(kron_matvec(v[0], v[1], v[2])); },
          {{{2, 3}, random_vec(rng, 6)}, {{4, 2}, random_vec(rng, 8)}, {{6}, random_vec(rng, 6)}});
    check("add", [](Graph&, std::span<const Var> v) { return weighted_sum(add(v[0], v[1])); },
          {{{5}, random_vec(rng, 5)}, {{5}, random_vec(rng, 5)}});
    check("sub broadcast", [](Graph&, std::span<const Var> v) { return weighted_sum(sub(v[0], v[1])); },
          {{{5}, random_vec(rng, 5)}, {{}, random_vec(rng, 1)}});
    check("mul", [](Graph&, std::span<const Var> v) { return weighted_sum(mul(v[0], v[1])); },
          {{{2, 3}, random_vec(rng, 6)}, {{2, 3}, random_vec(rng, 6)}});
    check("mul broadcast", [](Graph&, std::span<const Var> v) { return weighted_sum(mul(v[0], v[1])); },
          {{{}, random_vec(rng, 1)}, {{2, 3}, random_vec(rng, 6)}});
    check("exp", [](Graph&, std::span<const Var> v) { return weighted_sum(exp(v[0])); },
          {{{4}, random_vec(rng, 4)}});
    check("log", [](Graph&, std::span<const Var> v) { return weighted_sum(log(v[0])); },
          {{{4}, random_vec(rng, 4, 0.5, 2.0)}});
    check("relu", [](Graph&, std::span<const Var> v) { return weighted_sum(relu(v[0])); },
          {{{4}, {-0.7, 0.3, 0.9, -0.2}}});
    check("sigmoid", [](Graph&, std::span<const Var> v) { return weighted_sum(sigmoid(v[0])); },
          {{{4}, random_vec(rng, 4, -3, 3)}});
    check("softplus", [](Graph&, std::span<const Var> v) { return weighted_sum(softplus(v[0])); },
          {{{4}, random_vec(rng, 4, -3, 3)}});
    check("neg", [](Graph&, std::span<const Var> v) { return weighted_sum(neg(v[0])); },
          {{{3}, random_vec(rng, 3)}});
    check("layer_norm",
          [](Graph&, std::span<const Var> v) { return weighted_sum(layer_norm(v[0], v[1], v[2])); },
          {{{4, 3}, random_vec(rng, 12)}, {{4}, random_vec(rng, 4, 0.5, 1.5)}, {{4}, random_vec(rng, 4)}});
    check("causal_dilated_conv",
          [](Graph&, std::span<const Var> v) {
            return weighted_sum(causal_dilated_conv(v[0], v[1], v[2], 2));
          },
          {{{2, 7}, random_vec(rng, 14)}, {{3, 2, 3}, random_vec(rng, 18)}, {{3}, random_vec(rng, 3)}});
    check("cholesky", [](Graph&, std::span<const Var> v) { return weighted_sum(cholesky(v[0])); },
          {{{3, 3}, random_spd(rng, 3)}});
    check("triangular_solve",
          [](Graph&, std::span<const Var> v) { return weighted_sum(triangular_solve(v[0], v[1])); },
          {{{3, 3}, random_lower(rng, 3)}, {{3, 2}, random_vec(rng, 6)}});
    check("triangular_solve^T",
          [](Graph&, std::span<const Var> v) {
            return weighted_sum(triangular_solve(v[0], v[1], true));
          },
          {{{3, 3}, random_lower(rng, 3)}, {{3}, random_vec(rng, 3)}});
    check("sum", [](Graph&, std::span<const Var> v) { return sum(exp(v[0])); }, {{{3}, random_vec(rng, 3)}});
    check("mean", [](Graph&, std::span<const Var> v) { return mean(exp(v[0])); }, {{{3}, random_vec(rng, 3)}});
    check("bce_with_logits",
          [](Graph&, std::span<const Var> v) {
            const std::vector<double> labels{1, 0, 1};
            return sum(bce_with_logits(v[0], labels));
          },
          {{{3}, random_vec(rng, 3, -4, 4)}});
    check("gather",
          [](Graph&, std::span<const Var> v) { return weighted_sum(exp(gather(v[0], {2, -1, 0, 2}, {2, 2}))); },
          {{{3}, random_vec(rng, 3)}});
    check("transpose", [](Graph&, std::span<const Var> v) { return weighted_sum(transpose(v[0])); },
          {{{2, 3}, random_vec(rng, 6)}});
  }
}

TEST_CASE("forward_op dispatches by kind") {
  Graph g;
  std::vector<Var> in{g.constant({3}, {-1, 0, 2})};
  auto y = forward_op(OpKind::kRelu, in);
  CHECK(y[2] == 2.0);
  CHECK_THROWS_AS(forward_op(OpKind::kMatMul, in), ContractError);
}

TEST_CASE("backward is bit-identical across evaluations") {
  std::mt19937_64 rng(3);
  auto a = random_spd(rng, 5);
  auto b = random_vec(rng, 5);
  auto run = [&] {
    Graph g;
    auto av = g.leaf({5, 5}, a);
    auto bv = g.leaf({5}, b);
    auto l = cholesky(av);
    auto x = triangular_solve(l, bv);
    g.backward(sum(mul(x, x)));
    auto ga = g.gradient(av);
    auto gb = g.gradient(bv);
    ga.insert(ga.end(), gb.begin(), gb.end());
    return ga;
  };
  auto r1 = run();
  auto r2 = run();
  CHECK(r1 == r2);
}

TEST_CASE("cholesky reconstructs SPD inputs") {
  std::mt19937_64 rng(5);
  for (std::size_t n : {2u, 5u, 12u}) {
    auto a = random_spd(rng, n);
    auto l = cholesky_lower(a, n);
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) s += l[i * n + k] * l[j * n + k];
        num += (s - a[i * n + j]) * (s - a[i * n + j]);
        den += a[i * n + j] * a[i * n + j];
      }
    CHECK(std::sqrt(num / den) < 1e-10);
  }
}

TEST_CASE("repeated backward calls reset gradients") {
  Graph g;
  auto x = g.leaf({2}, {1.0, 2.0});
  auto loss = sum(mul(x, x));
  g.backward(loss);
  auto first = g.gradient(x);
  g.backward(loss);
  CHECK(g.gradient(x) == first);
}
