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

// Multi-task Gaussian process over sparse (time, channel) observations.
//
// The prior covariance between observation a and b is
//   K^D[ch_a, ch_b] * exp(-|t_a - t_b| / l) + [a == b] sigma^2_{ch_a},
// built only over the m observed pairs. The posterior over the latent grid
// series is returned channel-major: entry d * X + x is channel d at grid
// time x, which matches the Kronecker ordering K^D (x) K^X.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mgptcn/diffcore.hpp"
#include "mgptcn/encounter.hpp"

namespace mgptcn::mgp {

double ou_kernel(double t, double t2, double length_scale);

// Trainable GP state shared across encounters.
//
// The task kernel is K^D = L L^T with L lower triangular. `task_raw` stores
// L row-major: strictly-lower entries directly, diagonal entries through
// softplus so the diagonal stays positive. Upper entries are unused.
struct MGPParams {
  std::size_t channels = 0;
  std::vector<double> task_raw;
  std::vector<double> log_noise;
  double log_length_scale = 0.0;

  // L = I, noise variance 0.1, length scale 2 h.
  static MGPParams initial(std::size_t channels);
  // Builds parameters reproducing a given factor exactly.
  static MGPParams from_factor(std::span<const double> factor, std::span<const double> noise_var,
                               double length_scale);

  std::vector<double> task_factor() const;
  std::vector<double> task_kernel() const;
  double length_scale() const;
  std::size_t free_parameter_count() const;
};

struct Grid {
  std::vector<double> times;
  std::size_t size() const { return times.size(); }
};

// 0, 1, ..., floor(t_max) + 1: the next full hour strictly after the last
// observation.
Grid make_grid(const Encounter& enc);

struct JitterPolicy {
  double initial = 1e-6;
  double factor = 10.0;
  double max = 1e-2;

  static JitterPolicy none() { return {0.0, 10.0, 0.0}; }
};

// Graph handles for MGPParams.
struct MGPVars {
  std::size_t channels = 0;
  ad::Var task_raw;
  ad::Var log_noise;
  ad::Var log_length_scale;
};

MGPVars bind(ad::Graph& g, const MGPParams& params, bool trainable = true);
ad::Var task_factor(const MGPVars& vars);
ad::Var task_kernel(const MGPVars& vars);

struct ObservedCovarianceVars {
  ad::Var covariance;  // m x m, without jitter
  ad::Var factor;      // Cholesky factor of covariance + jitter * I
  double jitter = 0.0;
};

ObservedCovarianceVars observed_covariance(ad::Graph& g, const MGPVars& vars,
                                           const Encounter& enc,
                                           const JitterPolicy& jitter = {});

struct PosteriorVars {
  std::size_t channels = 0;
  std::size_t grid_size = 0;
  ad::Var mean;        // D*X
  ad::Var covariance;  // (D*X) x (D*X)
};

PosteriorVars posterior(ad::Graph& g, const MGPVars& vars, const Encounter& enc,
                        const Grid& grid, const JitterPolicy& jitter = {});

// Reparameterised draws z_s = mu + R xi_s, R the Cholesky factor of the
// posterior covariance (plus jitter). Each result is a D x X Var.
std::vector<ad::Var> draw_samples(ad::Graph& g, const PosteriorVars& post,
                                  std::span<const std::vector<double>> noise,
                                  const JitterPolicy& jitter = {});
std::vector<ad::Var> draw_samples(ad::Graph& g, const PosteriorVars& post, std::size_t count,
                                  std::uint64_t seed, const JitterPolicy& jitter = {});

// Standard-normal vectors of length `dim`, deterministic in `seed`.
std::vector<std::vector<double>> standard_normal_draws(std::size_t count, std::size_t dim,
                                                       std::uint64_t seed);

// Plain-value counterparts (no gradients).
struct ObservedCovariance {
  std::size_t size = 0;
  std::vector<double> matrix;
  std::vector<double> factor;
  double jitter = 0.0;
};

struct Posterior {
  std::size_t channels = 0;
  std::size_t grid_size = 0;
  std::vector<double> mean;
  std::vector<double> covariance;
  std::size_t dim() const { return channels * grid_size; }
};

ObservedCovariance observed_covariance(const Encounter& enc, const MGPParams& params,
                                       const JitterPolicy& jitter = {});
Posterior posterior(const Encounter& enc, const Grid& grid, const MGPParams& params,
                    const JitterPolicy& jitter = {});
// Each sample is a row-major D x X matrix.
std::vector<std::vector<double>> draw_samples(const Posterior& post, std::size_t count,
                                              std::uint64_t seed,
                                              const JitterPolicy& jitter = {});

}  // namespace mgptcn::mgp
