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

#include "mgptcn/mgp.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "mgptcn/errors.hpp"

namespace mgptcn::mgp {

namespace {

double softplus_inverse(double y) { return y > 30.0 ? y : std::log(std::expm1(y)); }
double softplus_value(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace

double ou_kernel(double t, double t2, double length_scale) {
  if (!(length_scale > 0.0)) throw ParameterError("ou_kernel: length scale must be positive");
  return std::exp(-std::abs(t - t2) / length_scale);
}

MGPParams MGPParams::initial(std::size_t channels) {
  MGPParams p;
  p.channels = channels;
  p.task_raw.assign(channels * channels, 0.0);
  for (std::size_t d = 0; d < channels; ++d) p.task_raw[d * channels + d] = softplus_inverse(1.0);
  p.log_noise.assign(channels, std::log(0.1));
  p.log_length_scale = std::log(2.0);
  return p;
}

MGPParams MGPParams::from_factor(std::span<const double> factor, std::span<const double> noise_var,
                                 double length_scale) {
  const std::size_t d = noise_var.size();
  if (factor.size() != d * d) throw ShapeError("from_factor: factor must be D x D");
  MGPParams p;
  p.channels = d;
  p.task_raw.assign(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) p.task_raw[i * d + j] = factor[i * d + j];
    if (!(factor[i * d + i] > 0.0)) throw ParameterError("from_factor: diagonal must be positive");
    p.task_raw[i * d + i] = softplus_inverse(factor[i * d + i]);
  }
  p.log_noise.resize(d);
  for (std::size_t i = 0; i < d; ++i) p.log_noise[i] = std::log(noise_var[i]);
  if (!(length_scale > 0.0)) throw ParameterError("from_factor: length scale must be positive");
  p.log_length_scale = std::log(length_scale);
  return p;
}

std::vector<double> MGPParams::task_factor() const {
  const std::size_t d = channels;
  std::vector<double> l(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) l[i * d + j] = task_raw[i * d + j];
    l[i * d + i] = softplus_value(task_raw[i * d + i]);
  }
  return l;
}

std::vector<double> MGPParams::task_kernel() const {
  const std::size_t d = channels;
  auto l = task_factor();
  std::vector<double> k(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p <= std::min(i, j); ++p) s += l[i * d + p] * l[j * d + p];
      k[i * d + j] = s;
    }
  return k;
}

double MGPParams::length_scale() const { return std::exp(log_length_scale); }

std::size_t MGPParams::free_parameter_count() const {
  return channels * (channels + 1) / 2 + channels + 1;
}

Grid make_grid(const Encounter& enc) {
  if (enc.observations.empty()) throw ContractError("make_grid: encounter " + enc.id + " is empty");
  const double t_max = enc.last_time();
  const auto last = static_cast<std::size_t>(std::floor(t_max)) + 1;
  Grid g;
  g.times.resize(last + 1);
  for (std::size_t i = 0; i <= last; ++i) g.times[i] = static_cast<double>(i);
  return g;
}

MGPVars bind(ad::Graph& g, const MGPParams& params, bool trainable) {
  const std::size_t d = params.channels;
  if (params.task_raw.size() != d * d || params.log_noise.size() != d)
    throw ShapeError("MGPParams: inconsistent sizes for " + std::to_string(d) + " channels");
  MGPVars v;
  v.channels = d;
  if (trainable) {
    v.task_raw = g.leaf({d, d}, params.task_raw);
    v.log_noise = g.leaf({d}, params.log_noise);
    v.log_length_scale = g.leaf({}, {params.log_length_scale});
  } else {
    v.task_raw = g.constant({d, d}, params.task_raw);
    v.log_noise = g.constant({d}, params.log_noise);
    v.log_length_scale = g.constant({}, {params.log_length_scale});
  }
  return v;
}

ad::Var task_factor(const MGPVars& vars) {
  const std::size_t d = vars.channels;
  std::vector<std::int64_t> lower(d * d, -1), diag_pick(d), diag_place(d * d, -1);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < i; ++j) lower[i * d + j] = static_cast<std::int64_t>(i * d + j);
    diag_pick[i] = static_cast<std::int64_t>(i * d + i);
    diag_place[i * d + i] = static_cast<std::int64_t>(i);
  }
  auto off = ad::gather(vars.task_raw, std::move(lower), {d, d});
  auto diag = ad::softplus(ad::gather(vars.task_raw, std::move(diag_pick), {d}));
  return ad::add(off, ad::gather(diag, std::move(diag_place), {d, d}));
}

ad::Var task_kernel(const MGPVars& vars) {
  auto l = task_factor(vars);
  return ad::matmul(l, ad::transpose(l));
}

namespace {

// exp(-|a_i - b_j| / l) as an |a| x |b| Var.
ad::Var ou_matrix(ad::Graph& g, std::span<const double> a, std::span<const double> b,
                  ad::Var inv_length) {
  std::vector<double> negdist(a.size() * b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) negdist[i * b.size() + j] = -std::abs(a[i] - b[j]);
  auto c = g.constant({a.size(), b.size()}, std::move(negdist));
  return ad::exp(ad::mul(c, inv_length));
}

ad::Var with_jitter(ad::Graph& g, ad::Var m, double jitter) {
  const std::size_t n = m.shape()[0];
  std::vector<double> eye(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = jitter;
  return ad::add(m, g.constant({n, n}, std::move(eye)));
}

// Cholesky with an escalating diagonal jitter ladder.
std::pair<ad::Var, double> factor_with_jitter(ad::Graph& g, ad::Var m, const JitterPolicy& policy,
                                              const std::string& what) {
  double jitter = policy.initial;
  for (;;) {
    try {
      auto shifted = jitter > 0.0 ? with_jitter(g, m, jitter) : m;
      return {ad::cholesky(shifted), jitter};
    } catch (const FactorizationError& e) {
      const double next = jitter > 0.0 ? jitter * policy.factor : policy.max;
      if (!(next <= policy.max) || next <= jitter) {
        throw ConditioningError(what + ": covariance not factorizable with jitter up to " +
                                    std::to_string(policy.max) + " (" + e.what() + ")",
                                what);
      }
      jitter = next;
    }
  }
}

std::vector<double> observation_times(const Encounter& enc) {
  std::vector<double> t(enc.size());
  for (std::size_t a = 0; a < enc.size(); ++a) t[a] = enc.observations[a].time;
  return t;
}

}  // namespace

ObservedCovarianceVars observed_covariance(ad::Graph& g, const MGPVars& vars,
                                           const Encounter& enc, const JitterPolicy& jitter) {
  const std::size_t m = enc.size();
  const std::size_t d = vars.channels;
  if (m == 0) throw ContractError("observed_covariance: encounter " + enc.id + " is empty");
  auto kd = task_kernel(vars);
  auto inv_l = ad::exp(ad::neg(vars.log_length_scale));
  const auto t = observation_times(enc);
  auto kt = ou_matrix(g, t, t, inv_l);

  std::vector<std::int64_t> pair_idx(m * m), noise_idx(m * m, -1);
  for (std::size_t a = 0; a < m; ++a) {
    const auto ca = enc.observations[a].channel;
    if (ca >= d) throw ContractError("observed_covariance: channel out of range in " + enc.id);
    for (std::size_t b = 0; b < m; ++b)
      pair_idx[a * m + b] = static_cast<std::int64_t>(ca * d + enc.observations[b].channel);
    noise_idx[a * m + a] = static_cast<std::int64_t>(ca);
  }
  auto kd_obs = ad::gather(kd, std::move(pair_idx), {m, m});
  auto noise = ad::gather(ad::exp(vars.log_noise), std::move(noise_idx), {m, m});
  ObservedCovarianceVars out;
  out.covariance = ad::add(ad::mul(kd_obs, kt), noise);
  auto [factor, used] = factor_with_jitter(g, out.covariance, jitter, enc.id);
  out.factor = factor;
  out.jitter = used;
  return out;
}

PosteriorVars posterior(ad::Graph& g, const MGPVars& vars, const Encounter& enc,
                        const Grid& grid, const JitterPolicy& jitter) {
  const std::size_t d = vars.channels;
  const std::size_t m = enc.size();
  const std::size_t x = grid.size();
  const std::size_t n = d * x;
  auto obs = observed_covariance(g, vars, enc, jitter);
  auto kd = task_kernel(vars);
  auto inv_l = ad::exp(ad::neg(vars.log_length_scale));

  std::vector<double> y(m);
  for (std::size_t a = 0; a < m; ++a) y[a] = enc.observations[a].value;
  auto yv = g.constant({m}, std::move(y));
  auto u = ad::triangular_solve(obs.factor, yv, false);
  auto alpha = ad::triangular_solve(obs.factor, u, true);  // Sigma_i^-1 y

  // Mean: (K^D kron K^{XT}) alpha_full, where alpha_full scatters alpha onto
  // the D x T lattice of distinct observed times (zeros where unobserved).
  std::vector<double> times;
  for (const auto& o : enc.observations)
    if (times.empty() || times.back() != o.time) times.push_back(o.time);
  const std::size_t nt = times.size();
  std::vector<double> scatter(d * nt * m, 0.0);
  for (std::size_t a = 0; a < m; ++a) {
    const auto& o = enc.observations[a];
    const auto ti = static_cast<std::size_t>(
        std::lower_bound(times.begin(), times.end(), o.time) - times.begin());
    scatter[(o.channel * nt + ti) * m + a] = 1.0;
  }
  auto alpha_full = ad::matmul(g.constant({d * nt, m}, std::move(scatter)), alpha);
  auto kxt = ou_matrix(g, grid.times, times, inv_l);
  PosteriorVars post;
  post.channels = d;
  post.grid_size = x;
  post.mean = ad::kron_matvec(kd, kxt, alpha_full);

  // Cross covariance between grid entries (d, x) and observations a.
  const auto t_obs = observation_times(enc);
  auto kx_obs = ou_matrix(g, grid.times, t_obs, inv_l);  // X x m
  std::vector<std::int64_t> cross_kd(n * m), cross_t(n * m);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t i = 0; i < x; ++i)
      for (std::size_t a = 0; a < m; ++a) {
        cross_kd[(c * x + i) * m + a] = static_cast<std::int64_t>(c * d + enc.observations[a].channel);
        cross_t[(c * x + i) * m + a] = static_cast<std::int64_t>(i * m + a);
      }
  auto cross = ad::mul(ad::gather(kd, std::move(cross_kd), {n, m}),
                       ad::gather(kx_obs, std::move(cross_t), {n, m}));
  auto w = ad::triangular_solve(obs.factor, ad::transpose(cross), false);  // m x n

  auto kx = ou_matrix(g, grid.times, grid.times, inv_l);
  std::vector<std::int64_t> prior_kd(n * n), prior_t(n * n);
  for (std::size_t c = 0; c < d; ++c)
    for (std::size_t i = 0; i < x; ++i)
      for (std::size_t c2 = 0; c2 < d; ++c2)
        for (std::size_t i2 = 0; i2 < x; ++i2) {
          const std::size_t r = c * x + i, s = c2 * x + i2;
          prior_kd[r * n + s] = static_cast<std::int64_t>(c * d + c2);
          prior_t[r * n + s] = static_cast<std::int64_t>(i * x + i2);
        }
  auto prior = ad::mul(ad::gather(kd, std::move(prior_kd), {n, n}),
                       ad::gather(kx, std::move(prior_t), {n, n}));
  post.covariance = ad::sub(prior, ad::matmul(ad::transpose(w), w));
  return post;
}

std::vector<std::vector<double>> standard_normal_draws(std::size_t count, std::size_t dim,
                                                       std::uint64_t seed) {
  std::mt19937_64 eng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> out(count, std::vector<double>(dim));
  for (auto& v : out)
    for (auto& e : v) e = normal(eng);
  return out;
}

std::vector<ad::Var> draw_samples(ad::Graph& g, const PosteriorVars& post,
                                  std::span<const std::vector<double>> noise,
                                  const JitterPolicy& jitter) {
  const std::size_t n = post.channels * post.grid_size;
  const auto cov = post.covariance.values();
  const bool degenerate =
      std::all_of(cov.begin(), cov.end(), [](double v) { return v == 0.0; }) && jitter.initial == 0.0;
  ad::Var r;
  if (!degenerate) r = factor_with_jitter(g, post.covariance, jitter, "posterior").first;
  std::vector<ad::Var> out;
  out.reserve(noise.size());
  for (const auto& xi : noise) {
    if (xi.size() != n)
      throw ShapeError("draw_samples: noise has " + std::to_string(xi.size()) + " entries, expected " +
                       std::to_string(n));
    ad::Var z = degenerate ? post.mean : ad::add(post.mean, ad::matmul(r, g.constant({n}, xi)));
    out.push_back(ad::reshape(z, {post.channels, post.grid_size}));
  }
  return out;
}

std::vector<ad::Var> draw_samples(ad::Graph& g, const PosteriorVars& post, std::size_t count,
                                  std::uint64_t seed, const JitterPolicy& jitter) {
  if (count < 1) throw ParameterError("draw_samples: count must be >= 1");
  auto noise = standard_normal_draws(count, post.channels * post.grid_size, seed);
  return draw_samples(g, post, noise, jitter);
}

ObservedCovariance observed_covariance(const Encounter& enc, const MGPParams& params,
                                       const JitterPolicy& jitter) {
  ad::Graph g;
  auto vars = bind(g, params, false);
  auto cov = observed_covariance(g, vars, enc, jitter);
  ObservedCovariance out;
  out.size = enc.size();
  out.matrix.assign(cov.covariance.values().begin(), cov.covariance.values().end());
  out.factor.assign(cov.factor.values().begin(), cov.factor.values().end());
  out.jitter = cov.jitter;
  return out;
}

Posterior posterior(const Encounter& enc, const Grid& grid, const MGPParams& params,
                    const JitterPolicy& jitter) {
  ad::Graph g;
  auto vars = bind(g, params, false);
  auto post = posterior(g, vars, enc, grid, jitter);
  Posterior out;
  out.channels = post.channels;
  out.grid_size = post.grid_size;
  out.mean.assign(post.mean.values().begin(), post.mean.values().end());
  out.covariance.assign(post.covariance.values().begin(), post.covariance.values().end());
  return out;
}

std::vector<std::vector<double>> draw_samples(const Posterior& post, std::size_t count,
                                              std::uint64_t seed, const JitterPolicy& jitter) {
  ad::Graph g;
  PosteriorVars pv;
  pv.channels = post.channels;
  pv.grid_size = post.grid_size;
  pv.mean = g.constant({post.dim()}, post.mean);
  pv.covariance = g.constant({post.dim(), post.dim()}, post.covariance);
  auto draws = draw_samples(g, pv, count, seed, jitter);
  std::vector<std::vector<double>> out;
  out.reserve(draws.size());
  for (auto& z : draws) out.emplace_back(z.values().begin(), z.values().end());
  return out;
}

}  // namespace mgptcn::mgp
