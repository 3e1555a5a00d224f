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

// End-to-end optimisation of the GP adapter and the TCN against the Monte
// Carlo expected loss, the Raw-TCN baseline on imputed hourly grids, early
// stopping on validation AUPRC and a seeded random hyperparameter search.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mgptcn/diffcore.hpp"
#include "mgptcn/encounter.hpp"
#include "mgptcn/mgp.hpp"
#include "mgptcn/tcn.hpp"

namespace mgptcn::training {

enum class ModelKind { kMgpTcn, kRawTcn };
std::string to_string(ModelKind kind);
ModelKind model_kind_from_string(const std::string& name);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 20;
  std::size_t mc_samples = 10;
  std::size_t max_epochs = 50;
  std::size_t patience = 5;
  std::uint64_t seed = 0;
  ModelKind model_kind = ModelKind::kMgpTcn;
  tcn::TCNConfig tcn;
  double max_seconds = 0.0;  // 0: no wall-clock cap
  // false: one dropout mask per encounter, shared by its Monte Carlo samples.
  bool dropout_per_sample = true;
  std::size_t workers = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Rejects unknown keys; missing keys keep their defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);

struct ModelState {
  ModelKind kind = ModelKind::kMgpTcn;
  std::size_t channels = 0;
  mgp::MGPParams mgp;  // unused for raw-tcn
  tcn::TCNConfig tcn_config;
  tcn::TCNWeights weights;

  static ModelState initial(ModelKind kind, std::size_t channels, const tcn::TCNConfig& config,
                            std::uint64_t seed);
  // Flat parameter vector: GP parameters (mgp-tcn only) then TCN tensors.
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  std::size_t parameter_count() const;
};

struct Checkpoint {
  std::size_t epoch = 0;
  ModelState model;
  double validation_auprc = 0.0;
  double validation_auc = 0.0;
  bool timed_out = false;
  std::string rng_digest;
  TrainConfig config;
};

nlohmann::json to_json(const Checkpoint& c);
Checkpoint checkpoint_from_json(const nlohmann::json& j);
// SHA-256 of the canonical JSON serialisation.
std::string checkpoint_digest(const Checkpoint& c);

// ---- Loss -------------------------------------------------------------------

struct GraphModel {
  std::optional<mgp::MGPVars> mgp;
  tcn::TCNVars tcn;
};

GraphModel bind(ad::Graph& g, const ModelState& model, bool trainable);

// Per-encounter Monte Carlo term (1/S) sum_s BCE(f(z_s), label) using the
// supplied standard-normal draws (one vector of length D*X per sample).
// Throws ContractError when the encounter has fewer than S observations.
ad::Var encounter_mc_term(ad::Graph& g, const GraphModel& vars, const Encounter& enc,
                          std::span<const std::vector<double>> noise, const tcn::Dropout& dropout = {},
                          bool dropout_per_sample = true);

// Raw-TCN term: BCE of the TCN on the carry-forward hourly grid.
ad::Var encounter_raw_term(ad::Graph& g, const GraphModel& vars, const Encounter& enc,
                           std::size_t channels, const tcn::Dropout& dropout = {});

// L2 over the TCN kernels (conv, projection and head weights).
ad::Var l2_term(const GraphModel& vars, const ModelState& model, double l2);

// Noise for one encounter in one batch: fresh per (seed, epoch, encounter id).
std::vector<std::vector<double>> batch_noise(std::uint64_t seed, std::size_t epoch, const std::string& id,
                                             std::size_t samples, std::size_t dim);

// Batch loss on one graph: mean over encounters of their terms plus the L2
// term. `noise[i]` holds encounter i's draws (ignored for raw-tcn).
ad::Var mc_loss(ad::Graph& g, const GraphModel& vars, const ModelState& model, std::span<const Encounter> batch,
                std::span<const std::vector<std::vector<double>>> noise, double l2);

struct LossAndGradient {
  double loss = 0.0;
  std::vector<double> gradient;  // matches ModelState::flatten()
};

// Same objective as mc_loss, with one graph per encounter evaluated on
// `workers` threads and gradients reduced in encounter order.
LossAndGradient batch_loss_and_gradient(const ModelState& model, std::span<const Encounter> batch,
                                        std::span<const std::vector<std::vector<double>>> noise, double l2,
                                        bool train_mode, std::uint64_t dropout_seed, std::size_t workers,
                                        bool dropout_per_sample = true);

// ---- Optimiser --------------------------------------------------------------

class Adam {
 public:
  explicit Adam(std::size_t size, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8);
  void step(std::span<double> params, std::span<const double> grad);
  std::size_t steps() const { return t_; }

 private:
  double lr_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

// ---- Prediction ---------------------------------------------------------------

// Probability for one (already truncated) encounter. MGP-TCN averages the
// sigmoid over S posterior samples seeded by the encounter id.
double predict(const ModelState& model, const Encounter& enc, std::size_t mc_samples, std::uint64_t seed);
std::vector<double> predict(const ModelState& model, std::span<const Encounter> encounters, std::size_t mc_samples,
                            std::uint64_t seed, std::size_t workers);

// ---- Training loop --------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double validation_auprc = 0.0;
  double validation_auc = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  Checkpoint best;
  std::vector<EpochLog> history;
};

// Encounters are truncated at onset (horizon 0) before use. `log`, when set,
// receives one line per epoch.
TrainResult train(std::span<const Encounter> train_set, std::span<const Encounter> validation,
                  std::size_t channels, const TrainConfig& config, std::ostream* log = nullptr);

// ---- Hyperparameter search -------------------------------------------------------

struct SearchSpace {
  double lr_min = 5e-4, lr_max = 5e-3;            // log-uniform
  std::size_t batch_min = 10, batch_max = 40;
  std::size_t blocks_min = 4, blocks_max = 9;
  std::size_t filters_min = 15, filters_max = 90;
  std::size_t width_min = 2, width_max = 5;
  double dropout_min = 0.0, dropout_max = 0.1;
  double l2_min = 0.01, l2_max = 100.0;           // log-uniform
};

TrainConfig sample_config(const SearchSpace& space, const TrainConfig& base, std::mt19937_64& rng);

struct SearchResult {
  TrainConfig best;
  double best_score = 0.0;
  std::size_t best_index = 0;
  std::vector<double> scores;
};

// Draws n_calls configs and keeps the one with the highest objective; ties go
// to the earliest draw.
SearchResult random_search(const SearchSpace& space, const TrainConfig& base, std::size_t n_calls,
                           std::uint64_t seed, const std::function<double(const TrainConfig&)>& objective);

}  // namespace mgptcn::training
