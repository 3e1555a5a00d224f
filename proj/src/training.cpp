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

#include "mgptcn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include "mgptcn/data.hpp"
#include "mgptcn/digest.hpp"
#include "mgptcn/errors.hpp"
#include "mgptcn/eval.hpp"
#include "mgptcn/parallel.hpp"
#include "mgptcn/rng.hpp"

namespace mgptcn::training {

std::string to_string(ModelKind kind) { return kind == ModelKind::kMgpTcn ? "mgp-tcn" : "raw-tcn"; }

ModelKind model_kind_from_string(const std::string& name) {
  if (name == "mgp-tcn") return ModelKind::kMgpTcn;
  if (name == "raw-tcn") return ModelKind::kRawTcn;
  throw ConfigError("unknown model kind '" + name + "' (expected mgp-tcn or raw-tcn)");
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("train config: " + what); };
  // Zero is accepted as a frozen-training mode.
  if (!(learning_rate == 0.0 || (learning_rate >= 5e-4 && learning_rate <= 5e-3)))
    fail("learning_rate must be 0 or in [5e-4, 5e-3]");
  if (batch_size < 10 || batch_size > 40) fail("batch_size must be in [10, 40]");
  if (mc_samples < 1) fail("mc_samples must be >= 1");
  if (max_epochs < 1) fail("max_epochs must be >= 1");
  if (patience < 1) fail("patience must be >= 1");
  if (!(max_seconds >= 0.0)) fail("max_seconds must be >= 0");
  tcn.validate();
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size}, {"mc_samples", c.mc_samples},
          {"max_epochs", c.max_epochs},       {"patience", c.patience},     {"seed", c.seed},
          {"model_kind", to_string(c.model_kind)}, {"tcn", tcn::to_json(c.tcn)}, {"max_seconds", c.max_seconds},
          {"dropout_per_sample", c.dropout_per_sample}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  const auto known = to_json(c);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError("train config: unknown key '" + it.key() + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("learning_rate", c.learning_rate);
  get("batch_size", c.batch_size);
  get("mc_samples", c.mc_samples);
  get("max_epochs", c.max_epochs);
  get("patience", c.patience);
  get("seed", c.seed);
  get("max_seconds", c.max_seconds);
  get("dropout_per_sample", c.dropout_per_sample);
  if (j.contains("model_kind")) c.model_kind = model_kind_from_string(j.at("model_kind").get<std::string>());
  if (j.contains("tcn")) {
    const auto& t = j.at("tcn");
    const auto tk = tcn::to_json(c.tcn);
    for (auto it = t.begin(); it != t.end(); ++it)
      if (!tk.contains(it.key())) throw ConfigError("train config: unknown tcn key '" + it.key() + "'");
    auto merged = tk;
    merged.update(t);
    c.tcn = tcn::config_from_json(merged);
  }
  return c;
}

// ---- Model state ----------------------------------------------------------------

ModelState ModelState::initial(ModelKind kind, std::size_t channels, const tcn::TCNConfig& config,
                               std::uint64_t seed) {
  ModelState s;
  s.kind = kind;
  s.channels = channels;
  s.tcn_config = config;
  if (kind == ModelKind::kMgpTcn) s.mgp = mgp::MGPParams::initial(channels);
  s.weights = tcn::TCNWeights::initial(config, channels, SeedStream(seed).child("init").seed());
  return s;
}

std::vector<double> ModelState::flatten() const {
  std::vector<double> out;
  if (kind == ModelKind::kMgpTcn) {
    out.insert(out.end(), mgp.task_raw.begin(), mgp.task_raw.end());
    out.insert(out.end(), mgp.log_noise.begin(), mgp.log_noise.end());
    out.push_back(mgp.log_length_scale);
  }
  for (const auto* t : weights.tensors()) out.insert(out.end(), t->values.begin(), t->values.end());
  return out;
}

void ModelState::assign(std::span<const double> flat) {
  if (flat.size() != parameter_count())
    throw ShapeError("ModelState::assign: " + std::to_string(flat.size()) + " values for " +
                     std::to_string(parameter_count()) + " parameters");
  std::size_t k = 0;
  auto take = [&](std::vector<double>& dst) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(k), flat.begin() + static_cast<std::ptrdiff_t>(k + dst.size()),
              dst.begin());
    k += dst.size();
  };
  if (kind == ModelKind::kMgpTcn) {
    take(mgp.task_raw);
    take(mgp.log_noise);
    mgp.log_length_scale = flat[k++];
  }
  for (auto* t : weights.tensors()) take(t->values);
}

std::size_t ModelState::parameter_count() const {
  std::size_t n = weights.parameter_count();
  if (kind == ModelKind::kMgpTcn) n += mgp.task_raw.size() + mgp.log_noise.size() + 1;
  return n;
}

nlohmann::json to_json(const Checkpoint& c) {
  nlohmann::json model = {{"kind", to_string(c.model.kind)},
                          {"channels", c.model.channels},
                          {"tcn_config", tcn::to_json(c.model.tcn_config)},
                          {"weights", tcn::to_json(c.model.weights)}};
  if (c.model.kind == ModelKind::kMgpTcn)
    model["mgp"] = {{"task_raw", c.model.mgp.task_raw},
                    {"log_noise", c.model.mgp.log_noise},
                    {"log_length_scale", c.model.mgp.log_length_scale}};
  return {{"format", "mgptcn-checkpoint/v1"},
          {"epoch", c.epoch},
          {"validation_auprc", c.validation_auprc},
          {"validation_auc", c.validation_auc},
          {"timed_out", c.timed_out},
          {"rng_digest", c.rng_digest},
          {"config", to_json(c.config)},
          {"model", model}};
}

Checkpoint checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "mgptcn-checkpoint/v1") throw ConfigError("not an mgptcn-checkpoint/v1 document");
  Checkpoint c;
  c.epoch = j.at("epoch").get<std::size_t>();
  c.validation_auprc = j.at("validation_auprc").get<double>();
  c.validation_auc = j.at("validation_auc").get<double>();
  c.timed_out = j.at("timed_out").get<bool>();
  c.rng_digest = j.at("rng_digest").get<std::string>();
  c.config = train_config_from_json(j.at("config"));
  const auto& m = j.at("model");
  c.model.kind = model_kind_from_string(m.at("kind").get<std::string>());
  c.model.channels = m.at("channels").get<std::size_t>();
  c.model.tcn_config = tcn::config_from_json(m.at("tcn_config"));
  c.model.weights = tcn::weights_from_json(m.at("weights"), c.model.tcn_config);
  if (c.model.weights.input_channels != c.model.channels)
    throw ShapeError("checkpoint: weights expect " + std::to_string(c.model.weights.input_channels) +
                     " channels, model declares " + std::to_string(c.model.channels));
  if (c.model.kind == ModelKind::kMgpTcn) {
    const auto& g = m.at("mgp");
    c.model.mgp.channels = c.model.channels;
    c.model.mgp.task_raw = g.at("task_raw").get<std::vector<double>>();
    c.model.mgp.log_noise = g.at("log_noise").get<std::vector<double>>();
    c.model.mgp.log_length_scale = g.at("log_length_scale").get<double>();
    const std::size_t d = c.model.channels;
    if (c.model.mgp.task_raw.size() != d * d || c.model.mgp.log_noise.size() != d)
      throw ShapeError("checkpoint: GP parameters do not match " + std::to_string(d) + " channels");
  }
  return c;
}

std::string checkpoint_digest(const Checkpoint& c) { return sha256_hex(to_json(c).dump()); }

// ---- Loss ---------------------------------------------------------------------

GraphModel bind(ad::Graph& g, const ModelState& model, bool trainable) {
  GraphModel v;
  if (model.kind == ModelKind::kMgpTcn) v.mgp = mgp::bind(g, model.mgp, trainable);
  v.tcn = tcn::bind(g, model.weights, trainable);
  return v;
}

namespace {

ad::Var bce_term(ad::Var logit, int label) {
  const std::vector<double> l{static_cast<double>(label)};
  return ad::sum(ad::bce_with_logits(ad::reshape(logit, {1}), l));
}

std::vector<ad::Var> parameter_vars(const GraphModel& v) {
  std::vector<ad::Var> out;
  if (v.mgp) {
    out.push_back(v.mgp->task_raw);
    out.push_back(v.mgp->log_noise);
    out.push_back(v.mgp->log_length_scale);
  }
  out.insert(out.end(), v.tcn.all.begin(), v.tcn.all.end());
  return out;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

ad::Var encounter_mc_term(ad::Graph& g, const GraphModel& vars, const Encounter& enc,
                          std::span<const std::vector<double>> noise, const tcn::Dropout& dropout,
                          bool dropout_per_sample) {
  if (!vars.mgp) throw ContractError("encounter_mc_term: model has no GP parameters");
  const std::size_t s = noise.size();
  if (s == 0) throw ParameterError("encounter_mc_term: need at least one sample");
  if (enc.size() < s)
    throw ContractError("encounter " + enc.id + " has " + std::to_string(enc.size()) + " observations, fewer than " +
                        std::to_string(s) + " Monte Carlo samples; it should have been masked");
  const auto grid = mgp::make_grid(enc);
  const auto post = mgp::posterior(g, *vars.mgp, enc, grid);
  const auto z = mgp::draw_samples(g, post, noise);
  std::optional<std::mt19937_64> shared;
  if (dropout.rng && !dropout_per_sample) shared = *dropout.rng;
  ad::Var total;
  for (const auto& zs : z) {
    if (shared) *dropout.rng = *shared;
    auto term = bce_term(tcn::tcn_logit(zs, vars.tcn, dropout), enc.label);
    total = total.valid() ? ad::add(total, term) : term;
  }
  return ad::mul(total, g.scalar(1.0 / static_cast<double>(s)));
}

ad::Var encounter_raw_term(ad::Graph& g, const GraphModel& vars, const Encounter& enc, std::size_t channels,
                           const tcn::Dropout& dropout) {
  const auto grid = data::bin_and_impute(enc, channels);
  auto x = g.constant({channels, grid.hours}, grid.values);
  return bce_term(tcn::tcn_logit(x, vars.tcn, dropout), enc.label);
}

ad::Var l2_term(const GraphModel& vars, const ModelState& model, double l2) {
  const auto mask = model.weights.penalized_mask();
  ad::Var total;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    auto sq = ad::sum(ad::mul(vars.tcn.all[i], vars.tcn.all[i]));
    total = total.valid() ? ad::add(total, sq) : sq;
  }
  return ad::mul(total, total.graph().scalar(l2));
}

std::vector<std::vector<double>> batch_noise(std::uint64_t seed, std::size_t epoch, const std::string& id,
                                             std::size_t samples, std::size_t dim) {
  const auto s = SeedStream(seed).child("sampling").child(epoch).child(id).seed();
  return mgp::standard_normal_draws(samples, dim, s);
}

ad::Var mc_loss(ad::Graph& g, const GraphModel& vars, const ModelState& model, std::span<const Encounter> batch,
                std::span<const std::vector<std::vector<double>>> noise, double l2) {
  if (batch.empty()) throw ConfigError("mc_loss: empty batch");
  ad::Var total;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto term = model.kind == ModelKind::kMgpTcn ? encounter_mc_term(g, vars, batch[i], noise[i])
                                                 : encounter_raw_term(g, vars, batch[i], model.channels);
    total = total.valid() ? ad::add(total, term) : term;
  }
  auto mean = ad::mul(total, g.scalar(1.0 / static_cast<double>(batch.size())));
  return ad::add(mean, l2_term(vars, model, l2));
}

LossAndGradient batch_loss_and_gradient(const ModelState& model, std::span<const Encounter> batch,
                                        std::span<const std::vector<std::vector<double>>> noise, double l2,
                                        bool train_mode, std::uint64_t dropout_seed, std::size_t workers,
                                        bool dropout_per_sample) {
  if (batch.empty()) throw ConfigError("empty batch");
  const std::size_t n = batch.size();
  const std::size_t p = model.parameter_count();
  std::vector<double> terms(n);
  std::vector<std::vector<double>> grads(n);
  const double rate = train_mode ? model.tcn_config.dropout : 0.0;
  parallel_for(n, workers, [&](std::size_t i) {
    ad::Graph g;
    auto vars = bind(g, model, true);
    std::mt19937_64 rng(SeedStream(dropout_seed).child(batch[i].id).seed());
    tcn::Dropout dropout{rate, &rng};
    auto term = model.kind == ModelKind::kMgpTcn ? encounter_mc_term(g, vars, batch[i], noise[i], dropout, dropout_per_sample)
                                                 : encounter_raw_term(g, vars, batch[i], model.channels, dropout);
    g.backward(term);
    terms[i] = term.item();
    auto& gr = grads[i];
    gr.reserve(p);
    for (const auto& v : parameter_vars(vars)) {
      auto gv = g.gradient(v);
      gr.insert(gr.end(), gv.begin(), gv.end());
    }
  });
  LossAndGradient out;
  out.gradient.assign(p, 0.0);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    out.loss += terms[i];
    for (std::size_t k = 0; k < p; ++k) out.gradient[k] += grads[i][k];
  }
  out.loss *= inv;
  for (auto& gk : out.gradient) gk *= inv;
  // L2 on the penalised TCN tensors.
  const auto mask = model.weights.penalized_mask();
  const auto tensors = model.weights.tensors();
  std::size_t offset = p - model.weights.parameter_count();
  double penalty = 0.0;
  for (std::size_t t = 0; t < tensors.size(); ++t) {
    const auto& vals = tensors[t]->values;
    if (mask[t]) {
      for (std::size_t k = 0; k < vals.size(); ++k) {
        penalty += vals[k] * vals[k];
        out.gradient[offset + k] += 2.0 * l2 * vals[k];
      }
    }
    offset += vals.size();
  }
  out.loss += l2 * penalty;
  return out;
}

// ---- Optimiser ---------------------------------------------------------------------

Adam::Adam(std::size_t size, double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), b1_(beta1), b2_(beta2), eps_(eps), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad) {
  if (params.size() != m_.size() || grad.size() != m_.size()) throw ShapeError("Adam: size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1_ * m_[i] + (1.0 - b1_) * grad[i];
    v_[i] = b2_ * v_[i] + (1.0 - b2_) * grad[i] * grad[i];
    params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps_);
  }
}

// ---- Prediction -----------------------------------------------------------------------

double predict(const ModelState& model, const Encounter& enc, std::size_t mc_samples, std::uint64_t seed) {
  if (model.kind == ModelKind::kRawTcn) {
    const auto grid = data::bin_and_impute(enc, model.channels);
    return sigmoid(tcn::tcn_forward(grid.values, grid.hours, model.tcn_config, model.weights));
  }
  const auto grid = mgp::make_grid(enc);
  const auto post = mgp::posterior(enc, grid, model.mgp);
  const auto samples = mgp::draw_samples(post, mc_samples, SeedStream(seed).child("predict").child(enc.id).seed());
  double total = 0.0;
  for (const auto& z : samples) total += sigmoid(tcn::tcn_forward(z, grid.size(), model.tcn_config, model.weights));
  return total / static_cast<double>(samples.size());
}

std::vector<double> predict(const ModelState& model, std::span<const Encounter> encounters, std::size_t mc_samples,
                            std::uint64_t seed, std::size_t workers) {
  std::vector<double> out(encounters.size());
  parallel_for(encounters.size(), workers,
               [&](std::size_t i) { out[i] = predict(model, encounters[i], mc_samples, seed); });
  return out;
}

// ---- Training loop --------------------------------------------------------------------------

namespace {

std::vector<Encounter> at_onset(std::span<const Encounter> encounters, const std::string& split) {
  if (encounters.empty()) throw ConfigError("train: " + split + " split is empty");
  std::vector<Encounter> out;
  out.reserve(encounters.size());
  for (const auto& e : encounters) out.push_back(data::truncate_to_horizon(e, 0.0));
  return out;
}

double norm(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TrainResult train(std::span<const Encounter> train_set, std::span<const Encounter> validation, std::size_t channels,
                  const TrainConfig& config, std::ostream* log) {
  config.validate();
  const auto train0 = at_onset(train_set, "training");
  const auto val0 = at_onset(validation, "validation");
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };

  ModelState model = ModelState::initial(config.model_kind, channels, config.tcn, config.seed);
  std::vector<double> params = model.flatten();
  Adam adam(params.size(), config.learning_rate);
  const SeedStream root(config.seed);

  TrainResult result;
  bool have_best = false;
  std::size_t bad_epochs = 0;

  auto evaluate = [&](std::size_t epoch, double train_loss, bool timed_out) {
    const auto scores = predict(model, val0, config.mc_samples, config.seed, config.workers);
    std::vector<eval::Scored> s(val0.size());
    for (std::size_t i = 0; i < val0.size(); ++i) s[i] = {val0[i].id, val0[i].label, scores[i]};
    EpochLog entry{epoch, train_loss, eval::auprc(s, "validation"), eval::auc(s, "validation"), elapsed()};
    result.history.push_back(entry);
    if (log)
      *log << "epoch=" << entry.epoch << " train_loss=" << format_double(entry.train_loss)
           << " val_auprc=" << format_double(entry.validation_auprc) << " val_auc=" << format_double(entry.validation_auc)
           << " seconds=" << entry.seconds << '\n';
    if (!have_best || entry.validation_auprc > result.best.validation_auprc) {
      have_best = true;
      bad_epochs = 0;
      Checkpoint& b = result.best;
      b.epoch = epoch;
      b.model = model;
      b.validation_auprc = entry.validation_auprc;
      b.validation_auc = entry.validation_auc;
      b.config = config;
      Digest d;
      d.update(std::string_view("seed")).update(config.seed).update(static_cast<std::uint64_t>(epoch));
      d.update(static_cast<std::uint64_t>(adam.steps()));
      b.rng_digest = d.hex();
    } else {
      ++bad_epochs;
    }
    if (timed_out) result.best.timed_out = true;
  };

  std::vector<std::size_t> order(train0.size());
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto shuffle_rng = root.child("shuffle").child(epoch).engine();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t batches = 0;
    bool timed_out = false;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + config.batch_size);
      std::vector<Encounter> batch;
      std::vector<std::vector<std::vector<double>>> noise;
      for (std::size_t k = b0; k < b1; ++k) {
        const auto& e = train0[order[k]];
        batch.push_back(e);
        if (model.kind == ModelKind::kMgpTcn)
          noise.push_back(batch_noise(config.seed, epoch, e.id, config.mc_samples, channels * mgp::make_grid(e).size()));
        else
          noise.emplace_back();
      }
      const auto dropout_seed = root.child("dropout").child(epoch).child(b0).seed();
      auto lg = batch_loss_and_gradient(model, batch, noise, config.tcn.l2_penalty, true, dropout_seed, config.workers,
                                        config.dropout_per_sample);
      if (!std::isfinite(lg.loss) || !std::isfinite(norm(lg.gradient))) {
        std::ostringstream os;
        os << "non-finite training loss at epoch " << epoch << ", batch " << batches << ": loss=" << lg.loss
           << " gradient_norm=" << norm(lg.gradient) << " parameter_norm=" << norm(params);
        if (model.kind == ModelKind::kMgpTcn) os << " log_length_scale=" << model.mgp.log_length_scale;
        throw NumericalError(os.str());
      }
      adam.step(params, lg.gradient);
      model.assign(params);
      loss_sum += lg.loss;
      ++batches;
      if (config.max_seconds > 0.0 && elapsed() > config.max_seconds) {
        timed_out = true;
        break;
      }
    }
    evaluate(epoch, loss_sum / static_cast<double>(std::max<std::size_t>(batches, 1)), timed_out);
    if (timed_out || bad_epochs >= config.patience) break;
  }
  return result;
}

// ---- Hyperparameter search ----------------------------------------------------------------------

TrainConfig sample_config(const SearchSpace& space, const TrainConfig& base, std::mt19937_64& rng) {
  auto log_uniform = [&](double a, double b) {
    std::uniform_real_distribution<double> u(std::log(a), std::log(b));
    return std::exp(u(rng));
  };
  auto int_in = [&](std::size_t a, std::size_t b) { return std::uniform_int_distribution<std::size_t>(a, b)(rng); };
  TrainConfig c = base;
  c.learning_rate = log_uniform(space.lr_min, space.lr_max);
  c.batch_size = int_in(space.batch_min, space.batch_max);
  c.tcn.num_blocks = int_in(space.blocks_min, space.blocks_max);
  c.tcn.filters = int_in(space.filters_min, space.filters_max);
  c.tcn.filter_width = int_in(space.width_min, space.width_max);
  c.tcn.dropout = std::uniform_real_distribution<double>(space.dropout_min, space.dropout_max)(rng);
  c.tcn.l2_penalty = log_uniform(space.l2_min, space.l2_max);
  return c;
}

SearchResult random_search(const SearchSpace& space, const TrainConfig& base, std::size_t n_calls, std::uint64_t seed,
                           const std::function<double(const TrainConfig&)>& objective) {
  if (n_calls < 1) throw ParameterError("random_search: n_calls must be >= 1");
  auto rng = SeedStream(seed).child("search").engine();
  SearchResult r;
  for (std::size_t i = 0; i < n_calls; ++i) {
    auto c = sample_config(space, base, rng);
    const double score = objective(c);
    r.scores.push_back(score);
    if (i == 0 || score > r.best_score) {
      r.best = c;
      r.best_score = score;
      r.best_index = i;
    }
  }
  return r;
}

}  // namespace mgptcn::training
