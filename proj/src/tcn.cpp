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

#include "mgptcn/tcn.hpp"

#include <cmath>

#include "mgptcn/errors.hpp"

namespace mgptcn::tcn {

void TCNConfig::validate() const {
  auto fail = [](const std::string& what) { throw ParameterError("TCNConfig: " + what); };
  if (num_blocks < 4 || num_blocks > 9) fail("num_blocks must be in [4, 9]");
  if (filters < 15 || filters > 90) fail("filters must be in [15, 90]");
  if (filter_width < 2 || filter_width > 5) fail("filter_width must be in [2, 5]");
  if (!(dropout >= 0.0 && dropout <= 0.1)) fail("dropout must be in [0, 0.1]");
  if (!(l2_penalty >= 0.01 && l2_penalty <= 100.0)) fail("l2_penalty must be in [0.01, 100]");
}

std::size_t TCNConfig::receptive_field() const {
  return 1 + 2 * (filter_width - 1) * ((std::size_t{1} << num_blocks) - 1);
}

namespace {

Tensor filled(ad::Shape shape, double v) {
  Tensor t;
  t.values.assign(ad::shape_size(shape), v);
  t.shape = std::move(shape);
  return t;
}

Tensor uniform(ad::Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t = filled(std::move(shape), 0.0);
  for (auto& v : t.values) v = u(rng);
  return t;
}

template <typename W, typename T>
void collect(W& w, std::vector<T*>& out) {
  for (auto& b : w.blocks) {
    for (auto* t : {&b.conv1, &b.bias1, &b.norm1_gain, &b.norm1_bias, &b.conv2, &b.bias2,
                    &b.norm2_gain, &b.norm2_bias})
      out.push_back(t);
    if (b.proj) {
      out.push_back(&*b.proj);
      out.push_back(&*b.proj_bias);
    }
  }
  out.push_back(&w.head);
  out.push_back(&w.head_bias);
}

}  // namespace

TCNWeights TCNWeights::zeros(const TCNConfig& config, std::size_t input_channels) {
  TCNWeights w;
  w.input_channels = input_channels;
  const std::size_t f = config.filters, k = config.filter_width;
  std::size_t cin = input_channels;
  for (std::size_t n = 0; n < config.num_blocks; ++n) {
    BlockWeights b;
    b.conv1 = filled({f, cin, k}, 0.0);
    b.bias1 = filled({f}, 0.0);
    b.norm1_gain = filled({f}, 0.0);
    b.norm1_bias = filled({f}, 0.0);
    b.conv2 = filled({f, f, k}, 0.0);
    b.bias2 = filled({f}, 0.0);
    b.norm2_gain = filled({f}, 0.0);
    b.norm2_bias = filled({f}, 0.0);
    if (cin != f) {
      b.proj = filled({f, cin, 1}, 0.0);
      b.proj_bias = filled({f}, 0.0);
    }
    w.blocks.push_back(std::move(b));
    cin = f;
  }
  w.head = filled({f}, 0.0);
  w.head_bias = filled({}, 0.0);
  return w;
}

TCNWeights TCNWeights::initial(const TCNConfig& config, std::size_t input_channels,
                               std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  TCNWeights w = zeros(config, input_channels);
  const double k = static_cast<double>(config.filter_width);
  std::size_t cin = input_channels;
  for (auto& b : w.blocks) {
    b.conv1 = uniform(b.conv1.shape, 1.0 / std::sqrt(static_cast<double>(cin) * k), rng);
    b.conv2 = uniform(b.conv2.shape, 1.0 / std::sqrt(static_cast<double>(config.filters) * k), rng);
    std::fill(b.norm1_gain.values.begin(), b.norm1_gain.values.end(), 1.0);
    std::fill(b.norm2_gain.values.begin(), b.norm2_gain.values.end(), 1.0);
    if (b.proj) b.proj = uniform(b.proj->shape, 1.0 / std::sqrt(static_cast<double>(cin)), rng);
    cin = config.filters;
  }
  w.head = uniform(w.head.shape, 1.0 / std::sqrt(static_cast<double>(config.filters)), rng);
  return w;
}

std::vector<Tensor*> TCNWeights::tensors() {
  std::vector<Tensor*> out;
  collect(*this, out);
  return out;
}

std::vector<const Tensor*> TCNWeights::tensors() const {
  std::vector<const Tensor*> out;
  collect(*this, out);
  return out;
}

std::vector<bool> TCNWeights::penalized_mask() const {
  std::vector<bool> mask;
  for (const auto& b : blocks) {
    for (bool p : {true, false, false, false, true, false, false, false}) mask.push_back(p);
    if (b.proj) {
      mask.push_back(true);
      mask.push_back(false);
    }
  }
  mask.push_back(true);
  mask.push_back(false);
  return mask;
}

std::size_t TCNWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto* t : tensors()) n += t->values.size();
  return n;
}

void TCNWeights::validate(const TCNConfig& config) const {
  const TCNWeights ref = zeros(config, input_channels);
  const auto mine = tensors();
  const auto want = ref.tensors();
  if (mine.size() != want.size())
    throw ShapeError("TCN weights: expected " + std::to_string(want.size()) + " tensors, found " +
                     std::to_string(mine.size()));
  for (std::size_t i = 0; i < mine.size(); ++i) {
    if (mine[i]->shape != want[i]->shape || mine[i]->values.size() != want[i]->values.size())
      throw ShapeError("TCN weights: tensor " + std::to_string(i) + " has shape " +
                       ad::shape_str(mine[i]->shape) + ", config requires " +
                       ad::shape_str(want[i]->shape));
  }
}

nlohmann::json to_json(const TCNConfig& c) {
  return {{"num_blocks", c.num_blocks},
          {"filters", c.filters},
          {"filter_width", c.filter_width},
          {"dropout", c.dropout},
          {"l2_penalty", c.l2_penalty}};
}

TCNConfig config_from_json(const nlohmann::json& j) {
  TCNConfig c;
  c.num_blocks = j.at("num_blocks").get<std::size_t>();
  c.filters = j.at("filters").get<std::size_t>();
  c.filter_width = j.at("filter_width").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.l2_penalty = j.at("l2_penalty").get<double>();
  return c;
}

nlohmann::json to_json(const TCNWeights& w) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto* t : w.tensors()) arr.push_back({{"shape", t->shape}, {"values", t->values}});
  return {{"input_channels", w.input_channels}, {"tensors", arr}};
}

TCNWeights weights_from_json(const nlohmann::json& j, const TCNConfig& config) {
  TCNWeights w = TCNWeights::zeros(config, j.at("input_channels").get<std::size_t>());
  const auto& arr = j.at("tensors");
  auto slots = w.tensors();
  if (arr.size() != slots.size())
    throw ShapeError("TCN checkpoint: " + std::to_string(arr.size()) + " tensors for a config needing " +
                     std::to_string(slots.size()));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto shape = arr[i].at("shape").get<ad::Shape>();
    auto values = arr[i].at("values").get<std::vector<double>>();
    if (shape != slots[i]->shape || values.size() != slots[i]->values.size())
      throw ShapeError("TCN checkpoint: tensor " + std::to_string(i) + " declared " +
                       ad::shape_str(shape) + ", config requires " + ad::shape_str(slots[i]->shape));
    slots[i]->values = std::move(values);
  }
  return w;
}

TCNVars bind(ad::Graph& g, const TCNWeights& weights, bool trainable) {
  auto make = [&](const Tensor& t) {
    return trainable ? g.leaf(t.shape, t.values) : g.constant(t.shape, t.values);
  };
  TCNVars v;
  for (const auto& b : weights.blocks) {
    BlockVars bv;
    bv.conv1 = make(b.conv1);
    bv.bias1 = make(b.bias1);
    bv.norm1_gain = make(b.norm1_gain);
    bv.norm1_bias = make(b.norm1_bias);
    bv.conv2 = make(b.conv2);
    bv.bias2 = make(b.bias2);
    bv.norm2_gain = make(b.norm2_gain);
    bv.norm2_bias = make(b.norm2_bias);
    for (auto x : {bv.conv1, bv.bias1, bv.norm1_gain, bv.norm1_bias, bv.conv2, bv.bias2,
                   bv.norm2_gain, bv.norm2_bias})
      v.all.push_back(x);
    if (b.proj) {
      bv.proj = make(*b.proj);
      bv.proj_bias = make(*b.proj_bias);
      v.all.push_back(*bv.proj);
      v.all.push_back(*bv.proj_bias);
    }
    v.blocks.push_back(std::move(bv));
  }
  v.head = make(weights.head);
  v.head_bias = make(weights.head_bias);
  v.all.push_back(v.head);
  v.all.push_back(v.head_bias);
  return v;
}

ad::Var causal_conv(ad::Var x, ad::Var kernel, ad::Var bias, std::size_t dilation) {
  return ad::causal_dilated_conv(x, kernel, bias, dilation);
}

namespace {

ad::Var apply_dropout(ad::Var x, const Dropout& dropout) {
  if (!dropout.active()) return x;
  std::bernoulli_distribution keep(1.0 - dropout.rate);
  const double scale = 1.0 / (1.0 - dropout.rate);
  std::vector<double> mask(x.size());
  for (auto& m : mask) m = keep(*dropout.rng) ? scale : 0.0;
  return ad::mul(x, x.graph().constant(x.shape(), std::move(mask)));
}

}  // namespace

ad::Var temporal_block(ad::Var x, const BlockVars& b, std::size_t dilation, const Dropout& dropout) {
  auto h = ad::relu(causal_conv(x, b.conv1, b.bias1, dilation));
  h = apply_dropout(ad::layer_norm(h, b.norm1_gain, b.norm1_bias), dropout);
  h = ad::relu(causal_conv(h, b.conv2, b.bias2, dilation));
  h = apply_dropout(ad::layer_norm(h, b.norm2_gain, b.norm2_bias), dropout);
  auto residual = b.proj ? causal_conv(x, *b.proj, *b.proj_bias, 1) : x;
  return ad::add(residual, h);
}

ad::Var tcn_features(ad::Var z, const TCNVars& vars, const Dropout& dropout) {
  if (z.shape().size() != 2 || z.shape()[1] < 1)
    throw ShapeError("tcn: input must be [channels, T>=1], got " + ad::shape_str(z.shape()));
  ad::Var h = z;
  std::size_t dilation = 1;
  for (const auto& b : vars.blocks) {
    h = temporal_block(h, b, dilation, dropout);
    dilation *= 2;
  }
  return h;
}

ad::Var tcn_logit(ad::Var z, const TCNVars& vars, const Dropout& dropout) {
  auto h = tcn_features(z, vars, dropout);
  const std::size_t f = h.shape()[0], t = h.shape()[1];
  std::vector<std::int64_t> last(f);
  for (std::size_t i = 0; i < f; ++i) last[i] = static_cast<std::int64_t>(i * t + t - 1);
  auto feat = ad::gather(h, std::move(last), {f});
  return ad::add(ad::sum(ad::mul(feat, vars.head)), vars.head_bias);
}

double tcn_forward(std::span<const double> z, std::size_t time_steps, const TCNConfig& config,
                   const TCNWeights& weights, bool train_mode, std::uint64_t dropout_seed) {
  if (time_steps == 0 || z.size() != weights.input_channels * time_steps)
    throw ShapeError("tcn_forward: input of " + std::to_string(z.size()) + " values is not " +
                     std::to_string(weights.input_channels) + " x " + std::to_string(time_steps));
  ad::Graph g;
  auto vars = bind(g, weights, false);
  auto x = g.constant({weights.input_channels, time_steps}, {z.begin(), z.end()});
  std::mt19937_64 rng(dropout_seed);
  Dropout dropout{train_mode ? config.dropout : 0.0, train_mode ? &rng : nullptr};
  return tcn_logit(x, vars, dropout).item();
}

}  // namespace mgptcn::tcn
