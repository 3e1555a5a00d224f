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

// Causal dilated temporal convolutional classifier. Block n uses dilation
// 2^n; every block is
//   out = proj(x) + [conv -> relu -> layer_norm -> dropout] x 2
// with proj the identity when channel counts match and a width-1 convolution
// otherwise. The logit is a linear head on the final time step.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "mgptcn/diffcore.hpp"

namespace mgptcn::tcn {

struct TCNConfig {
  std::size_t num_blocks = 4;
  std::size_t filters = 30;
  std::size_t filter_width = 2;
  double dropout = 0.0;
  double l2_penalty = 0.01;

  // Throws ParameterError when a field leaves its search range.
  void validate() const;
  // Span of past inputs visible to the final output:
  // 1 + 2 (width - 1) (2^blocks - 1).
  std::size_t receptive_field() const;
};

struct Tensor {
  ad::Shape shape;
  std::vector<double> values;
};

struct BlockWeights {
  Tensor conv1, bias1, norm1_gain, norm1_bias;
  Tensor conv2, bias2, norm2_gain, norm2_bias;
  std::optional<Tensor> proj, proj_bias;
};

struct TCNWeights {
  std::size_t input_channels = 0;
  std::vector<BlockWeights> blocks;
  Tensor head, head_bias;

  // Centered uniform init with bound 1/sqrt(fan_in); zero biases; unit
  // layer-norm gains.
  static TCNWeights initial(const TCNConfig& config, std::size_t input_channels,
                            std::uint64_t seed);
  static TCNWeights zeros(const TCNConfig& config, std::size_t input_channels);

  // Every tensor in a fixed order (block by block, then head).
  std::vector<Tensor*> tensors();
  std::vector<const Tensor*> tensors() const;
  // Tensors that carry the L2 penalty: convolution kernels and head weights.
  std::vector<bool> penalized_mask() const;
  std::size_t parameter_count() const;

  // Shape check against a configuration; throws ShapeError.
  void validate(const TCNConfig& config) const;
};

nlohmann::json to_json(const TCNConfig& config);
TCNConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const TCNWeights& weights);
// Validates every declared shape against `config`.
TCNWeights weights_from_json(const nlohmann::json& j, const TCNConfig& config);

struct BlockVars {
  ad::Var conv1, bias1, norm1_gain, norm1_bias;
  ad::Var conv2, bias2, norm2_gain, norm2_bias;
  std::optional<ad::Var> proj, proj_bias;
};

struct TCNVars {
  std::vector<BlockVars> blocks;
  ad::Var head, head_bias;
  std::vector<ad::Var> all;  // same order as TCNWeights::tensors()
};

TCNVars bind(ad::Graph& g, const TCNWeights& weights, bool trainable = true);

// Inverted dropout with feature-wise masks per time step. A null rng or zero
// rate disables it.
struct Dropout {
  double rate = 0.0;
  std::mt19937_64* rng = nullptr;
  bool active() const { return rate > 0.0 && rng != nullptr; }
};

ad::Var causal_conv(ad::Var x, ad::Var kernel, ad::Var bias, std::size_t dilation);

ad::Var temporal_block(ad::Var x, const BlockVars& block, std::size_t dilation,
                       const Dropout& dropout = {});

// Per-time-step features after the last block: [filters, T].
ad::Var tcn_features(ad::Var z, const TCNVars& vars, const Dropout& dropout = {});
// Scalar logit read from the final time step.
ad::Var tcn_logit(ad::Var z, const TCNVars& vars, const Dropout& dropout = {});

// Convenience forward without gradients. `z` is row-major D x T. Dropout is
// used only in train mode, seeded by `dropout_seed`.
double tcn_forward(std::span<const double> z, std::size_t time_steps, const TCNConfig& config,
                   const TCNWeights& weights, bool train_mode = false,
                   std::uint64_t dropout_seed = 0);

}  // namespace mgptcn::tcn
