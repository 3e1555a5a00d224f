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

// Command-line pipeline: generate -> label -> split -> train -> evaluate ->
// horizon, plus granular DTW-KNN commands. One JSON config drives every
// subcommand; all randomness descends from its root seed.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "mgptcn/data.hpp"
#include "mgptcn/training.hpp"

namespace mgptcn::cli {

inline constexpr const char* kConfigSchema = "mgptcn-config/v1";

struct RunConfig {
  std::uint64_t seed = 0;
  std::string cohort_dir = "cohort";
  std::string out_dir = "runs";
  data::GeneratorSpec generator;
  training::TrainConfig train;  // mc_samples doubles as the masking threshold
  training::SearchSpace search;
  std::size_t splits = 3;
  std::size_t search_calls = 0;  // 0: train the given config directly
  std::vector<int> horizons{0, 1, 2, 3, 4, 5, 6, 7};
  std::vector<std::size_t> dtw_k_grid{1, 3, 5, 7, 9, 11, 13, 15};

  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
// Unknown keys anywhere in the document are rejected; missing keys keep
// their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);

// Entry point shared by the binary and the tests. Returns the process exit
// code: 0 success, 1 user error, 2 data or contract error, 3 numerical
// failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mgptcn::cli
