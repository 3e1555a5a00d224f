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

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

namespace mgptcn {

struct Observation {
  double time = 0.0;  // hours since ICU admission
  std::size_t channel = 0;
  double value = 0.0;
};

// One patient stay. Observations are kept sorted by (time, channel, value).
struct Encounter {
  std::string id;
  std::vector<Observation> observations;
  int label = 0;
  // Hours since admission. Cases carry their derived onset, matched controls
  // the onset of their case.
  std::optional<double> onset_hour;

  std::size_t size() const { return observations.size(); }
  double last_time() const { return observations.empty() ? 0.0 : observations.back().time; }
};

void sort_observations(Encounter& enc);

// Throws ContractError when times are negative/non-finite, channels are out
// of range, or the list is empty.
void validate_encounter(const Encounter& enc, std::size_t channels);

}  // namespace mgptcn
