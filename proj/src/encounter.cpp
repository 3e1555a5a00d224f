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

#include "mgptcn/encounter.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "mgptcn/errors.hpp"

namespace mgptcn {

void sort_observations(Encounter& enc) {
  std::sort(enc.observations.begin(), enc.observations.end(),
            [](const Observation& a, const Observation& b) {
              return std::tie(a.time, a.channel, a.value) < std::tie(b.time, b.channel, b.value);
            });
}

void validate_encounter(const Encounter& enc, std::size_t channels) {
  if (enc.observations.empty()) throw ContractError("encounter " + enc.id + " has no observations");
  double prev = 0.0;
  for (const auto& o : enc.observations) {
    if (!std::isfinite(o.time) || o.time < 0.0)
      throw ContractError("encounter " + enc.id + " has an invalid observation time");
    if (o.time < prev) throw ContractError("encounter " + enc.id + " observations are not sorted");
    if (o.channel >= channels)
      throw ContractError("encounter " + enc.id + " references channel " +
                          std::to_string(o.channel) + " >= " + std::to_string(channels));
    if (!std::isfinite(o.value))
      throw ContractError("encounter " + enc.id + " has a non-finite value");
    prev = o.time;
  }
}

}  // namespace mgptcn
