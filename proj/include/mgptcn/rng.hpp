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

#include <cstdint>
#include <random>
#include <string_view>

namespace mgptcn {

// Deterministic seed derivation. All randomness in a run descends from one
// root seed; named substreams (generator, matching, init, sampling, dropout,
// search, split) are derived by mixing the parent seed with a label and an
// optional index.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);
std::uint64_t hash_label(std::string_view label);

class SeedStream {
 public:
  explicit SeedStream(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  SeedStream child(std::string_view label) const {
    return SeedStream(mix_seed(seed_, hash_label(label)));
  }
  SeedStream child(std::uint64_t index) const {
    return SeedStream(mix_seed(seed_, index + 0x9E3779B97F4A7C15ull));
  }
  std::mt19937_64 engine() const { return std::mt19937_64(seed_); }

 private:
  std::uint64_t seed_;
};

}  // namespace mgptcn
