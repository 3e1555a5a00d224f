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
#include <span>
#include <string>
#include <string_view>

namespace mgptcn {

// Incremental SHA-256, hex output. Used for cohort, checkpoint and manifest
// digests so that reproducibility checks compare stable identifiers.
class Digest {
 public:
  Digest();
  ~Digest();
  Digest(const Digest&) = delete;
  Digest& operator=(const Digest&) = delete;

  Digest& update(std::string_view bytes);
  Digest& update(std::span<const double> values);
  Digest& update(std::uint64_t value);
  std::string hex();

 private:
  void* ctx_;
};

std::string sha256_hex(std::string_view bytes);
std::string file_sha256_hex(const std::string& path);

// Shortest round-trip decimal representation of a double.
std::string format_double(double v);

}  // namespace mgptcn
