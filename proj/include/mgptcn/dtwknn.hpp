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

// DTW-KNN: per-channel dynamic time warping distances feeding per-channel
// k-nearest-neighbour scorers whose scores are averaged.

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mgptcn/encounter.hpp"

namespace mgptcn::dtw {

// Square root of the minimal sum of squared differences over all monotone
// alignments (full lattice, no window).
double dtw_distance(std::span<const double> a, std::span<const double> b);

// [encounter][channel][hour]: hourly-binned, imputed series.
using Series = std::vector<std::vector<double>>;
using SeriesSet = std::vector<Series>;

Series to_series(const Encounter& enc, std::size_t channels);
SeriesSet to_series(std::span<const Encounter> encounters, std::size_t channels);

// Digest over ids and every series value, used to key distance caches.
std::string cohort_digest(std::span<const std::string> ids, const SeriesSet& series);

struct DistanceMatrices {
  std::size_t channels = 0;
  std::size_t n = 0;
  std::vector<std::vector<double>> values;  // per channel, row-major n x n
  std::string cohort_digest;
  double at(std::size_t c, std::size_t i, std::size_t j) const { return values[c][i * n + j]; }
};

DistanceMatrices build_distance_matrices(const SeriesSet& train, std::string digest,
                                         std::size_t workers);

// One file per channel: a JSON header line, then n*n doubles (native order).
std::string cache_file(const std::string& dir, std::size_t channel);
void write_distance_cache(const DistanceMatrices& m, const std::string& dir, bool force);
// Empty when no cache exists. Throws CohortError when a cache exists for a
// different cohort digest.
std::optional<DistanceMatrices> read_distance_cache(const std::string& dir, std::size_t channels,
                                                    const std::string& digest);
// Loads a matching cache or computes and writes it. An existing cache for
// another cohort is only replaced when `force` is set.
DistanceMatrices build_or_load(const SeriesSet& train, const std::string& digest, const std::string& dir,
                               std::size_t workers, bool force);

// Fraction of positives among the k nearest; distance ties go to the lower
// train index. k must be odd and <= N.
double knn_channel_score(std::span<const double> distances, std::span<const int> labels, std::size_t k);

struct Model {
  std::size_t channels = 0;
  SeriesSet train;
  std::vector<int> labels;
  std::size_t k = 1;
};

// Per-channel distances from one series to every training series.
std::vector<std::vector<double>> distances_to_train(const Series& query, const Model& model);
// Unweighted mean of per-channel scores.
double ensemble_score(const std::vector<std::vector<double>>& distances, const Model& model, std::size_t k);
double ensemble_predict(const Series& query, const Model& model);
std::vector<double> ensemble_predict(const SeriesSet& queries, const Model& model, std::size_t workers);

std::vector<std::size_t> default_k_grid();
// Validation-AUPRC-maximising k; ties go to the smaller k.
std::size_t select_k(const Model& model, const SeriesSet& validation, std::span<const int> labels,
                     std::span<const std::size_t> candidates, std::size_t workers);

}  // namespace mgptcn::dtw
