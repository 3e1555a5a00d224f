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

#include "mgptcn/dtwknn.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "mgptcn/data.hpp"
#include "mgptcn/digest.hpp"
#include "mgptcn/errors.hpp"
#include "mgptcn/eval.hpp"
#include "mgptcn/parallel.hpp"

namespace mgptcn::dtw {

double dtw_distance(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ContractError("dtw_distance: empty sequence");
  const std::size_t m = b.size();
  constexpr double inf = std::numeric_limits<double>::infinity();
  // Two rows of the cumulative-cost lattice, with a sentinel column.
  std::vector<double> prev(m + 1, inf), cur(m + 1, inf);
  prev[0] = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    cur[0] = inf;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = a[i] - b[j];
      cur[j + 1] = d * d + std::min({prev[j], prev[j + 1], cur[j]});
    }
    std::swap(prev, cur);
  }
  return std::sqrt(prev[m]);
}

Series to_series(const Encounter& enc, std::size_t channels) {
  const auto grid = data::bin_and_impute(enc, channels);
  Series s(channels);
  for (std::size_t c = 0; c < channels; ++c)
    s[c].assign(grid.values.begin() + static_cast<std::ptrdiff_t>(c * grid.hours),
                grid.values.begin() + static_cast<std::ptrdiff_t>((c + 1) * grid.hours));
  return s;
}

SeriesSet to_series(std::span<const Encounter> encounters, std::size_t channels) {
  SeriesSet out;
  out.reserve(encounters.size());
  for (const auto& e : encounters) out.push_back(to_series(e, channels));
  return out;
}

std::string cohort_digest(std::span<const std::string> ids, const SeriesSet& series) {
  Digest d;
  d.update(static_cast<std::uint64_t>(series.size()));
  for (std::size_t i = 0; i < series.size(); ++i) {
    d.update(ids[i]).update(std::string_view("\n"));
    for (const auto& ch : series[i]) {
      d.update(static_cast<std::uint64_t>(ch.size()));
      d.update(ch);
    }
  }
  return d.hex();
}

DistanceMatrices build_distance_matrices(const SeriesSet& train, std::string digest, std::size_t workers) {
  DistanceMatrices m;
  m.n = train.size();
  m.channels = train.empty() ? 0 : train[0].size();
  m.cohort_digest = std::move(digest);
  for (const auto& s : train)
    if (s.size() != m.channels) throw ShapeError("build_distance_matrices: channel count differs between encounters");
  m.values.assign(m.channels, std::vector<double>(m.n * m.n, 0.0));
  // One work item per (channel, row); each writes only its own upper-triangle
  // entries, mirrored afterwards.
  parallel_for(m.channels * m.n, workers, [&](std::size_t item) {
    const std::size_t c = item / m.n, i = item % m.n;
    for (std::size_t j = i + 1; j < m.n; ++j) m.values[c][i * m.n + j] = dtw_distance(train[i][c], train[j][c]);
  });
  for (auto& v : m.values)
    for (std::size_t i = 0; i < m.n; ++i)
      for (std::size_t j = 0; j < i; ++j) v[i * m.n + j] = v[j * m.n + i];
  return m;
}

std::string cache_file(const std::string& dir, std::size_t channel) {
  return dir + "/dtw_channel_" + std::to_string(channel) + ".bin";
}

namespace {

constexpr const char* kCacheFormat = "dtw-distance/v1";

std::optional<nlohmann::json> read_header(const std::string& path, std::ifstream& in) {
  in.open(path, std::ios::binary);
  if (!in) return std::nullopt;
  std::string line;
  std::getline(in, line);
  try {
    auto j = nlohmann::json::parse(line);
    if (j.value("format", "") != kCacheFormat) throw CohortError(path + ": not a " + kCacheFormat + " file");
    return j;
  } catch (const nlohmann::json::exception&) {
    throw CohortError(path + ": unreadable distance cache header");
  }
}

}  // namespace

void write_distance_cache(const DistanceMatrices& m, const std::string& dir, bool force) {
  std::filesystem::create_directories(dir);
  for (std::size_t c = 0; c < m.channels; ++c) {
    const auto path = cache_file(dir, c);
    if (!force) {
      std::ifstream in;
      if (auto h = read_header(path, in); h && h->value("cohort_digest", "") != m.cohort_digest)
        throw CohortError(path + " holds distances for another cohort; pass --force to overwrite");
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path);
    nlohmann::json header = {{"format", kCacheFormat}, {"channel", c}, {"n", m.n}, {"cohort_digest", m.cohort_digest}};
    out << header.dump() << '\n';
    out.write(reinterpret_cast<const char*>(m.values[c].data()),
              static_cast<std::streamsize>(m.values[c].size() * sizeof(double)));
  }
}

std::optional<DistanceMatrices> read_distance_cache(const std::string& dir, std::size_t channels,
                                                    const std::string& digest) {
  DistanceMatrices m;
  m.channels = channels;
  m.cohort_digest = digest;
  for (std::size_t c = 0; c < channels; ++c) {
    const auto path = cache_file(dir, c);
    std::ifstream in;
    auto h = read_header(path, in);
    if (!h) return std::nullopt;
    if (h->value("cohort_digest", "") != digest)
      throw CohortError(path + " was built for cohort " + h->value("cohort_digest", "?") + ", expected " + digest);
    const auto n = h->at("n").get<std::size_t>();
    if (c == 0) m.n = n;
    if (n != m.n || h->at("channel").get<std::size_t>() != c) throw CohortError(path + ": inconsistent header");
    std::vector<double> v(n * n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != v.size() * sizeof(double)) throw CohortError(path + ": truncated");
    m.values.push_back(std::move(v));
  }
  return m;
}

DistanceMatrices build_or_load(const SeriesSet& train, const std::string& digest, const std::string& dir,
                               std::size_t workers, bool force) {
  const std::size_t channels = train.empty() ? 0 : train[0].size();
  if (!force) {
    if (auto cached = read_distance_cache(dir, channels, digest)) return *cached;
  }
  auto m = build_distance_matrices(train, digest, workers);
  write_distance_cache(m, dir, force);
  return m;
}

double knn_channel_score(std::span<const double> distances, std::span<const int> labels, std::size_t k) {
  if (k % 2 == 0) throw ParameterError("k must be odd, got " + std::to_string(k));
  if (k == 0 || k > distances.size())
    throw ParameterError("k = " + std::to_string(k) + " exceeds " + std::to_string(distances.size()) +
                         " training encounters");
  if (labels.size() != distances.size()) throw ShapeError("knn_channel_score: labels and distances differ in length");
  std::vector<std::size_t> idx(distances.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), [&](auto a, auto b) {
    return distances[a] < distances[b] || (distances[a] == distances[b] && a < b);
  });
  std::size_t pos = 0;
  for (std::size_t i = 0; i < k; ++i) pos += labels[idx[i]] == 1;
  return static_cast<double>(pos) / static_cast<double>(k);
}

std::vector<std::vector<double>> distances_to_train(const Series& query, const Model& model) {
  if (query.size() != model.channels)
    throw ShapeError("query has " + std::to_string(query.size()) + " channels, model expects " +
                     std::to_string(model.channels));
  std::vector<std::vector<double>> d(model.channels, std::vector<double>(model.train.size()));
  for (std::size_t c = 0; c < model.channels; ++c)
    for (std::size_t j = 0; j < model.train.size(); ++j) d[c][j] = dtw_distance(query[c], model.train[j][c]);
  return d;
}

double ensemble_score(const std::vector<std::vector<double>>& distances, const Model& model, std::size_t k) {
  double sum = 0.0;
  for (const auto& d : distances) sum += knn_channel_score(d, model.labels, k);
  return sum / static_cast<double>(distances.size());
}

double ensemble_predict(const Series& query, const Model& model) {
  return ensemble_score(distances_to_train(query, model), model, model.k);
}

std::vector<double> ensemble_predict(const SeriesSet& queries, const Model& model, std::size_t workers) {
  std::vector<double> out(queries.size());
  parallel_for(queries.size(), workers, [&](std::size_t i) { out[i] = ensemble_predict(queries[i], model); });
  return out;
}

std::vector<std::size_t> default_k_grid() { return {1, 3, 5, 7, 9, 11, 13, 15}; }

std::size_t select_k(const Model& model, const SeriesSet& validation, std::span<const int> labels,
                     std::span<const std::size_t> candidates, std::size_t workers) {
  if (candidates.empty()) throw ParameterError("select_k: no candidate k");
  if (validation.size() != labels.size()) throw ShapeError("select_k: labels and validation differ in length");
  std::vector<std::vector<std::vector<double>>> dist(validation.size());
  parallel_for(validation.size(), workers, [&](std::size_t i) { dist[i] = distances_to_train(validation[i], model); });
  std::size_t best_k = 0;
  double best = -1.0;
  std::vector<std::size_t> sorted(candidates.begin(), candidates.end());
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t k : sorted) {
    std::vector<eval::Scored> s(validation.size());
    for (std::size_t i = 0; i < validation.size(); ++i)
      s[i] = {std::to_string(i), labels[i], ensemble_score(dist[i], model, k)};
    const double a = eval::auprc(s, "validation");
    if (a > best) {
      best = a;
      best_k = k;
    }
  }
  return best_k;
}

}  // namespace mgptcn::dtw
