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

// Ranking metrics and the horizon analysis: one trained model scored on test
// data truncated progressively earlier before onset.

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mgptcn/encounter.hpp"

namespace mgptcn::eval {

struct Scored {
  std::string id;
  int label = 0;
  double score = 0.0;
};

// Step-interpolated area under the precision-recall curve. Tied scores enter
// the sweep together. Throws EvaluationError naming `split` when only one
// class is present.
double auprc(std::span<const Scored> scored, std::string_view split = "");
// Mann-Whitney statistic; ties count one half.
double auc(std::span<const Scored> scored, std::string_view split = "");

inline constexpr int kMaxHorizon = 7;
std::vector<int> default_horizons();

struct HorizonRow {
  int horizon = 0;
  std::size_t n_encounters = 0;
  std::size_t n_cases = 0;
  // Empty when the surviving set is single-class.
  std::optional<double> auprc;
  std::optional<double> auc;
};

struct HorizonTable {
  std::string split;
  std::vector<HorizonRow> rows;
};

// Scores a batch of (already truncated) encounters; one score per encounter.
using BatchScorer = std::function<std::vector<double>(std::span<const Encounter>)>;

// For each horizon: truncate, drop encounters with fewer than
// `min_observations`, score the rest and compute both metrics. The model is
// never refit.
HorizonTable horizon_eval(const BatchScorer& scorer, std::span<const Encounter> test,
                          std::span<const int> horizons, std::size_t min_observations = 10,
                          std::string split = "test");

nlohmann::json to_json(const HorizonTable& table);
HorizonTable horizon_table_from_json(const nlohmann::json& j);

struct AggregateRow {
  int horizon = 0;
  std::string metric;  // "auprc" or "auc"
  double mean = 0.0;
  double std = 0.0;  // population
  std::size_t n_splits = 0;
};

struct AggregateTable {
  std::string method;
  std::vector<AggregateRow> rows;
};

// Needs at least two tables with identical horizon sets. Splits whose metric
// is unavailable at a horizon are left out of that row.
AggregateTable aggregate_splits(std::span<const HorizonTable> tables, std::string method);

// Plot data: a schema comment line, a header, then rows of
// horizon,metric,mean,std,method.
inline constexpr std::string_view kPlotSchema = "mgptcn-plot/v1";
inline constexpr std::string_view kPlotHeader = "horizon,metric,mean,std,method";

struct PlotRow {
  int horizon = 0;
  std::string metric;
  double mean = 0.0;
  double std = 0.0;
  std::string method;
  bool operator==(const PlotRow&) const = default;
};

std::string format_plot_data(std::span<const AggregateTable> tables);
std::vector<PlotRow> parse_plot_data(std::string_view text);

}  // namespace mgptcn::eval
