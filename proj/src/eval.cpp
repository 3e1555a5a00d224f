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

#include "mgptcn/eval.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "mgptcn/data.hpp"
#include "mgptcn/digest.hpp"
#include "mgptcn/errors.hpp"

namespace mgptcn::eval {

namespace {

void require_both_classes(std::span<const Scored> scored, std::string_view split, std::size_t& pos,
                          std::size_t& neg) {
  pos = neg = 0;
  for (const auto& s : scored) {
    if (s.label != 0 && s.label != 1) throw EvaluationError("labels must be binary");
    if (!std::isfinite(s.score)) throw EvaluationError("non-finite score for " + s.id);
    (s.label == 1 ? pos : neg)++;
  }
  if (pos == 0 || neg == 0)
    throw EvaluationError("split '" + std::string(split) + "' has a single class (" +
                          std::to_string(pos) + " positives, " + std::to_string(neg) + " negatives)");
}

std::vector<std::size_t> descending(std::span<const Scored> scored) {
  std::vector<std::size_t> idx(scored.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scored[a].score > scored[b].score; });
  return idx;
}

}  // namespace

double auprc(std::span<const Scored> scored, std::string_view split) {
  std::size_t pos, neg;
  require_both_classes(scored, split, pos, neg);
  const auto idx = descending(scored);
  double area = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const double s = scored[idx[i]].score;
    for (; i < idx.size() && scored[idx[i]].score == s; ++i) (scored[idx[i]].label == 1 ? tp : fp)++;
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    area += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return area;
}

double auc(std::span<const Scored> scored, std::string_view split) {
  std::size_t pos, neg;
  require_both_classes(scored, split, pos, neg);
  // Ascending sweep: each positive beats every negative below its tie group.
  auto idx = descending(scored);
  std::reverse(idx.begin(), idx.end());
  double wins = 0.0;
  std::size_t neg_below = 0;
  for (std::size_t i = 0; i < idx.size();) {
    const double s = scored[idx[i]].score;
    std::size_t p = 0, n = 0;
    for (; i < idx.size() && scored[idx[i]].score == s; ++i) (scored[idx[i]].label == 1 ? p : n)++;
    wins += static_cast<double>(p) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(n));
    neg_below += n;
  }
  return wins / (static_cast<double>(pos) * static_cast<double>(neg));
}

std::vector<int> default_horizons() {
  std::vector<int> h(kMaxHorizon + 1);
  std::iota(h.begin(), h.end(), 0);
  return h;
}

HorizonTable horizon_eval(const BatchScorer& scorer, std::span<const Encounter> test,
                          std::span<const int> horizons, std::size_t min_observations, std::string split) {
  HorizonTable table;
  table.split = std::move(split);
  for (int h : horizons) {
    std::vector<Encounter> kept;
    for (const auto& e : test) {
      auto t = data::truncate_to_horizon(e, h);
      if (!data::is_masked(t, min_observations)) kept.push_back(std::move(t));
    }
    HorizonRow row;
    row.horizon = h;
    row.n_encounters = kept.size();
    for (const auto& e : kept) row.n_cases += e.label == 1;
    if (row.n_cases > 0 && row.n_cases < kept.size()) {
      const auto scores = scorer(kept);
      if (scores.size() != kept.size())
        throw EvaluationError("scorer returned " + std::to_string(scores.size()) + " scores for " +
                              std::to_string(kept.size()) + " encounters");
      std::vector<Scored> s(kept.size());
      for (std::size_t i = 0; i < kept.size(); ++i) s[i] = {kept[i].id, kept[i].label, scores[i]};
      row.auprc = auprc(s, table.split);
      row.auc = auc(s, table.split);
    }
    table.rows.push_back(row);
  }
  return table;
}

nlohmann::json to_json(const HorizonTable& table) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : table.rows) {
    rows.push_back({{"horizon", r.horizon},
                    {"n_encounters", r.n_encounters},
                    {"n_cases", r.n_cases},
                    {"auprc", r.auprc ? nlohmann::json(*r.auprc) : nlohmann::json(nullptr)},
                    {"auc", r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr)}});
  }
  return {{"split", table.split}, {"rows", rows}};
}

HorizonTable horizon_table_from_json(const nlohmann::json& j) {
  HorizonTable t;
  t.split = j.at("split").get<std::string>();
  for (const auto& r : j.at("rows")) {
    HorizonRow row;
    row.horizon = r.at("horizon").get<int>();
    row.n_encounters = r.at("n_encounters").get<std::size_t>();
    row.n_cases = r.at("n_cases").get<std::size_t>();
    if (!r.at("auprc").is_null()) row.auprc = r.at("auprc").get<double>();
    if (!r.at("auc").is_null()) row.auc = r.at("auc").get<double>();
    t.rows.push_back(row);
  }
  return t;
}

AggregateTable aggregate_splits(std::span<const HorizonTable> tables, std::string method) {
  if (tables.size() < 2)
    throw EvaluationError("aggregation needs at least 2 splits, got " + std::to_string(tables.size()));
  auto horizons = [](const HorizonTable& t) {
    std::vector<int> h;
    for (const auto& r : t.rows) h.push_back(r.horizon);
    return h;
  };
  const auto ref = horizons(tables[0]);
  for (const auto& t : tables)
    if (horizons(t) != ref) throw EvaluationError("split '" + t.split + "' has a different horizon set");
  AggregateTable out;
  out.method = std::move(method);
  for (std::size_t k = 0; k < ref.size(); ++k) {
    for (const char* metric : {"auprc", "auc"}) {
      std::vector<double> v;
      for (const auto& t : tables) {
        const auto& m = std::string_view(metric) == "auprc" ? t.rows[k].auprc : t.rows[k].auc;
        if (m) v.push_back(*m);
      }
      if (v.empty()) continue;
      const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
      double var = 0.0;
      for (double x : v) var += (x - mean) * (x - mean);
      out.rows.push_back({ref[k], metric, mean, std::sqrt(var / static_cast<double>(v.size())), v.size()});
    }
  }
  return out;
}

std::string format_plot_data(std::span<const AggregateTable> tables) {
  std::ostringstream os;
  os << "# schema=" << kPlotSchema << " std=population\n" << kPlotHeader << '\n';
  for (const auto& t : tables)
    for (const auto& r : t.rows)
      os << r.horizon << ',' << r.metric << ',' << format_double(r.mean) << ',' << format_double(r.std) << ','
         << t.method << '\n';
  return os.str();
}

std::vector<PlotRow> parse_plot_data(std::string_view text) {
  std::vector<std::string_view> lines;
  for (std::size_t start = 0; start < text.size();) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  const std::string schema_line = "# schema=" + std::string(kPlotSchema);
  if (lines.size() < 2 || lines[0].substr(0, schema_line.size()) != schema_line)
    throw EvaluationError("plot data: missing schema line '" + schema_line + "'");
  if (lines[1] != kPlotHeader) throw EvaluationError("plot data: header must be '" + std::string(kPlotHeader) + "'");
  std::vector<PlotRow> rows;
  for (std::size_t i = 2; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    std::vector<std::string_view> f;
    std::string_view line = lines[i];
    for (std::size_t s = 0;;) {
      auto p = line.find(',', s);
      f.push_back(line.substr(s, p == std::string_view::npos ? std::string_view::npos : p - s));
      if (p == std::string_view::npos) break;
      s = p + 1;
    }
    const std::string where = "plot data line " + std::to_string(i + 1);
    if (f.size() != 5) throw EvaluationError(where + ": expected 5 fields");
    PlotRow r;
    auto num = [&](std::string_view s, auto& out) {
      auto res = std::from_chars(s.data(), s.data() + s.size(), out);
      if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw EvaluationError(where + ": bad number '" + std::string(s) + "'");
    };
    num(f[0], r.horizon);
    r.metric = std::string(f[1]);
    if (r.metric != "auprc" && r.metric != "auc") throw EvaluationError(where + ": unknown metric " + r.metric);
    num(f[2], r.mean);
    num(f[3], r.std);
    r.method = std::string(f[4]);
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace mgptcn::eval
