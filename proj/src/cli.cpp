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

#include "mgptcn/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "mgptcn/digest.hpp"
#include "mgptcn/dtwknn.hpp"
#include "mgptcn/errors.hpp"
#include "mgptcn/eval.hpp"
#include "mgptcn/parallel.hpp"
#include "mgptcn/rng.hpp"

namespace mgptcn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kManifestFormat = "mgptcn-cohort/v1";
constexpr const char* kSplitsFormat = "mgptcn-splits/v1";
constexpr const char* kDtwModelFormat = "mgptcn-dtw/v1";
constexpr std::size_t kMinObservations = 10;

void reject_unknown(const json& j, const json& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.contains(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
}

template <typename T>
void get_if(const json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

json search_to_json(const training::SearchSpace& s) {
  return {{"lr_min", s.lr_min},         {"lr_max", s.lr_max},           {"batch_min", s.batch_min},
          {"batch_max", s.batch_max},   {"blocks_min", s.blocks_min},   {"blocks_max", s.blocks_max},
          {"filters_min", s.filters_min}, {"filters_max", s.filters_max}, {"width_min", s.width_min},
          {"width_max", s.width_max},   {"dropout_min", s.dropout_min}, {"dropout_max", s.dropout_max},
          {"l2_min", s.l2_min},         {"l2_max", s.l2_max}};
}

training::SearchSpace search_from_json(const json& j) {
  training::SearchSpace s;
  reject_unknown(j, search_to_json(s), "search");
  get_if(j, "lr_min", s.lr_min);
  get_if(j, "lr_max", s.lr_max);
  get_if(j, "batch_min", s.batch_min);
  get_if(j, "batch_max", s.batch_max);
  get_if(j, "blocks_min", s.blocks_min);
  get_if(j, "blocks_max", s.blocks_max);
  get_if(j, "filters_min", s.filters_min);
  get_if(j, "filters_max", s.filters_max);
  get_if(j, "width_min", s.width_min);
  get_if(j, "width_max", s.width_max);
  get_if(j, "dropout_min", s.dropout_min);
  get_if(j, "dropout_max", s.dropout_max);
  get_if(j, "l2_min", s.l2_min);
  get_if(j, "l2_max", s.l2_max);
  return s;
}

// ---- Files ------------------------------------------------------------------

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CohortError("missing file: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CohortError("cannot write " + path.string());
  out << content;
  if (!out) throw CohortError("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  const auto text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw CohortError(path.string() + ": " + e.what());
  }
}

void check_format(const json& j, const char* format, const fs::path& path) {
  if (!j.is_object() || j.value("format", std::string()) != format)
    throw CohortError(path.string() + ": expected format " + format);
}

// ---- Run context ----------------------------------------------------------------

struct Context {
  RunConfig cfg;
  std::string method;
  std::size_t workers = 1;
  bool force = false;
  SeedStream root{0};
  std::ostream& out;
  std::ostream& err;
};

data::CohortPaths cohort_paths(const Context& ctx) { return {ctx.cfg.cohort_dir}; }

fs::path method_dir(const Context& ctx, const std::string& method) { return fs::path(ctx.cfg.out_dir) / method; }

fs::path split_dir(const Context& ctx, const std::string& method, std::size_t k) {
  return method_dir(ctx, method) / ("split_" + std::to_string(k));
}

json read_manifest(const Context& ctx) {
  const auto path = cohort_paths(ctx).manifest();
  auto m = read_json(path);
  check_format(m, kManifestFormat, path);
  return m;
}

json make_manifest(const json& generator, std::uint64_t seed, std::size_t channels, std::size_t raw_count,
                   std::size_t planted, std::size_t mask_threshold, const data::LabeledCohort& cohort,
                   const data::CohortPaths& paths) {
  const auto cases = cohort.cases();
  json files = json::object();
  for (const auto& p : {paths.observations(), paths.events(), paths.encounters(), paths.labels()})
    files[fs::path(p).filename().string()] = file_sha256_hex(p);
  return {{"format", kManifestFormat},
          {"seed", seed},
          {"channels", channels},
          {"generator", generator},
          {"spec_digest", sha256_hex(generator.dump())},
          {"raw_encounters", raw_count},
          {"planted_cases", planted},
          {"mask_threshold", mask_threshold},
          {"cohort",
           {{"encounters", cohort.encounters.size()},
            {"cases", cases},
            {"controls", cohort.encounters.size() - cases},
            {"match_groups", cohort.matching.size()},
            {"prevalence", cohort.prevalence()}}},
          {"files", files}};
}

std::string write_manifest(const json& manifest, const data::CohortPaths& paths) {
  const auto text = manifest.dump(2) + "\n";
  write_file(paths.manifest(), text);
  return sha256_hex(text);
}

struct Loaded {
  std::size_t channels = 0;
  data::LabeledCohort cohort;
};

Loaded load_cohort(const Context& ctx) {
  const auto manifest = read_manifest(ctx);
  Loaded l;
  l.channels = manifest.at("channels").get<std::size_t>();
  l.cohort = data::read_labeled_cohort(cohort_paths(ctx), l.channels);
  if (l.cohort.encounters.empty()) throw CohortError("cohort in " + ctx.cfg.cohort_dir + " is empty");
  return l;
}

std::uint64_t split_seed(const Context& ctx, std::size_t k) { return ctx.root.child("split").child(k).seed(); }

json ids_of(const std::vector<Encounter>& encs) {
  json a = json::array();
  for (const auto& e : encs) a.push_back(e.id);
  return a;
}

json split_json(const data::Split& s, std::size_t k) {
  return {{"index", k}, {"train", ids_of(s.train)}, {"validation", ids_of(s.validation)}, {"test", ids_of(s.test)}};
}

// Splits are always recomputed from the seed; a splits.json from an earlier
// `split` run must agree, so a changed seed cannot silently mix artifacts.
data::Split load_split(const Context& ctx, const Loaded& l, std::size_t k) {
  auto s = data::make_split(l.cohort, split_seed(ctx, k));
  const auto path = fs::path(ctx.cfg.out_dir) / "splits.json";
  if (fs::exists(path)) {
    const auto j = read_json(path);
    check_format(j, kSplitsFormat, path);
    const auto& all = j.at("splits");
    if (k < all.size() && all.at(k) != split_json(s, k))
      throw CohortError(path.string() + ": split " + std::to_string(k) +
                        " does not match the current seed and cohort; rerun `split`");
  }
  return s;
}

std::vector<Encounter> at_onset(const std::vector<Encounter>& encs) {
  std::vector<Encounter> out;
  out.reserve(encs.size());
  for (const auto& e : encs) out.push_back(data::truncate_to_horizon(e, 0.0));
  return out;
}

void guard_artifact(const fs::path& path, bool force) {
  if (fs::exists(path) && !force)
    throw ConfigError(path.string() + " already exists; pass --force to overwrite");
}

// ---- DTW-KNN pieces ---------------------------------------------------------------

struct DtwSetup {
  dtw::Model model;
  std::string digest;
};

DtwSetup dtw_setup(const Loaded& l, const data::Split& s) {
  DtwSetup d;
  const auto train0 = at_onset(s.train);
  d.model.channels = l.channels;
  d.model.train = dtw::to_series(train0, l.channels);
  std::vector<std::string> ids;
  for (const auto& e : train0) {
    ids.push_back(e.id);
    d.model.labels.push_back(e.label);
  }
  d.digest = dtw::cohort_digest(ids, d.model.train);
  return d;
}

fs::path dtw_cache_dir(const Context& ctx, std::size_t k) { return split_dir(ctx, "dtw-knn", k) / "distance_cache"; }
fs::path dtw_model_path(const Context& ctx, std::size_t k) { return split_dir(ctx, "dtw-knn", k) / "model.json"; }

void dtw_build(const Context& ctx, const Loaded& l, const data::Split& s, std::size_t k) {
  const auto d = dtw_setup(l, s);
  const auto m = dtw::build_or_load(d.model.train, d.digest, dtw_cache_dir(ctx, k).string(), ctx.workers, ctx.force);
  ctx.out << "dtw-knn split=" << k << " cache=" << dtw_cache_dir(ctx, k).string() << " n=" << m.n
          << " cohort_digest=" << m.cohort_digest << '\n';
}

void dtw_select(const Context& ctx, const Loaded& l, const data::Split& s, std::size_t k) {
  auto d = dtw_setup(l, s);
  const auto val0 = at_onset(s.validation);
  std::vector<int> labels;
  for (const auto& e : val0) labels.push_back(e.label);
  std::vector<std::size_t> grid = ctx.cfg.dtw_k_grid;
  std::erase_if(grid, [&](std::size_t kk) { return kk > d.model.labels.size(); });
  if (grid.empty()) throw ConfigError("dtw_k_grid has no k <= training size");
  const auto best = dtw::select_k(d.model, dtw::to_series(val0, l.channels), labels, grid, ctx.workers);
  const json j{{"format", kDtwModelFormat}, {"k", best},         {"k_grid", grid},
               {"channels", l.channels},     {"train_size", d.model.labels.size()},
               {"cohort_digest", d.digest}};
  const auto text = j.dump(2) + "\n";
  write_file(dtw_model_path(ctx, k), text);
  ctx.out << "dtw-knn split=" << k << " k=" << best << " model_sha256=" << sha256_hex(text) << '\n';
}

// ---- Scorers --------------------------------------------------------------------------

eval::BatchScorer load_scorer(const Context& ctx, const std::string& method, const Loaded& l, const data::Split& s,
                              std::size_t k) {
  const std::size_t workers = ctx.workers;
  if (method == "dtw-knn") {
    const auto path = dtw_model_path(ctx, k);
    const auto j = read_json(path);
    check_format(j, kDtwModelFormat, path);
    auto d = dtw_setup(l, s);
    if (j.at("cohort_digest").get<std::string>() != d.digest)
      throw CohortError(path.string() + ": trained on a different cohort; retrain");
    d.model.k = j.at("k").get<std::size_t>();
    const std::size_t channels = l.channels;
    return [model = std::move(d.model), channels, workers](std::span<const Encounter> encs) {
      return dtw::ensemble_predict(dtw::to_series(encs, channels), model, workers);
    };
  }
  const auto path = split_dir(ctx, method, k) / "checkpoint.json";
  const auto ck = training::checkpoint_from_json(read_json(path));
  if (training::to_string(ck.model.kind) != method)
    throw CohortError(path.string() + ": checkpoint holds a " + training::to_string(ck.model.kind) + " model");
  if (ck.model.channels != l.channels) throw CohortError(path.string() + ": channel count differs from the cohort");
  const std::size_t samples = ck.config.mc_samples;
  const std::uint64_t seed = ck.config.seed;
  return [model = ck.model, samples, seed, workers](std::span<const Encounter> encs) {
    return training::predict(model, encs, samples, seed, workers);
  };
}

std::string split_name(std::size_t k) { return "split_" + std::to_string(k); }

json aggregate_json(const eval::AggregateTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"horizon", r.horizon}, {"metric", r.metric}, {"mean", r.mean}, {"std", r.std},
                    {"n_splits", r.n_splits}});
  return {{"method", t.method}, {"std", "population"}, {"rows", rows}};
}

// ---- Subcommands ----------------------------------------------------------------------

void cmd_generate(const Context& ctx) {
  const auto& spec = ctx.cfg.generator;
  spec.validate();
  const auto paths = cohort_paths(ctx);
  const auto gen_json = data::to_json(spec);
  if (fs::exists(paths.manifest()) && !ctx.force) {
    // Same seed and spec regenerate the same bytes, so only a different
    // cohort needs --force.
    const auto old = read_manifest(ctx);
    if (old.value("seed", std::uint64_t{0}) != ctx.cfg.seed || old.at("generator") != gen_json)
      throw ConfigError(paths.dir + " holds a different cohort; pass --force to overwrite");
  }
  const auto raw = data::generate_synthetic(spec, ctx.root.child("generator").seed());
  const auto cohort = data::build_cohort(raw, ctx.root.child("matching").seed(), ctx.cfg.train.mc_samples);
  if (cohort.cases() == 0) throw CohortError("generated cohort has no cases after labelling and filtering");
  std::size_t planted = 0;
  for (const auto& e : raw.encounters) planted += e.planted_onset.has_value();
  data::write_raw_cohort(raw, paths);
  data::write_labels(cohort, paths);
  const auto manifest = make_manifest(gen_json, ctx.cfg.seed, spec.channels, raw.encounters.size(), planted,
                                      ctx.cfg.train.mc_samples, cohort, paths);
  const auto digest = write_manifest(manifest, paths);
  ctx.out << "generate dir=" << paths.dir << " encounters=" << cohort.encounters.size()
          << " cases=" << cohort.cases() << " prevalence=" << format_double(cohort.prevalence())
          << " manifest_sha256=" << digest << '\n';
}

void cmd_label(const Context& ctx) {
  const auto paths = cohort_paths(ctx);
  const auto old = read_manifest(ctx);
  const auto channels = old.at("channels").get<std::size_t>();
  const auto seed = old.at("seed").get<std::uint64_t>();
  const auto raw = data::read_raw_cohort(paths, channels);
  const auto cohort =
      data::build_cohort(raw, SeedStream(seed).child("matching").seed(), ctx.cfg.train.mc_samples);
  std::size_t planted = 0;
  for (const auto& e : raw.encounters) planted += e.planted_onset.has_value();
  data::write_labels(cohort, paths);
  const auto manifest = make_manifest(old.at("generator"), seed, channels, raw.encounters.size(), planted,
                                      ctx.cfg.train.mc_samples, cohort, paths);
  const auto digest = write_manifest(manifest, paths);
  ctx.out << "label dir=" << paths.dir << " encounters=" << cohort.encounters.size() << " cases=" << cohort.cases()
          << " manifest_sha256=" << digest << '\n';
}

void cmd_split(const Context& ctx) {
  const auto l = load_cohort(ctx);
  json splits = json::array();
  for (std::size_t k = 0; k < ctx.cfg.splits; ++k) {
    const auto s = data::make_split(l.cohort, split_seed(ctx, k));
    splits.push_back(split_json(s, k));
    ctx.out << "split " << k << " train=" << s.train.size() << " validation=" << s.validation.size()
            << " test=" << s.test.size() << '\n';
  }
  const json j{{"format", kSplitsFormat}, {"seed", ctx.cfg.seed}, {"splits", splits}};
  write_file(fs::path(ctx.cfg.out_dir) / "splits.json", j.dump(1) + "\n");
}

void train_gradient(const Context& ctx, const Loaded& l, const data::Split& s, std::size_t k) {
  const auto dir = split_dir(ctx, ctx.method, k);
  guard_artifact(dir / "checkpoint.json", ctx.force);
  auto config = ctx.cfg.train;
  config.model_kind = training::model_kind_from_string(ctx.method);
  config.seed = ctx.root.child("train").child(k).seed();
  config.workers = ctx.workers;
  std::ostringstream log;
  if (ctx.cfg.search_calls > 0) {
    const auto sr = training::random_search(
        ctx.cfg.search, config, ctx.cfg.search_calls, ctx.root.child("search").child(k).seed(),
        [&](const training::TrainConfig& c) {
          return training::train(s.train, s.validation, l.channels, c, nullptr).best.validation_auprc;
        });
    for (std::size_t i = 0; i < sr.scores.size(); ++i)
      log << "search call=" << i << " val_auprc=" << format_double(sr.scores[i]) << '\n';
    log << "search best=" << sr.best_index << " config=" << training::to_json(sr.best).dump() << '\n';
    config = sr.best;
  }
  const auto result = training::train(s.train, s.validation, l.channels, config, &log);
  const auto& best = result.best;
  write_file(dir / "checkpoint.json", training::to_json(best).dump() + "\n");
  write_file(dir / "train.log", log.str());
  ctx.out << ctx.method << " split=" << k << " best_epoch=" << best.epoch
          << " val_auprc=" << format_double(best.validation_auprc) << " timed_out=" << (best.timed_out ? 1 : 0)
          << " checkpoint_sha256=" << training::checkpoint_digest(best) << '\n';
}

void cmd_train(const Context& ctx) {
  const auto l = load_cohort(ctx);
  for (std::size_t k = 0; k < ctx.cfg.splits; ++k) {
    const auto s = load_split(ctx, l, k);
    if (ctx.method == "dtw-knn") {
      dtw_build(ctx, l, s, k);
      dtw_select(ctx, l, s, k);
    } else {
      train_gradient(ctx, l, s, k);
    }
  }
}

template <typename Fn>
void dtw_each(const Context& ctx, Fn&& fn) {
  const auto l = load_cohort(ctx);
  for (std::size_t k = 0; k < ctx.cfg.splits; ++k) fn(l, load_split(ctx, l, k), k);
}

void cmd_dtw_predict(const Context& ctx) {
  dtw_each(ctx, [&](const Loaded& l, const data::Split& s, std::size_t k) {
    const auto scorer = load_scorer(ctx, "dtw-knn", l, s, k);
    std::vector<Encounter> test;
    for (const auto& e : at_onset(s.test))
      if (!data::is_masked(e, kMinObservations)) test.push_back(e);
    const auto scores = scorer(test);
    std::ostringstream csv;
    csv << "encounter_id,label,score\n";
    for (std::size_t i = 0; i < test.size(); ++i)
      csv << test[i].id << ',' << test[i].label << ',' << format_double(scores[i]) << '\n';
    const auto path = split_dir(ctx, "dtw-knn", k) / "predictions.csv";
    write_file(path, csv.str());
    ctx.out << "dtw-knn split=" << k << " predictions=" << path.string() << " n=" << test.size() << '\n';
  });
}

void cmd_evaluate(const Context& ctx) {
  const auto l = load_cohort(ctx);
  json splits = json::array();
  const std::vector<int> h0{0};
  for (std::size_t k = 0; k < ctx.cfg.splits; ++k) {
    const auto s = load_split(ctx, l, k);
    const auto table = eval::horizon_eval(load_scorer(ctx, ctx.method, l, s, k), s.test, h0, kMinObservations,
                                          split_name(k));
    const auto& r = table.rows.at(0);
    if (!r.auprc) throw EvaluationError(split_name(k) + ": test set at onset is single-class");
    splits.push_back({{"split", table.split}, {"n_encounters", r.n_encounters}, {"n_cases", r.n_cases},
                      {"auprc", *r.auprc}, {"auc", *r.auc}});
    ctx.out << ctx.method << " split=" << k << " auprc=" << format_double(*r.auprc)
            << " auc=" << format_double(*r.auc) << '\n';
  }
  const json j{{"method", ctx.method}, {"horizon", 0}, {"splits", splits}};
  write_file(method_dir(ctx, ctx.method) / "evaluation.json", j.dump(2) + "\n");
}

void cmd_horizon(const Context& ctx) {
  const auto l = load_cohort(ctx);
  std::vector<eval::HorizonTable> tables;
  for (std::size_t k = 0; k < ctx.cfg.splits; ++k) {
    const auto s = load_split(ctx, l, k);
    auto table = eval::horizon_eval(load_scorer(ctx, ctx.method, l, s, k), s.test, ctx.cfg.horizons,
                                    kMinObservations, split_name(k));
    const auto path = split_dir(ctx, ctx.method, k) / "horizon.json";
    const auto text = eval::to_json(table).dump(2) + "\n";
    write_file(path, text);
    ctx.out << ctx.method << " split=" << k << " horizon_sha256=" << sha256_hex(text) << '\n';
    tables.push_back(std::move(table));
  }
  const std::vector<eval::AggregateTable> agg{eval::aggregate_splits(tables, ctx.method)};
  write_file(method_dir(ctx, ctx.method) / "aggregate.json", aggregate_json(agg[0]).dump(2) + "\n");
  const auto plot = eval::format_plot_data(agg);
  const auto plot_path = method_dir(ctx, ctx.method) / "plot_data.csv";
  write_file(plot_path, plot);
  ctx.out << ctx.method << " plot=" << plot_path.string() << " plot_sha256=" << sha256_hex(plot) << '\n';
}

void cmd_show_config(const Context& ctx) { ctx.out << to_json(ctx.cfg).dump(2) << '\n'; }

}  // namespace

// ---- RunConfig ------------------------------------------------------------------------

void RunConfig::validate() const {
  generator.validate();
  train.validate();
  if (splits < 1) throw ConfigError("splits must be >= 1");
  if (horizons.empty()) throw ConfigError("horizons must not be empty");
  for (std::size_t i = 0; i < horizons.size(); ++i) {
    if (horizons[i] < 0 || horizons[i] > eval::kMaxHorizon)
      throw ConfigError("horizon " + std::to_string(horizons[i]) + " outside [0, " +
                        std::to_string(eval::kMaxHorizon) + "]");
    if (i > 0 && horizons[i] <= horizons[i - 1]) throw ConfigError("horizons must be strictly increasing");
  }
  if (dtw_k_grid.empty()) throw ConfigError("dtw_k_grid must not be empty");
  for (auto k : dtw_k_grid)
    if (k % 2 == 0) throw ConfigError("dtw_k_grid entries must be odd, got " + std::to_string(k));
  const auto& s = search;
  if (!(s.lr_min > 0 && s.lr_min <= s.lr_max) || !(s.l2_min > 0 && s.l2_min <= s.l2_max) ||
      s.batch_min > s.batch_max || s.blocks_min > s.blocks_max || s.filters_min > s.filters_max ||
      s.width_min > s.width_max || !(s.dropout_min >= 0 && s.dropout_min <= s.dropout_max))
    throw ConfigError("search: every range needs min <= max (and positive bounds for lr and l2)");
}

json to_json(const RunConfig& c) {
  return {{"schema", kConfigSchema},
          {"seed", c.seed},
          {"cohort_dir", c.cohort_dir},
          {"out_dir", c.out_dir},
          {"generator", data::to_json(c.generator)},
          {"train", training::to_json(c.train)},
          {"search", search_to_json(c.search)},
          {"splits", c.splits},
          {"search_calls", c.search_calls},
          {"horizons", c.horizons},
          {"dtw_k_grid", c.dtw_k_grid}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  reject_unknown(j, to_json(c), "config");
  if (!j.contains("schema")) throw ConfigError(std::string("config: missing 'schema' (expected ") + kConfigSchema + ")");
  if (j.at("schema") != kConfigSchema)
    throw ConfigError("config: schema " + j.at("schema").dump() + " is not " + kConfigSchema);
  try {
    get_if(j, "seed", c.seed);
    get_if(j, "cohort_dir", c.cohort_dir);
    get_if(j, "out_dir", c.out_dir);
    get_if(j, "splits", c.splits);
    get_if(j, "search_calls", c.search_calls);
    get_if(j, "horizons", c.horizons);
    get_if(j, "dtw_k_grid", c.dtw_k_grid);
    if (j.contains("generator")) c.generator = data::generator_spec_from_json(j.at("generator"));
    if (j.contains("train")) c.train = training::train_config_from_json(j.at("train"));
    if (j.contains("search")) c.search = search_from_json(j.at("search"));
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---- Entry point ----------------------------------------------------------------------

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"mgptcn: early-event classification of irregular multivariate time series"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, method = "mgp-tcn", out_dir;
  std::uint64_t seed = 0;
  std::size_t workers = 0;
  double max_seconds = 0.0;
  bool force = false;
  auto* o_config = app.add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  auto* o_seed = app.add_option("--seed", seed, "root seed (overrides the config)");
  app.add_option("--method", method, "pipeline for train/evaluate/horizon")
      ->check(CLI::IsMember({"mgp-tcn", "raw-tcn", "dtw-knn"}));
  auto* o_workers = app.add_option("--workers", workers, "worker threads (default: all cores)")
                        ->check(CLI::PositiveNumber);
  auto* o_max = app.add_option("--max-seconds", max_seconds, "wall-clock cap per training run")
                    ->check(CLI::NonNegativeNumber);
  auto* o_out = app.add_option("--out", out_dir, "output directory (overrides the config)");
  app.add_flag("--force", force, "overwrite existing artifacts");

  std::function<void(const Context&)> action;
  auto sub = [&](const char* name, const char* help, void (*fn)(const Context&)) {
    app.add_subcommand(name, help)->callback([&action, fn] { action = fn; });
  };
  sub("generate", "generate a synthetic cohort, label it and write the manifest", cmd_generate);
  sub("label", "relabel raw cohort files", cmd_label);
  sub("split", "write the seeded train/validation/test splits", cmd_split);
  sub("train", "train the selected method on every split", cmd_train);
  sub("evaluate", "test AUPRC/AUC at onset", cmd_evaluate);
  sub("horizon", "horizon analysis, aggregation and plot data", cmd_horizon);
  sub("dtw-build", "build or load the DTW distance cache", [](const Context& ctx) {
    dtw_each(ctx, [&](const Loaded& l, const data::Split& s, std::size_t k) { dtw_build(ctx, l, s, k); });
  });
  sub("dtw-select-k", "select k on the validation split", [](const Context& ctx) {
    dtw_each(ctx, [&](const Loaded& l, const data::Split& s, std::size_t k) { dtw_select(ctx, l, s, k); });
  });
  sub("dtw-predict", "score the test split with the DTW-KNN ensemble", cmd_dtw_predict);
  sub("show-config", "print the resolved config", cmd_show_config);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ErrorClass::kUser);
  }

  try {
    RunConfig cfg;
    if (o_config->count() > 0) {
      json j;
      try {
        j = json::parse(read_file(config_path));
      } catch (const json::parse_error& e) {
        throw ConfigError(config_path + ": " + e.what());
      }
      cfg = run_config_from_json(j);
    }
    if (const char* v = std::getenv("MGPTCN_COHORT_DIR"); v && *v) cfg.cohort_dir = v;
    if (const char* v = std::getenv("MGPTCN_OUT_DIR"); v && *v) cfg.out_dir = v;
    if (o_seed->count() > 0) cfg.seed = seed;
    if (o_max->count() > 0) cfg.train.max_seconds = max_seconds;
    if (o_out->count() > 0) cfg.out_dir = out_dir;
    cfg.validate();

    Context ctx{cfg, method, o_workers->count() > 0 ? workers : default_workers(), force, SeedStream(cfg.seed),
                out, err};
    auto resolved = to_json(cfg);
    resolved["method"] = method;
    resolved["workers"] = ctx.workers;
    resolved["force"] = force;
    err << "config " << resolved.dump() << '\n';
    action(ctx);
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(e.error_class());
  } catch (const json::exception& e) {
    err << "error: malformed artifact: " << e.what() << '\n';
    return static_cast<int>(ErrorClass::kData);
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorClass::kData);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(ErrorClass::kData);
  }
}

}  // namespace mgptcn::cli
