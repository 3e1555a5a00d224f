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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "mgptcn/cli.hpp"
#include "mgptcn/digest.hpp"
#include "mgptcn/errors.hpp"
#include "mgptcn/eval.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mgptcn;

namespace {

struct Result {
  int code = 0;
  std::string out, err;
};

Result run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mgptcn_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json small_config(const fs::path& dir) {
  cli::RunConfig c;
  c.cohort_dir = (dir / "cohort").string();
  c.out_dir = (dir / "runs").string();
  c.generator.channels = 3;
  c.generator.encounters = 400;
  c.generator.signal_strength = 2.5;
  c.train.max_epochs = 3;
  c.train.learning_rate = 2e-3;
  c.train.tcn.filters = 15;
  c.train.tcn.num_blocks = 4;
  c.splits = 2;
  return cli::to_json(c);
}

std::string write_config(const fs::path& dir, const json& j) {
  const auto p = dir / "config.json";
  std::ofstream(p) << j.dump(2);
  return p.string();
}

// Summary tokens minus the ones that name output paths.
std::string stable_tokens(const std::string& text) {
  std::istringstream in(text);
  std::string tok, kept;
  while (in >> tok)
    if (tok.rfind("plot=", 0) != 0) kept += tok + ' ';
  return kept;
}

std::map<std::string, std::string> digests_under(const fs::path& dir) {
  std::map<std::string, std::string> d;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) d[fs::relative(e.path(), dir).string()] = file_sha256_hex(e.path().string());
  return d;
}

}  // namespace

TEST_CASE("config JSON round-trips and rejects unknown keys") {
  cli::RunConfig c;
  c.seed = 42;
  c.splits = 4;
  c.train.tcn.filters = 30;
  const auto j = cli::to_json(c);
  CHECK(cli::to_json(cli::run_config_from_json(j)) == j);

  auto bad = j;
  bad["spurious"] = 1;
  CHECK_THROWS_AS(cli::run_config_from_json(bad), ConfigError);
  bad = j;
  bad["train"]["tcn"]["kernel"] = 3;
  CHECK_THROWS_AS(cli::run_config_from_json(bad), ConfigError);
  bad = j;
  bad["search"]["lr_mid"] = 1e-3;
  CHECK_THROWS_AS(cli::run_config_from_json(bad), ConfigError);
  bad = j;
  bad["schema"] = "mgptcn-config/v0";
  CHECK_THROWS_AS(cli::run_config_from_json(bad), ConfigError);
  bad = j;
  bad.erase("schema");
  CHECK_THROWS_AS(cli::run_config_from_json(bad), ConfigError);
  bad = j;
  bad["horizons"] = {0, 8};
  CHECK_THROWS_AS(cli::run_config_from_json(bad), ConfigError);
  bad = j;
  bad["dtw_k_grid"] = {1, 4};
  CHECK_THROWS_AS(cli::run_config_from_json(bad), ConfigError);
  bad = j;
  bad["splits"] = "three";
  CHECK_THROWS_AS(cli::run_config_from_json(bad), ConfigError);
}

TEST_CASE("user errors exit 1") {
  const auto dir = scratch("usage");
  CHECK(run_cli({}).code == 1);
  CHECK(run_cli({"frobnicate"}).code == 1);
  CHECK(run_cli({"train", "--method", "svm"}).code == 1);
  CHECK(run_cli({"--config", (dir / "absent.json").string(), "generate"}).code == 1);
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK(run_cli({"--config", (dir / "broken.json").string(), "generate"}).code == 1);
  CHECK(run_cli({"--help"}).code == 0);
}

TEST_CASE("generate with the default config lands near the target prevalence") {
  const auto dir = scratch("default");
  cli::RunConfig c;
  c.cohort_dir = (dir / "cohort").string();
  const auto r = run_cli({"--config", write_config(dir, cli::to_json(c)), "generate"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto m = json::parse(slurp(dir / "cohort" / "manifest.json"));
  const double prevalence = m["cohort"]["prevalence"].get<double>();
  CHECK(prevalence >= 0.08);
  CHECK(prevalence <= 0.11);
  CHECK(m["channels"] == 44);
  CHECK(m["seed"] == 0);
  CHECK(m["files"].size() == 4);
  // The resolved config is logged as one JSON line.
  CHECK(r.err.rfind("config {", 0) == 0);
}

TEST_CASE("generate is reproducible and refuses infeasible specs") {
  const auto dir = scratch("generate");
  auto cfg = small_config(dir);
  const auto path = write_config(dir, cfg);

  auto a = run_cli({"--config", path, "--seed", "7", "generate"});
  REQUIRE_MESSAGE(a.code == 0, a.err);
  const auto first = slurp(dir / "cohort" / "manifest.json");
  // Rerunning the same seed over the same directory is allowed and identical.
  auto b = run_cli({"--config", path, "--seed", "7", "generate"});
  REQUIRE(b.code == 0);
  CHECK(slurp(dir / "cohort" / "manifest.json") == first);
  CHECK(a.out == b.out);

  // A different cohort needs --force.
  CHECK(run_cli({"--config", path, "--seed", "8", "generate"}).code == 1);
  REQUIRE(run_cli({"--config", path, "--seed", "8", "--force", "generate"}).code == 0);
  CHECK(slurp(dir / "cohort" / "manifest.json") != first);

  cfg["cohort_dir"] = (dir / "empty").string();
  cfg["generator"]["encounters"] = 0;
  const auto zero = run_cli({"--config", write_config(dir, cfg), "generate"});
  CHECK(zero.code == 1);
  CHECK(zero.err.find("encounters") != std::string::npos);
  CHECK_FALSE(fs::exists(dir / "empty"));

  cfg["generator"]["encounters"] = 400;
  cfg["generator"]["case_fraction"] = 0.2;
  CHECK(run_cli({"--config", write_config(dir, cfg), "generate"}).code == 1);
  CHECK_FALSE(fs::exists(dir / "empty"));
}

TEST_CASE("label reproduces the labels written by generate") {
  const auto dir = scratch("label");
  const auto path = write_config(dir, small_config(dir));
  REQUIRE(run_cli({"--config", path, "generate"}).code == 0);
  const auto labels = slurp(dir / "cohort" / "labels.csv");
  const auto manifest = slurp(dir / "cohort" / "manifest.json");
  REQUIRE(run_cli({"--config", path, "label"}).code == 0);
  CHECK(slurp(dir / "cohort" / "labels.csv") == labels);
  CHECK(slurp(dir / "cohort" / "manifest.json") == manifest);
}

TEST_CASE("pipeline: train, evaluate and horizon are deterministic and leave inputs untouched") {
  const auto dir = scratch("pipeline");
  auto cfg = small_config(dir);
  const auto path = write_config(dir, cfg);
  REQUIRE(run_cli({"--config", path, "generate"}).code == 0);
  REQUIRE(run_cli({"--config", path, "split"}).code == 0);
  const auto cohort_before = digests_under(dir / "cohort");

  // Missing artifacts are data errors.
  const auto missing = run_cli({"--config", path, "evaluate", "--method", "raw-tcn"});
  CHECK(missing.code == 2);
  CHECK(missing.err.find("checkpoint.json") != std::string::npos);

  std::string run_outputs[2];
  for (int run = 0; run < 2; ++run) {
    const auto out = (dir / ("runs" + std::to_string(run))).string();
    auto t = run_cli({"--config", path, "--out", out, "--workers", run == 0 ? "1" : "3", "train", "--method", "raw-tcn"});
    REQUIRE_MESSAGE(t.code == 0, t.err);
    auto h = run_cli({"--config", path, "--out", out, "horizon", "--method", "raw-tcn"});
    REQUIRE_MESSAGE(h.code == 0, h.err);
    run_outputs[run] = stable_tokens(t.out + h.out);
    CHECK(fs::exists(fs::path(out) / "raw-tcn" / "split_0" / "train.log"));
  }
  // Best epoch, checkpoint digests, horizon table digests and plot digests
  // all match across runs and worker counts.
  CHECK(run_outputs[0] == run_outputs[1]);
  for (const char* f : {"raw-tcn/split_0/checkpoint.json", "raw-tcn/split_1/horizon.json", "raw-tcn/plot_data.csv"})
    CHECK(slurp(dir / "runs0" / f) == slurp(dir / "runs1" / f));

  // The plot file parses back and agrees with the aggregate table.
  const auto plot_text = slurp(dir / "runs0" / "raw-tcn" / "plot_data.csv");
  CHECK(plot_text.rfind("# schema=mgptcn-plot/v1", 0) == 0);
  CHECK(plot_text.find(std::string(eval::kPlotHeader)) != std::string::npos);
  const auto rows = eval::parse_plot_data(plot_text);
  const auto agg = json::parse(slurp(dir / "runs0" / "raw-tcn" / "aggregate.json"));
  REQUIRE(rows.size() == agg["rows"].size());
  REQUIRE(rows.size() == 16);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].horizon == agg["rows"][i]["horizon"].get<int>());
    CHECK(rows[i].metric == agg["rows"][i]["metric"].get<std::string>());
    CHECK(rows[i].mean == agg["rows"][i]["mean"].get<double>());
    CHECK(rows[i].std == agg["rows"][i]["std"].get<double>());
    CHECK(rows[i].method == "raw-tcn");
  }

  // Existing checkpoints are only replaced with --force.
  const auto runs0 = (dir / "runs0").string();
  CHECK(run_cli({"--config", path, "--out", runs0, "train", "--method", "raw-tcn"}).code == 1);

  auto e = run_cli({"--config", path, "--out", runs0, "evaluate", "--method", "raw-tcn"});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  CHECK(json::parse(slurp(dir / "runs0" / "raw-tcn" / "evaluation.json"))["splits"].size() == 2);

  CHECK(digests_under(dir / "cohort") == cohort_before);

  // A single split cannot be aggregated.
  auto one = cfg;
  one["splits"] = 1;
  one["out_dir"] = runs0;
  const auto single = run_cli({"--config", write_config(dir, one), "horizon", "--method", "raw-tcn"});
  CHECK(single.code == 2);
  CHECK(single.err.find("at least 2 splits") != std::string::npos);
  CHECK(fs::exists(dir / "runs0" / "raw-tcn" / "split_0" / "horizon.json"));
}

TEST_CASE("dtw-knn trains without a weight checkpoint") {
  const auto dir = scratch("dtw");
  const auto path = write_config(dir, small_config(dir));
  REQUIRE(run_cli({"--config", path, "generate"}).code == 0);
  auto t = run_cli({"--config", path, "train", "--method", "dtw-knn"});
  REQUIRE_MESSAGE(t.code == 0, t.err);
  const auto split0 = dir / "runs" / "dtw-knn" / "split_0";
  CHECK(fs::exists(split0 / "distance_cache" / "dtw_channel_0.bin"));
  CHECK(fs::exists(split0 / "distance_cache" / "dtw_channel_2.bin"));
  CHECK_FALSE(fs::exists(split0 / "checkpoint.json"));
  const auto model = json::parse(slurp(split0 / "model.json"));
  CHECK(model["k"].get<std::size_t>() % 2 == 1);

  // Granular commands reuse the cache and reproduce the same selection.
  const auto cache = digests_under(split0 / "distance_cache");
  auto b = run_cli({"--config", path, "dtw-build"});
  REQUIRE(b.code == 0);
  CHECK(digests_under(split0 / "distance_cache") == cache);
  REQUIRE(run_cli({"--config", path, "dtw-select-k"}).code == 0);
  CHECK(json::parse(slurp(split0 / "model.json")) == model);
  REQUIRE(run_cli({"--config", path, "dtw-predict"}).code == 0);
  CHECK(slurp(split0 / "predictions.csv").rfind("encounter_id,label,score\n", 0) == 0);
  auto h = run_cli({"--config", path, "horizon", "--method", "dtw-knn"});
  REQUIRE_MESSAGE(h.code == 0, h.err);
}

TEST_CASE("a changed seed cannot reuse stale splits") {
  const auto dir = scratch("stale");
  const auto path = write_config(dir, small_config(dir));
  REQUIRE(run_cli({"--config", path, "generate"}).code == 0);
  REQUIRE(run_cli({"--config", path, "split"}).code == 0);
  const auto r = run_cli({"--config", path, "--seed", "5", "train", "--method", "dtw-knn"});
  CHECK(r.code == 2);
  CHECK(r.err.find("rerun `split`") != std::string::npos);
}

TEST_CASE("--max-seconds yields a timed-out best-so-far checkpoint") {
  const auto dir = scratch("timeout");
  auto cfg = small_config(dir);
  cfg["train"]["max_epochs"] = 200;
  cfg["splits"] = 1;
  const auto path = write_config(dir, cfg);
  REQUIRE(run_cli({"--config", path, "generate"}).code == 0);
  const auto r = run_cli({"--config", path, "--max-seconds", "0.2", "train", "--method", "mgp-tcn"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto ck = json::parse(slurp(dir / "runs" / "mgp-tcn" / "split_0" / "checkpoint.json"));
  CHECK(ck["timed_out"] == true);
  CHECK(ck["epoch"].get<std::size_t>() >= 1);
  CHECK(ck["epoch"].get<std::size_t>() < 200);
}

TEST_CASE("path environment overrides apply and flags win") {
  const auto dir = scratch("env");
  const auto path = write_config(dir, small_config(dir));
  const auto env_cohort = (dir / "env_cohort").string();
  ::setenv("MGPTCN_COHORT_DIR", env_cohort.c_str(), 1);
  const auto r = run_cli({"--config", path, "generate"});
  ::unsetenv("MGPTCN_COHORT_DIR");
  REQUIRE(r.code == 0);
  CHECK(fs::exists(fs::path(env_cohort) / "manifest.json"));
  CHECK_FALSE(fs::exists(dir / "cohort"));

  ::setenv("MGPTCN_OUT_DIR", (dir / "env_runs").string().c_str(), 1);
  const auto s = run_cli({"--config", path, "--out", (dir / "flag_runs").string(), "show-config"});
  ::unsetenv("MGPTCN_OUT_DIR");
  REQUIRE(s.code == 0);
  CHECK(json::parse(s.out)["out_dir"] == (dir / "flag_runs").string());
}
