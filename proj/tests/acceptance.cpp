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

// Acceptance suite. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. Pass criterion numbers as arguments to run
// a subset, e.g. `acceptance 1 3 5`.

#include <Eigen/Dense>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "mgptcn/cli.hpp"
#include "mgptcn/data.hpp"
#include "mgptcn/digest.hpp"
#include "mgptcn/dtwknn.hpp"
#include "mgptcn/eval.hpp"
#include "mgptcn/mgp.hpp"
#include "mgptcn/parallel.hpp"
#include "mgptcn/rng.hpp"
#include "mgptcn/tcn.hpp"
#include "mgptcn/training.hpp"
#include "oracles/dense_gp.hpp"
#include "oracles/dtw.hpp"
#include "oracles/metrics.hpp"
#include "oracles/model_fd.hpp"

using namespace mgptcn;
namespace fs = std::filesystem;

namespace {

// ---- Pinned tolerances and budgets ------------------------------------------

constexpr double kPosteriorTol = 1e-10;
constexpr double kGradientRelTol = 1e-3;
constexpr double kDtwTol = 1e-12;
constexpr double kMetricTol = 1e-9;
constexpr double kOnsetAgreeHours = 1.0;
constexpr double kOnsetAgreeFraction = 0.95;
constexpr double kMinAuprcAtOnset = 0.6;
constexpr double kHorizonSlack = 0.05;
constexpr double kRawMargin = 0.03;
constexpr double kMaxObservedFraction = 0.30;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int precision = 4) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

// ---- 1: GP posterior vs dense Kronecker oracle ------------------------------------

Outcome gp_posterior() {
  std::mt19937_64 rng(101);
  double worst = 0.0;
  for (int rep = 0; rep < 200; ++rep) {
    auto inst = oracle::random_instance(rng, 3, 5, 4);
    mgp::Grid g;
    g.times = inst.grid;
    const auto post = mgp::posterior(inst.enc, g, inst.params, mgp::JitterPolicy::none());
    const auto dense = oracle::dense_posterior(inst.enc, inst.grid, inst.kd, inst.noise, inst.length_scale);
    const auto n = post.dim();
    for (std::size_t i = 0; i < n; ++i) {
      worst = std::max(worst, std::abs(post.mean[i] - dense.mean(i)));
      for (std::size_t j = 0; j < n; ++j)
        worst = std::max(worst, std::abs(post.covariance[i * n + j] - dense.cov(i, j)));
    }
  }
  return {worst < kPosteriorTol, "200 instances, max abs error " + fmt(worst, 3) + " (tol " + fmt(kPosteriorTol) + ")"};
}

// ---- 2: end-to-end gradient check -------------------------------------------------------

Encounter random_encounter(std::mt19937_64& rng, std::size_t channels, const std::string& id) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  Encounter e;
  e.id = id;
  e.label = u(rng) < 0.5 ? 1 : 0;
  e.onset_hour = 3.0 + 3.0 * u(rng);
  const std::size_t m = 1 + static_cast<std::size_t>(6 * u(rng));
  for (std::size_t k = 0; k < m; ++k)
    e.observations.push_back({*e.onset_hour * u(rng), static_cast<std::size_t>(u(rng) * channels), n(rng)});
  sort_observations(e);
  return e;
}

Outcome gradient_check() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  std::size_t leaves = 0;
  for (int inst = 0; inst < 20; ++inst) {
    const std::size_t d = 1 + inst % 3;
    tcn::TCNConfig c;
    c.num_blocks = 4;
    c.filters = 15;
    c.filter_width = 2 + inst % 2;
    auto model = training::ModelState::initial(training::ModelKind::kMgpTcn, d, c, 300 + inst);
    for (auto& v : model.mgp.task_raw) v += 0.6 * (u(rng) - 0.5);
    for (auto& v : model.mgp.log_noise) v += 0.6 * (u(rng) - 0.5);
    model.mgp.log_length_scale += 0.6 * (u(rng) - 0.5);
    std::vector<Encounter> batch;
    std::vector<std::vector<std::vector<double>>> noise;
    for (int b = 0; b < 2; ++b) {
      batch.push_back(random_encounter(rng, d, "g" + std::to_string(inst) + "_" + std::to_string(b)));
      noise.push_back(training::batch_noise(inst, 1, batch.back().id, 1, d * mgp::make_grid(batch.back()).size()));
    }
    std::vector<std::size_t> all(model.parameter_count());
    std::iota(all.begin(), all.end(), 0);
    const auto r = oracle::check_model_gradient(model, batch, noise, c.l2_penalty, all);
    worst = std::max(worst, r.max_rel_error);
    leaves += r.checked;
  }
  return {worst < kGradientRelTol, "20 instances, " + std::to_string(leaves) + " parameters, max rel error " +
                                       fmt(worst, 3) + " (tol " + fmt(kGradientRelTol) + ")"};
}

// ---- 3: TCN contracts ----------------------------------------------------------------------

std::vector<double> features(const tcn::TCNWeights& w, const std::vector<double>& z, std::size_t t,
                             std::size_t* rows_out = nullptr, std::size_t* cols_out = nullptr) {
  ad::Graph g;
  auto vars = tcn::bind(g, w, false);
  auto h = tcn::tcn_features(g.constant({w.input_channels, t}, z), vars);
  if (rows_out) *rows_out = h.shape()[0];
  if (cols_out) *cols_out = h.shape()[1];
  return {h.values().begin(), h.values().end()};
}

Outcome tcn_contracts() {
  std::mt19937_64 rng(303);
  std::uniform_int_distribution<std::size_t> blocks(4, 6), width(2, 5), filters(15, 20), chans(1, 4);
  std::normal_distribution<double> n(0.0, 1.0);
  std::size_t length_ok = 0, causal_ok = 0, rf_ok = 0;
  std::string first_failure;
  for (int rep = 0; rep < 100; ++rep) {
    tcn::TCNConfig c;
    c.num_blocks = blocks(rng);
    c.filter_width = width(rng);
    c.filters = filters(rng);
    const std::size_t d = chans(rng);
    const auto w = tcn::TCNWeights::initial(c, d, 1000 + rep);
    const std::size_t rf = c.receptive_field();
    const std::size_t t = rf + 8;
    std::vector<double> z(d * t);
    for (auto& v : z) v = n(rng);

    std::size_t rows = 0, cols = 0;
    const auto base = features(w, z, t, &rows, &cols);
    length_ok += (cols == t && rows == c.filters);

    // Causality: a bump at s leaves every output before s bit-identical.
    const std::size_t s = std::uniform_int_distribution<std::size_t>(1, t - 1)(rng);
    auto zs = z;
    for (std::size_t ch = 0; ch < d; ++ch) zs[ch * t + s] += 3.0;
    const auto ys = features(w, zs, t);
    bool causal = true;
    for (std::size_t f = 0; f < rows; ++f)
      for (std::size_t k = 0; k < s; ++k) causal &= ys[f * t + k] == base[f * t + k];
    causal_ok += causal;

    // Receptive field: a bump at time 0 reaches outputs 0 .. rf-1 and no further.
    auto z0 = z;
    for (std::size_t ch = 0; ch < d; ++ch) z0[ch * t] += 3.0;
    const auto y0 = features(w, z0, t);
    std::size_t last_changed = 0;
    for (std::size_t f = 0; f < rows; ++f)
      for (std::size_t k = 0; k < t; ++k)
        if (y0[f * t + k] != base[f * t + k]) last_changed = std::max(last_changed, k);
    const std::size_t measured = last_changed + 1;
    rf_ok += measured == rf;
    if (measured != rf && first_failure.empty())
      first_failure = " first mismatch: blocks=" + std::to_string(c.num_blocks) + " width=" +
                      std::to_string(c.filter_width) + " measured=" + std::to_string(measured) +
                      " formula=" + std::to_string(rf);
  }
  const bool pass = length_ok == 100 && causal_ok == 100 && rf_ok == 100;
  return {pass, "100 configs: length " + std::to_string(length_ok) + "/100, causal " + std::to_string(causal_ok) +
                    "/100, receptive field " + std::to_string(rf_ok) + "/100" + first_failure};
}

// ---- 4: DTW oracles ----------------------------------------------------------------------------

std::vector<double> random_seq(std::mt19937_64& rng, std::size_t max_len) {
  std::uniform_int_distribution<std::size_t> len(1, max_len);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> s(len(rng));
  for (auto& v : s) v = n(rng);
  return s;
}

Outcome dtw_oracles() {
  std::mt19937_64 rng(404);
  double worst = 0.0;
  for (int i = 0; i < 500; ++i) {
    const auto a = random_seq(rng, 6), b = random_seq(rng, 6);
    worst = std::max(worst, std::abs(dtw::dtw_distance(a, b) - oracle::brute_dtw(a, b)));
  }
  std::size_t exact = 0, total = 0;
  for (int trial = 0; trial < 20; ++trial) {
    dtw::Model m;
    m.channels = 2;
    for (int e = 0; e < 5; ++e) m.train.push_back({random_seq(rng, 5), random_seq(rng, 5)});
    m.labels = {1, 0, 0, 1, 0};
    for (std::size_t k : {1u, 3u, 5u}) {
      m.k = k;
      const dtw::Series q{random_seq(rng, 5), random_seq(rng, 5)};
      exact += dtw::ensemble_predict(q, m) == oracle::brute_ensemble(q, m.train, m.labels, k);
      ++total;
    }
  }
  const bool pass = worst < kDtwTol && exact == total;
  return {pass, "500 pairs max abs error " + fmt(worst, 3) + " (tol " + fmt(kDtwTol) + "); ensemble exact " +
                    std::to_string(exact) + "/" + std::to_string(total)};
}

// ---- 5: metric oracles ----------------------------------------------------------------------

Outcome metric_oracles() {
  std::mt19937_64 rng(505);
  double worst = 0.0;
  std::size_t invariant = 0;
  for (int i = 0; i < 1000; ++i) {
    const auto s = oracle::random_scored(rng, 50);
    worst = std::max(worst, std::abs(eval::auprc(s) - oracle::sweep_auprc(s)));
    worst = std::max(worst, std::abs(eval::auc(s) - oracle::pair_auc(s)));
    auto t = s;
    for (auto& x : t) x.score = std::exp(3.0 * x.score) - 7.0;
    invariant += eval::auprc(t) == eval::auprc(s) && eval::auc(t) == eval::auc(s);
  }
  const bool pass = worst < kMetricTol && invariant == 1000;
  return {pass, "1000 cohorts max abs error " + fmt(worst, 3) + " (tol " + fmt(kMetricTol) +
                    "); monotone invariance " + std::to_string(invariant) + "/1000"};
}

// ---- 6: labeller round trip -------------------------------------------------------------------

Outcome labeller_round_trip() {
  // Culture first: antibiotics may follow within 72 h. Antibiotics first:
  // the culture must follow within 24 h.
  const std::vector<double> c0{0}, a50{50}, a0{0}, c30{30}, a80{80}, c20{20};
  const bool examples = data::detect_si(a50, c0) == 0.0 && !data::detect_si(a0, c30).has_value() &&
                        !data::detect_si(a80, c0).has_value() && data::detect_si(a0, c20) == 0.0;

  data::GeneratorSpec spec;
  spec.channels = 6;
  spec.encounters = 2000;
  const auto raw = data::generate_synthetic(spec, 606);
  std::size_t planted = 0, agree = 0;
  for (const auto& e : raw.encounters) {
    if (!e.planted_onset) continue;
    ++planted;
    const auto r = data::label_encounter(e);
    if (r.onset_hour && std::abs(*r.onset_hour - *e.planted_onset) <= kOnsetAgreeHours) ++agree;
  }
  const double frac = planted ? static_cast<double>(agree) / planted : 0.0;
  return {examples && planted > 0 && frac >= kOnsetAgreeFraction,
          std::string("SI examples ") + (examples ? "exact" : "WRONG") + "; onsets within 1 h: " +
              std::to_string(agree) + "/" + std::to_string(planted) + " = " + fmt(frac) + " (need >= " +
              fmt(kOnsetAgreeFraction) + ")"};
}

// ---- 7 and 9: synthetic horizon experiment ---------------------------------------------------

data::GeneratorSpec experiment_spec() {
  data::GeneratorSpec spec;
  spec.channels = 6;
  spec.encounters = 3000;
  spec.signal_strength = 2.5;
  spec.signal_lead_hours = 10.0;
  return spec;
}

constexpr std::uint64_t kExperimentSeed = 77;

data::LabeledCohort experiment_cohort() {
  const SeedStream root(kExperimentSeed);
  const auto raw = data::generate_synthetic(experiment_spec(), root.child("generator").seed());
  return data::build_cohort(raw, root.child("matching").seed());
}

std::uint64_t experiment_split_seed(std::size_t k) { return SeedStream(kExperimentSeed).child("split").child(k).seed(); }

// Share of (channel, hour) cells with at least one measurement, over all
// encounters truncated at onset.
double observed_fraction(const data::LabeledCohort& cohort) {
  double seen = 0, cells = 0;
  for (const auto& e0 : cohort.encounters) {
    const auto e = data::truncate_to_horizon(e0, 0.0);
    const auto hours = static_cast<std::size_t>(std::floor(e.observations.back().time)) + 1;
    std::set<std::pair<std::size_t, std::size_t>> cell;
    for (const auto& o : e.observations) cell.insert({o.channel, static_cast<std::size_t>(o.time)});
    seen += static_cast<double>(cell.size());
    cells += static_cast<double>(hours * cohort.channels);
  }
  return seen / cells;
}

training::TrainConfig experiment_config(training::ModelKind kind, std::size_t k) {
  training::TrainConfig c;
  c.model_kind = kind;
  c.learning_rate = 2e-3;
  c.batch_size = 20;
  c.mc_samples = 10;
  c.patience = 8;
  c.max_epochs = kind == training::ModelKind::kMgpTcn ? 30 : 60;
  c.tcn.filters = 15;
  c.tcn.num_blocks = 4;
  c.tcn.filter_width = 2;
  c.seed = SeedStream(kExperimentSeed).child("train").child(k).seed();
  c.workers = default_workers();
  return c;
}

Outcome horizon_experiment() {
  const auto cohort = experiment_cohort();
  const double obs = observed_fraction(cohort);
  const auto horizons = eval::default_horizons();
  std::vector<eval::HorizonTable> mgp_tables, raw_tables;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto split = data::make_split(cohort, experiment_split_seed(k));
    for (auto kind : {training::ModelKind::kMgpTcn, training::ModelKind::kRawTcn}) {
      const auto config = experiment_config(kind, k);
      const auto t0 = std::chrono::steady_clock::now();
      const auto result = training::train(split.train, split.validation, cohort.channels, config);
      const auto& model = result.best.model;
      eval::BatchScorer scorer = [&](std::span<const Encounter> b) {
        return training::predict(model, b, config.mc_samples, config.seed, config.workers);
      };
      auto table = eval::horizon_eval(scorer, split.test, horizons, 10, "split_" + std::to_string(k));
      std::cout << "    split " << k << ' ' << training::to_string(kind) << ": best epoch " << result.best.epoch
                << ", test AUPRC by horizon";
      for (const auto& r : table.rows) std::cout << ' ' << (r.auprc ? fmt(*r.auprc, 3) : "n/a");
      std::cout << " ("
                << fmt(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 3) << " s)"
                << std::endl;
      (kind == training::ModelKind::kMgpTcn ? mgp_tables : raw_tables).push_back(std::move(table));
    }
  }
  const auto mgp = eval::aggregate_splits(mgp_tables, "mgp-tcn");
  const auto raw = eval::aggregate_splits(raw_tables, "raw-tcn");
  auto mean_auprc = [](const eval::AggregateTable& t, int h) {
    for (const auto& r : t.rows)
      if (r.horizon == h && r.metric == "auprc") return r.mean;
    return std::nan("");
  };
  std::ostringstream curve;
  bool monotone = true;
  for (int h : horizons) {
    const double v = mean_auprc(mgp, h);
    curve << (h ? " " : "") << fmt(v, 3);
    if (h > 0 && !(v <= mean_auprc(mgp, h - 1) + kHorizonSlack)) monotone = false;
  }
  const double m0 = mean_auprc(mgp, 0), r0 = mean_auprc(raw, 0);
  const bool pass = obs <= kMaxObservedFraction && m0 >= kMinAuprcAtOnset && monotone && m0 - r0 >= kRawMargin;
  return {pass, "observed cells " + fmt(obs, 3) + " (<= " + fmt(kMaxObservedFraction) + "); MGP-TCN mean AUPRC h0..7 [" +
                    curve.str() + "] (h0 >= " + fmt(kMinAuprcAtOnset) + ", steps <= +" + fmt(kHorizonSlack) +
                    (monotone ? " ok" : " VIOLATED") + "); Raw-TCN h0 " + fmt(r0, 3) + ", margin " +
                    fmt(m0 - r0, 3) + " (>= " + fmt(kRawMargin) + ")"};
}

Outcome masking_counts() {
  const auto cohort = experiment_cohort();
  const auto horizons = eval::default_horizons();
  eval::BatchScorer constant = [](std::span<const Encounter> b) { return std::vector<double>(b.size(), 0.5); };
  bool ok = true;
  std::ostringstream counts;
  for (std::size_t k = 0; k < 3; ++k) {
    const auto split = data::make_split(cohort, experiment_split_seed(k));
    for (const auto* part : {&split.train, &split.validation, &split.test}) {
      const auto t = eval::horizon_eval(constant, *part, horizons, 10);
      for (std::size_t i = 1; i < t.rows.size(); ++i)
        ok &= t.rows[i].n_encounters <= t.rows[i - 1].n_encounters && t.rows[i].n_cases <= t.rows[i - 1].n_cases;
      if (part == &split.test) {
        counts << " split " << k << " test:";
        for (const auto& r : t.rows) counts << ' ' << r.n_encounters;
      }
    }
  }
  return {ok, "3 splits x 3 partitions, surviving encounters and cases weakly decrease;" + counts.str()};
}

// ---- 8: determinism through the CLI --------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism() {
  const auto base = fs::temp_directory_path() / "mgptcn_acceptance_determinism";
  fs::remove_all(base);
  std::vector<std::string> manifests, checkpoints, tables;
  for (int run = 0; run < 2; ++run) {
    const auto dir = base / ("run" + std::to_string(run));
    fs::create_directories(dir);
    cli::RunConfig c;
    c.seed = 88;
    c.cohort_dir = (dir / "cohort").string();
    c.out_dir = (dir / "runs").string();
    c.generator.channels = 3;
    c.generator.encounters = 400;
    c.generator.signal_strength = 2.5;
    c.train.max_epochs = 2;
    c.train.tcn.filters = 15;
    c.train.tcn.num_blocks = 4;
    c.splits = 2;
    const auto cfg = (dir / "config.json").string();
    std::ofstream(cfg) << cli::to_json(c).dump(2);
    std::ostringstream out, err;
    for (std::vector<std::string> cmd : {std::vector<std::string>{"generate"}, {"train", "--method", "mgp-tcn"},
                                         {"horizon", "--method", "mgp-tcn"}}) {
      cmd.insert(cmd.begin(), {"--config", cfg, "--workers", run == 0 ? "1" : "2"});
      if (cli::run(cmd, out, err) != 0) return {false, "CLI failed: " + err.str()};
    }
    manifests.push_back(slurp(dir / "cohort" / "manifest.json"));
    std::string ck, ht;
    for (int k = 0; k < 2; ++k) {
      const auto sd = dir / "runs" / "mgp-tcn" / ("split_" + std::to_string(k));
      ck += sha256_hex(slurp(sd / "checkpoint.json")) + ' ';
      ht += slurp(sd / "horizon.json");
    }
    checkpoints.push_back(ck);
    tables.push_back(ht + slurp(dir / "runs" / "mgp-tcn" / "plot_data.csv"));
  }
  fs::remove_all(base);
  const bool m = manifests[0] == manifests[1], ck = checkpoints[0] == checkpoints[1], t = tables[0] == tables[1];
  return {m && ck && t && !manifests[0].empty(),
          std::string("two CLI runs (1 vs 2 workers): manifest ") + (m ? "identical" : "DIFFERS") + ", checkpoints " +
              (ck ? "identical" : "DIFFER") + ", horizon tables " + (t ? "identical" : "DIFFER")};
}

struct Criterion {
  int id;
  const char* name;
  double budget_seconds;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> criteria{
      {1, "GP posterior matches the dense oracle", 30, gp_posterior},
      {2, "end-to-end gradients match finite differences", 300, gradient_check},
      {3, "TCN length, causality and receptive field", 60, tcn_contracts},
      {4, "DTW and ensemble match brute force", 60, dtw_oracles},
      {5, "AUPRC/AUC match sweep and pair oracles", 60, metric_oracles},
      {6, "labeller recovers planted onsets", 120, labeller_round_trip},
      {7, "synthetic horizon experiment", 7200, horizon_experiment},
      {8, "identical seeds give identical artifacts", 600, determinism},
      {9, "masking counts weakly decrease with horizon", 120, masking_counts},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_budget = secs < c.budget_seconds;
    const bool pass = o.pass && in_budget;
    failures += !pass;
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << ": " << c.name << " | " << o.detail << " | "
              << fmt(secs, 3) << " s (budget " << c.budget_seconds << " s" << (in_budget ? "" : ", EXCEEDED") << ")"
              << std::endl;
  }
  std::cout << (failures == 0 ? "all selected criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
