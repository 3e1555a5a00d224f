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

// Cohort construction: synthetic event streams, Sepsis-3 style labelling,
// case-control matching, masking, horizon truncation, hourly binning with
// carry-forward imputation and per-channel z-scoring.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "mgptcn/encounter.hpp"

namespace mgptcn::data {

// ---- Raw event streams -----------------------------------------------------

inline constexpr std::size_t kOrganCount = 5;

struct OrganObservation {
  double time = 0.0;
  std::size_t organ = 0;
  double value = 0.0;  // severity on the rubric scale; see organ_points()
};

struct RawEncounter {
  std::string id;
  double stay_hours = 0.0;
  std::vector<Observation> observations;
  std::vector<double> antibiotics;  // administration times, sorted
  std::vector<double> cultures;     // body-fluid sampling times, sorted
  std::vector<OrganObservation> organ_observations;
  std::optional<double> planted_onset;  // generator ground truth only
};

struct RawCohort {
  std::size_t channels = 0;
  std::vector<RawEncounter> encounters;
};

struct GeneratorSpec {
  std::size_t channels = 44;
  std::size_t encounters = 2000;
  // Fraction of encounters planted as cases. Must leave 10 controls per case.
  double case_fraction = 0.08;
  double min_stay_hours = 24.0;
  double max_stay_hours = 72.0;
  double min_onset_hours = 8.0;
  double max_onset_hours = 40.0;
  // Poisson rate of measurements per channel and hour.
  double observation_rate = 0.25;
  double noise_sd = 0.3;
  double signal_strength = 1.5;
  double signal_lead_hours = 10.0;
  double signal_channel_fraction = 0.25;
  // Decay time of the latent Ornstein-Uhlenbeck processes.
  double latent_time_constant_hours = 6.0;
  std::size_t latent_factors = 3;
  double control_si_fraction = 0.2;

  void validate() const;
  std::size_t signal_channels() const;
};

nlohmann::json to_json(const GeneratorSpec& spec);
// Rejects unknown keys; missing keys keep their defaults.
GeneratorSpec generator_spec_from_json(const nlohmann::json& j);

RawCohort generate_synthetic(const GeneratorSpec& spec, std::uint64_t seed);

// ---- Labelling ---------------------------------------------------------------

// Suspicion of infection: a culture followed by an antibiotic within 72 h,
// or an antibiotic followed by a culture within 24 h. Returns the earliest
// qualifying pair's earlier event.
std::optional<double> detect_si(std::span<const double> antibiotics,
                                std::span<const double> cultures);

// Rubric: thresholds at 1, 2, 3, 4 on the severity scale give 0..4 points.
int organ_points(double severity);

// Score at `hour` from the worst value per organ in [hour - 24, hour].
int hourly_sofa(std::span<const OrganObservation> inputs, int hour);
// Scores for hours 0..floor(stay_hours).
std::vector<int> hourly_sofa_series(const RawEncounter& enc);

// Scans hours of [si - 48, si + 24] clipped to the stay (scores[h] is the
// score at hour h) and returns the first hour whose score exceeds the
// running minimum of the window by at least 2.
std::optional<double> sepsis_onset(double si_time, std::span<const int> scores);

struct LabelResult {
  int label = 0;
  std::optional<double> onset_hour;
  std::optional<double> si_time;
};

LabelResult label_encounter(const RawEncounter& enc);

// ---- Matching and filtering --------------------------------------------------

inline constexpr std::size_t kControlsPerCase = 10;
inline constexpr double kMinCaseOnsetHours = 7.0;
inline constexpr std::size_t kMaxObservations = 10000;

struct Candidate {
  std::string id;
  double stay_hours = 0.0;
  double onset_hour = 0.0;  // cases only
};

// case id -> control ids (in draw order)
using Matching = std::map<std::string, std::vector<std::string>>;

// Draws controls uniformly without replacement. A control whose stay ends
// before its case's onset is skipped and stays available for other cases.
Matching match_controls(const std::vector<Candidate>& cases,
                        const std::vector<Candidate>& controls, std::uint64_t seed);

struct LabeledCohort {
  std::size_t channels = 0;
  std::vector<Encounter> encounters;
  Matching matching;
  std::map<std::string, double> stay_hours;
  double prevalence() const;
  std::size_t cases() const;
};

// Labels, matches and filters a raw cohort into a training cohort.
LabeledCohort build_cohort(const RawCohort& raw, std::uint64_t matching_seed,
                           std::size_t mc_samples = 10);

// Drops match groups whose case onset is earlier than 7 h, encounters with
// more than 10,000 observations, and encounters with fewer than
// `min_observations` observations once truncated at onset.
LabeledCohort filter_and_mask(LabeledCohort cohort, std::size_t min_observations = 10);

// ---- Per-encounter transforms ------------------------------------------------

// Keeps observations with time <= onset - h. May return an empty encounter,
// which callers mask.
Encounter truncate_to_horizon(const Encounter& enc, double horizon_hours);
bool is_masked(const Encounter& enc, std::size_t min_observations);

struct HourlyGrid {
  std::size_t channels = 0;
  std::size_t hours = 0;
  std::vector<double> values;  // row-major channels x hours
  double at(std::size_t c, std::size_t h) const { return values[c * hours + h]; }
};

// Hour bins [k, k+1) up to the bin holding the last observation. Bin value is
// the mean of its observations; empty bins carry the previous bin forward;
// leading empty bins are 0 (the centred mean).
HourlyGrid bin_and_impute(const Encounter& enc, std::size_t channels);

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> stddev;  // population; 1 where the channel is constant
};

ChannelStats zscore_fit(std::span<const Encounter> train, std::size_t channels);
Encounter zscore_apply(const Encounter& enc, const ChannelStats& stats);

// ---- Splits --------------------------------------------------------------------

struct Split {
  std::vector<Encounter> train, validation, test;
};

// Seeded 80/10/10 split by encounter, stratified by label; z-scores every
// split with training statistics.
Split make_split(const LabeledCohort& cohort, std::uint64_t seed, ChannelStats* stats = nullptr);

// ---- Files ---------------------------------------------------------------------

struct CohortPaths {
  std::string dir;
  std::string observations() const { return dir + "/observations.csv"; }
  std::string events() const { return dir + "/events.csv"; }
  std::string encounters() const { return dir + "/encounters.csv"; }
  std::string labels() const { return dir + "/labels.csv"; }
  std::string manifest() const { return dir + "/manifest.json"; }
};

void write_raw_cohort(const RawCohort& raw, const CohortPaths& paths);
RawCohort read_raw_cohort(const CohortPaths& paths, std::size_t channels);
void write_labels(const LabeledCohort& cohort, const CohortPaths& paths);
// Joins labels.csv with the raw observation file.
LabeledCohort read_labeled_cohort(const CohortPaths& paths, std::size_t channels);

}  // namespace mgptcn::data
