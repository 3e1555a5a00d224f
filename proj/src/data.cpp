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

#include "mgptcn/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>

#include "mgptcn/digest.hpp"
#include "mgptcn/errors.hpp"
#include "mgptcn/rng.hpp"

namespace mgptcn::data {

// ---- Generator spec ----------------------------------------------------------

void GeneratorSpec::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("generator spec: " + what); };
  if (channels < 1) fail("channels must be >= 1");
  if (encounters < 1) fail("encounters must be >= 1");
  if (!(case_fraction >= 0.0 && case_fraction < 1.0)) fail("case_fraction must be in [0, 1)");
  if (case_fraction * static_cast<double>(kControlsPerCase + 1) > 1.0 + 1e-12)
    fail("case_fraction " + std::to_string(case_fraction) + " leaves fewer than " +
         std::to_string(kControlsPerCase) + " controls per case");
  if (!(min_stay_hours > 0.0 && max_stay_hours >= min_stay_hours)) fail("invalid stay range");
  if (!(min_onset_hours >= 0.0 && max_onset_hours >= min_onset_hours)) fail("invalid onset range");
  if (min_onset_hours + 1.0 > min_stay_hours) fail("min_stay_hours must exceed min_onset_hours + 1");
  if (!(observation_rate > 0.0)) fail("observation_rate must be positive");
  if (!(noise_sd >= 0.0)) fail("noise_sd must be >= 0");
  if (!(signal_strength >= 0.0)) fail("signal_strength must be >= 0");
  if (!(signal_lead_hours > 0.0)) fail("signal_lead_hours must be positive");
  if (!(signal_channel_fraction >= 0.0 && signal_channel_fraction <= 1.0))
    fail("signal_channel_fraction must be in [0, 1]");
  if (!(latent_time_constant_hours > 0.0)) fail("latent_time_constant_hours must be positive");
  if (!(control_si_fraction >= 0.0 && control_si_fraction <= 1.0))
    fail("control_si_fraction must be in [0, 1]");
}

std::size_t GeneratorSpec::signal_channels() const {
  return static_cast<std::size_t>(std::ceil(signal_channel_fraction * static_cast<double>(channels)));
}

nlohmann::json to_json(const GeneratorSpec& s) {
  return {{"channels", s.channels},
          {"encounters", s.encounters},
          {"case_fraction", s.case_fraction},
          {"min_stay_hours", s.min_stay_hours},
          {"max_stay_hours", s.max_stay_hours},
          {"min_onset_hours", s.min_onset_hours},
          {"max_onset_hours", s.max_onset_hours},
          {"observation_rate", s.observation_rate},
          {"noise_sd", s.noise_sd},
          {"signal_strength", s.signal_strength},
          {"signal_lead_hours", s.signal_lead_hours},
          {"signal_channel_fraction", s.signal_channel_fraction},
          {"latent_time_constant_hours", s.latent_time_constant_hours},
          {"latent_factors", s.latent_factors},
          {"control_si_fraction", s.control_si_fraction}};
}

GeneratorSpec generator_spec_from_json(const nlohmann::json& j) {
  GeneratorSpec s;
  const auto defaults = to_json(s);
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!defaults.contains(it.key())) throw ConfigError("generator spec: unknown key '" + it.key() + "'");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("channels", s.channels);
  get("encounters", s.encounters);
  get("case_fraction", s.case_fraction);
  get("min_stay_hours", s.min_stay_hours);
  get("max_stay_hours", s.max_stay_hours);
  get("min_onset_hours", s.min_onset_hours);
  get("max_onset_hours", s.max_onset_hours);
  get("observation_rate", s.observation_rate);
  get("noise_sd", s.noise_sd);
  get("signal_strength", s.signal_strength);
  get("signal_lead_hours", s.signal_lead_hours);
  get("signal_channel_fraction", s.signal_channel_fraction);
  get("latent_time_constant_hours", s.latent_time_constant_hours);
  get("latent_factors", s.latent_factors);
  get("control_si_fraction", s.control_si_fraction);
  return s;
}

// ---- Generator -----------------------------------------------------------------

namespace {

struct ChannelModel {
  std::vector<double> loadings;  // latent_factors
  double own_weight = 1.0;
  double mean = 0.0;
  double scale = 1.0;
  double signal_sign = 0.0;  // 0 for non-signal channels
};

std::string encounter_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "enc%06zu", i);
  return buf;
}

// Exact OU transition: stationary variance 1.
double ou_step(double x, double dt, double tau, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  const double a = std::exp(-dt / tau);
  return a * x + std::sqrt(std::max(0.0, 1.0 - a * a)) * n(rng);
}

void add_si_pair(RawEncounter& e, double si, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < 0.5) {
    e.cultures.push_back(si);
    e.antibiotics.push_back(std::min(e.stay_hours, si + 48.0 * u(rng)));
  } else {
    e.antibiotics.push_back(si);
    e.cultures.push_back(std::min(e.stay_hours, si + 20.0 * u(rng)));
  }
}

}  // namespace

RawCohort generate_synthetic(const GeneratorSpec& spec, std::uint64_t seed) {
  spec.validate();
  const SeedStream root(seed);
  const std::size_t d = spec.channels;
  const std::size_t nf = spec.latent_factors;

  std::vector<ChannelModel> models(d);
  {
    auto rng = root.child("channels").engine();
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double shared = nf > 0 ? 0.8 : 0.0;
    const std::size_t n_signal = spec.signal_channels();
    for (std::size_t c = 0; c < d; ++c) {
      auto& m = models[c];
      m.loadings.resize(nf);
      double norm = 0.0;
      for (auto& l : m.loadings) {
        l = n(rng);
        norm += l * l;
      }
      norm = std::sqrt(std::max(norm, 1e-12));
      for (auto& l : m.loadings) l *= shared / norm;
      m.own_weight = std::sqrt(1.0 - shared * shared);
      m.mean = 100.0 * (u(rng) - 0.5);
      m.scale = 0.5 + 9.5 * u(rng);
      if (c < n_signal) m.signal_sign = (c % 2 == 0) ? 1.0 : -1.0;
    }
  }

  const auto n_cases = static_cast<std::size_t>(std::llround(spec.case_fraction * spec.encounters));
  std::vector<std::size_t> order(spec.encounters);
  std::iota(order.begin(), order.end(), 0);
  {
    auto rng = root.child("cases").engine();
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::vector<bool> is_case(spec.encounters, false);
  for (std::size_t k = 0; k < n_cases; ++k) is_case[order[k]] = true;

  RawCohort cohort;
  cohort.channels = d;
  cohort.encounters.resize(spec.encounters);
  const SeedStream enc_stream = root.child("encounter");
  for (std::size_t i = 0; i < spec.encounters; ++i) {
    auto rng = enc_stream.child(i).engine();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> n(0.0, 1.0);
    RawEncounter& e = cohort.encounters[i];
    e.id = encounter_id(i);
    e.stay_hours = spec.min_stay_hours + (spec.max_stay_hours - spec.min_stay_hours) * u(rng);
    if (is_case[i]) {
      const double hi = std::min(spec.max_onset_hours, e.stay_hours - 1.0);
      e.planted_onset = spec.min_onset_hours + (hi - spec.min_onset_hours) * u(rng);
    }

    // Irregular measurement times: independent Poisson process per channel.
    std::exponential_distribution<double> gap(spec.observation_rate);
    std::vector<std::vector<double>> times(d);
    std::vector<double> all_times;
    for (std::size_t c = 0; c < d; ++c) {
      for (double t = gap(rng); t <= e.stay_hours; t += gap(rng)) times[c].push_back(t);
      all_times.insert(all_times.end(), times[c].begin(), times[c].end());
    }
    std::sort(all_times.begin(), all_times.end());
    all_times.erase(std::unique(all_times.begin(), all_times.end()), all_times.end());

    // Shared latent factors evaluated on the union of times.
    std::vector<std::vector<double>> factor(nf, std::vector<double>(all_times.size()));
    for (std::size_t f = 0; f < nf; ++f) {
      double x = n(rng), prev = 0.0;
      for (std::size_t k = 0; k < all_times.size(); ++k) {
        x = ou_step(x, all_times[k] - prev, spec.latent_time_constant_hours, rng);
        prev = all_times[k];
        factor[f][k] = x;
      }
    }
    for (std::size_t c = 0; c < d; ++c) {
      const auto& m = models[c];
      double own = n(rng), prev = 0.0;
      for (double t : times[c]) {
        own = ou_step(own, t - prev, spec.latent_time_constant_hours, rng);
        prev = t;
        const auto k = static_cast<std::size_t>(
            std::lower_bound(all_times.begin(), all_times.end(), t) - all_times.begin());
        double latent = m.own_weight * own;
        for (std::size_t f = 0; f < nf; ++f) latent += m.loadings[f] * factor[f][k];
        double drift = 0.0;
        if (e.planted_onset && m.signal_sign != 0.0) {
          const double start = *e.planted_onset - spec.signal_lead_hours;
          const double ramp = std::clamp((t - start) / spec.signal_lead_hours, 0.0, 1.5);
          drift = m.signal_sign * spec.signal_strength * ramp;
        }
        const double v = m.mean + m.scale * (latent + drift + spec.noise_sd * n(rng));
        e.observations.push_back({t, c, v});
      }
    }
    std::sort(e.observations.begin(), e.observations.end(), [](const auto& a, const auto& b) {
      return std::tie(a.time, a.channel, a.value) < std::tie(b.time, b.channel, b.value);
    });

    // Dysfunction inputs: hourly charted severities per organ.
    std::array<int, kOrganCount> level{};
    for (auto& l : level) l = u(rng) < 0.7 ? 0 : 1;
    const std::size_t jump_organ = static_cast<std::size_t>(u(rng) * kOrganCount) % kOrganCount;
    const bool bump = u(rng) < 0.3;
    const std::size_t bump_organ = static_cast<std::size_t>(u(rng) * kOrganCount) % kOrganCount;
    const double bump_start = e.stay_hours * u(rng);
    const int last_hour = static_cast<int>(std::floor(e.stay_hours));
    for (int h = 0; h <= last_hour; ++h) {
      for (std::size_t o = 0; o < kOrganCount; ++o) {
        int lv = level[o];
        if (bump && o == bump_organ && h >= bump_start && h < bump_start + 6.0) lv += 1;
        if (e.planted_onset && o == jump_organ && h >= *e.planted_onset) lv = level[o] + 2;
        lv = std::min(lv, 4);
        e.organ_observations.push_back({static_cast<double>(h), o, lv + 0.5 + 0.4 * (u(rng) - 0.5)});
      }
    }

    if (e.planted_onset) {
      const double si = std::clamp(*e.planted_onset + 18.0 * u(rng) - 12.0, 0.0, e.stay_hours);
      add_si_pair(e, si, rng);
    } else if (u(rng) < spec.control_si_fraction) {
      add_si_pair(e, e.stay_hours * u(rng), rng);
    } else if (u(rng) < 0.3) {
      // Antibiotic without a timely culture: not a suspicion of infection.
      const double a = e.stay_hours * u(rng);
      e.antibiotics.push_back(a);
      if (a + 30.0 <= e.stay_hours) e.cultures.push_back(a + 25.0 + 5.0 * u(rng));
    }
    std::sort(e.antibiotics.begin(), e.antibiotics.end());
    std::sort(e.cultures.begin(), e.cultures.end());
  }
  return cohort;
}

// ---- Labelling -------------------------------------------------------------------

std::optional<double> detect_si(std::span<const double> antibiotics,
                                std::span<const double> cultures) {
  std::optional<double> best;
  for (double c : cultures) {
    for (double a : antibiotics) {
      std::optional<double> si;
      if (c <= a && a - c <= 72.0) si = c;
      else if (a < c && c - a <= 24.0) si = a;
      if (si && (!best || *si < *best)) best = si;
    }
  }
  return best;
}

int organ_points(double severity) {
  if (!(severity >= 1.0)) return 0;
  return static_cast<int>(std::min(4.0, std::floor(severity)));
}

int hourly_sofa(std::span<const OrganObservation> inputs, int hour) {
  if (hour < 0) throw ParameterError("hourly_sofa: hour must be >= 0");
  std::array<int, kOrganCount> worst{};
  const double lo = hour - 24.0, hi = hour;
  for (const auto& o : inputs) {
    if (o.time >= lo && o.time <= hi && o.organ < kOrganCount)
      worst[o.organ] = std::max(worst[o.organ], organ_points(o.value));
  }
  return std::accumulate(worst.begin(), worst.end(), 0);
}

std::vector<int> hourly_sofa_series(const RawEncounter& enc) {
  const int last = static_cast<int>(std::floor(enc.stay_hours));
  std::vector<int> scores(static_cast<std::size_t>(last) + 1);
  for (int h = 0; h <= last; ++h) scores[h] = hourly_sofa(enc.organ_observations, h);
  return scores;
}

std::optional<double> sepsis_onset(double si_time, std::span<const int> scores) {
  if (scores.empty()) return std::nullopt;
  const double lo = std::max(0.0, si_time - 48.0);
  const double hi = std::min(static_cast<double>(scores.size() - 1), si_time + 24.0);
  if (hi < lo) return std::nullopt;
  const auto first = static_cast<std::size_t>(std::ceil(lo));
  const auto last = static_cast<std::size_t>(std::floor(hi));
  int running_min = scores[first];
  for (std::size_t h = first; h <= last; ++h) {
    running_min = std::min(running_min, scores[h]);
    if (scores[h] - running_min >= 2) return static_cast<double>(h);
  }
  return std::nullopt;
}

LabelResult label_encounter(const RawEncounter& enc) {
  std::vector<double> ab(enc.antibiotics), cu(enc.cultures);
  std::sort(ab.begin(), ab.end());
  std::sort(cu.begin(), cu.end());
  LabelResult r;
  r.si_time = detect_si(ab, cu);
  if (!r.si_time) return r;
  auto scores = hourly_sofa_series(enc);
  r.onset_hour = sepsis_onset(*r.si_time, scores);
  r.label = r.onset_hour ? 1 : 0;
  return r;
}

// ---- Matching ----------------------------------------------------------------------

Matching match_controls(const std::vector<Candidate>& cases, const std::vector<Candidate>& controls,
                        std::uint64_t seed) {
  if (controls.size() < kControlsPerCase * cases.size())
    throw CohortError("match_controls: " + std::to_string(controls.size()) + " controls for " +
                      std::to_string(cases.size()) + " cases, need " +
                      std::to_string(kControlsPerCase) + " per case");
  std::vector<std::size_t> pool(controls.size());
  std::iota(pool.begin(), pool.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(pool.begin(), pool.end(), rng);
  std::vector<bool> taken(controls.size(), false);
  // Latest onsets have the fewest eligible controls, so they draw first.
  std::vector<std::size_t> case_order(cases.size());
  std::iota(case_order.begin(), case_order.end(), 0);
  std::stable_sort(case_order.begin(), case_order.end(),
                   [&](std::size_t a, std::size_t b) { return cases[a].onset_hour > cases[b].onset_hour; });
  Matching out;
  for (std::size_t ci : case_order) {
    const auto& c = cases[ci];
    auto& group = out[c.id];
    for (std::size_t k = 0; k < pool.size() && group.size() < kControlsPerCase; ++k) {
      const auto idx = pool[k];
      if (taken[idx] || controls[idx].stay_hours < c.onset_hour) continue;
      taken[idx] = true;
      group.push_back(controls[idx].id);
    }
    if (group.size() < kControlsPerCase)
      throw CohortError("match_controls: not enough controls with stays covering onset " +
                        std::to_string(c.onset_hour) + " h of case " + c.id);
  }
  return out;
}

double LabeledCohort::prevalence() const {
  if (encounters.empty()) return 0.0;
  return static_cast<double>(cases()) / static_cast<double>(encounters.size());
}

std::size_t LabeledCohort::cases() const {
  return static_cast<std::size_t>(std::count_if(encounters.begin(), encounters.end(),
                                                [](const Encounter& e) { return e.label == 1; }));
}

LabeledCohort build_cohort(const RawCohort& raw, std::uint64_t matching_seed, std::size_t mc_samples) {
  std::vector<Candidate> cases, controls;
  std::unordered_map<std::string, LabelResult> labels;
  for (const auto& e : raw.encounters) {
    auto r = label_encounter(e);
    if (r.label == 1) cases.push_back({e.id, e.stay_hours, *r.onset_hour});
    else controls.push_back({e.id, e.stay_hours, 0.0});
    labels.emplace(e.id, r);
  }
  LabeledCohort cohort;
  cohort.channels = raw.channels;
  cohort.matching = match_controls(cases, controls, matching_seed);
  std::unordered_map<std::string, double> control_onset;
  for (const auto& c : cases)
    for (const auto& id : cohort.matching.at(c.id)) control_onset[id] = c.onset_hour;
  for (const auto& e : raw.encounters) {
    const auto& r = labels.at(e.id);
    Encounter enc;
    enc.id = e.id;
    if (r.label == 1) {
      enc.label = 1;
      enc.onset_hour = r.onset_hour;
    } else if (auto it = control_onset.find(e.id); it != control_onset.end()) {
      enc.onset_hour = it->second;
    } else {
      continue;
    }
    enc.observations = e.observations;
    sort_observations(enc);
    cohort.stay_hours[e.id] = e.stay_hours;
    cohort.encounters.push_back(std::move(enc));
  }
  return filter_and_mask(std::move(cohort), mc_samples);
}

LabeledCohort filter_and_mask(LabeledCohort cohort, std::size_t min_observations) {
  std::set<std::string> drop;
  for (const auto& e : cohort.encounters) {
    if (e.label == 1 && e.onset_hour && *e.onset_hour < kMinCaseOnsetHours) {
      drop.insert(e.id);
      if (auto it = cohort.matching.find(e.id); it != cohort.matching.end())
        drop.insert(it->second.begin(), it->second.end());
    }
  }
  for (const auto& e : cohort.encounters) {
    if (e.size() > kMaxObservations) drop.insert(e.id);
    else if (is_masked(truncate_to_horizon(e, 0.0), min_observations)) drop.insert(e.id);
  }
  std::vector<Encounter> kept;
  for (auto& e : cohort.encounters)
    if (!drop.count(e.id)) kept.push_back(std::move(e));
  cohort.encounters = std::move(kept);
  for (auto it = cohort.matching.begin(); it != cohort.matching.end();) {
    if (drop.count(it->first)) {
      it = cohort.matching.erase(it);
      continue;
    }
    std::erase_if(it->second, [&](const std::string& id) { return drop.count(id) > 0; });
    ++it;
  }
  for (const auto& id : drop) cohort.stay_hours.erase(id);
  return cohort;
}

// ---- Per-encounter transforms ------------------------------------------------------

Encounter truncate_to_horizon(const Encounter& enc, double horizon_hours) {
  if (!(horizon_hours >= 0.0 && horizon_hours <= 7.0))
    throw ParameterError("truncate_to_horizon: horizon must be in [0, 7] h");
  if (!enc.onset_hour) throw ContractError("truncate_to_horizon: encounter " + enc.id + " has no onset");
  const double cutoff = *enc.onset_hour - horizon_hours;
  Encounter out;
  out.id = enc.id;
  out.label = enc.label;
  out.onset_hour = enc.onset_hour;
  for (const auto& o : enc.observations)
    if (o.time <= cutoff) out.observations.push_back(o);
  return out;
}

bool is_masked(const Encounter& enc, std::size_t min_observations) {
  return enc.observations.size() < std::max<std::size_t>(min_observations, 1);
}

HourlyGrid bin_and_impute(const Encounter& enc, std::size_t channels) {
  if (enc.observations.empty()) throw ContractError("bin_and_impute: encounter " + enc.id + " is empty");
  HourlyGrid g;
  g.channels = channels;
  double last = 0.0;
  for (const auto& o : enc.observations) last = std::max(last, o.time);
  g.hours = static_cast<std::size_t>(std::floor(last)) + 1;
  std::vector<double> sum(channels * g.hours, 0.0);
  std::vector<std::size_t> count(channels * g.hours, 0);
  for (const auto& o : enc.observations) {
    if (o.channel >= channels) throw ContractError("bin_and_impute: channel out of range in " + enc.id);
    const auto h = static_cast<std::size_t>(std::floor(o.time));
    sum[o.channel * g.hours + h] += o.value;
    ++count[o.channel * g.hours + h];
  }
  g.values.assign(channels * g.hours, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    double carry = 0.0;
    for (std::size_t h = 0; h < g.hours; ++h) {
      const auto k = c * g.hours + h;
      if (count[k] > 0) carry = sum[k] / static_cast<double>(count[k]);
      g.values[k] = carry;
    }
  }
  return g;
}

ChannelStats zscore_fit(std::span<const Encounter> train, std::size_t channels) {
  std::vector<double> sum(channels, 0.0);
  std::vector<std::size_t> count(channels, 0);
  for (const auto& e : train)
    for (const auto& o : e.observations) {
      sum[o.channel] += o.value;
      ++count[o.channel];
    }
  ChannelStats s;
  s.mean.resize(channels);
  s.stddev.resize(channels);
  std::vector<double> ss(channels, 0.0);
  for (std::size_t c = 0; c < channels; ++c) {
    if (count[c] == 0) throw ConfigError("zscore_fit: channel " + std::to_string(c) + " is absent from train");
    s.mean[c] = sum[c] / static_cast<double>(count[c]);
  }
  for (const auto& e : train)
    for (const auto& o : e.observations) ss[o.channel] += (o.value - s.mean[o.channel]) * (o.value - s.mean[o.channel]);
  for (std::size_t c = 0; c < channels; ++c) {
    const double sd = std::sqrt(ss[c] / static_cast<double>(count[c]));
    s.stddev[c] = sd > 0.0 ? sd : 1.0;
  }
  return s;
}

Encounter zscore_apply(const Encounter& enc, const ChannelStats& stats) {
  Encounter out = enc;
  for (auto& o : out.observations) o.value = (o.value - stats.mean[o.channel]) / stats.stddev[o.channel];
  return out;
}

// ---- Splits ---------------------------------------------------------------------------

Split make_split(const LabeledCohort& cohort, std::uint64_t seed, ChannelStats* stats_out) {
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < cohort.encounters.size(); ++i)
    (cohort.encounters[i].label == 1 ? pos : neg).push_back(i);
  std::mt19937_64 rng(seed);
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);
  std::vector<int> assign(cohort.encounters.size(), 0);
  for (const auto* group : {&pos, &neg}) {
    const std::size_t n = group->size();
    const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
    const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n))));
    for (std::size_t k = 0; k < n; ++k) assign[(*group)[k]] = k < n_train ? 0 : k < n_train + n_val ? 1 : 2;
  }
  Split s;
  for (std::size_t i = 0; i < cohort.encounters.size(); ++i) {
    auto& dst = assign[i] == 0 ? s.train : assign[i] == 1 ? s.validation : s.test;
    dst.push_back(cohort.encounters[i]);
  }
  if (s.train.empty()) throw ConfigError("make_split: empty training split");
  auto stats = zscore_fit(s.train, cohort.channels);
  for (auto* part : {&s.train, &s.validation, &s.test})
    for (auto& e : *part) e = zscore_apply(e, stats);
  if (stats_out) *stats_out = stats;
  return s;
}

// ---- Files -------------------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = line.find(',', start);
    out.push_back(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw CohortError("cannot parse number '" + std::string(s) + "' in " + where);
  return v;
}

std::size_t parse_index(std::string_view s, const std::string& where) {
  std::size_t v = 0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw CohortError("cannot parse integer '" + std::string(s) + "' in " + where);
  return v;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  return out;
}

// Yields data rows after checking the header.
template <typename Fn>
void read_csv(const std::string& path, std::string_view header, Fn&& fn) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != header)
    throw CohortError(path + ": expected header '" + std::string(header) + "'");
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    fn(split_csv(line), path + ":" + std::to_string(lineno));
  }
}

constexpr std::string_view kObsHeader = "encounter_id,time_h,channel,value";
constexpr std::string_view kEventHeader = "encounter_id,kind,time_h,organ,value";
constexpr std::string_view kEncHeader = "encounter_id,stay_hours,planted_onset";
constexpr std::string_view kLabelHeader = "encounter_id,label,onset_hour,match_group";

}  // namespace

void write_raw_cohort(const RawCohort& raw, const CohortPaths& paths) {
  std::filesystem::create_directories(paths.dir);
  auto obs = open_out(paths.observations());
  auto ev = open_out(paths.events());
  auto enc = open_out(paths.encounters());
  obs << kObsHeader << '\n';
  ev << kEventHeader << '\n';
  enc << kEncHeader << '\n';
  for (const auto& e : raw.encounters) {
    enc << e.id << ',' << format_double(e.stay_hours) << ','
        << (e.planted_onset ? format_double(*e.planted_onset) : "") << '\n';
    for (const auto& o : e.observations)
      obs << e.id << ',' << format_double(o.time) << ',' << o.channel << ',' << format_double(o.value) << '\n';
    for (double t : e.antibiotics) ev << e.id << ",antibiotic," << format_double(t) << ",,\n";
    for (double t : e.cultures) ev << e.id << ",culture," << format_double(t) << ",,\n";
    for (const auto& o : e.organ_observations)
      ev << e.id << ",organ," << format_double(o.time) << ',' << o.organ << ',' << format_double(o.value) << '\n';
  }
}

RawCohort read_raw_cohort(const CohortPaths& paths, std::size_t channels) {
  RawCohort raw;
  raw.channels = channels;
  std::unordered_map<std::string, std::size_t> index;
  read_csv(paths.encounters(), kEncHeader, [&](const auto& f, const std::string& where) {
    if (f.size() != 3) throw CohortError(where + ": expected 3 fields");
    RawEncounter e;
    e.id = std::string(f[0]);
    e.stay_hours = parse_double(f[1], where);
    if (!f[2].empty()) e.planted_onset = parse_double(f[2], where);
    index[e.id] = raw.encounters.size();
    raw.encounters.push_back(std::move(e));
  });
  auto find = [&](std::string_view id, const std::string& where) -> RawEncounter& {
    auto it = index.find(std::string(id));
    if (it == index.end()) throw CohortError(where + ": unknown encounter " + std::string(id));
    return raw.encounters[it->second];
  };
  read_csv(paths.observations(), kObsHeader, [&](const auto& f, const std::string& where) {
    if (f.size() != 4) throw CohortError(where + ": expected 4 fields");
    auto ch = parse_index(f[2], where);
    if (ch >= channels) throw CohortError(where + ": channel " + std::to_string(ch) + " out of range");
    find(f[0], where).observations.push_back({parse_double(f[1], where), ch, parse_double(f[3], where)});
  });
  read_csv(paths.events(), kEventHeader, [&](const auto& f, const std::string& where) {
    if (f.size() != 5) throw CohortError(where + ": expected 5 fields");
    auto& e = find(f[0], where);
    const double t = parse_double(f[2], where);
    if (f[1] == "antibiotic") e.antibiotics.push_back(t);
    else if (f[1] == "culture") e.cultures.push_back(t);
    else if (f[1] == "organ") e.organ_observations.push_back({t, parse_index(f[3], where), parse_double(f[4], where)});
    else throw CohortError(where + ": unknown event kind " + std::string(f[1]));
  });
  for (auto& e : raw.encounters) {
    std::sort(e.antibiotics.begin(), e.antibiotics.end());
    std::sort(e.cultures.begin(), e.cultures.end());
    Encounter tmp;
    tmp.observations = std::move(e.observations);
    sort_observations(tmp);
    e.observations = std::move(tmp.observations);
  }
  return raw;
}

void write_labels(const LabeledCohort& cohort, const CohortPaths& paths) {
  std::filesystem::create_directories(paths.dir);
  std::unordered_map<std::string, std::string> group;
  for (const auto& [case_id, controls] : cohort.matching) {
    group[case_id] = case_id;
    for (const auto& c : controls) group[c] = case_id;
  }
  auto out = open_out(paths.labels());
  out << kLabelHeader << '\n';
  for (const auto& e : cohort.encounters) {
    auto it = group.find(e.id);
    out << e.id << ',' << e.label << ',' << (e.onset_hour ? format_double(*e.onset_hour) : "") << ','
        << (it != group.end() ? it->second : "") << '\n';
  }
}

LabeledCohort read_labeled_cohort(const CohortPaths& paths, std::size_t channels) {
  LabeledCohort cohort;
  cohort.channels = channels;
  std::unordered_map<std::string, std::size_t> index;
  read_csv(paths.labels(), kLabelHeader, [&](const auto& f, const std::string& where) {
    if (f.size() != 4) throw CohortError(where + ": expected 4 fields");
    Encounter e;
    e.id = std::string(f[0]);
    e.label = static_cast<int>(parse_index(f[1], where));
    if (e.label > 1) throw CohortError(where + ": label must be 0 or 1");
    if (!f[2].empty()) e.onset_hour = parse_double(f[2], where);
    if (!f[3].empty() && f[3] != f[0]) cohort.matching[std::string(f[3])].push_back(e.id);
    index[e.id] = cohort.encounters.size();
    cohort.encounters.push_back(std::move(e));
  });
  read_csv(paths.observations(), kObsHeader, [&](const auto& f, const std::string& where) {
    if (f.size() != 4) throw CohortError(where + ": expected 4 fields");
    auto it = index.find(std::string(f[0]));
    if (it == index.end()) return;
    auto ch = parse_index(f[2], where);
    if (ch >= channels) throw CohortError(where + ": channel " + std::to_string(ch) + " out of range");
    cohort.encounters[it->second].observations.push_back(
        {parse_double(f[1], where), ch, parse_double(f[3], where)});
  });
  for (auto& e : cohort.encounters) sort_observations(e);
  return cohort;
}

}  // namespace mgptcn::data
