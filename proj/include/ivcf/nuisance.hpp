/*
 * Copyright 2026 The ivcf Authors.
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

#ifndef IVCF_NUISANCE_HPP_
#define IVCF_NUISANCE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ivcf/data.hpp"
#include "ivcf/error.hpp"
#include "ivcf/forest.hpp"
#include "ivcf/random.hpp"

namespace ivcf {

// Per-observation flag bits shared by the nuisance, CLATE and score stages.
enum ObservationFlag : std::uint32_t {
  kWeakIdentification = 1u << 0,
  kNoStandardError = 1u << 1,
  kComplianceFloored = 1u << 2,
  kTreatmentPropensityClamped = 1u << 3,
  kInstrumentPropensityClamped = 1u << 4,
};

struct NuisanceOptions {
  double propensity_low = 0.01;
  double propensity_high = 0.99;
  // |delta| below this is floored (sign kept) in the score denominator.
  double compliance_floor = 0.05;
  // ĝ uses the full covariate vector unless set.
  bool instrument_uses_propensity_features = false;
  // 0 resolves to max(50, num_trees / 4).
  std::size_t num_trees = 0;
  // Tune the nuisance forests too (the effect forest follows ForestParams::tune).
  bool tune = false;
};

struct NuisanceSet {
  std::vector<double> m_hat;
  std::vector<double> e_hat;      // clamped
  std::vector<double> g_hat;      // clamped
  std::vector<double> delta_hat;  // as estimated; flooring happens in the scores
  std::vector<std::uint32_t> flags;
  std::size_t e_clamped = 0;
  std::size_t g_clamped = 0;
  std::size_t delta_flagged = 0;

  std::size_t size() const { return m_hat.size(); }
};

inline std::size_t resolved_nuisance_trees(const ForestParams& params, const NuisanceOptions& options) {
  if (options.num_trees > 0) return options.num_trees;
  return std::max<std::size_t>(50, params.num_trees / 4);
}

namespace detail {

inline ForestParams nuisance_params(const ForestParams& params, const NuisanceOptions& options,
                                    SeedRole role) {
  ForestParams p = params;
  p.num_trees = resolved_nuisance_trees(params, options);
  p.ci_group_size = 1;
  p.seed = role_seed(params.seed, role);
  p.tune = options.tune;
  return p;
}

inline std::vector<double> oob_estimates(const CausalDataset& data, ForestTargets targets, ForestMode mode,
                                         ForestParams params, const std::vector<std::size_t>& columns) {
  if (params.tune) {
    params = tune_forest(data.features(), data.cluster(), targets, mode, params, columns).params;
  }
  const Forest f = grow_forest(data, std::move(targets), mode, params, columns);
  const auto pred = predict_oob(f, data.features());
  std::vector<double> out(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) out[i] = pred[i].estimate;
  return out;
}

inline std::size_t clamp_into(std::vector<double>& v, double lo, double hi, std::vector<std::uint32_t>& flags,
                              std::uint32_t bit) {
  std::size_t count = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    double x = std::isfinite(v[i]) ? v[i] : 0.5;
    if (x < lo || x > hi || !std::isfinite(v[i])) {
      x = std::clamp(x, lo, hi);
      flags[i] |= bit;
      ++count;
    }
    v[i] = x;
  }
  return count;
}

inline void flag_weak_compliance(NuisanceSet& out, double floor) {
  out.delta_flagged = 0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!(std::abs(out.delta_hat[i]) >= floor)) {
      out.flags[i] |= kComplianceFloored;
      ++out.delta_flagged;
    }
  }
}

}  // namespace detail

// Out-of-bag nuisance estimates: m̂ = E[Y|X] on all features, ê = P[D|X] on
// the propensity features only, ĝ = P[Z|X], and the compliance score δ̂ from
// a causal forest of D on Z (an instrumental forest whose instrument is its
// own treatment).
inline NuisanceSet fit_nuisances(const CausalDataset& data, const ForestParams& params,
                                 const NuisanceOptions& options = {}) {
  const auto propensity = data.propensity_columns();
  if (propensity.empty()) throw ConfigError("no feature is flagged in_propensity");
  if (!(options.propensity_low > 0.0 && options.propensity_low < options.propensity_high &&
        options.propensity_high < 1.0)) {
    throw ConfigError("propensity clamp bounds must satisfy 0 < low < high < 1");
  }
  std::vector<std::size_t> all(data.cols());
  std::iota(all.begin(), all.end(), std::size_t{0});
  const std::size_t n = data.rows();

  NuisanceSet out;
  out.flags.assign(n, 0);
  out.m_hat = detail::oob_estimates(data, {data.outcome(), {}, {}}, ForestMode::regression,
                                    detail::nuisance_params(params, options, SeedRole::outcome_mean), all);
  out.e_hat = detail::oob_estimates(data, {data.treatment(), {}, {}}, ForestMode::regression,
                                    detail::nuisance_params(params, options, SeedRole::treatment_propensity),
                                    propensity);
  out.g_hat = detail::oob_estimates(data, {data.instrument(), {}, {}}, ForestMode::regression,
                                    detail::nuisance_params(params, options, SeedRole::instrument_propensity),
                                    options.instrument_uses_propensity_features ? propensity : all);
  out.e_clamped = detail::clamp_into(out.e_hat, options.propensity_low, options.propensity_high, out.flags,
                                     kTreatmentPropensityClamped);
  out.g_clamped = detail::clamp_into(out.g_hat, options.propensity_low, options.propensity_high, out.flags,
                                     kInstrumentPropensityClamped);
  for (double& m : out.m_hat) {
    if (!std::isfinite(m)) m = 0.0;
  }

  ForestTargets compliance;
  compliance.outcome.resize(n);
  compliance.treatment.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    compliance.outcome[i] = data.treatment()[i] - out.e_hat[i];
    compliance.treatment[i] = data.instrument()[i] - out.g_hat[i];
  }
  out.delta_hat = detail::oob_estimates(data, std::move(compliance), ForestMode::causal,
                                        detail::nuisance_params(params, options, SeedRole::compliance), all);
  for (double& d : out.delta_hat) {
    if (!std::isfinite(d)) d = 0.0;
  }
  detail::flag_weak_compliance(out, options.compliance_floor);
  return out;
}

// Nuisances for a forest that treats D as its own instrument: ĝ = ê and
// δ ≡ 1, so the scores reduce to the usual AIPW form.
inline NuisanceSet fit_causal_nuisances(const CausalDataset& data, const ForestParams& params,
                                        const NuisanceOptions& options = {}) {
  const auto propensity = data.propensity_columns();
  if (propensity.empty()) throw ConfigError("no feature is flagged in_propensity");
  std::vector<std::size_t> all(data.cols());
  std::iota(all.begin(), all.end(), std::size_t{0});
  NuisanceSet out;
  out.flags.assign(data.rows(), 0);
  out.m_hat = detail::oob_estimates(data, {data.outcome(), {}, {}}, ForestMode::regression,
                                    detail::nuisance_params(params, options, SeedRole::outcome_mean), all);
  out.e_hat = detail::oob_estimates(data, {data.treatment(), {}, {}}, ForestMode::regression,
                                    detail::nuisance_params(params, options, SeedRole::treatment_propensity),
                                    propensity);
  out.e_clamped = detail::clamp_into(out.e_hat, options.propensity_low, options.propensity_high, out.flags,
                                     kTreatmentPropensityClamped);
  for (double& m : out.m_hat) {
    if (!std::isfinite(m)) m = 0.0;
  }
  out.g_hat = out.e_hat;
  out.g_clamped = out.e_clamped;
  out.delta_hat.assign(data.rows(), 1.0);
  return out;
}

inline void write_nuisances_csv(const NuisanceSet& n, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << "m_hat,e_hat,g_hat,delta_hat,flags\n";
  for (std::size_t i = 0; i < n.size(); ++i) {
    out << format_number(n.m_hat[i]) << ',' << format_number(n.e_hat[i]) << ',' << format_number(n.g_hat[i])
        << ',' << format_number(n.delta_hat[i]) << ',' << n.flags[i] << '\n';
  }
}

inline NuisanceSet read_nuisances_csv(const std::string& path, double compliance_floor = 0.05) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string line;
  std::getline(in, line);
  if (detail::trim(line) != "m_hat,e_hat,g_hat,delta_hat,flags") {
    throw SchemaError("'" + path + "' is not a nuisance export");
  }
  NuisanceSet n;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 5) throw ParseError("expected 5 cells", row);
    n.m_hat.push_back(detail::parse_number(cells[0], "m_hat", row));
    n.e_hat.push_back(detail::parse_number(cells[1], "e_hat", row));
    n.g_hat.push_back(detail::parse_number(cells[2], "g_hat", row));
    n.delta_hat.push_back(detail::parse_number(cells[3], "delta_hat", row));
    const auto flags = static_cast<std::uint32_t>(detail::parse_integer(cells[4], "flags", row));
    n.flags.push_back(flags);
    if (flags & kTreatmentPropensityClamped) ++n.e_clamped;
    if (flags & kInstrumentPropensityClamped) ++n.g_clamped;
  }
  detail::flag_weak_compliance(n, compliance_floor);
  return n;
}

}  // namespace ivcf

#endif  // IVCF_NUISANCE_HPP_
