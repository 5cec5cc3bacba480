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

#ifndef IVCF_ANALYSIS_HPP_
#define IVCF_ANALYSIS_HPP_

#include <optional>
#include <string>
#include <utility>

#include "ivcf/clate.hpp"
#include "ivcf/data.hpp"
#include "ivcf/error.hpp"
#include "ivcf/forest.hpp"
#include "ivcf/heterogeneity.hpp"
#include "ivcf/nuisance.hpp"
#include "ivcf/policy_tree.hpp"

namespace ivcf {

struct AnalysisOptions {
  // instrumental: the IV pipeline. causal: treats D as exogenous (Z := D,
  // ĝ = ê, δ = 1), used as the naive comparison.
  ForestMode mode = ForestMode::instrumental;
  ForestParams forest;
  NuisanceOptions nuisance;
  bool blp = true;
  bool clan = true;
  bool policy_tree = true;
  bool histogram = true;
  std::size_t histogram_bins = 30;
  std::size_t policy_depth = 2;
  double treatment_cost = 0.0;
  ReferenceLevel reference = ReferenceLevel::last;
};

struct AnalysisResult {
  NuisanceSet nuisances;
  ClateResult clates;
  DrScores scores;
  ResidualCheck outcome_residual, treatment_residual, instrument_residual;
  std::optional<BlpResult> blp;
  std::optional<ClanResult> clan;
  std::optional<Histogram> histogram;
  std::optional<PolicyTree> policy;
};

namespace detail {

template <typename Fn>
auto run_stage(const char* stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what());
  }
}

}  // namespace detail

// Nuisances -> effect forest -> out-of-bag CLATEs -> scores and LATE ->
// the enabled heterogeneity analyses, for one outcome.
inline AnalysisResult run_analysis(const CausalDataset& input, const AnalysisOptions& opt) {
  if (opt.mode == ForestMode::regression) throw ConfigError("analysis mode must be instrumental or causal");
  const bool naive = opt.mode == ForestMode::causal;
  const CausalDataset data = naive ? input.with_instrument(input.treatment()) : input;

  AnalysisResult r;
  r.nuisances = detail::run_stage("nuisance", [&] {
    return naive ? fit_causal_nuisances(data, opt.forest, opt.nuisance) : fit_nuisances(data, opt.forest, opt.nuisance);
  });
  const Residuals res = residualize(data, r.nuisances);
  r.outcome_residual = check_centered(res.y_res);
  r.treatment_residual = check_centered(res.d_res);
  r.instrument_residual = check_centered(res.z_res);
  r.clates = detail::run_stage("clates", [&] { return predict_clates(data, r.nuisances, opt.forest, opt.mode); });
  r.scores = detail::run_stage("scores", [&] {
    return doubly_robust_scores(data, r.nuisances, r.clates, opt.nuisance.compliance_floor);
  });
  if (opt.blp) {
    r.blp = detail::run_stage("blp", [&] { return blp(r.scores.gamma, blp_design(data, opt.reference), data.cluster()); });
  }
  if (opt.clan) {
    r.clan = detail::run_stage("clan", [&] { return clan(r.scores.gamma, clan_modifiers(data)); });
  }
  if (opt.histogram) {
    r.histogram = detail::run_stage("histogram", [&] {
      return clate_histogram(r.clates.tau_hat, opt.histogram_bins, r.scores.late, r.scores.ci_low(), r.scores.ci_high());
    });
  }
  if (opt.policy_tree) {
    r.policy = detail::run_stage("policy_tree", [&] {
      return learn_policy_tree(data.features(), r.scores.gamma, opt.policy_depth, opt.treatment_cost,
                               opt.forest.threads);
    });
  }
  return r;
}

}  // namespace ivcf

#endif  // IVCF_ANALYSIS_HPP_
