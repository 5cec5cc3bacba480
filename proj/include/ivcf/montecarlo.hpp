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

#ifndef IVCF_MONTECARLO_HPP_
#define IVCF_MONTECARLO_HPP_

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "ivcf/analysis.hpp"
#include "ivcf/dgp.hpp"
#include "ivcf/parallel.hpp"
#include "ivcf/random.hpp"

namespace ivcf {

struct MonteCarloOptions {
  AnalysisOptions analysis;
  // BLP coefficient and CLAN modifier that carry the true heterogeneity;
  // empty skips the corresponding detection rate.
  std::string blp_modifier;
  std::string clan_modifier;
  double critical_t = 2.0;
  // Reps run concurrently when > 1, each with single-threaded forests.
  int rep_threads = 1;
};

struct RepOutcome {
  bool ok = false;
  std::string error;
  std::uint64_t seed = 0;
  double late = 0.0, late_se = 0.0, late_true = 0.0;
  double clate_rmse = 0.0, clate_corr = 0.0;
  std::vector<std::string> blp_names;
  std::vector<double> blp_t;
  bool blp_detected = false;
  bool clan_detected = false;
  double oracle_value = 0.0, policy_value = 0.0;
};

struct MonteCarloReport {
  std::size_t reps = 0;
  std::size_t failures = 0;
  std::vector<RepOutcome> runs;
  double late_bias = 0.0, late_rmse = 0.0, late_coverage = 0.0, mean_late_se = 0.0;
  double clate_rmse = 0.0, clate_corr = 0.0;
  double blp_detection = 0.0, clan_detection = 0.0;
  // Share of reps with |t| > critical_t, by BLP coefficient name.
  std::vector<std::pair<std::string, double>> blp_rejection;
  double oracle_value = 0.0, policy_regret = 0.0;

  double relative_regret() const { return oracle_value > 0.0 ? policy_regret / oracle_value : 0.0; }
};

inline double correlation(std::span<const double> a, std::span<const double> b) {
  const auto n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

inline RepOutcome run_rep(const DgpSpec& spec, const MonteCarloOptions& opt, std::uint64_t seed, int threads) {
  RepOutcome rep;
  rep.seed = seed;
  try {
    DgpSpec s = spec;
    s.seed = seed;
    const SynthDataset synth = generate(s);
    AnalysisOptions a = opt.analysis;
    a.forest.seed = seed;
    a.forest.threads = threads;
    a.histogram = false;
    const AnalysisResult r = run_analysis(synth.data, a);
    const std::size_t n = synth.data.rows();
    rep.late = r.scores.late;
    rep.late_se = r.scores.late_se;
    rep.late_true = synth.late_true;
    double sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) sq += std::pow(r.clates.tau_hat[i] - synth.tau_true[i], 2);
    rep.clate_rmse = std::sqrt(sq / static_cast<double>(n));
    rep.clate_corr = correlation(r.clates.tau_hat, synth.tau_true);
    if (r.blp) {
      rep.blp_names = r.blp->names;
      for (std::size_t k = 0; k < r.blp->names.size(); ++k) rep.blp_t.push_back(r.blp->t_stat(k));
      if (!opt.blp_modifier.empty()) {
        rep.blp_detected = std::abs(r.blp->t_stat(r.blp->index_of(opt.blp_modifier))) > opt.critical_t;
      }
    }
    if (r.clan && !opt.clan_modifier.empty()) {
      for (const auto& rec : r.clan->records) {
        if (rec.name == opt.clan_modifier) rep.clan_detected = rec.diff > 0.0 && rec.ci_low > 0.0;
      }
    }
    if (r.policy) {
      const FeatureMatrix x = synth.data.features();
      for (std::size_t i = 0; i < n; ++i) {
        rep.oracle_value += std::max(synth.tau_true[i], 0.0);
        if (r.policy->act(x.row(i)) == Action::treat) rep.policy_value += synth.tau_true[i];
      }
      rep.oracle_value /= static_cast<double>(n);
      rep.policy_value /= static_cast<double>(n);
    }
    rep.ok = true;
  } catch (const std::exception& e) {
    rep.error = e.what();
  }
  return rep;
}

// generate -> full analysis per rep, with rep seeds derived from spec.seed.
// Failed reps are kept in runs with their error and excluded from the
// summaries.
inline MonteCarloReport monte_carlo(const DgpSpec& spec, std::size_t reps, const MonteCarloOptions& opt = {}) {
  if (reps < 2) throw ConfigError("monte carlo needs at least 2 reps");
  spec.validate();
  MonteCarloReport out;
  out.reps = reps;
  out.runs.resize(reps);
  const int rep_threads = resolve_threads(opt.rep_threads);
  const int inner = rep_threads > 1 ? 1 : opt.analysis.forest.threads;
  parallel_for(reps, rep_threads, [&](std::size_t k) {
    out.runs[k] = run_rep(spec, opt, derive_seed(spec.seed, k + 1), inner);
  });

  std::size_t ok = 0, covered = 0, corr_n = 0;
  std::vector<std::size_t> rejections;
  for (const auto& rep : out.runs) {
    if (!rep.ok) {
      ++out.failures;
      continue;
    }
    ++ok;
    const double err = rep.late - rep.late_true;
    out.late_bias += err;
    out.late_rmse += err * err;
    out.mean_late_se += rep.late_se;
    if (std::abs(err) <= kNormal975 * rep.late_se) ++covered;
    out.clate_rmse += rep.clate_rmse;
    if (std::isfinite(rep.clate_corr)) {
      out.clate_corr += rep.clate_corr;
      ++corr_n;
    }
    out.blp_detection += rep.blp_detected ? 1.0 : 0.0;
    out.clan_detection += rep.clan_detected ? 1.0 : 0.0;
    out.oracle_value += rep.oracle_value;
    out.policy_regret += rep.oracle_value - rep.policy_value;
    if (out.blp_rejection.empty()) {
      for (const auto& name : rep.blp_names) out.blp_rejection.emplace_back(name, 0.0);
      rejections.assign(rep.blp_names.size(), 0);
    }
    for (std::size_t k = 0; k < rep.blp_t.size() && k < rejections.size(); ++k) {
      if (std::abs(rep.blp_t[k]) > opt.critical_t) ++rejections[k];
    }
  }
  if (ok == 0) return out;
  const auto m = static_cast<double>(ok);
  out.late_bias /= m;
  out.late_rmse = std::sqrt(out.late_rmse / m);
  out.mean_late_se /= m;
  out.late_coverage = static_cast<double>(covered) / m;
  out.clate_rmse /= m;
  out.clate_corr = corr_n ? out.clate_corr / static_cast<double>(corr_n) : std::numeric_limits<double>::quiet_NaN();
  out.blp_detection /= m;
  out.clan_detection /= m;
  out.oracle_value /= m;
  out.policy_regret /= m;
  for (std::size_t k = 0; k < rejections.size(); ++k) out.blp_rejection[k].second = rejections[k] / m;
  return out;
}

}  // namespace ivcf

#endif  // IVCF_MONTECARLO_HPP_
