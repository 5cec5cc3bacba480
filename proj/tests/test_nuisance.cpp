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

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "test_util.hpp"

namespace ivcf {
namespace {

using testing::quick_params;

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

ForestParams nuisance_test_params() {
  ForestParams p = quick_params(400);
  return p;
}

TEST(Nuisance, InstrumentPropensityUnderRandomization) {
  DgpSpec spec = testing::quiet_dgp(2000, 31);
  const auto synth = generate(spec);
  const auto n = fit_nuisances(synth.data, nuisance_test_params());
  EXPECT_GE(mean(n.g_hat), 0.45);
  EXPECT_LE(mean(n.g_hat), 0.55);
  EXPECT_EQ(n.g_clamped, 0u);
  for (double g : n.g_hat) {
    EXPECT_GT(g, 0.0);
    EXPECT_LT(g, 1.0);
  }
}

TEST(Nuisance, PerfectComplianceGivesUnitScore) {
  DgpSpec spec = testing::quiet_dgp(2000, 32);
  spec.compliance = ComplianceKind::perfect;
  const auto synth = generate(spec);
  ASSERT_EQ(synth.data.treatment(), synth.data.instrument());
  const auto n = fit_nuisances(synth.data, nuisance_test_params());
  EXPECT_NEAR(mean(n.delta_hat), 1.0, 0.05);
}

TEST(Nuisance, OneSidedComplianceScore) {
  DgpSpec spec = testing::quiet_dgp(2000, 33);
  spec.rate_z1 = 0.494;
  spec.rate_z0 = 0.096;
  const auto synth = generate(spec);
  const auto n = fit_nuisances(synth.data, nuisance_test_params());
  EXPECT_NEAR(mean(n.delta_hat), 0.494 - 0.096, 0.05);
}

TEST(Nuisance, AllFiniteAndClampedInside) {
  DgpSpec spec = testing::quiet_dgp(1000, 34);
  const auto synth = generate(spec);
  NuisanceOptions opt;
  opt.propensity_low = 0.3;
  opt.propensity_high = 0.7;
  const auto n = fit_nuisances(synth.data, quick_params(100), opt);
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < n.size(); ++i) {
    EXPECT_TRUE(std::isfinite(n.m_hat[i]) && std::isfinite(n.delta_hat[i]));
    EXPECT_GE(n.e_hat[i], 0.3);
    EXPECT_LE(n.e_hat[i], 0.7);
    EXPECT_GE(n.g_hat[i], 0.3);
    EXPECT_LE(n.g_hat[i], 0.7);
    flagged += (n.flags[i] & kTreatmentPropensityClamped) ? 1 : 0;
  }
  EXPECT_GT(n.e_clamped, 0u);
  EXPECT_EQ(flagged, n.e_clamped);
}

TEST(Nuisance, TreatmentPropensityIgnoresNonPropensityFeatures) {
  DgpSpec spec = testing::quiet_dgp(800, 35);
  spec.p = 3;
  const auto synth = generate(spec);
  const auto& full = synth.data;
  ASSERT_FALSE(full.schema()[2].in_propensity);

  std::vector<double> raw;
  for (std::size_t i = 0; i < full.rows(); ++i) {
    raw.push_back(full.raw_features()(i, 0));
    raw.push_back(full.raw_features()(i, 1));
  }
  std::vector<std::int64_t> labels(full.rows());
  for (std::size_t i = 0; i < full.rows(); ++i) labels[i] = full.cluster_label(i);
  const auto reduced = CausalDataset::build({full.schema()[0], full.schema()[1]}, raw, full.outcome(),
                                            full.treatment(), full.instrument(), labels);
  const auto a = fit_nuisances(full, quick_params(100));
  const auto b = fit_nuisances(reduced, quick_params(100));
  EXPECT_EQ(a.e_hat, b.e_hat);
}

TEST(Nuisance, PermutationOnlyReindexes) {
  DgpSpec spec = testing::quiet_dgp(600, 36);
  spec.discretize = false;
  const auto synth = generate(spec);
  std::vector<std::size_t> perm(synth.data.rows());
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(9));
  const auto shuffled = synth.data.select_rows(perm);
  const auto a = fit_nuisances(synth.data, quick_params(60));
  const auto b = fit_nuisances(shuffled, quick_params(60));
  for (std::size_t k = 0; k < perm.size(); ++k) {
    EXPECT_NEAR(b.m_hat[k], a.m_hat[perm[k]], 1e-9);
    EXPECT_NEAR(b.e_hat[k], a.e_hat[perm[k]], 1e-9);
    EXPECT_NEAR(b.g_hat[k], a.g_hat[perm[k]], 1e-9);
    EXPECT_NEAR(b.delta_hat[k], a.delta_hat[perm[k]], 1e-9);
  }
}

TEST(Nuisance, OutOfBagValuesExcludeOwnTrees) {
  DgpSpec spec = testing::quiet_dgp(400, 37);
  const auto synth = generate(spec);
  const auto& data = synth.data;
  ForestParams p = detail::nuisance_params(quick_params(100), NuisanceOptions{}, SeedRole::outcome_mean);
  std::vector<std::size_t> all(data.cols());
  std::iota(all.begin(), all.end(), 0);
  const Forest f = grow_forest(data, {data.outcome(), {}, {}}, ForestMode::regression, p, all);
  const auto n = fit_nuisances(data, quick_params(100));
  for (std::size_t i = 0; i < 40; ++i) {
    const auto w = weights_at(f, data.features().row(i), i);
    double m = 0.0;
    for (std::size_t k = 0; k < w.index.size(); ++k) m += w.weight[k] * data.outcome()[w.index[k]];
    EXPECT_NEAR(n.m_hat[i], m, 1e-10);
  }
}

TEST(Nuisance, EmptyPropensitySetIsConfigError) {
  DgpSpec spec = testing::quiet_dgp(200, 38);
  spec.p = 1;
  auto synth = generate(spec);
  auto schema = synth.data.schema();
  schema[0].in_propensity = false;
  std::vector<std::int64_t> labels(synth.data.rows());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = synth.data.cluster_label(i);
  const auto data = CausalDataset::build(schema, {synth.data.raw_features().values.begin(),
                                                  synth.data.raw_features().values.end()},
                                         synth.data.outcome(), synth.data.treatment(), synth.data.instrument(),
                                         labels);
  EXPECT_THROW(fit_nuisances(data, quick_params(20)), ConfigError);
}

TEST(Nuisance, WeakComplianceIsFlagged) {
  NuisanceSet n;
  n.m_hat = {0, 0, 0};
  n.e_hat = {0.5, 0.5, 0.5};
  n.g_hat = {0.5, 0.5, 0.5};
  n.delta_hat = {0.3, 0.01, -0.02};
  n.flags = {0, 0, 0};
  detail::flag_weak_compliance(n, 0.05);
  EXPECT_EQ(n.delta_flagged, 2u);
  EXPECT_EQ(n.flags[1] & kComplianceFloored, kComplianceFloored);
  EXPECT_EQ(floored_compliance(0.01, 0.05), 0.05);
  EXPECT_EQ(floored_compliance(-0.02, 0.05), -0.05);
  EXPECT_EQ(floored_compliance(0.3, 0.05), 0.3);
}

TEST(Nuisance, CsvRoundTrip) {
  DgpSpec spec = testing::quiet_dgp(300, 39);
  const auto synth = generate(spec);
  const auto n = fit_nuisances(synth.data, quick_params(40));
  testing::TempDir dir;
  write_nuisances_csv(n, dir.file("n.csv"));
  const auto back = read_nuisances_csv(dir.file("n.csv"));
  EXPECT_EQ(back.m_hat, n.m_hat);
  EXPECT_EQ(back.e_hat, n.e_hat);
  EXPECT_EQ(back.g_hat, n.g_hat);
  EXPECT_EQ(back.delta_hat, n.delta_hat);
  EXPECT_EQ(back.flags, n.flags);
}

TEST(Nuisance, CausalNuisancesUseTreatmentAsInstrument) {
  DgpSpec spec = testing::quiet_dgp(300, 40);
  const auto synth = generate(spec);
  const auto n = fit_causal_nuisances(synth.data, quick_params(40));
  EXPECT_EQ(n.g_hat, n.e_hat);
  for (double d : n.delta_hat) EXPECT_EQ(d, 1.0);
}

TEST(Nuisance, TreeCountDefault) {
  ForestParams p;
  EXPECT_EQ(resolved_nuisance_trees(p, NuisanceOptions{}), 500u);
  p.num_trees = 100;
  EXPECT_EQ(resolved_nuisance_trees(p, NuisanceOptions{}), 50u);
  NuisanceOptions o;
  o.num_trees = 77;
  EXPECT_EQ(resolved_nuisance_trees(p, o), 77u);
}

}  // namespace
}  // namespace ivcf
