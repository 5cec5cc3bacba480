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

#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "test_util.hpp"

namespace ivcf {
namespace {

using testing::quick_params;

Residuals center(const std::vector<double>& y, const std::vector<double>& d, const std::vector<double>& z) {
  auto c = [](std::vector<double> v) {
    const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    for (double& x : v) x -= m;
    return v;
  };
  return {c(y), c(d), c(z)};
}

// Weighted covariance ratio with weights normalized first, two-pass.
double wald_oracle(const std::vector<double>& w, const Residuals& r) {
  long double total = 0;
  for (double v : w) total += v;
  long double my = 0, md = 0, mz = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    my += w[i] / total * r.y_res[i];
    md += w[i] / total * r.d_res[i];
    mz += w[i] / total * r.z_res[i];
  }
  long double cyz = 0, cdz = 0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    cyz += w[i] / total * (r.y_res[i] - my) * (r.z_res[i] - mz);
    cdz += w[i] / total * (r.d_res[i] - md) * (r.z_res[i] - mz);
  }
  return static_cast<double>(cyz / cdz);
}

TEST(Wald, FourPointGroupMeans) {
  const Residuals r = center({3, 1, 1, 1}, {1, 0, 0, 0}, {1, 1, 0, 0});
  EXPECT_NEAR(solve_local_2sls(std::vector<double>(4, 0.25), r), 2.0, 1e-12);
}

TEST(Wald, PerfectComplianceUnitEffect) {
  const std::vector<double> d{1, 0, 1, 0, 1, 1, 0};
  const Residuals r = center(d, d, d);
  EXPECT_NEAR(solve_local_2sls(std::vector<double>(7, 1.0 / 7), r), 1.0, 1e-12);
}

TEST(Wald, UncorrelatedInstrumentIsWeak) {
  const Residuals r = center({1, 2, 3, 4}, {1, 0, 1, 0}, {1, 1, 0, 0});
  try {
    solve_local_2sls(std::vector<double>(4, 0.25), r);
    FAIL() << "expected weak identification";
  } catch (const WeakIdentificationError& e) {
    EXPECT_LT(std::abs(e.denominator()), 1e-6);
  }
}

TEST(Wald, RandomInstancesMatchCovarianceRatio) {
  std::mt19937_64 rng(77);
  std::normal_distribution<double> normal;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t n = 5 + rep * 3;
    std::vector<double> y(n), d(n), z(n), w(n);
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = u(rng) < 0.5 ? 1.0 : 0.0;
      d[i] = u(rng) < (z[i] == 1.0 ? 0.8 : 0.2) ? 1.0 : 0.0;
      y[i] = normal(rng) + 1.5 * d[i];
      w[i] = u(rng) < 0.2 ? 0.0 : u(rng);
    }
    z[0] = 1, d[0] = 1, z[1] = 0, d[1] = 0, w[0] = w[1] = 0.5;
    const double s = std::accumulate(w.begin(), w.end(), 0.0);
    for (double& v : w) v /= s;
    const Residuals r{y, d, z};
    EXPECT_NEAR(solve_local_2sls(w, r), wald_oracle(w, r), 1e-10) << "instance " << rep;
  }
}

TEST(Clates, ConstantEffectRecovered) {
  DgpSpec spec = testing::quiet_dgp(2000, 41);
  spec.tau_fn = TauFunction::constant;
  spec.tau_base = 0.5;
  const auto synth = generate(spec);
  const auto n = fit_nuisances(synth.data, quick_params(200));
  const auto c = predict_clates(synth.data, n, quick_params(400));
  const double mean = std::accumulate(c.tau_hat.begin(), c.tau_hat.end(), 0.0) / c.tau_hat.size();
  EXPECT_NEAR(mean, 0.5, 0.1);
  for (std::size_t i = 0; i < c.tau_hat.size(); ++i) {
    EXPECT_TRUE(std::isfinite(c.tau_hat[i]));
    if (!(c.flags[i] & kNoStandardError)) {
      EXPECT_GT(c.se[i], 0.0);
    }
  }
  EXPECT_EQ(c.weak_count, 0u);
}

TEST(Clates, InstrumentEqualToTreatmentMatchesCausalPath) {
  DgpSpec spec = testing::quiet_dgp(800, 42);
  const auto synth = generate(spec);
  const auto data = synth.data.with_instrument(synth.data.treatment());
  const auto n = fit_causal_nuisances(data, quick_params(100));
  const auto iv = predict_clates(data, n, quick_params(100), ForestMode::instrumental);
  const auto cf = predict_clates(data, n, quick_params(100), ForestMode::causal);
  ASSERT_EQ(iv.tau_hat.size(), cf.tau_hat.size());
  EXPECT_EQ(std::memcmp(iv.tau_hat.data(), cf.tau_hat.data(), iv.tau_hat.size() * sizeof(double)), 0);
  for (std::size_t i = 0; i < iv.se.size(); ++i) {
    EXPECT_TRUE((std::isnan(iv.se[i]) && std::isnan(cf.se[i])) || iv.se[i] == cf.se[i]);
  }
}

TEST(Clates, WeakPointsAreFlaggedNotFatal) {
  std::vector<ForestPrediction> pred(3);
  pred[0].estimate = 1.0;
  pred[0].variance = 0.04;
  pred[1].weak = true;
  pred[2].estimate = 2.0;
  const Residuals r = center({3, 1, 1}, {1, 0, 0}, {1, 0, 0});
  const auto c = detail::collect_predictions(pred, r, 1e-6);
  EXPECT_EQ(c.tau_hat[0], 1.0);
  EXPECT_EQ(c.se[0], 0.2);
  EXPECT_TRUE(std::isfinite(c.tau_hat[1]));
  EXPECT_TRUE(std::isnan(c.se[1]));
  EXPECT_EQ(c.flags[1], kWeakIdentification | kNoStandardError);
  EXPECT_EQ(c.flags[2], kNoStandardError);
  EXPECT_EQ(c.weak_count, 1u);
  EXPECT_EQ(c.missing_se_count, 2u);
}

TEST(Clates, TranslationInvariantWithShiftedOracleMean) {
  DgpSpec spec = testing::quiet_dgp(600, 43);
  const auto synth = generate(spec);
  const auto n = fit_nuisances(synth.data, quick_params(60));
  const auto a = predict_clates(synth.data, n, quick_params(60));
  const double c = 7.25;
  std::vector<double> y = synth.data.outcome();
  for (double& v : y) v += c;
  NuisanceSet shifted = n;
  for (double& m : shifted.m_hat) m += c;
  const auto b = predict_clates(synth.data.with_outcome(y), shifted, quick_params(60));
  for (std::size_t i = 0; i < a.tau_hat.size(); ++i) EXPECT_NEAR(a.tau_hat[i], b.tau_hat[i], 1e-9);
}

CausalDataset two_rows(double y0, double d0, double z0) {
  return CausalDataset::build({testing::feature("x", FeatureKind::binary)}, {0, 1}, {y0, 0.0}, {d0, 0.0},
                              {z0, 1.0 - z0}, {1, 2});
}

NuisanceSet flat_nuisances(std::size_t n, double m, double e, double g, double delta) {
  NuisanceSet s;
  s.m_hat.assign(n, m);
  s.e_hat.assign(n, e);
  s.g_hat.assign(n, g);
  s.delta_hat.assign(n, delta);
  s.flags.assign(n, 0);
  return s;
}

TEST(Scores, HandEvaluation) {
  const auto data = two_rows(1.0, 1.0, 1.0);
  ClateResult c;
  c.tau_hat = {0.0, 0.0};
  const auto s = doubly_robust_scores(data, flat_nuisances(2, 0.0, 0.5, 0.5, 1.0), c);
  EXPECT_DOUBLE_EQ(s.gamma[0], 2.0);
}

TEST(Scores, ZeroAugmentationResidual) {
  const auto data = two_rows(2.3, 1.0, 1.0);
  ClateResult c;
  c.tau_hat = {1.3, 0.7};
  const auto s = doubly_robust_scores(data, flat_nuisances(2, 1.5, 0.5, 0.4, 0.6), c);
  // y - m - (d - e) tau = 2.3 - 1.5 - 0.5 * 1.3 = 0.15; choose m to cancel it.
  const auto t = doubly_robust_scores(data, flat_nuisances(2, 2.3 - 0.5 * 1.3, 0.5, 0.4, 0.6), c);
  EXPECT_NE(s.gamma[0], 1.3);
  EXPECT_NEAR(t.gamma[0], 1.3, 1e-15);
}

TEST(Scores, FlooredComplianceInDenominator) {
  const auto data = two_rows(1.0, 1.0, 1.0);
  ClateResult c;
  c.tau_hat = {0.0, 0.0};
  const auto s = doubly_robust_scores(data, flat_nuisances(2, 0.0, 0.5, 0.5, 0.01), c, 0.05);
  EXPECT_DOUBLE_EQ(s.gamma[0], 2.0 / 0.05);
}

TEST(Scores, LateIsMeanOfScores) {
  DgpSpec spec = testing::quiet_dgp(1000, 44);
  const auto synth = generate(spec);
  const auto n = fit_nuisances(synth.data, quick_params(60));
  const auto c = predict_clates(synth.data, n, quick_params(60));
  const auto s = doubly_robust_scores(synth.data, n, c);
  double sum = 0.0;
  for (double g : s.gamma) sum += g;
  EXPECT_EQ(s.late, sum / static_cast<double>(s.gamma.size()));
  long double precise = 0.0L;
  for (double g : s.gamma) precise += g;
  EXPECT_NEAR(s.late, static_cast<double>(precise / s.gamma.size()), 1e-13 * (1.0 + std::abs(s.late)));
  EXPECT_GT(s.late_se, 0.0);
  EXPECT_LT(s.ci_low(), s.late);
  EXPECT_GT(s.ci_high(), s.late);
}

TEST(Scores, ClusterRobustStandardErrorOracle) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> normal;
  const std::size_t n = 97;
  std::vector<double> v(n);
  std::vector<std::uint32_t> cluster(n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = normal(rng);
    cluster[i] = static_cast<std::uint32_t>((i * 7) % 13);
  }
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  std::vector<double> sums(13, 0.0);
  for (std::size_t i = 0; i < n; ++i) sums[cluster[i]] += v[i] - mean;
  double ss = 0.0;
  for (double s : sums) ss += s * s;
  const double oracle = std::sqrt(13.0 / 12.0 * ss) / n;
  EXPECT_NEAR(cluster_robust_mean_se(v, cluster), oracle, 1e-15);

  std::vector<std::uint32_t> singletons(n);
  std::iota(singletons.begin(), singletons.end(), 0u);
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  EXPECT_NEAR(cluster_robust_mean_se(v, singletons), std::sqrt(var / (n - 1) / n), 1e-14);
}

TEST(Residuals, CenteringCheck) {
  std::vector<double> v{1, -1, 2, -2};
  EXPECT_TRUE(check_centered(v).centered);
  std::vector<double> shifted{10, 11, 9, 10.5};
  EXPECT_FALSE(check_centered(shifted).centered);
}

}  // namespace
}  // namespace ivcf
