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

using Matrix = std::vector<std::vector<long double>>;

// Gauss-Jordan inverse in long double.
Matrix invert(Matrix a) {
  const std::size_t k = a.size();
  Matrix inv(k, std::vector<long double>(k, 0.0L));
  for (std::size_t i = 0; i < k; ++i) inv[i][i] = 1.0L;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t pivot = c;
    for (std::size_t r = c + 1; r < k; ++r) {
      if (std::fabs(a[r][c]) > std::fabs(a[pivot][c])) pivot = r;
    }
    std::swap(a[c], a[pivot]);
    std::swap(inv[c], inv[pivot]);
    const long double p = a[c][c];
    for (std::size_t j = 0; j < k; ++j) {
      a[c][j] /= p;
      inv[c][j] /= p;
    }
    for (std::size_t r = 0; r < k; ++r) {
      if (r == c) continue;
      const long double f = a[r][c];
      for (std::size_t j = 0; j < k; ++j) {
        a[r][j] -= f * a[c][j];
        inv[r][j] -= f * inv[c][j];
      }
    }
  }
  return inv;
}

struct OlsOracle {
  std::vector<double> beta;
  std::vector<double> se;
};

// (X'X)^-1 X'y and the CR1 sandwich, from the textbook formulas.
OlsOracle ols_oracle(const std::vector<std::vector<double>>& rows, const std::vector<double>& y,
                     const std::vector<std::uint32_t>& cluster) {
  const std::size_t n = rows.size(), k = rows[0].size() + 1;
  auto row = [&](std::size_t i) {
    std::vector<long double> r{1.0L};
    for (double v : rows[i]) r.push_back(v);
    return r;
  };
  Matrix xtx(k, std::vector<long double>(k, 0.0L));
  std::vector<long double> xty(k, 0.0L);
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = row(i);
    for (std::size_t a = 0; a < k; ++a) {
      xty[a] += r[a] * y[i];
      for (std::size_t b = 0; b < k; ++b) xtx[a][b] += r[a] * r[b];
    }
  }
  const Matrix inv = invert(xtx);
  std::vector<long double> beta(k, 0.0L);
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) beta[a] += inv[a][b] * xty[b];
  }
  const std::uint32_t g = *std::max_element(cluster.begin(), cluster.end()) + 1;
  Matrix score(g, std::vector<long double>(k, 0.0L));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = row(i);
    long double u = y[i];
    for (std::size_t a = 0; a < k; ++a) u -= r[a] * beta[a];
    for (std::size_t a = 0; a < k; ++a) score[cluster[i]][a] += u * r[a];
  }
  Matrix meat(k, std::vector<long double>(k, 0.0L));
  for (const auto& s : score) {
    for (std::size_t a = 0; a < k; ++a) {
      for (std::size_t b = 0; b < k; ++b) meat[a][b] += s[a] * s[b];
    }
  }
  const long double corr = static_cast<long double>(g) / (g - 1) * (n - 1.0L) / (n - static_cast<long double>(k));
  OlsOracle out;
  for (std::size_t a = 0; a < k; ++a) {
    long double v = 0.0L;
    for (std::size_t b = 0; b < k; ++b) {
      for (std::size_t c = 0; c < k; ++c) v += inv[a][b] * meat[b][c] * inv[c][a];
    }
    out.beta.push_back(static_cast<double>(beta[a]));
    out.se.push_back(static_cast<double>(std::sqrt(corr * v)));
  }
  return out;
}

Design design_of(const std::vector<std::vector<double>>& rows) {
  Design d;
  d.x.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows[0].size()));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < rows[0].size(); ++j) d.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  }
  for (std::size_t j = 0; j < rows[0].size(); ++j) d.names.push_back("v" + std::to_string(j + 1));
  return d;
}

std::vector<std::uint32_t> singletons(std::size_t n) {
  std::vector<std::uint32_t> c(n);
  std::iota(c.begin(), c.end(), 0u);
  return c;
}

TEST(Blp, ConstantScores) {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> normal;
  std::vector<std::vector<double>> rows(40, std::vector<double>(3));
  for (auto& r : rows) {
    for (double& v : r) v = normal(rng);
  }
  const auto r = blp(std::vector<double>(40, 2.0), design_of(rows), singletons(40));
  EXPECT_NEAR(r.coefficients[0], 2.0, 1e-12);
  for (std::size_t k = 1; k < r.coefficients.size(); ++k) EXPECT_NEAR(r.coefficients[k], 0.0, 1e-12);
}

TEST(Blp, BinarySlopeIsGroupMeanDifference) {
  std::vector<std::vector<double>> rows;
  std::vector<double> gamma;
  for (int i = 0; i < 20; ++i) {
    rows.push_back({static_cast<double>(i % 2)});
    gamma.push_back(3.0 * (i % 2));
  }
  const auto r = blp(gamma, design_of(rows), singletons(20));
  EXPECT_NEAR(r.coefficients[1], 3.0, 1e-12);
  EXPECT_NEAR(r.coefficients[0], 0.0, 1e-12);
}

TEST(Blp, FiveRowHandDataset) {
  const std::vector<std::vector<double>> rows{{1, 0}, {0, 1}, {1, 1}, {2, 0}, {0, 3}};
  const std::vector<double> gamma{1.5, -0.5, 2.0, 4.25, 1.0};
  const auto r = blp(gamma, design_of(rows), singletons(5));
  const auto o = ols_oracle(rows, gamma, singletons(5));
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(r.coefficients[k], o.beta[k], 1e-10);
    EXPECT_NEAR(r.se[k], o.se[k], 1e-10);
  }
}

TEST(Blp, RandomDesignsMatchSandwichOracle) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> normal;
  std::bernoulli_distribution coin(0.4);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t n = 60 + rep * 10;
    std::vector<std::vector<double>> rows(n);
    std::vector<double> gamma(n);
    std::vector<std::uint32_t> cluster(n);
    for (std::size_t i = 0; i < n; ++i) {
      rows[i] = {coin(rng) ? 1.0 : 0.0, normal(rng), coin(rng) ? 1.0 : 0.0};
      gamma[i] = 1.0 + 0.5 * rows[i][0] - rows[i][1] + 2.0 * normal(rng);
      cluster[i] = static_cast<std::uint32_t>(i / 4);
    }
    const auto r = blp(gamma, design_of(rows), cluster);
    const auto o = ols_oracle(rows, gamma, cluster);
    for (std::size_t k = 0; k < o.beta.size(); ++k) {
      EXPECT_NEAR(r.coefficients[k], o.beta[k], 1e-10);
      EXPECT_NEAR(r.se[k], o.se[k], 1e-10);
      EXPECT_LE(r.ci_low[k], r.coefficients[k]);
      EXPECT_GE(r.ci_high[k], r.coefficients[k]);
    }
    EXPECT_EQ(r.clusters, (n + 3) / 4);
  }
}

TEST(Blp, RankDeficiencyNamesColumns) {
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 12; ++i) rows.push_back({static_cast<double>(i % 2), 1.0 - (i % 2), static_cast<double>(i)});
  try {
    blp(std::vector<double>(12, 1.0), design_of(rows), singletons(12));
    FAIL() << "expected rank deficiency";
  } catch (const RankDeficiencyError& e) {
    ASSERT_EQ(e.columns().size(), 1u);
    EXPECT_EQ(e.columns()[0], "v2");
  }
}

TEST(Blp, OrderAndShiftInvariance) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> normal;
  const std::size_t n = 80;
  std::vector<std::vector<double>> rows(n);
  std::vector<double> gamma(n);
  std::vector<std::uint32_t> cluster(n);
  for (std::size_t i = 0; i < n; ++i) {
    rows[i] = {normal(rng), static_cast<double>(i % 3 == 0)};
    gamma[i] = normal(rng);
    cluster[i] = static_cast<std::uint32_t>(i % 9);
  }
  const auto base = blp(gamma, design_of(rows), cluster);

  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<std::vector<double>> prow;
  std::vector<double> pg;
  std::vector<std::uint32_t> pc;
  for (auto i : perm) {
    prow.push_back(rows[i]);
    pg.push_back(gamma[i]);
    pc.push_back(cluster[i]);
  }
  const auto permuted = blp(pg, design_of(prow), pc);
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_NEAR(permuted.coefficients[k], base.coefficients[k], 1e-12);
    EXPECT_NEAR(permuted.se[k], base.se[k], 1e-12);
  }

  std::vector<double> shifted = gamma;
  for (double& g : shifted) g += 4.5;
  const auto s = blp(shifted, design_of(rows), cluster);
  EXPECT_NEAR(s.coefficients[0], base.coefficients[0] + 4.5, 1e-12);
  for (std::size_t k = 1; k < 3; ++k) {
    EXPECT_NEAR(s.coefficients[k], base.coefficients[k], 1e-12);
    EXPECT_NEAR(s.se[k], base.se[k], 1e-12);
  }
}

TEST(Blp, DesignDropsReferenceLevel) {
  const auto synth = generate(testing::quiet_dgp(300, 5));
  const auto last = blp_design(synth.data, ReferenceLevel::last);
  const auto first = blp_design(synth.data, ReferenceLevel::first);
  EXPECT_EQ(last.names, (std::vector<std::string>{"x1:q1", "x1:q2", "x2", "x3:q1", "x3:q2", "x4"}));
  EXPECT_EQ(first.names, (std::vector<std::string>{"x1:q2", "x1:q3", "x2", "x3:q2", "x3:q3", "x4"}));
  const auto mods = clan_modifiers(synth.data);
  EXPECT_EQ(mods.names.size(), 8u);
  for (Eigen::Index i = 0; i < mods.x.rows(); ++i) EXPECT_EQ(mods.x(i, 0) + mods.x(i, 1) + mods.x(i, 2), 1.0);
}

Design one_column(std::vector<double> v, std::string name = "m") {
  Design d;
  d.x = Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  d.names = {std::move(name)};
  return d;
}

TEST(Clan, EightPointExample) {
  const std::vector<double> gamma{1, 2, 3, 4, 5, 6, 7, 8};
  const auto r = clan(gamma, one_column({0, 0, 0, 0, 1, 0, 1, 1}));
  EXPECT_EQ(r.group_size, 2u);
  EXPECT_EQ(r.most, (std::vector<std::size_t>{6, 7}));
  EXPECT_EQ(r.least, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r.records[0].mean_most, 1.0);
  EXPECT_EQ(r.records[0].mean_least, 0.0);
  EXPECT_EQ(r.records[0].diff, 1.0);
}

TEST(Clan, ConstantModifierHasZeroDifference) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> normal;
  for (std::size_t n : {8u, 13u, 50u}) {
    std::vector<double> gamma(n);
    for (double& g : gamma) g = normal(rng);
    const auto r = clan(gamma, one_column(std::vector<double>(n, 1.0)));
    EXPECT_EQ(r.records[0].diff, 0.0);
    EXPECT_EQ(r.records[0].diff_se, 0.0);
  }
}

TEST(Clan, ModifierSeparatingTopHalf) {
  std::vector<double> gamma, x;
  for (int i = 0; i < 40; ++i) {
    gamma.push_back(i * 0.3 - 2.0);
    x.push_back(i >= 20 ? 1.0 : 0.0);
  }
  const auto r = clan(gamma, one_column(x));
  EXPECT_EQ(r.records[0].mean_most, 1.0);
  EXPECT_EQ(r.records[0].mean_least, 0.0);
  EXPECT_EQ(r.records[0].diff, 1.0);
}

TEST(Clan, MonotoneTransformKeepsGroups) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> normal;
  std::vector<double> gamma(37), x(37);
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    gamma[i] = normal(rng);
    x[i] = normal(rng);
  }
  const auto base = clan(gamma, one_column(x));
  std::vector<double> t = gamma;
  for (double& g : t) g = std::exp(3.0 * g) + 1.0;
  const auto other = clan(t, one_column(x));
  EXPECT_EQ(base.most, other.most);
  EXPECT_EQ(base.least, other.least);
  EXPECT_EQ(base.records[0].mean_most, other.records[0].mean_most);
  EXPECT_EQ(base.records[0].diff, base.records[0].mean_most - base.records[0].mean_least);
}

TEST(Clan, BoundaryTiesBrokenByRowIndex) {
  const std::vector<double> gamma{1, 1, 1, 1, 2, 2, 2, 2};
  const auto r = clan(gamma, one_column({1, 2, 3, 4, 5, 6, 7, 8}));
  EXPECT_EQ(r.least, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(r.most, (std::vector<std::size_t>{6, 7}));
  EXPECT_EQ(r.boundary_ties, 2u);
}

TEST(Clan, NeedsEightObservations) {
  EXPECT_THROW(clan(std::vector<double>(7, 1.0), one_column(std::vector<double>(7, 1.0))), Error);
}

TEST(Histogram, TwoPointMasses) {
  const auto h = clate_histogram(std::vector<double>{0, 0, 1, 1}, 2, 0.5, 0.2, 0.8);
  EXPECT_EQ(h.counts, (std::vector<std::size_t>{2, 2}));
  EXPECT_EQ(h.edges, (std::vector<double>{0.0, 0.5, 1.0}));
  EXPECT_EQ(h.late, 0.5);
  EXPECT_EQ(h.zero_line, 0.0);
}

TEST(Histogram, ConstantInputSingleBin) {
  const auto h = clate_histogram(std::vector<double>(9, 1.5), 30, 1.5, 1.0, 2.0);
  EXPECT_EQ(h.counts, (std::vector<std::size_t>{9}));
  EXPECT_EQ(h.edges.size(), 2u);
  EXPECT_LE(h.edges[0], 1.5);
  EXPECT_GE(h.edges[1], 1.5);
}

TEST(Histogram, CountsSumToN) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> normal;
  for (std::size_t bins : {1u, 3u, 17u, 30u}) {
    std::vector<double> v(501);
    for (double& x : v) x = normal(rng);
    const auto h = clate_histogram(v, bins, 0, 0, 0);
    EXPECT_EQ(std::accumulate(h.counts.begin(), h.counts.end(), std::size_t{0}), v.size());
    EXPECT_EQ(h.counts.size(), bins);
    EXPECT_EQ(h.edges.front(), *std::min_element(v.begin(), v.end()));
    EXPECT_EQ(h.edges.back(), *std::max_element(v.begin(), v.end()));
  }
}

TEST(Histogram, BimodalEffects) {
  DgpSpec spec = testing::quiet_dgp(2000, 8);
  spec.tau_fn = TauFunction::bimodal;
  spec.tau_base = 1.0;
  spec.tau_jump = 1.0;
  spec.noise_sd = 0.3;
  const auto synth = generate(spec);
  const auto n = fit_nuisances(synth.data, testing::quick_params(200));
  const auto c = predict_clates(synth.data, n, testing::quick_params(400));
  const auto h = clate_histogram(c.tau_hat, 12, 1.5, 1.4, 1.6);
  auto count_near = [&](double v) {
    for (std::size_t b = 0; b < h.counts.size(); ++b) {
      if (v >= h.edges[b] && v <= h.edges[b + 1]) return h.counts[b];
    }
    return std::size_t{0};
  };
  EXPECT_GT(count_near(1.0), count_near(1.5));
  EXPECT_GT(count_near(2.0), count_near(1.5));
}

}  // namespace
}  // namespace ivcf
