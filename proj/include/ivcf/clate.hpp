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

#ifndef IVCF_CLATE_HPP_
#define IVCF_CLATE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "ivcf/data.hpp"
#include "ivcf/error.hpp"
#include "ivcf/forest.hpp"
#include "ivcf/nuisance.hpp"
#include "ivcf/random.hpp"

namespace ivcf {

inline constexpr double kNormal975 = 1.959963984540054;

struct Residuals {
  std::vector<double> y_res;
  std::vector<double> d_res;
  std::vector<double> z_res;
};

inline Residuals residualize(const CausalDataset& data, const NuisanceSet& n) {
  if (n.size() != data.rows()) throw SchemaError("nuisances were fitted on a different dataset");
  Residuals r;
  r.y_res.resize(data.rows());
  r.d_res.resize(data.rows());
  r.z_res.resize(data.rows());
  for (std::size_t i = 0; i < data.rows(); ++i) {
    r.y_res[i] = data.outcome()[i] - n.m_hat[i];
    r.d_res[i] = data.treatment()[i] - n.e_hat[i];
    r.z_res[i] = data.instrument()[i] - n.g_hat[i];
  }
  return r;
}

struct ResidualCheck {
  double mean = 0.0;
  double sd = 0.0;
  bool centered = true;  // |mean| <= 3 sd / sqrt(N)
};

inline ResidualCheck check_centered(std::span<const double> v) {
  ResidualCheck c;
  const double n = static_cast<double>(v.size());
  for (double x : v) c.mean += x;
  c.mean /= n;
  for (double x : v) c.sd += (x - c.mean) * (x - c.mean);
  c.sd = v.size() > 1 ? std::sqrt(c.sd / (n - 1.0)) : 0.0;
  c.centered = std::abs(c.mean) <= 3.0 * c.sd / std::sqrt(n);
  return c;
}

// Weighted local 2SLS: the solution (tau, intercept) of
//   sum_i a_i z_i (y_i - d_i tau - mu) = 0,  sum_i a_i (y_i - d_i tau - mu) = 0
// which is the weighted covariance ratio Cov_a(y, z) / Cov_a(d, z).
inline double solve_local_2sls(const SparseWeights& weights, const Residuals& r,
                               double floor = 1e-6) {
  LocalMoments m;
  for (std::size_t k = 0; k < weights.index.size(); ++k) {
    const std::size_t i = weights.index[k];
    m.add(weights.weight[k], r.y_res[i], r.d_res[i], r.z_res[i]);
  }
  const double den = m.first_stage();
  if (!(std::abs(den) >= floor)) throw WeakIdentificationError(den);
  return m.reduced_form() / den;
}

inline double solve_local_2sls(std::span<const double> weights, const Residuals& r, double floor = 1e-6) {
  SparseWeights w;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (weights[i] != 0.0) {
      w.index.push_back(static_cast<std::uint32_t>(i));
      w.weight.push_back(weights[i]);
    }
  }
  return solve_local_2sls(w, r, floor);
}

struct ClateResult {
  std::vector<double> tau_hat;
  std::vector<double> se;  // NaN where kNoStandardError is flagged
  std::vector<std::uint32_t> flags;
  ForestParams params;  // as used, after tuning
  ForestMode mode = ForestMode::instrumental;
  std::shared_ptr<const Forest> forest;
  std::size_t weak_count = 0;
  std::size_t missing_se_count = 0;
};

inline ForestTargets effect_targets(const Residuals& r, ForestMode mode) {
  if (mode == ForestMode::regression) throw ConfigError("effect forests are causal or instrumental");
  ForestTargets t{r.y_res, r.d_res, {}};
  if (mode == ForestMode::instrumental) t.instrument = r.z_res;
  return t;
}

inline Forest grow_effect_forest(const CausalDataset& data, const Residuals& r, ForestMode mode,
                                 ForestParams params) {
  params.seed = role_seed(params.seed, SeedRole::effect);
  auto targets = effect_targets(r, mode);
  if (params.tune) params = tune_forest(data.features(), data.cluster(), targets, mode, params).params;
  return grow_forest(data, std::move(targets), mode, params);
}

namespace detail {

inline ClateResult collect_predictions(const std::vector<ForestPrediction>& pred, const Residuals& r,
                                       double floor) {
  ClateResult out;
  const std::size_t n = pred.size();
  out.tau_hat.resize(n);
  out.se.resize(n);
  out.flags.assign(n, 0);
  // Fallback for weakly identified points: the pooled Wald ratio.
  double pooled = std::numeric_limits<double>::quiet_NaN();
  for (std::size_t i = 0; i < n; ++i) {
    if (pred[i].weak || !std::isfinite(pred[i].estimate)) {
      if (std::isnan(pooled)) {
        SparseWeights all;
        for (std::size_t j = 0; j < r.y_res.size(); ++j) {
          all.index.push_back(static_cast<std::uint32_t>(j));
          all.weight.push_back(1.0 / static_cast<double>(r.y_res.size()));
        }
        try {
          pooled = solve_local_2sls(all, r, floor);
        } catch (const WeakIdentificationError&) {
          pooled = 0.0;
        }
      }
      out.tau_hat[i] = pooled;
      out.se[i] = std::numeric_limits<double>::quiet_NaN();
      out.flags[i] |= kWeakIdentification | kNoStandardError;
      ++out.weak_count;
      ++out.missing_se_count;
      continue;
    }
    out.tau_hat[i] = pred[i].estimate;
    const double v = pred[i].variance;
    if (std::isfinite(v) && v > 0.0) {
      out.se[i] = std::sqrt(v);
    } else {
      out.se[i] = std::numeric_limits<double>::quiet_NaN();
      out.flags[i] |= kNoStandardError;
      ++out.missing_se_count;
    }
  }
  return out;
}

}  // namespace detail

// Grows the effect forest on residuals and predicts tau(X_i) out-of-bag.
// Weakly identified points keep a finite fallback estimate, carry the
// kWeakIdentification flag and have no standard error.
inline ClateResult predict_clates(const CausalDataset& data, const NuisanceSet& nuisances,
                                  const ForestParams& params, ForestMode mode = ForestMode::instrumental) {
  const Residuals r = residualize(data, nuisances);
  auto forest = std::make_shared<Forest>(grow_effect_forest(data, r, mode, params));
  auto result = detail::collect_predictions(predict_oob(*forest, data.features()), r,
                                            params.weak_identification_floor);
  result.params = forest->params;
  result.mode = mode;
  result.forest = std::move(forest);
  return result;
}

// OOB CLATEs from an already grown (e.g. loaded) effect forest.
inline ClateResult clates_from_forest(std::shared_ptr<const Forest> forest, const CausalDataset& data,
                                      const NuisanceSet& nuisances) {
  const Residuals r = residualize(data, nuisances);
  auto result = detail::collect_predictions(predict_oob(*forest, data.features()), r,
                                            forest->params.weak_identification_floor);
  result.params = forest->params;
  result.mode = forest->mode;
  result.forest = std::move(forest);
  return result;
}

// Standard error of a mean under cluster-level dependence: scores are
// centered and summed within cluster, with the G/(G-1) small-sample factor.
inline double cluster_robust_mean_se(std::span<const double> values, std::span<const std::uint32_t> cluster) {
  const std::size_t n = values.size();
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(n);
  std::uint32_t g = 0;
  for (std::uint32_t c : cluster) g = std::max(g, c + 1);
  std::vector<double> sums(g, 0.0);
  std::vector<char> seen(g, 0);
  for (std::size_t i = 0; i < n; ++i) {
    sums[cluster[i]] += values[i] - mean;
    seen[cluster[i]] = 1;
  }
  double ss = 0.0;
  for (double s : sums) ss += s * s;
  const auto nonempty = static_cast<double>(std::count(seen.begin(), seen.end(), 1));
  if (nonempty < 2) return std::numeric_limits<double>::quiet_NaN();
  return std::sqrt(nonempty / (nonempty - 1.0) * ss) / static_cast<double>(n);
}

struct DrScores {
  std::vector<double> gamma;
  double late = 0.0;
  double late_se = 0.0;
  double ci_low() const { return late - kNormal975 * late_se; }
  double ci_high() const { return late + kNormal975 * late_se; }
};

inline double floored_compliance(double delta, double floor) {
  if (std::abs(delta) >= floor) return delta;
  return delta < 0.0 ? -floor : floor;
}

// Gamma_i = tau(X_i) + (Z_i - g)/(g (1 - g)) / delta * (Y_i - m - (D_i - e) tau(X_i)),
// late = mean(Gamma), late_se = cluster-robust SE of that mean.
inline DrScores doubly_robust_scores(const CausalDataset& data, const NuisanceSet& n, const ClateResult& clates,
                                     double compliance_floor = 0.05) {
  const std::size_t rows = data.rows();
  if (n.size() != rows || clates.tau_hat.size() != rows) throw SchemaError("score inputs differ in length");
  DrScores s;
  s.gamma.resize(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double g = n.g_hat[i];
    const double tau = clates.tau_hat[i];
    const double delta = floored_compliance(n.delta_hat[i], compliance_floor);
    const double weight = (data.instrument()[i] - g) / (g * (1.0 - g)) / delta;
    const double residual = data.outcome()[i] - n.m_hat[i] - (data.treatment()[i] - n.e_hat[i]) * tau;
    s.gamma[i] = tau + weight * residual;
  }
  double sum = 0.0;
  for (double v : s.gamma) sum += v;
  s.late = sum / static_cast<double>(rows);
  s.late_se = cluster_robust_mean_se(s.gamma, data.cluster());
  return s;
}

}  // namespace ivcf

#endif  // IVCF_CLATE_HPP_
