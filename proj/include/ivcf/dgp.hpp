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

#ifndef IVCF_DGP_HPP_
#define IVCF_DGP_HPP_

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "ivcf/data.hpp"
#include "ivcf/error.hpp"
#include "ivcf/random.hpp"

namespace ivcf {

enum class TauFunction { constant, step, linear, bimodal };

inline TauFunction parse_tau_function(std::string_view name) {
  if (name == "constant") return TauFunction::constant;
  if (name == "step" || name == "step-on-x1") return TauFunction::step;
  if (name == "linear") return TauFunction::linear;
  if (name == "bimodal") return TauFunction::bimodal;
  throw ConfigError("unknown tau function '" + std::string(name) + "'");
}

inline std::string to_string(TauFunction f) {
  switch (f) {
    case TauFunction::constant: return "constant";
    case TauFunction::step: return "step";
    case TauFunction::linear: return "linear";
    case TauFunction::bimodal: return "bimodal";
  }
  return "constant";
}

enum class ComplianceKind { perfect, one_sided, two_sided };

inline ComplianceKind parse_compliance_kind(std::string_view name) {
  if (name == "perfect") return ComplianceKind::perfect;
  if (name == "one_sided") return ComplianceKind::one_sided;
  if (name == "two_sided") return ComplianceKind::two_sided;
  throw ConfigError("unknown compliance model '" + std::string(name) + "'");
}

inline std::string to_string(ComplianceKind k) {
  switch (k) {
    case ComplianceKind::perfect: return "perfect";
    case ComplianceKind::one_sided: return "one_sided";
    case ComplianceKind::two_sided: return "two_sided";
  }
  return "perfect";
}

// Population tercile cut of a standard normal covariate.
inline double normal_quantile(double p) {
  if (p <= 0.0) return -std::numeric_limits<double>::infinity();
  if (p >= 1.0) return std::numeric_limits<double>::infinity();
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

struct DgpSpec {
  std::size_t n = 2000;
  std::size_t n_clusters = 200;
  // Covariates: x1 ~ N(0,1); then alternating binary Bernoulli(1/2) (x2,
  // x4, ...) and N(0,1) (x3, x5, ...).
  std::size_t p = 6;
  TauFunction tau_fn = TauFunction::constant;
  double tau_base = 0.5;       // constant value, or the level below the step
  double tau_jump = 1.0;       // step / bimodal increment
  double tau_threshold = 0.0;  // step: tau = base + jump * 1{x1 > threshold}
  double tau_slope = 1.0;      // linear: tau = base + slope * x1
  ComplianceKind compliance = ComplianceKind::one_sided;
  double rate_z1 = 0.494;  // P(D=1 | Z=1)
  double rate_z0 = 0.096;  // P(D=1 | Z=0)
  // Loading of the latent U on both compliance type and the outcome error.
  double confounding_strength = 1.0;
  double noise_sd = 1.0;
  double cluster_sd = 0.0;
  // Continuous covariates are tercile-coded in the emitted schema.
  bool discretize = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (n < 2) throw ConfigError("DGP needs n >= 2");
    if (n_clusters < 2 || n_clusters > n) throw ConfigError("DGP needs 2 <= n_clusters <= n");
    if (p < 1) throw ConfigError("DGP needs p >= 1");
    if (!(noise_sd > 0.0)) throw ConfigError("noise_sd must be positive");
    if (!(confounding_strength >= 0.0) || !(cluster_sd >= 0.0)) throw ConfigError("DGP scales must be nonnegative");
    if (compliance != ComplianceKind::perfect) {
      if (!(rate_z1 >= 0.0 && rate_z1 <= 1.0 && rate_z0 >= 0.0 && rate_z0 <= 1.0)) {
        throw ConfigError("compliance rates must lie in [0, 1]");
      }
      if (!(rate_z1 > rate_z0)) throw ConfigError("compliance requires rate_z1 > rate_z0 (instrument relevance)");
    }
  }
};

enum class ComplianceType : std::uint8_t { never_taker, complier, always_taker };

struct SynthDataset {
  CausalDataset data;
  std::vector<double> tau_true;
  std::vector<ComplianceType> type;
  double late_true = 0.0;  // mean of tau_true over compliers
  // Index into the schema of the covariate driving effect heterogeneity.
  std::size_t modifier = 0;

  bool complier(std::size_t i) const { return type[i] == ComplianceType::complier; }
};

inline std::string feature_name(std::size_t j) { return "x" + std::to_string(j + 1); }
inline bool dgp_feature_is_binary(std::size_t j) { return j % 2 == 1; }

inline std::vector<FeatureSpec> dgp_schema(const DgpSpec& spec) {
  std::vector<FeatureSpec> schema;
  for (std::size_t j = 0; j < spec.p; ++j) {
    FeatureSpec f;
    f.name = feature_name(j);
    f.kind = dgp_feature_is_binary(j) ? FeatureKind::binary
                                      : (spec.discretize ? FeatureKind::tercile : FeatureKind::continuous);
    // The last covariate plays the supply-side role left out of ê.
    f.in_propensity = !(spec.p >= 3 && j == spec.p - 1);
    schema.push_back(std::move(f));
  }
  return schema;
}

inline double tau_of(const DgpSpec& spec, std::span<const double> x) {
  switch (spec.tau_fn) {
    case TauFunction::constant: return spec.tau_base;
    case TauFunction::step: return spec.tau_base + spec.tau_jump * (x[0] > spec.tau_threshold ? 1.0 : 0.0);
    case TauFunction::linear: return spec.tau_base + spec.tau_slope * x[0];
    case TauFunction::bimodal:
      return spec.tau_base + spec.tau_jump * (x.size() > 1 ? x[1] : (x[0] > 0.0 ? 1.0 : 0.0));
  }
  return 0.0;
}

inline double baseline_of(std::span<const double> x) {
  double m = 0.0;
  if (x.size() > 1) m += 0.5 * x[1];
  if (x.size() > 2) m += 0.3 * x[2];
  return m;
}

// Structural outcome; the instrument is deliberately not an argument, so
// Z can only reach Y through D.
inline double outcome_of(std::span<const double> x, double tau, double d, double error) {
  return baseline_of(x) + tau * d + error;
}

inline ComplianceType draw_type(const DgpSpec& spec, std::span<const double> x, double latent) {
  if (spec.compliance == ComplianceKind::perfect) return ComplianceType::complier;
  double r1 = spec.rate_z1, r0 = spec.rate_z0;
  if (spec.compliance == ComplianceKind::two_sided && x.size() > 2) {
    // Compliance varies with x3 while keeping r1 > r0.
    const double shift = 0.1 * std::tanh(x[2]);
    const double gap = r1 - r0;
    r1 = std::clamp(r1 + shift, 0.0, 1.0);
    r0 = std::clamp(r0 + shift * 0.5, 0.0, std::max(0.0, r1 - 0.5 * gap));
  }
  if (latent < normal_quantile(1.0 - r1)) return ComplianceType::never_taker;
  if (latent > normal_quantile(1.0 - r0)) return ComplianceType::always_taker;
  return ComplianceType::complier;
}

// Cluster-randomized instrument (half of the clusters offered), monotone
// compliance types (no defiers) driven by a latent U that also enters the
// outcome error.
inline SynthDataset generate(const DgpSpec& spec) {
  spec.validate();
  auto rng = make_rng(spec.seed, 0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);

  const std::size_t n = spec.n, p = spec.p, g = spec.n_clusters;
  std::vector<std::uint32_t> order(g);
  std::iota(order.begin(), order.end(), std::uint32_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<double> cluster_z(g, 0.0), cluster_shock(g, 0.0);
  for (std::size_t k = 0; k < g / 2; ++k) cluster_z[order[k]] = 1.0;
  for (std::size_t k = 0; k < g; ++k) cluster_shock[k] = spec.cluster_sd * normal(rng);

  SynthDataset out;
  std::vector<double> raw(n * p), y(n), d(n), z(n);
  std::vector<std::int64_t> labels(n);
  out.tau_true.resize(n);
  out.type.resize(n);
  const double s = spec.confounding_strength;
  const double latent_scale = 1.0 / std::sqrt(1.0 + s * s);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i * g / n;
    labels[i] = static_cast<std::int64_t>(c + 1);
    z[i] = cluster_z[c];
    std::span<double> x(raw.data() + i * p, p);
    for (std::size_t j = 0; j < p; ++j) x[j] = dgp_feature_is_binary(j) ? (coin(rng) ? 1.0 : 0.0) : normal(rng);
    const double u = normal(rng);
    const double latent = (s * u + normal(rng)) * latent_scale;
    const ComplianceType type = draw_type(spec, x, latent);
    out.type[i] = type;
    d[i] = type == ComplianceType::always_taker || (type == ComplianceType::complier && z[i] == 1.0) ? 1.0 : 0.0;
    out.tau_true[i] = tau_of(spec, x);
    const double error = spec.noise_sd * normal(rng) + s * u + cluster_shock[c];
    y[i] = outcome_of(x, out.tau_true[i], d[i], error);
  }
  double sum = 0.0;
  std::size_t compliers = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (out.type[i] == ComplianceType::complier) {
      sum += out.tau_true[i];
      ++compliers;
    }
  }
  out.late_true = compliers > 0 ? sum / static_cast<double>(compliers) : std::numeric_limits<double>::quiet_NaN();
  out.modifier = spec.tau_fn == TauFunction::bimodal && p > 1 ? 1 : 0;
  out.data = CausalDataset::build(dgp_schema(spec), std::move(raw), std::move(y), std::move(d), std::move(z),
                                  std::move(labels));
  return out;
}

// Ground truth sidecar: one row per observation.
inline void write_truth_csv(const SynthDataset& s, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << "tau_true,complier,type\n";
  for (std::size_t i = 0; i < s.tau_true.size(); ++i) {
    out << format_number(s.tau_true[i]) << ',' << (s.complier(i) ? 1 : 0) << ','
        << static_cast<int>(s.type[i]) << '\n';
  }
}

}  // namespace ivcf

#endif  // IVCF_DGP_HPP_
