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

#ifndef IVCF_HETEROGENEITY_HPP_
#define IVCF_HETEROGENEITY_HPP_

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ivcf/clate.hpp"
#include "ivcf/data.hpp"
#include "ivcf/error.hpp"

namespace ivcf {

// Regressors without the intercept column.
struct Design {
  Eigen::MatrixXd x;
  std::vector<std::string> names;
};

// Which level of a quantile-coded feature is omitted from the BLP design.
enum class ReferenceLevel { first, last };

inline std::size_t quantile_levels(const FeatureSpec& f) { return f.cutpoints.size() + 1; }

inline std::string level_name(const FeatureSpec& f, std::size_t level) {
  return f.name + ":q" + std::to_string(level);
}

// BLP design: binary features as-is, quantile-coded features as level
// dummies minus the reference level, continuous features raw.
inline Design blp_design(const CausalDataset& data, ReferenceLevel reference = ReferenceLevel::last) {
  std::vector<std::vector<double>> columns;
  Design d;
  const auto x = data.features();
  for (std::size_t j = 0; j < data.cols(); ++j) {
    const FeatureSpec& f = data.schema()[j];
    if (f.kind != FeatureKind::tercile) {
      std::vector<double> col(data.rows());
      for (std::size_t i = 0; i < data.rows(); ++i) col[i] = x(i, j);
      columns.push_back(std::move(col));
      d.names.push_back(f.name);
      continue;
    }
    const std::size_t levels = quantile_levels(f);
    const std::size_t omit = reference == ReferenceLevel::first ? 1 : levels;
    for (std::size_t level = 1; level <= levels; ++level) {
      if (level == omit) continue;
      std::vector<double> col(data.rows());
      for (std::size_t i = 0; i < data.rows(); ++i) col[i] = x(i, j) == static_cast<double>(level) ? 1.0 : 0.0;
      columns.push_back(std::move(col));
      d.names.push_back(level_name(f, level));
    }
  }
  d.x.resize(static_cast<Eigen::Index>(data.rows()), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    for (std::size_t i = 0; i < data.rows(); ++i) d.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = columns[c][i];
  }
  return d;
}

// CLAN modifiers: every level of a quantile-coded feature becomes its own
// indicator; binary and continuous features enter as-is.
inline Design clan_modifiers(const CausalDataset& data) {
  Design d;
  std::vector<std::vector<double>> columns;
  const auto x = data.features();
  for (std::size_t j = 0; j < data.cols(); ++j) {
    const FeatureSpec& f = data.schema()[j];
    if (f.kind != FeatureKind::tercile) {
      std::vector<double> col(data.rows());
      for (std::size_t i = 0; i < data.rows(); ++i) col[i] = x(i, j);
      columns.push_back(std::move(col));
      d.names.push_back(f.name);
      continue;
    }
    for (std::size_t level = 1; level <= quantile_levels(f); ++level) {
      std::vector<double> col(data.rows());
      for (std::size_t i = 0; i < data.rows(); ++i) col[i] = x(i, j) == static_cast<double>(level) ? 1.0 : 0.0;
      columns.push_back(std::move(col));
      d.names.push_back(level_name(f, level));
    }
  }
  d.x.resize(static_cast<Eigen::Index>(data.rows()), static_cast<Eigen::Index>(columns.size()));
  for (std::size_t c = 0; c < columns.size(); ++c) {
    for (std::size_t i = 0; i < data.rows(); ++i) d.x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = columns[c][i];
  }
  return d;
}

struct BlpResult {
  std::vector<std::string> names;  // "(Intercept)" first
  std::vector<double> coefficients;
  std::vector<double> se;
  std::vector<double> ci_low;
  std::vector<double> ci_high;
  std::size_t n = 0;
  std::size_t clusters = 0;

  double t_stat(std::size_t k) const { return coefficients[k] / se[k]; }
  std::size_t index_of(const std::string& name) const {
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw Error("no BLP coefficient named '" + name + "'");
    return static_cast<std::size_t>(it - names.begin());
  }
};

namespace detail {

inline std::vector<std::string> collinear_columns(const Eigen::MatrixXd& x, const std::vector<std::string>& names) {
  std::vector<std::string> out;
  Eigen::MatrixXd kept(x.rows(), 0);
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    Eigen::MatrixXd trial(x.rows(), kept.cols() + 1);
    trial << kept, x.col(c);
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(trial);
    qr.setThreshold(1e-10);
    if (qr.rank() == trial.cols()) {
      kept = trial;
    } else {
      out.push_back(names[static_cast<std::size_t>(c)]);
    }
  }
  return out;
}

}  // namespace detail

// OLS of the scores on [1, X] with cluster-robust (CR1) standard errors and
// normal 95% intervals. Singleton clusters give the HC1 estimator.
inline BlpResult blp(std::span<const double> gamma, const Design& design, std::span<const std::uint32_t> cluster) {
  const auto n = static_cast<Eigen::Index>(gamma.size());
  if (design.x.rows() != n || static_cast<Eigen::Index>(cluster.size()) != n) {
    throw SchemaError("BLP inputs differ in length");
  }
  const Eigen::Index k = design.x.cols() + 1;
  Eigen::MatrixXd x(n, k);
  x.col(0).setOnes();
  x.rightCols(design.x.cols()) = design.x;
  std::vector<std::string> names{"(Intercept)"};
  names.insert(names.end(), design.names.begin(), design.names.end());

  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  qr.setThreshold(1e-10);
  if (qr.rank() < k || n <= k) throw RankDeficiencyError(detail::collinear_columns(x, names));
  const Eigen::Map<const Eigen::VectorXd> y(gamma.data(), n);
  const Eigen::VectorXd beta = qr.solve(y);
  const Eigen::VectorXd u = y - x * beta;

  const Eigen::MatrixXd bread = (x.transpose() * x).inverse();
  std::uint32_t g = 0;
  for (std::uint32_t c : cluster) g = std::max(g, c + 1);
  Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(g, k);
  std::vector<char> seen(g, 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    scores.row(cluster[static_cast<std::size_t>(i)]) += u(i) * x.row(i);
    seen[cluster[static_cast<std::size_t>(i)]] = 1;
  }
  const auto groups = static_cast<double>(std::count(seen.begin(), seen.end(), 1));
  const Eigen::MatrixXd meat = scores.transpose() * scores;
  const double correction = groups / (groups - 1.0) * static_cast<double>(n - 1) / static_cast<double>(n - k);
  const Eigen::MatrixXd v = correction * bread * meat * bread;

  BlpResult r;
  r.names = std::move(names);
  r.n = static_cast<std::size_t>(n);
  r.clusters = static_cast<std::size_t>(groups);
  for (Eigen::Index c = 0; c < k; ++c) {
    const double se = std::sqrt(std::max(v(c, c), 0.0));
    r.coefficients.push_back(beta(c));
    r.se.push_back(se);
    r.ci_low.push_back(beta(c) - kNormal975 * se);
    r.ci_high.push_back(beta(c) + kNormal975 * se);
  }
  return r;
}

struct ClanRecord {
  std::string name;
  double mean_most = 0.0;
  double mean_least = 0.0;
  double diff = 0.0;
  double diff_se = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
};

struct ClanResult {
  std::vector<ClanRecord> records;
  std::size_t group_size = 0;
  // Score ties straddling a quartile boundary (resolved by row index).
  std::size_t boundary_ties = 0;
  std::vector<std::size_t> most;   // row indices, top quartile
  std::vector<std::size_t> least;  // row indices, bottom quartile
};

// Ranks rows by score (ties by row index); compares modifier means between
// the top quartile (most affected) and bottom quartile (least affected)
// with a Welch standard error on the difference.
inline ClanResult clan(std::span<const double> gamma, const Design& modifiers) {
  const std::size_t n = gamma.size();
  if (n < 8) throw Error("CLAN needs at least 8 observations");
  if (static_cast<std::size_t>(modifiers.x.rows()) != n) throw SchemaError("CLAN inputs differ in length");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return gamma[a] < gamma[b]; });
  ClanResult out;
  const std::size_t q = n / 4;
  out.group_size = q;
  out.least.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(q));
  out.most.assign(order.end() - static_cast<std::ptrdiff_t>(q), order.end());
  if (gamma[order[q - 1]] == gamma[order[q]]) ++out.boundary_ties;
  if (gamma[order[n - q - 1]] == gamma[order[n - q]]) ++out.boundary_ties;

  auto mean_var = [&](const std::vector<std::size_t>& rows, Eigen::Index col) {
    double mean = 0.0;
    for (std::size_t i : rows) mean += modifiers.x(static_cast<Eigen::Index>(i), col);
    mean /= static_cast<double>(rows.size());
    double ss = 0.0;
    for (std::size_t i : rows) {
      const double dlt = modifiers.x(static_cast<Eigen::Index>(i), col) - mean;
      ss += dlt * dlt;
    }
    return std::pair{mean, rows.size() > 1 ? ss / static_cast<double>(rows.size() - 1) : 0.0};
  };
  for (Eigen::Index c = 0; c < modifiers.x.cols(); ++c) {
    ClanRecord rec;
    rec.name = modifiers.names[static_cast<std::size_t>(c)];
    const auto [most_mean, most_var] = mean_var(out.most, c);
    const auto [least_mean, least_var] = mean_var(out.least, c);
    rec.mean_most = most_mean;
    rec.mean_least = least_mean;
    rec.diff = most_mean - least_mean;
    rec.diff_se = std::sqrt(most_var / static_cast<double>(q) + least_var / static_cast<double>(q));
    rec.ci_low = rec.diff - kNormal975 * rec.diff_se;
    rec.ci_high = rec.diff + kNormal975 * rec.diff_se;
    out.records.push_back(std::move(rec));
  }
  return out;
}

struct Histogram {
  std::vector<double> edges;  // bins + 1
  std::vector<std::size_t> counts;
  double late = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  double zero_line = 0.0;
};

// Equal-width bins over [min, max], last bin closed. A constant input gets
// one unit-width bin centered on the value.
inline Histogram clate_histogram(std::span<const double> tau, std::size_t bins, double late, double ci_low,
                                 double ci_high) {
  if (bins == 0) throw ConfigError("histogram needs at least one bin");
  if (tau.empty()) throw Error("histogram of an empty vector");
  Histogram h;
  h.late = late;
  h.ci_low = ci_low;
  h.ci_high = ci_high;
  const auto [lo_it, hi_it] = std::minmax_element(tau.begin(), tau.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    h.edges = {lo - 0.5, lo + 0.5};
    h.counts = {tau.size()};
    return h;
  }
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t b = 0; b <= bins; ++b) h.edges.push_back(b == bins ? hi : lo + width * static_cast<double>(b));
  h.counts.assign(bins, 0);
  for (double v : tau) {
    auto b = static_cast<std::size_t>(std::floor((v - lo) / width));
    ++h.counts[std::min(b, bins - 1)];
  }
  return h;
}

}  // namespace ivcf

#endif  // IVCF_HETEROGENEITY_HPP_
