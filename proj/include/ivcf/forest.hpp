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

#ifndef IVCF_FOREST_HPP_
#define IVCF_FOREST_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ivcf/data.hpp"
#include "ivcf/error.hpp"
#include "ivcf/parallel.hpp"
#include "ivcf/random.hpp"

namespace ivcf {

enum class ForestMode { regression, causal, instrumental };

inline std::string to_string(ForestMode mode) {
  switch (mode) {
    case ForestMode::regression: return "regression";
    case ForestMode::causal: return "causal";
    case ForestMode::instrumental: return "instrumental";
  }
  return "regression";
}

inline ForestMode parse_forest_mode(std::string_view name) {
  if (name == "regression") return ForestMode::regression;
  if (name == "causal") return ForestMode::causal;
  if (name == "instrumental") return ForestMode::instrumental;
  throw ConfigError("unknown forest mode '" + std::string(name) + "'");
}

struct ForestParams {
  std::size_t num_trees = 2000;
  std::size_t tuning_trees = 200;
  double subsample_fraction = 0.5;
  // Share of each tree's subsample used to choose splits; the rest
  // populates the leaves.
  double honesty_fraction = 0.5;
  std::size_t min_node_size = 5;
  std::size_t mtry = 0;  // 0 resolves to ceil(sqrt(p))
  // Trees per little bag; 1 disables variance estimates.
  std::size_t ci_group_size = 2;
  std::uint64_t seed = 42;
  bool tune = true;
  std::size_t tune_candidates = 10;
  // Absolute floor on the local first-stage covariance.
  double weak_identification_floor = 1e-6;
  int threads = 0;
};

// Per-observation inputs to the forest: residualized outcome, treatment and
// instrument. Regression forests only read the outcome.
struct ForestTargets {
  std::vector<double> outcome;
  std::vector<double> treatment;
  std::vector<double> instrument;
};

struct TreeNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  // Leaf only: range into Tree::leaf_samples.
  std::uint32_t begin = 0;
  std::uint32_t end = 0;

  bool is_leaf() const { return feature < 0; }
};

// Weighted means of the local moment inputs over a leaf or a kernel.
struct LocalMoments {
  double y = 0.0, d = 0.0, z = 0.0, yz = 0.0, dz = 0.0;

  void add(double w, double yv, double dv, double zv) {
    y += w * yv;
    d += w * dv;
    z += w * zv;
    yz += w * yv * zv;
    dz += w * dv * zv;
  }
  void add(double w, const LocalMoments& m) {
    y += w * m.y;
    d += w * m.d;
    z += w * m.z;
    yz += w * m.yz;
    dz += w * m.dz;
  }
  double first_stage() const { return dz - d * z; }
  double reduced_form() const { return yz - y * z; }
};

struct Tree {
  std::vector<TreeNode> nodes;
  std::vector<std::uint32_t> leaf_samples;
  // Sorted, disjoint halves of the tree's subsample.
  std::vector<std::uint32_t> split_sample;
  std::vector<std::uint32_t> estimation_sample;
  // Derived from the above on growth and on load.
  std::vector<std::uint32_t> subsample;
  std::vector<LocalMoments> leaf_moments;  // indexed by node

  std::size_t leaf_of(std::span<const double> x) const {
    std::size_t k = 0;
    while (!nodes[k].is_leaf()) {
      const TreeNode& n = nodes[k];
      k = x[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right;
    }
    return k;
  }
  std::size_t leaf_size(std::size_t node) const { return nodes[node].end - nodes[node].begin; }
  std::span<const std::uint32_t> leaf(std::size_t node) const {
    return std::span<const std::uint32_t>(leaf_samples).subspan(nodes[node].begin, leaf_size(node));
  }
  bool in_bag(std::uint32_t i) const { return std::binary_search(subsample.begin(), subsample.end(), i); }
};

class Forest {
 public:
  ForestMode mode = ForestMode::regression;
  ForestParams params;
  std::size_t num_features = 0;
  std::vector<std::size_t> columns;  // feature columns eligible for splits
  std::vector<Tree> trees;
  ForestTargets targets;
  std::vector<std::uint32_t> cluster;

  std::size_t num_samples() const { return targets.outcome.size(); }

  // Rebuilds derived per-tree state (subsample union, leaf moments).
  void finalize() {
    for (Tree& t : trees) {
      t.subsample.clear();
      std::merge(t.split_sample.begin(), t.split_sample.end(), t.estimation_sample.begin(),
                 t.estimation_sample.end(), std::back_inserter(t.subsample));
      t.leaf_moments.assign(t.nodes.size(), LocalMoments{});
      for (std::size_t k = 0; k < t.nodes.size(); ++k) {
        if (!t.nodes[k].is_leaf() || t.leaf_size(k) == 0) continue;
        const double w = 1.0 / static_cast<double>(t.leaf_size(k));
        LocalMoments m;
        for (std::uint32_t i : t.leaf(k)) m.add(w, outcome(i), treatment(i), instrument(i));
        t.leaf_moments[k] = m;
      }
    }
  }

  double outcome(std::size_t i) const { return targets.outcome[i]; }
  double treatment(std::size_t i) const {
    return targets.treatment.empty() ? 0.0 : targets.treatment[i];
  }
  // A causal forest is an instrumental forest whose instrument is the
  // treatment itself.
  double instrument(std::size_t i) const {
    if (mode == ForestMode::causal) return targets.treatment[i];
    return targets.instrument.empty() ? 0.0 : targets.instrument[i];
  }
};

struct SparseWeights {
  std::vector<std::uint32_t> index;
  std::vector<double> weight;

  double sum() const { return std::accumulate(weight.begin(), weight.end(), 0.0); }
  double at(std::uint32_t i) const {
    auto it = std::lower_bound(index.begin(), index.end(), i);
    return it != index.end() && *it == i ? weight[static_cast<std::size_t>(it - index.begin())] : 0.0;
  }
};

struct ForestPrediction {
  double estimate = std::numeric_limits<double>::quiet_NaN();
  double variance = std::numeric_limits<double>::quiet_NaN();
  double first_stage = std::numeric_limits<double>::quiet_NaN();
  std::size_t trees = 0;
  bool weak = false;
};

namespace detail {

// Node-level pseudo-outcomes. Regression: centered outcomes. Instrumental:
// the influence of each sample on the local Wald solution,
// (z - zbar) * (y - ybar - (d - dbar) * tau). Returns false when the node
// cannot be split (no first-stage variation).
inline bool pseudo_outcomes(const Forest& f, std::span<const std::uint32_t> samples, std::vector<double>& rho,
                            double& z_mean) {
  const double n = static_cast<double>(samples.size());
  rho.resize(samples.size());
  double ybar = 0.0;
  for (std::uint32_t i : samples) ybar += f.outcome(i);
  ybar /= n;
  if (f.mode == ForestMode::regression) {
    for (std::size_t k = 0; k < samples.size(); ++k) rho[k] = f.outcome(samples[k]) - ybar;
    z_mean = 0.0;
    return true;
  }
  double dbar = 0.0, zbar = 0.0;
  for (std::uint32_t i : samples) {
    dbar += f.treatment(i);
    zbar += f.instrument(i);
  }
  dbar /= n;
  zbar /= n;
  double num = 0.0, den = 0.0;
  for (std::uint32_t i : samples) {
    const double zc = f.instrument(i) - zbar;
    num += zc * (f.outcome(i) - ybar);
    den += zc * (f.treatment(i) - dbar);
  }
  if (std::abs(den) <= 1e-10) return false;
  const double tau = num / den;
  for (std::size_t k = 0; k < samples.size(); ++k) {
    const std::uint32_t i = samples[k];
    rho[k] = (f.instrument(i) - zbar) * (f.outcome(i) - ybar - (f.treatment(i) - dbar) * tau);
  }
  z_mean = zbar;
  return true;
}

struct SplitScratch {
  std::vector<double> rho;
  std::vector<std::pair<double, std::uint32_t>> order;  // (value, slot)
  std::vector<std::size_t> candidates;
};

struct SplitChoice {
  bool found = false;
  std::size_t feature = 0;
  double threshold = 0.0;
};

inline double split_threshold(double lo, double hi) {
  const double mid = lo + (hi - lo) / 2.0;
  return (mid >= lo && mid < hi) ? mid : lo;
}

inline SplitChoice find_best_split(const Forest& f, FeatureMatrix x, std::span<const std::uint32_t> samples,
                                   std::size_t mtry, std::mt19937_64& rng, SplitScratch& s) {
  SplitChoice best;
  const std::size_t n = samples.size();
  const std::size_t min_child = f.params.min_node_size;
  if (n < 2 * min_child || n < 2) return best;
  double z_mean = 0.0;
  if (!pseudo_outcomes(f, samples, s.rho, z_mean)) return best;
  const bool needs_instrument_spread = f.mode != ForestMode::regression;

  double total_sq = 0.0;
  for (double r : s.rho) total_sq += r * r;
  double best_gain = 1e-12 * total_sq;
  if (!(best_gain > 0.0)) return best;

  s.candidates = f.columns;
  const std::size_t draws = std::min(mtry, s.candidates.size());
  for (std::size_t k = 0; k < draws; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, s.candidates.size() - 1);
    std::swap(s.candidates[k], s.candidates[pick(rng)]);
  }

  std::size_t total_high = 0;
  if (needs_instrument_spread) {
    for (std::uint32_t i : samples) total_high += f.instrument(i) > z_mean ? 1 : 0;
  }
  const std::size_t total_low = n - total_high;

  s.order.resize(n);
  for (std::size_t c = 0; c < draws; ++c) {
    const std::size_t feature = s.candidates[c];
    for (std::size_t k = 0; k < n; ++k) s.order[k] = {x(samples[k], feature), static_cast<std::uint32_t>(k)};
    std::sort(s.order.begin(), s.order.end());
    if (s.order.front().first == s.order.back().first) continue;

    double left_sum = 0.0;
    std::size_t left_high = 0;
    for (std::size_t k = 0; k + 1 < n; ++k) {
      const std::uint32_t slot = s.order[k].second;
      left_sum += s.rho[slot];
      if (needs_instrument_spread && f.instrument(samples[slot]) > z_mean) ++left_high;
      if (s.order[k].first == s.order[k + 1].first) continue;
      const std::size_t n_left = k + 1;
      const std::size_t n_right = n - n_left;
      if (n_left < min_child) continue;
      if (n_right < min_child) break;
      if (needs_instrument_spread) {
        const std::size_t left_low = n_left - left_high;
        if (left_high == 0 || left_low == 0 || total_high == left_high || total_low == left_low) continue;
      }
      const double right_sum = -left_sum;  // pseudo-outcomes sum to zero at the parent
      const double gain = left_sum * left_sum / static_cast<double>(n_left) +
                          right_sum * right_sum / static_cast<double>(n_right);
      // Gains equal up to rounding count as ties; the first candidate wins.
      if (gain > best_gain * (1.0 + 1e-10)) {
        best_gain = gain;
        best.found = true;
        best.feature = feature;
        best.threshold = split_threshold(s.order[k].first, s.order[k + 1].first);
      }
    }
  }
  return best;
}

// Draws `count` distinct elements of `pool` (partial Fisher-Yates).
inline std::vector<std::uint32_t> draw_without_replacement(std::vector<std::uint32_t> pool, std::size_t count,
                                                           std::mt19937_64& rng) {
  count = std::min(count, pool.size());
  for (std::size_t k = 0; k < count; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
    std::swap(pool[k], pool[pick(rng)]);
  }
  pool.resize(count);
  return pool;
}

inline std::size_t ceil_fraction(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
}

inline Tree grow_tree(const Forest& f, FeatureMatrix x, const std::vector<std::vector<std::uint32_t>>& members,
                      const std::vector<std::uint32_t>& clusters, std::size_t mtry, std::mt19937_64& rng) {
  Tree tree;
  // Honesty at cluster level: clusters are already in random order.
  const std::size_t k = clusters.size();
  std::size_t n_split = static_cast<std::size_t>(std::floor(f.params.honesty_fraction * static_cast<double>(k)));
  if (k >= 2) n_split = std::clamp<std::size_t>(n_split, 1, k - 1);
  for (std::size_t c = 0; c < k; ++c) {
    auto& dst = c < n_split ? tree.split_sample : tree.estimation_sample;
    dst.insert(dst.end(), members[clusters[c]].begin(), members[clusters[c]].end());
  }
  std::sort(tree.split_sample.begin(), tree.split_sample.end());
  std::sort(tree.estimation_sample.begin(), tree.estimation_sample.end());

  std::vector<std::uint32_t> work = tree.split_sample;
  struct Pending {
    std::uint32_t node, begin, end;
  };
  std::vector<Pending> stack;
  tree.nodes.emplace_back();
  stack.push_back({0, 0, static_cast<std::uint32_t>(work.size())});
  SplitScratch scratch;
  while (!stack.empty()) {
    const Pending p = stack.back();
    stack.pop_back();
    std::span<std::uint32_t> samples(work.data() + p.begin, p.end - p.begin);
    const SplitChoice split = find_best_split(f, x, samples, mtry, rng, scratch);
    if (!split.found) continue;
    auto mid = std::stable_partition(samples.begin(), samples.end(), [&](std::uint32_t i) {
      return x(i, split.feature) <= split.threshold;
    });
    const auto cut = p.begin + static_cast<std::uint32_t>(mid - samples.begin());
    const auto left = static_cast<std::uint32_t>(tree.nodes.size());
    tree.nodes.emplace_back();
    tree.nodes.emplace_back();
    TreeNode& node = tree.nodes[p.node];
    node.feature = static_cast<std::int32_t>(split.feature);
    node.threshold = split.threshold;
    node.left = left;
    node.right = left + 1;
    // Right first so the left subtree is expanded first.
    stack.push_back({left + 1, cut, p.end});
    stack.push_back({left, p.begin, cut});
  }

  // Populate leaves with the estimation half.
  std::vector<std::uint32_t> leaf_of(tree.estimation_sample.size());
  std::vector<std::uint32_t> counts(tree.nodes.size() + 1, 0);
  for (std::size_t k2 = 0; k2 < tree.estimation_sample.size(); ++k2) {
    leaf_of[k2] = static_cast<std::uint32_t>(tree.leaf_of(x.row(tree.estimation_sample[k2])));
    ++counts[leaf_of[k2] + 1];
  }
  std::partial_sum(counts.begin(), counts.end(), counts.begin());
  tree.leaf_samples.resize(tree.estimation_sample.size());
  std::vector<std::uint32_t> cursor(counts.begin(), counts.end() - 1);
  for (std::size_t k2 = 0; k2 < tree.estimation_sample.size(); ++k2) {
    tree.leaf_samples[cursor[leaf_of[k2]]++] = tree.estimation_sample[k2];
  }
  for (std::size_t node = 0; node < tree.nodes.size(); ++node) {
    if (tree.nodes[node].is_leaf()) {
      tree.nodes[node].begin = counts[node];
      tree.nodes[node].end = counts[node + 1];
    }
  }
  return tree;
}

inline std::vector<std::vector<std::uint32_t>> cluster_members(std::span<const std::uint32_t> cluster) {
  std::uint32_t k = 0;
  for (std::uint32_t c : cluster) k = std::max(k, c + 1);
  std::vector<std::vector<std::uint32_t>> members(k);
  for (std::size_t i = 0; i < cluster.size(); ++i) members[cluster[i]].push_back(static_cast<std::uint32_t>(i));
  return members;
}

inline void validate(const ForestParams& p, std::size_t n, std::size_t num_columns) {
  if (p.num_trees == 0) throw ConfigError("num_trees must be positive");
  if (p.tuning_trees == 0) throw ConfigError("tuning_trees must be positive");
  if (!(p.subsample_fraction > 0.0 && p.subsample_fraction <= 1.0)) {
    throw ConfigError("subsample_fraction must lie in (0, 1]");
  }
  if (!(p.honesty_fraction > 0.0 && p.honesty_fraction < 1.0)) {
    throw ConfigError("honesty_fraction must lie in (0, 1)");
  }
  if (p.min_node_size == 0) throw ConfigError("min_node_size must be positive");
  if (p.ci_group_size == 0) throw ConfigError("ci_group_size must be positive");
  if (p.ci_group_size > 1 && p.subsample_fraction > 0.5) {
    throw ConfigError("subsample_fraction must be at most 0.5 when ci_group_size > 1");
  }
  if (p.num_trees % p.ci_group_size != 0) throw ConfigError("num_trees must be a multiple of ci_group_size");
  if (num_columns == 0) throw ConfigError("forest needs at least one feature column");
  if (p.mtry > num_columns) throw ConfigError("mtry exceeds the number of feature columns");
  if (n < 2 * p.min_node_size) {
    throw CapacityError("need at least 2*min_node_size = " + std::to_string(2 * p.min_node_size) +
                        " observations, got " + std::to_string(n));
  }
}

}  // namespace detail

inline std::size_t resolved_mtry(const ForestParams& p, std::size_t num_columns) {
  if (p.mtry > 0) return p.mtry;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(num_columns)))));
}

// Grows num_trees honest trees. Subsampling is by cluster: each little bag
// of ci_group_size trees shares a half-sample of clusters, and each tree
// draws ceil(subsample_fraction * K) of the K clusters from it. Tree t uses
// RNG streams derived from (seed, t) only.
inline Forest grow_forest(FeatureMatrix x, std::span<const std::uint32_t> cluster, ForestTargets targets,
                          ForestMode mode, const ForestParams& params, std::vector<std::size_t> columns = {}) {
  const std::size_t n = x.rows;
  if (columns.empty()) {
    columns.resize(x.cols);
    std::iota(columns.begin(), columns.end(), std::size_t{0});
  }
  detail::validate(params, n, columns.size());
  if (targets.outcome.size() != n || cluster.size() != n) throw SchemaError("forest inputs differ in length");
  if (mode != ForestMode::regression && targets.treatment.size() != n) {
    throw SchemaError("causal and instrumental forests need treatment residuals");
  }
  if (mode == ForestMode::instrumental && targets.instrument.size() != n) {
    throw SchemaError("instrumental forests need instrument residuals");
  }
  if (mode == ForestMode::causal) targets.instrument.clear();
  if (mode == ForestMode::regression) {
    targets.treatment.clear();
    targets.instrument.clear();
  }

  Forest f;
  f.mode = mode;
  f.params = params;
  f.params.mtry = resolved_mtry(params, columns.size());
  f.num_features = x.cols;
  f.columns = std::move(columns);
  f.targets = std::move(targets);
  f.cluster.assign(cluster.begin(), cluster.end());

  const auto members = detail::cluster_members(cluster);
  const std::size_t num_clusters = members.size();
  std::vector<std::uint32_t> all_clusters;
  for (std::uint32_t c = 0; c < num_clusters; ++c) {
    if (!members[c].empty()) all_clusters.push_back(c);
  }
  const std::size_t k = all_clusters.size();
  const std::size_t group = f.params.ci_group_size;
  const std::size_t per_tree = std::max<std::size_t>(1, detail::ceil_fraction(f.params.subsample_fraction, k));
  const std::size_t per_group = group > 1 ? std::max(per_tree, detail::ceil_fraction(0.5, k)) : k;

  f.trees.resize(f.params.num_trees);
  parallel_for(f.params.num_trees / group, f.params.threads, [&](std::size_t g) {
    auto group_rng = make_rng(f.params.seed, 2 * g);
    auto half = detail::draw_without_replacement(all_clusters, per_group, group_rng);
    for (std::size_t j = 0; j < group; ++j) {
      const std::size_t t = g * group + j;
      auto tree_rng = make_rng(f.params.seed, 2 * t + 1 + 0x100000);
      auto drawn = detail::draw_without_replacement(half, per_tree, tree_rng);
      f.trees[t] = detail::grow_tree(f, x, members, drawn, f.params.mtry, tree_rng);
    }
  });
  f.finalize();
  return f;
}

inline Forest grow_forest(const CausalDataset& data, ForestTargets targets, ForestMode mode,
                          const ForestParams& params, std::vector<std::size_t> columns = {}) {
  return grow_forest(data.features(), data.cluster(), std::move(targets), mode, params, std::move(columns));
}

// alpha_i(x): the average over admissible trees of 1{i shares x's leaf} /
// |leaf|. With exclude = j only trees whose subsample excludes j count.
// Trees whose leaf for x holds no estimation samples are skipped.
inline SparseWeights weights_at(const Forest& f, std::span<const double> x,
                                std::optional<std::size_t> exclude = std::nullopt) {
  if (f.trees.empty()) throw Error("forest has no trees");
  std::vector<std::pair<std::uint32_t, double>> entries;
  std::size_t used = 0;
  for (const Tree& t : f.trees) {
    if (exclude && t.in_bag(static_cast<std::uint32_t>(*exclude))) continue;
    const std::size_t leaf = t.leaf_of(x);
    const std::size_t size = t.leaf_size(leaf);
    if (size == 0) continue;
    ++used;
    const double w = 1.0 / static_cast<double>(size);
    for (std::uint32_t i : t.leaf(leaf)) entries.emplace_back(i, w);
  }
  if (used == 0) {
    if (exclude) throw NoOobTreesError(*exclude);
    throw Error("no tree places the query in a nonempty leaf");
  }
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  SparseWeights out;
  const double scale = 1.0 / static_cast<double>(used);
  for (const auto& [i, w] : entries) {
    if (!out.index.empty() && out.index.back() == i) {
      out.weight.back() += w * scale;
    } else {
      out.index.push_back(i);
      out.weight.push_back(w * scale);
    }
  }
  return out;
}

// Moments of the forest targets under a weight vector.
inline LocalMoments moments_under(const Forest& f, const SparseWeights& w) {
  LocalMoments m;
  for (std::size_t k = 0; k < w.index.size(); ++k) {
    const std::uint32_t i = w.index[k];
    m.add(w.weight[k], f.outcome(i), f.treatment(i), f.instrument(i));
  }
  return m;
}

namespace detail {

// Posterior mean of a nonnegative between-group variance under a flat
// prior, given its noisy unbiased estimate.
inline double debias_variance(double var_between, double group_noise, double num_good_groups) {
  const double initial = var_between - group_noise;
  const double initial_se = std::max(var_between, group_noise) * std::sqrt(2.0 / num_good_groups);
  if (!(initial_se > 0.0)) return std::max(initial, 0.0);
  const double ratio = initial / initial_se;
  const double numerator = std::exp(-ratio * ratio / 2.0) / std::sqrt(2.0 * M_PI);
  const double denominator = 0.5 * std::erfc(-ratio / std::sqrt(2.0));
  if (!(denominator > 0.0)) return 0.0;
  return initial + initial_se * numerator / denominator;
}

}  // namespace detail

// Point estimate from the forest kernel at x plus the little-bags variance.
// Averaging per-tree leaf moments equals the moments under weights_at.
inline ForestPrediction predict_at(const Forest& f, std::span<const double> x,
                                   std::optional<std::size_t> exclude = std::nullopt) {
  ForestPrediction out;
  const std::size_t group = f.params.ci_group_size;
  const std::size_t num_groups = f.trees.size() / group;
  std::vector<const LocalMoments*> leaves(f.trees.size(), nullptr);
  LocalMoments avg;
  std::size_t used = 0;
  for (std::size_t t = 0; t < f.trees.size(); ++t) {
    const Tree& tree = f.trees[t];
    if (exclude && tree.in_bag(static_cast<std::uint32_t>(*exclude))) continue;
    const std::size_t leaf = tree.leaf_of(x);
    if (tree.leaf_size(leaf) == 0) continue;
    leaves[t] = &tree.leaf_moments[leaf];
    avg.add(1.0, tree.leaf_moments[leaf]);
    ++used;
  }
  out.trees = used;
  if (used == 0) return out;
  const double inv = 1.0 / static_cast<double>(used);
  LocalMoments mean;
  mean.add(inv, avg);

  double estimate = 0.0;
  if (f.mode == ForestMode::regression) {
    estimate = mean.y;
  } else {
    out.first_stage = mean.first_stage();
    if (!(std::abs(out.first_stage) >= f.params.weak_identification_floor)) {
      out.weak = true;
      return out;
    }
    estimate = mean.reduced_form() / out.first_stage;
  }
  out.estimate = estimate;
  if (group < 2) return out;

  // Bootstrap of little bags: compare between-group to within-group spread
  // of per-tree estimating-equation contributions.
  const double main_effect = mean.y - mean.d * estimate;
  double s11 = 0, s12 = 0, s22 = 0, g11 = 0, g12 = 0, g22 = 0;
  std::size_t good = 0;
  for (std::size_t g = 0; g < num_groups; ++g) {
    bool complete = true;
    for (std::size_t j = 0; j < group; ++j) complete = complete && leaves[g * group + j] != nullptr;
    if (!complete) continue;
    ++good;
    double gp1 = 0.0, gp2 = 0.0;
    for (std::size_t j = 0; j < group; ++j) {
      const LocalMoments& m = *leaves[g * group + j];
      double p1, p2;
      if (f.mode == ForestMode::regression) {
        p1 = m.y - estimate;
        p2 = 0.0;
      } else {
        p1 = m.yz - m.dz * estimate - m.z * main_effect;
        p2 = m.y - m.d * estimate - main_effect;
      }
      s11 += p1 * p1;
      s12 += p1 * p2;
      s22 += p2 * p2;
      gp1 += p1;
      gp2 += p2;
    }
    gp1 /= static_cast<double>(group);
    gp2 /= static_cast<double>(group);
    g11 += gp1 * gp1;
    g12 += gp1 * gp2;
    g22 += gp2 * gp2;
  }
  if (good < 2) return out;
  const double total = static_cast<double>(good * group);
  const double groups = static_cast<double>(good);
  double var_between, var_total;
  if (f.mode == ForestMode::regression) {
    var_between = g11 / groups;
    var_total = s11 / total;
  } else {
    const double zbar = mean.z;
    const double scale = 1.0 / (out.first_stage * out.first_stage);
    var_between = scale * (g11 / groups - 2.0 * zbar * g12 / groups + zbar * zbar * g22 / groups);
    var_total = scale * (s11 / total - 2.0 * zbar * s12 / total + zbar * zbar * s22 / total);
  }
  const double group_noise = (var_total - var_between) / static_cast<double>(group - 1);
  out.variance = detail::debias_variance(var_between, group_noise, groups);
  return out;
}

// Out-of-bag predictions for the training rows (x must be the training
// feature matrix).
inline std::vector<ForestPrediction> predict_oob(const Forest& f, FeatureMatrix x) {
  if (x.rows != f.num_samples()) throw SchemaError("out-of-bag prediction needs the training rows");
  std::vector<ForestPrediction> out(x.rows);
  parallel_for(x.rows, f.params.threads, [&](std::size_t i) { out[i] = predict_at(f, x.row(i), i); });
  return out;
}

inline std::vector<ForestPrediction> predict(const Forest& f, FeatureMatrix x) {
  if (x.cols != f.num_features) throw SchemaError("query feature count differs from training");
  std::vector<ForestPrediction> out(x.rows);
  parallel_for(x.rows, f.params.threads, [&](std::size_t i) { out[i] = predict_at(f, x.row(i)); });
  return out;
}

struct TuningResult {
  ForestParams params;
  std::vector<double> objective;  // per candidate, candidate 0 = the defaults
};

// Random search over {min_node_size, mtry, subsample_fraction}, each
// candidate scored on a tuning_trees pilot forest by an out-of-bag loss:
// squared error for regression, squared instrument-weighted moment
// residual z * (y - d * tau) otherwise.
inline TuningResult tune_forest(FeatureMatrix x, std::span<const std::uint32_t> cluster, const ForestTargets& targets,
                                ForestMode mode, const ForestParams& params, std::vector<std::size_t> columns = {}) {
  if (columns.empty()) {
    columns.resize(x.cols);
    std::iota(columns.begin(), columns.end(), std::size_t{0});
  }
  auto rng = make_rng(role_seed(params.seed, SeedRole::tuning), 0);
  const double max_fraction = params.ci_group_size > 1 ? 0.5 : 1.0;
  std::vector<ForestParams> candidates{params};
  for (std::size_t c = 1; c < params.tune_candidates; ++c) {
    ForestParams p = params;
    const std::size_t max_node = std::max<std::size_t>(1, std::min<std::size_t>(x.rows / 8, 50));
    p.min_node_size = std::uniform_int_distribution<std::size_t>(1, max_node)(rng);
    p.mtry = std::uniform_int_distribution<std::size_t>(1, columns.size())(rng);
    p.subsample_fraction = std::uniform_real_distribution<double>(0.05, max_fraction)(rng);
    candidates.push_back(p);
  }
  TuningResult result;
  double best = std::numeric_limits<double>::infinity();
  result.params = params;
  for (const ForestParams& candidate : candidates) {
    ForestParams pilot = candidate;
    pilot.num_trees = params.tuning_trees - params.tuning_trees % params.ci_group_size;
    if (pilot.num_trees == 0) pilot.num_trees = params.ci_group_size;
    double loss = std::numeric_limits<double>::infinity();
    try {
      const Forest f = grow_forest(x, cluster, targets, mode, pilot, columns);
      const auto pred = predict_oob(f, x);
      double sum = 0.0;
      std::size_t used = 0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!std::isfinite(pred[i].estimate)) continue;
        double r;
        if (mode == ForestMode::regression) {
          r = f.outcome(i) - pred[i].estimate;
        } else {
          r = f.instrument(i) * (f.outcome(i) - f.treatment(i) * pred[i].estimate);
        }
        sum += r * r;
        ++used;
      }
      if (used > 0) loss = sum / static_cast<double>(used);
    } catch (const CapacityError&) {
    }
    result.objective.push_back(loss);
    if (loss < best) {
      best = loss;
      result.params = candidate;
    }
  }
  result.params.tune = false;
  return result;
}

}  // namespace ivcf

#endif  // IVCF_FOREST_HPP_
