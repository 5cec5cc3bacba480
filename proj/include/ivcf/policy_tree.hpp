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

#ifndef IVCF_POLICY_TREE_HPP_
#define IVCF_POLICY_TREE_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "ivcf/data.hpp"
#include "ivcf/error.hpp"
#include "ivcf/parallel.hpp"

namespace ivcf {

enum class Action : int { control = 0, treat = 1 };

struct PolicyNode {
  std::int32_t feature = -1;  // -1 marks a leaf
  double threshold = 0.0;
  std::uint32_t left = 0;
  std::uint32_t right = 0;
  Action action = Action::control;  // leaves only
  std::size_t count = 0;           // training rows reaching the node

  bool is_leaf() const { return feature < 0; }
};

// Axis-aligned treatment rule; x <= threshold goes left.
struct PolicyTree {
  std::vector<PolicyNode> nodes;  // nodes[0] is the root
  double value = 0.0;             // policy value on the training scores
  std::size_t max_depth = 2;

  Action act(std::span<const double> x) const {
    std::size_t k = 0;
    while (!nodes[k].is_leaf()) {
      k = x[static_cast<std::size_t>(nodes[k].feature)] <= nodes[k].threshold ? nodes[k].left : nodes[k].right;
    }
    return nodes[k].action;
  }
  std::vector<int> assign(FeatureMatrix x) const {
    std::vector<int> pi(x.rows);
    for (std::size_t i = 0; i < x.rows; ++i) pi[i] = static_cast<int>(act(x.row(i)));
    return pi;
  }
  std::size_t depth(std::size_t k = 0) const {
    if (nodes[k].is_leaf()) return 0;
    return 1 + std::max(depth(nodes[k].left), depth(nodes[k].right));
  }
};

// (1/N) sum_i (2 pi_i - 1) Gamma_i
inline double policy_value(std::span<const int> pi, std::span<const double> gamma) {
  if (pi.size() != gamma.size()) throw SchemaError("policy and scores differ in length");
  if (gamma.empty()) return 0.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < pi.size(); ++i) sum += (2.0 * pi[i] - 1.0) * gamma[i];
  return sum / static_cast<double>(gamma.size());
}

namespace detail {

struct PolicySplit {
  double reward = 0.0;  // sum over leaves of |score sum|
  bool split = false;
  std::size_t feature = 0;
  double threshold = 0.0;
};

class PolicySearch {
 public:
  PolicySearch(FeatureMatrix x, std::span<const double> gamma) : x_(x), gamma_(gamma) {
    order_.resize(x.cols);
    for (std::size_t f = 0; f < x.cols; ++f) {
      auto& o = order_[f];
      o.resize(x.rows);
      std::iota(o.begin(), o.end(), std::uint32_t{0});
      std::stable_sort(o.begin(), o.end(), [&](std::uint32_t a, std::uint32_t b) { return x(a, f) < x(b, f); });
    }
  }

  std::size_t cols() const { return x_.cols; }
  std::span<const std::uint32_t> order(std::size_t f) const { return order_[f]; }
  double value(std::size_t i, std::size_t f) const { return x_(i, f); }
  double score(std::size_t i) const { return gamma_[i]; }

  // Best split of `members` restricted to the given features, searching
  // depth levels below. Candidates are visited in (feature, threshold)
  // order and replace the incumbent only when strictly better, with the
  // unsplit leaf as the first incumbent.
  PolicySplit best(const std::vector<std::uint32_t>& members, std::size_t depth,
                   std::span<const std::size_t> features, std::vector<std::uint32_t>& stamp,
                   std::uint32_t& stamp_id) const {
    PolicySplit out;
    double total = 0.0, magnitude = 0.0;
    for (std::uint32_t i : members) {
      total += gamma_[i];
      magnitude += std::abs(gamma_[i]);
    }
    out.reward = std::abs(total);
    if (depth == 0 || members.size() < 2) return out;
    const double eps = 1e-12 * magnitude;

    for (std::size_t f : features) {
      const std::uint32_t id = ++stamp_id;
      for (std::uint32_t i : members) stamp[i] = id;
      if (depth == 1) {
        double left = 0.0;
        bool have_prev = false;
        double prev_value = 0.0;
        for (std::uint32_t i : order_[f]) {
          if (stamp[i] != id) continue;
          const double v = x_(i, f);
          if (have_prev && v != prev_value) {
            const double reward = std::abs(left) + std::abs(total - left);
            if (reward > out.reward + eps) {
              out = {reward, true, f, split_point(prev_value, v)};
            }
          }
          left += gamma_[i];
          prev_value = v;
          have_prev = true;
        }
        continue;
      }
      // Deeper levels: enumerate boundaries, recurse into both sides.
      std::vector<std::uint32_t> sorted;
      sorted.reserve(members.size());
      for (std::uint32_t i : order_[f]) {
        if (stamp[i] == id) sorted.push_back(i);
      }
      std::vector<std::uint32_t> left_members, right_members;
      for (std::size_t k = 0; k + 1 < sorted.size(); ++k) {
        const double v = x_(sorted[k], f);
        const double next = x_(sorted[k + 1], f);
        if (v == next) continue;
        left_members.assign(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(k + 1));
        right_members.assign(sorted.begin() + static_cast<std::ptrdiff_t>(k + 1), sorted.end());
        const double reward = best(left_members, depth - 1, all_features(), stamp, stamp_id).reward +
                              best(right_members, depth - 1, all_features(), stamp, stamp_id).reward;
        if (reward > out.reward + eps) out = {reward, true, f, split_point(v, next)};
      }
    }
    return out;
  }

  std::span<const std::size_t> all_features() const { return features_; }
  void set_features(std::size_t p) {
    features_.resize(p);
    std::iota(features_.begin(), features_.end(), std::size_t{0});
  }

 private:
  static double split_point(double lo, double hi) {
    const double mid = lo + (hi - lo) / 2.0;
    return (mid >= lo && mid < hi) ? mid : lo;
  }

  FeatureMatrix x_;
  std::span<const double> gamma_;
  std::vector<std::vector<std::uint32_t>> order_;
  std::vector<std::size_t> features_;
};

inline std::uint32_t build_policy_node(const PolicySearch& search, std::vector<PolicyNode>& nodes,
                                       const std::vector<std::uint32_t>& members, std::size_t depth,
                                       std::vector<std::uint32_t>& stamp, std::uint32_t& stamp_id,
                                       const PolicySplit* known = nullptr) {
  const PolicySplit split =
      known ? *known : search.best(members, depth, search.all_features(), stamp, stamp_id);
  const auto index = static_cast<std::uint32_t>(nodes.size());
  nodes.emplace_back();
  nodes[index].count = members.size();
  if (!split.split) {
    double total = 0.0;
    for (std::uint32_t i : members) total += search.score(i);
    nodes[index].action = total > 0.0 ? Action::treat : Action::control;
    return index;
  }
  std::vector<std::uint32_t> left, right;
  for (std::uint32_t i : members) {
    (search.value(i, split.feature) <= split.threshold ? left : right).push_back(i);
  }
  const std::uint32_t l = build_policy_node(search, nodes, left, depth - 1, stamp, stamp_id);
  const std::uint32_t r = build_policy_node(search, nodes, right, depth - 1, stamp, stamp_id);
  nodes[index].feature = static_cast<std::int32_t>(split.feature);
  nodes[index].threshold = split.threshold;
  nodes[index].left = l;
  nodes[index].right = r;
  return index;
}

}  // namespace detail

// Exhaustive search over axis-aligned trees of depth <= max_depth with
// thresholds at midpoints of adjacent observed values. Maximizes the
// policy value of (gamma - treatment_cost). The outer loop over root
// features runs in parallel; the reduction keeps the first best feature.
inline PolicyTree learn_policy_tree(FeatureMatrix x, std::span<const double> gamma, std::size_t max_depth = 2,
                                    double treatment_cost = 0.0, int threads = 0) {
  if (x.cols == 0) throw ConfigError("policy tree needs at least one feature");
  if (gamma.size() != x.rows || x.rows == 0) throw SchemaError("policy tree inputs differ in length or are empty");
  std::vector<double> scores(gamma.begin(), gamma.end());
  for (double& s : scores) s -= treatment_cost;

  detail::PolicySearch search(x, scores);
  search.set_features(x.cols);
  std::vector<std::uint32_t> members(x.rows);
  std::iota(members.begin(), members.end(), std::uint32_t{0});

  std::vector<detail::PolicySplit> per_feature(x.cols);
  if (max_depth > 0) {
    parallel_for(x.cols, threads, [&](std::size_t f) {
      std::vector<std::uint32_t> stamp(x.rows, 0);
      std::uint32_t stamp_id = 0;
      const std::size_t only[1] = {f};
      per_feature[f] = search.best(members, max_depth, only, stamp, stamp_id);
    });
  }
  detail::PolicySplit root;
  {
    double total = 0.0, magnitude = 0.0;
    for (double s : scores) {
      total += s;
      magnitude += std::abs(s);
    }
    root.reward = std::abs(total);
    const double eps = 1e-12 * magnitude;
    for (const auto& cand : per_feature) {
      if (cand.split && cand.reward > root.reward + eps) root = cand;
    }
  }

  PolicyTree tree;
  tree.max_depth = max_depth;
  std::vector<std::uint32_t> stamp(x.rows, 0);
  std::uint32_t stamp_id = 0;
  detail::build_policy_node(search, tree.nodes, members, max_depth, stamp, stamp_id, &root);
  tree.value = policy_value(tree.assign(x), scores);
  return tree;
}

inline PolicyTree learn_depth2(FeatureMatrix x, std::span<const double> gamma, double treatment_cost = 0.0,
                               int threads = 0) {
  return learn_policy_tree(x, gamma, 2, treatment_cost, threads);
}

}  // namespace ivcf

#endif  // IVCF_POLICY_TREE_HPP_
