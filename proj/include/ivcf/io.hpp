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

#ifndef IVCF_IO_HPP_
#define IVCF_IO_HPP_

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "ivcf/analysis.hpp"
#include "ivcf/clate.hpp"
#include "ivcf/data.hpp"
#include "ivcf/dgp.hpp"
#include "ivcf/error.hpp"
#include "ivcf/heterogeneity.hpp"
#include "ivcf/policy_tree.hpp"
#include "json.hpp"

namespace ivcf {

using json = nlohmann::json;

// Artifact schema tags; see docs/schemas.md.
inline constexpr const char* kResultsSchema = "ivcf.results/1";
inline constexpr const char* kBlpSchema = "ivcf.blp/1";
inline constexpr const char* kClanSchema = "ivcf.clan/1";
inline constexpr const char* kHistSchema = "ivcf.hist/1";
inline constexpr const char* kPolicySchema = "ivcf.policy_tree/1";

inline json to_json(const ForestParams& p) {
  return {{"num_trees", p.num_trees},
          {"tuning_trees", p.tuning_trees},
          {"subsample_fraction", p.subsample_fraction},
          {"honesty_fraction", p.honesty_fraction},
          {"min_node_size", p.min_node_size},
          {"mtry", p.mtry},
          {"ci_group_size", p.ci_group_size},
          {"seed", p.seed},
          {"tune", p.tune},
          {"tune_candidates", p.tune_candidates},
          {"weak_identification_floor", p.weak_identification_floor}};
}

inline ForestParams forest_params_from_json(const json& j, ForestParams p = {}) {
  if (!j.is_object()) throw ConfigError("forest settings must be a JSON object");
  auto count = [&](const char* key, std::size_t fallback) {
    if (!j.contains(key)) return fallback;
    if (!j.at(key).is_number_unsigned()) throw ConfigError(std::string("forest.") + key + " must be a nonnegative integer");
    return j.at(key).get<std::size_t>();
  };
  p.num_trees = count("num_trees", p.num_trees);
  p.tuning_trees = count("tuning_trees", p.tuning_trees);
  p.min_node_size = count("min_node_size", p.min_node_size);
  p.mtry = count("mtry", p.mtry);
  p.ci_group_size = count("ci_group_size", p.ci_group_size);
  p.tune_candidates = count("tune_candidates", p.tune_candidates);
  try {
    p.subsample_fraction = j.value("subsample_fraction", p.subsample_fraction);
    p.honesty_fraction = j.value("honesty_fraction", p.honesty_fraction);
    p.tune = j.value("tune", p.tune);
    p.weak_identification_floor = j.value("weak_identification_floor", p.weak_identification_floor);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("forest settings: ") + e.what());
  }
  return p;
}

inline json to_json(const FeatureSpec& f) {
  json j{{"name", f.name}, {"kind", to_string(f.kind)}, {"in_propensity", f.in_propensity}};
  if (!f.cutpoints.empty()) j["cutpoints"] = f.cutpoints;
  return j;
}

inline FeatureSpec feature_from_json(const json& j) {
  FeatureSpec f;
  f.name = j.at("name").get<std::string>();
  f.kind = parse_feature_kind(j.value("kind", std::string("continuous")));
  f.in_propensity = j.value("in_propensity", true);
  if (j.contains("cutpoints")) {
    if (f.kind != FeatureKind::tercile) throw SchemaError("cutpoints given for non-quantile feature '" + f.name + "'");
    f.cutpoints = j.at("cutpoints").get<std::vector<double>>();
  }
  return f;
}

inline json to_json(const BlpResult& r, ReferenceLevel reference) {
  json coefs = json::array();
  for (std::size_t k = 0; k < r.names.size(); ++k) {
    coefs.push_back({{"name", r.names[k]},
                     {"estimate", r.coefficients[k]},
                     {"se", r.se[k]},
                     {"ci_low", r.ci_low[k]},
                     {"ci_high", r.ci_high[k]}});
  }
  return {{"schema", kBlpSchema},
          {"n", r.n},
          {"clusters", r.clusters},
          {"reference_level", reference == ReferenceLevel::first ? "first" : "last"},
          {"coefficients", coefs}};
}

inline json to_json(const ClanResult& r) {
  json mods = json::array();
  for (const auto& m : r.records) {
    mods.push_back({{"name", m.name},
                    {"mean_most", m.mean_most},
                    {"mean_least", m.mean_least},
                    {"diff", m.diff},
                    {"diff_se", m.diff_se},
                    {"ci_low", m.ci_low},
                    {"ci_high", m.ci_high}});
  }
  return {{"schema", kClanSchema}, {"group_size", r.group_size}, {"boundary_ties", r.boundary_ties},
          {"modifiers", mods}};
}

inline json to_json(const Histogram& h) {
  return {{"schema", kHistSchema},
          {"edges", h.edges},
          {"counts", h.counts},
          {"markers", {{"late", h.late}, {"ci_low", h.ci_low}, {"ci_high", h.ci_high}, {"zero", h.zero_line}}}};
}

inline json policy_node_json(const PolicyTree& t, std::size_t k, const std::vector<FeatureSpec>& schema) {
  const PolicyNode& n = t.nodes[k];
  if (n.is_leaf()) return {{"action", n.action == Action::treat ? "treat" : "control"}, {"n", n.count}};
  const auto f = static_cast<std::size_t>(n.feature);
  return {{"feature", f < schema.size() ? schema[f].name : "x" + std::to_string(f + 1)},
          {"feature_index", f},
          {"threshold", n.threshold},
          {"n", n.count},
          {"left", policy_node_json(t, n.left, schema)},
          {"right", policy_node_json(t, n.right, schema)}};
}

inline json to_json(const PolicyTree& t, const std::vector<FeatureSpec>& schema) {
  return {{"schema", kPolicySchema},
          {"value", t.value},
          {"max_depth", t.max_depth},
          {"depth", t.depth()},
          {"tree", policy_node_json(t, 0, schema)}};
}

inline json to_json(const DgpSpec& s) {
  return {{"n", s.n},
          {"n_clusters", s.n_clusters},
          {"p", s.p},
          {"tau_fn", to_string(s.tau_fn)},
          {"tau_base", s.tau_base},
          {"tau_jump", s.tau_jump},
          {"tau_threshold", s.tau_threshold},
          {"tau_slope", s.tau_slope},
          {"compliance", to_string(s.compliance)},
          {"rate_z1", s.rate_z1},
          {"rate_z0", s.rate_z0},
          {"confounding_strength", s.confounding_strength},
          {"noise_sd", s.noise_sd},
          {"cluster_sd", s.cluster_sd},
          {"discretize", s.discretize},
          {"seed", s.seed}};
}

inline DgpSpec dgp_spec_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("DGP spec must be a JSON object");
  DgpSpec s;
  try {
    s.n = j.value("n", s.n);
    s.n_clusters = j.value("n_clusters", s.n_clusters);
    s.p = j.value("p", s.p);
    s.tau_fn = parse_tau_function(j.value("tau_fn", to_string(s.tau_fn)));
    s.tau_base = j.value("tau_base", s.tau_base);
    s.tau_jump = j.value("tau_jump", s.tau_jump);
    s.tau_threshold = j.value("tau_threshold", s.tau_threshold);
    s.tau_slope = j.value("tau_slope", s.tau_slope);
    s.compliance = parse_compliance_kind(j.value("compliance", to_string(s.compliance)));
    s.rate_z1 = j.value("rate_z1", s.rate_z1);
    s.rate_z0 = j.value("rate_z0", s.rate_z0);
    s.confounding_strength = j.value("confounding_strength", s.confounding_strength);
    s.noise_sd = j.value("noise_sd", s.noise_sd);
    s.cluster_sd = j.value("cluster_sd", s.cluster_sd);
    s.discretize = j.value("discretize", s.discretize);
    s.seed = j.value("seed", s.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("DGP spec: ") + e.what());
  }
  s.validate();
  return s;
}

inline void write_json(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << j.dump(2) << '\n';
}

inline json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("'" + path + "': " + e.what());
  }
}

// Nuisance flags, when given, are merged into the flag column.
inline void write_clates_csv(const ClateResult& c, const DrScores* scores, const std::string& path,
                             std::span<const std::uint32_t> nuisance_flags = {}) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  out << "row,tau_hat,se,gamma,flags\n";
  for (std::size_t i = 0; i < c.tau_hat.size(); ++i) {
    out << i + 1 << ',' << format_number(c.tau_hat[i]) << ',';
    if (std::isfinite(c.se[i])) out << format_number(c.se[i]);
    out << ',';
    if (scores) out << format_number(scores->gamma[i]);
    out << ',' << (c.flags[i] | (nuisance_flags.empty() ? 0u : nuisance_flags[i])) << '\n';
  }
}

// Reads the gamma column of a clates.csv export.
inline std::vector<double> read_scores_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string line;
  std::getline(in, line);
  const auto header = detail::split_csv_line(line);
  auto it = std::find_if(header.begin(), header.end(), [](const std::string& h) { return detail::trim(h) == "gamma"; });
  if (it == header.end()) throw SchemaError("'" + path + "' has no gamma column");
  const auto col = static_cast<std::size_t>(it - header.begin());
  std::vector<double> gamma;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    if (col >= cells.size() || detail::is_missing(cells[col])) throw ParseError("missing gamma", row);
    gamma.push_back(detail::parse_number(cells[col], "gamma", row));
  }
  return gamma;
}

struct ReportRow {
  std::string outcome;
  int year = 0;
  double late = 0.0;
  double se = 0.0;
};

inline std::string two_decimals(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

// LaTeX tabular, one "Year & Outcome & ATE & se" row per run, sorted by
// year (stable), with an \hline between years. Values use two decimals.
inline std::string format_report(std::vector<ReportRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) { return a.year < b.year; });
  std::string out = "\\begin{tabular}{l |rrr}\n  \\hline Year & Outcome & ATE & se \\\\ \n  \\hline\n";
  for (std::size_t k = 0; k < rows.size(); ++k) {
    if (k > 0 && rows[k].year != rows[k - 1].year) out += "\\hline \n";
    out += std::to_string(rows[k].year) + " & " + rows[k].outcome + " & " + two_decimals(rows[k].late) + " & " +
           two_decimals(rows[k].se) + " \\\\ \n";
  }
  out += "   \\hline\n\\end{tabular}\n";
  return out;
}

inline ReportRow report_row_from_results(const json& j) {
  if (j.value("schema", std::string()) != kResultsSchema) throw SchemaError("not a results.json artifact");
  ReportRow r;
  r.outcome = j.at("outcome").get<std::string>();
  r.year = j.at("year").get<int>();
  r.late = j.at("late").get<double>();
  r.se = j.at("se").get<double>();
  return r;
}

}  // namespace ivcf

#endif  // IVCF_IO_HPP_
