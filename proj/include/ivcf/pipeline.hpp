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

#ifndef IVCF_PIPELINE_HPP_
#define IVCF_PIPELINE_HPP_

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ivcf/analysis.hpp"
#include "ivcf/io.hpp"

#ifndef IVCF_VERSION
#define IVCF_VERSION "1.0.0"
#endif

namespace ivcf {

namespace fs = std::filesystem;

inline constexpr const char* kVersion = IVCF_VERSION;

struct RunConfig {
  std::string dataset;  // resolved against the config file's directory
  ColumnMap columns;
  std::vector<FeatureSpec> features;
  std::size_t quantiles = 3;
  AnalysisOptions analysis;
  bool write_clates = true;
  std::string outcome_label;
  int year = 0;
  std::string output = "out";
  std::uint64_t seed = 0;
};

namespace detail {

inline std::string resolve_path(const std::string& path, const fs::path& base) {
  if (path.empty()) return path;
  const fs::path p(path);
  return p.is_absolute() || base.empty() ? p.string() : (base / p).lexically_normal().string();
}

template <typename T>
T get_checked(const json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config field '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j, const fs::path& base = {}) {
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  RunConfig c;
  if (!j.contains("seed")) throw ConfigError("config field 'seed' is mandatory");
  c.seed = detail::get_checked<std::uint64_t>(j, "seed", 0);
  if (!j.contains("dataset")) throw ConfigError("config field 'dataset' is mandatory");
  c.dataset = detail::resolve_path(j.at("dataset").get<std::string>(), base);
  if (j.contains("columns")) {
    const json& cols = j.at("columns");
    c.columns.outcome = detail::get_checked(cols, "outcome", c.columns.outcome);
    c.columns.treatment = detail::get_checked(cols, "treatment", c.columns.treatment);
    c.columns.instrument = detail::get_checked(cols, "instrument", c.columns.instrument);
    c.columns.cluster = detail::get_checked(cols, "cluster", c.columns.cluster);
  }
  if (!j.contains("features") || !j.at("features").is_array() || j.at("features").empty()) {
    throw ConfigError("config field 'features' must be a non-empty array");
  }
  for (const auto& f : j.at("features")) {
    try {
      c.features.push_back(feature_from_json(f));
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config field 'features': ") + e.what());
    } catch (const SchemaError& e) {
      throw ConfigError(std::string("config field 'features': ") + e.what());
    }
  }
  c.quantiles = detail::get_checked<std::size_t>(j, "quantiles", c.quantiles);

  AnalysisOptions& a = c.analysis;
  a.mode = parse_forest_mode(detail::get_checked<std::string>(j, "mode", "instrumental"));
  if (j.contains("forest")) a.forest = forest_params_from_json(j.at("forest"), a.forest);
  a.forest.seed = c.seed;
  if (j.contains("nuisance")) {
    const json& n = j.at("nuisance");
    a.nuisance.propensity_low = detail::get_checked(n, "propensity_low", a.nuisance.propensity_low);
    a.nuisance.propensity_high = detail::get_checked(n, "propensity_high", a.nuisance.propensity_high);
    a.nuisance.compliance_floor = detail::get_checked(n, "compliance_floor", a.nuisance.compliance_floor);
    a.nuisance.instrument_uses_propensity_features = detail::get_checked(
        n, "instrument_uses_propensity_features", a.nuisance.instrument_uses_propensity_features);
    a.nuisance.num_trees = detail::get_checked(n, "num_trees", a.nuisance.num_trees);
    a.nuisance.tune = detail::get_checked(n, "tune", a.nuisance.tune);
  }
  if (j.contains("analyses")) {
    const json& t = j.at("analyses");
    c.write_clates = detail::get_checked(t, "clates", c.write_clates);
    a.blp = detail::get_checked(t, "blp", a.blp);
    a.clan = detail::get_checked(t, "clan", a.clan);
    a.policy_tree = detail::get_checked(t, "policy_tree", a.policy_tree);
    a.histogram = detail::get_checked(t, "histogram", a.histogram);
  }
  a.histogram_bins = detail::get_checked(j, "histogram_bins", a.histogram_bins);
  a.policy_depth = detail::get_checked(j, "policy_depth", a.policy_depth);
  a.treatment_cost = detail::get_checked(j, "treatment_cost", a.treatment_cost);
  const auto ref = detail::get_checked<std::string>(j, "reference_level", "last");
  if (ref != "first" && ref != "last") throw ConfigError("reference_level must be 'first' or 'last'");
  a.reference = ref == "first" ? ReferenceLevel::first : ReferenceLevel::last;
  if (j.contains("label")) {
    c.outcome_label = detail::get_checked<std::string>(j.at("label"), "outcome", "");
    c.year = detail::get_checked<int>(j.at("label"), "year", 0);
  }
  if (c.outcome_label.empty()) c.outcome_label = c.columns.outcome;
  c.output = detail::resolve_path(detail::get_checked<std::string>(j, "output", c.output), base);
  return c;
}

// A config file holds one run, or {"runs": [...]} with the remaining
// top-level keys as shared defaults for each run.
inline std::vector<RunConfig> load_run_configs(const std::string& path) {
  const json j = read_json(path);
  const fs::path base = fs::path(path).parent_path();
  if (!j.contains("runs")) return {parse_run_config(j, base)};
  if (!j.at("runs").is_array()) throw ConfigError("'runs' must be an array");
  json shared = j;
  shared.erase("runs");
  std::vector<RunConfig> out;
  for (const auto& run : j.at("runs")) {
    json merged = shared;
    merged.merge_patch(run);
    out.push_back(parse_run_config(merged, base));
  }
  return out;
}

// Every default materialized, for the manifest.
inline json to_json(const RunConfig& c) {
  json features = json::array();
  for (const auto& f : c.features) features.push_back(to_json(f));
  const AnalysisOptions& a = c.analysis;
  return {{"dataset", c.dataset},
          {"columns",
           {{"outcome", c.columns.outcome},
            {"treatment", c.columns.treatment},
            {"instrument", c.columns.instrument},
            {"cluster", c.columns.cluster}}},
          {"features", features},
          {"quantiles", c.quantiles},
          {"mode", to_string(a.mode)},
          {"forest", to_json(a.forest)},
          {"nuisance",
           {{"propensity_low", a.nuisance.propensity_low},
            {"propensity_high", a.nuisance.propensity_high},
            {"compliance_floor", a.nuisance.compliance_floor},
            {"instrument_uses_propensity_features", a.nuisance.instrument_uses_propensity_features},
            {"num_trees", resolved_nuisance_trees(a.forest, a.nuisance)},
            {"tune", a.nuisance.tune}}},
          {"analyses",
           {{"clates", c.write_clates},
            {"blp", a.blp},
            {"clan", a.clan},
            {"policy_tree", a.policy_tree},
            {"histogram", a.histogram}}},
          {"histogram_bins", a.histogram_bins},
          {"policy_depth", a.policy_depth},
          {"treatment_cost", a.treatment_cost},
          {"reference_level", a.reference == ReferenceLevel::first ? "first" : "last"},
          {"label", {{"outcome", c.outcome_label}, {"year", c.year}}},
          {"output", c.output},
          {"seed", c.seed}};
}

inline CausalDataset load_dataset(const RunConfig& c) {
  return detail::run_stage("load", [&] { return load_csv(c.dataset, c.features, c.columns, c.quantiles); });
}

inline json results_json(const RunConfig& c, const CausalDataset& data, const AnalysisResult& r) {
  const ComplianceSummary comp = data.compliance();
  return {{"schema", kResultsSchema},
          {"outcome", c.outcome_label},
          {"year", c.year},
          {"late", r.scores.late},
          {"se", r.scores.late_se},
          {"ci_low", r.scores.ci_low()},
          {"ci_high", r.scores.ci_high()},
          {"n", data.rows()},
          {"dropped_rows", data.dropped_rows()},
          {"clusters", data.num_clusters()},
          {"seed", c.seed},
          {"mode", to_string(c.analysis.mode)},
          {"compliance",
           {{"treated_given_offer", comp.treated_given_offer()},
            {"treated_given_no_offer", comp.treated_given_no_offer()},
            {"first_stage", comp.first_stage()}}},
          {"nuisance",
           {{"treatment_propensity_clamped", r.nuisances.e_clamped},
            {"instrument_propensity_clamped", r.nuisances.g_clamped},
            {"compliance_floored", r.nuisances.delta_flagged},
            {"outcome_residual_mean", r.outcome_residual.mean},
            {"treatment_residual_mean", r.treatment_residual.mean},
            {"instrument_residual_mean", r.instrument_residual.mean}}},
          {"clates",
           {{"weak_identification", r.clates.weak_count},
            {"missing_se", r.clates.missing_se_count},
            {"forest", to_json(r.clates.params)}}}};
}

struct PipelineOutput {
  std::string directory;
  std::vector<std::string> artifacts;  // file names within directory
  AnalysisResult analysis;
  json results;
};

// Written files are removed again if any later step fails.
class ArtifactWriter {
 public:
  explicit ArtifactWriter(fs::path dir) : dir_(std::move(dir)) {
    created_dir_ = !fs::exists(dir_);
    fs::create_directories(dir_);
  }
  ArtifactWriter(const ArtifactWriter&) = delete;
  ArtifactWriter& operator=(const ArtifactWriter&) = delete;
  ~ArtifactWriter() {
    if (committed_) return;
    std::error_code ec;
    for (const auto& name : written_) fs::remove(dir_ / name, ec);
    if (created_dir_ && fs::is_empty(dir_, ec)) fs::remove(dir_, ec);
  }

  std::string path(const std::string& name) {
    written_.push_back(name);
    return (dir_ / name).string();
  }
  void json_file(const std::string& name, const json& j) { write_json(j, path(name)); }
  const std::vector<std::string>& written() const { return written_; }
  void commit() { committed_ = true; }

 private:
  fs::path dir_;
  std::vector<std::string> written_;
  bool created_dir_ = false;
  bool committed_ = false;
};

// Re-reads a run directory and checks that every artifact agrees on N and
// echoes the seed.
inline void verify_artifacts(const std::string& dir) {
  const fs::path d(dir);
  const json results = read_json((d / "results.json").string());
  const auto n = results.at("n").get<std::size_t>();
  const auto seed = results.at("seed").get<std::uint64_t>();
  auto check = [&](const char* name, std::size_t got_n, std::uint64_t got_seed) {
    if (got_n != n) throw StageError("verify", std::string(name) + " disagrees on N");
    if (got_seed != seed) throw StageError("verify", std::string(name) + " disagrees on the seed");
  };
  for (const char* name : {"blp.json", "clan.json", "hist.json", "policy_tree.json", "manifest.json"}) {
    if (!fs::exists(d / name)) continue;
    const json j = read_json((d / name).string());
    check(name, j.at("n").get<std::size_t>(), j.at("seed").get<std::uint64_t>());
  }
  if (fs::exists(d / "hist.json")) {
    const json hist = read_json((d / "hist.json").string());
    std::size_t total = 0;
    for (const auto& c : hist.at("counts")) total += c.get<std::size_t>();
    if (total != n) throw StageError("verify", "hist.json counts do not sum to N");
  }
  if (fs::exists(d / "clates.csv")) {
    if (read_scores_csv((d / "clates.csv").string()).size() != n) {
      throw StageError("verify", "clates.csv row count disagrees on N");
    }
  }
}

inline PipelineOutput run_pipeline(const RunConfig& c, const CausalDataset& data) {
  PipelineOutput out;
  out.directory = c.output;
  ArtifactWriter writer(c.output);
  out.analysis = run_analysis(data, c.analysis);
  const AnalysisResult& r = out.analysis;
  const std::size_t n = data.rows();
  auto stamp = [&](json j) {
    j["n"] = n;
    j["seed"] = c.seed;
    return j;
  };
  detail::run_stage("write", [&] {
    out.results = results_json(c, data, r);
    writer.json_file("results.json", out.results);
    if (c.write_clates) write_clates_csv(r.clates, &r.scores, writer.path("clates.csv"), r.nuisances.flags);
    if (r.blp) writer.json_file("blp.json", stamp(to_json(*r.blp, c.analysis.reference)));
    if (r.clan) writer.json_file("clan.json", stamp(to_json(*r.clan)));
    if (r.histogram) writer.json_file("hist.json", stamp(to_json(*r.histogram)));
    if (r.policy) writer.json_file("policy_tree.json", stamp(to_json(*r.policy, data.schema())));
    json resolved = to_json(c);
    resolved["features"] = json::array();
    for (const auto& f : data.schema()) resolved["features"].push_back(to_json(f));
    std::vector<std::string> artifacts = writer.written();
    artifacts.push_back("manifest.json");
    writer.json_file("manifest.json", stamp({{"library", "ivcf"},
                                             {"version", kVersion},
                                             {"config", resolved},
                                             {"effect_forest", to_json(r.clates.params)},
                                             {"artifacts", artifacts}}));
  });
  detail::run_stage("verify", [&] { verify_artifacts(c.output); });
  out.artifacts = writer.written();
  writer.commit();
  return out;
}

inline PipelineOutput run_pipeline(const RunConfig& c) { return run_pipeline(c, load_dataset(c)); }

}  // namespace ivcf

#endif  // IVCF_PIPELINE_HPP_
