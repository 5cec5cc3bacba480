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

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ivcf/ivcf.hpp"

namespace fs = std::filesystem;
using ivcf::json;

namespace {

constexpr int kUsageError = 2;
constexpr int kRuntimeError = 1;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::string out;
  std::string format = "json";
  std::optional<std::uint64_t> seed;
  int threads = 0;
};

void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw UsageError(std::string("missing ") + what);
  if (!fs::exists(path)) throw UsageError(std::string(what) + " '" + path + "' does not exist");
}

ivcf::RunConfig single_config(const Common& c) {
  require_file(c.config, "--config");
  auto configs = ivcf::load_run_configs(c.config);
  if (configs.size() != 1) throw UsageError("this subcommand takes a single-run config");
  auto cfg = std::move(configs.front());
  require_file(cfg.dataset, "dataset");
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.analysis.forest.seed = *c.seed;
  }
  cfg.analysis.forest.threads = c.threads;
  return cfg;
}

std::ofstream open_out(const std::string& path) {
  if (path.empty()) throw UsageError("missing --out");
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path);
  if (!out) throw ivcf::Error("cannot write '" + path + "'");
  return out;
}

std::string num(double v) { return std::isfinite(v) ? ivcf::format_number(v) : std::string(); }

int cmd_run(const Common& c) {
  require_file(c.config, "--config");
  auto configs = ivcf::load_run_configs(c.config);
  for (const auto& cfg : configs) require_file(cfg.dataset, "dataset");
  for (std::size_t k = 0; k < configs.size(); ++k) {
    auto& cfg = configs[k];
    if (c.seed) {
      cfg.seed = *c.seed;
      cfg.analysis.forest.seed = *c.seed;
    }
    cfg.analysis.forest.threads = c.threads;
    if (!c.out.empty()) {
      cfg.output = configs.size() == 1 ? c.out : (fs::path(c.out) / ("run-" + std::to_string(k + 1))).string();
    }
    const auto result = ivcf::run_pipeline(cfg);
    std::cout << cfg.output << ": late " << ivcf::two_decimals(result.analysis.scores.late) << " (se "
              << ivcf::two_decimals(result.analysis.scores.late_se) << "), n " << result.results.at("n") << '\n';
  }
  return 0;
}

int cmd_fit(const Common& c) {
  const auto cfg = single_config(c);
  if (c.out.empty()) throw UsageError("missing --out");
  const auto data = ivcf::load_dataset(cfg);
  const auto& a = cfg.analysis;
  const bool naive = a.mode == ivcf::ForestMode::causal;
  const auto fitted = naive ? data.with_instrument(data.treatment()) : data;
  const auto nuisances = naive ? ivcf::fit_causal_nuisances(fitted, a.forest, a.nuisance)
                               : ivcf::fit_nuisances(fitted, a.forest, a.nuisance);
  const auto clates = ivcf::predict_clates(fitted, nuisances, a.forest, a.mode);
  ivcf::ArtifactWriter writer(c.out);
  ivcf::save_forest(*clates.forest, writer.path("forest.ivcf"));
  ivcf::write_nuisances_csv(nuisances, writer.path("nuisances.csv"));
  json features = json::array();
  for (const auto& f : data.schema()) features.push_back(ivcf::to_json(f));
  json resolved = ivcf::to_json(cfg);
  resolved["features"] = features;
  ivcf::write_json({{"library", "ivcf"},
                    {"version", ivcf::kVersion},
                    {"n", data.rows()},
                    {"seed", cfg.seed},
                    {"features", features},
                    {"config", resolved},
                    {"effect_forest", ivcf::to_json(clates.params)}},
                   writer.path("model.json"));
  writer.commit();
  std::cout << "fitted " << clates.forest->trees.size() << " trees on " << data.rows() << " rows\n";
  return 0;
}

struct Model {
  std::shared_ptr<const ivcf::Forest> forest;
  std::vector<ivcf::FeatureSpec> features;
};

Model load_model(const std::string& dir) {
  if (dir.empty()) throw UsageError("missing --model");
  require_file((fs::path(dir) / "forest.ivcf").string(), "forest artifact");
  require_file((fs::path(dir) / "model.json").string(), "model manifest");
  Model m;
  m.forest = std::make_shared<ivcf::Forest>(ivcf::load_forest((fs::path(dir) / "forest.ivcf").string()));
  const json manifest = ivcf::read_json((fs::path(dir) / "model.json").string());
  for (const auto& f : manifest.at("features")) {
    m.features.push_back(ivcf::feature_from_json(f));
  }
  if (m.features.size() != m.forest->num_features) throw ivcf::SchemaError("model features disagree with forest");
  return m;
}

int cmd_predict(const Common& c, const std::string& model_dir, const std::string& data_path) {
  const Model m = load_model(model_dir);
  require_file(data_path, "--data");
  const auto values = ivcf::load_features_csv(data_path, m.features);
  const std::size_t p = m.features.size();
  const ivcf::FeatureMatrix x{values, values.size() / p, p};
  auto forest = *m.forest;
  forest.params.threads = c.threads;
  const auto pred = ivcf::predict(forest, x);
  auto out = open_out(c.out);
  if (c.format == "csv") {
    out << "row,tau_hat,se\n";
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double se = pred[i].variance > 0.0 ? std::sqrt(pred[i].variance) : std::nan("");
      out << i + 1 << ',' << (pred[i].weak ? std::string() : num(pred[i].estimate)) << ',' << num(se) << '\n';
    }
  } else {
    json rows = json::array();
    for (const auto& p : pred) {
      rows.push_back({{"tau_hat", p.weak ? json() : json(p.estimate)},
                      {"se", p.variance > 0.0 ? json(std::sqrt(p.variance)) : json()}});
    }
    out << json{{"n", pred.size()}, {"predictions", rows}}.dump(2) << '\n';
  }
  return 0;
}

int cmd_scores(const Common& c, const std::string& model_dir) {
  const auto cfg = single_config(c);
  if (c.out.empty()) throw UsageError("missing --out");
  const Model m = load_model(model_dir);
  require_file((fs::path(model_dir) / "nuisances.csv").string(), "nuisance artifact");
  auto data = ivcf::load_dataset(cfg);
  if (m.forest->mode == ivcf::ForestMode::causal) data = data.with_instrument(data.treatment());
  const auto nuisances = ivcf::read_nuisances_csv((fs::path(model_dir) / "nuisances.csv").string(),
                                                  cfg.analysis.nuisance.compliance_floor);
  if (nuisances.size() != data.rows() || m.forest->num_samples() != data.rows()) {
    throw ivcf::SchemaError("model was fitted on a different number of rows");
  }
  ivcf::AnalysisResult r;
  r.nuisances = nuisances;
  r.clates = ivcf::clates_from_forest(m.forest, data, nuisances);
  r.scores = ivcf::doubly_robust_scores(data, nuisances, r.clates, cfg.analysis.nuisance.compliance_floor);
  const auto res = ivcf::residualize(data, nuisances);
  r.outcome_residual = ivcf::check_centered(res.y_res);
  r.treatment_residual = ivcf::check_centered(res.d_res);
  r.instrument_residual = ivcf::check_centered(res.z_res);
  ivcf::ArtifactWriter writer(c.out);
  ivcf::write_json(ivcf::results_json(cfg, data, r), writer.path("results.json"));
  ivcf::write_clates_csv(r.clates, &r.scores, writer.path("clates.csv"), r.nuisances.flags);
  writer.commit();
  std::cout << "late " << ivcf::two_decimals(r.scores.late) << " (se " << ivcf::two_decimals(r.scores.late_se)
            << ")\n";
  return 0;
}

std::vector<double> load_scores(const std::string& path, std::size_t rows) {
  require_file(path, "--scores");
  auto gamma = ivcf::read_scores_csv(path);
  if (gamma.size() != rows) throw ivcf::SchemaError("score file and dataset differ in length");
  return gamma;
}

int cmd_blp(const Common& c, const std::string& scores) {
  const auto cfg = single_config(c);
  const auto data = ivcf::load_dataset(cfg);
  const auto gamma = load_scores(scores, data.rows());
  const auto r = ivcf::blp(gamma, ivcf::blp_design(data, cfg.analysis.reference), data.cluster());
  auto out = open_out(c.out);
  if (c.format == "csv") {
    out << "name,estimate,se,ci_low,ci_high\n";
    for (std::size_t k = 0; k < r.names.size(); ++k) {
      out << r.names[k] << ',' << num(r.coefficients[k]) << ',' << num(r.se[k]) << ',' << num(r.ci_low[k]) << ','
          << num(r.ci_high[k]) << '\n';
    }
  } else {
    auto j = ivcf::to_json(r, cfg.analysis.reference);
    j["seed"] = cfg.seed;
    out << j.dump(2) << '\n';
  }
  return 0;
}

int cmd_clan(const Common& c, const std::string& scores) {
  const auto cfg = single_config(c);
  const auto data = ivcf::load_dataset(cfg);
  const auto gamma = load_scores(scores, data.rows());
  const auto r = ivcf::clan(gamma, ivcf::clan_modifiers(data));
  auto out = open_out(c.out);
  if (c.format == "csv") {
    out << "name,mean_most,mean_least,diff,diff_se,ci_low,ci_high\n";
    for (const auto& m : r.records) {
      out << m.name << ',' << num(m.mean_most) << ',' << num(m.mean_least) << ',' << num(m.diff) << ','
          << num(m.diff_se) << ',' << num(m.ci_low) << ',' << num(m.ci_high) << '\n';
    }
  } else {
    auto j = ivcf::to_json(r);
    j["n"] = data.rows();
    j["seed"] = cfg.seed;
    out << j.dump(2) << '\n';
  }
  return 0;
}

int cmd_policy(const Common& c, const std::string& scores) {
  const auto cfg = single_config(c);
  const auto data = ivcf::load_dataset(cfg);
  const auto gamma = load_scores(scores, data.rows());
  const auto tree = ivcf::learn_policy_tree(data.features(), gamma, cfg.analysis.policy_depth,
                                            cfg.analysis.treatment_cost, c.threads);
  auto out = open_out(c.out);
  if (c.format == "csv") {
    out << "node,feature,threshold,left,right,action,n\n";
    for (std::size_t k = 0; k < tree.nodes.size(); ++k) {
      const auto& n = tree.nodes[k];
      if (n.is_leaf()) {
        out << k << ",,,,," << (n.action == ivcf::Action::treat ? "treat" : "control") << ',' << n.count << '\n';
      } else {
        out << k << ',' << data.schema()[static_cast<std::size_t>(n.feature)].name << ',' << num(n.threshold) << ','
            << n.left << ',' << n.right << ",," << n.count << '\n';
      }
    }
  } else {
    auto j = ivcf::to_json(tree, data.schema());
    j["n"] = data.rows();
    j["seed"] = cfg.seed;
    out << j.dump(2) << '\n';
  }
  return 0;
}

int cmd_simulate(const Common& c, const std::string& spec_path) {
  require_file(spec_path, "--spec");
  auto spec = ivcf::dgp_spec_from_json(ivcf::read_json(spec_path));
  if (c.seed) spec.seed = *c.seed;
  if (c.out.empty()) throw UsageError("missing --out");
  const auto synth = ivcf::generate(spec);
  const fs::path out(c.out);
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  ivcf::write_csv(synth.data, out.string(), ivcf::ColumnMap{});
  const fs::path truth = out.parent_path() / (out.stem().string() + ".truth.csv");
  ivcf::write_truth_csv(synth, truth.string());
  std::cout << "wrote " << synth.data.rows() << " rows to " << out.string() << " (late_true "
            << ivcf::format_number(synth.late_true) << ")\n";
  return 0;
}

int cmd_report(const Common& c, const std::vector<std::string>& inputs) {
  if (inputs.empty()) throw UsageError("report needs at least one results directory or file");
  std::vector<ivcf::ReportRow> rows;
  for (const auto& in : inputs) {
    fs::path p(in);
    if (fs::is_directory(p)) {
      if (fs::exists(p / "results.json")) {
        rows.push_back(ivcf::report_row_from_results(ivcf::read_json((p / "results.json").string())));
        continue;
      }
      std::vector<fs::path> found;
      for (const auto& e : fs::recursive_directory_iterator(p)) {
        if (e.is_regular_file() && e.path().filename() == "results.json") found.push_back(e.path());
      }
      if (found.empty()) throw UsageError("no results.json under '" + in + "'");
      std::sort(found.begin(), found.end());
      for (const auto& f : found) rows.push_back(ivcf::report_row_from_results(ivcf::read_json(f.string())));
    } else {
      require_file(in, "results file");
      rows.push_back(ivcf::report_row_from_results(ivcf::read_json(in)));
    }
  }
  const std::string table = ivcf::format_report(rows);
  if (c.out.empty()) {
    std::cout << table;
  } else {
    auto out = open_out(c.out);
    out << table;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Instrumental causal forests: CLATEs, LATE, BLP, CLAN and policy trees"};
  app.set_version_flag("--version", std::string(ivcf::kVersion));
  app.require_subcommand(1);

  Common common;
  auto add_common = [&](CLI::App* sub, bool config) {
    if (config) sub->add_option("--config", common.config, "Run config (JSON)");
    sub->add_option("--out", common.out, "Output directory or file");
    sub->add_option("--seed", common.seed, "Override the config seed");
    sub->add_option("--threads", common.threads, "Worker cap (default: IVCF_THREADS or all cores)")
        ->check(CLI::NonNegativeNumber);
    sub->add_option("--format", common.format, "Output format")->check(CLI::IsMember({"json", "csv"}));
  };

  std::string model_dir, data_path, scores_path, spec_path;
  std::vector<std::string> inputs;

  auto* run = app.add_subcommand("run", "Full pipeline for one run or a batch config");
  add_common(run, true);
  auto* fit = app.add_subcommand("fit", "Fit nuisances and the effect forest; write the model");
  add_common(fit, true);
  auto* predict = app.add_subcommand("predict", "Predict CLATEs for new rows from a fitted model");
  add_common(predict, false);
  predict->add_option("--model", model_dir, "Directory written by fit")->required();
  predict->add_option("--data", data_path, "CSV with the feature columns")->required();
  auto* scores = app.add_subcommand("scores", "Out-of-bag CLATEs, scores and LATE from a fitted model");
  add_common(scores, true);
  scores->add_option("--model", model_dir, "Directory written by fit")->required();
  auto* blp = app.add_subcommand("blp", "Best linear predictor of the scores");
  add_common(blp, true);
  blp->add_option("--scores", scores_path, "clates.csv with a gamma column")->required();
  auto* clan = app.add_subcommand("clan", "Most vs least affected group comparison");
  add_common(clan, true);
  clan->add_option("--scores", scores_path, "clates.csv with a gamma column")->required();
  auto* policy = app.add_subcommand("policy-tree", "Exhaustive depth-two policy tree");
  add_common(policy, true);
  policy->add_option("--scores", scores_path, "clates.csv with a gamma column")->required();
  auto* simulate = app.add_subcommand("simulate", "Generate a synthetic dataset and its ground truth");
  add_common(simulate, false);
  simulate->add_option("--spec", spec_path, "DGP spec (JSON)")->required();
  auto* report = app.add_subcommand("report", "Render the results table");
  add_common(report, false);
  report->add_option("inputs", inputs, "Run directories or results.json files");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }

  try {
    if (*run) return cmd_run(common);
    if (*fit) return cmd_fit(common);
    if (*predict) return cmd_predict(common, model_dir, data_path);
    if (*scores) return cmd_scores(common, model_dir);
    if (*blp) return cmd_blp(common, scores_path);
    if (*clan) return cmd_clan(common, scores_path);
    if (*policy) return cmd_policy(common, scores_path);
    if (*simulate) return cmd_simulate(common, spec_path);
    if (*report) return cmd_report(common, inputs);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const ivcf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kUsageError;
}
