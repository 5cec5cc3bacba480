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

#ifndef IVCF_DATA_HPP_
#define IVCF_DATA_HPP_

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ivcf/error.hpp"

namespace ivcf {

enum class FeatureKind { binary, tercile, continuous };

inline std::string to_string(FeatureKind kind) {
  switch (kind) {
    case FeatureKind::binary: return "binary";
    case FeatureKind::tercile: return "tercile";
    case FeatureKind::continuous: return "continuous";
  }
  return "continuous";
}

inline FeatureKind parse_feature_kind(std::string_view name) {
  if (name == "binary") return FeatureKind::binary;
  if (name == "tercile" || name == "tercile-coded" || name == "quantile") return FeatureKind::tercile;
  if (name == "continuous") return FeatureKind::continuous;
  throw SchemaError("unknown feature kind '" + std::string(name) + "'");
}

struct FeatureSpec {
  std::string name;
  FeatureKind kind = FeatureKind::continuous;
  // Whether the feature enters the treatment propensity model.
  bool in_propensity = true;
  // Quantile cutpoints, strictly increasing; present iff kind == tercile.
  // Filled in by ingestion when the config leaves them empty.
  std::vector<double> cutpoints;
};

struct ColumnMap {
  std::string outcome = "y";
  std::string treatment = "d";
  std::string instrument = "z";
  // Empty means every row is its own cluster.
  std::string cluster = "cluster";
};

// Row-major read-only view over a feature matrix.
struct FeatureMatrix {
  std::span<const double> values;
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::span<const double> row(std::size_t i) const { return values.subspan(i * cols, cols); }
  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }
};

struct Quantization {
  std::vector<int> codes;  // 1..k
  std::vector<double> cutpoints;
};

namespace detail {

// Empirical quantile by linear interpolation of the empirical CDF:
// h = n*num/den (exact rational position, 1-based), then
// x(floor h) + frac(h) * (x(floor h + 1) - x(floor h)).
inline double cdf_interpolated_quantile(const std::vector<double>& sorted, std::size_t num,
                                        std::size_t den) {
  const std::size_t n = sorted.size();
  const std::size_t whole = (n * num) / den;
  const double frac = static_cast<double>((n * num) % den) / static_cast<double>(den);
  if (whole < 1) return sorted.front();
  if (whole >= n) return sorted.back();
  const double lo = sorted[whole - 1];
  const double hi = sorted[whole];
  return frac == 0.0 ? lo : lo + frac * (hi - lo);
}

}  // namespace detail

// Code of a value under strictly increasing cutpoints; a value equal to a
// cutpoint takes the lower code.
inline int quantile_code(double value, std::span<const double> cutpoints) {
  const auto it = std::lower_bound(cutpoints.begin(), cutpoints.end(), value);
  return static_cast<int>(it - cutpoints.begin()) + 1;
}

inline Quantization discretize_quantiles(std::span<const double> values, std::size_t groups) {
  if (groups < 2) throw ConfigError("quantile discretization needs at least 2 groups");
  if (values.size() < groups) {
    throw DegenerateCutpointError("need at least " + std::to_string(groups) +
                                  " values to discretize, got " + std::to_string(values.size()));
  }
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  Quantization out;
  for (std::size_t k = 1; k < groups; ++k) {
    out.cutpoints.push_back(detail::cdf_interpolated_quantile(sorted, k, groups));
  }
  for (std::size_t k = 1; k < out.cutpoints.size(); ++k) {
    if (!(out.cutpoints[k - 1] < out.cutpoints[k])) {
      throw DegenerateCutpointError("degenerate cutpoints: quantiles " + std::to_string(k) + " and " +
                                    std::to_string(k + 1) + " coincide");
    }
  }
  out.codes.reserve(values.size());
  for (double v : values) out.codes.push_back(quantile_code(v, out.cutpoints));
  return out;
}

inline Quantization discretize_terciles(std::span<const double> values) {
  return discretize_quantiles(values, 3);
}

struct ComplianceSummary {
  // counts[z][d]
  std::size_t counts[2][2] = {{0, 0}, {0, 0}};
  double treated_given_offer() const {
    return static_cast<double>(counts[1][1]) / static_cast<double>(counts[1][0] + counts[1][1]);
  }
  double treated_given_no_offer() const {
    return static_cast<double>(counts[0][1]) / static_cast<double>(counts[0][0] + counts[0][1]);
  }
  double first_stage() const { return treated_given_offer() - treated_given_no_offer(); }
};

// Immutable observational data: features (coded as the models see them),
// outcome Y, binary treatment D, binary instrument Z and a cluster index.
class CausalDataset {
 public:
  CausalDataset() = default;

  // raw holds the ingested feature values; tercile-coded columns are coded
  // from raw with the schema cutpoints (computed when absent).
  static CausalDataset build(std::vector<FeatureSpec> schema, std::vector<double> raw,
                             std::vector<double> y, std::vector<double> d, std::vector<double> z,
                             std::vector<std::int64_t> cluster_labels, std::size_t quantiles = 3) {
    CausalDataset ds;
    const std::size_t n = y.size();
    const std::size_t p = schema.size();
    if (n == 0) throw Error("dataset has no complete observations");
    if (raw.size() != n * p || d.size() != n || z.size() != n || cluster_labels.size() != n) {
      throw SchemaError("dataset columns differ in length");
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (!std::isfinite(y[i])) throw DomainError("non-finite outcome", i + 1);
      if (d[i] != 0.0 && d[i] != 1.0) throw DomainError("treatment must be 0 or 1", i + 1);
      if (z[i] != 0.0 && z[i] != 1.0) throw DomainError("instrument must be 0 or 1", i + 1);
    }
    ds.coded_ = raw;
    for (std::size_t j = 0; j < p; ++j) {
      FeatureSpec& spec = schema[j];
      if (spec.kind == FeatureKind::binary) {
        for (std::size_t i = 0; i < n; ++i) {
          const double v = raw[i * p + j];
          if (v != 0.0 && v != 1.0) throw DomainError("binary feature '" + spec.name + "' must be 0 or 1", i + 1);
        }
      } else if (spec.kind == FeatureKind::tercile) {
        if (spec.cutpoints.empty()) {
          std::vector<double> column(n);
          for (std::size_t i = 0; i < n; ++i) column[i] = raw[i * p + j];
          spec.cutpoints = discretize_quantiles(column, quantiles).cutpoints;
        }
        for (std::size_t k = 1; k < spec.cutpoints.size(); ++k) {
          if (!(spec.cutpoints[k - 1] < spec.cutpoints[k])) {
            throw DegenerateCutpointError("cutpoints of '" + spec.name + "' are not strictly increasing");
          }
        }
        for (std::size_t i = 0; i < n; ++i) {
          ds.coded_[i * p + j] = quantile_code(raw[i * p + j], spec.cutpoints);
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(raw[i * p + j])) throw DomainError("non-finite feature '" + spec.name + "'", i + 1);
      }
    }
    bool any_offer = false, any_control = false;
    for (double v : z) (v == 1.0 ? any_offer : any_control) = true;
    if (!any_offer || !any_control) throw DomainError("instrument must take both values 0 and 1", 0);

    // Cluster index follows sorted label order, so it does not depend on
    // row order.
    std::vector<std::int64_t> labels = cluster_labels;
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
    ds.cluster_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      ds.cluster_[i] = static_cast<std::uint32_t>(
          std::lower_bound(labels.begin(), labels.end(), cluster_labels[i]) - labels.begin());
    }
    ds.cluster_labels_ = std::move(labels);
    ds.schema_ = std::move(schema);
    ds.raw_ = std::move(raw);
    ds.y_ = std::move(y);
    ds.d_ = std::move(d);
    ds.z_ = std::move(z);
    return ds;
  }

  std::size_t rows() const { return y_.size(); }
  std::size_t cols() const { return schema_.size(); }
  const std::vector<FeatureSpec>& schema() const { return schema_; }
  FeatureMatrix features() const { return {coded_, rows(), cols()}; }
  FeatureMatrix raw_features() const { return {raw_, rows(), cols()}; }
  const std::vector<double>& outcome() const { return y_; }
  const std::vector<double>& treatment() const { return d_; }
  const std::vector<double>& instrument() const { return z_; }
  const std::vector<std::uint32_t>& cluster() const { return cluster_; }
  std::int64_t cluster_label(std::size_t i) const { return cluster_labels_[cluster_[i]]; }
  std::size_t num_clusters() const { return cluster_labels_.size(); }
  std::size_t dropped_rows() const { return dropped_; }

  std::vector<std::size_t> propensity_columns() const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < schema_.size(); ++j) {
      if (schema_[j].in_propensity) out.push_back(j);
    }
    return out;
  }

  std::optional<std::size_t> column_index(std::string_view name) const {
    for (std::size_t j = 0; j < schema_.size(); ++j) {
      if (schema_[j].name == name) return j;
    }
    return std::nullopt;
  }

  // Same observations with the outcome replaced (one pipeline per outcome).
  CausalDataset with_outcome(std::vector<double> y) const {
    if (y.size() != rows()) throw SchemaError("replacement outcome has wrong length");
    CausalDataset copy = *this;
    copy.y_ = std::move(y);
    return copy;
  }

  // Same observations with the instrument replaced; a causal forest uses
  // the treatment as its own instrument.
  CausalDataset with_instrument(const std::vector<double>& z) const {
    if (z.size() != rows()) throw SchemaError("replacement instrument has wrong length");
    std::vector<std::int64_t> labels(rows());
    for (std::size_t i = 0; i < rows(); ++i) labels[i] = cluster_label(i);
    auto copy = build(schema_, raw_, y_, d_, z, std::move(labels));
    copy.dropped_ = dropped_;
    return copy;
  }

  // Rows in the given order (used for subsetting and permutation checks).
  CausalDataset select_rows(std::span<const std::size_t> index) const {
    std::vector<double> raw, y, d, z;
    std::vector<std::int64_t> labels;
    for (std::size_t i : index) {
      auto r = raw_features().row(i);
      raw.insert(raw.end(), r.begin(), r.end());
      y.push_back(y_[i]);
      d.push_back(d_[i]);
      z.push_back(z_[i]);
      labels.push_back(cluster_label(i));
    }
    return build(schema_, std::move(raw), std::move(y), std::move(d), std::move(z), std::move(labels));
  }

  ComplianceSummary compliance() const {
    ComplianceSummary s;
    for (std::size_t i = 0; i < rows(); ++i) {
      ++s.counts[z_[i] == 1.0 ? 1 : 0][d_[i] == 1.0 ? 1 : 0];
    }
    return s;
  }

  void set_dropped_rows(std::size_t n) { dropped_ = n; }

  bool operator==(const CausalDataset& other) const {
    if (schema_.size() != other.schema_.size()) return false;
    for (std::size_t j = 0; j < schema_.size(); ++j) {
      const auto& a = schema_[j];
      const auto& b = other.schema_[j];
      if (a.name != b.name || a.kind != b.kind || a.in_propensity != b.in_propensity ||
          a.cutpoints != b.cutpoints) {
        return false;
      }
    }
    return coded_ == other.coded_ && raw_ == other.raw_ && y_ == other.y_ && d_ == other.d_ &&
           z_ == other.z_ && cluster_ == other.cluster_ && cluster_labels_ == other.cluster_labels_;
  }

 private:
  std::vector<FeatureSpec> schema_;
  std::vector<double> coded_;
  std::vector<double> raw_;
  std::vector<double> y_, d_, z_;
  std::vector<std::uint32_t> cluster_;
  std::vector<std::int64_t> cluster_labels_;
  std::size_t dropped_ = 0;
};

namespace detail {

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (std::size_t k = 0; k < line.size(); ++k) {
    const char c = line[k];
    if (quoted) {
      if (c == '"' && k + 1 < line.size() && line[k + 1] == '"') {
        cell += '"';
        ++k;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(std::move(cell));
      cell.clear();
    } else {
      cell += c;
    }
  }
  out.push_back(std::move(cell));
  return out;
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline bool is_missing(std::string_view cell) {
  cell = trim(cell);
  return cell.empty() || cell == "NA" || cell == "NaN" || cell == "nan" || cell == ".";
}

inline double parse_number(std::string_view cell, const std::string& column, std::size_t row) {
  cell = trim(cell);
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(value)) {
    throw ParseError("non-numeric value '" + std::string(cell) + "' in column '" + column + "'", row);
  }
  return value;
}

inline std::int64_t parse_integer(std::string_view cell, const std::string& column, std::size_t row) {
  cell = trim(cell);
  std::int64_t value = 0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc() || ptr != cell.data() + cell.size()) {
    throw ParseError("non-integer cluster id '" + std::string(cell) + "' in column '" + column + "'", row);
  }
  return value;
}

}  // namespace detail

// Reads a header-first, comma-separated file. Rows with any empty mapped
// cell are dropped (listwise deletion) and counted in dropped_rows(). Row
// numbers in errors count data rows from 1.
inline CausalDataset load_csv(const std::string& path, std::vector<FeatureSpec> schema,
                              const ColumnMap& columns, std::size_t quantiles = 3) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("'" + path + "' has no header row");
  if (line.size() >= 3 && static_cast<unsigned char>(line[0]) == 0xEF) line.erase(0, 3);  // BOM
  const auto header = detail::split_csv_line(line);
  std::unordered_map<std::string, std::size_t> position;
  for (std::size_t k = 0; k < header.size(); ++k) position[std::string(detail::trim(header[k]))] = k;
  auto locate = [&](const std::string& name) {
    auto it = position.find(name);
    if (it == position.end()) throw SchemaError("column '" + name + "' not found in '" + path + "'");
    return it->second;
  };
  const std::size_t p = schema.size();
  std::vector<std::size_t> feature_pos;
  for (const auto& f : schema) feature_pos.push_back(locate(f.name));
  const std::size_t y_pos = locate(columns.outcome);
  const std::size_t d_pos = locate(columns.treatment);
  const std::size_t z_pos = locate(columns.instrument);
  const std::optional<std::size_t> c_pos =
      columns.cluster.empty() ? std::nullopt : std::optional<std::size_t>(locate(columns.cluster));

  std::vector<double> raw, y, d, z;
  std::vector<std::int64_t> labels;
  std::size_t row = 0, dropped = 0;
  std::vector<double> features(p);
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    auto cell = [&](std::size_t k) -> std::string_view {
      return k < cells.size() ? std::string_view(cells[k]) : std::string_view();
    };
    bool missing = detail::is_missing(cell(y_pos)) || detail::is_missing(cell(d_pos)) ||
                   detail::is_missing(cell(z_pos)) || (c_pos && detail::is_missing(cell(*c_pos)));
    for (std::size_t k : feature_pos) missing = missing || detail::is_missing(cell(k));
    if (missing) {
      ++dropped;
      continue;
    }
    for (std::size_t j = 0; j < p; ++j) features[j] = detail::parse_number(cell(feature_pos[j]), schema[j].name, row);
    const double yv = detail::parse_number(cell(y_pos), columns.outcome, row);
    const double dv = detail::parse_number(cell(d_pos), columns.treatment, row);
    const double zv = detail::parse_number(cell(z_pos), columns.instrument, row);
    if (dv != 0.0 && dv != 1.0) throw DomainError("treatment '" + columns.treatment + "' must be 0 or 1", row);
    if (zv != 0.0 && zv != 1.0) throw DomainError("instrument '" + columns.instrument + "' must be 0 or 1", row);
    for (std::size_t j = 0; j < p; ++j) {
      if (schema[j].kind == FeatureKind::binary && features[j] != 0.0 && features[j] != 1.0) {
        throw DomainError("binary feature '" + schema[j].name + "' must be 0 or 1", row);
      }
    }
    raw.insert(raw.end(), features.begin(), features.end());
    y.push_back(yv);
    d.push_back(dv);
    z.push_back(zv);
    labels.push_back(c_pos ? detail::parse_integer(cell(*c_pos), columns.cluster, row)
                           : static_cast<std::int64_t>(row));
  }
  auto ds = CausalDataset::build(std::move(schema), std::move(raw), std::move(y), std::move(d), std::move(z),
                                 std::move(labels), quantiles);
  ds.set_dropped_rows(dropped);
  return ds;
}

// Feature columns only, coded with the schema's (training) cutpoints; used
// to score new rows with a fitted forest.
inline std::vector<double> load_features_csv(const std::string& path, const std::vector<FeatureSpec>& schema) {
  std::ifstream in(path);
  if (!in) throw SchemaError("cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line)) throw SchemaError("'" + path + "' has no header row");
  const auto header = detail::split_csv_line(line);
  std::vector<std::size_t> pos;
  for (const auto& f : schema) {
    std::size_t k = 0;
    while (k < header.size() && detail::trim(header[k]) != f.name) ++k;
    if (k == header.size()) throw SchemaError("column '" + f.name + "' not found in '" + path + "'");
    if (f.kind == FeatureKind::tercile && f.cutpoints.empty()) {
      throw SchemaError("feature '" + f.name + "' has no training cutpoints");
    }
    pos.push_back(k);
  }
  std::vector<double> out;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (detail::trim(line).empty()) continue;
    ++row;
    const auto cells = detail::split_csv_line(line);
    for (std::size_t j = 0; j < schema.size(); ++j) {
      const std::string_view cell = pos[j] < cells.size() ? std::string_view(cells[pos[j]]) : std::string_view();
      if (detail::is_missing(cell)) throw ParseError("missing value in column '" + schema[j].name + "'", row);
      const double v = detail::parse_number(cell, schema[j].name, row);
      if (schema[j].kind == FeatureKind::binary && v != 0.0 && v != 1.0) {
        throw DomainError("binary feature '" + schema[j].name + "' must be 0 or 1", row);
      }
      out.push_back(schema[j].kind == FeatureKind::tercile ? quantile_code(v, schema[j].cutpoints) : v);
    }
  }
  return out;
}

inline std::string format_number(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

// Writes raw feature values plus the mapped columns; load_csv with the
// dataset's schema reproduces the dataset exactly.
inline void write_csv(const CausalDataset& data, const std::string& path, const ColumnMap& columns) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path + "'");
  for (const auto& f : data.schema()) out << f.name << ',';
  out << columns.outcome << ',' << columns.treatment << ',' << columns.instrument;
  if (!columns.cluster.empty()) out << ',' << columns.cluster;
  out << '\n';
  const auto raw = data.raw_features();
  for (std::size_t i = 0; i < data.rows(); ++i) {
    for (std::size_t j = 0; j < data.cols(); ++j) out << format_number(raw(i, j)) << ',';
    out << format_number(data.outcome()[i]) << ',' << format_number(data.treatment()[i]) << ','
        << format_number(data.instrument()[i]);
    if (!columns.cluster.empty()) out << ',' << data.cluster_label(i);
    out << '\n';
  }
}

}  // namespace ivcf

#endif  // IVCF_DATA_HPP_
