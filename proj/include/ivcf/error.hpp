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

#ifndef IVCF_ERROR_HPP_
#define IVCF_ERROR_HPP_

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace ivcf {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Column binding or schema problem (missing column, bad feature spec).
class SchemaError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t row)
      : Error(what + " (row " + std::to_string(row) + ")"), row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

// A value outside its declared domain, e.g. D = 2.
class DomainError : public Error {
 public:
  DomainError(const std::string& what, std::size_t row)
      : Error(what + " (row " + std::to_string(row) + ")"), row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

class DegenerateCutpointError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class CapacityError : public Error {
 public:
  using Error::Error;
};

class NoOobTreesError : public Error {
 public:
  explicit NoOobTreesError(std::size_t observation)
      : Error("no out-of-bag tree for observation " + std::to_string(observation)),
        observation_(observation) {}
  std::size_t observation() const { return observation_; }

 private:
  std::size_t observation_;
};

class WeakIdentificationError : public Error {
 public:
  explicit WeakIdentificationError(double denominator)
      : Error("weak identification: first-stage denominator " + std::to_string(denominator)),
        denominator_(denominator) {}
  double denominator() const { return denominator_; }

 private:
  double denominator_;
};

class RankDeficiencyError : public Error {
 public:
  explicit RankDeficiencyError(std::vector<std::string> columns)
      : Error(describe(columns)), columns_(std::move(columns)) {}
  const std::vector<std::string>& columns() const { return columns_; }

 private:
  static std::string describe(const std::vector<std::string>& columns) {
    std::string out = "design matrix is rank deficient; collinear columns:";
    for (const auto& c : columns) out += " " + c;
    return out;
  }
  std::vector<std::string> columns_;
};

// Thrown by the pipeline with the failing stage name attached.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

}  // namespace ivcf

#endif  // IVCF_ERROR_HPP_
