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

#ifndef IVCF_RANDOM_HPP_
#define IVCF_RANDOM_HPP_

#include <cstdint>
#include <random>

namespace ivcf {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Independent stream for (seed, stream index); used per tree, per tree
// group and per Monte Carlo replicate so results never depend on
// scheduling order.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return splitmix64(splitmix64(seed) ^ splitmix64(stream + 0x632be59bd9b4e019ULL));
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  return std::mt19937_64(derive_seed(seed, stream));
}

// Stream tags for the distinct forests of one pipeline run.
enum class SeedRole : std::uint64_t {
  outcome_mean = 1,
  treatment_propensity = 2,
  instrument_propensity = 3,
  compliance = 4,
  effect = 5,
  tuning = 6,
};

inline std::uint64_t role_seed(std::uint64_t seed, SeedRole role) {
  return derive_seed(seed, 0x1000 + static_cast<std::uint64_t>(role));
}

}  // namespace ivcf

#endif  // IVCF_RANDOM_HPP_
