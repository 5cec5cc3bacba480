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

#ifndef IVCF_FOREST_IO_HPP_
#define IVCF_FOREST_IO_HPP_

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "ivcf/error.hpp"
#include "ivcf/forest.hpp"

namespace ivcf {

// Forest artifact layout (little-endian):
//   "IVCFFRST" | u32 version | params | features | targets | clusters | trees
// Every field is written with its exact bit pattern, so save/load/save is
// byte-identical and loaded forests predict bit-identically.
inline constexpr char kForestMagic[8] = {'I', 'V', 'C', 'F', 'F', 'R', 'S', 'T'};
inline constexpr std::uint32_t kForestFormatVersion = 1;

static_assert(std::endian::native == std::endian::little, "forest artifacts assume a little-endian host");

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const char*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  template <typename T>
  void put_vector(const std::vector<T>& v) {
    put<std::uint64_t>(v.size());
    for (const T& x : v) put<T>(x);
  }
  std::string take() { return std::move(bytes_); }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    if (pos_ + sizeof(T) > bytes_.size()) throw Error("forest artifact is truncated");
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  template <typename T>
  std::vector<T> get_vector() {
    const auto n = get<std::uint64_t>();
    if (n > (bytes_.size() - pos_) / sizeof(T)) throw Error("forest artifact is truncated");
    std::vector<T> v(n);
    for (auto& x : v) x = get<T>();
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_forest(const Forest& f) {
  detail::ByteWriter w;
  for (char c : kForestMagic) w.put(c);
  w.put(kForestFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(f.mode));
  const ForestParams& p = f.params;
  w.put<std::uint64_t>(p.num_trees);
  w.put<std::uint64_t>(p.tuning_trees);
  w.put(p.subsample_fraction);
  w.put(p.honesty_fraction);
  w.put<std::uint64_t>(p.min_node_size);
  w.put<std::uint64_t>(p.mtry);
  w.put<std::uint64_t>(p.ci_group_size);
  w.put<std::uint64_t>(p.seed);
  w.put<std::uint8_t>(p.tune ? 1 : 0);
  w.put<std::uint64_t>(p.tune_candidates);
  w.put(p.weak_identification_floor);
  w.put<std::uint64_t>(f.num_features);
  std::vector<std::uint64_t> columns(f.columns.begin(), f.columns.end());
  w.put_vector(columns);
  w.put_vector(f.targets.outcome);
  w.put_vector(f.targets.treatment);
  w.put_vector(f.targets.instrument);
  w.put_vector(f.cluster);
  w.put<std::uint64_t>(f.trees.size());
  for (const Tree& t : f.trees) {
    w.put<std::uint64_t>(t.nodes.size());
    for (const TreeNode& n : t.nodes) {
      w.put(n.feature);
      w.put(n.threshold);
      w.put(n.left);
      w.put(n.right);
      w.put(n.begin);
      w.put(n.end);
    }
    w.put_vector(t.leaf_samples);
    w.put_vector(t.split_sample);
    w.put_vector(t.estimation_sample);
  }
  return w.take();
}

inline Forest deserialize_forest(std::string_view bytes) {
  detail::ByteReader r(bytes);
  for (char c : kForestMagic) {
    if (r.get<char>() != c) throw Error("not a forest artifact (bad magic)");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kForestFormatVersion) {
    throw Error("unsupported forest artifact version " + std::to_string(version));
  }
  Forest f;
  const auto mode = r.get<std::uint32_t>();
  if (mode > 2) throw Error("forest artifact has an unknown mode");
  f.mode = static_cast<ForestMode>(mode);
  ForestParams& p = f.params;
  p.num_trees = r.get<std::uint64_t>();
  p.tuning_trees = r.get<std::uint64_t>();
  p.subsample_fraction = r.get<double>();
  p.honesty_fraction = r.get<double>();
  p.min_node_size = r.get<std::uint64_t>();
  p.mtry = r.get<std::uint64_t>();
  p.ci_group_size = r.get<std::uint64_t>();
  p.seed = r.get<std::uint64_t>();
  p.tune = r.get<std::uint8_t>() != 0;
  p.tune_candidates = r.get<std::uint64_t>();
  p.weak_identification_floor = r.get<double>();
  f.num_features = r.get<std::uint64_t>();
  for (auto c : r.get_vector<std::uint64_t>()) f.columns.push_back(c);
  f.targets.outcome = r.get_vector<double>();
  f.targets.treatment = r.get_vector<double>();
  f.targets.instrument = r.get_vector<double>();
  f.cluster = r.get_vector<std::uint32_t>();
  const auto num_trees = r.get<std::uint64_t>();
  f.trees.resize(num_trees);
  for (Tree& t : f.trees) {
    t.nodes.resize(r.get<std::uint64_t>());
    for (TreeNode& n : t.nodes) {
      n.feature = r.get<std::int32_t>();
      n.threshold = r.get<double>();
      n.left = r.get<std::uint32_t>();
      n.right = r.get<std::uint32_t>();
      n.begin = r.get<std::uint32_t>();
      n.end = r.get<std::uint32_t>();
    }
    t.leaf_samples = r.get_vector<std::uint32_t>();
    t.split_sample = r.get_vector<std::uint32_t>();
    t.estimation_sample = r.get_vector<std::uint32_t>();
    for (std::size_t k = 0; k < t.nodes.size(); ++k) {
      const TreeNode& n = t.nodes[k];
      const bool bad_child = !n.is_leaf() && (n.left >= t.nodes.size() || n.right >= t.nodes.size() ||
                                              n.left <= k || n.right <= k);
      const bool bad_leaf = n.is_leaf() && (n.begin > n.end || n.end > t.leaf_samples.size());
      if (bad_child || bad_leaf || (!n.is_leaf() && static_cast<std::size_t>(n.feature) >= f.num_features)) {
        throw Error("forest artifact has a malformed tree");
      }
    }
  }
  if (!r.done()) throw Error("forest artifact has trailing bytes");
  if (f.trees.size() != p.num_trees || p.ci_group_size == 0) throw Error("forest artifact is inconsistent");
  f.finalize();
  return f;
}

inline void save_forest(const Forest& f, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path + "'");
  const std::string bytes = serialize_forest(f);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Forest load_forest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open forest artifact '" + path + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_forest(bytes);
}

}  // namespace ivcf

#endif  // IVCF_FOREST_IO_HPP_
