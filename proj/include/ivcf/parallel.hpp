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

#ifndef IVCF_PARALLEL_HPP_
#define IVCF_PARALLEL_HPP_

#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace ivcf {

// Thread cap: explicit value if positive, else IVCF_THREADS, else the
// OpenMP default.
inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("IVCF_THREADS")) {
    int v = std::atoi(env);
    if (v > 0) return v;
  }
#ifdef _OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

// Runs body(i) for i in [0, n). Every index owns its output slot, so the
// result never depends on the thread count. The first exception thrown by
// any body is rethrown on the calling thread.
template <typename Body>
void parallel_for(std::size_t n, int threads, Body&& body) {
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto count = static_cast<std::int64_t>(n);
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic, 1) num_threads(resolve_threads(threads))
#endif
  for (std::int64_t i = 0; i < count; ++i) {
    try {
      body(static_cast<std::size_t>(i));
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  }
  (void)threads;
  if (failure) std::rethrow_exception(failure);
}

}  // namespace ivcf

#endif  // IVCF_PARALLEL_HPP_
