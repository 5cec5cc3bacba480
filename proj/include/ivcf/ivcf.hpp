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

#ifndef IVCF_IVCF_HPP_
#define IVCF_IVCF_HPP_

#include "ivcf/analysis.hpp"
#include "ivcf/clate.hpp"
#include "ivcf/data.hpp"
#include "ivcf/dgp.hpp"
#include "ivcf/error.hpp"
#include "ivcf/forest.hpp"
#include "ivcf/forest_io.hpp"
#include "ivcf/heterogeneity.hpp"
#include "ivcf/io.hpp"
#include "ivcf/montecarlo.hpp"
#include "ivcf/nuisance.hpp"
#include "ivcf/parallel.hpp"
#include "ivcf/pipeline.hpp"
#include "ivcf/policy_tree.hpp"
#include "ivcf/random.hpp"

#endif  // IVCF_IVCF_HPP_
