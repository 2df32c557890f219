// Copyright 2026 The masf Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <span>

namespace masf::stats {

/// (#{s <= x} + 1) / (n + 1) over an ascending sample. The +1 keeps the
/// result in [1/(n+1), 1], so p-values derived from it are never zero.
double ecdf_value(double x, std::span<const double> sorted_sample);

/// min(1, 2 * min(right_tail, left_tail)). Both tails must lie in (0, 1].
double two_sided_pvalue(double right_tail, double left_tail);

/// Simes global-null statistic: min_i q_(i) * m / i, capped at 1.
double simes(std::span<const double> q);

/// Same as simes() but sorts `q` in place instead of copying.
double simes_inplace(std::span<double> q);

/// Fisher combination statistic -2 * sum(ln q_i). Larger is more anomalous.
double fisher(std::span<const double> q);

/// Bonferroni: min(1, m * min(q)).
double bonferroni(std::span<const double> q);

/// Survival function of the chi-square distribution with `dof` degrees of
/// freedom. Reference null for validation only; scoring never uses it.
double chi_square_sf(double x, int dof);

}  // namespace masf::stats
