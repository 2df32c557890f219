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

#include "masf/stats.hpp"

#include <algorithm>
#include <boost/math/special_functions/gamma.hpp>
#include <cmath>
#include <string>
#include <vector>

#include "masf/error.hpp"

namespace masf::stats {

double ecdf_value(double x, std::span<const double> sorted_sample) {
  if (sorted_sample.empty()) throw Error(ErrorCode::kEmptySample, "eCDF of an empty sample");
  const auto count = static_cast<std::size_t>(
      std::upper_bound(sorted_sample.begin(), sorted_sample.end(), x) - sorted_sample.begin());
  return static_cast<double>(count + 1) / static_cast<double>(sorted_sample.size() + 1);
}

double two_sided_pvalue(double right_tail, double left_tail) {
  auto in_unit = [](double p) { return p > 0.0 && p <= 1.0; };
  if (!in_unit(right_tail) || !in_unit(left_tail)) {
    throw Error(ErrorCode::kOutOfRange, "tail probabilities must lie in (0, 1], got " +
                                            std::to_string(right_tail) + ", " + std::to_string(left_tail));
  }
  return std::min(1.0, 2.0 * std::min(right_tail, left_tail));
}

double simes_inplace(std::span<double> q) {
  if (q.empty()) throw Error(ErrorCode::kEmptyVector, "simes of an empty vector");
  std::sort(q.begin(), q.end());
  const double m = static_cast<double>(q.size());
  double best = 1.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    best = std::min(best, q[i] * m / static_cast<double>(i + 1));
  }
  return best;
}

double simes(std::span<const double> q) {
  std::vector<double> copy(q.begin(), q.end());
  return simes_inplace(copy);
}

double fisher(std::span<const double> q) {
  if (q.empty()) throw Error(ErrorCode::kEmptyVector, "fisher of an empty vector");
  double sum = 0.0;
  for (double v : q) {
    if (!(v > 0.0)) throw Error(ErrorCode::kZeroPValue, "fisher input " + std::to_string(v));
    if (v > 1.0) throw Error(ErrorCode::kOutOfRange, "fisher input " + std::to_string(v));
    sum += std::log(v);
  }
  // -0.0 when every q_i is 1.
  return sum == 0.0 ? 0.0 : -2.0 * sum;
}

double bonferroni(std::span<const double> q) {
  if (q.empty()) throw Error(ErrorCode::kEmptyVector, "bonferroni of an empty vector");
  const double lo = *std::min_element(q.begin(), q.end());
  return std::min(1.0, static_cast<double>(q.size()) * lo);
}

double chi_square_sf(double x, int dof) {
  if (dof < 1 || !(x >= 0.0)) {
    throw Error(ErrorCode::kOutOfRange, "chi_square_sf requires x >= 0 and dof >= 1");
  }
  if (x == 0.0) return 1.0;
  return boost::math::gamma_q(0.5 * dof, 0.5 * x);
}

}  // namespace masf::stats
