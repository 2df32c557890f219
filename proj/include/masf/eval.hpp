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

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "masf/detector.hpp"

namespace masf {

/// Scores are p-values: smaller means more anomalous.
struct TprResult {
  double threshold = 0.0;  // reject when score < threshold
  double tpr = 0.0;
};

/// Threshold at the largest in-distribution score whose strict lower count
/// stays within floor((1 - tnr) * n); TPR is the share of OOD scores below it.
TprResult tpr_at_tnr(std::span<const double> in_scores, std::span<const double> out_scores, double tnr = 0.95);

/// P(out < in) + P(out == in) / 2.
double auroc(std::span<const double> in_scores, std::span<const double> out_scores);

enum class SdKind { kSample, kPopulation };

struct Aggregate {
  double mean = 0.0;
  double sd = 0.0;
  double min = 0.0;
};

Aggregate aggregate(std::span<const double> values, SdKind sd = SdKind::kSample);

struct KsResult {
  double distance = 0.0;
  double pvalue = 1.0;
};

/// Asymptotic Kolmogorov survival function P(K > lambda).
double kolmogorov_sf(double lambda);

/// One-sample KS statistic of `sample` against `cdf`, with the asymptotic
/// p-value at lambda = (sqrt(n) + 0.12 + 0.11/sqrt(n)) * D.
KsResult ks_test(std::span<const double> sample, const std::function<double(double)>& cdf);

/// KS test against Uniform[0,1]; needs at least 20 values.
KsResult ks_uniformity(std::span<const double> pvalues);

/// CSV "uniform_quantile,empirical_quantile" at levels 0.001 ... 0.999.
void qq_export(std::span<const double> pvalues, const std::filesystem::path& path);

// --- score tables --------------------------------------------------------

struct ScoreCsvOptions {
  std::optional<double> alpha;
  std::optional<double> accuracy;  // enables the predicted-class rule
};

/// Columns: id, q_0 .. q_{k-1}, q_max, q_yhat (when any record has a
/// prediction), and reject, t1e_bound when alpha is set.
std::string format_score_csv(std::span<const DetectionReport> reports, int num_classes, const ScoreCsvOptions& options);
void write_score_csv(std::span<const DetectionReport> reports, int num_classes, const ScoreCsvOptions& options,
                     const std::filesystem::path& path);

/// Reads one numeric column of a CSV with a header row.
std::vector<double> read_csv_column(const std::filesystem::path& path, const std::string& column);

struct ScenarioRow {
  std::string scenario;
  double tpr95 = 0.0;
  double auroc = 0.0;
};

void write_scenario_csv(std::span<const ScenarioRow> rows, const std::filesystem::path& path);

/// printf-style "%.17g": shortest text that round-trips every double.
std::string format_double(double v);

}  // namespace masf
