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

#include "masf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

#include "masf/error.hpp"

namespace masf {

namespace {

void require_nonempty(std::span<const double> in, std::span<const double> out) {
  if (in.empty() || out.empty()) throw Error(ErrorCode::kEmptyScores, "both score sets must be nonempty");
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

TprResult tpr_at_tnr(std::span<const double> in_scores, std::span<const double> out_scores, double tnr) {
  require_nonempty(in_scores, out_scores);
  if (!(tnr > 0.0 && tnr < 1.0)) throw Error(ErrorCode::kOutOfRange, "tnr must lie in (0, 1)");
  std::vector<double> in(in_scores.begin(), in_scores.end());
  std::sort(in.begin(), in.end());
  const auto n = in.size();
  const auto budget = static_cast<std::size_t>(std::floor((1.0 - tnr) * static_cast<double>(n) + 1e-9));
  TprResult r;
  r.threshold = in[std::min(budget, n - 1)];
  const auto hits = std::count_if(out_scores.begin(), out_scores.end(), [&](double s) { return s < r.threshold; });
  r.tpr = static_cast<double>(hits) / static_cast<double>(out_scores.size());
  return r;
}

double auroc(std::span<const double> in_scores, std::span<const double> out_scores) {
  require_nonempty(in_scores, out_scores);
  std::vector<double> in(in_scores.begin(), in_scores.end());
  std::sort(in.begin(), in.end());
  double wins = 0.0;
  for (double o : out_scores) {
    const auto lo = std::lower_bound(in.begin(), in.end(), o);
    const auto hi = std::upper_bound(lo, in.end(), o);
    wins += static_cast<double>(in.end() - hi) + 0.5 * static_cast<double>(hi - lo);
  }
  return wins / (static_cast<double>(in.size()) * static_cast<double>(out_scores.size()));
}

Aggregate aggregate(std::span<const double> values, SdKind sd) {
  if (values.empty()) throw Error(ErrorCode::kEmptyScores, "aggregate of no scenarios");
  Aggregate a;
  double sum = 0.0;
  for (double v : values) sum += v;
  const auto n = static_cast<double>(values.size());
  a.mean = sum / n;
  double ss = 0.0;
  for (double v : values) ss += (v - a.mean) * (v - a.mean);
  const double denom = sd == SdKind::kSample ? n - 1.0 : n;
  a.sd = denom > 0.0 ? std::sqrt(ss / denom) : 0.0;
  a.min = *std::min_element(values.begin(), values.end());
  return a;
}

double kolmogorov_sf(double lambda) {
  if (lambda <= 0.0) return 1.0;
  if (lambda < 1.18) {
    // Jacobi-transformed series, fast for small lambda.
    const double pi2 = std::numbers::pi * std::numbers::pi;
    double s = 0.0;
    for (int k = 1; k <= 20; ++k) {
      const double m = 2.0 * k - 1.0;
      s += std::exp(-m * m * pi2 / (8.0 * lambda * lambda));
    }
    return std::clamp(1.0 - std::sqrt(2.0 * std::numbers::pi) / lambda * s, 0.0, 1.0);
  }
  double s = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    s += (k % 2 == 1 ? term : -term);
    if (term < 1e-17) break;
  }
  return std::clamp(2.0 * s, 0.0, 1.0);
}

KsResult ks_test(std::span<const double> sample, const std::function<double(double)>& cdf) {
  if (sample.empty()) throw Error(ErrorCode::kTooFewSamples, "KS test of an empty sample");
  std::vector<double> x(sample.begin(), sample.end());
  std::sort(x.begin(), x.end());
  const auto n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, static_cast<double>(i + 1) / n - f, f - static_cast<double>(i) / n});
  }
  const double sn = std::sqrt(n);
  return {d, kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)};
}

KsResult ks_uniformity(std::span<const double> pvalues) {
  if (pvalues.size() < 20) {
    throw Error(ErrorCode::kTooFewSamples, "KS uniformity needs at least 20 values, got " +
                                               std::to_string(pvalues.size()));
  }
  return ks_test(pvalues, [](double p) { return std::clamp(p, 0.0, 1.0); });
}

void qq_export(std::span<const double> pvalues, const std::filesystem::path& path) {
  if (pvalues.empty()) throw Error(ErrorCode::kEmptyScores, "qq_export of no values");
  std::vector<double> p(pvalues.begin(), pvalues.end());
  std::sort(p.begin(), p.end());
  const auto n = static_cast<double>(p.size());
  std::string out = "uniform_quantile,empirical_quantile\n";
  for (int k = 1; k <= 999; ++k) {
    const double u = k / 1000.0;
    const auto rank = std::clamp<std::size_t>(static_cast<std::size_t>(std::ceil(u * n - 1e-9)), 1, p.size());
    out += format_double(u) + "," + format_double(p[rank - 1]) + "\n";
  }
  write_text(path, out);
}

std::string format_score_csv(std::span<const DetectionReport> reports, int num_classes,
                             const ScoreCsvOptions& options) {
  const bool has_yhat = std::any_of(reports.begin(), reports.end(), [](const auto& r) { return r.q_yhat.has_value(); });
  const bool predicted_rule = options.accuracy.has_value() && has_yhat;
  double bound = 0.0;
  if (options.alpha) {
    bound = predicted_rule ? adjusted_alpha_bound(*options.alpha, *options.accuracy) : *options.alpha;
  }
  std::string out = "id";
  for (int c = 0; c < num_classes; ++c) out += ",q_" + std::to_string(c);
  out += ",q_max";
  if (has_yhat) out += ",q_yhat";
  if (options.alpha) out += ",reject,t1e_bound";
  out += '\n';
  for (const auto& r : reports) {
    out += r.id;
    for (double q : r.q) out += "," + format_double(q);
    out += "," + format_double(r.q_max);
    if (has_yhat) out += "," + (r.q_yhat ? format_double(*r.q_yhat) : std::string());
    if (options.alpha) {
      // Without a prediction for this record fall back to the all-class rule.
      const bool reject = predicted_rule && r.q_yhat ? *r.q_yhat <= *options.alpha : r.q_max <= *options.alpha;
      const double rb = predicted_rule && r.q_yhat ? bound : *options.alpha;
      out += std::string(",") + (reject ? "1" : "0") + "," + format_double(rb);
    }
    out += '\n';
  }
  return out;
}

void write_score_csv(std::span<const DetectionReport> reports, int num_classes, const ScoreCsvOptions& options,
                     const std::filesystem::path& path) {
  write_text(path, format_score_csv(reports, num_classes, options));
}

std::vector<double> read_csv_column(const std::filesystem::path& path, const std::string& column) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kIo, path.string() + " is empty");
  const auto header = split_csv_line(line);
  const auto it = std::find(header.begin(), header.end(), column);
  if (it == header.end()) throw Error(ErrorCode::kInvalidArgument, "column '" + column + "' not in " + path.string());
  const auto idx = static_cast<std::size_t>(it - header.begin());
  std::vector<double> values;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    if (idx >= cells.size() || cells[idx].empty()) continue;
    try {
      std::size_t used = 0;
      values.push_back(std::stod(cells[idx], &used));
      if (used != cells[idx].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidArgument, path.string() + ":" + std::to_string(row) + ": not a number");
    }
  }
  return values;
}

void write_scenario_csv(std::span<const ScenarioRow> rows, const std::filesystem::path& path) {
  std::string out = "scenario,tpr95,auroc\n";
  for (const auto& r : rows) out += r.scenario + "," + format_double(r.tpr95) + "," + format_double(r.auroc) + "\n";
  write_text(path, out);
}

}  // namespace masf
