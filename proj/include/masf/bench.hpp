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

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace masf {

enum class BenchStatistic {
  kMasf,          // spatial max, per-channel tail lookup, Simes
  kMahalanobis,   // spatial mean, LDA distance to every class in matrix form
  kGram,          // materialized power-1 Gram matrix, row sums, delta-star
  kGramFactored,  // same statistic without forming the Gram matrix
  kNoop,          // timing overhead only
};

std::string_view to_string(BenchStatistic s);
BenchStatistic parse_bench_statistic(std::string_view text);
/// Comma-separated list, e.g. "masf,mahalanobis,gram".
std::vector<BenchStatistic> parse_bench_statistics(std::string_view text);

using LayerShape = std::array<std::uint32_t, 3>;  // channels, height, width

struct ShapeSet {
  std::string id;
  std::vector<LayerShape> shapes;
};

/// The 52 convolution outputs and the classifier output of MobileNet-V2
/// (width 1.0, 1000 classes) on a 224x224 input, in execution order.
ShapeSet mobilenet_v2_shapes();

struct BenchSpec {
  ShapeSet shapes = mobilenet_v2_shapes();
  std::vector<BenchStatistic> statistics = {BenchStatistic::kMasf, BenchStatistic::kMahalanobis,
                                            BenchStatistic::kGram};
  std::size_t warmup = 1000;
  std::size_t iterations = 10000;
  std::size_t mahalanobis_classes = 1000;
  std::uint64_t seed = 0;

  /// Throws InvalidArgument.
  void validate() const;
};

/// Milliseconds. "single" is one layer's statistic, averaged over layers and
/// iterations; "total" is one full pass over every layer.
struct BenchResult {
  std::string statistic;
  std::string shape_set;
  double single_mean = 0.0;
  double single_sd = 0.0;
  double total_mean = 0.0;
  double total_sd = 0.0;

  friend bool operator==(const BenchResult&, const BenchResult&) = default;
};

/// Times each statistic in turn on inputs generated up front. Layers run
/// sequentially and each statistic finishes before the next starts.
std::vector<BenchResult> run_bench(const BenchSpec& spec);

/// CSV: statistic,shape_set,single_mean,single_sd,total_mean,total_sd.
std::string format_bench_report(std::span<const BenchResult> results);
void emit_report(std::span<const BenchResult> results, const std::filesystem::path& path);
std::vector<BenchResult> parse_bench_report(const std::filesystem::path& path);

}  // namespace masf
