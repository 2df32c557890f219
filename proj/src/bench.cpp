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

#include "masf/bench.hpp"

#include <Eigen/Dense>
#include <chrono>
#include <fstream>
#include <functional>
#include <memory>
#include <random>
#include <sstream>

#include "masf/error.hpp"
#include "masf/eval.hpp"
#include "masf/quantile_store.hpp"
#include "masf/reductions.hpp"
#include "masf/stats.hpp"
#include "masf/tensor_io.hpp"

namespace masf {

namespace {

using Clock = std::chrono::steady_clock;

// Per-layer state prepared outside the timed region. run() returns a value
// that is folded into a sink so the work cannot be elided.
class Kernel {
 public:
  virtual ~Kernel() = default;
  virtual double run(const LayerTensor& layer) = 0;
};

class MasfKernel : public Kernel {
 public:
  MasfKernel(const LayerShape& s, std::mt19937_64& gen) : p_(s[0]) {
    std::normal_distribution<double> nd;
    std::vector<double> sample(300);
    for (std::uint32_t j = 0; j < s[0]; ++j) {
      for (auto& v : sample) v = 2.0 + nd(gen);
      tables_.push_back(QuantileTable::from_sample(sample, 1.0 / 32.0));
    }
  }
  double run(const LayerTensor& layer) override {
    for (std::uint32_t j = 0; j < layer.channels; ++j) {
      const auto t = tables_[j].lookup_tails(spatial_max(layer.channel(j)));
      p_[j] = stats::two_sided_pvalue(t.right, t.left);
    }
    return stats::simes_inplace(p_);
  }

 private:
  std::vector<QuantileTable> tables_;
  std::vector<double> p_;
};

// float32 throughout, as a framework implementation would run it.
class MahalanobisKernel : public Kernel {
 public:
  MahalanobisKernel(const LayerShape& s, std::size_t classes, std::mt19937_64& gen) {
    const auto d = static_cast<Eigen::Index>(s[0]);
    std::normal_distribution<float> nd;
    means_.resize(static_cast<Eigen::Index>(classes), d);
    for (Eigen::Index i = 0; i < means_.size(); ++i) means_.data()[i] = nd(gen);
    precision_ = Eigen::MatrixXf::Identity(d, d);
    for (Eigen::Index i = 0; i < d; ++i) {
      for (Eigen::Index j = 0; j < i; ++j) precision_(i, j) = precision_(j, i) = 0.01f * nd(gen);
    }
    bias_ = (means_ * precision_).cwiseProduct(means_).rowwise().sum();
    x_.resize(d);
  }
  double run(const LayerTensor& layer) override {
    for (std::uint32_t j = 0; j < layer.channels; ++j) x_[j] = static_cast<float>(spatial_mean(layer.channel(j)));
    y_.noalias() = precision_ * x_;
    scores_.noalias() = means_ * y_;
    // (x - mu)' P (x - mu) = x'Px - 2 mu'Px + mu'P mu, for every class at once.
    return (x_.dot(y_) - 2.0f * scores_.array() + bias_.array()).minCoeff();
  }

 private:
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> means_;
  Eigen::MatrixXf precision_;
  Eigen::VectorXf bias_;
  Eigen::VectorXf x_, y_, scores_;
};

class GramKernel : public Kernel {
 public:
  GramKernel(const LayerShape& s, bool factored, std::mt19937_64& gen) : factored_(factored) {
    std::normal_distribution<double> nd;
    for (std::uint32_t j = 0; j < s[0]; ++j) {
      const double mid = static_cast<double>(s[1]) * s[2] * nd(gen);
      q05_.push_back(mid - 10.0);
      q95_.push_back(mid + 10.0);
    }
    gram_.resize(s[0], s[0]);
    rows_.resize(s[0]);
  }
  double run(const LayerTensor& layer) override {
    if (factored_) {
      const auto rows = gram_p1_rowsum(layer);
      return deviation(rows.data());
    }
    const Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> f(
        layer.values.data(), layer.channels, static_cast<Eigen::Index>(layer.spatial_size()));
    gram_.setZero();
    gram_.selfadjointView<Eigen::Lower>().rankUpdate(f);
    rows_ = (gram_.selfadjointView<Eigen::Lower>() * Eigen::VectorXf::Ones(gram_.rows())).cast<double>();
    return deviation(rows_.data());
  }

 private:
  double deviation(const double* rows) const {
    double total = 0.0;
    for (std::size_t j = 0; j < q05_.size(); ++j) total += delta_star(q05_[j], q95_[j], rows[j]);
    return total;
  }

  bool factored_;
  std::vector<double> q05_, q95_;
  Eigen::MatrixXf gram_;
  Eigen::VectorXd rows_;
};

class NoopKernel : public Kernel {
 public:
  double run(const LayerTensor& layer) override { return layer.channels; }
};

std::unique_ptr<Kernel> make_kernel(BenchStatistic s, const LayerShape& shape, const BenchSpec& spec,
                                    std::mt19937_64& gen) {
  switch (s) {
    case BenchStatistic::kMasf: return std::make_unique<MasfKernel>(shape, gen);
    case BenchStatistic::kMahalanobis: return std::make_unique<MahalanobisKernel>(shape, spec.mahalanobis_classes, gen);
    case BenchStatistic::kGram: return std::make_unique<GramKernel>(shape, false, gen);
    case BenchStatistic::kGramFactored: return std::make_unique<GramKernel>(shape, true, gen);
    case BenchStatistic::kNoop: return std::make_unique<NoopKernel>();
  }
  throw Error(ErrorCode::kInvalidArgument, "unknown statistic");
}

// Welford mean and sample variance.
struct Running {
  std::uint64_t n = 0;
  double mean = 0.0;
  double m2 = 0.0;

  void add(double x) {
    ++n;
    const double d = x - mean;
    mean += d / static_cast<double>(n);
    m2 += d * (x - mean);
  }
  double sd() const { return n > 1 ? std::sqrt(m2 / static_cast<double>(n - 1)) : 0.0; }
};

double ms(Clock::duration d) { return std::chrono::duration<double, std::milli>(d).count(); }

}  // namespace

std::string_view to_string(BenchStatistic s) {
  switch (s) {
    case BenchStatistic::kMasf: return "masf";
    case BenchStatistic::kMahalanobis: return "mahalanobis";
    case BenchStatistic::kGram: return "gram";
    case BenchStatistic::kGramFactored: return "gram-factored";
    case BenchStatistic::kNoop: return "noop";
  }
  return "unknown";
}

BenchStatistic parse_bench_statistic(std::string_view text) {
  for (auto s : {BenchStatistic::kMasf, BenchStatistic::kMahalanobis, BenchStatistic::kGram,
                 BenchStatistic::kGramFactored, BenchStatistic::kNoop}) {
    if (text == to_string(s)) return s;
  }
  throw Error(ErrorCode::kInvalidArgument,
              "unknown statistic '" + std::string(text) + "' (masf, mahalanobis, gram, gram-factored, noop)");
}

std::vector<BenchStatistic> parse_bench_statistics(std::string_view text) {
  std::vector<BenchStatistic> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    const auto end = comma == std::string_view::npos ? text.size() : comma;
    out.push_back(parse_bench_statistic(text.substr(start, end - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

ShapeSet mobilenet_v2_shapes() {
  ShapeSet set{"mobilenet_v2_224", {}};
  std::uint32_t size = 112;
  set.shapes.push_back({32, size, size});  // stem, stride 2
  set.shapes.push_back({32, size, size});  // first block: depthwise, projection
  set.shapes.push_back({16, size, size});
  std::uint32_t in = 16;
  // expansion, output channels, repeats, stride of the first repeat
  const std::uint32_t blocks[6][4] = {{6, 24, 2, 2}, {6, 32, 3, 2}, {6, 64, 4, 2},
                                      {6, 96, 3, 1}, {6, 160, 3, 2}, {6, 320, 1, 1}};
  for (const auto& b : blocks) {
    for (std::uint32_t r = 0; r < b[2]; ++r) {
      const std::uint32_t hidden = in * b[0];
      set.shapes.push_back({hidden, size, size});  // expansion 1x1
      if (r == 0) size /= b[3];
      set.shapes.push_back({hidden, size, size});  // depthwise 3x3
      set.shapes.push_back({b[1], size, size});    // projection 1x1
      in = b[1];
    }
  }
  set.shapes.push_back({1280, size, size});
  set.shapes.push_back({1000, 1, 1});  // classifier
  return set;
}

void BenchSpec::validate() const {
  if (iterations < 1) throw Error(ErrorCode::kInvalidArgument, "iterations must be >= 1");
  if (shapes.shapes.empty()) throw Error(ErrorCode::kInvalidArgument, "no layer shapes");
  if (statistics.empty()) throw Error(ErrorCode::kInvalidArgument, "no statistics selected");
  if (mahalanobis_classes < 1) throw Error(ErrorCode::kInvalidArgument, "mahalanobis classes must be >= 1");
  for (const auto& s : shapes.shapes) {
    if (s[0] == 0 || s[1] == 0 || s[2] == 0) throw Error(ErrorCode::kInvalidArgument, "layer dims must be >= 1");
  }
}

std::vector<BenchResult> run_bench(const BenchSpec& spec) {
  spec.validate();
  if (!Clock::is_steady) throw Error(ErrorCode::kClockUnavailable, "no monotonic clock");

  std::mt19937_64 gen(spec.seed);
  std::normal_distribution<float> nd;
  std::vector<LayerTensor> inputs;
  for (const auto& s : spec.shapes.shapes) {
    LayerTensor t{s[0], s[1], s[2], std::vector<float>(std::size_t{s[0]} * s[1] * s[2])};
    for (auto& v : t.values) v = nd(gen);
    inputs.push_back(std::move(t));
  }

  volatile double sink = 0.0;
  std::vector<BenchResult> results;
  for (auto stat : spec.statistics) {
    std::vector<std::unique_ptr<Kernel>> kernels;
    for (const auto& s : spec.shapes.shapes) kernels.push_back(make_kernel(stat, s, spec, gen));

    for (std::size_t it = 0; it < spec.warmup; ++it) {
      for (std::size_t l = 0; l < inputs.size(); ++l) sink = sink + kernels[l]->run(inputs[l]);
    }
    Running single, total;
    for (std::size_t it = 0; it < spec.iterations; ++it) {
      const auto start = Clock::now();
      auto prev = start;
      for (std::size_t l = 0; l < inputs.size(); ++l) {
        sink = sink + kernels[l]->run(inputs[l]);
        const auto now = Clock::now();
        single.add(ms(now - prev));
        prev = now;
      }
      total.add(ms(prev - start));
    }
    results.push_back({std::string(to_string(stat)), spec.shapes.id, single.mean, single.sd(), total.mean, total.sd()});
  }
  return results;
}

std::string format_bench_report(std::span<const BenchResult> results) {
  std::string out = "statistic,shape_set,single_mean,single_sd,total_mean,total_sd\n";
  for (const auto& r : results) {
    out += r.statistic + "," + r.shape_set + "," + format_double(r.single_mean) + "," + format_double(r.single_sd) +
           "," + format_double(r.total_mean) + "," + format_double(r.total_sd) + "\n";
  }
  return out;
}

void emit_report(std::span<const BenchResult> results, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  f << format_bench_report(results);
  if (!f) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

std::vector<BenchResult> parse_bench_report(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(f, line) || line != "statistic,shape_set,single_mean,single_sd,total_mean,total_sd") {
    throw Error(ErrorCode::kInvalidArgument, path.string() + ": not a bench report");
  }
  std::vector<BenchResult> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != 6) throw Error(ErrorCode::kInvalidArgument, path.string() + ": expected 6 columns");
    try {
      out.push_back({cells[0], cells[1], std::stod(cells[2]), std::stod(cells[3]), std::stod(cells[4]),
                     std::stod(cells[5])});
    } catch (const std::exception&) {
      throw Error(ErrorCode::kInvalidArgument, path.string() + ": bad number in '" + line + "'");
    }
  }
  return out;
}

}  // namespace masf
