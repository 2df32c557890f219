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

#include "cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <cmath>
#include <exception>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "masf/bench.hpp"
#include "masf/detector.hpp"
#include "masf/error.hpp"
#include "masf/eval.hpp"
#include "masf/synthetic.hpp"
#include "masf/tensor_io.hpp"

namespace masf::cli {

namespace {

int exit_code(const Error& e) {
  switch (e.code()) {
    case ErrorCode::kInsufficientSamples:
    case ErrorCode::kMissingLabels:
    case ErrorCode::kInsufficientData:
    case ErrorCode::kTooFewSamples:
    case ErrorCode::kEmptyScores:
      return kExitInsufficient;
    case ErrorCode::kShapeMismatch:
    case ErrorCode::kDimensionMismatch:
      return kExitShape;
    case ErrorCode::kInvalidScheme:
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kOutOfRange:
      return kExitUsage;
    default:
      return kExitFailure;
  }
}

std::vector<std::string> split_text(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(text);
  while (std::getline(in, cell, sep)) out.push_back(cell);
  return out;
}

double parse_number(const std::string& text, const std::string& flag) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::kInvalidArgument, flag + ": '" + text + "' is not a number");
}

unsigned thread_count(unsigned requested) {
  return requested > 0 ? requested : std::max(1u, std::thread::hardware_concurrency());
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::kIo, "cannot open " + path.string() + " for writing");
  f << text;
  if (!f) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

// --- shared option groups ------------------------------------------------

struct TrackerFlags {
  std::size_t batch_size = 1000;
  std::string percentiles;
  std::size_t tail_k = 200;
  std::size_t tail_grid = 10;
  std::string lookup = "step";
  double resolution = 1e-3;
  std::optional<double> ridge;

  void attach(CLI::App* app) {
    app->add_option("--batch-size", batch_size, "Calibration batch size per class")->capture_default_str();
    app->add_option("--percentiles", percentiles, "Comma-separated body percentiles in (0,1)");
    app->add_option("--tail-k", tail_k, "Extremes kept exactly per tail")->capture_default_str();
    app->add_option("--tail-grid", tail_grid, "Grid points taken from each tail")->capture_default_str();
    app->add_option("--lookup", lookup, "Channel table lookup: step or linear")
        ->check(CLI::IsMember({"step", "linear"}))
        ->capture_default_str();
    app->add_option("--resolution", resolution, "Level resolution of layer and final tables")
        ->check(CLI::Range(1e-9, 0.5))
        ->capture_default_str();
    app->add_option("--ridge", ridge, "Mahalanobis covariance ridge (default scales with the trace)");
  }

  CalibrationOptions options(SplitMode split, unsigned threads) const {
    CalibrationOptions o;
    o.split = split;
    o.tracker.batch_size = batch_size;
    if (!percentiles.empty()) {
      o.tracker.body_percentiles.clear();
      for (const auto& p : split_list()) o.tracker.body_percentiles.push_back(parse_number(p, "--percentiles"));
    }
    o.tracker.tail_k = tail_k;
    o.tracker.tail_grid = tail_grid;
    o.tracker.lookup = lookup == "linear" ? LookupMode::kLinear : LookupMode::kStep;
    o.table_resolution = resolution;
    o.ridge = ridge;
    o.threads = thread_count(threads);
    o.tracker.validate();
    return o;
  }

 private:
  std::vector<std::string> split_list() const { return split_text(percentiles, ','); }
};

struct SchemeFlags {
  std::string scheme;
  std::string split = "reuse";
  double sample_rate = 1.0;
  std::uint64_t seed = 0;
  std::string layers;
  unsigned threads = 0;

  void attach(CLI::App* app, const std::string& default_split) {
    split = default_split;
    app->add_option("--scheme", scheme, "Reduction scheme <spatial>-<channel>-<layer>, e.g. max-simes-fisher")
        ->required();
    app->add_option("--split", split, "Calibration split: reuse or disjoint")
        ->check(CLI::IsMember({"reuse", "disjoint"}))
        ->capture_default_str();
    app->add_option("--sample-rate", sample_rate, "Share of channels monitored per layer")
        ->check(CLI::Range(1e-12, 1.0))
        ->capture_default_str();
    app->add_option("--seed", seed, "Seed for channel sampling")->capture_default_str();
    app->add_option("--layers", layers, "Comma-separated layer names or positions to monitor (default all)");
    app->add_option("--threads", threads, "Worker threads (0: all cores)")->capture_default_str();
  }

  DetectorScheme build(const std::vector<LayerDescriptor>& manifest_layers) const {
    std::vector<std::uint32_t> monitored;
    if (!layers.empty()) {
      for (const auto& token : split_text(layers, ',')) {
        const auto it = std::find_if(manifest_layers.begin(), manifest_layers.end(),
                                     [&](const LayerDescriptor& d) { return d.name == token; });
        if (it != manifest_layers.end()) {
          monitored.push_back(static_cast<std::uint32_t>(it - manifest_layers.begin()));
        } else {
          const double pos = parse_number(token, "--layers");
          if (pos < 0 || pos != std::floor(pos)) throw Error(ErrorCode::kInvalidArgument, "--layers: bad position " + token);
          monitored.push_back(static_cast<std::uint32_t>(pos));
        }
      }
      std::sort(monitored.begin(), monitored.end());
      monitored.erase(std::unique(monitored.begin(), monitored.end()), monitored.end());
    }
    return make_scheme(Scheme::parse(scheme), manifest_layers, sample_rate, seed, monitored);
  }
};

// --- subcommands ---------------------------------------------------------

struct CalibrateCmd {
  std::string manifest, out;
  SchemeFlags scheme;
  TrackerFlags tracker;

  void attach(CLI::App* app) {
    app->add_option("--manifest", manifest, "Labeled calibration manifest")->required();
    app->add_option("--out", out, "Detector artifact to write")->required();
    scheme.attach(app, "reuse");
    tracker.attach(app);
  }

  int run(std::ostream& out_stream, std::ostream& err) const {
    // Flag-only validation first, then IO.
    const auto split = parse_split_mode(scheme.split);
    const auto options = tracker.options(split, scheme.threads);
    Scheme::parse(scheme.scheme);
    const ManifestSource source(read_manifest(manifest));
    const auto s = scheme.build(source.layers());
    err << "calibrating " << s.reductions.to_string() << " on " << manifest << " (" << scheme.split << ")\n";
    const auto det = calibrate(source, s, options);
    save_detector(det, out);
    for (int c = 0; c < det.num_classes(); ++c) {
      const auto& info = det.calibration(c);
      out_stream << "class " << c << ": phase1 " << info.phase1_samples << ", phase2 " << info.phase2_samples << "\n";
    }
    out_stream << "wrote " << out << " (" << det.channel_table_count() << " channel tables)\n";
    return kExitOk;
  }
};

struct ScoreCmd {
  std::string detector, manifest, out;
  std::optional<double> alpha, accuracy;
  unsigned threads = 0;
  bool quarantine = false;

  void attach(CLI::App* app) {
    app->add_option("--detector", detector, "Detector artifact")->required();
    app->add_option("--manifest", manifest, "Manifest of records to score")->required();
    app->add_option("--out", out, "Score CSV to write (default stdout)");
    auto* a = app->add_option("--alpha", alpha, "Significance level; adds reject and t1e_bound columns")
                  ->check(CLI::Range(1e-300, 1.0 - 1e-16));
    app->add_option("--accuracy", accuracy, "Classifier accuracy estimate; tests the predicted class only")
        ->check(CLI::Range(0.0, 1.0))
        ->needs(a);
    app->add_option("--threads", threads, "Worker threads (0: all cores)")->capture_default_str();
    app->add_flag("--quarantine", quarantine, "Skip records holding NaN/Inf instead of failing");
  }

  int run(std::ostream& out_stream, std::ostream& err) const {
    const auto det = load_detector(detector);
    const auto m = read_manifest(manifest);
    const std::size_t n = m.samples.size();
    std::vector<std::optional<DetectionReport>> reports(n);
    std::vector<std::exception_ptr> errors(n);
    const unsigned workers = std::min<unsigned>(thread_count(threads), static_cast<unsigned>(std::max<std::size_t>(n, 1)));
    auto work = [&](unsigned w) {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          reports[i] = det.score_all_classes(load_record(m, i));
        } catch (const Error& e) {
          if (!(quarantine && e.code() == ErrorCode::kNonFiniteTensor)) errors[i] = std::current_exception();
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    std::vector<std::thread> pool;
    for (unsigned w = 1; w < workers; ++w) pool.emplace_back(work, w);
    work(0);
    for (auto& t : pool) t.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
    std::vector<DetectionReport> kept;
    for (std::size_t i = 0; i < n; ++i) {
      if (reports[i]) {
        kept.push_back(std::move(*reports[i]));
      } else {
        err << "quarantined " << m.samples[i].id << "\n";
      }
    }
    const auto csv = format_score_csv(kept, det.num_classes(), {alpha, accuracy});
    if (out.empty()) {
      out_stream << csv;
    } else {
      write_file(out, csv);
      err << "scored " << kept.size() << " records into " << out << "\n";
    }
    return kExitOk;
  }
};

struct EvaluateCmd {
  std::string in, ood, column = "q_max", scenario = "scenario", report;
  double tnr = 0.95;

  void attach(CLI::App* app) {
    app->add_option("--in", in, "Score CSV of in-distribution records")->required();
    app->add_option("--out", ood, "Score CSV of out-of-distribution records")->required();
    app->add_option("--column", column, "Score column")->capture_default_str();
    app->add_option("--tnr", tnr, "True negative rate for the threshold")
        ->check(CLI::Range(1e-9, 1.0 - 1e-9))
        ->capture_default_str();
    app->add_option("--scenario", scenario, "Scenario label for --report")->capture_default_str();
    app->add_option("--report", report, "Scenario CSV to write (scenario,tpr95,auroc)");
  }

  int run(std::ostream& out_stream, std::ostream&) const {
    const auto a = read_csv_column(in, column);
    const auto b = read_csv_column(ood, column);
    const auto t = tpr_at_tnr(a, b, tnr);
    const double area = auroc(a, b);
    out_stream << "threshold " << format_double(t.threshold) << "\n"
               << "tpr " << format_double(t.tpr) << "\n"
               << "auroc " << format_double(area) << "\n";
    if (!report.empty()) {
      const std::vector<ScenarioRow> rows = {{scenario, t.tpr, area}};
      write_scenario_csv(rows, report);
    }
    return kExitOk;
  }
};

struct ValidateCmd {
  std::string manifest, test, out, qq;
  double holdout = 0.2;
  SchemeFlags scheme;
  TrackerFlags tracker;
  double level = 0.01;

  void attach(CLI::App* app) {
    app->add_option("--manifest", manifest, "Labeled manifest")->required();
    app->add_option("--test", test, "Labeled held-out manifest (default: hold out part of --manifest)");
    app->add_option("--holdout", holdout, "Share of each class held out when --test is absent")
        ->check(CLI::Range(1e-9, 1.0 - 1e-9))
        ->capture_default_str();
    app->add_option("--out", out, "KS report CSV (class,n,ks_distance,ks_pvalue)");
    app->add_option("--qq", qq, "QQ CSV of the pooled p-values");
    app->add_option("--level", level, "KS significance level for the verdict")->capture_default_str();
    scheme.attach(app, "disjoint");
    tracker.attach(app);
  }

  int run(std::ostream& out_stream, std::ostream& err) const {
    const auto split = parse_split_mode(scheme.split);
    const auto options = tracker.options(split, scheme.threads);
    Scheme::parse(scheme.scheme);

    auto m = read_manifest(manifest);
    Manifest cal = m, held = m;
    cal.samples.clear();
    held.samples.clear();
    if (!test.empty()) {
      cal = m;
      held = read_manifest(test);
      if (held.layers != m.layers) throw Error(ErrorCode::kShapeMismatch, "--test layers differ from --manifest");
    } else {
      std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(m.num_classes));
      for (std::size_t i = 0; i < m.samples.size(); ++i) {
        const auto& y = m.samples[i].y;
        if (!y) throw Error(ErrorCode::kMissingLabels, "sample '" + m.samples[i].id + "' has no label");
        if (*y < 0 || *y >= m.num_classes) throw Error(ErrorCode::kMalformedManifest, "label out of range");
        by_class[static_cast<std::size_t>(*y)].push_back(i);
      }
      for (const auto& idx : by_class) {
        const auto keep = idx.size() - static_cast<std::size_t>(std::ceil(holdout * static_cast<double>(idx.size())));
        for (std::size_t r = 0; r < idx.size(); ++r) (r < keep ? cal : held).samples.push_back(m.samples[idx[r]]);
      }
    }

    const ManifestSource source(cal);
    const auto det = calibrate(source, scheme.build(source.layers()), options);
    err << "calibrated " << scheme.scheme << " (" << scheme.split << "), scoring " << held.samples.size()
        << " held-out records\n";

    std::vector<std::vector<double>> per_class(static_cast<std::size_t>(det.num_classes()));
    std::vector<double> pooled;
    RecordStream stream(held);
    while (auto r = stream.next()) {
      if (!r->y) throw Error(ErrorCode::kMissingLabels, "held-out sample '" + r->id + "' has no label");
      const double q = det.score(*r, *r->y);
      per_class.at(static_cast<std::size_t>(*r->y)).push_back(q);
      pooled.push_back(q);
    }

    std::string csv = "class,n,ks_distance,ks_pvalue\n";
    bool all_pass = true;
    auto report = [&](const std::string& label, const std::vector<double>& q) {
      if (q.size() < 20) {
        out_stream << label << ": n=" << q.size() << " (too few for KS)\n";
        return;
      }
      const auto ks = ks_uniformity(q);
      const bool pass = ks.pvalue > level;
      all_pass = all_pass && pass;
      out_stream << label << ": n=" << q.size() << " ks_distance=" << format_double(ks.distance)
                 << " ks_pvalue=" << format_double(ks.pvalue) << (pass ? " uniform" : " NOT uniform") << "\n";
      csv += label + "," + std::to_string(q.size()) + "," + format_double(ks.distance) + "," +
             format_double(ks.pvalue) + "\n";
    };
    for (std::size_t c = 0; c < per_class.size(); ++c) report(std::to_string(c), per_class[c]);
    report("all", pooled);
    out_stream << (all_pass ? "verdict: p-values consistent with uniform\n"
                            : "verdict: uniformity rejected\n");
    if (!out.empty()) write_file(out, csv);
    if (!qq.empty() && !pooled.empty()) qq_export(pooled, qq);
    return kExitOk;
  }
};

struct BenchCmd {
  std::string stats = "masf,mahalanobis,gram";
  std::size_t iterations = 10000, warmup = 1000, classes = 1000;
  std::uint64_t seed = 0;
  std::string out;

  void attach(CLI::App* app) {
    app->add_option("--stats", stats, "Statistics: masf, mahalanobis, gram, gram-factored, noop")
        ->capture_default_str();
    app->add_option("--iterations", iterations, "Measured passes over all layers")->capture_default_str();
    app->add_option("--warmup", warmup, "Untimed passes before measuring")->capture_default_str();
    app->add_option("--classes", classes, "Class count for the Mahalanobis statistic")->capture_default_str();
    app->add_option("--seed", seed, "Seed for the synthetic inputs")->capture_default_str();
    app->add_option("--out", out, "Report CSV to write (default stdout)");
  }

  int run(std::ostream& out_stream, std::ostream& err) const {
    BenchSpec spec;
    spec.statistics = parse_bench_statistics(stats);
    spec.iterations = iterations;
    spec.warmup = warmup;
    spec.mahalanobis_classes = classes;
    spec.seed = seed;
    spec.validate();
    err << "timing " << stats << " on " << spec.shapes.id << " (" << spec.shapes.shapes.size() << " layers), "
        << warmup << " + " << iterations << " passes\n";
    auto results = run_bench(spec);
    const auto csv = format_bench_report(results);
    if (out.empty()) {
      out_stream << csv;
    } else {
      write_file(out, csv);
    }
    std::sort(results.begin(), results.end(),
              [](const BenchResult& a, const BenchResult& b) { return a.single_mean < b.single_mean; });
    out_stream << "ordering:";
    for (std::size_t i = 0; i < results.size(); ++i) out_stream << (i ? " < " : " ") << results[i].statistic;
    out_stream << "\n";
    return kExitOk;
  }
};

struct GenerateCmd {
  std::string out, dataset = "synthetic", layers = "64x8x8,128x4x4,128x4x4,256x2x2", pattern = "global";
  int classes = 2;
  std::size_t per_class = 1000;
  std::uint64_t seed = 0, stream = 0;
  double fraction = 0.0, magnitude = 0.0;
  bool unlabeled = false;

  void attach(CLI::App* app) {
    app->add_option("--out", out, "Output directory")->required();
    app->add_option("--dataset", dataset, "Dataset name in the manifest")->capture_default_str();
    app->add_option("--classes", classes, "Number of classes")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--layers", layers, "Comma-separated CxHxW layer shapes")->capture_default_str();
    app->add_option("--per-class", per_class, "Records per class")->check(CLI::PositiveNumber)->capture_default_str();
    app->add_option("--seed", seed, "Seed of the class-conditional model")->capture_default_str();
    app->add_option("--stream", stream, "Independent draw index (e.g. 0 calibration, 1 test)")->capture_default_str();
    app->add_option("--shift-fraction", fraction, "Share of channels shifted")
        ->check(CLI::Range(0.0, 1.0))
        ->capture_default_str();
    app->add_option("--shift-magnitude", magnitude, "Shift in channel sd units")->capture_default_str();
    app->add_option("--shift-pattern", pattern, "global or single-pixel")
        ->check(CLI::IsMember({"global", "single-pixel"}))
        ->capture_default_str();
    app->add_flag("--unlabeled", unlabeled, "Omit true labels from the manifest");
  }

  int run(std::ostream& out_stream, std::ostream&) const {
    std::vector<std::array<std::uint32_t, 3>> shapes;
    for (const auto& token : split_text(layers, ',')) {
      const auto dims = split_text(token, 'x');
      if (dims.size() != 3) throw Error(ErrorCode::kInvalidArgument, "--layers: expected CxHxW, got '" + token + "'");
      std::array<std::uint32_t, 3> s{};
      for (std::size_t i = 0; i < 3; ++i) {
        const double v = parse_number(dims[i], "--layers");
        if (v < 1 || v != std::floor(v) || v > 1e9) throw Error(ErrorCode::kInvalidArgument, "--layers: bad dim in '" + token + "'");
        s[i] = static_cast<std::uint32_t>(v);
      }
      shapes.push_back(s);
    }
    SyntheticSpec spec{classes, make_layers(shapes), {fraction, magnitude, parse_shift_pattern(pattern)}, seed};
    const SyntheticSource source(spec, per_class, stream);
    const auto path = write_synthetic(source, out, dataset, !unlabeled);
    out_stream << "wrote " << path.string() << " (" << per_class * static_cast<std::size_t>(classes) << " records)\n";
    return kExitOk;
  }
};

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical p-value OOD detector: calibrate, score, evaluate, validate, bench, generate", "masf"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "masf 0.1.0");

  CalibrateCmd calibrate_cmd;
  ScoreCmd score_cmd;
  EvaluateCmd evaluate_cmd;
  ValidateCmd validate_cmd;
  BenchCmd bench_cmd;
  GenerateCmd generate_cmd;
  auto* calibrate_app = app.add_subcommand("calibrate", "Calibrate a detector on a labeled manifest");
  auto* score_app = app.add_subcommand("score", "Score a manifest with a calibrated detector");
  auto* evaluate_app = app.add_subcommand("evaluate", "TPR at 95% TNR and AUROC from two score CSVs");
  auto* validate_app = app.add_subcommand("validate", "KS uniformity of held-out class p-values");
  auto* bench_app = app.add_subcommand("bench", "Test-statistic computation time on MobileNet-V2 shapes");
  auto* generate_app = app.add_subcommand("generate", "Write a synthetic feature-map manifest");
  calibrate_cmd.attach(calibrate_app);
  score_cmd.attach(score_app);
  evaluate_cmd.attach(evaluate_app);
  validate_cmd.attach(validate_app);
  bench_cmd.attach(bench_app);
  generate_cmd.attach(generate_app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (calibrate_app->parsed()) return calibrate_cmd.run(out, err);
    if (score_app->parsed()) return score_cmd.run(out, err);
    if (evaluate_app->parsed()) return evaluate_cmd.run(out, err);
    if (validate_app->parsed()) return validate_cmd.run(out, err);
    if (bench_app->parsed()) return bench_cmd.run(out, err);
    if (generate_app->parsed()) return generate_cmd.run(out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}

}  // namespace masf::cli
