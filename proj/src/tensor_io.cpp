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

#include "masf/tensor_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <map>
#include <nlohmann/json.hpp>

#include "binary_io.hpp"

namespace masf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::size_t element_count(std::span<const std::uint32_t> dims) {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void decode_floats(const char* src, std::size_t count, float* dst) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src, count * sizeof(float));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      dst[i] = detail::get_le<float>(reinterpret_cast<const unsigned char*>(src + 4 * i));
    }
  }
}

TensorHeader parse_header(std::ifstream& in, const fs::path& path) {
  char fixed[8];
  if (!in.read(fixed, 8)) {
    throw Error(ErrorCode::kIo, "truncated tensor header: " + path.string());
  }
  if (std::memcmp(fixed, kTensorMagic, 4) != 0) {
    throw Error(ErrorCode::kIo, "bad tensor magic: " + path.string());
  }
  const auto* u = reinterpret_cast<const unsigned char*>(fixed);
  TensorHeader h;
  h.version = detail::get_le<std::uint16_t>(u + 4);
  h.dtype = u[6];
  const std::uint8_t rank = u[7];
  if (h.version != kTensorVersion) {
    throw Error(ErrorCode::kIo, "unsupported tensor version " + std::to_string(h.version));
  }
  if (h.dtype != kDtypeFloat32) {
    throw Error(ErrorCode::kIo, "unsupported dtype code " + std::to_string(h.dtype));
  }
  std::string dims_bytes(4u * rank, '\0');
  if (!in.read(dims_bytes.data(), static_cast<std::streamsize>(dims_bytes.size()))) {
    throw Error(ErrorCode::kIo, "truncated tensor dims: " + path.string());
  }
  for (std::uint8_t i = 0; i < rank; ++i) {
    h.dims.push_back(
        detail::get_le<std::uint32_t>(reinterpret_cast<const unsigned char*>(dims_bytes.data()) + 4 * i));
  }
  return h;
}

std::ifstream open_input(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  return in;
}

}  // namespace

void write_tensor(std::span<const std::uint32_t> dims, std::span<const float> values,
                  const fs::path& path) {
  if (dims.empty() || dims.size() > 255) {
    throw Error(ErrorCode::kLengthMismatch, "tensor rank must be in [1, 255]");
  }
  if (element_count(dims) != values.size()) {
    throw Error(ErrorCode::kLengthMismatch,
                "expected " + std::to_string(element_count(dims)) + " values, got " +
                    std::to_string(values.size()));
  }
  std::string bytes(kTensorMagic, 4);
  detail::put_le<std::uint16_t>(bytes, kTensorVersion);
  detail::put_le<std::uint8_t>(bytes, kDtypeFloat32);
  detail::put_le<std::uint8_t>(bytes, static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) detail::put_le<std::uint32_t>(bytes, d);
  bytes.reserve(bytes.size() + 4 * values.size());
  for (float v : values) detail::put_le<float>(bytes, v);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed: " + path.string());
}

TensorHeader read_tensor_header(const fs::path& path) {
  auto in = open_input(path);
  return parse_header(in, path);
}

Tensor read_tensor(const fs::path& path) {
  auto in = open_input(path);
  TensorHeader h = parse_header(in, path);
  Tensor t;
  t.dims = h.dims;
  const std::size_t n = element_count(t.dims);
  std::string payload(4 * n, '\0');
  if (!in.read(payload.data(), static_cast<std::streamsize>(payload.size()))) {
    throw Error(ErrorCode::kIo, "truncated tensor payload: " + path.string());
  }
  t.values.resize(n);
  decode_floats(payload.data(), n, t.values.data());
  return t;
}

std::size_t Manifest::class_count(ClassId c) const {
  return static_cast<std::size_t>(
      std::count_if(samples.begin(), samples.end(), [c](const SampleEntry& s) { return s.y == c; }));
}

namespace {

[[noreturn]] void malformed(const std::string& what) {
  throw Error(ErrorCode::kMalformedManifest, what);
}

std::uint32_t as_u32(const json& j, const char* field) {
  if (!j.contains(field) || !j.at(field).is_number_integer() || j.at(field).get<long long>() < 0) {
    malformed(std::string("missing or invalid field '") + field + "'");
  }
  return j.at(field).get<std::uint32_t>();
}

std::optional<ClassId> parse_label(const json& sample, const char* field, int k) {
  if (!sample.contains(field) || sample.at(field).is_null()) return std::nullopt;
  const auto& v = sample.at(field);
  if (!v.is_number_integer()) malformed(std::string("label '") + field + "' is not an integer");
  const auto label = v.get<long long>();
  if (label < 0 || label >= k) {
    malformed(std::string("label '") + field + "' = " + std::to_string(label) + " outside [0, " +
              std::to_string(k) + ")");
  }
  return static_cast<ClassId>(label);
}

}  // namespace

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open manifest " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    malformed(std::string("parse error: ") + e.what());
  }
  if (!doc.is_object()) malformed("manifest root must be an object");

  Manifest m;
  m.base_dir = path.parent_path();
  m.dataset = doc.value("dataset", std::string{});
  if (!doc.contains("k") || !doc.at("k").is_number_integer() || doc.at("k").get<long long>() < 1) {
    malformed("field 'k' must be a positive integer");
  }
  m.num_classes = doc.at("k").get<int>();

  if (!doc.contains("layers") || !doc.at("layers").is_array() || doc.at("layers").empty()) {
    malformed("field 'layers' must be a nonempty array");
  }
  std::map<std::string, std::size_t> layer_index;
  for (const auto& l : doc.at("layers")) {
    LayerDescriptor d;
    d.id = as_u32(l, "id");
    d.name = l.value("name", std::string{});
    d.channels = as_u32(l, "channels");
    d.height = as_u32(l, "height");
    d.width = as_u32(l, "width");
    if (d.channels == 0 || d.height == 0 || d.width == 0) malformed("layer dims must be >= 1");
    if (!layer_index.emplace(std::to_string(d.id), m.layers.size()).second) {
      malformed("duplicate layer id " + std::to_string(d.id));
    }
    m.layers.push_back(std::move(d));
  }

  if (!doc.contains("samples") || !doc.at("samples").is_array()) {
    malformed("field 'samples' must be an array");
  }
  std::map<fs::path, TensorHeader> headers;
  for (const auto& s : doc.at("samples")) {
    SampleEntry e;
    if (!s.contains("id")) malformed("sample without 'id'");
    e.id = s.at("id").is_string() ? s.at("id").get<std::string>() : s.at("id").dump();
    e.y = parse_label(s, "y", m.num_classes);
    e.y_hat = parse_label(s, "y_hat", m.num_classes);
    if (!s.contains("tensors") || !s.at("tensors").is_object()) {
      malformed("sample '" + e.id + "' lacks a 'tensors' object");
    }
    const auto& tensors = s.at("tensors");
    if (tensors.size() != m.layers.size()) {
      malformed("sample '" + e.id + "' has " + std::to_string(tensors.size()) + " tensors, expected " +
                std::to_string(m.layers.size()));
    }
    e.tensors.resize(m.layers.size());
    for (const auto& [key, ref] : tensors.items()) {
      auto it = layer_index.find(key);
      if (it == layer_index.end()) malformed("sample '" + e.id + "' references unknown layer " + key);
      TensorRef r;
      if (ref.is_string()) {
        r.path = ref.get<std::string>();
      } else if (ref.is_object() && ref.contains("path") && ref.at("path").is_string()) {
        r.path = ref.at("path").get<std::string>();
        if (ref.contains("index")) r.index = as_u32(ref, "index");
      } else {
        malformed("bad tensor reference for sample '" + e.id + "'");
      }
      e.tensors[it->second] = std::move(r);
    }

    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      const auto full = m.resolve(e.tensors[l].path);
      auto hit = headers.find(full);
      if (hit == headers.end()) {
        if (!fs::exists(full)) throw Error(ErrorCode::kMissingTensor, full.string());
        hit = headers.emplace(full, read_tensor_header(full)).first;
      }
      const auto& dims = hit->second.dims;
      const auto& d = m.layers[l];
      const std::vector<std::uint32_t> want{d.channels, d.height, d.width};
      const bool batched = e.tensors[l].index.has_value();
      bool ok = false;
      if (!batched && dims.size() == 3) {
        ok = dims == want;
      } else if (batched && dims.size() == 4) {
        ok = std::equal(want.begin(), want.end(), dims.begin() + 1) && *e.tensors[l].index < dims[0];
      }
      if (!ok) {
        std::string got;
        for (auto x : dims) got += std::to_string(x) + " ";
        throw Error(ErrorCode::kShapeMismatch, "sample '" + e.id + "' layer " + std::to_string(d.id) +
                                                   " has dims [ " + got + "]");
      }
    }
    m.samples.push_back(std::move(e));
  }
  return m;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  json doc;
  doc["dataset"] = manifest.dataset;
  doc["k"] = manifest.num_classes;
  doc["layers"] = json::array();
  for (const auto& l : manifest.layers) {
    doc["layers"].push_back(
        {{"id", l.id}, {"name", l.name}, {"channels", l.channels}, {"height", l.height}, {"width", l.width}});
  }
  doc["samples"] = json::array();
  for (const auto& s : manifest.samples) {
    json js;
    js["id"] = s.id;
    json tensors = json::object();
    for (std::size_t l = 0; l < s.tensors.size(); ++l) {
      const auto& r = s.tensors[l];
      const auto key = std::to_string(manifest.layers.at(l).id);
      if (r.index) {
        tensors[key] = {{"path", r.path.generic_string()}, {"index", *r.index}};
      } else {
        tensors[key] = r.path.generic_string();
      }
    }
    js["tensors"] = std::move(tensors);
    if (s.y) js["y"] = *s.y;
    if (s.y_hat) js["y_hat"] = *s.y_hat;
    doc["samples"].push_back(std::move(js));
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write manifest " + path.string());
  out << doc.dump(1) << '\n';
}

bool all_finite(const FeatureRecord& record) {
  for (const auto& layer : record.layers) {
    for (float v : layer.values) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

namespace {

FeatureRecord load_unchecked(const Manifest& manifest, std::size_t index) {
  const auto& entry = manifest.samples.at(index);
  FeatureRecord rec;
  rec.id = entry.id;
  rec.y = entry.y;
  rec.y_hat = entry.y_hat;
  rec.layers.reserve(manifest.layers.size());
  for (std::size_t l = 0; l < manifest.layers.size(); ++l) {
    const auto& d = manifest.layers[l];
    const auto& ref = entry.tensors[l];
    const auto path = manifest.resolve(ref.path);
    LayerTensor lt{d.channels, d.height, d.width, {}};
    const std::size_t n = std::size_t{d.channels} * d.height * d.width;

    auto in = open_input(path);
    TensorHeader h = parse_header(in, path);
    std::size_t offset = 0;
    if (ref.index) {
      if (h.dims.size() != 4 || *ref.index >= h.dims[0]) {
        throw Error(ErrorCode::kShapeMismatch, "batch index out of range in " + path.string());
      }
      offset = std::size_t{*ref.index} * n * 4;
    } else if (h.dims != std::vector<std::uint32_t>{d.channels, d.height, d.width}) {
      throw Error(ErrorCode::kShapeMismatch, "tensor dims changed on disk: " + path.string());
    }
    in.seekg(static_cast<std::streamoff>(h.header_bytes() + offset));
    std::string payload(4 * n, '\0');
    if (!in.read(payload.data(), static_cast<std::streamsize>(payload.size()))) {
      throw Error(ErrorCode::kIo, "truncated tensor payload: " + path.string());
    }
    lt.values.resize(n);
    decode_floats(payload.data(), n, lt.values.data());
    rec.layers.push_back(std::move(lt));
  }
  return rec;
}

}  // namespace

FeatureRecord load_record(const Manifest& manifest, std::size_t index) {
  FeatureRecord rec = load_unchecked(manifest, index);
  if (!all_finite(rec)) {
    throw Error(ErrorCode::kNonFiniteTensor, "sample '" + rec.id + "' contains NaN/Inf");
  }
  return rec;
}

RecordStream::RecordStream(const Manifest& manifest, StreamOptions options)
    : manifest_(&manifest), options_(options) {
  if (options_.class_filter) {
    for (const auto& s : manifest.samples) {
      if (!s.y) throw Error(ErrorCode::kMissingLabels, "class filter requires labels; '" + s.id + "' has none");
    }
  }
}

std::optional<FeatureRecord> RecordStream::next() {
  while (cursor_ < manifest_->samples.size()) {
    const std::size_t i = cursor_++;
    if (options_.class_filter && manifest_->samples[i].y != options_.class_filter) continue;
    FeatureRecord rec = load_unchecked(*manifest_, i);
    if (!all_finite(rec)) {
      if (!options_.quarantine) {
        throw Error(ErrorCode::kNonFiniteTensor, "sample '" + rec.id + "' contains NaN/Inf");
      }
      quarantined_.push_back(rec.id);
      continue;
    }
    return rec;
  }
  return std::nullopt;
}

std::vector<FeatureRecord> stream_records(const Manifest& manifest, StreamOptions options) {
  RecordStream stream(manifest, options);
  std::vector<FeatureRecord> out;
  while (auto r = stream.next()) out.push_back(std::move(*r));
  return out;
}

}  // namespace masf
