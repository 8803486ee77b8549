#pragma once

// Tensor file layout (experts and routers share it):
//
//   "TMCK" | u32 format version | u64 manifest byte length | manifest (JSON text)
//   | tensor data, little-endian f32, in manifest order | SHA-256 of all preceding bytes
//
// The manifest lists every tensor as {name, shape, offset}, offsets in bytes from
// the start of the tensor data.

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "timoe/corpus.hpp"
#include "timoe/error.hpp"
#include "timoe/hash.hpp"
#include "timoe/io.hpp"
#include "timoe/lm.hpp"

namespace timoe {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<float> data;
};

struct TensorFile {
  nlohmann::json manifest = nlohmann::json::object();  // everything except the tensor table
  std::vector<NamedTensor> tensors;
};

inline std::vector<std::uint8_t> encode_tensor_file(const TensorFile& file) {
  nlohmann::json manifest = file.manifest;
  manifest["format_version"] = kCheckpointVersion;
  auto table = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : file.tensors) {
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    require(n == t.data.size(), ErrorCode::ShapeMismatch, "tensor " + t.name + " data/shape mismatch");
    table.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}});
    offset += n * sizeof(float);
  }
  manifest["tensors"] = std::move(table);
  const std::string text = manifest.dump(2);

  io::ByteWriter w;
  w.put_string("TMCK");
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint64_t>(text.size()));
  w.put_string(text);
  for (const auto& t : file.tensors) w.put_bytes(t.data.data(), t.data.size() * sizeof(float));
  const Digest digest = sha256(w.bytes());
  w.put_bytes(digest.data(), digest.size());
  return std::move(w.bytes());
}

inline TensorFile decode_tensor_file(std::span<const std::uint8_t> bytes) {
  constexpr std::size_t kFixed = 4 + 4 + 8;
  require(bytes.size() >= kFixed + 32, ErrorCode::ChecksumMismatch, "file too short");
  const auto body = bytes.first(bytes.size() - 32);
  const Digest expected = sha256(body);
  require(std::equal(expected.begin(), expected.end(), bytes.end() - 32), ErrorCode::ChecksumMismatch,
          "content hash does not match");

  io::ByteReader r(body, ErrorCode::ChecksumMismatch);
  const auto* magic = r.take(4);
  require(std::string(magic, magic + 4) == "TMCK", ErrorCode::ParseError, "not a tensor file");
  const auto version = r.get<std::uint32_t>();
  require(version == kCheckpointVersion, ErrorCode::VersionMismatch,
          "format version " + std::to_string(version) + ", expected " + std::to_string(kCheckpointVersion));
  const auto manifest_len = r.get<std::uint64_t>();
  const auto* mtext = r.take(manifest_len);
  TensorFile file;
  file.manifest = nlohmann::json::parse(mtext, mtext + manifest_len, nullptr, false);
  require(file.manifest.is_object() && file.manifest.contains("tensors"), ErrorCode::ParseError,
          "malformed manifest");

  const std::size_t data_start = r.position();
  for (const auto& entry : file.manifest["tensors"]) {
    NamedTensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    std::size_t n = 1;
    for (auto d : t.shape) n *= d;
    const auto offset = entry.at("offset").get<std::size_t>();
    require(data_start + offset + n * sizeof(float) <= body.size(), ErrorCode::ParseError,
            "tensor " + t.name + " overruns file");
    t.data.resize(n);
    std::memcpy(t.data.data(), body.data() + data_start + offset, n * sizeof(float));
    file.tensors.push_back(std::move(t));
  }
  file.manifest.erase("tensors");
  return file;
}

inline nlohmann::json window_to_json(const TimeWindow& w) {
  return {{"start_year", w.start_year}, {"end_year", w.end_year}, {"label", w.label}};
}

inline TimeWindow window_from_json(const nlohmann::json& j) {
  auto w = make_window(j.at("start_year").get<int>(), j.at("end_year").get<int>());
  if (j.contains("label")) w.label = j["label"].get<std::string>();
  return w;
}

/// Parameters are stored as f32; a Model<float> round-trips bit-exactly.
template <typename T>
TensorFile model_to_tensor_file(const Model<T>& model) {
  TensorFile file;
  file.manifest = {{"kind", "expert"},
                   {"config", model.config.to_json()},
                   {"window", window_to_json(model.window)},
                   {"tokenizer_hash", to_hex(model.tokenizer_hash)},
                   {"metadata", model.metadata}};
  for (const auto& spec : model.layout.tensors) {
    const T* p = model.params.data() + spec.offset;
    file.tensors.push_back({spec.name, spec.shape, std::vector<float>(p, p + spec.size)});
  }
  return file;
}

template <typename T>
Model<T> model_from_tensor_file(const TensorFile& file) {
  require(file.manifest.value("kind", "") == "expert", ErrorCode::ParseError, "not an expert checkpoint");
  Model<T> m;
  m.config = ExpertConfig::from_json(file.manifest.at("config"));
  m.layout = ParamLayout::build(m.config);
  m.window = window_from_json(file.manifest.at("window"));
  m.tokenizer_hash = digest_from_hex(file.manifest.at("tokenizer_hash").get<std::string>());
  if (file.manifest.contains("metadata")) {
    m.metadata = file.manifest["metadata"].get<std::map<std::string, std::string>>();
  }
  require(file.tensors.size() == m.layout.tensors.size(), ErrorCode::ParseError, "tensor count mismatch");
  m.params.resize(m.layout.total);
  for (std::size_t i = 0; i < file.tensors.size(); ++i) {
    const auto& spec = m.layout.tensors[i];
    const auto& t = file.tensors[i];
    require(t.name == spec.name && t.shape == spec.shape, ErrorCode::ParseError,
            "tensor " + t.name + " does not match the configured architecture");
    std::copy(t.data.begin(), t.data.end(), m.params.begin() + static_cast<std::ptrdiff_t>(spec.offset));
  }
  return m;
}

template <typename T>
void save_model(const Model<T>& model, const std::filesystem::path& path) {
  io::write_file(path, encode_tensor_file(model_to_tensor_file(model)));
}

template <typename T>
Model<T> load_model(const std::filesystem::path& path) {
  return model_from_tensor_file<T>(decode_tensor_file(io::read_file(path)));
}

/// SHA-256 of a file's full contents; the registry pins checkpoints by it.
inline Digest file_digest(const std::filesystem::path& path) { return sha256(io::read_file(path)); }

}  // namespace timoe
