#pragma once

// Checkpoint directory layout:
//
//   manifest.txt   plain text, one record per line:
//                    sparse-rag-checkpoint 1
//                    dtype f32|f64
//                    config <field> <value>
//                    tensor <name> <rows> <cols> <byte offset>
//   weights.bin    every tensor, row-major, little-endian, at its offset
//
// The same layout is used for KV cache dumps (see kv_store.hpp), with
// "kvdump" records in place of the config block.

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "sparse_rag/model.hpp"

namespace sparse_rag {

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <typename T>
void write_le(std::ostream& os, const T* data, std::size_t count) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      char buf[sizeof(T)];
      std::memcpy(buf, data + i, sizeof(T));
      std::reverse(buf, buf + sizeof(T));
      os.write(buf, sizeof(T));
    }
  }
}

template <typename T>
void read_le(std::istream& is, T* data, std::size_t count) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(count * sizeof(T)));
  if (!is) throw IoError("checkpoint: weights file is truncated");
  if constexpr (std::endian::native != std::endian::little) {
    for (std::size_t i = 0; i < count; ++i) {
      auto* b = reinterpret_cast<char*>(data + i);
      std::reverse(b, b + sizeof(T));
    }
  }
}

struct TensorRecord {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t offset = 0;
};

struct ManifestData {
  std::string dtype;
  std::map<std::string, std::string> config;
  std::vector<TensorRecord> tensors;
  std::vector<std::string> extra;  // lines not understood by the core parser
};

inline ManifestData read_manifest(const std::filesystem::path& file, const std::string& magic) {
  std::ifstream in(file);
  if (!in) throw IoError("checkpoint: cannot open " + file.string());
  ManifestData m;
  std::string line;
  if (!std::getline(in, line) || line != magic + " 1") {
    throw IoError("checkpoint: " + file.string() + " is not a '" + magic + "' manifest");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string kind;
    ss >> kind;
    if (kind == "dtype") {
      ss >> m.dtype;
    } else if (kind == "config") {
      std::string key, value;
      ss >> key >> value;
      m.config[key] = value;
    } else if (kind == "tensor") {
      TensorRecord r;
      ss >> r.name >> r.rows >> r.cols >> r.offset;
      if (!ss) throw IoError("checkpoint: malformed tensor line: " + line);
      m.tensors.push_back(r);
    } else {
      m.extra.push_back(line);
    }
  }
  return m;
}

inline ModelConfig config_from_manifest(const std::map<std::string, std::string>& kv) {
  auto get = [&](const std::string& key) -> std::string {
    auto it = kv.find(key);
    if (it == kv.end()) throw IoError("checkpoint: manifest is missing config " + key);
    return it->second;
  };
  auto size = [&](const std::string& key) { return static_cast<std::size_t>(std::stoull(get(key))); };
  auto id = [&](const std::string& key) { return static_cast<TokenId>(std::stol(get(key))); };
  ModelConfig c;
  c.num_layers = size("num_layers");
  c.num_heads = size("num_heads");
  c.model_dim = size("model_dim");
  c.head_dim = size("head_dim");
  c.ffn_dim = size("ffn_dim");
  c.vocab_size = size("vocab_size");
  c.max_position = size("max_position");
  c.control_assessment_id = id("control_assessment_id");
  c.control_generation_id = id("control_generation_id");
  c.rate_good_id = id("rate_good_id");
  c.rate_bad_id = id("rate_bad_id");
  c.eos_id = id("eos_id");
  c.pad_id = id("pad_id");
  return c;
}

inline void write_config(std::ostream& os, const ModelConfig& c) {
  os << "config num_layers " << c.num_layers << "\n"
     << "config num_heads " << c.num_heads << "\n"
     << "config model_dim " << c.model_dim << "\n"
     << "config head_dim " << c.head_dim << "\n"
     << "config ffn_dim " << c.ffn_dim << "\n"
     << "config vocab_size " << c.vocab_size << "\n"
     << "config max_position " << c.max_position << "\n"
     << "config control_assessment_id " << c.control_assessment_id << "\n"
     << "config control_generation_id " << c.control_generation_id << "\n"
     << "config rate_good_id " << c.rate_good_id << "\n"
     << "config rate_bad_id " << c.rate_bad_id << "\n"
     << "config eos_id " << c.eos_id << "\n"
     << "config pad_id " << c.pad_id << "\n";
}

}  // namespace detail

template <typename T>
void save_checkpoint(const ModelBundle<T>& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  std::ofstream weights(dir / "weights.bin", std::ios::binary);
  if (!manifest || !weights) throw IoError("checkpoint: cannot write to " + dir.string());
  manifest << "sparse-rag-checkpoint 1\n";
  manifest << "dtype " << detail::dtype_name<T>() << "\n";
  detail::write_config(manifest, model.config);
  std::size_t offset = 0;
  model.weights.visit([&](const std::string& name, const T* data, std::size_t r, std::size_t c) {
    manifest << "tensor " << name << " " << r << " " << c << " " << offset << "\n";
    detail::write_le(weights, data, r * c);
    offset += r * c * sizeof(T);
  });
  if (!manifest || !weights) throw IoError("checkpoint: write failed in " + dir.string());
}

template <typename T = float>
ModelBundle<T> load_checkpoint(const std::filesystem::path& dir) {
  const auto m = detail::read_manifest(dir / "manifest.txt", "sparse-rag-checkpoint");
  if (m.dtype != detail::dtype_name<T>()) {
    throw IoError("checkpoint: stored dtype " + m.dtype + " does not match requested " + detail::dtype_name<T>());
  }
  ModelBundle<T> model{detail::config_from_manifest(m.config), {}};
  model.config.validate();
  model.weights = Weights<T>::zeros(model.config);

  std::ifstream weights(dir / "weights.bin", std::ios::binary);
  if (!weights) throw IoError("checkpoint: cannot open weights.bin in " + dir.string());
  std::size_t idx = 0;
  model.weights.visit([&](const std::string& name, T* data, std::size_t r, std::size_t c) {
    if (idx >= m.tensors.size()) throw IoError("checkpoint: manifest lists too few tensors");
    const auto& rec = m.tensors[idx++];
    if (rec.name != name || rec.rows != r || rec.cols != c) {
      throw IoError("checkpoint: tensor " + rec.name + " does not match the configured shape of " + name);
    }
    weights.seekg(static_cast<std::streamoff>(rec.offset));
    detail::read_le(weights, data, r * c);
  });
  if (idx != m.tensors.size()) throw IoError("checkpoint: manifest lists unexpected tensors");
  return model;
}

}  // namespace sparse_rag
