// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint and calibration-corpus file formats.
//
// Checkpoint layout:
//   "MLAFORGE" | u32 version (=1) | u64 header length | UTF-8 JSON header |
//   zero padding to 64 | tensor payloads, each at a 64-byte aligned offset
//   relative to the payload start, little-endian.
// The header is {"config": {...}, "tensors": [{name, dtype, shape, offset}]}
// with sorted keys, so identical stores serialize to identical bytes.
//
// Corpus layout: u32 magic | u32 seq_len | u32 count | count*seq_len u32 ids.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "mlaforge/config.hpp"
#include "mlaforge/linalg.hpp"

namespace mlaforge {

inline constexpr char kCheckpointMagic[8] = {'M', 'L', 'A', 'F', 'O', 'R', 'G', 'E'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kCorpusMagic = 0x43414C4D;  // "MLAC"
inline constexpr std::size_t kTensorAlignment = 64;

using Tensor = std::variant<MatrixF, MatrixD, Matrix<std::uint32_t>>;

DType dtype_of_tensor(const Tensor& t);
std::size_t tensor_rows(const Tensor& t);
std::size_t tensor_cols(const Tensor& t);

// Ordered name -> tensor map. Replacing an existing name keeps its position.
class TensorStore {
 public:
  void set(const std::string& name, Tensor tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  void erase(const std::string& name);

  template <typename T>
  const Matrix<T>& get(const std::string& name) const {
    const Tensor& t = at(name);
    if (const auto* m = std::get_if<Matrix<T>>(&t)) return *m;
    throw Error(ErrorCode::schema, "tensor '" + name + "' has dtype " + to_string(dtype_of_tensor(t)) +
                                       ", expected " + to_string(dtype_of<T>::value));
  }

  // Floating tensor converted to the requested precision.
  template <typename T>
  Matrix<T> get_as(const std::string& name) const {
    const Tensor& t = at(name);
    if (const auto* f = std::get_if<MatrixF>(&t)) return f->template cast<T>();
    if (const auto* d = std::get_if<MatrixD>(&t)) return d->template cast<T>();
    throw Error(ErrorCode::schema, "tensor '" + name + "' is not floating point");
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  friend bool operator==(const TensorStore& a, const TensorStore& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

std::string layer_name(std::uint32_t layer, const std::string& leaf);

struct ManifestEntry {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool index_tensor = false;  // u32 selection tensor
};

// Tensors (and shapes) a checkpoint for `cfg` must contain; converted
// configs get the latent-attention manifest.
std::vector<ManifestEntry> manifest(const ModelConfig& cfg);

// Throws Error(manifest_mismatch) naming the first missing or misshapen tensor.
void check_manifest(const ModelConfig& cfg, const TensorStore& store);

void save_checkpoint(const ModelConfig& cfg, const TensorStore& store, const std::filesystem::path& path);
std::vector<std::byte> serialize_checkpoint(const ModelConfig& cfg, const TensorStore& store);

struct Checkpoint {
  ModelConfig config;
  TensorStore store;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);
Checkpoint parse_checkpoint(std::span<const std::byte> bytes);

// Gaussian N(0, 1/d) projections, unit norm weights. Deterministic in (cfg, seed).
TensorStore init_toy(const ModelConfig& cfg, std::uint64_t seed);

struct TokenCorpus {
  std::uint32_t seq_len = 0;
  std::vector<std::vector<std::uint32_t>> sequences;

  // Truncates or zero-pads every sequence to seq_len.
  static TokenCorpus from_sequences(std::vector<std::vector<std::uint32_t>> seqs, std::uint32_t seq_len);
  static TokenCorpus synthetic(std::uint32_t vocab, std::uint32_t count, std::uint32_t seq_len,
                               std::uint64_t seed);

  // Throws Error(corpus_mismatch) on an out-of-vocabulary id.
  void check_vocab(std::uint32_t vocab) const;
  std::string digest() const;

  friend bool operator==(const TokenCorpus&, const TokenCorpus&) = default;
};

void save_corpus(const TokenCorpus& corpus, const std::filesystem::path& path);
TokenCorpus load_corpus(const std::filesystem::path& path);

std::vector<std::byte> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes);

}  // namespace mlaforge
