// SPDX-License-Identifier: Apache-2.0
#include "mlaforge/tensorio.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mlaforge/util.hpp"

namespace mlaforge {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

DType dtype_of_tensor(const Tensor& t) {
  return std::visit([](const auto& m) { return dtype_of<typename std::decay_t<decltype(m)>::value_type>::value; },
                    t);
}

std::size_t tensor_rows(const Tensor& t) {
  return std::visit([](const auto& m) { return m.rows(); }, t);
}

std::size_t tensor_cols(const Tensor& t) {
  return std::visit([](const auto& m) { return m.cols(); }, t);
}

void TensorStore::set(const std::string& name, Tensor tensor) {
  if (auto it = index_.find(name); it != index_.end()) {
    entries_[it->second].second = std::move(tensor);
    return;
  }
  index_.emplace(name, entries_.size());
  entries_.emplace_back(name, std::move(tensor));
}

const Tensor& TensorStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error(ErrorCode::manifest_mismatch, "missing tensor '" + name + "'");
  return entries_[it->second].second;
}

void TensorStore::erase(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) return;
  entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(it->second));
  index_.clear();
  for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i].first, i);
}

std::string layer_name(std::uint32_t layer, const std::string& leaf) {
  return "L" + std::to_string(layer) + "." + leaf;
}

std::vector<ManifestEntry> manifest(const ModelConfig& cfg) {
  const std::size_t d = cfg.d;
  const std::size_t dh = cfg.d_h;
  const std::size_t ff = cfg.mlp_width();
  std::vector<ManifestEntry> out;
  out.push_back({"embed", cfg.vocab, d});
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l) {
    auto add = [&](const char* leaf, std::size_t rows, std::size_t cols, bool index = false) {
      out.push_back({layer_name(l, leaf), rows, cols, index});
    };
    add("norm1", 1, d);
    if (!cfg.is_converted()) {
      add("Wq", d, cfg.n_h * dh);
      add("Wk", d, cfg.n_g * dh);
      add("Wv", d, cfg.n_g * dh);
    } else {
      const std::size_t dr = cfg.rope_dim();
      const std::size_t dc = cfg.nope_dim();
      const std::size_t latent = cfg.latent_width();
      add("Wq_rope", d, cfg.n_h * dr);
      add("Wq_nope", d, cfg.n_h * dc);
      add("Wk_rope", d, cfg.n_g * dr);
      add("Wdkv", d, latent);
      add("Wuk", latent, cfg.n_g * dc);
      add("Wuv", latent, cfg.n_g * dh);
      add("Wq_absorbed", d, cfg.n_h * latent);
      add("Wo_absorbed", cfg.n_h * latent, d);
      add("S", cfg.n_g, cfg.conversion->r, true);
    }
    add("Wo", cfg.n_h * dh, d);
    add("norm2", 1, d);
    add("mlp.up", d, ff);
    add("mlp.down", ff, d);
  }
  out.push_back({"lm_head", d, cfg.vocab});
  return out;
}

void check_manifest(const ModelConfig& cfg, const TensorStore& store) {
  for (const auto& entry : manifest(cfg)) {
    if (!store.contains(entry.name))
      throw Error(ErrorCode::manifest_mismatch, "missing tensor '" + entry.name + "'");
    const Tensor& t = store.at(entry.name);
    const std::size_t rows = tensor_rows(t);
    const std::size_t cols = tensor_cols(t);
    if (rows != entry.rows || cols != entry.cols) {
      throw Error(ErrorCode::manifest_mismatch, "tensor '" + entry.name + "' has shape " +
                                                    shape_string(rows, cols) + ", expected " +
                                                    shape_string(entry.rows, entry.cols));
    }
    const bool is_index = dtype_of_tensor(t) == DType::u32;
    if (is_index != entry.index_tensor) {
      throw Error(ErrorCode::manifest_mismatch,
                  "tensor '" + entry.name + "' has unexpected dtype " + to_string(dtype_of_tensor(t)));
    }
  }
}

namespace {

std::size_t align_up(std::size_t n) {
  return (n + kTensorAlignment - 1) / kTensorAlignment * kTensorAlignment;
}

constexpr std::size_t kPreambleSize = 8 + 4 + 8;

template <typename T>
void put(std::vector<std::byte>& out, const T& value) {
  const auto* p = reinterpret_cast<const std::byte*>(&value);
  out.insert(out.end(), p, p + sizeof(T));
}

template <typename T>
T get(std::span<const std::byte> bytes, std::size_t offset) {
  T value;
  std::memcpy(&value, bytes.data() + offset, sizeof(T));
  return value;
}

std::size_t tensor_bytes(const Tensor& t) {
  return std::visit([](const auto& m) { return m.size() * sizeof(typename std::decay_t<decltype(m)>::value_type); },
                    t);
}

const std::byte* tensor_data(const Tensor& t) {
  return std::visit([](const auto& m) { return reinterpret_cast<const std::byte*>(m.values().data()); }, t);
}

template <typename T>
Tensor decode_tensor(std::span<const std::byte> payload, std::size_t rows, std::size_t cols,
                     const std::string& name) {
  std::vector<T> data(rows * cols);
  if (!data.empty()) std::memcpy(data.data(), payload.data(), data.size() * sizeof(T));
  Matrix<T> m(rows, cols, std::move(data));
  if (!all_finite(m)) throw Error(ErrorCode::schema, "tensor '" + name + "' contains non-finite values");
  return m;
}

}  // namespace

std::vector<std::byte> serialize_checkpoint(const ModelConfig& cfg, const TensorStore& store) {
  cfg.validate();
  check_manifest(cfg, store);

  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : store.entries()) {
    tensors.push_back({{"name", name},
                       {"dtype", to_string(dtype_of_tensor(t))},
                       {"shape", {tensor_rows(t), tensor_cols(t)}},
                       {"offset", offset}});
    offset = align_up(offset + tensor_bytes(t));
  }
  const std::string header = nlohmann::json{{"config", cfg.to_json()}, {"tensors", tensors}}.dump();

  std::vector<std::byte> out;
  const std::size_t data_start = align_up(kPreambleSize + header.size());
  out.reserve(data_start + offset);
  out.insert(out.end(), reinterpret_cast<const std::byte*>(kCheckpointMagic),
             reinterpret_cast<const std::byte*>(kCheckpointMagic) + 8);
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(header.size()));
  out.insert(out.end(), reinterpret_cast<const std::byte*>(header.data()),
             reinterpret_cast<const std::byte*>(header.data()) + header.size());
  out.resize(data_start, std::byte{0});
  for (const auto& [name, t] : store.entries()) {
    const std::size_t n = tensor_bytes(t);
    out.insert(out.end(), tensor_data(t), tensor_data(t) + n);
    out.resize(align_up(out.size()), std::byte{0});
  }
  return out;
}

void save_checkpoint(const ModelConfig& cfg, const TensorStore& store, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(cfg, store));
}

Checkpoint parse_checkpoint(std::span<const std::byte> bytes) {
  if (bytes.size() < kPreambleSize) throw Error(ErrorCode::truncated, "checkpoint shorter than its preamble");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw Error(ErrorCode::bad_magic, "not an MLAFORGE checkpoint (bad magic)");
  const auto version = get<std::uint32_t>(bytes, 8);
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::bad_version, "unsupported checkpoint version " + std::to_string(version) +
                                            " (expected " + std::to_string(kCheckpointVersion) + ")");
  }
  const auto header_len = get<std::uint64_t>(bytes, 12);
  if (header_len > bytes.size() - kPreambleSize) throw Error(ErrorCode::truncated, "checkpoint header truncated");

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(reinterpret_cast<const char*>(bytes.data() + kPreambleSize),
                                   reinterpret_cast<const char*>(bytes.data() + kPreambleSize + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::schema, std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  if (!header.contains("config") || !header.contains("tensors") || !header.at("tensors").is_array())
    throw Error(ErrorCode::schema, "checkpoint header lacks config/tensors");

  Checkpoint ck;
  ck.config = ModelConfig::from_json(header.at("config"));
  ck.config.validate();

  const std::size_t data_start = align_up(kPreambleSize + header_len);
  for (const auto& entry : header.at("tensors")) {
    std::string name;
    std::size_t rows = 0, cols = 0, offset = 0;
    DType dtype{};
    try {
      name = entry.at("name").get<std::string>();
      dtype = parse_dtype(entry.at("dtype").get<std::string>());
      const auto& shape = entry.at("shape");
      if (!shape.is_array() || shape.size() != 2) throw Error(ErrorCode::schema, "tensor shape must be 2-D");
      rows = shape[0].get<std::size_t>();
      cols = shape[1].get<std::size_t>();
      offset = entry.at("offset").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::schema, std::string("malformed tensor entry: ") + e.what());
    }
    const std::size_t nbytes = rows * cols * dtype_size(dtype);
    if (data_start > bytes.size() || offset > bytes.size() - data_start ||
        nbytes > bytes.size() - data_start - offset) {
      throw Error(ErrorCode::truncated, "tensor '" + name + "' extends past end of file");
    }
    auto payload = bytes.subspan(data_start + offset, nbytes);
    switch (dtype) {
      case DType::f32: ck.store.set(name, decode_tensor<float>(payload, rows, cols, name)); break;
      case DType::f64: ck.store.set(name, decode_tensor<double>(payload, rows, cols, name)); break;
      case DType::u32: ck.store.set(name, decode_tensor<std::uint32_t>(payload, rows, cols, name)); break;
    }
  }
  check_manifest(ck.config, ck.store);
  return ck;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return parse_checkpoint(bytes);
}

TensorStore init_toy(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.is_converted()) throw Error(ErrorCode::invalid_config, "init_toy needs an unconverted config");
  GaussianStream rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d));
  TensorStore store;
  for (const auto& entry : manifest(cfg)) {
    MatrixF m(entry.rows, entry.cols);
    const bool is_norm = entry.name.ends_with(".norm1") || entry.name.ends_with(".norm2");
    for (float& v : m.values()) v = is_norm ? 1.0f : static_cast<float>(scale * rng.next());
    store.set(entry.name, std::move(m));
  }
  return store;
}

TokenCorpus TokenCorpus::from_sequences(std::vector<std::vector<std::uint32_t>> seqs, std::uint32_t seq_len) {
  TokenCorpus c;
  c.seq_len = seq_len;
  for (auto& s : seqs) s.resize(seq_len, 0);
  c.sequences = std::move(seqs);
  return c;
}

TokenCorpus TokenCorpus::synthetic(std::uint32_t vocab, std::uint32_t count, std::uint32_t seq_len,
                                   std::uint64_t seed) {
  GaussianStream rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::vector<std::uint32_t>> seqs(count, std::vector<std::uint32_t>(seq_len));
  for (auto& s : seqs)
    for (auto& id : s) id = static_cast<std::uint32_t>(rng.next_u64() % vocab);
  return from_sequences(std::move(seqs), seq_len);
}

void TokenCorpus::check_vocab(std::uint32_t vocab) const {
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    for (std::uint32_t id : sequences[i]) {
      if (id >= vocab) {
        throw Error(ErrorCode::corpus_mismatch, "token id " + std::to_string(id) + " in sequence " +
                                                    std::to_string(i) + " exceeds vocab " +
                                                    std::to_string(vocab));
      }
    }
  }
}

std::string TokenCorpus::digest() const {
  Fnv1a h;
  h.update_pod(seq_len);
  h.update_pod(static_cast<std::uint32_t>(sequences.size()));
  for (const auto& s : sequences) h.update(std::as_bytes(std::span<const std::uint32_t>(s)));
  return h.hex();
}

void save_corpus(const TokenCorpus& corpus, const std::filesystem::path& path) {
  std::vector<std::byte> out;
  put(out, kCorpusMagic);
  put(out, corpus.seq_len);
  put(out, static_cast<std::uint32_t>(corpus.sequences.size()));
  for (const auto& s : corpus.sequences) {
    if (s.size() != corpus.seq_len) throw Error(ErrorCode::shape, "corpus sequence length mismatch");
    for (std::uint32_t id : s) put(out, id);
  }
  write_file(path, out);
}

TokenCorpus load_corpus(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() < 12) throw Error(ErrorCode::truncated, "corpus file shorter than its header");
  if (get<std::uint32_t>(bytes, 0) != kCorpusMagic) throw Error(ErrorCode::bad_magic, "not a token corpus file");
  const auto seq_len = get<std::uint32_t>(bytes, 4);
  const auto count = get<std::uint32_t>(bytes, 8);
  const std::uint64_t need = 12 + std::uint64_t{count} * seq_len * 4;
  if (bytes.size() < need) throw Error(ErrorCode::truncated, "corpus file truncated");
  TokenCorpus c;
  c.seq_len = seq_len;
  c.sequences.assign(count, std::vector<std::uint32_t>(seq_len));
  std::size_t off = 12;
  for (auto& s : c.sequences)
    for (auto& id : s) {
      id = get<std::uint32_t>(bytes, off);
      off += 4;
    }
  return c;
}

std::vector<std::byte> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path.string() + "'");
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);
  std::vector<std::byte> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) throw Error(ErrorCode::io, "failed reading '" + path.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& path, std::span<const std::byte> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "failed writing '" + path.string() + "'");
}

}  // namespace mlaforge
