// SPDX-License-Identifier: Apache-2.0
//
// KV-cache memory accounting and the round-to-nearest group-affine quantizer
// used for latent caches.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "mlaforge/config.hpp"
#include "mlaforge/linalg.hpp"

namespace mlaforge {

// Exact non-negative rational, always reduced.
struct Fraction {
  std::int64_t num = 0;
  std::int64_t den = 1;

  static Fraction make(std::int64_t num, std::int64_t den);
  double value() const { return static_cast<double>(num) / static_cast<double>(den); }
  Fraction complement() const { return make(den - num, den); }  // 1 - x
  friend Fraction operator*(Fraction a, Fraction b) { return make(a.num * b.num, a.den * b.den); }
  friend bool operator==(const Fraction&, const Fraction&) = default;
};

// Rendered the way the reduction tables print it: the stored share is rounded
// half-up to hundredths of a percent and the reduction is 100 minus that,
// e.g. 3.125% stored -> "-96.87%".
std::string format_reduction(Fraction reduction);

struct QuantSpec {
  std::uint32_t bits = 4;
  std::uint32_t group_size = 32;
  bool include_rope = false;  // quantize k_rope rows too, not only c_kv

  void validate() const;
};

// Reduction of a latent cache (d_kv_per_head + 2r scalars per kv head) against
// the 16-bit full cache (2 d_h scalars per kv head).
Fraction cache_ratio(const ModelConfig& cfg);

// cache_ratio with the scalar share scaled by bits / baseline_bits; metadata
// (scales, zero points) excluded.
Fraction compound_ratio(const ModelConfig& cfg, std::uint32_t bits, std::uint32_t baseline_bits = 16);

// Variant where only c_kv is quantized and k_rope stays at baseline precision.
Fraction ckv_only_ratio(const ModelConfig& cfg, std::uint32_t bits, std::uint32_t baseline_bits = 16);

// Reduction of a quantized full (unconverted) cache.
Fraction quantized_full_ratio(std::uint32_t bits, std::uint32_t baseline_bits = 16);

struct CacheReport {
  std::string label;
  std::string variant;  // "mha" or "mla"
  std::uint32_t d_h = 0;
  std::uint32_t r = 0;
  std::uint32_t d_kv_per_head = 0;
  std::uint32_t bits = 16;
  std::uint64_t scalars_per_token_layer = 0;
  std::uint64_t baseline_scalars_per_token_layer = 0;
  std::uint64_t payload_bits_per_token_layer = 0;
  std::uint64_t baseline_bits_per_token_layer = 0;
  std::uint64_t metadata_bits_per_token_layer = 0;
  Fraction reduction;
  Fraction ckv_only_reduction;

  std::string kv_mem() const { return format_reduction(reduction); }
  nlohmann::json to_json() const;
};

CacheReport make_cache_report(const std::string& label, const ModelConfig& cfg, std::uint32_t bits,
                              std::uint32_t group_size = 32, std::uint32_t baseline_bits = 16);

// Group-affine coded rows: per group scale = (max - min) / (2^bits - 1),
// zero = min, code = round((x - zero) / scale) clamped to the code range.
// Scales and zero points are held in double; the accounting charges 16 bits
// each.
struct QuantizedRows {
  QuantSpec spec;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> codes;  // rows * cols
  std::vector<double> scales;       // rows * groups_per_row()
  std::vector<double> zeros;

  std::size_t groups_per_row() const { return spec.group_size == 0 ? 0 : (cols + spec.group_size - 1) / spec.group_size; }
  double scale_for(std::size_t row, std::size_t col) const { return scales[row * groups_per_row() + col / spec.group_size]; }
  void append(const QuantizedRows& other);
  std::uint64_t payload_bits() const { return std::uint64_t{rows} * cols * spec.bits; }
};

template <typename T>
QuantizedRows quantize_rows(const Matrix<T>& rows, const QuantSpec& spec);

template <typename T>
Matrix<T> dequantize_rows(const QuantizedRows& coded);

struct Preset {
  std::string name;
  std::uint32_t d = 0;
  std::uint32_t n_h = 0;
  std::uint32_t n_g = 0;
  std::uint32_t d_h = 0;
  std::uint32_t n_layers = 0;
  std::uint32_t r = 0;
  std::vector<std::uint32_t> d_kv_settings;

  ModelConfig config(std::uint32_t d_kv_per_head) const;
};

const std::vector<Preset>& presets();
const Preset& find_preset(const std::string& name);

}  // namespace mlaforge
