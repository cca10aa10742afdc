// SPDX-License-Identifier: Apache-2.0
#include "mlaforge/cachemodel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mlaforge/error.hpp"

namespace mlaforge {

Fraction Fraction::make(std::int64_t num, std::int64_t den) {
  if (den <= 0 || num < 0) throw Error(ErrorCode::usage, "fraction must be non-negative with positive denominator");
  const std::int64_t g = std::gcd(num, den);
  return Fraction{num / g, den / g};
}

std::string format_reduction(Fraction reduction) {
  const Fraction stored = reduction.complement();
  // round-half-up of stored * 10000
  const std::int64_t hundredths = (stored.num * 20000 + stored.den) / (2 * stored.den);
  const std::int64_t red = 10000 - hundredths;
  char buf[32];
  std::snprintf(buf, sizeof buf, "-%lld.%02lld%%", static_cast<long long>(red / 100), static_cast<long long>(red % 100));
  return buf;
}

void QuantSpec::validate() const {
  if (bits != 2 && bits != 4 && bits != 8) throw Error(ErrorCode::usage, "quantizer bits must be 2, 4 or 8");
  if (group_size == 0) throw Error(ErrorCode::usage, "quantizer group size must be positive");
}

namespace {

void require_conversion(const ModelConfig& cfg) {
  if (!cfg.conversion) throw Error(ErrorCode::usage, "cache accounting needs conversion fields (r, d_kv)");
}

void check_bits(std::uint32_t bits, std::uint32_t baseline_bits) {
  if (bits == 0 || baseline_bits == 0 || bits > baseline_bits)
    throw Error(ErrorCode::usage, "cache precision must be in [1, baseline bits]");
}

}  // namespace

Fraction cache_ratio(const ModelConfig& cfg) {
  require_conversion(cfg);
  const std::int64_t stored = cfg.conversion->d_kv_per_head + 2 * cfg.conversion->r;
  const std::int64_t baseline = 2 * std::int64_t{cfg.d_h};
  if (stored > baseline) throw Error(ErrorCode::usage, "latent cache is wider than the full cache");
  return Fraction::make(stored, baseline).complement();
}

Fraction compound_ratio(const ModelConfig& cfg, std::uint32_t bits, std::uint32_t baseline_bits) {
  check_bits(bits, baseline_bits);
  const Fraction stored = cache_ratio(cfg).complement() * Fraction::make(bits, baseline_bits);
  return stored.complement();
}

Fraction ckv_only_ratio(const ModelConfig& cfg, std::uint32_t bits, std::uint32_t baseline_bits) {
  require_conversion(cfg);
  check_bits(bits, baseline_bits);
  const std::int64_t stored_bits =
      std::int64_t{cfg.conversion->d_kv_per_head} * bits + std::int64_t{2} * cfg.conversion->r * baseline_bits;
  const std::int64_t base_bits = std::int64_t{2} * cfg.d_h * baseline_bits;
  return Fraction::make(stored_bits, base_bits).complement();
}

Fraction quantized_full_ratio(std::uint32_t bits, std::uint32_t baseline_bits) {
  check_bits(bits, baseline_bits);
  return Fraction::make(bits, baseline_bits).complement();
}

nlohmann::json CacheReport::to_json() const {
  return {{"label", label},
          {"variant", variant},
          {"d_h", d_h},
          {"r", r},
          {"d_kv_per_head", d_kv_per_head},
          {"bits", bits},
          {"scalars_per_token_layer", scalars_per_token_layer},
          {"baseline_scalars_per_token_layer", baseline_scalars_per_token_layer},
          {"payload_bits_per_token_layer", payload_bits_per_token_layer},
          {"baseline_bits_per_token_layer", baseline_bits_per_token_layer},
          {"metadata_bits_per_token_layer", metadata_bits_per_token_layer},
          {"reduction", {{"num", reduction.num}, {"den", reduction.den}}},
          {"kv_mem", kv_mem()},
          {"ckv_only_kv_mem", format_reduction(ckv_only_reduction)}};
}

CacheReport make_cache_report(const std::string& label, const ModelConfig& cfg, std::uint32_t bits,
                              std::uint32_t group_size, std::uint32_t baseline_bits) {
  check_bits(bits, baseline_bits);
  CacheReport rep;
  rep.label = label;
  rep.d_h = cfg.d_h;
  rep.bits = bits;
  rep.baseline_scalars_per_token_layer = std::uint64_t{2} * cfg.n_g * cfg.d_h;
  rep.baseline_bits_per_token_layer = rep.baseline_scalars_per_token_layer * baseline_bits;
  auto groups = [&](std::uint64_t width) { return group_size == 0 ? 0 : (width + group_size - 1) / group_size; };
  const bool quantized = bits < baseline_bits;
  if (!cfg.conversion) {
    rep.variant = "mha";
    rep.scalars_per_token_layer = rep.baseline_scalars_per_token_layer;
    rep.reduction = quantized_full_ratio(bits, baseline_bits);
    rep.ckv_only_reduction = rep.reduction;
    if (quantized) rep.metadata_bits_per_token_layer = 2 * groups(std::uint64_t{cfg.n_g} * cfg.d_h) * 2 * 16;
  } else {
    rep.variant = "mla";
    rep.r = cfg.conversion->r;
    rep.d_kv_per_head = cfg.conversion->d_kv_per_head;
    rep.scalars_per_token_layer = std::uint64_t{cfg.n_g} * (rep.d_kv_per_head + 2 * rep.r);
    rep.reduction = compound_ratio(cfg, bits, baseline_bits);
    rep.ckv_only_reduction = ckv_only_ratio(cfg, bits, baseline_bits);
    if (quantized) {
      rep.metadata_bits_per_token_layer =
          (groups(std::uint64_t{cfg.n_g} * rep.d_kv_per_head) + groups(std::uint64_t{cfg.n_g} * 2 * rep.r)) * 2 * 16;
    }
  }
  rep.payload_bits_per_token_layer = rep.scalars_per_token_layer * bits;
  return rep;
}

void QuantizedRows::append(const QuantizedRows& other) {
  if (rows == 0 && codes.empty()) {
    spec = other.spec;
    cols = other.cols;
  }
  if (other.cols != cols || other.spec.bits != spec.bits || other.spec.group_size != spec.group_size)
    throw Error(ErrorCode::shape, "cannot append quantized rows with a different layout");
  rows += other.rows;
  codes.insert(codes.end(), other.codes.begin(), other.codes.end());
  scales.insert(scales.end(), other.scales.begin(), other.scales.end());
  zeros.insert(zeros.end(), other.zeros.begin(), other.zeros.end());
}

template <typename T>
QuantizedRows quantize_rows(const Matrix<T>& rows, const QuantSpec& spec) {
  spec.validate();
  QuantizedRows q;
  q.spec = spec;
  q.rows = rows.rows();
  q.cols = rows.cols();
  q.codes.resize(rows.size());
  const std::size_t groups = q.groups_per_row();
  q.scales.resize(q.rows * groups);
  q.zeros.resize(q.rows * groups);
  const double levels = static_cast<double>((1u << spec.bits) - 1);
  for (std::size_t i = 0; i < q.rows; ++i) {
    const auto row = rows.row(i);
    for (std::size_t g = 0; g < groups; ++g) {
      const std::size_t begin = g * spec.group_size;
      const std::size_t end = std::min(q.cols, begin + spec.group_size);
      double lo = static_cast<double>(row[begin]);
      double hi = lo;
      for (std::size_t c = begin; c < end; ++c) {
        lo = std::min(lo, static_cast<double>(row[c]));
        hi = std::max(hi, static_cast<double>(row[c]));
      }
      const double scale = (hi - lo) / levels;
      q.scales[i * groups + g] = scale;
      q.zeros[i * groups + g] = lo;
      for (std::size_t c = begin; c < end; ++c) {
        double code = 0.0;
        if (scale > 0.0) code = std::clamp(std::round((static_cast<double>(row[c]) - lo) / scale), 0.0, levels);
        q.codes[i * q.cols + c] = static_cast<std::uint8_t>(code);
      }
    }
  }
  return q;
}

template <typename T>
Matrix<T> dequantize_rows(const QuantizedRows& coded) {
  Matrix<T> out(coded.rows, coded.cols);
  const std::size_t groups = coded.groups_per_row();
  for (std::size_t i = 0; i < coded.rows; ++i) {
    for (std::size_t c = 0; c < coded.cols; ++c) {
      const std::size_t g = i * groups + c / coded.spec.group_size;
      out(i, c) = static_cast<T>(coded.zeros[g] + coded.codes[i * coded.cols + c] * coded.scales[g]);
    }
  }
  return out;
}

template QuantizedRows quantize_rows<float>(const Matrix<float>&, const QuantSpec&);
template QuantizedRows quantize_rows<double>(const Matrix<double>&, const QuantSpec&);
template Matrix<float> dequantize_rows<float>(const QuantizedRows&);
template Matrix<double> dequantize_rows<double>(const QuantizedRows&);

ModelConfig Preset::config(std::uint32_t d_kv_per_head) const {
  ModelConfig cfg;
  cfg.d = d;
  cfg.n_h = n_h;
  cfg.n_g = n_g;
  cfg.d_h = d_h;
  cfg.n_layers = n_layers;
  cfg.vocab = 49152;
  ConversionConfig conv;
  conv.r = r;
  conv.d_kv_per_head = d_kv_per_head;
  cfg.conversion = conv;
  return cfg;
}

const std::vector<Preset>& presets() {
  // Geometry only; r = d_h / 16.
  static const std::vector<Preset> all = {
      {"135M", 576, 9, 3, 64, 30, 4, {32, 16, 8}},
      {"360M", 960, 15, 5, 64, 32, 4, {32, 16, 8}},
      {"1B7", 2048, 32, 32, 64, 24, 4, {32, 16, 8}},
      {"7B", 4096, 32, 32, 128, 32, 8, {64, 32, 16}},
      {"13B", 5120, 40, 40, 128, 40, 8, {64, 32, 16}},
  };
  return all;
}

const Preset& find_preset(const std::string& name) {
  for (const auto& p : presets())
    if (p.name == name) return p;
  throw Error(ErrorCode::usage, "unknown preset '" + name + "' (expected 135M, 360M, 1B7, 7B or 13B)");
}

}  // namespace mlaforge
