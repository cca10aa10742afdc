// SPDX-License-Identifier: Apache-2.0
#include "mlaforge/config.hpp"

#include "mlaforge/error.hpp"
#include "mlaforge/util.hpp"

namespace mlaforge {

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::high: return "high";
    case Strategy::low: return "low";
    case Strategy::uniform: return "uniform";
    case Strategy::two_norm: return "two_norm";
  }
  return "?";
}

const char* to_string(SvdMode m) {
  return m == SvdMode::split ? "split" : "joint";
}

Strategy parse_strategy(const std::string& name) {
  if (name == "high") return Strategy::high;
  if (name == "low") return Strategy::low;
  if (name == "uniform") return Strategy::uniform;
  if (name == "two_norm" || name == "2norm" || name == "two-norm") return Strategy::two_norm;
  throw Error(ErrorCode::usage, "unknown strategy '" + name + "'");
}

SvdMode parse_svd_mode(const std::string& name) {
  if (name == "split") return SvdMode::split;
  if (name == "joint") return SvdMode::joint;
  throw Error(ErrorCode::usage, "unknown svd mode '" + name + "'");
}

namespace {

[[noreturn]] void invalid(const std::string& what) {
  throw Error(ErrorCode::invalid_config, "invalid config: " + what);
}

template <typename T>
T field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw Error(ErrorCode::schema, std::string("config missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw Error(ErrorCode::schema, std::string("config field '") + key + "' has wrong type");
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (d == 0 || n_h == 0 || n_g == 0 || d_h == 0 || n_layers == 0 || vocab == 0)
    invalid("dimensions must be positive");
  if (n_h % n_g != 0) invalid("n_h must be divisible by n_g");
  if (d_h % 2 != 0) invalid("d_h must be even");
  if (!(rope_base > 1.0)) invalid("rope_base must exceed 1");
  if (!conversion) return;
  const auto& c = *conversion;
  if (c.r > d_h / 2) invalid("r must satisfy 0 <= r <= d_h/2");
  if (c.d_kv_per_head == 0) invalid("d_kv_per_head must be positive");
  if (c.svd_mode == SvdMode::split) {
    if (c.d_kv_per_head % 2 != 0) invalid("d_kv_per_head must be even for split mode");
    if (c.d_kv_per_head > 2 * d_h) invalid("d_kv_per_head must not exceed 2*d_h for split mode");
  } else if (c.d_kv_per_head > 2 * d_h - 2 * c.r) {
    invalid("d_kv_per_head must not exceed 2*d_h - 2r for joint mode");
  }
  if (!c.discarded_sq_sum.empty() && c.discarded_sq_sum.size() != n_layers)
    invalid("ledger layer count does not match n_layers");
}

nlohmann::json ModelConfig::to_json() const {
  nlohmann::json j = {{"d", d},       {"n_h", n_h},         {"n_g", n_g},
                      {"d_h", d_h},   {"n_layers", n_layers}, {"rope_base", rope_base},
                      {"vocab", vocab}};
  if (d_ff != 0) j["d_ff"] = d_ff;
  if (conversion) {
    const auto& c = *conversion;
    j["conversion"] = {{"strategy", to_string(c.strategy)},
                       {"r", c.r},
                       {"d_kv_per_head", c.d_kv_per_head},
                       {"svd_mode", to_string(c.svd_mode)},
                       {"per_head", c.per_head},
                       {"global_selection", c.global_selection},
                       {"discarded_sq_sum", c.discarded_sq_sum},
                       {"corpus_digest", c.corpus_digest}};
  }
  return j;
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw Error(ErrorCode::schema, "config must be a JSON object");
  ModelConfig c;
  c.d = field<std::uint32_t>(j, "d");
  c.n_h = field<std::uint32_t>(j, "n_h");
  c.n_g = j.contains("n_g") ? field<std::uint32_t>(j, "n_g") : c.n_h;
  c.d_h = field<std::uint32_t>(j, "d_h");
  c.n_layers = field<std::uint32_t>(j, "n_layers");
  c.rope_base = j.contains("rope_base") ? field<double>(j, "rope_base") : 1e4;
  c.vocab = field<std::uint32_t>(j, "vocab");
  c.d_ff = j.contains("d_ff") ? field<std::uint32_t>(j, "d_ff") : 0;
  if (j.contains("conversion") && !j.at("conversion").is_null()) {
    const auto& cj = j.at("conversion");
    ConversionConfig conv;
    conv.strategy = parse_strategy(field<std::string>(cj, "strategy"));
    conv.r = field<std::uint32_t>(cj, "r");
    conv.d_kv_per_head = field<std::uint32_t>(cj, "d_kv_per_head");
    conv.svd_mode = parse_svd_mode(field<std::string>(cj, "svd_mode"));
    conv.per_head = cj.value("per_head", false);
    conv.global_selection = cj.value("global_selection", false);
    if (cj.contains("discarded_sq_sum"))
      conv.discarded_sq_sum = field<std::vector<std::vector<double>>>(cj, "discarded_sq_sum");
    conv.corpus_digest = cj.value("corpus_digest", std::string{});
    c.conversion = std::move(conv);
  }
  return c;
}

std::string ModelConfig::digest() const {
  Fnv1a h;
  h.update(architecture().to_json().dump());
  return h.hex();
}

}  // namespace mlaforge
