// SPDX-License-Identifier: Apache-2.0
#include "mlaforge/calib.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "mlaforge/attention.hpp"
#include "mlaforge/error.hpp"
#include "mlaforge/util.hpp"

namespace mlaforge {

namespace {

// Flattened [layer][head][subspace] sums for one sequence.
using Accum = std::vector<double>;

Accum pairwise_sum(std::vector<Accum>& parts, std::size_t lo, std::size_t hi) {
  if (hi - lo == 1) return std::move(parts[lo]);
  const std::size_t mid = lo + (hi - lo) / 2;
  Accum a = pairwise_sum(parts, lo, mid);
  const Accum b = pairwise_sum(parts, mid, hi);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

}  // namespace

ScoreTable compute_head_scores(const ModelConfig& cfg, const TensorStore& store, const TokenCorpus& corpus,
                               std::uint32_t max_samples) {
  if (cfg.is_converted()) throw Error(ErrorCode::variant_mismatch, "calibration needs an unconverted checkpoint");
  if (corpus.sequences.empty() || corpus.seq_len == 0)
    throw Error(ErrorCode::corpus_mismatch, "calibration corpus is empty");
  corpus.check_vocab(cfg.vocab);

  const ModelParams<double> params = ModelParams<double>::from_store(cfg, store);
  const std::size_t n = std::min<std::size_t>(corpus.sequences.size(), max_samples == 0 ? corpus.sequences.size() : max_samples);
  const std::size_t subs = cfg.subspaces();
  const std::size_t dh = cfg.d_h;
  const std::size_t width = std::size_t{cfg.n_layers} * cfg.n_h * subs;

  std::vector<Accum> parts(n, Accum(width, 0.0));
  parallel_for(n, [&](std::size_t s) {
    Accum& acc = parts[s];
    const QkObserver<double> observer = [&](std::uint32_t layer, const MatrixD& q, const MatrixD& k) {
      for (std::size_t t = 0; t < q.rows(); ++t) {
        for (std::uint32_t h = 0; h < cfg.n_h; ++h) {
          const std::size_t g = cfg.group_of(h);
          double* out = acc.data() + (std::size_t{layer} * cfg.n_h + h) * subs;
          for (std::size_t c = 0; c < subs; ++c) {
            const double q0 = q(t, h * dh + 2 * c), q1 = q(t, h * dh + 2 * c + 1);
            const double k0 = k(t, g * dh + 2 * c), k1 = k(t, g * dh + 2 * c + 1);
            out[c] += std::hypot(q0, q1) * std::hypot(k0, k1);
          }
        }
      }
    };
    forward_source_f64(params, corpus.sequences[s], observer);
  });

  const Accum total = pairwise_sum(parts, 0, n);
  const double count = static_cast<double>(n) * corpus.seq_len;
  ScoreTable scores(cfg.n_layers, std::vector<std::vector<double>>(cfg.n_h, std::vector<double>(subs)));
  for (std::uint32_t l = 0; l < cfg.n_layers; ++l)
    for (std::uint32_t h = 0; h < cfg.n_h; ++h)
      for (std::size_t c = 0; c < subs; ++c) scores[l][h][c] = total[(std::size_t{l} * cfg.n_h + h) * subs + c] / count;
  return scores;
}

ScoreTable average_groups(const ModelConfig& cfg, const ScoreTable& head_scores) {
  const std::size_t subs = cfg.subspaces();
  const double per_group = static_cast<double>(cfg.n_h / cfg.n_g);
  ScoreTable out(head_scores.size(), std::vector<std::vector<double>>(cfg.n_g, std::vector<double>(subs, 0.0)));
  for (std::size_t l = 0; l < head_scores.size(); ++l) {
    for (std::uint32_t h = 0; h < cfg.n_h; ++h)
      for (std::size_t c = 0; c < subs; ++c) out[l][cfg.group_of(h)][c] += head_scores[l][h][c];
    for (auto& group : out[l])
      for (double& v : group) v /= per_group;
  }
  return out;
}

NormStats compute_norm_stats(const ModelConfig& cfg, const TensorStore& store, const TokenCorpus& corpus,
                             std::uint32_t max_samples) {
  NormStats stats;
  stats.scores = average_groups(cfg, compute_head_scores(cfg, store, corpus, max_samples));
  stats.config_digest = cfg.digest();
  stats.corpus_digest = corpus.digest();
  stats.seq_len = corpus.seq_len;
  stats.n_samples = static_cast<std::uint32_t>(
      std::min<std::size_t>(corpus.sequences.size(), max_samples == 0 ? corpus.sequences.size() : max_samples));
  return stats;
}

nlohmann::json NormStats::to_json() const {
  return {{"config_digest", config_digest},
          {"corpus_digest", corpus_digest},
          {"seq_len", seq_len},
          {"n_samples", n_samples},
          {"scores", scores}};
}

NormStats NormStats::from_json(const nlohmann::json& j) {
  try {
    NormStats s;
    s.config_digest = j.at("config_digest").get<std::string>();
    s.corpus_digest = j.at("corpus_digest").get<std::string>();
    s.seq_len = j.at("seq_len").get<std::uint32_t>();
    s.n_samples = j.at("n_samples").get<std::uint32_t>();
    s.scores = j.at("scores").get<ScoreTable>();
    for (const auto& layer : s.scores)
      for (const auto& group : layer)
        for (double v : group)
          if (!std::isfinite(v) || v < 0.0) throw Error(ErrorCode::schema, "stats score is negative or non-finite");
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::schema, std::string("stats json: ") + e.what());
  }
}

void NormStats::check_against(const ModelConfig& cfg) const {
  if (scores.size() != cfg.n_layers)
    throw Error(ErrorCode::schema, "stats cover " + std::to_string(scores.size()) + " layers, config has " +
                                       std::to_string(cfg.n_layers));
  for (const auto& layer : scores) {
    if (layer.size() != cfg.n_g)
      throw Error(ErrorCode::schema, "stats cover " + std::to_string(layer.size()) + " groups, config has " +
                                         std::to_string(cfg.n_g));
    for (const auto& group : layer)
      if (group.size() != cfg.subspaces())
        throw Error(ErrorCode::schema, "stats subspace count does not match d_h/2");
  }
}

void save_stats(const NormStats& stats, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::io, "cannot write " + path.string());
  // nlohmann dumps doubles with 17 significant digits.
  out << stats.to_json().dump(1) << '\n';
  if (!out) throw Error(ErrorCode::io, "write failed for " + path.string());
}

NormStats load_stats(const std::filesystem::path& path, const ModelConfig* expect) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::io, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::schema, std::string("stats json: ") + e.what());
  }
  NormStats stats = NormStats::from_json(j);
  if (expect) stats.check_against(*expect);
  return stats;
}

}  // namespace mlaforge
