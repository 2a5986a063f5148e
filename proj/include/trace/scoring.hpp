#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "trace/error.hpp"
#include "trace/trace_bank.hpp"
#include "trace/vecmath.hpp"

namespace trace {

enum class ScoreMode { diff, additive, prob };
enum class Aggregation { max, softmax_weighted };
enum class Verdict : std::uint8_t { normal = 0, anomalous = 1 };

constexpr std::string_view to_string(ScoreMode m) {
  switch (m) {
    case ScoreMode::diff: return "diff";
    case ScoreMode::additive: return "additive";
    case ScoreMode::prob: return "prob";
  }
  return "?";
}

constexpr std::string_view to_string(Verdict v) { return v == Verdict::anomalous ? "anomalous" : "normal"; }

inline constexpr double kDefaultTemperature = 0.07;

inline double default_theta(ScoreMode mode) { return mode == ScoreMode::prob ? 0.5 : 0.0; }

struct ScoreConfig {
  std::size_t k = kDefaultTopK;
  double tau = kDefaultTemperature;
  double epsilon = 0.0;
  double theta = 0.0;
  ScoreMode mode = ScoreMode::diff;
  Aggregation aggregation = Aggregation::max;

  void validate() const {
    if (k == 0) fail(ErrorCode::InvalidConfig, "k must be >= 1");
    if (!(tau > 0.0)) fail(ErrorCode::NonPositiveTemperature, "tau must be > 0");
    if (!std::isfinite(theta) || !std::isfinite(epsilon)) fail(ErrorCode::InvalidConfig, "theta/epsilon must be finite");
  }
};

enum class FrameFlag : std::uint8_t { ok = 0, cold_start = 1, empty_subset = 2 };

constexpr std::string_view to_string(FrameFlag f) {
  switch (f) {
    case FrameFlag::ok: return "ok";
    case FrameFlag::cold_start: return "cold_start";
    case FrameFlag::empty_subset: return "empty_subset";
  }
  return "?";
}

struct FrameScore {
  std::uint64_t frame = 0;
  double s_a = 0.0;
  double s_n = 0.0;
  double score = 0.0;
  std::optional<double> probability;
  Verdict label = Verdict::normal;
  FrameFlag flag = FrameFlag::ok;
  std::vector<RetrievalHit> evidence_anomalous;
  std::vector<RetrievalHit> evidence_normal;

  // Undefined scores (cold start, empty subset) carry no s_a/s_n/score.
  bool defined() const noexcept { return flag == FrameFlag::ok; }
};

/// Collapses one subset's hits to a single similarity.
///   max:              largest similarity divided by tau.
///   softmax_weighted: sum_i softmax(sims / tau)_i * sims_i; weights come
///                     from scaled similarities, the values stay unscaled.
inline double subset_similarity(std::span<const RetrievalHit> hits, Aggregation agg, double tau) {
  if (hits.empty()) fail(ErrorCode::EmptyHits, "no retrieval hits to aggregate");
  if (!(tau > 0.0)) fail(ErrorCode::NonPositiveTemperature, "tau must be > 0");
  if (agg == Aggregation::max) {
    double best = hits.front().similarity;
    for (const auto& h : hits) best = std::max(best, h.similarity);
    return best / tau;
  }
  std::vector<double> scaled(hits.size());
  for (std::size_t i = 0; i < hits.size(); ++i) scaled[i] = hits[i].similarity / tau;
  const std::vector<double> w = softmax(scaled);
  double acc = 0.0;
  for (std::size_t i = 0; i < hits.size(); ++i) acc += w[i] * hits[i].similarity;
  return acc;
}

inline Verdict classify(double score, double theta) {
  if (!std::isfinite(score)) fail(ErrorCode::NonFinite, "cannot classify a non-finite score");
  return score >= theta ? Verdict::anomalous : Verdict::normal;
}

/// exp(a/tau) / (exp(a/tau) + exp(b/tau)), evaluated as a logistic so large
/// magnitudes cannot overflow.
inline double anomaly_probability(double s_a, double s_n, double tau) {
  if (!(tau > 0.0)) fail(ErrorCode::NonPositiveTemperature, "tau must be > 0");
  const double z = (s_a - s_n) / tau;
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Combines subset similarities into S_t for the configured mode. In prob
/// mode s_a and s_n are cosine-domain values and tau is applied here once.
inline void combine_scores(FrameScore& out, const ScoreConfig& cfg) {
  switch (cfg.mode) {
    case ScoreMode::diff:
      out.score = out.s_a - out.s_n;
      break;
    case ScoreMode::additive:
      out.score = out.s_a + out.s_n + cfg.epsilon;
      break;
    case ScoreMode::prob:
      out.probability = anomaly_probability(out.s_a, out.s_n, cfg.tau);
      out.score = *out.probability;
      break;
  }
  out.label = classify(out.score, cfg.theta);
}

/// Scores a fused unit embedding against both trace subsets. A bank missing
/// either subset yields an undefined score labeled normal and flagged.
inline FrameScore score_frame(const EmbeddingVector& u, const TraceBank& bank, const ScoreConfig& cfg) {
  cfg.validate();
  check_same_dim(u.dim(), bank.dim(), "fused embedding");
  FrameScore out;
  if (bank.subset_size(Subset::anomalous) == 0 || bank.subset_size(Subset::non_anomalous) == 0) {
    out.flag = FrameFlag::empty_subset;
    out.label = Verdict::normal;
    return out;
  }
  out.evidence_anomalous = bank.topk(u, cfg.k, Subset::anomalous);
  out.evidence_normal = bank.topk(u, cfg.k, Subset::non_anomalous);
  const double agg_tau = cfg.mode == ScoreMode::prob ? 1.0 : cfg.tau;
  out.s_a = subset_similarity(out.evidence_anomalous, cfg.aggregation, agg_tau);
  out.s_n = subset_similarity(out.evidence_normal, cfg.aggregation, agg_tau);
  combine_scores(out, cfg);
  return out;
}

struct ThresholdChoice {
  double theta = 0.0;
  double f1 = 0.0;
};

/// Threshold maximizing F1 under the inclusive >= rule, searched over the
/// midpoints between consecutive distinct scores; ties go to the lowest theta.
inline ThresholdChoice tune_threshold(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) fail(ErrorCode::LengthMismatch, "scores and labels differ in length");
  std::size_t positives = 0;
  for (auto l : labels) positives += l ? 1 : 0;
  if (positives == 0 || positives == labels.size()) fail(ErrorCode::SingleClass, "need both label classes");

  std::vector<std::size_t> idx(scores.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });

  // Walk thresholds from high to low: predicted positives are the prefix
  // with score >= theta.
  ThresholdChoice best{scores[idx.front()], -1.0};
  std::size_t tp = 0, predicted = 0;
  for (std::size_t i = 0; i + 1 < idx.size(); ++i) {
    predicted++;
    tp += labels[idx[i]] ? 1 : 0;
    const double hi = scores[idx[i]];
    const double lo = scores[idx[i + 1]];
    if (hi == lo) continue;
    const double theta = lo + (hi - lo) / 2.0;
    const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(predicted + positives);
    if (f1 >= best.f1) best = {theta, f1};  // later candidates are lower thetas
  }
  if (best.f1 < 0.0) {
    // A single distinct score: every frame is predicted positive.
    best.theta = scores[idx.front()];
    best.f1 = 2.0 * static_cast<double>(positives) / static_cast<double>(scores.size() + positives);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Line format (tab separated, 6 fractional digits):
//   frame  s_a  s_n  score  probability|-  label  evidence_anomalous  evidence_normal  flag
// Evidence is a comma-separated list of id:similarity, or "-" when absent.
// Undefined scores print "-" for s_a, s_n and score.

namespace detail {

inline std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string format_evidence(std::span<const RetrievalHit> hits) {
  if (hits.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < hits.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(hits[i].record_id);
    out += ':';
    out += fmt6(hits[i].similarity);
  }
  return out;
}

}  // namespace detail

inline std::string format_frame_score(const FrameScore& s) {
  std::string line = std::to_string(s.frame);
  auto field = [&line](const std::string& f) {
    line += '\t';
    line += f;
  };
  const bool def = s.defined();
  field(def ? detail::fmt6(s.s_a) : "-");
  field(def ? detail::fmt6(s.s_n) : "-");
  field(def ? detail::fmt6(s.score) : "-");
  field(s.probability ? detail::fmt6(*s.probability) : "-");
  field(std::string(to_string(s.label)));
  field(detail::format_evidence(s.evidence_anomalous));
  field(detail::format_evidence(s.evidence_normal));
  field(std::string(to_string(s.flag)));
  return line;
}

}  // namespace trace
