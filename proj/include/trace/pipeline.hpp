#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/binary_io.hpp"
#include "trace/error.hpp"
#include "trace/fusion.hpp"
#include "trace/metrics.hpp"
#include "trace/scoring.hpp"
#include "trace/trace_bank.hpp"

namespace trace {

struct Frame {
  EmbeddingVector appearance;
  EmbeddingVector temporal;
  std::optional<std::uint8_t> label;

  friend bool operator==(const Frame&, const Frame&) = default;
};

struct FrameStream {
  std::size_t dim_appearance = 0;
  std::size_t dim_temporal = 0;
  std::vector<Frame> frames;
  double fps = 30.0;

  bool has_labels() const {
    return !frames.empty() && std::all_of(frames.begin(), frames.end(), [](const Frame& f) { return f.label.has_value(); });
  }

  std::vector<std::uint8_t> labels() const {
    std::vector<std::uint8_t> out;
    out.reserve(frames.size());
    for (const auto& f : frames) out.push_back(f.label.value_or(0));
    return out;
  }

  void validate() const {
    if (dim_appearance == 0 || dim_temporal == 0) fail(ErrorCode::InvalidDims, "stream dims must be positive");
    for (const auto& f : frames) {
      check_same_dim(f.appearance.dim(), dim_appearance, "frame appearance");
      check_same_dim(f.temporal.dim(), dim_temporal, "frame temporal");
      if (f.label && *f.label > 1) fail(ErrorCode::InvalidArgument, "frame label must be 0 or 1");
    }
  }

  friend bool operator==(const FrameStream&, const FrameStream&) = default;
};

// ---------------------------------------------------------------------------
// Frame file
//   "TRCF" | version u16 | dim_appearance u32 | dim_temporal u32 | count u64 |
//   labels flag u8 | per frame: appearance f32s, temporal f32s, [label u8]

inline constexpr char kFramesMagic[] = "TRCF";
inline constexpr std::uint16_t kFramesVersion = 1;

inline std::vector<char> encode_frames(const FrameStream& s) {
  s.validate();
  const bool labels = s.has_labels();
  io::ByteWriter w;
  w.magic(std::string_view(kFramesMagic, 4));
  w.u16(kFramesVersion);
  w.u32(static_cast<std::uint32_t>(s.dim_appearance));
  w.u32(static_cast<std::uint32_t>(s.dim_temporal));
  w.u64(s.frames.size());
  w.u8(labels ? 1 : 0);
  for (const auto& f : s.frames) {
    w.f32s(f.appearance.values());
    w.f32s(f.temporal.values());
    if (labels) w.u8(*f.label);
  }
  return std::move(w.buffer());
}

inline FrameStream decode_frames(std::span<const char> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(std::string_view(kFramesMagic, 4));
  const auto version = r.u16();
  if (version != kFramesVersion) fail(ErrorCode::VersionMismatch, "frames version " + std::to_string(version));
  FrameStream s;
  s.dim_appearance = r.u32();
  s.dim_temporal = r.u32();
  const auto count = r.u64();
  const bool labels = r.u8() != 0;
  if (s.dim_appearance == 0 || s.dim_temporal == 0) fail(ErrorCode::InvalidDims, "frame dims must be positive");
  const std::uint64_t per_frame = (s.dim_appearance + s.dim_temporal) * 4ull + (labels ? 1 : 0);
  if (count > r.remaining() / per_frame) fail(ErrorCode::TruncatedFile, "frame payload cut short");
  s.frames.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::vector<float> a(s.dim_appearance), t(s.dim_temporal);
    r.f32s(a);
    r.f32s(t);
    Frame f{EmbeddingVector(std::move(a)), EmbeddingVector(std::move(t)), std::nullopt};
    if (labels) {
      f.label = r.u8();
      if (*f.label > 1) fail(ErrorCode::InvalidArgument, "frame label must be 0 or 1");
    }
    s.frames.push_back(std::move(f));
  }
  if (r.remaining() != 0) fail(ErrorCode::InvalidArgument, "trailing bytes after last frame");
  return s;
}

inline void save_frames(const std::filesystem::path& path, const FrameStream& s) { io::write_file(path, encode_frames(s)); }
inline FrameStream load_frames(const std::filesystem::path& path) { return decode_frames(io::read_file(path)); }

// ---------------------------------------------------------------------------
// Streaming

struct ScoreSeries {
  std::vector<FrameScore> scores;
  std::optional<std::vector<std::uint8_t>> labels;
  std::vector<double> latency_ms;  // per frame; covers fusion + retrieval + scoring
};

/// Online scorer for one stream. Holds the fusion window for the stream;
/// the bank and model are borrowed read-only and may be shared by many
/// scorers.
class StreamScorer {
 public:
  StreamScorer(const FusionModel& model, const TraceBank& bank, ScoreConfig cfg)
      : fuser_(model), bank_(bank), cfg_(cfg) {
    cfg_.validate();
    check_same_dim(bank.dim(), model.d_prime(), "bank dim vs model d'");
  }

  /// Scores the next frame, then appends its temporal embedding to the
  /// window. The first frame of a stream has an empty window and is
  /// returned unscored with the cold_start flag.
  FrameScore push(const Frame& f, double* latency_ms = nullptr) {
    const auto start = std::chrono::steady_clock::now();
    const std::optional<EmbeddingVector> u = fuser_.push(f.appearance, f.temporal);
    FrameScore s = score_fused_frame(u, bank_, cfg_);
    const auto stop = std::chrono::steady_clock::now();
    if (latency_ms) *latency_ms = std::chrono::duration<double, std::milli>(stop - start).count();
    s.frame = next_frame_++;
    return s;
  }

  void reset() {
    fuser_.reset();
    next_frame_ = 0;
  }

  static FrameScore score_fused_frame(const std::optional<EmbeddingVector>& u, const TraceBank& bank,
                                      const ScoreConfig& cfg) {
    if (u) return score_frame(*u, bank, cfg);
    FrameScore s;
    s.flag = FrameFlag::cold_start;
    s.label = Verdict::normal;
    return s;
  }

 private:
  StreamFuser fuser_;
  const TraceBank& bank_;
  ScoreConfig cfg_;
  std::uint64_t next_frame_ = 0;
};

/// Fused embeddings of every frame of a stream (nullopt at cold start).
/// Fusion does not depend on the bank, so ablations fuse once and score
/// the result against many banks or configs.
inline std::vector<std::optional<EmbeddingVector>> fuse_stream(const FrameStream& stream, const FusionModel& model) {
  check_same_dim(stream.dim_appearance, model.d(), "stream appearance dim");
  check_same_dim(stream.dim_temporal, model.d_temp(), "stream temporal dim");
  StreamFuser fuser(model);
  std::vector<std::optional<EmbeddingVector>> out;
  out.reserve(stream.frames.size());
  for (const auto& f : stream.frames) out.push_back(fuser.push(f.appearance, f.temporal));
  return out;
}

inline std::vector<FrameScore> score_fused(const std::vector<std::optional<EmbeddingVector>>& fused,
                                           const TraceBank& bank, ScoreConfig cfg) {
  cfg.validate();
  std::vector<FrameScore> out;
  out.reserve(fused.size());
  for (std::size_t i = 0; i < fused.size(); ++i) {
    if (fused[i]) check_same_dim(fused[i]->dim(), bank.dim(), "fused embedding vs bank");
    out.push_back(StreamScorer::score_fused_frame(fused[i], bank, cfg));
    out.back().frame = i;
  }
  return out;
}

inline ScoreSeries stream_score(const FrameStream& stream, const FusionModel& model, const TraceBank& bank,
                                const ScoreConfig& cfg) {
  check_same_dim(stream.dim_appearance, model.d(), "stream appearance dim");
  check_same_dim(stream.dim_temporal, model.d_temp(), "stream temporal dim");
  StreamScorer scorer(model, bank, cfg);
  ScoreSeries out;
  out.scores.reserve(stream.frames.size());
  out.latency_ms.reserve(stream.frames.size());
  for (const auto& f : stream.frames) {
    double ms = 0.0;
    out.scores.push_back(scorer.push(f, &ms));
    out.latency_ms.push_back(ms);
  }
  if (stream.has_labels()) out.labels = stream.labels();
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation

struct LatencySummary {
  double mean = 0.0, p50 = 0.0, p95 = 0.0, p99 = 0.0;
  double frames_per_second = 0.0;
};

/// Nearest-rank percentile (q in [0, 100]).
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(values.size())));
  return values[std::clamp<std::size_t>(rank, 1, values.size()) - 1];
}

inline LatencySummary summarize_latency(const std::vector<double>& ms) {
  LatencySummary s;
  if (ms.empty()) return s;
  double total = 0.0;
  for (double v : ms) total += v;
  s.mean = total / static_cast<double>(ms.size());
  s.p50 = percentile(ms, 50);
  s.p95 = percentile(ms, 95);
  s.p99 = percentile(ms, 99);
  s.frames_per_second = s.mean > 0.0 ? 1000.0 / s.mean : 0.0;
  return s;
}

struct EvalSummary {
  std::size_t frames = 0;
  std::size_t scored = 0;  // frames with a defined score; metrics use only these
  std::optional<double> auc;
  std::optional<double> ap;
  std::optional<ClassificationStats> f1;
  double theta = 0.0;
  std::optional<LatencySummary> latency;
  std::size_t videos = 1;
};

inline void collect_defined(const std::vector<FrameScore>& scores, const std::vector<std::uint8_t>& labels,
                            std::vector<double>& s_out, std::vector<std::uint8_t>& l_out) {
  if (scores.size() != labels.size()) fail(ErrorCode::LengthMismatch, "report and labels differ in frame count");
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!scores[i].defined()) continue;
    s_out.push_back(scores[i].score);
    l_out.push_back(labels[i]);
  }
}

inline bool both_classes(const std::vector<std::uint8_t>& l) {
  const auto p = std::count(l.begin(), l.end(), 1);
  return p > 0 && static_cast<std::size_t>(p) < l.size();
}

/// Pooled (all frames of all videos together) or per-video averaged metrics.
/// Per-video averaging skips videos that lack one of the classes.
inline EvalSummary evaluate(const std::vector<std::vector<FrameScore>>& videos,
                            const std::vector<std::vector<std::uint8_t>>& labels, double theta, bool per_video) {
  if (videos.size() != labels.size()) fail(ErrorCode::LengthMismatch, "videos and label sets differ in count");
  EvalSummary sum;
  sum.theta = theta;
  sum.videos = videos.size();
  std::vector<double> all_s;
  std::vector<std::uint8_t> all_l;
  double auc_total = 0.0, ap_total = 0.0;
  std::size_t auc_n = 0, ap_n = 0;
  for (std::size_t v = 0; v < videos.size(); ++v) {
    sum.frames += videos[v].size();
    std::vector<double> s;
    std::vector<std::uint8_t> l;
    collect_defined(videos[v], labels[v], s, l);
    if (per_video) {
      if (both_classes(l)) {
        auc_total += auc_roc(s, l);
        ++auc_n;
      }
      if (std::count(l.begin(), l.end(), 1) > 0) {
        ap_total += average_precision(s, l);
        ++ap_n;
      }
    }
    all_s.insert(all_s.end(), s.begin(), s.end());
    all_l.insert(all_l.end(), l.begin(), l.end());
  }
  sum.scored = all_s.size();
  if (per_video) {
    if (auc_n) sum.auc = auc_total / static_cast<double>(auc_n);
    if (ap_n) sum.ap = ap_total / static_cast<double>(ap_n);
  } else {
    if (both_classes(all_l)) sum.auc = auc_roc(all_s, all_l);
    if (std::count(all_l.begin(), all_l.end(), 1) > 0) sum.ap = average_precision(all_s, all_l);
  }
  if (!all_s.empty()) sum.f1 = f1_at(all_s, all_l, theta);
  return sum;
}

inline nlohmann::json to_json(const EvalSummary& s) {
  nlohmann::json j;
  j["frames"] = s.frames;
  j["scored_frames"] = s.scored;
  j["videos"] = s.videos;
  j["auc_roc"] = s.auc ? nlohmann::json(*s.auc) : nlohmann::json(nullptr);
  j["average_precision"] = s.ap ? nlohmann::json(*s.ap) : nlohmann::json(nullptr);
  j["theta"] = s.theta;
  if (s.f1) {
    j["precision"] = s.f1->precision;
    j["recall"] = s.f1->recall;
    j["f1"] = s.f1->f1;
    j["no_positive_predictions"] = s.f1->no_positive_predictions;
  }
  if (s.latency) {
    j["latency_ms"] = {{"mean", s.latency->mean}, {"p50", s.latency->p50}, {"p95", s.latency->p95},
                       {"p99", s.latency->p99}, {"frames_per_second", s.latency->frames_per_second}};
  }
  return j;
}

// ---------------------------------------------------------------------------
// Report lines

namespace detail {

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    fail(ErrorCode::InvalidArgument, "not a number: " + s);
  }
  if (used != s.size()) fail(ErrorCode::InvalidArgument, "not a number: " + s);
  return v;
}

inline std::vector<RetrievalHit> parse_evidence(const std::string& field, Label label) {
  std::vector<RetrievalHit> hits;
  if (field == "-") return hits;
  for (const auto& item : split(field, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) fail(ErrorCode::InvalidArgument, "bad evidence item: " + item);
    RetrievalHit h;
    h.record_id = std::stoull(item.substr(0, colon));
    h.similarity = parse_double(item.substr(colon + 1));
    h.label = label;
    hits.push_back(h);
  }
  return hits;
}

}  // namespace detail

inline FrameScore parse_frame_score(const std::string& line) {
  const auto f = detail::split(line, '\t');
  if (f.size() != 9) fail(ErrorCode::InvalidArgument, "report line needs 9 fields, got " + std::to_string(f.size()));
  FrameScore s;
  s.frame = std::stoull(f[0]);
  if (f[8] == "ok") s.flag = FrameFlag::ok;
  else if (f[8] == "cold_start") s.flag = FrameFlag::cold_start;
  else if (f[8] == "empty_subset") s.flag = FrameFlag::empty_subset;
  else fail(ErrorCode::InvalidArgument, "unknown frame flag " + f[8]);
  if (s.defined()) {
    s.s_a = detail::parse_double(f[1]);
    s.s_n = detail::parse_double(f[2]);
    s.score = detail::parse_double(f[3]);
  }
  if (f[4] != "-") s.probability = detail::parse_double(f[4]);
  if (f[5] == "anomalous") s.label = Verdict::anomalous;
  else if (f[5] == "normal") s.label = Verdict::normal;
  else fail(ErrorCode::InvalidArgument, "unknown label " + f[5]);
  s.evidence_anomalous = detail::parse_evidence(f[6], Label::anomalous);
  s.evidence_normal = detail::parse_evidence(f[7], Label::non_anomalous);
  return s;
}

inline void write_report(const std::filesystem::path& path, const std::vector<std::vector<FrameScore>>& videos) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  for (std::size_t v = 0; v < videos.size(); ++v) {
    if (videos.size() > 1) out << "# video " << v << '\n';
    for (const auto& s : videos[v]) out << format_frame_score(s) << '\n';
  }
  if (!out) fail(ErrorCode::IoError, "write failed: " + path.string());
}

/// Reads a report; "# video" comment lines start a new video.
inline std::vector<std::vector<FrameScore>> read_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::FileNotFound, path.string());
  std::vector<std::vector<FrameScore>> videos;
  std::string line;
  bool started = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("#", 0) == 0) {
      videos.emplace_back();
      started = true;
      continue;
    }
    if (!started) {
      videos.emplace_back();
      started = true;
    }
    videos.back().push_back(parse_frame_score(line));
  }
  return videos;
}

}  // namespace trace
