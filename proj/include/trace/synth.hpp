#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>
#include <vector>

#include "trace/error.hpp"
#include "trace/fusion.hpp"
#include "trace/pipeline.hpp"
#include "trace/rng.hpp"
#include "trace/trace_bank.hpp"

namespace trace {

/// Desk-scale stand-in for labeled surveillance footage.
///
/// Every context owns a normal and an anomalous prototype direction in both
/// the appearance and the temporal embedding space; the two are `separation`
/// radians apart. Frames arrive in segments of `segment_length` frames that
/// share one context and one label, and each frame is its regime's prototype
/// plus isotropic Gaussian noise (relative magnitude `noise`), re-normalized.
/// Labels hold for `segment_length` frames; inside a segment the context
/// changes every `context_length` frames, drawn without replacement from a
/// bag of all contexts, so every label sees the contexts in equal measure.
/// Traces are the same prototypes with noise passed through the fusion model,
/// so they live in the fused space that scoring queries.
struct SynthConfig {
  std::size_t n_frames = 10000;
  double anomaly_rate = 0.3;
  double separation = std::numbers::pi / 2;  // radians; pi/2 = orthogonal regimes
  std::size_t n_contexts = 20;
  std::uint64_t seed = 0;
  double noise = 0.5;
  double trace_noise = 0.5;
  std::size_t traces_per_context = 6;  // per label
  std::size_t segment_length = 200;
  std::size_t context_length = 10;

  void validate() const {
    if (n_frames == 0) fail(ErrorCode::InvalidConfig, "n_frames must be >= 1");
    if (!(anomaly_rate > 0.0 && anomaly_rate < 1.0)) fail(ErrorCode::InvalidConfig, "anomaly_rate must lie in (0, 1)");
    if (!(separation >= 0.0) || !std::isfinite(separation)) fail(ErrorCode::InvalidConfig, "separation must be >= 0");
    if (n_contexts == 0) fail(ErrorCode::InvalidConfig, "need at least one context");
    if (!(noise >= 0.0) || !(trace_noise >= 0.0)) fail(ErrorCode::InvalidConfig, "noise must be >= 0");
    if (traces_per_context == 0) fail(ErrorCode::InvalidConfig, "traces_per_context must be >= 1");
    if (segment_length == 0) fail(ErrorCode::InvalidConfig, "segment_length must be >= 1");
    if (context_length == 0) fail(ErrorCode::InvalidConfig, "context_length must be >= 1");
  }
};

struct SynthData {
  FrameStream stream;
  TraceBank bank;
};

namespace detail {

inline std::vector<double> random_unit(std::size_t dim, Rng& rng) {
  std::vector<double> v(dim);
  double n = 0.0;
  while (n < 1e-9) {
    n = 0.0;
    for (auto& x : v) {
      x = rng.normal();
      n += x * x;
    }
  }
  n = std::sqrt(n);
  for (auto& x : v) x /= n;
  return v;
}

struct RegimePair {
  std::vector<double> normal;
  std::vector<double> anomalous;
};

// Normal prototype b, anomalous prototype cos(sep) b + sin(sep) o with o
// orthogonal to b.
inline RegimePair make_regimes(std::size_t dim, double separation, Rng& rng) {
  RegimePair p;
  p.normal = random_unit(dim, rng);
  std::vector<double> o = random_unit(dim, rng);
  double proj = 0.0;
  for (std::size_t i = 0; i < dim; ++i) proj += o[i] * p.normal[i];
  double n = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    o[i] -= proj * p.normal[i];
    n += o[i] * o[i];
  }
  n = std::sqrt(n);
  p.anomalous.resize(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    p.anomalous[i] = std::cos(separation) * p.normal[i] + std::sin(separation) * o[i] / n;
  }
  return p;
}

inline EmbeddingVector noisy(const std::vector<double>& proto, double noise, Rng& rng) {
  const double scale = noise / std::sqrt(static_cast<double>(proto.size()));
  std::vector<float> v(proto.size());
  for (std::size_t i = 0; i < proto.size(); ++i) v[i] = static_cast<float>(proto[i] + scale * rng.normal());
  return l2_normalize(v);
}

struct ContextPrototypes {
  RegimePair appearance;
  RegimePair temporal;
};

}  // namespace detail

/// Draws are split into independent streams (prototypes, frames, and one
/// stream per context/label for traces), so changing traces_per_context
/// leaves the frames untouched and smaller banks are prefixes of larger ones.
inline SynthData synth_generate(const SynthConfig& cfg, const FusionModel& model) {
  cfg.validate();
  model.validate();
  Rng proto_rng(mix_seed(cfg.seed ^ 0x70726f746fULL));
  std::vector<detail::ContextPrototypes> protos;
  protos.reserve(cfg.n_contexts);
  for (std::size_t c = 0; c < cfg.n_contexts; ++c) {
    detail::ContextPrototypes p;
    p.appearance = detail::make_regimes(model.d(), cfg.separation, proto_rng);
    p.temporal = detail::make_regimes(model.d_temp(), cfg.separation, proto_rng);
    protos.push_back(std::move(p));
  }

  TraceBank bank(model.d_prime());
  bank.reserve(cfg.n_contexts * 2 * cfg.traces_per_context);
  std::uint64_t next_id = 0;
  for (std::size_t c = 0; c < cfg.n_contexts; ++c) {
    for (Label label : {Label::non_anomalous, Label::anomalous}) {
      Rng rng(mix_seed(cfg.seed ^ mix_seed((c << 1) | static_cast<std::uint64_t>(label))));
      const auto& a = label == Label::anomalous ? protos[c].appearance.anomalous : protos[c].appearance.normal;
      const auto& t = label == Label::anomalous ? protos[c].temporal.anomalous : protos[c].temporal.normal;
      for (std::size_t i = 0; i < cfg.traces_per_context; ++i) {
        const EmbeddingVector f = detail::noisy(a, cfg.trace_noise, rng);
        std::vector<EmbeddingVector> window;
        for (std::size_t w = 0; w < model.window; ++w) window.push_back(detail::noisy(t, cfg.trace_noise, rng));
        TraceRecord r;
        r.id = next_id++;
        r.label = label;
        r.context_id = static_cast<std::uint32_t>(c);
        r.embedding = fuse_frame(f, window, model);
        bank.insert(r);
      }
    }
  }

  FrameStream stream;
  stream.dim_appearance = model.d();
  stream.dim_temporal = model.d_temp();
  stream.frames.reserve(cfg.n_frames);
  Rng frame_rng(mix_seed(cfg.seed ^ 0x6672616d6573ULL));
  std::vector<std::size_t> bag;
  auto next_context = [&] {
    if (bag.empty()) {
      for (std::size_t c = 0; c < cfg.n_contexts; ++c) bag.push_back(c);
      for (std::size_t i = bag.size(); i > 1; --i) std::swap(bag[i - 1], bag[frame_rng.below(i)]);
    }
    const std::size_t c = bag.back();
    bag.pop_back();
    return c;
  };
  while (stream.frames.size() < cfg.n_frames) {
    const bool anomalous = frame_rng.uniform01() < cfg.anomaly_rate;
    std::size_t c = 0;
    for (std::size_t i = 0; i < cfg.segment_length && stream.frames.size() < cfg.n_frames; ++i) {
      if (i % cfg.context_length == 0) c = next_context();
      const auto& a = anomalous ? protos[c].appearance.anomalous : protos[c].appearance.normal;
      const auto& t = anomalous ? protos[c].temporal.anomalous : protos[c].temporal.normal;
      stream.frames.push_back(Frame{detail::noisy(a, cfg.noise, frame_rng), detail::noisy(t, cfg.noise, frame_rng),
                                    static_cast<std::uint8_t>(anomalous ? 1 : 0)});
    }
  }
  return SynthData{std::move(stream), std::move(bank)};
}

}  // namespace trace
