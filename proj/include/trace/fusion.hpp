#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <ranges>
#include <string>
#include <utility>
#include <vector>

#include "trace/binary_io.hpp"
#include "trace/error.hpp"
#include "trace/rng.hpp"
#include "trace/vecmath.hpp"

namespace trace {

enum class Activation : std::uint8_t { relu = 0, identity = 1 };

/// Two-layer MLP followed by layer normalization. Maps in_dim -> hidden -> out_dim.
/// dropout_rate is carried for completeness; inference treats dropout as identity.
struct AdapterWeights {
  DenseMatrix w1;
  std::vector<float> b1;
  DenseMatrix w2;
  std::vector<float> b2;
  std::vector<float> ln_gamma;
  std::vector<float> ln_beta;
  float dropout_rate = 0.0f;

  std::size_t in_dim() const { return w1.rows(); }
  std::size_t hidden() const { return w1.cols(); }
  std::size_t out_dim() const { return w2.cols(); }

  void validate() const {
    if (w1.rows() == 0 || w2.rows() == 0) fail(ErrorCode::ShapeMismatch, "adapter has empty weights");
    if (w2.rows() != w1.cols()) fail(ErrorCode::ShapeMismatch, "adapter hidden widths disagree");
    if (b1.size() != w1.cols()) fail(ErrorCode::ShapeMismatch, "adapter b1 length");
    if (b2.size() != w2.cols()) fail(ErrorCode::ShapeMismatch, "adapter b2 length");
    if (ln_gamma.size() != w2.cols() || ln_beta.size() != w2.cols()) {
      fail(ErrorCode::ShapeMismatch, "adapter layer-norm parameter length");
    }
    if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f)) {
      fail(ErrorCode::ShapeMismatch, "dropout rate must lie in [0, 1)");
    }
  }

  friend bool operator==(const AdapterWeights&, const AdapterWeights&) = default;
};

struct AttentionWeights {
  std::size_t heads = 0;
  std::size_t head_dim = 0;
  DenseMatrix wq;  // d' x heads*head_dim
  DenseMatrix wk;
  DenseMatrix wv;
  DenseMatrix wo;  // heads*head_dim x d'

  std::size_t inner() const { return heads * head_dim; }
  std::size_t model_dim() const { return wq.rows(); }

  void validate() const {
    if (heads == 0 || head_dim == 0) fail(ErrorCode::ShapeMismatch, "attention heads/head_dim must be positive");
    const std::size_t d = wq.rows();
    if (wq.cols() != inner() || wk.cols() != inner() || wv.cols() != inner()) {
      fail(ErrorCode::ShapeMismatch, "attention projection width != heads*head_dim");
    }
    if (wk.rows() != d || wv.rows() != d) fail(ErrorCode::ShapeMismatch, "attention input dims disagree");
    if (wo.rows() != inner() || wo.cols() != d) fail(ErrorCode::ShapeMismatch, "attention output projection shape");
  }

  friend bool operator==(const AttentionWeights&, const AttentionWeights&) = default;
};

struct FusionShape {
  std::size_t d = 512;       // appearance embedding dim
  std::size_t d_temp = 768;  // temporal embedding dim
  std::size_t d_prime = 512; // shared latent dim
  std::size_t heads = 8;
  std::size_t head_dim = 64;
  std::size_t window = 32;
  std::size_t hidden = 0;    // adapter hidden width; 0 means d_prime
  Activation activation = Activation::relu;
};

struct FusionModel {
  AdapterWeights a_vis;
  AdapterWeights a_temp;
  AttentionWeights attn;
  Activation activation = Activation::relu;
  std::size_t window = 32;

  std::size_t d() const { return a_vis.in_dim(); }
  std::size_t d_temp() const { return a_temp.in_dim(); }
  std::size_t d_prime() const { return a_vis.out_dim(); }

  void validate() const {
    a_vis.validate();
    a_temp.validate();
    attn.validate();
    if (a_temp.out_dim() != a_vis.out_dim()) fail(ErrorCode::ShapeMismatch, "adapters disagree on d'");
    if (attn.model_dim() != d_prime()) fail(ErrorCode::ShapeMismatch, "attention dim != d'");
    if (window == 0) fail(ErrorCode::ShapeMismatch, "window must be >= 1");
  }

  friend bool operator==(const FusionModel&, const FusionModel&) = default;
};

/// Fixed-capacity FIFO over the most recent entries; the oldest is evicted
/// once capacity is reached.
template <typename T>
class SlidingWindow {
 public:
  explicit SlidingWindow(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) fail(ErrorCode::InvalidArgument, "window capacity must be >= 1");
  }

  void push(T value) {
    if (entries_.size() == capacity_) entries_.pop_front();
    entries_.push_back(std::move(value));
  }

  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t capacity() const noexcept { return capacity_; }
  bool empty() const noexcept { return entries_.empty(); }
  bool full() const noexcept { return entries_.size() == capacity_; }
  void clear() { entries_.clear(); }

  const std::deque<T>& entries() const noexcept { return entries_; }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }

 private:
  std::size_t capacity_;
  std::deque<T> entries_;
};

using TemporalWindow = SlidingWindow<EmbeddingVector>;

template <typename R>
concept EmbeddingRange =
    std::ranges::sized_range<R> && std::same_as<std::ranges::range_value_t<R>, EmbeddingVector>;

inline EmbeddingVector adapter_forward(const EmbeddingVector& x, const AdapterWeights& w,
                                       Activation act = Activation::relu) {
  check_same_dim(x.dim(), w.in_dim(), "adapter input");
  std::vector<float> h = vec_mat(x.values(), w.w1);
  for (std::size_t i = 0; i < h.size(); ++i) {
    h[i] += w.b1[i];
    if (act == Activation::relu && h[i] < 0.0f) h[i] = 0.0f;
  }
  std::vector<float> y = vec_mat(h, w.w2);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += w.b2[i];
  // Dropout would sit here in training; at inference it is the identity.
  return EmbeddingVector(layer_norm(y, w.ln_gamma, w.ln_beta));
}

struct AttentionResult {
  EmbeddingVector output;
  std::vector<std::vector<double>> weights;  // [head][kv entry]
};

/// Key and value projections of one kv entry (each heads*head_dim wide).
/// Streaming callers cache these so each window entry is projected once.
struct ProjectedKV {
  std::vector<float> key;
  std::vector<float> value;
};

inline ProjectedKV project_kv(const EmbeddingVector& e, const AttentionWeights& w) {
  check_same_dim(e.dim(), w.model_dim(), "attention kv entry");
  return ProjectedKV{vec_mat(e.values(), w.wk), vec_mat(e.values(), w.wv)};
}

inline std::vector<float> project_query(const EmbeddingVector& q, const AttentionWeights& w) {
  check_same_dim(q.dim(), w.model_dim(), "attention query");
  return vec_mat(q.values(), w.wq);
}

/// Per head: alpha = softmax(q_h . k_h^T / sqrt(head_dim)), context_h = alpha . v_h;
/// output = concat_h(context_h) . Wo.
template <typename R>
AttentionResult attend(std::span<const float> qp, const R& kv, const AttentionWeights& w) {
  if (std::ranges::empty(kv)) fail(ErrorCode::EmptyWindow, "cross-attention needs at least one kv entry");
  const std::size_t n = std::ranges::size(kv);
  const std::size_t hd = w.head_dim;
  std::vector<const ProjectedKV*> entries;
  entries.reserve(n);
  for (const ProjectedKV& e : kv) entries.push_back(&e);

  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  AttentionResult result;
  result.weights.resize(w.heads);
  std::vector<float> context(w.inner(), 0.0f);
  std::vector<double> logits(n);
  for (std::size_t h = 0; h < w.heads; ++h) {
    const std::span<const float> qh(qp.data() + h * hd, hd);
    for (std::size_t j = 0; j < n; ++j) {
      logits[j] = dot(qh, std::span<const float>(entries[j]->key.data() + h * hd, hd)) * scale;
    }
    std::vector<double> alpha = softmax(logits);
    for (std::size_t c = 0; c < hd; ++c) {
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += alpha[j] * entries[j]->value[h * hd + c];
      context[h * hd + c] = static_cast<float>(acc);
    }
    result.weights[h] = std::move(alpha);
  }
  result.output = EmbeddingVector(vec_mat(context, w.wo));
  return result;
}

/// Single-query multi-head attention: the query attends over kv, which
/// supplies both keys and values. No positional encoding is applied, so
/// the result is invariant to the order of kv.
template <EmbeddingRange R>
AttentionResult cross_attention_detailed(const EmbeddingVector& q, const R& kv, const AttentionWeights& w) {
  if (std::ranges::empty(kv)) fail(ErrorCode::EmptyWindow, "cross-attention needs at least one kv entry");
  const std::vector<float> qp = project_query(q, w);
  std::vector<ProjectedKV> projected;
  projected.reserve(std::ranges::size(kv));
  for (const EmbeddingVector& e : kv) projected.push_back(project_kv(e, w));
  return attend(qp, projected, w);
}

template <EmbeddingRange R>
EmbeddingVector cross_attention(const EmbeddingVector& q, const R& kv, const AttentionWeights& w) {
  return cross_attention_detailed(q, kv, w).output;
}

inline EmbeddingVector project_appearance(const EmbeddingVector& f, const FusionModel& m) {
  check_same_dim(f.dim(), m.d(), "appearance embedding");
  return adapter_forward(f, m.a_vis, m.activation);
}

inline EmbeddingVector project_temporal(const EmbeddingVector& r, const FusionModel& m) {
  check_same_dim(r.dim(), m.d_temp(), "temporal embedding");
  return adapter_forward(r, m.a_temp, m.activation);
}

/// Fusion from already-projected inputs. Streaming callers keep a window of
/// projected temporal embeddings so each frame is projected once.
template <EmbeddingRange R>
EmbeddingVector fuse_projected(const EmbeddingVector& q, const R& projected_window, const FusionModel& m) {
  return l2_normalize(cross_attention(q, projected_window, m.attn));
}

/// u_t: unit-norm fused embedding of the current appearance embedding and
/// the raw temporal embeddings of the preceding frames.
template <EmbeddingRange R>
EmbeddingVector fuse_frame(const EmbeddingVector& f, const R& window, const FusionModel& m) {
  if (std::ranges::empty(window)) fail(ErrorCode::EmptyWindow, "cold start: temporal window is empty");
  const EmbeddingVector q = project_appearance(f, m);
  std::vector<EmbeddingVector> projected;
  projected.reserve(std::ranges::size(window));
  for (const EmbeddingVector& r : window) projected.push_back(project_temporal(r, m));
  return fuse_projected(q, projected, m);
}

inline EmbeddingVector fuse_frame(const EmbeddingVector& f, const TemporalWindow& window, const FusionModel& m) {
  return fuse_frame(f, window.entries(), m);
}

/// Online fusion for one stream. The window caches the key/value
/// projections of the preceding frames' projected temporal embeddings, so
/// each frame costs one adapter pass per input plus the attention itself.
class StreamFuser {
 public:
  explicit StreamFuser(const FusionModel& model) : model_(model), window_(model.window) {}

  /// Fuses the current frame against the window, then appends the frame's
  /// temporal embedding. Returns nothing while the window is empty.
  std::optional<EmbeddingVector> push(const EmbeddingVector& appearance, const EmbeddingVector& temporal) {
    check_same_dim(appearance.dim(), model_.d(), "frame appearance");
    check_same_dim(temporal.dim(), model_.d_temp(), "frame temporal");
    std::optional<EmbeddingVector> u;
    if (!window_.empty()) {
      const EmbeddingVector q = project_appearance(appearance, model_);
      u = l2_normalize(attend(project_query(q, model_.attn), window_.entries(), model_.attn).output);
    }
    window_.push(project_kv(project_temporal(temporal, model_), model_.attn));
    return u;
  }

  void reset() { window_.clear(); }
  std::size_t window_size() const noexcept { return window_.size(); }

 private:
  const FusionModel& model_;
  SlidingWindow<ProjectedKV> window_;
};

namespace detail {

inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

inline DenseMatrix xavier_uniform(std::size_t rows, std::size_t cols, Rng& rng) {
  DenseMatrix m(rows, cols);
  const double bound = xavier_bound(rows, cols);
  const auto fbound = static_cast<float>(bound);
  for (float& v : m.values()) {
    float x = static_cast<float>(rng.uniform(-bound, bound));
    // Rounding to float must not push a sample past the bound.
    if (std::abs(x) > bound) x = std::copysign(std::nextafter(fbound, 0.0f), x);
    v = x;
  }
  return m;
}

inline AdapterWeights init_adapter(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
  AdapterWeights a;
  a.w1 = xavier_uniform(in, hidden, rng);
  a.b1.assign(hidden, 0.0f);
  a.w2 = xavier_uniform(hidden, out, rng);
  a.b2.assign(out, 0.0f);
  a.ln_gamma.assign(out, 1.0f);
  a.ln_beta.assign(out, 0.0f);
  a.dropout_rate = 0.1f;
  return a;
}

}  // namespace detail

/// Deterministic Xavier-uniform initialization. Draws come from a single
/// Rng(seed) stream in the order a_vis.w1, a_vis.w2, a_temp.w1, a_temp.w2,
/// wq, wk, wv, wo; biases and layer-norm beta are zero, gamma is one.
inline FusionModel init_weights(std::uint64_t seed, const FusionShape& s) {
  if (s.d == 0 || s.d_temp == 0 || s.d_prime == 0 || s.heads == 0 || s.head_dim == 0 || s.window == 0) {
    fail(ErrorCode::InvalidDims, "all fusion dimensions must be positive");
  }
  const std::size_t hidden = s.hidden == 0 ? s.d_prime : s.hidden;
  Rng rng(seed);
  FusionModel m;
  m.activation = s.activation;
  m.window = s.window;
  m.a_vis = detail::init_adapter(s.d, hidden, s.d_prime, rng);
  m.a_temp = detail::init_adapter(s.d_temp, hidden, s.d_prime, rng);
  const std::size_t inner = s.heads * s.head_dim;
  m.attn.heads = s.heads;
  m.attn.head_dim = s.head_dim;
  m.attn.wq = detail::xavier_uniform(s.d_prime, inner, rng);
  m.attn.wk = detail::xavier_uniform(s.d_prime, inner, rng);
  m.attn.wv = detail::xavier_uniform(s.d_prime, inner, rng);
  m.attn.wo = detail::xavier_uniform(inner, s.d_prime, rng);
  return m;
}

// ---------------------------------------------------------------------------
// Weights file
//
//   "TRCW" | version u16 | activation u8 | tensor count u16 |
//   per tensor: name len u8, name, rank u8, dims u32[rank], f32 data
//
// Hyperparameters without a tensor of their own (heads, head_dim, window,
// dropout rates) travel in the rank-1 tensor "meta.hparams".

inline constexpr char kWeightsMagic[] = "TRCW";
inline constexpr std::uint16_t kWeightsVersion = 1;

namespace detail {

struct Tensor {
  std::vector<std::uint32_t> dims;
  std::vector<float> data;
};

inline void put_tensor(io::ByteWriter& w, const std::string& name, std::vector<std::uint32_t> dims,
                       std::span<const float> data) {
  w.u8(static_cast<std::uint8_t>(name.size()));
  w.bytes(name);
  w.u8(static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) w.u32(d);
  w.f32s(data);
}

inline void put_matrix(io::ByteWriter& w, const std::string& name, const DenseMatrix& m) {
  put_tensor(w, name, {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())}, m.values());
}

inline void put_vector(io::ByteWriter& w, const std::string& name, std::span<const float> v) {
  put_tensor(w, name, {static_cast<std::uint32_t>(v.size())}, v);
}

inline const Tensor& need(const std::map<std::string, Tensor>& t, const std::string& name, std::size_t rank) {
  auto it = t.find(name);
  if (it == t.end()) fail(ErrorCode::ShapeMismatch, "missing tensor " + name);
  if (it->second.dims.size() != rank) fail(ErrorCode::ShapeMismatch, "tensor " + name + " has wrong rank");
  return it->second;
}

inline DenseMatrix get_matrix(const std::map<std::string, Tensor>& t, const std::string& name) {
  const Tensor& x = need(t, name, 2);
  if (x.dims[0] == 0 || x.dims[1] == 0) fail(ErrorCode::ShapeMismatch, "tensor " + name + " has a zero dim");
  return DenseMatrix(x.dims[0], x.dims[1], x.data);
}

inline std::vector<float> get_vector(const std::map<std::string, Tensor>& t, const std::string& name) {
  return need(t, name, 1).data;
}

inline void put_adapter(io::ByteWriter& w, const std::string& p, const AdapterWeights& a) {
  put_matrix(w, p + ".w1", a.w1);
  put_vector(w, p + ".b1", a.b1);
  put_matrix(w, p + ".w2", a.w2);
  put_vector(w, p + ".b2", a.b2);
  put_vector(w, p + ".ln_gamma", a.ln_gamma);
  put_vector(w, p + ".ln_beta", a.ln_beta);
}

inline AdapterWeights get_adapter(const std::map<std::string, Tensor>& t, const std::string& p) {
  AdapterWeights a;
  a.w1 = get_matrix(t, p + ".w1");
  a.b1 = get_vector(t, p + ".b1");
  a.w2 = get_matrix(t, p + ".w2");
  a.b2 = get_vector(t, p + ".b2");
  a.ln_gamma = get_vector(t, p + ".ln_gamma");
  a.ln_beta = get_vector(t, p + ".ln_beta");
  return a;
}

}  // namespace detail

inline std::vector<char> encode_weights(const FusionModel& m) {
  m.validate();
  io::ByteWriter w;
  w.magic(std::string_view(kWeightsMagic, 4));
  w.u16(kWeightsVersion);
  w.u8(static_cast<std::uint8_t>(m.activation));
  w.u16(17);
  detail::put_adapter(w, "a_vis", m.a_vis);
  detail::put_adapter(w, "a_temp", m.a_temp);
  detail::put_matrix(w, "attn.wq", m.attn.wq);
  detail::put_matrix(w, "attn.wk", m.attn.wk);
  detail::put_matrix(w, "attn.wv", m.attn.wv);
  detail::put_matrix(w, "attn.wo", m.attn.wo);
  const float hparams[5] = {static_cast<float>(m.attn.heads), static_cast<float>(m.attn.head_dim),
                            static_cast<float>(m.window), m.a_vis.dropout_rate, m.a_temp.dropout_rate};
  detail::put_vector(w, "meta.hparams", hparams);
  return std::move(w.buffer());
}

inline FusionModel decode_weights(std::span<const char> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(std::string_view(kWeightsMagic, 4));
  const auto version = r.u16();
  if (version != kWeightsVersion) {
    fail(ErrorCode::VersionMismatch, "weights version " + std::to_string(version));
  }
  const auto act = r.u8();
  if (act > static_cast<std::uint8_t>(Activation::identity)) {
    fail(ErrorCode::ShapeMismatch, "unknown activation tag " + std::to_string(act));
  }
  const auto count = r.u16();
  std::map<std::string, detail::Tensor> tensors;
  for (std::uint16_t i = 0; i < count; ++i) {
    const std::string name = r.bytes(r.u8());
    detail::Tensor t;
    const auto rank = r.u8();
    std::uint64_t elems = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      t.dims.push_back(r.u32());
      elems *= t.dims.back();
    }
    if (elems * 4 > r.remaining()) fail(ErrorCode::TruncatedFile, "tensor " + name + " is cut short");
    t.data.resize(elems);
    r.f32s(t.data);
    tensors[name] = std::move(t);
  }
  if (r.remaining() != 0) fail(ErrorCode::ShapeMismatch, "trailing bytes after last tensor");

  FusionModel m;
  m.activation = static_cast<Activation>(act);
  m.a_vis = detail::get_adapter(tensors, "a_vis");
  m.a_temp = detail::get_adapter(tensors, "a_temp");
  m.attn.wq = detail::get_matrix(tensors, "attn.wq");
  m.attn.wk = detail::get_matrix(tensors, "attn.wk");
  m.attn.wv = detail::get_matrix(tensors, "attn.wv");
  m.attn.wo = detail::get_matrix(tensors, "attn.wo");
  const auto hp = detail::get_vector(tensors, "meta.hparams");
  if (hp.size() != 5) fail(ErrorCode::ShapeMismatch, "meta.hparams must have 5 entries");
  m.attn.heads = static_cast<std::size_t>(hp[0]);
  m.attn.head_dim = static_cast<std::size_t>(hp[1]);
  m.window = static_cast<std::size_t>(hp[2]);
  m.a_vis.dropout_rate = hp[3];
  m.a_temp.dropout_rate = hp[4];
  m.validate();
  return m;
}

inline void save_weights(const std::filesystem::path& path, const FusionModel& m) {
  io::write_file(path, encode_weights(m));
}

inline FusionModel load_weights(const std::filesystem::path& path) {
  return decode_weights(io::read_file(path));
}

}  // namespace trace
