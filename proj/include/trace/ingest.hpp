#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <memory>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "trace/error.hpp"
#include "trace/rng.hpp"
#include "trace/trace_bank.hpp"
#include "trace/vecmath.hpp"

namespace trace {

// ---------------------------------------------------------------------------
// Embedders

enum class EmbedderKind { stub, http };

struct RetryPolicy {
  std::size_t max_retries = 3;
  std::chrono::milliseconds initial_backoff{200};
};

struct EmbedderSpec {
  EmbedderKind kind = EmbedderKind::stub;
  std::size_t dim = 512;
  std::string endpoint;  // http only, e.g. http://127.0.0.1:8080/embed
  std::chrono::milliseconds timeout{10000};
  std::uint64_t seed = 0;  // stub only
  std::size_t batch_size = 32;
  std::size_t max_in_flight = 4;
  RetryPolicy retry;

  void validate() const {
    if (dim == 0) fail(ErrorCode::InvalidConfig, "embedder dim must be >= 1");
    if (kind == EmbedderKind::http && endpoint.empty()) fail(ErrorCode::InvalidConfig, "http embedder needs an endpoint");
    if (batch_size == 0 || max_in_flight == 0) fail(ErrorCode::InvalidConfig, "batch size and concurrency must be >= 1");
  }
};

class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::size_t dim() const = 0;
  virtual std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) = 0;
};

/// FNV-1a, 64-bit.
constexpr std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic stand-in for a text encoder: a Gaussian vector seeded by
/// hash(text), dim and seed, normalized to unit length. Unrelated texts are
/// nearly orthogonal at high dim.
inline EmbeddingVector stub_embed(std::string_view text, std::size_t dim, std::uint64_t seed) {
  if (text.empty()) fail(ErrorCode::EmptyText, "cannot embed empty text");
  if (dim == 0) fail(ErrorCode::InvalidDims, "dim must be >= 1");
  Rng rng(mix_seed(fnv1a(text) ^ mix_seed(seed) ^ (static_cast<std::uint64_t>(dim) << 40)));
  std::vector<float> v(dim);
  for (;;) {
    rng.fill_normal(v);
    if (norm2(v) > kZeroNorm) break;
  }
  return l2_normalize(v);
}

class StubEmbedder final : public Embedder {
 public:
  StubEmbedder(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}
  std::size_t dim() const override { return dim_; }
  std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override {
    std::vector<EmbeddingVector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(stub_embed(t, dim_, seed_));
    return out;
  }

 private:
  std::size_t dim_;
  std::uint64_t seed_;
};

struct Endpoint {
  std::string host_port;  // "http://host:port"
  std::string path;
};

inline Endpoint parse_endpoint(const std::string& url) {
  static const std::regex re(R"(^(http)://([^/:]+)(:(\d+))?(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) fail(ErrorCode::InvalidConfig, "unsupported endpoint URL: " + url);
  Endpoint e;
  e.host_port = "http://" + m[2].str() + (m[3].matched ? m[3].str() : "");
  e.path = m[5].matched ? m[5].str() : "/";
  return e;
}

/// Parses {"embeddings": [[...], ...]} and re-normalizes every vector.
inline std::vector<EmbeddingVector> parse_embedding_response(const std::string& body, std::size_t expected_count,
                                                              std::size_t dim) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(body);
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(ErrorCode::MalformedResponse, std::string("response is not JSON: ") + e.what());
  }
  if (!j.is_object() || !j.contains("embeddings") || !j["embeddings"].is_array()) {
    throw ServiceError(ErrorCode::MalformedResponse, "response lacks an \"embeddings\" array");
  }
  const auto& arr = j["embeddings"];
  if (arr.size() != expected_count) {
    throw ServiceError(ErrorCode::MalformedResponse, "expected " + std::to_string(expected_count) +
                                                         " embeddings, got " + std::to_string(arr.size()));
  }
  std::vector<EmbeddingVector> out;
  out.reserve(arr.size());
  for (const auto& row : arr) {
    if (!row.is_array()) throw ServiceError(ErrorCode::MalformedResponse, "embedding is not an array");
    if (row.size() != dim) {
      throw ServiceError(ErrorCode::DimMismatch,
                         "embedding dim " + std::to_string(row.size()) + " != declared " + std::to_string(dim));
    }
    std::vector<float> v;
    v.reserve(dim);
    for (const auto& x : row) {
      if (!x.is_number()) throw ServiceError(ErrorCode::MalformedResponse, "embedding holds a non-number");
      v.push_back(x.get<float>());
    }
    if (!all_finite(v) || !(norm2(v) > kZeroNorm)) {
      throw ServiceError(ErrorCode::MalformedResponse, "embedding is zero or non-finite");
    }
    out.push_back(l2_normalize(v));
  }
  return out;
}

/// Client for a JSON embedding service: POST {"texts": [...]} and expect
/// {"embeddings": [[...], ...]}. Connection failures, timeouts, 429 and 5xx
/// are retried up to `retry.max_retries` times with exponential backoff
/// (initial_backoff, then doubling). Other statuses fail immediately.
class HttpEmbedder final : public Embedder {
 public:
  explicit HttpEmbedder(EmbedderSpec spec) : spec_(std::move(spec)), endpoint_(parse_endpoint(spec_.endpoint)) {
    spec_.validate();
  }

  std::size_t dim() const override { return spec_.dim; }

  /// Total HTTP requests issued, including retries.
  std::size_t attempts() const noexcept { return attempts_.load(); }

  std::vector<EmbeddingVector> embed(const std::vector<std::string>& texts) override {
    if (texts.empty()) return {};
    std::vector<EmbeddingVector> out(texts.size());
    const std::size_t batches = (texts.size() + spec_.batch_size - 1) / spec_.batch_size;
    // Waves of at most max_in_flight concurrent batch requests.
    for (std::size_t first = 0; first < batches; first += spec_.max_in_flight) {
      const std::size_t last = std::min(batches, first + spec_.max_in_flight);
      std::vector<std::future<void>> wave;
      for (std::size_t b = first; b < last; ++b) {
        wave.push_back(std::async(std::launch::async, [&, b] {
          const std::size_t lo = b * spec_.batch_size;
          const std::size_t hi = std::min(texts.size(), lo + spec_.batch_size);
          auto vecs = embed_batch(std::vector<std::string>(texts.begin() + static_cast<std::ptrdiff_t>(lo),
                                                           texts.begin() + static_cast<std::ptrdiff_t>(hi)));
          for (std::size_t i = lo; i < hi; ++i) out[i] = std::move(vecs[i - lo]);
        }));
      }
      for (auto& f : wave) f.get();
    }
    return out;
  }

  std::vector<EmbeddingVector> embed_batch(const std::vector<std::string>& texts) {
    if (texts.empty()) fail(ErrorCode::EmptyInput, "empty embedding batch");
    const std::string body = nlohmann::json{{"texts", texts}}.dump();
    auto backoff = spec_.retry.initial_backoff;
    for (std::size_t attempt = 0;; ++attempt) {
      try {
        return attempt_once(body, texts.size());
      } catch (const Transient& t) {
        if (attempt >= spec_.retry.max_retries) {
          if (t.status) throw HttpStatusError(t.status, t.what);
          throw ServiceError(t.code, t.what);
        }
      }
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }

 private:
  struct Transient {
    ErrorCode code;
    int status;
    std::string what;
  };

  std::vector<EmbeddingVector> attempt_once(const std::string& body, std::size_t count) {
    ++attempts_;
    httplib::Client cli(endpoint_.host_port);
    cli.set_connection_timeout(spec_.timeout);
    cli.set_read_timeout(spec_.timeout);
    cli.set_write_timeout(spec_.timeout);
    const auto start = std::chrono::steady_clock::now();
    auto res = cli.Post(endpoint_.path, body, "application/json");
    if (!res) {
      const auto elapsed = std::chrono::steady_clock::now() - start;
      const auto err = res.error();
      const bool timed_out = err == httplib::Error::ConnectionTimeout ||
                             ((err == httplib::Error::Read || err == httplib::Error::Write) && elapsed >= spec_.timeout);
      throw Transient{timed_out ? ErrorCode::Timeout : ErrorCode::ServiceUnavailable, 0,
                      spec_.endpoint + ": " + httplib::to_string(err)};
    }
    if (res->status == 429 || res->status >= 500) {
      throw Transient{ErrorCode::HttpStatus, res->status, spec_.endpoint + " returned HTTP " + std::to_string(res->status)};
    }
    if (res->status != 200) {
      throw HttpStatusError(res->status, spec_.endpoint + " returned HTTP " + std::to_string(res->status));
    }
    return parse_embedding_response(res->body, count, spec_.dim);
  }

  EmbedderSpec spec_;
  Endpoint endpoint_;
  std::atomic<std::size_t> attempts_{0};
};

inline std::unique_ptr<Embedder> make_embedder(const EmbedderSpec& spec) {
  spec.validate();
  if (spec.kind == EmbedderKind::http) return std::make_unique<HttpEmbedder>(spec);
  return std::make_unique<StubEmbedder>(spec.dim, spec.seed);
}

inline std::vector<EmbeddingVector> http_embed(const std::vector<std::string>& texts, const EmbedderSpec& spec) {
  if (texts.empty()) fail(ErrorCode::EmptyInput, "empty embedding batch");
  HttpEmbedder e(spec);
  return e.embed(texts);
}

// ---------------------------------------------------------------------------
// Context vocabulary: context string <-> dense id, in first-seen order.

class ContextVocabulary {
 public:
  std::uint32_t id_for(const std::string& name) {
    auto it = ids_.find(name);
    if (it != ids_.end()) return it->second;
    const auto id = static_cast<std::uint32_t>(names_.size());
    names_.push_back(name);
    ids_.emplace(name, id);
    return id;
  }

  std::optional<std::uint32_t> find(const std::string& name) const {
    auto it = ids_.find(name);
    if (it == ids_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& name(std::uint32_t id) const { return names_.at(id); }
  std::size_t size() const noexcept { return names_.size(); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  nlohmann::json to_json() const { return nlohmann::json{{"contexts", names_}}; }

  static ContextVocabulary from_json(const nlohmann::json& j) {
    ContextVocabulary v;
    if (!j.is_object() || !j.contains("contexts") || !j["contexts"].is_array()) {
      fail(ErrorCode::MalformedJson, "vocabulary needs a \"contexts\" array");
    }
    for (const auto& n : j["contexts"]) {
      if (!n.is_string()) fail(ErrorCode::MalformedJson, "vocabulary entries must be strings");
      const auto name = n.get<std::string>();
      if (v.find(name)) fail(ErrorCode::MalformedJson, "duplicate context " + name);
      v.id_for(name);
    }
    return v;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
    out << to_json().dump(2) << '\n';
  }

  static ContextVocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::FileNotFound, path.string());
    try {
      return from_json(nlohmann::json::parse(in));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::MalformedJson, path.string() + ": " + e.what());
    }
  }

  friend bool operator==(const ContextVocabulary& a, const ContextVocabulary& b) { return a.names_ == b.names_; }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, std::uint32_t> ids_;
};

// ---------------------------------------------------------------------------
// JSONL ingestion

struct TraceDescription {
  std::string context;
  Label label = Label::non_anomalous;
  std::string text;
};

/// One JSONL line: {"context": "...", "label": "anomalous"|"non_anomalous", "text": "..."}.
inline TraceDescription parse_trace_line(const std::string& line, std::size_t line_no) {
  const std::string where = "line " + std::to_string(line_no);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::MalformedJson, where + ": " + e.what());
  }
  if (!j.is_object()) fail(ErrorCode::MalformedJson, where + ": expected an object");
  for (const char* key : {"context", "label", "text"}) {
    if (!j.contains(key) || !j[key].is_string()) {
      fail(ErrorCode::MalformedJson, where + ": missing string field \"" + key + "\"");
    }
  }
  TraceDescription d;
  d.context = j["context"].get<std::string>();
  d.text = j["text"].get<std::string>();
  const auto label = j["label"].get<std::string>();
  if (label == "anomalous") d.label = Label::anomalous;
  else if (label == "non_anomalous") d.label = Label::non_anomalous;
  else fail(ErrorCode::UnknownLabel, where + ": label \"" + label + "\"");
  if (d.text.empty()) fail(ErrorCode::EmptyText, where + ": empty text");
  return d;
}

struct SkippedLine {
  std::size_t line = 0;
  ErrorCode code = ErrorCode::MalformedJson;
  std::string message;
};

struct IngestResult {
  TraceBank bank;
  std::vector<SkippedLine> skipped;
  std::size_t accepted = 0;
};

/// Reads a JSONL trace file, embeds every description and inserts it with
/// ids 0, 1, ... in file order. Blank lines are ignored. In lenient mode
/// malformed lines are recorded and skipped; strict mode raises on the first.
inline IngestResult ingest(const std::filesystem::path& path, Embedder& embedder, ContextVocabulary& vocab,
                           bool strict = false) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::FileNotFound, path.string());

  std::vector<TraceDescription> descs;
  std::vector<SkippedLine> skipped;
  std::string line;
  for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      descs.push_back(parse_trace_line(line, line_no));
    } catch (const Error& e) {
      if (strict) throw;
      skipped.push_back(SkippedLine{line_no, e.code(), e.what()});
    }
  }

  std::vector<std::string> texts;
  texts.reserve(descs.size());
  for (const auto& d : descs) texts.push_back(d.text);
  const auto vectors = texts.empty() ? std::vector<EmbeddingVector>{} : embedder.embed(texts);
  if (vectors.size() != descs.size()) fail(ErrorCode::MalformedResponse, "embedder returned the wrong count");

  IngestResult result{TraceBank(embedder.dim()), std::move(skipped), 0};
  result.bank.reserve(descs.size());
  for (std::size_t i = 0; i < descs.size(); ++i) {
    TraceRecord r;
    r.id = i;
    r.label = descs[i].label;
    r.context_id = vocab.id_for(descs[i].context);
    r.embedding = l2_normalize(vectors[i]);
    r.text = descs[i].text;
    result.bank.insert(r);
  }
  result.accepted = descs.size();
  return result;
}

}  // namespace trace
