#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "trace/pipeline.hpp"
#include "trace/rng.hpp"
#include "trace/trace_bank.hpp"

namespace trace {

struct BenchOptions {
  std::size_t queries = 100;
  std::uint64_t seed = 7;
  bool coarse = true;  // also time an inverted-list index per bank
};

struct BenchRow {
  std::size_t bank_size = 0;
  std::size_t dim = 0;
  std::size_t k = 0;
  std::string mode;  // "exact" or "coarse"
  std::size_t nlist = 0;
  std::size_t nprobe = 0;
  std::size_t queries = 0;
  LatencySummary latency;
  double queries_per_second = 0.0;
};

/// Bank of `n` random unit vectors with ids 0..n-1 and alternating labels.
inline TraceBank random_bank(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  TraceBank bank(dim);
  bank.reserve(n);
  std::vector<float> v(dim);
  for (std::size_t i = 0; i < n; ++i) {
    rng.fill_normal(v);
    const auto u = l2_normalize(v);
    bank.insert_raw(i, i % 2 ? Label::anomalous : Label::non_anomalous, static_cast<std::uint32_t>(i % 70), 1.0f,
                    u.values(), std::nullopt);
  }
  return bank;
}

inline BenchRow time_queries(const TraceBank& bank, const std::vector<EmbeddingVector>& queries, std::size_t k,
                             std::string mode) {
  BenchRow row;
  row.bank_size = bank.size();
  row.dim = bank.dim();
  row.k = k;
  row.mode = std::move(mode);
  row.queries = queries.size();
  if (bank.coarse_index()) {
    row.nlist = bank.coarse_index()->nlist();
    row.nprobe = bank.coarse_index()->nprobe;
  }
  std::vector<double> ms;
  ms.reserve(queries.size());
  double total = 0.0;
  for (const auto& q : queries) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto hits = bank.topk(q, k);
    const auto t1 = std::chrono::steady_clock::now();
    if (hits.empty()) fail(ErrorCode::EmptyHits, "benchmark query returned nothing");
    ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    total += ms.back();
  }
  row.latency = summarize_latency(ms);
  row.queries_per_second = total > 0.0 ? 1000.0 * static_cast<double>(queries.size()) / total : 0.0;
  return row;
}

/// Single-threaded retrieval latency over the grid bank_sizes x dims x ks.
/// Coarse rows use nlist = round(sqrt(n)) and nprobe = max(1, nlist / 8).
inline std::vector<BenchRow> bench(std::span<const std::size_t> bank_sizes, std::span<const std::size_t> dims,
                                   std::span<const std::size_t> ks, const BenchOptions& opt = {}) {
  std::vector<BenchRow> rows;
  for (std::size_t n : bank_sizes) {
    for (std::size_t dim : dims) {
      if (n == 0 || dim == 0) fail(ErrorCode::InvalidArgument, "bench sizes and dims must be positive");
      TraceBank bank = random_bank(n, dim, mix_seed(opt.seed ^ n ^ (dim << 32)));
      Rng qrng(mix_seed(opt.seed + 1));
      std::vector<EmbeddingVector> queries;
      std::vector<float> v(dim);
      for (std::size_t i = 0; i < opt.queries; ++i) {
        qrng.fill_normal(v);
        queries.push_back(l2_normalize(v));
      }
      for (std::size_t k : ks) rows.push_back(time_queries(bank, queries, k, "exact"));
      if (opt.coarse) {
        const auto nlist = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(n)))), 1, n);
        const std::size_t nprobe = std::max<std::size_t>(1, nlist / 8);
        TraceBank indexed = build_coarse_index(bank, nlist, nprobe, opt.seed);
        for (std::size_t k : ks) rows.push_back(time_queries(indexed, queries, k, "coarse"));
      }
    }
  }
  return rows;
}

inline nlohmann::json to_json(const std::vector<BenchRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    out.push_back({{"bank_size", r.bank_size},
                   {"dim", r.dim},
                   {"k", r.k},
                   {"mode", r.mode},
                   {"nlist", r.nlist},
                   {"nprobe", r.nprobe},
                   {"queries", r.queries},
                   {"p50_ms", r.latency.p50},
                   {"p95_ms", r.latency.p95},
                   {"p99_ms", r.latency.p99},
                   {"mean_ms", r.latency.mean},
                   {"queries_per_second", r.queries_per_second}});
  }
  return out;
}

}  // namespace trace
