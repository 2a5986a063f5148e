#pragma once

// Reference implementations used only by tests. They follow the textbook
// definitions directly (long double accumulation, plain loops, full sorts)
// and share no code with the engine beyond plain data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "trace/trace.hpp"

namespace oracle {

using ld = long double;

inline ld dot(std::span<const float> a, std::span<const float> b) {
  ld s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<ld>(a[i]) * static_cast<ld>(b[i]);
  return s;
}

inline ld norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

inline ld cosine(std::span<const float> a, std::span<const float> b) { return dot(a, b) / (norm(a) * norm(b)); }

inline std::vector<ld> softmax(const std::vector<ld>& x) {
  ld mx = x[0];
  for (auto v : x) mx = std::max(mx, v);
  std::vector<ld> out(x.size());
  ld sum = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sum += out[i] = std::exp(x[i] - mx);
  for (auto& o : out) o /= sum;
  return out;
}

// Two-pass mean / biased variance.
inline std::vector<ld> layer_norm(std::span<const float> x, std::span<const float> g, std::span<const float> b,
                                  ld eps = 1e-5L) {
  ld mean = 0;
  for (float v : x) mean += v;
  mean /= x.size();
  ld var = 0;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  std::vector<ld> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = (x[i] - mean) / std::sqrt(var + eps) * g[i] + b[i];
  return out;
}

inline std::vector<ld> matvec(const std::vector<ld>& x, const trace::DenseMatrix& m) {
  std::vector<ld> y(m.cols(), 0);
  for (std::size_t c = 0; c < m.cols(); ++c) {
    for (std::size_t r = 0; r < m.rows(); ++r) y[c] += x[r] * static_cast<ld>(m(r, c));
  }
  return y;
}

inline std::vector<ld> widen(std::span<const float> v) { return {v.begin(), v.end()}; }
inline std::vector<float> narrow(const std::vector<ld>& v) { return {v.begin(), v.end()}; }

inline std::vector<ld> adapter(std::span<const float> x, const trace::AdapterWeights& w, trace::Activation act) {
  auto h = matvec(widen(x), w.w1);
  for (std::size_t i = 0; i < h.size(); ++i) {
    h[i] += w.b1[i];
    if (act == trace::Activation::relu) h[i] = std::max<ld>(h[i], 0);
  }
  auto y = matvec(h, w.w2);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += w.b2[i];
  ld mean = 0;
  for (auto v : y) mean += v;
  mean /= y.size();
  ld var = 0;
  for (auto v : y) var += (v - mean) * (v - mean);
  var /= y.size();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = (y[i] - mean) / std::sqrt(var + 1e-5L) * w.ln_gamma[i] + w.ln_beta[i];
  return y;
}

struct Attention {
  std::vector<ld> output;
  std::vector<std::vector<ld>> weights;
};

// One loop per head: project, score, softmax, mix, then output projection.
inline Attention attention(const std::vector<ld>& q, const std::vector<std::vector<ld>>& kv,
                           const trace::AttentionWeights& w) {
  const std::size_t hd = w.head_dim;
  std::vector<ld> concat(w.heads * hd, 0);
  Attention out;
  for (std::size_t h = 0; h < w.heads; ++h) {
    std::vector<ld> logits(kv.size());
    for (std::size_t j = 0; j < kv.size(); ++j) {
      ld s = 0;
      for (std::size_t c = 0; c < hd; ++c) {
        ld qc = 0, kc = 0;
        for (std::size_t i = 0; i < q.size(); ++i) {
          qc += q[i] * w.wq(i, h * hd + c);
          kc += kv[j][i] * w.wk(i, h * hd + c);
        }
        s += qc * kc;
      }
      logits[j] = s / std::sqrt(static_cast<ld>(hd));
    }
    auto alpha = softmax(logits);
    for (std::size_t c = 0; c < hd; ++c) {
      for (std::size_t j = 0; j < kv.size(); ++j) {
        ld vc = 0;
        for (std::size_t i = 0; i < q.size(); ++i) vc += kv[j][i] * w.wv(i, h * hd + c);
        concat[h * hd + c] += alpha[j] * vc;
      }
    }
    out.weights.push_back(alpha);
  }
  out.output = matvec(concat, w.wo);
  return out;
}

inline std::vector<ld> fuse(std::span<const float> f, const std::vector<trace::EmbeddingVector>& window,
                            const trace::FusionModel& m) {
  const auto q = adapter(f, m.a_vis, m.activation);
  std::vector<std::vector<ld>> kv;
  for (const auto& r : window) kv.push_back(adapter(r.values(), m.a_temp, m.activation));
  auto out = attention(q, kv, m.attn).output;
  ld n = 0;
  for (auto v : out) n += v * v;
  n = std::sqrt(n);
  for (auto& v : out) v /= n;
  return out;
}

struct Hit {
  std::uint64_t id;
  ld sim;
  trace::Label label;
};

// Exhaustive scan: every record scored, fully sorted.
inline std::vector<Hit> topk(const trace::TraceBank& bank, std::span<const float> q, std::size_t k,
                             trace::Subset subset) {
  std::vector<Hit> all;
  for (std::size_t r = 0; r < bank.size(); ++r) {
    if (!trace::in_subset(bank.label(r), subset)) continue;
    all.push_back({bank.id(r), cosine(q, bank.embedding(r)), bank.label(r)});
  }
  std::sort(all.begin(), all.end(), [](const Hit& a, const Hit& b) { return a.sim != b.sim ? a.sim > b.sim : a.id < b.id; });
  if (all.size() > k) all.resize(k);
  return all;
}

// AUC from its pairwise definition.
inline double auc(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
  std::uint64_t twice = 0, pos = 0, neg = 0;
  for (std::size_t i = 0; i < s.size(); ++i) (l[i] ? pos : neg)++;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (!l[i]) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (l[j]) continue;
      if (s[i] > s[j]) twice += 2;
      else if (s[i] == s[j]) twice += 1;
    }
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

// AP from its definition: the rank of item i is the number of items ordered
// at or before it (higher score, or equal score and lower index); precision
// at a positive is the positive count within that prefix.
inline double ap(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
  const std::size_t n = s.size();
  auto before = [&](std::size_t j, std::size_t i) { return s[j] > s[i] || (s[j] == s[i] && j <= i); };
  std::vector<std::pair<std::size_t, std::size_t>> ranked;  // (rank, index) of positives
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!l[i]) continue;
    ++pos;
    std::size_t rank = 0;
    for (std::size_t j = 0; j < n; ++j) rank += before(j, i) ? 1 : 0;
    ranked.push_back({rank, i});
  }
  std::sort(ranked.begin(), ranked.end());
  double sum = 0.0;
  for (const auto& [rank, i] : ranked) {
    std::size_t tp = 0;
    for (std::size_t j = 0; j < n; ++j) tp += (l[j] && before(j, i)) ? 1 : 0;
    sum += static_cast<double>(tp) / static_cast<double>(rank);
  }
  return sum / static_cast<double>(pos);
}

// F1 at every midpoint between distinct scores; lowest theta among maxima.
inline std::pair<double, double> best_threshold(const std::vector<double>& s, const std::vector<std::uint8_t>& l) {
  std::vector<double> u(s.begin(), s.end());
  std::sort(u.begin(), u.end());
  u.erase(std::unique(u.begin(), u.end()), u.end());
  double best_theta = 0, best_f1 = -1;
  for (std::size_t i = 0; i + 1 < u.size(); ++i) {
    const double theta = u[i] + (u[i + 1] - u[i]) / 2.0;
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      const bool p = s[j] >= theta;
      if (p && l[j]) ++tp;
      else if (p) ++fp;
      else if (l[j]) ++fn;
    }
    const double f1 = 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
    if (f1 > best_f1) {
      best_f1 = f1;
      best_theta = theta;
    }
  }
  return {best_theta, best_f1};
}

// Survivors of redundancy pruning by pairwise scan: a record is dropped when
// some in-group record of higher priority (weight desc, id asc) that itself
// survives is at cosine >= tau.
inline std::vector<std::uint64_t> prune_survivors(const trace::TraceBank& bank, double tau) {
  std::vector<std::size_t> rows(bank.size());
  std::iota(rows.begin(), rows.end(), 0);
  std::sort(rows.begin(), rows.end(), [&](auto a, auto b) {
    return bank.weight(a) != bank.weight(b) ? bank.weight(a) > bank.weight(b) : bank.id(a) < bank.id(b);
  });
  std::vector<bool> dropped(bank.size(), false);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      const auto a = rows[j], b = rows[i];
      if (dropped[a] || bank.label(a) != bank.label(b) || bank.context_id(a) != bank.context_id(b)) continue;
      if (cosine(bank.embedding(a), bank.embedding(b)) >= tau) {
        dropped[b] = true;
        break;
      }
    }
  }
  std::vector<std::uint64_t> ids;
  for (std::size_t r = 0; r < bank.size(); ++r) {
    if (!dropped[r]) ids.push_back(bank.id(r));
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace oracle

namespace testutil {

inline std::vector<float> random_vector(std::size_t dim, trace::Rng& rng) {
  std::vector<float> v(dim);
  rng.fill_normal(v);
  return v;
}

inline trace::EmbeddingVector random_unit(std::size_t dim, trace::Rng& rng) {
  return trace::l2_normalize(random_vector(dim, rng));
}

// Unit vector at roughly `spread` relative Gaussian distance from center.
inline trace::EmbeddingVector perturb(std::span<const float> center, double spread, trace::Rng& rng) {
  std::vector<float> v(center.begin(), center.end());
  const double s = spread / std::sqrt(static_cast<double>(v.size()));
  for (auto& x : v) x += static_cast<float>(s * rng.normal());
  return trace::l2_normalize(v);
}

inline trace::TraceBank random_bank(std::size_t n, std::size_t dim, std::uint64_t seed, std::size_t contexts = 7) {
  trace::Rng rng(seed);
  trace::TraceBank bank(dim);
  bank.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    trace::TraceRecord r;
    r.id = i * 3 + 11;
    r.label = rng.uniform01() < 0.5 ? trace::Label::anomalous : trace::Label::non_anomalous;
    r.context_id = static_cast<std::uint32_t>(rng.below(contexts));
    r.embedding = random_unit(dim, rng);
    bank.insert(r);
  }
  return bank;
}

// Records drawn around `clusters` random centers: a realistic shape for
// context-grouped trace embeddings.
inline trace::TraceBank clustered_bank(std::size_t n, std::size_t dim, std::size_t clusters, double spread,
                                       std::uint64_t seed) {
  trace::Rng rng(seed);
  std::vector<trace::EmbeddingVector> centers;
  for (std::size_t c = 0; c < clusters; ++c) centers.push_back(random_unit(dim, rng));
  trace::TraceBank bank(dim);
  bank.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = rng.below(clusters);
    bank.insert_raw(i, i % 2 ? trace::Label::anomalous : trace::Label::non_anomalous, static_cast<std::uint32_t>(c),
                    1.0f, perturb(centers[c].values(), spread, rng).values(), std::nullopt);
  }
  return bank;
}

inline trace::FusionShape small_shape() {
  trace::FusionShape s;
  s.d = 24;
  s.d_temp = 20;
  s.d_prime = 16;
  s.heads = 4;
  s.head_dim = 4;
  s.window = 6;
  return s;
}

}  // namespace testutil
