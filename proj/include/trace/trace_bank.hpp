#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "trace/binary_io.hpp"
#include "trace/error.hpp"
#include "trace/rng.hpp"
#include "trace/vecmath.hpp"

namespace trace {

enum class Label : std::uint8_t { non_anomalous = 0, anomalous = 1 };

enum class Subset { anomalous, non_anomalous, all };

constexpr std::string_view to_string(Label l) {
  return l == Label::anomalous ? "anomalous" : "non_anomalous";
}

constexpr bool in_subset(Label l, Subset s) {
  switch (s) {
    case Subset::anomalous: return l == Label::anomalous;
    case Subset::non_anomalous: return l == Label::non_anomalous;
    case Subset::all: return true;
  }
  return false;
}

struct TraceRecord {
  std::uint64_t id = 0;
  Label label = Label::non_anomalous;
  std::uint32_t context_id = 0;
  float weight = 1.0f;  // number of traces folded into this record
  EmbeddingVector embedding;
  std::optional<std::string> text;
};

struct RetrievalHit {
  std::uint64_t record_id = 0;
  double similarity = 0.0;
  Label label = Label::non_anomalous;
  std::uint32_t context_id = 0;

  friend bool operator==(const RetrievalHit&, const RetrievalHit&) = default;
};

// Result ordering: higher similarity first, ties by ascending id.
inline bool ranks_before(const RetrievalHit& a, const RetrievalHit& b) {
  if (a.similarity != b.similarity) return a.similarity > b.similarity;
  return a.record_id < b.record_id;
}

struct BankStats {
  std::size_t anomalous = 0;
  std::size_t non_anomalous = 0;
  // context_id -> {non_anomalous count, anomalous count}
  std::map<std::uint32_t, std::array<std::size_t, 2>> per_context;

  std::size_t count(Label l) const { return l == Label::anomalous ? anomalous : non_anomalous; }
  std::size_t contexts() const { return per_context.size(); }

  friend bool operator==(const BankStats&, const BankStats&) = default;
};

/// Coarse quantizer: records live in the list of their nearest centroid and
/// a query scans only the nprobe lists whose centroids it is closest to.
struct InvertedLists {
  std::size_t dim = 0;
  std::vector<float> centroids;                   // nlist x dim, unit rows
  std::vector<std::vector<std::uint32_t>> lists;  // row indices into the bank
  std::size_t nprobe = 1;

  std::size_t nlist() const { return lists.size(); }
  std::span<const float> centroid(std::size_t c) const { return {centroids.data() + c * dim, dim}; }

  std::size_t nearest(std::span<const float> v) const {
    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < nlist(); ++c) {
      const double s = dot(v, centroid(c));
      if (s > best_sim) {
        best_sim = s;
        best = c;
      }
    }
    return best;
  }

  std::vector<std::size_t> probe_order(std::span<const float> q, std::size_t count) const {
    std::vector<std::pair<double, std::size_t>> scored(nlist());
    for (std::size_t c = 0; c < nlist(); ++c) scored[c] = {dot(q, centroid(c)), c};
    count = std::min(count, scored.size());
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(count), scored.end(),
                      [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
    std::vector<std::size_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = scored[i].second;
    return out;
  }
};

inline constexpr double kUnitNormTolerance = 1e-5;
inline constexpr std::size_t kDefaultTopK = 5;
inline constexpr double kDefaultMergeThreshold = 0.95;
inline constexpr double kDefaultPruneThreshold = 0.99;

class TraceBank {
 public:
  explicit TraceBank(std::size_t dim) : dim_(dim) {
    if (dim == 0) fail(ErrorCode::InvalidDims, "bank dim must be >= 1");
  }

  std::size_t dim() const noexcept { return dim_; }
  std::size_t size() const noexcept { return meta_.size(); }
  bool empty() const noexcept { return meta_.empty(); }
  const BankStats& stats() const noexcept { return stats_; }
  std::size_t subset_size(Subset s) const {
    switch (s) {
      case Subset::anomalous: return stats_.anomalous;
      case Subset::non_anomalous: return stats_.non_anomalous;
      case Subset::all: return size();
    }
    return 0;
  }
  bool has_texts() const noexcept { return text_count_ > 0; }

  void reserve(std::size_t n) {
    meta_.reserve(n);
    data_.reserve(n * dim_);
    id_to_row_.reserve(n);
  }

  void insert(const TraceRecord& r) {
    check_same_dim(r.embedding.dim(), dim_, "trace embedding");
    insert_raw(r.id, r.label, r.context_id, r.weight, r.embedding.values(), r.text);
  }

  void insert_raw(std::uint64_t id, Label label, std::uint32_t context_id, float weight,
                  std::span<const float> embedding, const std::optional<std::string>& text) {
    check_same_dim(embedding.size(), dim_, "trace embedding");
    if (!all_finite(embedding)) fail(ErrorCode::NonFinite, "trace embedding contains NaN/Inf");
    if (!is_unit_norm(embedding, kUnitNormTolerance)) {
      fail(ErrorCode::NotNormalized, "trace " + std::to_string(id) + " is not unit-norm");
    }
    if (!(weight >= 1.0f) || !std::isfinite(weight)) {
      fail(ErrorCode::InvalidArgument, "trace weight must be >= 1");
    }
    if (text && text->size() > 0xFFFF) fail(ErrorCode::InvalidArgument, "trace text longer than 65535 bytes");
    if (id_to_row_.contains(id)) fail(ErrorCode::DuplicateId, "trace id " + std::to_string(id));

    const auto row = static_cast<std::uint32_t>(meta_.size());
    Meta m{id, label, context_id, weight, std::nullopt};
    if (text && !text->empty()) {
      m.text = *text;
      ++text_count_;
    }
    meta_.push_back(std::move(m));
    data_.insert(data_.end(), embedding.begin(), embedding.end());
    id_to_row_.emplace(id, row);
    (label == Label::anomalous ? stats_.anomalous : stats_.non_anomalous)++;
    stats_.per_context[context_id][static_cast<std::size_t>(label)]++;
    if (index_) index_->lists[index_->nearest(embedding)].push_back(row);
  }

  std::uint64_t id(std::size_t row) const { return meta_[row].id; }
  Label label(std::size_t row) const { return meta_[row].label; }
  std::uint32_t context_id(std::size_t row) const { return meta_[row].context_id; }
  float weight(std::size_t row) const { return meta_[row].weight; }
  const std::optional<std::string>& text(std::size_t row) const { return meta_[row].text; }
  std::span<const float> embedding(std::size_t row) const { return {data_.data() + row * dim_, dim_}; }

  std::optional<std::size_t> row_of(std::uint64_t id) const {
    auto it = id_to_row_.find(id);
    if (it == id_to_row_.end()) return std::nullopt;
    return it->second;
  }

  TraceRecord record(std::size_t row) const {
    const Meta& m = meta_[row];
    auto e = embedding(row);
    return TraceRecord{m.id, m.label, m.context_id, m.weight, EmbeddingVector(std::vector<float>(e.begin(), e.end())), m.text};
  }

  const std::optional<InvertedLists>& coarse_index() const noexcept { return index_; }
  void drop_coarse_index() { index_.reset(); }

  void set_nprobe(std::size_t nprobe) {
    if (!index_) fail(ErrorCode::InvalidArgument, "bank has no coarse index");
    if (nprobe == 0 || nprobe > index_->nlist()) fail(ErrorCode::InvalidArgument, "nprobe must lie in [1, nlist]");
    index_->nprobe = nprobe;
  }

  void set_coarse_index(InvertedLists index) {
    std::vector<int> seen(size(), 0);
    for (const auto& list : index.lists) {
      for (auto row : list) {
        if (row >= size() || seen[row]++) fail(ErrorCode::InvalidArgument, "coarse index must cover each record once");
      }
    }
    if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
      fail(ErrorCode::InvalidArgument, "coarse index must cover each record once");
    }
    index_ = std::move(index);
  }

  /// Top-k by cosine within a label subset. Exact unless a coarse index is
  /// attached, in which case only the nprobe nearest lists are scanned.
  std::vector<RetrievalHit> topk(std::span<const float> query, std::size_t k, Subset subset = Subset::all) const {
    check_same_dim(query.size(), dim_, "query");
    if (k == 0) fail(ErrorCode::InvalidArgument, "k must be >= 1");
    if (subset_size(subset) == 0) fail(ErrorCode::EmptyBankSubset, "no traces in the requested subset");

    TopKBuffer buf(k);
    if (!index_) {
      for (std::size_t row = 0; row < size(); ++row) consider(buf, query, row, subset);
    } else {
      for (std::size_t c : index_->probe_order(query, index_->nprobe)) {
        for (auto row : index_->lists[c]) consider(buf, query, row, subset);
      }
    }
    return buf.take();
  }

  std::vector<RetrievalHit> topk(const EmbeddingVector& query, std::size_t k, Subset subset = Subset::all) const {
    return topk(query.values(), k, subset);
  }

 private:
  struct Meta {
    std::uint64_t id;
    Label label;
    std::uint32_t context_id;
    float weight;
    std::optional<std::string> text;
  };

  // Bounded buffer of the best k hits, kept as a heap whose front is the
  // currently worst-ranked hit.
  class TopKBuffer {
   public:
    explicit TopKBuffer(std::size_t k) : k_(k) { heap_.reserve(k); }

    void offer(const RetrievalHit& h) {
      if (heap_.size() < k_) {
        heap_.push_back(h);
        std::push_heap(heap_.begin(), heap_.end(), ranks_before);
      } else if (ranks_before(h, heap_.front())) {
        std::pop_heap(heap_.begin(), heap_.end(), ranks_before);
        heap_.back() = h;
        std::push_heap(heap_.begin(), heap_.end(), ranks_before);
      }
    }

    std::vector<RetrievalHit> take() {
      std::sort(heap_.begin(), heap_.end(), ranks_before);
      return std::move(heap_);
    }

   private:
    std::size_t k_;
    std::vector<RetrievalHit> heap_;
  };

  void consider(TopKBuffer& buf, std::span<const float> q, std::size_t row, Subset subset) const {
    const Meta& m = meta_[row];
    if (!in_subset(m.label, subset)) return;
    // Stored embeddings are unit-norm, so cosine reduces to the dot product.
    const double s = clamp_cosine(dot(q, embedding(row)));
    buf.offer(RetrievalHit{m.id, s, m.label, m.context_id});
  }

  std::size_t dim_;
  std::vector<Meta> meta_;
  std::vector<float> data_;
  std::unordered_map<std::uint64_t, std::uint32_t> id_to_row_;
  BankStats stats_;
  std::size_t text_count_ = 0;
  std::optional<InvertedLists> index_;
};

// ---------------------------------------------------------------------------
// Compaction

namespace detail {

struct GroupItem {
  std::uint64_t id;
  double weight;
  std::vector<float> vec;
  std::size_t source_row;
};

using GroupKey = std::pair<Label, std::uint32_t>;

// Rows grouped by (label, context), each group in ascending id order.
inline std::map<GroupKey, std::vector<GroupItem>> group_rows(const TraceBank& bank) {
  std::map<GroupKey, std::vector<GroupItem>> groups;
  for (std::size_t row = 0; row < bank.size(); ++row) {
    auto e = bank.embedding(row);
    groups[{bank.label(row), bank.context_id(row)}].push_back(
        GroupItem{bank.id(row), bank.weight(row), std::vector<float>(e.begin(), e.end()), row});
  }
  for (auto& [key, items] : groups) {
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  }
  return groups;
}

// Rebuilds a bank keeping the original row order of surviving ids.
inline TraceBank rebuild(const TraceBank& src, const std::map<GroupKey, std::vector<GroupItem>>& groups) {
  std::unordered_map<std::uint64_t, const GroupItem*> survivors;
  for (const auto& [key, items] : groups) {
    for (const auto& it : items) survivors.emplace(it.id, &it);
  }
  TraceBank out(src.dim());
  out.reserve(survivors.size());
  for (std::size_t row = 0; row < src.size(); ++row) {
    auto found = survivors.find(src.id(row));
    if (found == survivors.end()) continue;
    const GroupItem& it = *found->second;
    out.insert_raw(it.id, src.label(row), src.context_id(row), static_cast<float>(it.weight), it.vec, src.text(row));
  }
  return out;
}

}  // namespace detail

/// Greedy agglomeration inside each (label, context) group: while some pair
/// has cosine >= tau_merge, the pair is replaced by its weight-averaged,
/// re-normalized centroid carrying the summed weight and the smaller id.
/// Pairs are visited in ascending-id order and passes repeat until no pair
/// qualifies, so the output is a fixed point.
inline TraceBank merge_centroids(const TraceBank& bank, double tau_merge = kDefaultMergeThreshold) {
  if (!(tau_merge > 0.0 && tau_merge < 1.0)) fail(ErrorCode::InvalidThreshold, "merge threshold must lie in (0, 1)");
  if (bank.empty()) fail(ErrorCode::EmptyInput, "cannot merge an empty bank");
  auto groups = detail::group_rows(bank);
  for (auto& [key, items] : groups) {
    bool changed = true;
    while (changed) {
      changed = false;
      for (std::size_t i = 0; i < items.size(); ++i) {
        std::size_t j = i + 1;
        while (j < items.size()) {
          if (cosine(items[i].vec, items[j].vec) < tau_merge) {
            ++j;
            continue;
          }
          auto& a = items[i];
          const auto& b = items[j];
          std::vector<float> sum(a.vec.size());
          for (std::size_t c = 0; c < sum.size(); ++c) {
            sum[c] = static_cast<float>(a.weight * a.vec[c] + b.weight * b.vec[c]);
          }
          a.vec = l2_normalize(sum).vec();
          a.weight += b.weight;
          items.erase(items.begin() + static_cast<std::ptrdiff_t>(j));
          changed = true;
          j = i + 1;
        }
      }
    }
  }
  return detail::rebuild(bank, groups);
}

/// Inside each (label, context) group, drops the lower-weight member of any
/// pair with cosine >= tau_dup (equal weights: the higher id goes). Records
/// are considered in (weight desc, id asc) order and kept only if no kept
/// record is that close, so no surviving pair reaches tau_dup.
inline TraceBank prune_redundant(const TraceBank& bank, double tau_dup = kDefaultPruneThreshold) {
  if (!(tau_dup > 0.0 && tau_dup <= 1.0)) fail(ErrorCode::InvalidThreshold, "prune threshold must lie in (0, 1]");
  auto groups = detail::group_rows(bank);
  for (auto& [key, items] : groups) {
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      return a.weight != b.weight ? a.weight > b.weight : a.id < b.id;
    });
    std::vector<detail::GroupItem> kept;
    for (auto& cand : items) {
      const bool redundant = std::any_of(kept.begin(), kept.end(), [&](const auto& k) {
        return cosine(k.vec, cand.vec) >= tau_dup;
      });
      if (!redundant) kept.push_back(std::move(cand));
    }
    items = std::move(kept);
  }
  return detail::rebuild(bank, groups);
}

inline bool thresholds_consistent(double tau_merge, double tau_dup) { return tau_dup >= tau_merge; }

// ---------------------------------------------------------------------------
// Coarse index

struct KMeansOptions {
  std::size_t max_iterations = 25;
  // Training uses at most this many points per list, sampled without
  // replacement; every record is still assigned afterwards.
  std::size_t max_points_per_list = 256;
};

/// Spherical k-means (cosine objective) on the bank, seeded from `seed`.
inline InvertedLists train_inverted_lists(const TraceBank& bank, std::size_t nlist, std::size_t nprobe,
                                          std::uint64_t seed, const KMeansOptions& opt = {}) {
  const std::size_t n = bank.size();
  if (nlist == 0) fail(ErrorCode::InvalidArgument, "nlist must be >= 1");
  if (nlist > n) {
    fail(ErrorCode::TooFewRecords, "nlist " + std::to_string(nlist) + " exceeds record count " + std::to_string(n));
  }
  if (nprobe == 0 || nprobe > nlist) fail(ErrorCode::InvalidArgument, "nprobe must lie in [1, nlist]");
  const std::size_t dim = bank.dim();
  Rng rng(seed);

  std::vector<std::uint32_t> order(n);
  std::iota(order.begin(), order.end(), 0u);
  const std::size_t train_n = std::min(n, std::max(nlist, nlist * opt.max_points_per_list));
  for (std::size_t i = 0; i < train_n; ++i) {
    std::swap(order[i], order[i + rng.below(n - i)]);
  }
  std::vector<std::uint32_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_n));

  InvertedLists ix;
  ix.dim = dim;
  ix.nprobe = nprobe;
  ix.centroids.resize(nlist * dim);
  ix.lists.resize(nlist);
  // Initial centroids: the first nlist points of the shuffled training set.
  for (std::size_t c = 0; c < nlist; ++c) {
    auto e = bank.embedding(train[c]);
    std::copy(e.begin(), e.end(), ix.centroids.begin() + static_cast<std::ptrdiff_t>(c * dim));
  }

  std::vector<std::size_t> assign(train_n, SIZE_MAX);
  std::vector<double> sums(nlist * dim);
  for (std::size_t iter = 0; iter < opt.max_iterations; ++iter) {
    bool moved = false;
    for (std::size_t i = 0; i < train_n; ++i) {
      const std::size_t c = ix.nearest(bank.embedding(train[i]));
      if (c != assign[i]) {
        assign[i] = c;
        moved = true;
      }
    }
    if (!moved) break;
    std::fill(sums.begin(), sums.end(), 0.0);
    std::vector<std::size_t> counts(nlist, 0);
    for (std::size_t i = 0; i < train_n; ++i) {
      auto e = bank.embedding(train[i]);
      double* s = sums.data() + assign[i] * dim;
      for (std::size_t d = 0; d < dim; ++d) s[d] += e[d];
      counts[assign[i]]++;
    }
    for (std::size_t c = 0; c < nlist; ++c) {
      if (counts[c] == 0) continue;  // empty cell keeps its previous centroid
      const double* s = sums.data() + c * dim;
      double nrm = 0.0;
      for (std::size_t d = 0; d < dim; ++d) nrm += s[d] * s[d];
      nrm = std::sqrt(nrm);
      if (!(nrm > kZeroNorm)) continue;
      for (std::size_t d = 0; d < dim; ++d) ix.centroids[c * dim + d] = static_cast<float>(s[d] / nrm);
    }
  }

  for (std::size_t row = 0; row < n; ++row) {
    ix.lists[ix.nearest(bank.embedding(row))].push_back(static_cast<std::uint32_t>(row));
  }
  return ix;
}

inline TraceBank build_coarse_index(TraceBank bank, std::size_t nlist, std::size_t nprobe, std::uint64_t seed,
                                    const KMeansOptions& opt = {}) {
  bank.set_coarse_index(train_inverted_lists(bank, nlist, nprobe, seed, opt));
  return bank;
}

// ---------------------------------------------------------------------------
// Bank file
//
//   header (26 bytes): "TRCB" | version u16 | dim u32 | count u64 | flags u32 | crc32 u32
//   payload, per record: id u64 | label u8 | context u32 | weight f32 | dim x f32
//                        [+ text: u16 length + UTF-8, when flag bit 0 is set]
//   [coarse index, when flag bit 1 is set:
//      nlist u32 | nprobe u32 | nlist x dim f32 centroids | per list: len u64 + ids u64]
//
// The CRC covers every payload byte. A record without text is written with
// length 0 and read back as absent.

inline constexpr char kBankMagic[] = "TRCB";
inline constexpr std::uint16_t kBankVersion = 1;
inline constexpr std::uint32_t kFlagTexts = 1u << 0;
inline constexpr std::uint32_t kFlagCoarseIndex = 1u << 1;
inline constexpr std::size_t kBankHeaderBytes = 4 + 2 + 4 + 8 + 4 + 4;
inline constexpr std::size_t kRecordHeaderBytes = 8 + 1 + 4 + 4;

/// Exact file size of a bank without texts or coarse index.
constexpr std::uint64_t bank_file_size(std::uint64_t records, std::uint64_t dim) {
  return kBankHeaderBytes + records * (kRecordHeaderBytes + dim * 4);
}

inline void save_bank(const std::filesystem::path& path, const TraceBank& bank) {
  const bool texts = bank.has_texts();
  const bool index = bank.coarse_index().has_value();
  io::ByteWriter header;
  header.magic(std::string_view(kBankMagic, 4));
  header.u16(kBankVersion);
  header.u32(static_cast<std::uint32_t>(bank.dim()));
  header.u64(bank.size());
  header.u32((texts ? kFlagTexts : 0u) | (index ? kFlagCoarseIndex : 0u));
  header.u32(0);  // crc, patched below

  io::FileSink sink(path);
  sink.write(header.buffer());
  std::uint32_t crc = 0;
  io::ByteWriter chunk;
  auto flush = [&](bool force) {
    if (!force && chunk.size() < (1u << 20)) return;
    crc = io::crc32(chunk.buffer(), crc);
    sink.write(chunk.buffer());
    chunk.clear();
  };
  for (std::size_t row = 0; row < bank.size(); ++row) {
    chunk.u64(bank.id(row));
    chunk.u8(static_cast<std::uint8_t>(bank.label(row)));
    chunk.u32(bank.context_id(row));
    chunk.f32(bank.weight(row));
    chunk.f32s(bank.embedding(row));
    if (texts) {
      const auto& t = bank.text(row);
      chunk.u16(static_cast<std::uint16_t>(t ? t->size() : 0));
      if (t) chunk.bytes(*t);
    }
    flush(false);
  }
  if (index) {
    const InvertedLists& ix = *bank.coarse_index();
    chunk.u32(static_cast<std::uint32_t>(ix.nlist()));
    chunk.u32(static_cast<std::uint32_t>(ix.nprobe));
    chunk.f32s(ix.centroids);
    for (const auto& list : ix.lists) {
      chunk.u64(list.size());
      for (auto row : list) chunk.u64(bank.id(row));
      flush(false);
    }
  }
  flush(true);
  io::ByteWriter crc_bytes;
  crc_bytes.u32(crc);
  sink.write_at(kBankHeaderBytes - 4, crc_bytes.buffer());
  sink.close();
}

namespace detail {

inline void decode_bank_payload(std::span<const char> payload, std::uint32_t dim, std::uint64_t count,
                                std::uint32_t flags, TraceBank& bank, std::optional<InvertedLists>& index) {
  io::ByteReader p(payload);
  if (count > payload.size() / (kRecordHeaderBytes + dim * 4ull)) {
    fail(ErrorCode::TruncatedFile, "payload holds fewer than " + std::to_string(count) + " records");
  }
  bank.reserve(count);
  std::vector<float> e(dim);
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto id = p.u64();
    const auto label = p.u8();
    const auto ctx = p.u32();
    const auto weight = p.f32();
    p.f32s(e);
    std::optional<std::string> text;
    if (flags & kFlagTexts) {
      const auto len = p.u16();
      if (len > 0) text = p.bytes(len);
    }
    if (label > 1) fail(ErrorCode::InvalidArgument, "record label byte " + std::to_string(label));
    bank.insert_raw(id, static_cast<Label>(label), ctx, weight, e, text);
  }
  if (flags & kFlagCoarseIndex) {
    InvertedLists ix;
    ix.dim = dim;
    const auto nlist = p.u32();
    ix.nprobe = p.u32();
    if (static_cast<std::uint64_t>(nlist) > p.remaining() / (dim * 4ull)) fail(ErrorCode::TruncatedFile, "coarse centroids cut short");
    ix.centroids.resize(static_cast<std::size_t>(nlist) * dim);
    p.f32s(ix.centroids);
    ix.lists.resize(nlist);
    for (auto& list : ix.lists) {
      const auto len = p.u64();
      if (len > p.remaining() / 8) fail(ErrorCode::TruncatedFile, "inverted list cut short");
      list.reserve(len);
      for (std::uint64_t j = 0; j < len; ++j) {
        const auto row = bank.row_of(p.u64());
        if (!row) fail(ErrorCode::InvalidArgument, "inverted list references an unknown id");
        list.push_back(static_cast<std::uint32_t>(*row));
      }
    }
    index = std::move(ix);
  }
  if (p.remaining() != 0) fail(ErrorCode::ShapeMismatch, "trailing bytes after bank payload");
}

}  // namespace detail

inline TraceBank decode_bank(std::span<const char> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic(std::string_view(kBankMagic, 4));
  const auto version = r.u16();
  if (version != kBankVersion) fail(ErrorCode::VersionMismatch, "bank version " + std::to_string(version));
  const auto dim = r.u32();
  const auto count = r.u64();
  const auto flags = r.u32();
  const auto expected_crc = r.u32();
  if (dim == 0) fail(ErrorCode::InvalidDims, "bank dim is zero");

  const std::span<const char> payload = r.rest();
  const bool crc_ok = io::crc32(payload) == expected_crc;
  TraceBank bank(dim);
  std::optional<InvertedLists> index;
  // Truncation is reported as such; any other decode failure on a payload
  // whose checksum is wrong is reported as the checksum failure.
  try {
    detail::decode_bank_payload(payload, dim, count, flags, bank, index);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::TruncatedFile || crc_ok) throw;
    fail(ErrorCode::ChecksumMismatch, "bank payload CRC mismatch");
  }
  if (!crc_ok) fail(ErrorCode::ChecksumMismatch, "bank payload CRC mismatch");
  if (index) {
    if (index->nprobe == 0 || index->nprobe > index->nlist()) fail(ErrorCode::InvalidArgument, "stored nprobe out of range");
    bank.set_coarse_index(std::move(*index));
  }
  return bank;
}

inline TraceBank load_bank(const std::filesystem::path& path) { return decode_bank(io::read_file(path)); }

/// True when both banks hold the same records in the same order with
/// bit-identical embeddings and weights.
inline bool bit_identical(const TraceBank& a, const TraceBank& b) {
  if (a.dim() != b.dim() || a.size() != b.size()) return false;
  for (std::size_t row = 0; row < a.size(); ++row) {
    if (a.id(row) != b.id(row) || a.label(row) != b.label(row) || a.context_id(row) != b.context_id(row) ||
        a.text(row) != b.text(row)) {
      return false;
    }
    const float wa = a.weight(row), wb = b.weight(row);
    if (std::memcmp(&wa, &wb, sizeof(float)) != 0) return false;
    if (std::memcmp(a.embedding(row).data(), b.embedding(row).data(), a.dim() * sizeof(float)) != 0) return false;
  }
  return true;
}

}  // namespace trace
