#include <gtest/gtest.h>

#include <set>

#include "gtest_helpers.hpp"
#include "oracles.hpp"
#include "trace/trace_bank.hpp"

using namespace trace;
using testutil::code_of;

namespace {

TraceRecord make_record(std::uint64_t id, Label label, std::uint32_t ctx, std::vector<float> v, float weight = 1.0f) {
  return TraceRecord{id, label, ctx, weight, l2_normalize(v), std::nullopt};
}

double total_weight(const TraceBank& b) {
  double s = 0.0;
  for (std::size_t r = 0; r < b.size(); ++r) s += b.weight(r);
  return s;
}

void expect_matches_oracle(const TraceBank& bank, std::span<const float> q, std::size_t k, Subset subset) {
  const auto hits = bank.topk(q, k, subset);
  const auto expect = oracle::topk(bank, q, k, subset);
  ASSERT_EQ(hits.size(), expect.size());
  for (std::size_t i = 0; i < hits.size(); ++i) {
    EXPECT_EQ(hits[i].record_id, expect[i].id);
    EXPECT_NEAR(hits[i].similarity, static_cast<double>(expect[i].sim), 1e-6);
    EXPECT_EQ(hits[i].label, expect[i].label);
  }
}

// In-group pairs still at or above tau.
std::size_t close_pairs(const TraceBank& b, double tau) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    for (std::size_t j = i + 1; j < b.size(); ++j) {
      if (b.label(i) == b.label(j) && b.context_id(i) == b.context_id(j) &&
          cosine(b.embedding(i), b.embedding(j)) >= tau) {
        ++n;
      }
    }
  }
  return n;
}

}  // namespace

TEST(Insert, SelfRetrieval) {
  TraceBank bank(8);
  Rng rng(1);
  const auto v = testutil::random_unit(8, rng);
  bank.insert(TraceRecord{5, Label::anomalous, 2, 1.0f, v, std::string("fire in a kitchen")});
  EXPECT_EQ(bank.size(), 1u);
  const auto hits = bank.topk(v, 1);
  ASSERT_EQ(hits.size(), 1u);
  EXPECT_EQ(hits[0].record_id, 5u);
  EXPECT_NEAR(hits[0].similarity, 1.0, 1e-6);
  EXPECT_EQ(hits[0].context_id, 2u);
  EXPECT_EQ(bank.text(0), "fire in a kitchen");
  EXPECT_TRUE(bank.has_texts());
}

TEST(Insert, StatsTally) {
  const auto bank = testutil::random_bank(1000, 16, 3, 9);
  std::size_t anom = 0;
  std::map<std::uint32_t, std::array<std::size_t, 2>> per;
  for (std::size_t r = 0; r < bank.size(); ++r) {
    anom += bank.label(r) == Label::anomalous;
    per[bank.context_id(r)][static_cast<std::size_t>(bank.label(r))]++;
  }
  EXPECT_EQ(bank.stats().anomalous, anom);
  EXPECT_EQ(bank.stats().non_anomalous, 1000 - anom);
  EXPECT_EQ(bank.stats().per_context, per);
  EXPECT_EQ(bank.stats().contexts(), 9u);
  EXPECT_EQ(bank.subset_size(Subset::all), 1000u);
}

TEST(Insert, Errors) {
  TraceBank bank(4);
  EXPECT_EQ(code_of([&] { bank.insert(make_record(1, Label::anomalous, 0, {1, 0, 0})); }), ErrorCode::DimMismatch);
  bank.insert(make_record(1, Label::anomalous, 0, {1, 0, 0, 0}));
  EXPECT_EQ(code_of([&] { bank.insert(make_record(1, Label::anomalous, 0, {0, 1, 0, 0})); }), ErrorCode::DuplicateId);
  const std::vector<float> raw{1, 1, 0, 0};
  EXPECT_EQ(code_of([&] { bank.insert_raw(2, Label::anomalous, 0, 1.0f, raw, std::nullopt); }),
            ErrorCode::NotNormalized);
  const std::vector<float> unit{0, 1, 0, 0};
  EXPECT_EQ(code_of([&] { bank.insert_raw(3, Label::anomalous, 0, 0.5f, unit, std::nullopt); }),
            ErrorCode::InvalidArgument);
  EXPECT_EQ(bank.size(), 1u);
  EXPECT_EQ(code_of([] { TraceBank(0); }), ErrorCode::InvalidDims);
}

TEST(TopK, SubsetsAndErrors) {
  TraceBank bank(3);
  bank.insert(make_record(10, Label::anomalous, 0, {1, 0, 0}));
  bank.insert(make_record(11, Label::non_anomalous, 0, {0.9f, 0.1f, 0}));
  bank.insert(make_record(12, Label::non_anomalous, 0, {0, 1, 0}));
  const EmbeddingVector q{1, 0, 0};
  EXPECT_EQ(bank.topk(q, 5, Subset::anomalous).size(), 1u);
  const auto n = bank.topk(q, 5, Subset::non_anomalous);
  ASSERT_EQ(n.size(), 2u);
  EXPECT_EQ(n[0].record_id, 11u);
  EXPECT_EQ(n[1].record_id, 12u);
  EXPECT_EQ(bank.topk(q, 2, Subset::all)[0].record_id, 10u);
  EXPECT_EQ(code_of([&] { bank.topk(q, 0); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([&] { bank.topk(EmbeddingVector{1, 0}, 1); }), ErrorCode::DimMismatch);
  TraceBank only_normal(3);
  only_normal.insert(make_record(1, Label::non_anomalous, 0, {1, 0, 0}));
  EXPECT_EQ(code_of([&] { only_normal.topk(q, 1, Subset::anomalous); }), ErrorCode::EmptyBankSubset);
}

TEST(TopK, TiesBreakByAscendingId) {
  TraceBank bank(2);
  for (std::uint64_t id : {40u, 7u, 19u, 3u}) bank.insert(make_record(id, Label::anomalous, 0, {1, 0}));
  const auto hits = bank.topk(EmbeddingVector{1, 0}, 3);
  ASSERT_EQ(hits.size(), 3u);
  EXPECT_EQ(hits[0].record_id, 3u);
  EXPECT_EQ(hits[1].record_id, 7u);
  EXPECT_EQ(hits[2].record_id, 19u);
}

TEST(TopK, TenThousandRecordsMatchExhaustiveScan) {
  const auto bank = testutil::random_bank(10000, 512, 21);
  Rng rng(22);
  for (int q = 0; q < 100; ++q) {
    const auto query = testutil::random_unit(512, rng);
    expect_matches_oracle(bank, query.values(), 5, Subset::all);
  }
}

TEST(TopK, PropertiesAcrossSubsetsAndK) {
  Rng rng(23);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(300);
    const auto bank = testutil::random_bank(n, 12, 100 + trial, 3);
    const auto q = testutil::random_unit(12, rng);
    for (Subset s : {Subset::anomalous, Subset::non_anomalous, Subset::all}) {
      if (bank.subset_size(s) == 0) continue;
      for (std::size_t k : {1u, 3u, 5u, 50u, 1000u}) {
        const auto hits = bank.topk(q, k, s);
        EXPECT_EQ(hits.size(), std::min(k, bank.subset_size(s)));
        for (std::size_t i = 1; i < hits.size(); ++i) EXPECT_GE(hits[i - 1].similarity, hits[i].similarity);
        for (const auto& h : hits) EXPECT_TRUE(in_subset(h.label, s));
        expect_matches_oracle(bank, q.values(), k, s);
      }
    }
  }
}

TEST(Merge, IdenticalPair) {
  TraceBank bank(3);
  bank.insert(make_record(2, Label::anomalous, 1, {1, 2, 2}));
  bank.insert(make_record(1, Label::anomalous, 1, {1, 2, 2}));
  const auto m = merge_centroids(bank, 0.95);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_EQ(m.id(0), 1u);
  EXPECT_EQ(m.weight(0), 2.0f);
  EXPECT_NEAR(cosine(m.embedding(0), bank.embedding(0)), 1.0, 1e-7);
}

TEST(Merge, LabelAndContextBarriers) {
  TraceBank bank(3);
  bank.insert(make_record(1, Label::anomalous, 1, {1, 2, 2}));
  bank.insert(make_record(2, Label::non_anomalous, 1, {1, 2, 2}));
  bank.insert(make_record(3, Label::anomalous, 2, {1, 2, 2}));
  EXPECT_EQ(merge_centroids(bank, 0.95).size(), 3u);
}

TEST(Merge, FiveClustersGiveFiveCentroids) {
  Rng rng(30);
  const std::size_t dim = 64;
  std::vector<EmbeddingVector> centers;
  for (int c = 0; c < 5; ++c) centers.push_back(testutil::random_unit(dim, rng));
  TraceBank bank(dim);
  std::vector<std::vector<std::size_t>> members(5);
  for (std::size_t i = 0; i < 200; ++i) {
    const std::size_t c = i % 5;
    const float w = static_cast<float>(1 + rng.below(3));
    bank.insert(TraceRecord{1000 - i, Label::anomalous, 4, w, testutil::perturb(centers[c].values(), 0.1, rng), {}});
    members[c].push_back(bank.size() - 1);
  }
  const auto m = merge_centroids(bank, 0.95);
  ASSERT_EQ(m.size(), 5u);
  for (std::size_t c = 0; c < 5; ++c) {
    // brute-force weighted mean of the cluster
    std::vector<oracle::ld> mean(dim, 0);
    std::uint64_t min_id = UINT64_MAX;
    double wsum = 0;
    for (auto r : members[c]) {
      for (std::size_t d = 0; d < dim; ++d) mean[d] += bank.weight(r) * bank.embedding(r)[d];
      min_id = std::min(min_id, bank.id(r));
      wsum += bank.weight(r);
    }
    std::vector<float> mf(mean.begin(), mean.end());
    const auto row = m.row_of(min_id);
    ASSERT_TRUE(row.has_value());
    EXPECT_GE(cosine(m.embedding(*row), mf), 1.0 - 1e-3);
    EXPECT_DOUBLE_EQ(m.weight(*row), wsum);
  }
}

TEST(Merge, ConservationAndIdempotence) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto bank = testutil::clustered_bank(400, 32, 12, 0.3, 40 + seed);
    const auto once = merge_centroids(bank, 0.9);
    EXPECT_NEAR(total_weight(once), total_weight(bank), 1e-9);
    EXPECT_LE(once.size(), bank.size());
    EXPECT_EQ(once.dim(), bank.dim());
    EXPECT_EQ(close_pairs(once, 0.9), 0u);
    EXPECT_TRUE(bit_identical(merge_centroids(once, 0.9), once));
    for (std::size_t r = 0; r < once.size(); ++r) {
      const auto src = bank.row_of(once.id(r));
      ASSERT_TRUE(src.has_value());
      EXPECT_EQ(once.label(r), bank.label(*src));
      EXPECT_EQ(once.context_id(r), bank.context_id(*src));
      EXPECT_TRUE(is_unit_norm(once.embedding(r)));
    }
  }
}

TEST(Merge, Errors) {
  const auto bank = testutil::random_bank(5, 4, 1);
  for (double bad : {0.0, 1.0, -0.5, 1.5}) {
    EXPECT_EQ(code_of([&] { merge_centroids(bank, bad); }), ErrorCode::InvalidThreshold);
  }
  EXPECT_EQ(code_of([] { merge_centroids(TraceBank(4), 0.9); }), ErrorCode::EmptyInput);
}

TEST(Prune, DuplicatePairAndOrthogonalSet) {
  TraceBank dup(3);
  dup.insert(make_record(5, Label::anomalous, 0, {1, 1, 0}));
  dup.insert(make_record(4, Label::anomalous, 0, {1, 1, 0}));
  const auto p = prune_redundant(dup, 0.99);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p.id(0), 4u);

  TraceBank heavier(3);
  heavier.insert(make_record(4, Label::anomalous, 0, {1, 1, 0}));
  heavier.insert(make_record(5, Label::anomalous, 0, {1, 1, 0}, 3.0f));
  EXPECT_EQ(prune_redundant(heavier, 0.99).id(0), 5u);

  TraceBank ortho(3);
  ortho.insert(make_record(1, Label::anomalous, 0, {1, 0, 0}));
  ortho.insert(make_record(2, Label::anomalous, 0, {0, 1, 0}));
  ortho.insert(make_record(3, Label::anomalous, 0, {0, 0, 1}));
  EXPECT_TRUE(bit_identical(prune_redundant(ortho, 0.5), ortho));
}

TEST(Prune, PlantedDuplicatesMatchPairwiseOracle) {
  Rng rng(50);
  const std::size_t dim = 48;
  TraceBank bank(dim);
  for (std::size_t i = 0; i < 500; ++i) {
    const float w = static_cast<float>(1 + rng.below(3));
    bank.insert(TraceRecord{i, i % 2 ? Label::anomalous : Label::non_anomalous, static_cast<std::uint32_t>(i % 4), w,
                            testutil::random_unit(dim, rng), {}});
  }
  for (std::size_t j = 0; j < 50; ++j) {
    const std::size_t src = rng.below(500);
    EmbeddingVector v = testutil::perturb(bank.embedding(src), 0.01, rng);
    ASSERT_GE(cosine(v.values(), bank.embedding(src)), 0.999);
    const float w = static_cast<float>(1 + rng.below(3));
    bank.insert(TraceRecord{500 + j, bank.label(src), bank.context_id(src), w, v, {}});
  }
  const auto pruned = prune_redundant(bank, 0.999);
  std::vector<std::uint64_t> ids;
  for (std::size_t r = 0; r < pruned.size(); ++r) ids.push_back(pruned.id(r));
  std::sort(ids.begin(), ids.end());
  EXPECT_EQ(ids, oracle::prune_survivors(bank, 0.999));
  EXPECT_LT(pruned.size(), bank.size());
  EXPECT_EQ(close_pairs(pruned, 0.999), 0u);
}

TEST(Prune, IdempotentAndNoCloseSurvivors) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto bank = testutil::clustered_bank(600, 16, 20, 0.2, 60 + seed);
    for (double tau : {0.9, 0.97, 0.99, 1.0}) {
      const auto once = prune_redundant(bank, tau);
      EXPECT_EQ(close_pairs(once, tau), 0u);
      EXPECT_TRUE(bit_identical(prune_redundant(once, tau), once));
      std::vector<std::uint64_t> ids;
      for (std::size_t r = 0; r < once.size(); ++r) ids.push_back(once.id(r));
      std::sort(ids.begin(), ids.end());
      EXPECT_EQ(ids, oracle::prune_survivors(bank, tau));
    }
  }
}

TEST(Prune, Errors) {
  const auto bank = testutil::random_bank(5, 4, 1);
  EXPECT_EQ(code_of([&] { prune_redundant(bank, 0.0); }), ErrorCode::InvalidThreshold);
  EXPECT_EQ(code_of([&] { prune_redundant(bank, 1.01); }), ErrorCode::InvalidThreshold);
  EXPECT_TRUE(thresholds_consistent(0.95, 0.99));
  EXPECT_FALSE(thresholds_consistent(0.99, 0.95));
}

TEST(CoarseIndex, SingleListIsExact) {
  const auto bank = build_coarse_index(testutil::random_bank(500, 32, 70), 1, 1, 3);
  Rng rng(71);
  for (int q = 0; q < 20; ++q) expect_matches_oracle(bank, testutil::random_unit(32, rng).values(), 5, Subset::all);
}

TEST(CoarseIndex, FullProbeIsExact) {
  auto bank = build_coarse_index(testutil::random_bank(10000, 64, 72), 32, 32, 5);
  Rng rng(73);
  for (int q = 0; q < 50; ++q) {
    const auto query = testutil::random_unit(64, rng);
    for (Subset s : {Subset::anomalous, Subset::all}) expect_matches_oracle(bank, query.values(), 5, s);
  }
}

TEST(CoarseIndex, EveryRecordInExactlyOneList) {
  auto bank = build_coarse_index(testutil::clustered_bank(3000, 32, 40, 0.5, 74), 16, 4, 9);
  const auto& ix = *bank.coarse_index();
  std::vector<int> seen(bank.size(), 0);
  for (std::size_t c = 0; c < ix.nlist(); ++c) {
    for (auto row : ix.lists[c]) {
      seen[row]++;
      // nearest-centroid assignment
      EXPECT_EQ(ix.nearest(bank.embedding(row)), c);
    }
  }
  for (int s : seen) EXPECT_EQ(s, 1);
  Rng rng(75);
  const auto extra = testutil::random_unit(32, rng);
  bank.insert_raw(999999, Label::anomalous, 0, 1.0f, extra.values(), std::nullopt);
  EXPECT_EQ(bank.coarse_index()->lists[bank.coarse_index()->nearest(extra.values())].back(), bank.size() - 1);
}

TEST(CoarseIndex, PartialProbeRecallOnClusteredData) {
  const auto exact = testutil::clustered_bank(20000, 64, 200, 0.6, 76);
  const auto bank = build_coarse_index(exact, 64, 8, 11);
  Rng rng(77);
  std::size_t found = 0, total = 0;
  for (int q = 0; q < 100; ++q) {
    const auto center = exact.embedding(rng.below(exact.size()));
    const auto query = testutil::perturb(center, 0.6, rng);
    const auto truth = oracle::topk(exact, query.values(), 5, Subset::all);
    const auto hits = bank.topk(query, 5);
    std::set<std::uint64_t> got;
    for (const auto& h : hits) got.insert(h.record_id);
    for (const auto& t : truth) found += got.count(t.id);
    total += truth.size();
  }
  EXPECT_GE(static_cast<double>(found) / static_cast<double>(total), 0.95);
}

TEST(CoarseIndex, DeterministicAndErrors) {
  const auto bank = testutil::random_bank(300, 16, 78);
  const auto a = train_inverted_lists(bank, 8, 2, 4);
  const auto b = train_inverted_lists(bank, 8, 2, 4);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.lists, b.lists);
  EXPECT_EQ(code_of([&] { train_inverted_lists(bank, 301, 1, 1); }), ErrorCode::TooFewRecords);
  EXPECT_EQ(code_of([&] { train_inverted_lists(bank, 8, 9, 1); }), ErrorCode::InvalidArgument);
  EXPECT_EQ(code_of([&] { train_inverted_lists(bank, 8, 0, 1); }), ErrorCode::InvalidArgument);
  auto indexed = build_coarse_index(bank, 8, 2, 4);
  indexed.set_nprobe(8);
  EXPECT_EQ(indexed.coarse_index()->nprobe, 8u);
  EXPECT_EQ(code_of([&] { indexed.set_nprobe(9); }), ErrorCode::InvalidArgument);
}

TEST(BankFile, RoundTripThousandRecords) {
  testutil::TempDir dir;
  auto bank = testutil::random_bank(1000, 32, 80);
  save_bank(dir / "b.trcb", bank);
  EXPECT_EQ(std::filesystem::file_size(dir / "b.trcb"), bank_file_size(1000, 32));
  const auto back = load_bank(dir / "b.trcb");
  EXPECT_TRUE(bit_identical(back, bank));
  EXPECT_EQ(back.stats(), bank.stats());
  EXPECT_FALSE(back.coarse_index().has_value());
}

TEST(BankFile, TextsWeightsAndIndexRoundTrip) {
  testutil::TempDir dir;
  Rng rng(81);
  TraceBank bank(16);
  for (std::uint64_t i = 0; i < 200; ++i) {
    std::optional<std::string> text;
    if (i % 3) text = "trace number " + std::to_string(i) + " \xc3\xa9";
    bank.insert(TraceRecord{i * 7, i % 2 ? Label::anomalous : Label::non_anomalous, static_cast<std::uint32_t>(i % 5),
                            1.0f + static_cast<float>(i % 4) * 0.5f, testutil::random_unit(16, rng), text});
  }
  const auto indexed = build_coarse_index(bank, 10, 3, 2);
  save_bank(dir / "b.trcb", indexed);
  const auto back = load_bank(dir / "b.trcb");
  EXPECT_TRUE(bit_identical(back, indexed));
  ASSERT_TRUE(back.coarse_index().has_value());
  EXPECT_EQ(back.coarse_index()->lists, indexed.coarse_index()->lists);
  EXPECT_EQ(back.coarse_index()->centroids, indexed.coarse_index()->centroids);
  EXPECT_EQ(back.coarse_index()->nprobe, 3u);
  EXPECT_FALSE(back.text(0).has_value());
  EXPECT_EQ(back.text(1), "trace number 1 \xc3\xa9");
  const auto q = testutil::random_unit(16, rng);
  EXPECT_EQ(back.topk(q, 5), indexed.topk(q, 5));
}

TEST(BankFile, Errors) {
  testutil::TempDir dir;
  save_bank(dir / "b.trcb", testutil::random_bank(50, 8, 82));
  const auto good = io::read_file(dir / "b.trcb");
  auto bad = good;
  bad[1] = 'X';
  EXPECT_EQ(code_of([&] { decode_bank(bad); }), ErrorCode::BadMagic);
  bad = good;
  bad[4] = 9;
  EXPECT_EQ(code_of([&] { decode_bank(bad); }), ErrorCode::VersionMismatch);
  for (std::size_t cut : {good.size() - 1, good.size() / 2, std::size_t{20}, std::size_t{2}}) {
    bad.assign(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_EQ(code_of([&] { decode_bank(bad); }), ErrorCode::TruncatedFile) << cut;
  }
  // flipped bytes inside ids, labels and embeddings
  for (std::size_t off : {kBankHeaderBytes + 3, kBankHeaderBytes + 8, kBankHeaderBytes + 20, good.size() - 5}) {
    bad = good;
    bad[off] = static_cast<char>(bad[off] ^ 0x5a);
    EXPECT_EQ(code_of([&] { decode_bank(bad); }), ErrorCode::ChecksumMismatch) << off;
  }
  bad = good;
  bad.push_back(0);
  EXPECT_EQ(code_of([&] { decode_bank(bad); }), ErrorCode::ChecksumMismatch);
  EXPECT_EQ(code_of([] { load_bank("/nonexistent.trcb"); }), ErrorCode::FileNotFound);
}

TEST(BankFile, SizeArithmetic) {
  EXPECT_EQ(kBankHeaderBytes, 26u);
  EXPECT_EQ(kRecordHeaderBytes, 17u);
  EXPECT_EQ(bank_file_size(100000, 512), 26u + 100000u * (17u + 2048u));
  EXPECT_EQ(bank_file_size(100000, 512), 206500026u);
  EXPECT_EQ(bank_file_size(0, 512), 26u);
}
