#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "trace/error.hpp"

namespace trace {

namespace detail {

inline void check_lengths(std::size_t a, std::size_t b) {
  if (a != b) fail(ErrorCode::LengthMismatch, "scores and labels differ in length");
}

inline std::size_t count_positives(std::span<const std::uint8_t> labels) {
  std::size_t p = 0;
  for (auto l : labels) p += l ? 1 : 0;
  return p;
}

}  // namespace detail

/// Area under the ROC curve as the Mann-Whitney statistic:
/// (concordant pairs + 0.5 * tied pairs) / (P * N).
inline double auc_roc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  detail::check_lengths(scores.size(), labels.size());
  const std::size_t pos = detail::count_positives(labels);
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) fail(ErrorCode::SingleClass, "AUC needs both classes");

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });

  // Twice the numerator, kept integral: 2 * concordant + ties.
  std::uint64_t twice = 0;
  std::uint64_t neg_below = 0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    std::uint64_t p_tied = 0, n_tied = 0;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
      (labels[idx[j]] ? p_tied : n_tied)++;
      ++j;
    }
    twice += 2 * p_tied * neg_below + p_tied * n_tied;
    neg_below += n_tied;
    i = j;
  }
  return static_cast<double>(twice) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
}

/// Ranking used by average precision: score descending, ties by original
/// index ascending.
inline std::vector<std::size_t> rank_descending(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  return idx;
}

/// Sum over positives, in rank order, of precision at that rank, over P.
inline double average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  detail::check_lengths(scores.size(), labels.size());
  const std::size_t pos = detail::count_positives(labels);
  if (pos == 0) fail(ErrorCode::NoPositives, "AP needs at least one positive");
  const auto order = rank_descending(scores);
  double sum = 0.0;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    if (!labels[order[r]]) continue;
    ++tp;
    sum += static_cast<double>(tp) / static_cast<double>(r + 1);
  }
  return sum / static_cast<double>(pos);
}

struct ClassificationStats {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;
  std::size_t predicted_positives = 0;
  bool no_positive_predictions = false;
};

/// Precision/recall/F1 with a frame predicted anomalous iff score >= theta.
/// Zero predicted positives gives precision = F1 = 0 and sets the flag.
inline ClassificationStats f1_at(std::span<const double> scores, std::span<const std::uint8_t> labels, double theta) {
  detail::check_lengths(scores.size(), labels.size());
  ClassificationStats s;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= theta;
    if (predicted && labels[i]) ++s.true_positives;
    else if (predicted) ++s.false_positives;
    else if (labels[i]) ++s.false_negatives;
  }
  s.predicted_positives = s.true_positives + s.false_positives;
  s.no_positive_predictions = s.predicted_positives == 0;
  const std::size_t actual = s.true_positives + s.false_negatives;
  if (s.predicted_positives) s.precision = static_cast<double>(s.true_positives) / static_cast<double>(s.predicted_positives);
  if (actual) s.recall = static_cast<double>(s.true_positives) / static_cast<double>(actual);
  if (s.true_positives) s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
  return s;
}

struct Segments {
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
};

/// Segment-level pooling: each run of `length` consecutive frames becomes one
/// segment scored by its maximum frame score and labeled positive if any frame is.
inline Segments segment_max(std::span<const double> scores, std::span<const std::uint8_t> labels, std::size_t length) {
  detail::check_lengths(scores.size(), labels.size());
  if (length == 0) fail(ErrorCode::InvalidArgument, "segment length must be >= 1");
  Segments out;
  for (std::size_t begin = 0; begin < scores.size(); begin += length) {
    const std::size_t end = std::min(scores.size(), begin + length);
    out.scores.push_back(*std::max_element(scores.begin() + static_cast<std::ptrdiff_t>(begin),
                                           scores.begin() + static_cast<std::ptrdiff_t>(end)));
    out.labels.push_back(std::any_of(labels.begin() + static_cast<std::ptrdiff_t>(begin),
                                     labels.begin() + static_cast<std::ptrdiff_t>(end), [](auto l) { return l != 0; }));
  }
  return out;
}

}  // namespace trace
