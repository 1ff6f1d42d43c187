#pragma once

// Block-wise visibility and position-id layout for parallel context windows.
//
// A sequence is laid out as  question | context_1 | ... | context_N | suffix.
// Contexts never see each other; every context restarts its positions right
// after the question; the suffix resumes at question_len + sum(context_lens).

#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sparse_rag/types.hpp"

namespace sparse_rag {

struct SegmentPlan {
  std::size_t question_len = 0;
  std::vector<std::size_t> context_lens;
  std::size_t suffix_len = 0;

  std::size_t context_total() const {
    return std::accumulate(context_lens.begin(), context_lens.end(), std::size_t{0});
  }
  std::size_t total() const { return question_len + context_total() + suffix_len; }

  void validate() const {
    if (!context_lens.empty() && question_len == 0) {
      throw InvalidArgument("SegmentPlan: question_len must be >= 1 when contexts are present");
    }
  }
};

// Which keys each query row may attend to.
//
// Rows are the new tokens of a forward call; columns are the prior cached
// tokens followed by the new tokens themselves. A square Visibility (no prior
// columns) describes a whole training sequence.
class Visibility {
 public:
  Visibility() = default;
  Visibility(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), bits_(rows * cols, 0) {
    if (cols < rows) throw InvalidArgument("Visibility: cols must be >= rows");
  }

  // Every row sees all prior columns and the new tokens up to itself.
  static Visibility causal(std::size_t rows, std::size_t prior = 0) {
    Visibility v(rows, prior + rows);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j <= prior + i; ++j) v.set(i, j, true);
    }
    return v;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t prior() const { return cols_ - rows_; }

  bool visible(std::size_t row, std::size_t col) const { return bits_[row * cols_ + col] != 0; }
  void set(std::size_t row, std::size_t col, bool value) { bits_[row * cols_ + col] = value ? 1 : 0; }

  std::vector<std::size_t> visible_set(std::size_t row) const {
    std::vector<std::size_t> out;
    for (std::size_t j = 0; j < cols_; ++j) {
      if (visible(row, j)) out.push_back(j);
    }
    return out;
  }

  std::size_t visible_pairs() const {
    std::size_t n = 0;
    for (auto b : bits_) n += b;
    return n;
  }

  // True when no new token sees a later new token.
  bool is_causal_within_new() const {
    for (std::size_t i = 0; i < rows_; ++i) {
      for (std::size_t j = i + 1; j < rows_; ++j) {
        if (visible(i, prior() + j)) return false;
      }
    }
    return true;
  }

  bool operator==(const Visibility&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

namespace detail {

// Segment id of each token: -1 question, i for context i, -2 suffix.
inline std::vector<long> segment_ids(const SegmentPlan& plan) {
  std::vector<long> ids;
  ids.reserve(plan.total());
  ids.insert(ids.end(), plan.question_len, -1L);
  for (std::size_t c = 0; c < plan.context_lens.size(); ++c) {
    ids.insert(ids.end(), plan.context_lens[c], static_cast<long>(c));
  }
  ids.insert(ids.end(), plan.suffix_len, -2L);
  return ids;
}

}  // namespace detail

inline Visibility build_block_mask(const SegmentPlan& plan) {
  plan.validate();
  const auto ids = detail::segment_ids(plan);
  const std::size_t n = ids.size();
  Visibility v(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      const bool same = ids[i] == ids[j];
      const bool to_question = ids[j] == -1;
      const bool from_suffix = ids[i] == -2;
      if (same || to_question || from_suffix) v.set(i, j, true);
    }
  }
  return v;
}

// Closed-form count of visible (query, key) pairs of build_block_mask(plan).
inline std::size_t block_mask_pair_count(const SegmentPlan& plan) {
  const std::size_t q = plan.question_len;
  std::size_t pairs = q * (q + 1) / 2;
  for (auto l : plan.context_lens) pairs += l * (l + 1) / 2 + q * l;
  const std::size_t s = plan.suffix_len;
  pairs += s * (q + plan.context_total()) + s * (s + 1) / 2;
  return pairs;
}

// Pairs visited by one causal pass over all tokens.
inline std::size_t dense_pair_count(std::size_t tokens) { return tokens * (tokens + 1) / 2; }

inline std::vector<Position> assign_position_ids(const SegmentPlan& plan,
                                                 std::size_t max_position = SIZE_MAX) {
  plan.validate();
  std::vector<Position> pos;
  pos.reserve(plan.total());
  const std::size_t q = plan.question_len;
  for (std::size_t i = 0; i < q; ++i) pos.push_back(static_cast<Position>(i));
  for (auto l : plan.context_lens) {
    for (std::size_t i = 0; i < l; ++i) pos.push_back(static_cast<Position>(q + i));
  }
  const std::size_t suffix_start = q + plan.context_total();
  for (std::size_t i = 0; i < plan.suffix_len; ++i) pos.push_back(static_cast<Position>(suffix_start + i));

  std::size_t max_seen = 0;
  for (auto p : pos) max_seen = std::max<std::size_t>(max_seen, static_cast<std::size_t>(p));
  if (!pos.empty() && max_seen >= max_position) {
    throw PositionOverflow("assign_position_ids: position " + std::to_string(max_seen) +
                           " exceeds max_position " + std::to_string(max_position));
  }
  return pos;
}

// How the first suffix position is chosen once some contexts were dropped.
enum class SuffixPositionRule {
  kKeptContexts,   // question_len + sum of kept context lengths
  kAllPrefilled,   // question_len + sum of every prefilled context length
};

inline Position inference_suffix_position(std::size_t question_len,
                                          std::span<const std::size_t> kept_context_lens) {
  std::size_t p = question_len;
  for (auto l : kept_context_lens) p += l;
  return static_cast<Position>(p);
}

}  // namespace sparse_rag
