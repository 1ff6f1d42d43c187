#pragma once

// Quality metrics: exact match, token F1, per-label binary F1 and ROC AUC.

#include <algorithm>
#include <map>
#include <numeric>
#include <span>
#include <vector>

#include "sparse_rag/synth_data.hpp"
#include "sparse_rag/types.hpp"

namespace sparse_rag {

// Drops pad and eos tokens wherever they occur.
inline std::vector<TokenId> strip_special(std::span<const TokenId> tokens) {
  std::vector<TokenId> out;
  for (auto t : tokens) {
    if (t != ReservedTokens::kPad && t != ReservedTokens::kEos) out.push_back(t);
  }
  return out;
}

inline int exact_match(std::span<const TokenId> prediction, std::span<const TokenId> gold) {
  return strip_special(prediction) == strip_special(gold) ? 1 : 0;
}

// Harmonic mean of multiset precision and recall over tokens.
inline double token_f1(std::span<const TokenId> prediction, std::span<const TokenId> gold) {
  const auto p = strip_special(prediction);
  const auto g = strip_special(gold);
  if (p.empty() && g.empty()) return 1.0;
  if (p.empty() || g.empty()) return 0.0;
  std::map<TokenId, long> counts;
  for (auto t : g) ++counts[t];
  long common = 0;
  for (auto t : p) {
    auto it = counts.find(t);
    if (it != counts.end() && it->second > 0) {
      --it->second;
      ++common;
    }
  }
  // 2PR/(P+R) with P = c/|p| and R = c/|g| reduces to 2c/(|p|+|g|), which
  // rounds once.
  return 2.0 * static_cast<double>(common) / static_cast<double>(p.size() + g.size());
}

struct BinaryF1 {
  double f1_label0 = 0.0;
  double f1_label1 = 0.0;
  double average = 0.0;
};

inline BinaryF1 binary_f1(std::span<const int> predicted, std::span<const int> gold) {
  if (predicted.size() != gold.size()) throw InvalidArgument("binary_f1: length mismatch");
  if (predicted.empty()) throw InvalidArgument("binary_f1: no labels");
  auto f1_for = [&](int cls) {
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < predicted.size(); ++i) {
      const bool p = predicted[i] == cls;
      const bool g = gold[i] == cls;
      tp += p && g;
      fp += p && !g;
      fn += !p && g;
    }
    const std::size_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  };
  BinaryF1 r;
  r.f1_label0 = f1_for(0);
  r.f1_label1 = f1_for(1);
  r.average = 0.5 * (r.f1_label0 + r.f1_label1);
  return r;
}

// Probability that a random positive outscores a random negative (ties count
// one half), via average ranks.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw InvalidArgument("roc_auc: length mismatch");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
    i = j + 1;
  }
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i]) {
      pos += 1;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(labels.size()) - pos;
  if (pos == 0 || neg == 0) throw InvalidArgument("roc_auc: need both positive and negative labels");
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

}  // namespace sparse_rag
