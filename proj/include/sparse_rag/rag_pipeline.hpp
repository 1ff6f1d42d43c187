#pragma once

// Sparse RAG inference: prefill the question once and every context against
// it, score each context through the assessment control token, drop contexts
// under the threshold, then decode from the filtered cache.

#include <chrono>
#include <cmath>
#include <random>
#include <vector>

#include "sparse_rag/attention_layout.hpp"
#include "sparse_rag/kv_store.hpp"
#include "sparse_rag/model.hpp"

namespace sparse_rag {

enum class ScoreMode {
  kRawGood,       // P(Good)
  kRenormalized,  // P(Good) / (P(Good) + P(Bad))
};

enum class FallbackPolicy {
  kArgmax,        // keep the single best-scoring context (lowest index on ties)
  kQuestionOnly,  // decode from the question alone
};

enum class Sampling { kGreedy, kTemperature };

struct GenerationParams {
  std::size_t max_tokens = 16;
  double temperature = 0.0;  // 0 means greedy
  std::uint64_t seed = 0;
  bool stop_at_eos = true;

  Sampling sampling() const { return temperature > 0.0 ? Sampling::kTemperature : Sampling::kGreedy; }

  void validate() const {
    if (max_tokens == 0) throw InvalidArgument("GenerationParams: max_tokens must be positive");
    if (!(temperature >= 0.0) || !std::isfinite(temperature)) {
      throw InvalidArgument("GenerationParams: temperature must be a finite value >= 0");
    }
  }
};

struct FilterResult {
  std::vector<std::size_t> kept;
  bool fallback_applied = false;
};

struct AssessmentResult {
  std::vector<double> scores;
  std::vector<std::size_t> kept;
  double sigma = 0.0;
  bool fallback_applied = false;
};

struct PipelineOptions {
  double sigma = 0.15;
  ScoreMode score_mode = ScoreMode::kRawGood;
  FallbackPolicy fallback = FallbackPolicy::kArgmax;
  SuffixPositionRule suffix_rule = SuffixPositionRule::kKeptContexts;
  GenerationParams generation{};
};

struct TimingBreakdown {
  double prefill_seconds = 0.0;
  double assess_seconds = 0.0;
  double decode_seconds = 0.0;
  std::size_t prefill_tokens = 0;
  std::size_t decode_tokens = 0;
};

struct AnswerResult {
  std::vector<TokenId> answer;
  AssessmentResult assessment;
  TimingBreakdown timing;
};

// Next-token probabilities of the two rate tokens after Control_Assessment.
struct RateDistribution {
  double good = 0.0;
  double bad = 0.0;
  double total = 0.0;  // mass of the whole row, 1 up to rounding
};

template <typename T>
RateDistribution rate_distribution(const ModelBundle<T>& model, const SegmentedCache<T>& cache, std::size_t i) {
  const auto view = context_view(cache, i);
  const auto pos = static_cast<Position>(cache.question().size() + cache.contexts()[i].size());
  const TokenId ctrl = model.config.control_assessment_id;
  auto res = forward(model, ForwardRequest<T>{std::span<const TokenId>(&ctrl, 1),
                                              std::span<const Position>(&pos, 1), view, nullptr});
  const RowVector<T> row = res.logits.row(0);
  const RowVector<T> lp = detail::log_softmax<T>(row);
  RateDistribution d;
  d.good = std::exp(static_cast<double>(lp(model.config.rate_good_id)));
  d.bad = std::exp(static_cast<double>(lp(model.config.rate_bad_id)));
  for (Eigen::Index j = 0; j < lp.size(); ++j) d.total += std::exp(static_cast<double>(lp(j)));
  return d;
}

// Relevance score of context i: probability of "Good" right after the forced
// Control_Assessment token. The control token itself is not scored.
template <typename T>
double assess_context(const ModelBundle<T>& model, const SegmentedCache<T>& cache, std::size_t i,
                      ScoreMode mode = ScoreMode::kRawGood) {
  if (i >= cache.num_contexts()) throw std::out_of_range("assess_context: context index out of range");
  if (mode == ScoreMode::kRenormalized) {
    const auto d = rate_distribution(model, cache, i);
    return d.good / (d.good + d.bad);
  }
  const auto pos = static_cast<Position>(cache.question().size() + cache.contexts()[i].size());
  const TokenId tokens[2] = {model.config.control_assessment_id, model.config.rate_good_id};
  const Position positions[2] = {pos, static_cast<Position>(pos + 1)};
  const auto lp = logprob_of_continuation(model, context_view(cache, i), tokens, positions);
  return std::exp(static_cast<double>(lp[1]));
}

inline FilterResult filter_contexts(std::span<const double> scores, double sigma,
                                    FallbackPolicy fallback = FallbackPolicy::kArgmax) {
  if (!(sigma >= 0.0 && sigma <= 1.0)) throw InvalidArgument("filter_contexts: sigma must lie in [0, 1]");
  FilterResult r;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (scores[i] >= sigma) r.kept.push_back(i);
  }
  if (r.kept.empty() && !scores.empty()) {
    r.fallback_applied = true;
    if (fallback == FallbackPolicy::kArgmax) {
      std::size_t best = 0;
      for (std::size_t i = 1; i < scores.size(); ++i) {
        if (scores[i] > scores[best]) best = i;
      }
      r.kept.push_back(best);
    }
  }
  return r;
}

namespace detail {

template <typename T>
TokenId pick_token(const RowVector<T>& logits, const GenerationParams& params, std::mt19937_64& rng) {
  if (params.sampling() == Sampling::kGreedy) {
    Eigen::Index best = 0;
    logits.maxCoeff(&best);
    return static_cast<TokenId>(best);
  }
  const RowVector<T> lp = log_softmax<T>(logits / static_cast<T>(params.temperature));
  const double u = uniform01(rng);
  double acc = 0.0;
  for (Eigen::Index j = 0; j < lp.size(); ++j) {
    acc += std::exp(static_cast<double>(lp(j)));
    if (u < acc) return static_cast<TokenId>(j);
  }
  return static_cast<TokenId>(lp.size() - 1);
}

}  // namespace detail

// Decodes from the question plus the kept contexts. Control_Generation is
// forced at the suffix position chosen by `rule`; decoding stops at eos (not
// included in the output) or after max_tokens tokens.
template <typename T>
std::vector<TokenId> generate(const ModelBundle<T>& model, const SegmentedCache<T>& cache,
                              std::vector<std::size_t> kept, const GenerationParams& params,
                              SuffixPositionRule rule = SuffixPositionRule::kKeptContexts) {
  params.validate();
  kept = normalize_kept(std::move(kept), cache.num_contexts());
  const CacheView<T> base = select(cache, kept);

  std::vector<std::size_t> lens;
  if (rule == SuffixPositionRule::kKeptContexts) {
    for (auto i : kept) lens.push_back(cache.contexts()[i].size());
  } else {
    lens = cache.context_lengths();
  }
  Position pos = inference_suffix_position(cache.question().size(), lens);

  std::mt19937_64 rng(params.seed);
  KvBlock<T> suffix = KvBlock<T>::empty(model.config);
  TokenId token = model.config.control_generation_id;
  std::vector<TokenId> out;
  for (std::size_t step = 0; step < params.max_tokens; ++step) {
    CacheView<T> view = base;
    if (suffix.size() > 0) view.blocks.push_back(&suffix);
    auto res = forward(model, ForwardRequest<T>{std::span<const TokenId>(&token, 1),
                                                std::span<const Position>(&pos, 1), view, nullptr});
    suffix.append(res.kv);
    const RowVector<T> row = res.logits.row(0);
    const TokenId next = detail::pick_token<T>(row, params, rng);
    if (params.stop_at_eos && next == model.config.eos_id) break;
    out.push_back(next);
    token = next;
    ++pos;
  }
  return out;
}

// Scores every context of a prefilled cache and applies the threshold.
template <typename T>
AssessmentResult assess_and_filter(const ModelBundle<T>& model, const SegmentedCache<T>& cache,
                                   const PipelineOptions& options) {
  AssessmentResult a;
  a.sigma = options.sigma;
  a.scores.reserve(cache.num_contexts());
  for (std::size_t i = 0; i < cache.num_contexts(); ++i) {
    a.scores.push_back(assess_context(model, cache, i, options.score_mode));
  }
  auto f = filter_contexts(a.scores, options.sigma, options.fallback);
  a.kept = std::move(f.kept);
  a.fallback_applied = f.fallback_applied;
  return a;
}

template <typename T>
AnswerResult answer(const ModelBundle<T>& model, std::span<const TokenId> question_tokens,
                    const std::vector<std::vector<TokenId>>& contexts, const PipelineOptions& options = {}) {
  if (contexts.empty()) throw InvalidArgument("answer: at least one context is required");
  options.generation.validate();
  using Clock = std::chrono::steady_clock;
  AnswerResult r;

  auto t0 = Clock::now();
  auto cache = SegmentedCache<T>::build(model, question_tokens, contexts);
  auto t1 = Clock::now();
  r.assessment = assess_and_filter(model, cache, options);
  cache.scores = r.assessment.scores;
  cache.kept = r.assessment.kept;
  auto t2 = Clock::now();
  r.answer = generate(model, cache, r.assessment.kept, options.generation, options.suffix_rule);
  auto t3 = Clock::now();

  r.timing.prefill_seconds = std::chrono::duration<double>(t1 - t0).count();
  r.timing.assess_seconds = std::chrono::duration<double>(t2 - t1).count();
  r.timing.decode_seconds = std::chrono::duration<double>(t3 - t2).count();
  r.timing.prefill_tokens = question_tokens.size();
  for (const auto& c : contexts) r.timing.prefill_tokens += c.size();
  r.timing.decode_tokens = std::min(r.answer.size() + 1, options.generation.max_tokens);
  return r;
}

}  // namespace sparse_rag
