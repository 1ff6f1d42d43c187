#include <gtest/gtest.h>

#include <sstream>

#include "sparse_rag/eval_bench.hpp"
#include "support/fixtures.hpp"

using namespace sparse_rag;

namespace {

struct Setup {
  SynthTaskConfig task;
  Corpus corpus;
  ModelBundle<float> model;
};

Setup make_setup(std::size_t examples = 12, double scale = 0.3) {
  SynthTaskConfig t;
  t.num_examples = examples;
  t.seed = 31;
  auto corpus = generate_corpus(t);
  const auto cfg = SynthVocabulary::for_task(t).tokenizer().model_config(2, 2, 16, 32, 512);
  return {t, std::move(corpus), fixtures::random_model<float>(cfg, 7, scale)};
}

SweepOptions no_timing() {
  SweepOptions o;
  o.ds_examples = 0;
  return o;
}

}  // namespace

TEST(Sweep, SigmaZeroKeepsEveryContext) {
  const auto s = make_setup();
  const std::vector<double> sig{0.0};
  const auto rows = threshold_sweep(s.model, s.corpus.examples, sig, no_timing());
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0].avg_k, 10.0);
  EXPECT_EQ(rows[0].fallback_rate, 0.0);
}

TEST(Sweep, AvgKNonIncreasingAndOneRowPerSigma) {
  const auto s = make_setup(20, 1.0);
  const auto& sig = default_sigmas();
  const auto rows = threshold_sweep(s.model, s.corpus.examples, sig, no_timing());
  ASSERT_EQ(rows.size(), sig.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].sigma, sig[i]);
    EXPECT_GE(rows[i].avg_k, 1.0);  // argmax fallback
    if (i) EXPECT_LE(rows[i].avg_k, rows[i - 1].avg_k);
  }
  EXPECT_LE(rows.back().avg_k, rows[1].avg_k);
}

// Each row must equal running the full pipeline per example at that sigma.
TEST(Sweep, MatchesPerExamplePipeline) {
  const auto s = make_setup(10, 1.0);
  const std::vector<double> sig{0.0, 0.02, 0.1, 0.5};
  auto opt = no_timing();
  opt.max_answer_tokens = 4;
  const auto rows = threshold_sweep(s.model, s.corpus.examples, sig, opt);
  for (std::size_t i = 0; i < sig.size(); ++i) {
    double em = 0, f1 = 0, k = 0, fb = 0;
    for (const auto& e : s.corpus.examples) {
      PipelineOptions p;
      p.sigma = sig[i];
      p.generation.max_tokens = 4;
      const auto r = answer(s.model, e.question, e.contexts, p);
      em += exact_match(r.answer, e.answer);
      f1 += token_f1(r.answer, e.answer);
      k += static_cast<double>(r.assessment.kept.size());
      fb += r.assessment.fallback_applied;
    }
    EXPECT_NEAR(rows[i].em, em / 10, 1e-12);
    EXPECT_NEAR(rows[i].token_f1, f1 / 10, 1e-12);
    EXPECT_NEAR(rows[i].avg_k, k / 10, 1e-12);
    EXPECT_NEAR(rows[i].fallback_rate, fb / 10, 1e-12);
  }
}

TEST(Sweep, DecodeSpeedMeasuredWhenRequested) {
  const auto s = make_setup(4);
  const std::vector<double> sig{0.0, 0.3};
  SweepOptions o;
  o.ds_examples = 2;
  o.ds_output_len = 4;
  for (const auto& r : threshold_sweep(s.model, s.corpus.examples, sig, o)) EXPECT_GT(r.decode_tokens_per_sec, 0.0);
}

TEST(Sweep, Errors) {
  const auto s = make_setup(2);
  const std::vector<double> none, bad{1.5}, ok{0.1};
  EXPECT_THROW(threshold_sweep(s.model, s.corpus.examples, none), InvalidArgument);
  EXPECT_THROW(threshold_sweep(s.model, s.corpus.examples, bad), InvalidArgument);
  EXPECT_THROW(threshold_sweep(s.model, std::span<const RagExample>{}, ok), InvalidArgument);
}

TEST(Golden, DecodesFromGoldContexts) {
  const auto s = make_setup(6);
  auto opt = no_timing();
  opt.max_answer_tokens = 3;
  const auto g = golden_filter_quality(s.model, s.corpus.examples, opt);
  double em = 0, k = 0;
  for (const auto& e : s.corpus.examples) {
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < e.labels->size(); ++i)
      if ((*e.labels)[i]) kept.push_back(i);
    const auto cache = SegmentedCache<float>::build(s.model, e.question, e.contexts);
    GenerationParams gp;
    gp.max_tokens = 3;
    em += exact_match(generate(s.model, cache, kept, gp), e.answer);
    k += static_cast<double>(kept.size());
  }
  EXPECT_NEAR(g.em, em / 6, 1e-12);
  EXPECT_NEAR(g.avg_k, k / 6, 1e-12);
  EXPECT_EQ(g.avg_k, 2.0);
}

TEST(Bench, EncodeRatesPositive) {
  const auto s = make_setup(1);
  const auto& e = s.corpus.examples[0];
  for (auto mode : {EncodeMode::kDense, EncodeMode::kParallel}) {
    const auto r = bench_encode(s.model, e.question, e.contexts, mode);
    EXPECT_GT(r.tokens_per_sec, 0.0);
    EXPECT_EQ(r.seconds.size(), 5u);
    EXPECT_EQ(r.tokens, 1u + 10 * 6);
  }
  EXPECT_THROW(bench_encode(s.model, e.question, e.contexts, EncodeMode::kDense, TimingProtocol{1, 4}),
               InvalidArgument);
}

TEST(Bench, DecodeGridDeterministicAndOrdered) {
  const auto s = make_setup(1);
  const auto& e = s.corpus.examples[0];
  auto cache = SegmentedCache<float>::build(s.model, e.question, e.contexts);
  const std::vector<std::size_t> ks{1, 2, 5}, lens{4, 48};
  const auto a = bench_decode(s.model, cache, ks, lens);
  ASSERT_EQ(a.size(), ks.size() * lens.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].k, ks[i / 2]);
    EXPECT_EQ(a[i].output_len, lens[i % 2]);
    EXPECT_GT(a[i].tokens_per_sec, 0.0);
    EXPECT_GE(a[i].seconds.size(), 5u);
  }
  // More output tokens take longer at fixed k.
  for (std::size_t i = 0; i < a.size(); i += 2)
    EXPECT_GT(detail::median(a[i + 1].seconds), detail::median(a[i].seconds));
  const auto b = bench_decode(s.model, cache, ks, lens);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].output_checksum, b[i].output_checksum);

  // With scores present, k = 1 picks the best-scored context.
  std::vector<double> scores(10, 0.1);
  scores[7] = 0.9;
  cache.scores = scores;
  const std::vector<std::size_t> one{1}, len{6};
  const auto c = bench_decode(s.model, cache, one, len);
  GenerationParams gp;
  gp.max_tokens = 6;
  gp.stop_at_eos = false;
  detail::Fnv1a h;
  for (auto t : generate(s.model, cache, {7}, gp)) h.update_value(t);
  EXPECT_EQ(c[0].output_checksum, h.digest());

  const std::vector<std::size_t> too_many{11}, zero{0};
  EXPECT_THROW(bench_decode(s.model, cache, too_many, len), InvalidArgument);
  EXPECT_THROW(bench_decode(s.model, cache, one, zero), InvalidArgument);
}

TEST(Bench, OverlappingTimingRunsRejected) {
  const auto s = make_setup(1);
  const auto& e = s.corpus.examples[0];
  {
    detail::ExclusiveTiming held;
    EXPECT_THROW(bench_encode(s.model, e.question, e.contexts, EncodeMode::kDense), std::logic_error);
  }
  EXPECT_NO_THROW(bench_encode(s.model, e.question, e.contexts, EncodeMode::kDense));
}

TEST(Reports, CsvAndJsonSchemas) {
  const std::vector<SweepRow> rows{{0.0, 0.5, 0.6, 10, 100, 0}, {0.1, 0.75, 0.8, 2.5, 300, 0.25}};
  std::ostringstream csv;
  write_sweep_csv(csv, rows);
  EXPECT_EQ(csv.str(), "sigma,em,token_f1,avg_k,ds_tps,fallback_rate\n0,0.5,0.6,10,100,0\n0.1,0.75,0.8,2.5,300,0.25\n");
  const auto j = sweep_json(rows);
  ASSERT_EQ(j.size(), 2u);
  for (const char* key : {"sigma", "em", "token_f1", "avg_k", "ds_tps", "fallback_rate"}) EXPECT_TRUE(j[0].contains(key));

  BenchReport rep;
  rep.encode.push_back({EncodeMode::kParallel, 100, 1234.5, {0.1, 0.1, 0.1, 0.1, 0.1}});
  rep.decode.push_back({2, 64, 99.0, {1, 1, 1, 1, 1}, 42});
  rep.environment = environment_note();
  std::ostringstream b;
  write_bench_csv(b, rep);
  EXPECT_EQ(b.str(), "kind,mode,k,output_len,tokens_per_sec,trials\nencode,parallel,,,1234.5,5\ndecode,,2,64,99,5\n");
  const auto bj = bench_json(rep);
  EXPECT_EQ(bj["decode"][0]["k"], 2);
  EXPECT_FALSE(bj["environment"].get<std::string>().empty());
}
