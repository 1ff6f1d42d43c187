#pragma once

// The sparse-rag command line tool. Kept in a header so tests can drive it
// in-process through run_cli().

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "sparse_rag/auto_labeler.hpp"
#include "sparse_rag/auto_labeler_http.hpp"
#include "sparse_rag/checkpoint.hpp"
#include "sparse_rag/eval_bench.hpp"
#include "sparse_rag/rag_pipeline.hpp"
#include "sparse_rag/synth_data.hpp"
#include "sparse_rag/trainer.hpp"

namespace sparse_rag {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitRuntime = 2 };

namespace cli {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string checksum_of(const fs::path& p) { return detail::hex64(file_checksum(p)); }

inline std::string checksum_of_text(const std::string& s) {
  detail::Fnv1a h;
  h.update_string(s);
  return detail::hex64(h.digest());
}

// Every run leaves one of these next to its outputs. `deterministic` holds a
// checksum of everything that must not change on a rerun (timings excluded).
struct RunManifest {
  std::string subcommand;
  json resolved = json::object();
  json paths = json::object();
  std::uint64_t seed = 0;
  json checksums = json::object();
  std::string deterministic;
  std::vector<std::string> argv;

  json to_json() const {
    return {{"subcommand", subcommand}, {"resolved", resolved}, {"paths", paths},          {"seed", seed},
            {"checksums", checksums},   {"deterministic_checksum", deterministic}, {"argv", argv}};
  }

  void write(const fs::path& file) const {
    if (file.has_parent_path()) fs::create_directories(file.parent_path());
    std::ofstream out(file);
    out << to_json().dump(2) << "\n";
    if (!out) throw IoError("cannot write manifest " + file.string());
  }
};

inline fs::path sibling(const fs::path& file, const std::string& suffix) {
  return file.parent_path() / (file.filename().string() + suffix);
}

template <typename V>
std::vector<V> parse_list(const std::string& text, const char* what) {
  std::vector<V> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.find_first_not_of(" \t") == std::string::npos) continue;
    std::istringstream is(item);
    V v{};
    if (!(is >> v) || !(is >> std::ws).eof()) throw CLI::ValidationError(what, "cannot parse '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) throw CLI::ValidationError(what, "empty list");
  return out;
}

inline Tokenizer model_tokenizer(const fs::path& model_dir) { return load_tokenizer(model_dir / "tokenizer.json"); }

inline void progress(const std::string& msg) { std::cerr << msg << std::endl; }

// ---- gen-data ----

struct GenDataArgs {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> num_examples;
};

inline int gen_data(const GenDataArgs& a, const std::vector<std::string>& argv) {
  SynthTaskConfig config;
  if (!a.config_path.empty()) {
    std::ifstream in(a.config_path);
    if (!in) throw IoError("cannot open " + a.config_path);
    config = SynthTaskConfig::from_json(json::parse(in));
  }
  if (a.seed) config.seed = *a.seed;
  if (a.num_examples) config.num_examples = *a.num_examples;
  config.validate();
  progress("generating " + std::to_string(config.num_examples) + " examples");
  const auto corpus = generate_corpus(config);
  save_corpus(a.out, corpus, config);

  RunManifest m;
  m.subcommand = "gen-data";
  m.resolved = config.to_json();
  m.paths = {{"config", a.config_path}, {"out", a.out}};
  m.seed = config.seed;
  m.checksums = {{"corpus.jsonl", checksum_of(fs::path(a.out) / "corpus.jsonl")},
                 {"tokenizer.json", checksum_of(fs::path(a.out) / "tokenizer.json")}};
  m.deterministic = m.checksums["corpus.jsonl"].get<std::string>();
  m.argv = argv;
  // The corpus manifest already records config and splits; the run fields
  // are merged into it.
  const fs::path mpath = fs::path(a.out) / "manifest.json";
  json merged;
  {
    std::ifstream in(mpath);
    merged = json::parse(in);
  }
  const json run = m.to_json();
  for (auto& [k, v] : run.items()) merged[k] = v;
  std::ofstream(mpath) << merged.dump(2) << "\n";
  std::cout << json{{"out", a.out}, {"examples", corpus.examples.size()}, {"corpus_checksum", m.deterministic}}.dump()
            << std::endl;
  return kExitOk;
}

// ---- train ----

struct TrainArgs {
  std::string corpus;
  std::string model_out;
  TrainConfig config;
  std::size_t layers = 2, heads = 4, dim = 64, ffn = 128, max_position = 1024;
  std::uint64_t init_seed = 0;
};

inline int train_cmd(TrainArgs a, const std::vector<std::string>& argv) {
  const auto corpus = load_corpus(a.corpus);
  const auto tok = load_tokenizer(fs::path(a.corpus) / "tokenizer.json");
  const auto mc = tok.model_config(a.layers, a.heads, a.dim, a.ffn, a.max_position);
  mc.validate();
  const auto init = init_model<float>(mc, detail::mix_seed(a.config.seed, a.init_seed));
  const fs::path out = a.model_out;
  fs::create_directories(out);
  a.config.output_dir = out / "checkpoints";
  progress("training " + std::to_string(a.config.steps) + " steps on " + std::to_string(corpus.train().size()) +
           " examples");
  const auto t0 = std::chrono::steady_clock::now();
  auto report_every = std::max<std::size_t>(1, a.config.steps / 20);
  auto result = train(init, corpus, a.config, [&](std::size_t step, double loss) {
    if ((step + 1) % report_every == 0) {
      std::ostringstream os;
      os << "step " << step + 1 << " loss " << loss;
      progress(os.str());
    }
  });
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  save_checkpoint(result.model, out);
  std::ofstream(out / "tokenizer.json") << tok.to_json().dump(2) << "\n";
  {
    std::ofstream lc(out / "loss_curve.txt");
    lc << std::setprecision(9);
    for (double l : result.loss_curve) lc << l << "\n";
  }
  // A copy of the per-checkpoint log sits next to the final weights.
  if (fs::exists(a.config.output_dir / "metrics.jsonl")) {
    fs::copy_file(a.config.output_dir / "metrics.jsonl", out / "metrics.jsonl", fs::copy_options::overwrite_existing);
  } else {
    std::ofstream(out / "metrics.jsonl");
  }

  RunManifest m;
  m.subcommand = "train";
  m.resolved = a.config.to_json();
  m.resolved["model"] = {{"layers", a.layers}, {"heads", a.heads}, {"dim", a.dim},
                         {"ffn", a.ffn},       {"max_position", a.max_position}, {"init_seed", a.init_seed}};
  m.paths = {{"corpus", a.corpus}, {"model_out", a.model_out}};
  m.seed = a.config.seed;
  m.checksums = {{"weights.bin", checksum_of(out / "weights.bin")},
                 {"manifest.txt", checksum_of(out / "manifest.txt")},
                 {"tokenizer.json", checksum_of(out / "tokenizer.json")},
                 {"corpus.jsonl", checksum_of(fs::path(a.corpus) / "corpus.jsonl")}};
  m.deterministic = m.checksums["weights.bin"].get<std::string>();
  m.argv = argv;
  m.write(out / "run_manifest.json");

  json summary{{"model_out", a.model_out},
               {"best_step", result.best_step},
               {"final_loss", result.loss_curve.empty() ? 0.0 : result.loss_curve.back()},
               {"seconds", seconds},
               {"weights_checksum", m.deterministic}};
  if (!result.validation.empty()) summary["validation"] = result.validation.back().to_json();
  std::cout << summary.dump() << std::endl;
  return kExitOk;
}

// ---- answer ----

struct AnswerArgs {
  std::string model;
  std::string question;
  std::string contexts_file;
  double sigma = 0.15;
  bool greedy = false;
  double temperature = 0.0;
  std::uint64_t seed = 0;
  std::size_t max_tokens = 16;
  std::string manifest = "answer.manifest.json";
};

inline int answer_cmd(const AnswerArgs& a, const std::vector<std::string>& argv) {
  const auto model = load_checkpoint<float>(a.model);
  const auto tok = model_tokenizer(a.model);
  const auto q = tok.tokenize(a.question);
  if (q.empty()) throw InvalidArgument("--question is empty");
  std::vector<std::vector<TokenId>> contexts;
  {
    std::ifstream in(a.contexts_file);
    if (!in) throw IoError("cannot open " + a.contexts_file);
    std::string line;
    while (std::getline(in, line)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      contexts.push_back(tok.tokenize(line));
    }
  }
  PipelineOptions opt;
  opt.sigma = a.sigma;
  opt.generation.max_tokens = a.max_tokens;
  opt.generation.temperature = a.greedy ? 0.0 : a.temperature;
  opt.generation.seed = a.seed;
  const auto r = answer(model, q, contexts, opt);

  json out{{"answer", tok.detokenize(r.answer)},
           {"answer_ids", r.answer},
           {"scores", r.assessment.scores},
           {"kept", r.assessment.kept},
           {"fallback_applied", r.assessment.fallback_applied},
           {"timing",
            {{"prefill_seconds", r.timing.prefill_seconds},
             {"assess_seconds", r.timing.assess_seconds},
             {"decode_seconds", r.timing.decode_seconds},
             {"prefill_tokens", r.timing.prefill_tokens},
             {"decode_tokens", r.timing.decode_tokens}}}};
  json stable = out;
  stable.erase("timing");

  RunManifest m;
  m.subcommand = "answer";
  m.resolved = {{"question", a.question},   {"sigma", a.sigma},           {"greedy", a.greedy},
                {"temperature", opt.generation.temperature}, {"max_tokens", a.max_tokens},
                {"score_mode", "raw_good"}, {"fallback", "argmax"},       {"suffix_rule", "kept_contexts"}};
  m.paths = {{"model", a.model}, {"contexts_file", a.contexts_file}};
  m.seed = a.seed;
  m.checksums = {{"weights.bin", checksum_of(fs::path(a.model) / "weights.bin")},
                 {"contexts_file", checksum_of(a.contexts_file)}};
  m.deterministic = checksum_of_text(stable.dump());
  m.argv = argv;
  m.write(a.manifest);
  std::cout << out.dump() << std::endl;
  return kExitOk;
}

// ---- sweep ----

struct SweepArgs {
  std::string model;
  std::string eval;
  std::string sigmas = "0,0.05,0.1,0.15,0.2,0.25,0.3";
  std::string out_csv;
  std::string split = "test";
  std::size_t max_examples = 0;
  std::size_t ds_examples = 8;
};

inline int sweep_cmd(const SweepArgs& a, const std::vector<std::string>& argv) {
  const auto model = load_checkpoint<float>(a.model);
  const auto corpus = load_corpus(a.eval);
  const auto sigmas = parse_list<double>(a.sigmas, "--sigmas");
  std::span<const RagExample> split;
  if (a.split == "test") split = corpus.test();
  else if (a.split == "validation") split = corpus.validation();
  else if (a.split == "train") split = corpus.train();
  else throw CLI::ValidationError("--split", "expected test, validation or train");
  SweepOptions opt;
  opt.max_examples = a.max_examples;
  opt.ds_examples = a.ds_examples;
  progress("sweeping " + std::to_string(sigmas.size()) + " thresholds");
  const auto rows = threshold_sweep(model, split, sigmas, opt);
  const auto golden = golden_filter_quality(model, split, opt);

  {
    std::ofstream csv(a.out_csv);
    if (!csv) throw IoError("cannot write " + a.out_csv);
    write_sweep_csv(csv, rows);
  }
  json j{{"rows", sweep_json(rows)},
         {"golden", {{"em", golden.em}, {"token_f1", golden.token_f1}, {"avg_k", golden.avg_k}}},
         {"environment", environment_note()}};
  const auto json_path = sibling(a.out_csv, ".json");
  std::ofstream(json_path) << j.dump(2) << "\n";

  json stable = j;
  for (auto& r : stable["rows"]) r.erase("ds_tps");
  stable.erase("environment");
  RunManifest m;
  m.subcommand = "sweep";
  m.resolved = {{"sigmas", sigmas}, {"split", a.split}, {"max_examples", a.max_examples},
                {"ds_examples", a.ds_examples}, {"max_answer_tokens", opt.max_answer_tokens},
                {"ds_output_len", opt.ds_output_len}};
  m.paths = {{"model", a.model}, {"eval", a.eval}, {"out_csv", a.out_csv}, {"json", json_path.string()}};
  m.checksums = {{"weights.bin", checksum_of(fs::path(a.model) / "weights.bin")},
                 {"corpus.jsonl", checksum_of(fs::path(a.eval) / "corpus.jsonl")}};
  m.deterministic = checksum_of_text(stable.dump());
  m.argv = argv;
  m.write(sibling(a.out_csv, ".manifest.json"));
  std::cout << j.dump() << std::endl;
  return kExitOk;
}

// ---- bench ----

struct BenchArgs {
  std::string model;
  std::size_t contexts = 10;
  std::size_t context_len = 64;
  std::size_t question_len = 8;
  std::string lens = "64";
  std::string ks = "2,10";
  std::size_t trials = 5;
  std::size_t warmup = 2;
  std::uint64_t seed = 0;
  std::string out_csv;
};

inline int bench_cmd(const BenchArgs& a, const std::vector<std::string>& argv) {
  const auto model = load_checkpoint<float>(a.model);
  const auto lens = parse_list<std::size_t>(a.lens, "--lens");
  const auto ks = parse_list<std::size_t>(a.ks, "--ks");
  if (a.contexts == 0 || a.context_len == 0 || a.question_len == 0) {
    throw CLI::ValidationError("--contexts/--context-len/--question-len", "must be positive");
  }
  // Random payload tokens: timing does not depend on content.
  std::mt19937_64 rng(a.seed);
  const auto vocab = model.config.vocab_size;
  if (vocab <= ReservedTokens::kCount) throw InvalidArgument("model vocabulary has no payload tokens");
  auto draw = [&](std::size_t n) {
    std::vector<TokenId> v(n);
    for (auto& t : v) t = static_cast<TokenId>(ReservedTokens::kCount + detail::uniform_below(rng, vocab - ReservedTokens::kCount));
    return v;
  };
  const auto q = draw(a.question_len);
  std::vector<std::vector<TokenId>> ctx;
  for (std::size_t i = 0; i < a.contexts; ++i) ctx.push_back(draw(a.context_len));

  TimingProtocol protocol{a.warmup, a.trials};
  BenchReport report;
  report.environment = environment_note();
  progress("encode benchmark");
  report.encode.push_back(bench_encode(model, q, ctx, EncodeMode::kDense, protocol));
  report.encode.push_back(bench_encode(model, q, ctx, EncodeMode::kParallel, protocol));
  progress("decode benchmark");
  const auto cache = SegmentedCache<float>::build(model, q, ctx);
  report.decode = bench_decode(model, cache, ks, lens, protocol);

  {
    std::ofstream csv(a.out_csv);
    if (!csv) throw IoError("cannot write " + a.out_csv);
    write_bench_csv(csv, report);
  }
  const auto j = bench_json(report);
  const auto json_path = sibling(a.out_csv, ".json");
  std::ofstream(json_path) << j.dump(2) << "\n";

  json stable = json::array();
  for (const auto& d : report.decode) stable.push_back({d.k, d.output_len, detail::hex64(d.output_checksum)});
  const SegmentPlan plan{a.question_len, std::vector<std::size_t>(a.contexts, a.context_len), 0};
  json pairs{{"dense", dense_pair_count(plan.total())}, {"parallel", block_mask_pair_count(plan)}};

  RunManifest m;
  m.subcommand = "bench";
  m.resolved = {{"contexts", a.contexts}, {"context_len", a.context_len}, {"question_len", a.question_len},
                {"lens", lens},           {"ks", ks},                   {"trials", a.trials},
                {"warmup", a.warmup},     {"attention_pairs", pairs}};
  m.paths = {{"model", a.model}, {"out_csv", a.out_csv}, {"json", json_path.string()}};
  m.seed = a.seed;
  m.checksums = {{"weights.bin", checksum_of(fs::path(a.model) / "weights.bin")}};
  m.deterministic = checksum_of_text(stable.dump());
  m.argv = argv;
  m.write(sibling(a.out_csv, ".manifest.json"));
  std::cout << j.dump() << std::endl;
  return kExitOk;
}

// ---- label ----

struct LabelArgs {
  std::string in;
  std::string out;
  std::string rater;
  std::string critic;
  bool mock = false;
  std::size_t max_in_flight = 4;
  int retry_backoff_ms = 200;
};

inline int label_cmd(const LabelArgs& a, const std::vector<std::string>& argv) {
  auto records = read_labeling_jsonl(a.in);
  std::unique_ptr<RaterBackend> rater, critic;
  if (a.mock) {
    rater = make_mock_backend(a.rater);
    critic = make_mock_backend(a.critic);
  } else {
    rater = make_http_backend(HttpBackendConfig::from_env(a.rater));
    critic = make_http_backend(HttpBackendConfig::from_env(a.critic));
  }
  LabelingOptions opt;
  opt.max_in_flight = a.max_in_flight;
  opt.retry.initial_backoff = std::chrono::milliseconds(a.retry_backoff_ms);
  progress("labeling " + std::to_string(records.size()) + " records");
  records = run_two_round(*rater, *critic, std::move(records), opt);
  write_labeling_jsonl(a.out, records);
  const auto report = label_report(records);
  const auto report_path = sibling(a.out, ".report.json");
  std::ofstream(report_path) << report.to_json().dump(2) << "\n";

  RunManifest m;
  m.subcommand = "label";
  m.resolved = {{"rater", a.rater},
                {"critic", a.critic},
                {"mock", a.mock},
                {"max_in_flight", a.max_in_flight},
                {"max_attempts", opt.retry.max_attempts},
                {"retry_backoff_ms", a.retry_backoff_ms}};
  if (!a.mock) {
    const char* url = std::getenv("LABELER_BASE_URL");
    m.resolved["base_url"] = url ? url : "";
  }
  m.paths = {{"in", a.in}, {"out", a.out}, {"report", report_path.string()}};
  m.checksums = {{"in", checksum_of(a.in)}, {"out", checksum_of(a.out)}};
  m.deterministic = m.checksums["out"].get<std::string>();
  m.argv = argv;
  m.write(sibling(a.out, ".manifest.json"));
  std::cout << report.to_json().dump() << std::endl;
  return kExitOk;
}

}  // namespace cli

inline int run_cli(int argc, char** argv) {
  using namespace cli;
  CLI::App app{"Sparse RAG toolkit: synthetic data, training, filtered decoding, sweeps, benchmarks, labeling"};
  app.require_subcommand(1);
  std::vector<std::string> args(argv, argv + argc);

  GenDataArgs gd;
  std::uint64_t gd_seed = 0;
  std::size_t gd_n = 0;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic retrieval QA corpus");
  gen->add_option("--config", gd.config_path, "JSON task config (defaults otherwise)")->check(CLI::ExistingFile);
  gen->add_option("--out", gd.out, "Output directory")->required();
  auto* gd_seed_opt = gen->add_option("--seed", gd_seed, "Override the config seed");
  auto* gd_n_opt = gen->add_option("--num-examples", gd_n, "Override the example count")->check(CLI::PositiveNumber);

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "Train the assessment + generation mixture");
  trn->add_option("--corpus", tr.corpus, "Corpus directory from gen-data")->required()->check(CLI::ExistingDirectory);
  trn->add_option("--model-out", tr.model_out, "Output model directory")->required();
  trn->add_option("--steps", tr.config.steps, "Optimizer steps")->capture_default_str();
  trn->add_option("--lr", tr.config.learning_rate, "Peak learning rate")->capture_default_str()->check(CLI::PositiveNumber);
  trn->add_option("--mixture", tr.config.mixture_weight_assessment, "Probability of an assessment example")
      ->capture_default_str()
      ->check(CLI::Range(0.0, 1.0));
  trn->add_option("--seed", tr.config.seed, "Seed for init, sampling and dropout")->capture_default_str();
  trn->add_option("--batch-size", tr.config.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
  trn->add_option("--dropout", tr.config.dropout)->capture_default_str()->check(CLI::Range(0.0, 0.999));
  trn->add_option("--eval-every", tr.config.checkpoint_every, "Validation interval in steps (0: end only)")
      ->capture_default_str();
  trn->add_option("--eval-examples", tr.config.eval_examples)->capture_default_str();
  trn->add_option("--threads", tr.config.threads)->capture_default_str()->check(CLI::PositiveNumber);
  trn->add_option("--layers", tr.layers)->capture_default_str()->check(CLI::PositiveNumber);
  trn->add_option("--heads", tr.heads)->capture_default_str()->check(CLI::PositiveNumber);
  trn->add_option("--dim", tr.dim)->capture_default_str()->check(CLI::PositiveNumber);
  trn->add_option("--ffn", tr.ffn)->capture_default_str()->check(CLI::PositiveNumber);
  trn->add_option("--max-position", tr.max_position)->capture_default_str()->check(CLI::PositiveNumber);

  AnswerArgs an;
  auto* ans = app.add_subcommand("answer", "Answer one question from a set of contexts");
  ans->add_option("--model", an.model)->required()->check(CLI::ExistingDirectory);
  ans->add_option("--question", an.question, "Whitespace-separated symbols")->required();
  ans->add_option("--contexts-file", an.contexts_file, "One context per line")->required()->check(CLI::ExistingFile);
  ans->add_option("--sigma", an.sigma)->capture_default_str()->check(CLI::Range(0.0, 1.0));
  auto* greedy = ans->add_flag("--greedy", an.greedy, "Greedy decoding (default)");
  ans->add_option("--temperature", an.temperature)->check(CLI::NonNegativeNumber)->excludes(greedy);
  ans->add_option("--seed", an.seed)->capture_default_str();
  ans->add_option("--max-tokens", an.max_tokens)->capture_default_str()->check(CLI::PositiveNumber);
  ans->add_option("--manifest", an.manifest, "Where to write the run manifest")->capture_default_str();

  SweepArgs sw;
  auto* swp = app.add_subcommand("sweep", "Sweep the relevance threshold");
  swp->add_option("--model", sw.model)->required()->check(CLI::ExistingDirectory);
  swp->add_option("--eval", sw.eval, "Corpus directory")->required()->check(CLI::ExistingDirectory);
  swp->add_option("--sigmas", sw.sigmas, "Comma-separated thresholds")->capture_default_str();
  swp->add_option("--out-csv", sw.out_csv)->required();
  swp->add_option("--split", sw.split)->capture_default_str();
  swp->add_option("--max-examples", sw.max_examples, "0: whole split")->capture_default_str();
  swp->add_option("--ds-examples", sw.ds_examples, "Examples timed per sigma")->capture_default_str();

  BenchArgs be;
  auto* bch = app.add_subcommand("bench", "Encoding and decoding speed");
  bch->add_option("--model", be.model)->required()->check(CLI::ExistingDirectory);
  bch->add_option("--contexts", be.contexts)->capture_default_str();
  bch->add_option("--context-len", be.context_len)->capture_default_str();
  bch->add_option("--question-len", be.question_len)->capture_default_str();
  bch->add_option("--lens", be.lens, "Comma-separated output lengths")->capture_default_str();
  bch->add_option("--ks", be.ks, "Comma-separated active context counts")->capture_default_str();
  bch->add_option("--trials", be.trials)->capture_default_str()->check(CLI::Range(5, 1000));
  bch->add_option("--warmup", be.warmup)->capture_default_str();
  bch->add_option("--seed", be.seed)->capture_default_str();
  bch->add_option("--out-csv", be.out_csv)->required();

  LabelArgs lb;
  auto* lab = app.add_subcommand("label", "Two-round relevance labeling");
  lab->add_option("--in", lb.in, "JSONL records")->required()->check(CLI::ExistingFile);
  lab->add_option("--out", lb.out)->required();
  lab->add_option("--rater", lb.rater, "Rater model (or mock name with --mock)")->required();
  lab->add_option("--critic", lb.critic, "Critic model (or mock name with --mock)")->required();
  lab->add_flag("--mock", lb.mock, "Use the built-in mocks: always-1, always-0, echo, flip, keyword");
  lab->add_option("--max-in-flight", lb.max_in_flight)->capture_default_str()->check(CLI::PositiveNumber);
  lab->add_option("--retry-backoff-ms", lb.retry_backoff_ms)->capture_default_str()->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      if (*gd_seed_opt) gd.seed = gd_seed;
      if (*gd_n_opt) gd.num_examples = gd_n;
      return gen_data(gd, args);
    }
    if (trn->parsed()) return train_cmd(tr, args);
    if (ans->parsed()) return answer_cmd(an, args);
    if (swp->parsed()) return sweep_cmd(sw, args);
    if (bch->parsed()) return bench_cmd(be, args);
    if (lab->parsed()) return label_cmd(lb, args);
  } catch (const CLI::ValidationError& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace sparse_rag
