#pragma once

// Synthetic key/value retrieval task, its tokenizer, the JSONL corpus format
// and the two training layouts (assessment and generation).
//
// Every example asks for the value stored under one key. The question is the
// question-form symbol of that key ("q7"); each context is a run of noise
// symbols with exactly one "k<key> v<value>" pair inserted. Relevant contexts
// carry the asked key and the answer value, distractors carry other keys.

#include "json.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "sparse_rag/attention_layout.hpp"
#include "sparse_rag/model.hpp"

namespace sparse_rag {

struct ReservedTokens {
  static constexpr TokenId kPad = 0;
  static constexpr TokenId kEos = 1;
  static constexpr TokenId kControlAssessment = 2;
  static constexpr TokenId kControlGeneration = 3;
  static constexpr TokenId kGood = 4;
  static constexpr TokenId kBad = 5;
  static constexpr std::size_t kCount = 6;
};

class Tokenizer {
 public:
  static constexpr const char* kReservedSymbols[ReservedTokens::kCount] = {"<pad>", "<eos>", "<assess>",
                                                                          "<gen>", "<good>", "<bad>"};

  Tokenizer() : Tokenizer(std::vector<std::string>{}) {}

  explicit Tokenizer(std::vector<std::string> payload_symbols) {
    for (const auto* s : kReservedSymbols) add(s);
    for (auto& s : payload_symbols) {
      if (s.empty() || s.find_first_of(" \t\n\r") != std::string::npos) {
        throw InvalidArgument("Tokenizer: symbols must be non-empty and free of whitespace");
      }
      if (index_.count(s)) throw InvalidArgument("Tokenizer: duplicate symbol " + s);
      add(std::move(s));
    }
  }

  std::size_t vocab_size() const { return symbols_.size(); }
  const std::vector<std::string>& symbols() const { return symbols_; }

  static bool is_reserved(TokenId id) { return id >= 0 && static_cast<std::size_t>(id) < ReservedTokens::kCount; }

  // Whitespace-separated payload symbols to ids. Reserved symbols are
  // rejected: they only enter sequences through the formatting functions.
  std::vector<TokenId> tokenize(std::string_view text) const {
    std::vector<TokenId> out;
    std::istringstream ss{std::string(text)};
    std::string word;
    while (ss >> word) {
      auto it = index_.find(word);
      if (it == index_.end()) throw InvalidArgument("Tokenizer: unknown symbol '" + word + "'");
      if (is_reserved(it->second)) throw InvalidArgument("Tokenizer: reserved symbol '" + word + "' in payload text");
      out.push_back(it->second);
    }
    return out;
  }

  std::string detokenize(std::span<const TokenId> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const auto id = ids[i];
      if (id < 0 || static_cast<std::size_t>(id) >= symbols_.size()) {
        throw InvalidArgument("Tokenizer: id " + std::to_string(id) + " outside vocabulary");
      }
      if (i) out += ' ';
      out += symbols_[static_cast<std::size_t>(id)];
    }
    return out;
  }

  ModelConfig model_config(std::size_t layers, std::size_t heads, std::size_t dim, std::size_t ffn,
                           std::size_t max_position) const {
    auto c = ModelConfig::make(layers, heads, dim, ffn, vocab_size(), max_position);
    c.pad_id = ReservedTokens::kPad;
    c.eos_id = ReservedTokens::kEos;
    c.control_assessment_id = ReservedTokens::kControlAssessment;
    c.control_generation_id = ReservedTokens::kControlGeneration;
    c.rate_good_id = ReservedTokens::kGood;
    c.rate_bad_id = ReservedTokens::kBad;
    return c;
  }

  nlohmann::json to_json() const {
    return nlohmann::json{{"symbols", std::vector<std::string>(symbols_.begin() + ReservedTokens::kCount, symbols_.end())}};
  }
  static Tokenizer from_json(const nlohmann::json& j) { return Tokenizer(j.at("symbols").get<std::vector<std::string>>()); }

 private:
  void add(std::string s) {
    index_.emplace(s, static_cast<TokenId>(symbols_.size()));
    symbols_.push_back(std::move(s));
  }

  std::vector<std::string> symbols_;
  std::unordered_map<std::string, TokenId> index_;
};

struct SynthTaskConfig {
  std::size_t vocab_payload = 96;
  std::size_t num_keys = 16;
  std::size_t num_values = 32;
  std::size_t contexts_per_example = 10;
  double relevant_fraction = 0.2;
  std::size_t context_noise_len = 4;
  std::size_t num_examples = 6250;
  std::uint64_t seed = 1234;

  std::size_t relevant_per_example() const {
    const auto r = static_cast<std::size_t>(std::llround(relevant_fraction * static_cast<double>(contexts_per_example)));
    return std::max<std::size_t>(1, std::min(r, contexts_per_example));
  }
  std::size_t noise_symbols() const {
    const std::size_t used = 2 * num_keys + num_values;
    return vocab_payload > used ? vocab_payload - used : 0;
  }

  void validate() const {
    if (contexts_per_example == 0) throw InvalidArgument("SynthTaskConfig: contexts_per_example must be >= 1");
    if (!(relevant_fraction > 0.0 && relevant_fraction <= 1.0)) {
      throw InvalidArgument("SynthTaskConfig: relevant_fraction must lie in (0, 1]");
    }
    if (num_keys == 0 || num_values == 0) throw InvalidArgument("SynthTaskConfig: need at least one key and value");
    if (vocab_payload < 2 * num_keys + num_values + (context_noise_len > 0 ? 1 : 0)) {
      throw InvalidArgument("SynthTaskConfig: vocab_payload too small for num_keys + num_values");
    }
    const std::size_t distractors = contexts_per_example - relevant_per_example();
    if (distractors > 0 && num_keys < distractors + 1) {
      throw InvalidArgument("SynthTaskConfig: num_keys too small for distinct distractor keys");
    }
  }

  nlohmann::json to_json() const {
    return {{"vocab_payload", vocab_payload},         {"num_keys", num_keys},
            {"num_values", num_values},               {"contexts_per_example", contexts_per_example},
            {"relevant_fraction", relevant_fraction}, {"context_noise_len", context_noise_len},
            {"num_examples", num_examples},           {"seed", seed}};
  }
  static SynthTaskConfig from_json(const nlohmann::json& j) {
    SynthTaskConfig c;
    c.vocab_payload = j.value("vocab_payload", c.vocab_payload);
    c.num_keys = j.value("num_keys", c.num_keys);
    c.num_values = j.value("num_values", c.num_values);
    c.contexts_per_example = j.value("contexts_per_example", c.contexts_per_example);
    c.relevant_fraction = j.value("relevant_fraction", c.relevant_fraction);
    c.context_noise_len = j.value("context_noise_len", c.context_noise_len);
    c.num_examples = j.value("num_examples", c.num_examples);
    c.seed = j.value("seed", c.seed);
    return c;
  }
};

// Where each symbol family starts in the token id space.
struct SynthVocabulary {
  TokenId question_key_base = 0;
  TokenId context_key_base = 0;
  TokenId value_base = 0;
  TokenId noise_base = 0;
  std::size_t num_keys = 0, num_values = 0, num_noise = 0;

  static SynthVocabulary for_task(const SynthTaskConfig& c) {
    SynthVocabulary v;
    v.num_keys = c.num_keys;
    v.num_values = c.num_values;
    v.num_noise = c.noise_symbols();
    v.question_key_base = static_cast<TokenId>(ReservedTokens::kCount);
    v.context_key_base = v.question_key_base + static_cast<TokenId>(c.num_keys);
    v.value_base = v.context_key_base + static_cast<TokenId>(c.num_keys);
    v.noise_base = v.value_base + static_cast<TokenId>(c.num_values);
    return v;
  }

  Tokenizer tokenizer() const {
    std::vector<std::string> s;
    for (std::size_t i = 0; i < num_keys; ++i) s.push_back("q" + std::to_string(i));
    for (std::size_t i = 0; i < num_keys; ++i) s.push_back("k" + std::to_string(i));
    for (std::size_t i = 0; i < num_values; ++i) s.push_back("v" + std::to_string(i));
    for (std::size_t i = 0; i < num_noise; ++i) s.push_back("n" + std::to_string(i));
    return Tokenizer(std::move(s));
  }
};

struct RagExample {
  std::vector<TokenId> question;
  std::vector<std::vector<TokenId>> contexts;
  std::vector<TokenId> answer;
  std::optional<std::vector<int>> labels;

  void validate() const {
    if (contexts.empty()) throw InvalidArgument("RagExample: needs at least one context");
    if (labels && labels->size() != contexts.size()) throw InvalidArgument("RagExample: labels/contexts length mismatch");
  }

  bool operator==(const RagExample&) const = default;
};

inline nlohmann::json to_json(const RagExample& e) {
  nlohmann::json j{{"question", e.question}, {"contexts", e.contexts}, {"answer", e.answer}};
  j["labels"] = e.labels ? nlohmann::json(*e.labels) : nlohmann::json(nullptr);
  return j;
}

inline RagExample example_from_json(const nlohmann::json& j) {
  RagExample e;
  e.question = j.at("question").get<std::vector<TokenId>>();
  e.contexts = j.at("contexts").get<std::vector<std::vector<TokenId>>>();
  e.answer = j.at("answer").get<std::vector<TokenId>>();
  if (j.contains("labels") && !j["labels"].is_null()) e.labels = j["labels"].get<std::vector<int>>();
  e.validate();
  return e;
}

struct SplitBoundaries {
  std::size_t train_end = 0;
  std::size_t validation_end = 0;
  std::size_t total = 0;

  // 8:1:1
  static SplitBoundaries for_count(std::size_t n) { return {n * 8 / 10, n * 8 / 10 + n / 10, n}; }
};

struct Corpus {
  std::vector<RagExample> examples;
  SplitBoundaries splits;

  std::span<const RagExample> train() const { return {examples.data(), splits.train_end}; }
  std::span<const RagExample> validation() const {
    return {examples.data() + splits.train_end, splits.validation_end - splits.train_end};
  }
  std::span<const RagExample> test() const {
    return {examples.data() + splits.validation_end, splits.total - splits.validation_end};
  }
};

inline Corpus generate_corpus(const SynthTaskConfig& config) {
  config.validate();
  const auto vocab = SynthVocabulary::for_task(config);
  const std::size_t n_ctx = config.contexts_per_example;
  const std::size_t n_rel = config.relevant_per_example();
  std::mt19937_64 rng(config.seed);
  auto below = [&](std::size_t n) { return static_cast<std::size_t>(detail::uniform_below(rng, n)); };

  Corpus corpus;
  corpus.examples.reserve(config.num_examples);
  std::vector<std::size_t> key_pool(config.num_keys);
  for (std::size_t e = 0; e < config.num_examples; ++e) {
    // Partial Fisher-Yates: the first key is asked, the rest are distractors.
    for (std::size_t i = 0; i < key_pool.size(); ++i) key_pool[i] = i;
    const std::size_t needed = 1 + (n_ctx - n_rel);
    for (std::size_t i = 0; i < needed; ++i) std::swap(key_pool[i], key_pool[i + below(key_pool.size() - i)]);
    const std::size_t key = key_pool[0];
    const std::size_t value = below(config.num_values);

    auto make_context = [&](std::size_t k, std::size_t v) {
      std::vector<TokenId> ctx;
      for (std::size_t i = 0; i < config.context_noise_len; ++i) {
        ctx.push_back(vocab.noise_base + static_cast<TokenId>(below(vocab.num_noise)));
      }
      const auto offset = static_cast<std::ptrdiff_t>(below(config.context_noise_len + 1));
      const TokenId pair[2] = {vocab.context_key_base + static_cast<TokenId>(k),
                               vocab.value_base + static_cast<TokenId>(v)};
      ctx.insert(ctx.begin() + offset, pair, pair + 2);
      return ctx;
    };

    std::vector<std::vector<TokenId>> contexts;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n_rel; ++i) {
      contexts.push_back(make_context(key, value));
      labels.push_back(1);
    }
    for (std::size_t i = 0; i < n_ctx - n_rel; ++i) {
      contexts.push_back(make_context(key_pool[1 + i], below(config.num_values)));
      labels.push_back(0);
    }
    for (std::size_t i = n_ctx; i > 1; --i) {
      const std::size_t j = below(i);
      std::swap(contexts[i - 1], contexts[j]);
      std::swap(labels[i - 1], labels[j]);
    }

    RagExample ex;
    ex.question = {vocab.question_key_base + static_cast<TokenId>(key)};
    ex.contexts = std::move(contexts);
    ex.answer = {vocab.value_base + static_cast<TokenId>(value)};
    ex.labels = std::move(labels);
    corpus.examples.push_back(std::move(ex));
  }
  corpus.splits = SplitBoundaries::for_count(corpus.examples.size());
  return corpus;
}

// Keeps only the listed contexts (and their labels), in the listed order.
inline RagExample restrict_contexts(const RagExample& e, std::span<const std::size_t> indices) {
  RagExample out;
  out.question = e.question;
  out.answer = e.answer;
  if (e.labels) out.labels.emplace();
  for (auto i : indices) {
    if (i >= e.contexts.size()) throw std::out_of_range("restrict_contexts: index out of range");
    out.contexts.push_back(e.contexts[i]);
    if (e.labels) out.labels->push_back((*e.labels)[i]);
  }
  return out;
}

// A training sequence. Row i of the model output is scored against
// target_ids[i] wherever target_mask[i] is set.
struct FormattedExample {
  std::vector<TokenId> tokens;
  std::vector<Position> positions;
  std::vector<std::uint8_t> target_mask;
  std::vector<TokenId> target_ids;
  SegmentPlan plan;
  std::optional<Visibility> visibility;  // empty means plain causal
};

// question | context_i | Control_Assessment | Good-or-Bad. Only the
// Control_Assessment row carries a target: the rate token that follows it.
inline FormattedExample format_assessment(const RagExample& e, std::size_t context_index,
                                          std::optional<int> label = std::nullopt) {
  if (context_index >= e.contexts.size()) throw std::out_of_range("format_assessment: context index out of range");
  if (!label) {
    if (!e.labels) throw InvalidArgument("format_assessment: example has no labels");
    label = (*e.labels)[context_index];
  }
  const auto& ctx = e.contexts[context_index];
  FormattedExample f;
  f.plan = SegmentPlan{e.question.size(), {ctx.size()}, 2};
  f.tokens = e.question;
  f.tokens.insert(f.tokens.end(), ctx.begin(), ctx.end());
  f.tokens.push_back(ReservedTokens::kControlAssessment);
  f.tokens.push_back(*label ? ReservedTokens::kGood : ReservedTokens::kBad);
  f.positions = assign_position_ids(f.plan);
  f.target_mask.assign(f.tokens.size(), 0);
  f.target_ids.assign(f.tokens.size(), ReservedTokens::kPad);
  const std::size_t ctrl_row = f.tokens.size() - 2;
  f.target_mask[ctrl_row] = 1;
  f.target_ids[ctrl_row] = f.tokens.back();
  return f;
}

// question | context_1 .. context_N | Control_Generation | answer, under the
// block mask. Rows from Control_Generation onward predict answer then eos.
inline FormattedExample format_generation(const RagExample& e) {
  if (e.answer.empty()) throw InvalidArgument("format_generation: empty answer");
  e.validate();
  FormattedExample f;
  f.plan.question_len = e.question.size();
  for (const auto& c : e.contexts) f.plan.context_lens.push_back(c.size());
  f.plan.suffix_len = 1 + e.answer.size();
  f.tokens = e.question;
  for (const auto& c : e.contexts) f.tokens.insert(f.tokens.end(), c.begin(), c.end());
  f.tokens.push_back(ReservedTokens::kControlGeneration);
  f.tokens.insert(f.tokens.end(), e.answer.begin(), e.answer.end());
  f.positions = assign_position_ids(f.plan);
  f.visibility = build_block_mask(f.plan);
  f.target_mask.assign(f.tokens.size(), 0);
  f.target_ids.assign(f.tokens.size(), ReservedTokens::kPad);
  const std::size_t start = f.tokens.size() - f.plan.suffix_len;
  for (std::size_t i = 0; i < e.answer.size(); ++i) {
    f.target_mask[start + i] = 1;
    f.target_ids[start + i] = e.answer[i];
  }
  f.target_mask.back() = 1;
  f.target_ids.back() = ReservedTokens::kEos;
  return f;
}

// --- JSONL corpus files -----------------------------------------------------

inline void write_jsonl(const std::filesystem::path& path, std::span<const RagExample> examples) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& e : examples) out << to_json(e).dump() << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::vector<RagExample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<RagExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(example_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& ex) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

inline std::uint64_t file_checksum(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  detail::Fnv1a h;
  char buf[1 << 14];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) h.update(buf, static_cast<std::size_t>(in.gcount()));
  return h.digest();
}

// Corpus directory: corpus.jsonl, tokenizer.json and manifest.json with the
// generating config and split boundaries.
inline void save_corpus(const std::filesystem::path& dir, const Corpus& corpus, const SynthTaskConfig& config) {
  std::filesystem::create_directories(dir);
  write_jsonl(dir / "corpus.jsonl", corpus.examples);
  const auto tok = SynthVocabulary::for_task(config).tokenizer();
  std::ofstream(dir / "tokenizer.json") << tok.to_json().dump(2) << "\n";
  nlohmann::json manifest{
      {"config", config.to_json()},
      {"count", corpus.examples.size()},
      {"splits",
       {{"train", {0, corpus.splits.train_end}},
        {"validation", {corpus.splits.train_end, corpus.splits.validation_end}},
        {"test", {corpus.splits.validation_end, corpus.splits.total}}}},
      {"corpus_checksum", detail::hex64(file_checksum(dir / "corpus.jsonl"))},
  };
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw IoError("cannot write corpus manifest in " + dir.string());
}

inline Corpus load_corpus(const std::filesystem::path& dir) {
  Corpus c;
  c.examples = read_jsonl(dir / "corpus.jsonl");
  std::ifstream in(dir / "manifest.json");
  if (!in) {
    c.splits = SplitBoundaries::for_count(c.examples.size());
    return c;
  }
  const auto m = nlohmann::json::parse(in);
  c.splits.train_end = m.at("splits").at("train").at(1).get<std::size_t>();
  c.splits.validation_end = m.at("splits").at("validation").at(1).get<std::size_t>();
  c.splits.total = m.at("splits").at("test").at(1).get<std::size_t>();
  if (c.splits.total != c.examples.size()) throw IoError("corpus manifest count does not match corpus.jsonl");
  return c;
}

inline Tokenizer load_tokenizer(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  return Tokenizer::from_json(nlohmann::json::parse(in));
}

}  // namespace sparse_rag
