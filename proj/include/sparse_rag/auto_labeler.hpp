#pragma once

// Two-round relevance labeling with LLM raters: a rater scores each document,
// a critic reviews that score. Backends are pluggable; deterministic mocks are
// included for tests and offline runs.

#include <atomic>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "sparse_rag/metrics.hpp"
#include "sparse_rag/types.hpp"

namespace sparse_rag {

inline constexpr const char* kRound1Template =
    "You are now doing a reading comprehension task. It is important that you be as thorough, detail-oriented, "
    "and accurate as possible in your response.\n"
    "\n"
    "You are given a question, a set of accepted answers, a document and its title. The document does not "
    "necessarily contain the right answer to the question.\n"
    "\n"
    "You should read the title and the document and then check if they provide one of the correct answers to "
    "the question.\n"
    "\n"
    "If the title and document together contain the correct answer to the question, output a score of 1.0, "
    "otherwise output a score of 0.0.\n"
    "\n"
    "question: <question>\n"
    "accepted answers: <answers>\n"
    "title: <title>\n"
    "document: <document>\n"
    "output:";

inline constexpr const char* kRound2Template =
    "Your job is to correct another model's performance on a reading comprehension task.\n"
    "\n"
    "The model was given a question, a set of accepted answers, a document and its title. The document and "
    "title do not necessarily contain the right answer. The model was instructed to output a score of 1.0 if "
    "the document contains the answer, and a score of 0.0 otherwise.\n"
    "\n"
    "You will be given the same information as the other model along with its output. You should read the "
    "title and document and then check if they provide one of the correct answers to the question.\n"
    "\n"
    "Then check if you agree with the previous model's output.\n"
    "If you agree, output the same score unchanged.\n"
    "If you disagree, output the corrected score.\n"
    "Your output should be as accurate as possible.\n"
    "\n"
    "question: <question>\n"
    "accepted answers: <answers>\n"
    "title: <title>\n"
    "document: <document>\n"
    "previous model's score: <score>\n"
    "output:";

enum class RecordStatus { kPending, kOk, kUnparseableRound1, kUnparseableRound2, kFailed };

inline const char* to_string(RecordStatus s) {
  switch (s) {
    case RecordStatus::kPending: return "pending";
    case RecordStatus::kOk: return "ok";
    case RecordStatus::kUnparseableRound1: return "unparseable_round1";
    case RecordStatus::kUnparseableRound2: return "unparseable_round2";
    case RecordStatus::kFailed: return "failed";
  }
  return "?";
}

inline RecordStatus record_status_from_string(const std::string& s) {
  for (auto st : {RecordStatus::kPending, RecordStatus::kOk, RecordStatus::kUnparseableRound1,
                  RecordStatus::kUnparseableRound2, RecordStatus::kFailed}) {
    if (s == to_string(st)) return st;
  }
  throw InvalidArgument("unknown record status: " + s);
}

struct LabelingRecord {
  std::optional<std::string> question;
  std::optional<std::string> accepted_answers;
  std::optional<std::string> title;
  std::optional<std::string> document;
  std::optional<double> round1_score;
  std::optional<double> round2_score;
  std::string round1_response;
  std::string round2_response;
  std::optional<int> gold_label;  // reference label, when known
  std::vector<int> votes;          // individual human votes; majority stands in for gold_label
  RecordStatus status = RecordStatus::kPending;
  int attempts = 0;  // backend calls made, retries included
  std::string error;

  std::optional<int> label() const {
    if (status != RecordStatus::kOk || !round2_score) return std::nullopt;
    return *round2_score >= 0.5 ? 1 : 0;
  }
};

inline std::string format_score(double s) { return s >= 0.5 ? "1.0" : "0.0"; }

namespace detail {

inline void replace_once(std::string& text, const std::string& key, const std::string& value) {
  const auto at = text.find(key);
  if (at == std::string::npos) throw std::logic_error("template placeholder missing: " + key);
  text.replace(at, key.size(), value);
}

inline const std::string& require(const std::optional<std::string>& f, const char* name) {
  if (!f) throw InvalidArgument(std::string("labeling record is missing field: ") + name);
  return *f;
}

// Placeholders are filled in order, so substituted text that happens to
// contain a later placeholder is never rescanned.
inline std::string fill(std::string tpl, const std::vector<std::pair<std::string, std::string>>& values) {
  std::string out;
  std::size_t from = 0;
  for (const auto& [key, value] : values) {
    const auto at = tpl.find(key, from);
    if (at == std::string::npos) throw std::logic_error("template placeholder missing: " + key);
    out.append(tpl, from, at - from);
    out += value;
    from = at + key.size();
  }
  out.append(tpl, from, std::string::npos);
  return out;
}

}  // namespace detail

inline std::string format_round1_prompt(const LabelingRecord& r) {
  return detail::fill(kRound1Template, {{"<question>", detail::require(r.question, "question")},
                                        {"<answers>", detail::require(r.accepted_answers, "accepted_answers")},
                                        {"<title>", detail::require(r.title, "title")},
                                        {"<document>", detail::require(r.document, "document")}});
}

inline std::string format_round2_prompt(const LabelingRecord& r) {
  if (!r.round1_score) throw InvalidArgument("format_round2_prompt: round1_score is missing");
  return detail::fill(kRound2Template, {{"<question>", detail::require(r.question, "question")},
                                        {"<answers>", detail::require(r.accepted_answers, "accepted_answers")},
                                        {"<title>", detail::require(r.title, "title")},
                                        {"<document>", detail::require(r.document, "document")},
                                        {"<score>", format_score(*r.round1_score)}});
}

// First standalone "1.0", "0.0", "1" or "0" in the response.
inline std::optional<double> parse_score(const std::string& response) {
  const auto n = response.size();
  auto digit = [&](std::size_t i) { return i < n && std::isdigit(static_cast<unsigned char>(response[i])); };
  for (std::size_t i = 0; i < n; ++i) {
    const char c = response[i];
    if (c != '0' && c != '1') continue;
    if (i > 0 && (digit(i - 1) || response[i - 1] == '.' || response[i - 1] == '-')) continue;
    const std::size_t end = i + 1;
    if (digit(end)) continue;
    // "1.0" is fine; "1.5" or "0.00" are not scores.
    if (end < n && response[end] == '.' && digit(end + 1) && (response[end + 1] != '0' || digit(end + 2))) continue;
    return c == '1' ? 1.0 : 0.0;
  }
  return std::nullopt;
}

enum class MajorityVote { kZero, kOne, kUnresolved };

inline MajorityVote aggregate_majority(std::span<const int> votes) {
  if (votes.empty()) throw InvalidArgument("aggregate_majority: no votes");
  std::size_t ones = 0;
  for (int v : votes) {
    if (v != 0 && v != 1) throw InvalidArgument("aggregate_majority: votes must be 0 or 1");
    ones += static_cast<std::size_t>(v);
  }
  const std::size_t zeros = votes.size() - ones;
  if (ones > zeros) return MajorityVote::kOne;
  if (zeros > ones) return MajorityVote::kZero;
  return MajorityVote::kUnresolved;
}

inline const char* to_string(MajorityVote v) {
  switch (v) {
    case MajorityVote::kZero: return "0";
    case MajorityVote::kOne: return "1";
    case MajorityVote::kUnresolved: return "unresolved";
  }
  return "?";
}

// ---- backends ----

struct BackendError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

class RaterBackend {
 public:
  virtual ~RaterBackend() = default;
  virtual std::string complete(const std::string& prompt) = 0;
  virtual std::string name() const = 0;
};

// Always answers with the same text.
class ConstantBackend : public RaterBackend {
 public:
  explicit ConstantBackend(std::string reply, std::string name = "constant") : reply_(std::move(reply)), name_(std::move(name)) {}
  std::string complete(const std::string&) override { return reply_; }
  std::string name() const override { return name_; }

 private:
  std::string reply_, name_;
};

namespace detail {

inline std::optional<std::string> field_value(const std::string& prompt, const std::string& field) {
  const std::string key = "\n" + field + ": ";
  const auto at = prompt.rfind(key);
  if (at == std::string::npos) return std::nullopt;
  const auto start = at + key.size();
  const auto end = prompt.find('\n', start);
  return prompt.substr(start, end == std::string::npos ? std::string::npos : end - start);
}

}  // namespace detail

// Critic mocks: repeat or negate the previous model's score found in the prompt.
class EchoCriticBackend : public RaterBackend {
 public:
  std::string complete(const std::string& prompt) override {
    const auto v = detail::field_value(prompt, "previous model's score");
    if (!v) throw BackendError("echo critic: prompt has no previous score");
    return *v;
  }
  std::string name() const override { return "echo-critic"; }
};

class FlipCriticBackend : public RaterBackend {
 public:
  std::string complete(const std::string& prompt) override {
    const auto v = detail::field_value(prompt, "previous model's score");
    const auto s = v ? parse_score(*v) : std::nullopt;
    if (!s) throw BackendError("flip critic: prompt has no previous score");
    return format_score(1.0 - *s);
  }
  std::string name() const override { return "flip-critic"; }
};

// Scores 1.0 when the title or document contains one of the comma-separated
// accepted answers (case-insensitive).
class KeywordRaterBackend : public RaterBackend {
 public:
  std::string complete(const std::string& prompt) override {
    const auto answers = detail::field_value(prompt, "accepted answers");
    const auto title = detail::field_value(prompt, "title");
    const auto doc = detail::field_value(prompt, "document");
    if (!answers || !doc) throw BackendError("keyword rater: prompt is missing fields");
    auto lower = [](std::string s) {
      for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
      return s;
    };
    const std::string hay = lower(title.value_or("") + "\n" + *doc);
    std::size_t from = 0;
    const std::string a = *answers;
    while (from <= a.size()) {
      auto comma = a.find(',', from);
      if (comma == std::string::npos) comma = a.size();
      auto item = a.substr(from, comma - from);
      const auto b = item.find_first_not_of(" \t");
      const auto e = item.find_last_not_of(" \t");
      if (b != std::string::npos) {
        item = lower(item.substr(b, e - b + 1));
        if (hay.find(item) != std::string::npos) return "1.0";
      }
      from = comma + 1;
    }
    return "0.0";
  }
  std::string name() const override { return "keyword-rater"; }
};

// Wraps a callable; handy for fault injection.
class FunctionBackend : public RaterBackend {
 public:
  FunctionBackend(std::function<std::string(const std::string&)> fn, std::string name)
      : fn_(std::move(fn)), name_(std::move(name)) {}
  std::string complete(const std::string& prompt) override { return fn_(prompt); }
  std::string name() const override { return name_; }

 private:
  std::function<std::string(const std::string&)> fn_;
  std::string name_;
};

// Name-to-backend lookup for the mock backends.
inline std::unique_ptr<RaterBackend> make_mock_backend(const std::string& name) {
  if (name == "always-1") return std::make_unique<ConstantBackend>("1.0", name);
  if (name == "always-0") return std::make_unique<ConstantBackend>("0.0", name);
  if (name == "echo") return std::make_unique<EchoCriticBackend>();
  if (name == "flip") return std::make_unique<FlipCriticBackend>();
  if (name == "keyword") return std::make_unique<KeywordRaterBackend>();
  throw InvalidArgument("unknown mock backend: " + name + " (expected always-1, always-0, echo, flip or keyword)");
}

struct HttpBackendConfig {
  std::string base_url;    // e.g. http://localhost:8080 or http://host/v1
  std::string auth_token;  // sent as a bearer token when non-empty
  std::string model;       // forwarded in the request body
  int timeout_seconds = 30;

  // LABELER_BASE_URL and LABELER_AUTH_TOKEN.
  static HttpBackendConfig from_env(std::string model) {
    HttpBackendConfig c;
    const char* url = std::getenv("LABELER_BASE_URL");
    if (!url || !*url) throw InvalidArgument("LABELER_BASE_URL is not set");
    c.base_url = url;
    if (const char* tok = std::getenv("LABELER_AUTH_TOKEN")) c.auth_token = tok;
    c.model = std::move(model);
    return c;
  }
};

// The live backend (POST {base_url}/complete) lives in auto_labeler_http.hpp
// so code that never talks to an endpoint does not pull in the HTTP client.

// ---- two-round protocol ----

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds initial_backoff{200};  // doubled after each failure
};

struct LabelingOptions {
  RetryPolicy retry{};
  std::size_t max_in_flight = 4;
};

namespace detail {

inline std::string call_with_retry(RaterBackend& backend, const std::string& prompt, const RetryPolicy& policy,
                                   int& attempts) {
  auto backoff = policy.initial_backoff;
  std::string last_error;
  for (int a = 0; a < std::max(1, policy.max_attempts); ++a) {
    ++attempts;
    try {
      return backend.complete(prompt);
    } catch (const std::exception& e) {
      last_error = e.what();
    }
    if (a + 1 < policy.max_attempts && backoff.count() > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
  }
  throw BackendError(backend.name() + ": " + last_error);
}

inline void label_one(RaterBackend& rater, RaterBackend& critic, LabelingRecord& r, const RetryPolicy& retry) {
  r.attempts = 0;
  r.error.clear();
  r.round1_score.reset();
  r.round2_score.reset();
  try {
    r.round1_response = call_with_retry(rater, format_round1_prompt(r), retry, r.attempts);
    r.round1_score = parse_score(r.round1_response);
    if (!r.round1_score) {
      r.status = RecordStatus::kUnparseableRound1;
      return;
    }
    r.round2_response = call_with_retry(critic, format_round2_prompt(r), retry, r.attempts);
    r.round2_score = parse_score(r.round2_response);
    r.status = r.round2_score ? RecordStatus::kOk : RecordStatus::kUnparseableRound2;
  } catch (const std::exception& e) {
    r.status = RecordStatus::kFailed;
    r.error = e.what();
  }
}

}  // namespace detail

// Labels every record; failures stay on their own record. Backends must be
// safe to call from several threads when max_in_flight > 1.
inline std::vector<LabelingRecord> run_two_round(RaterBackend& rater, RaterBackend& critic,
                                                 std::vector<LabelingRecord> records,
                                                 const LabelingOptions& options = {}) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.max_in_flight, records.size()));
  if (workers <= 1) {
    for (auto& r : records) detail::label_one(rater, critic, r, options.retry);
    return records;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < records.size(); i = next++) {
        detail::label_one(rater, critic, records[i], options.retry);
      }
    });
  }
  for (auto& t : pool) t.join();
  return records;
}

// gold_label when set, else the majority of votes; nullopt for a tie or
// when neither is present.
inline std::optional<int> effective_gold(const LabelingRecord& r) {
  if (r.gold_label) return r.gold_label;
  if (r.votes.empty()) return std::nullopt;
  switch (aggregate_majority(r.votes)) {
    case MajorityVote::kOne: return 1;
    case MajorityVote::kZero: return 0;
    case MajorityVote::kUnresolved: return std::nullopt;
  }
  return std::nullopt;
}

struct LabelReport {
  BinaryF1 f1;
  std::size_t compared = 0;  // records with both a label and a gold label
  std::size_t ok = 0;
  std::size_t unparseable = 0;
  std::size_t failed = 0;
  std::size_t unresolved_votes = 0;  // tied votes, left out of the comparison

  nlohmann::json to_json() const {
    return {{"average_f1", f1.average}, {"f1_label_0", f1.f1_label0}, {"f1_label_1", f1.f1_label1},
            {"compared", compared},     {"ok", ok},                   {"unparseable", unparseable},
            {"failed", failed},         {"unresolved_votes", unresolved_votes}};
  }
};

inline LabelReport label_report(std::span<const LabelingRecord> records) {
  LabelReport rep;
  std::vector<int> pred, gold;
  for (const auto& r : records) {
    switch (r.status) {
      case RecordStatus::kOk: ++rep.ok; break;
      case RecordStatus::kUnparseableRound1:
      case RecordStatus::kUnparseableRound2: ++rep.unparseable; break;
      case RecordStatus::kFailed: ++rep.failed; break;
      case RecordStatus::kPending: break;
    }
    if (!r.gold_label && !r.votes.empty() && aggregate_majority(r.votes) == MajorityVote::kUnresolved) {
      ++rep.unresolved_votes;
    }
    const auto g = effective_gold(r);
    if (r.label() && g) {
      pred.push_back(*r.label());
      gold.push_back(*g);
    }
  }
  rep.compared = pred.size();
  if (!pred.empty()) rep.f1 = binary_f1(pred, gold);
  return rep;
}

// ---- JSONL ----

inline nlohmann::json to_json(const LabelingRecord& r) {
  nlohmann::json j;
  auto put = [&](const char* k, const std::optional<std::string>& v) {
    if (v) j[k] = *v;
  };
  put("question", r.question);
  put("accepted_answers", r.accepted_answers);
  put("title", r.title);
  put("document", r.document);
  if (r.round1_score) j["round1_score"] = *r.round1_score;
  if (r.round2_score) j["round2_score"] = *r.round2_score;
  if (!r.round1_response.empty()) j["round1_response"] = r.round1_response;
  if (!r.round2_response.empty()) j["round2_response"] = r.round2_response;
  if (r.gold_label) j["gold_label"] = *r.gold_label;
  if (!r.votes.empty()) j["votes"] = r.votes;
  if (auto l = r.label()) j["label"] = *l;
  j["status"] = to_string(r.status);
  j["attempts"] = r.attempts;
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

inline LabelingRecord labeling_record_from_json(const nlohmann::json& j) {
  LabelingRecord r;
  auto get = [&](const char* k, std::optional<std::string>& v) {
    if (j.contains(k) && !j[k].is_null()) v = j[k].get<std::string>();
  };
  get("question", r.question);
  get("accepted_answers", r.accepted_answers);
  get("title", r.title);
  get("document", r.document);
  if (j.contains("round1_score")) r.round1_score = j["round1_score"].get<double>();
  if (j.contains("round2_score")) r.round2_score = j["round2_score"].get<double>();
  if (r.round2_score && !r.round1_score) throw InvalidArgument("labeling record: round2_score without round1_score");
  r.round1_response = j.value("round1_response", "");
  r.round2_response = j.value("round2_response", "");
  if (j.contains("gold_label")) r.gold_label = j["gold_label"].get<int>();
  if (j.contains("votes")) r.votes = j["votes"].get<std::vector<int>>();
  if (j.contains("status")) r.status = record_status_from_string(j["status"].get<std::string>());
  r.attempts = j.value("attempts", 0);
  r.error = j.value("error", "");
  return r;
}

inline std::vector<LabelingRecord> read_labeling_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<LabelingRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(labeling_record_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

inline void write_labeling_jsonl(const std::filesystem::path& path, std::span<const LabelingRecord> records) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

}  // namespace sparse_rag
