#pragma once

// Segmented key/value cache: one question segment plus N context segments,
// each context prefilled against the cached question only.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <thread>
#include <vector>

#include "sparse_rag/attention_layout.hpp"
#include "sparse_rag/checkpoint.hpp"
#include "sparse_rag/model.hpp"

namespace sparse_rag {

enum class SegmentKind { kQuestion, kContext, kSuffix };

inline const char* to_string(SegmentKind k) {
  switch (k) {
    case SegmentKind::kQuestion:
      return "question";
    case SegmentKind::kContext:
      return "context";
    case SegmentKind::kSuffix:
      return "suffix";
  }
  return "?";
}

template <typename T>
struct Segment {
  SegmentKind kind = SegmentKind::kQuestion;
  std::vector<TokenId> tokens;
  std::vector<Position> positions;
  KvBlock<T> kv;
  RowVector<T> next_logits;  // output row of the last token
  // For a context: checksum of the question segment it was prefilled against.
  std::uint64_t question_checksum = 0;

  std::size_t size() const { return tokens.size(); }

  std::uint64_t checksum() const {
    detail::Fnv1a h;
    h.update_value(kind);
    h.update(tokens.data(), tokens.size() * sizeof(TokenId));
    h.update(positions.data(), positions.size() * sizeof(Position));
    for (std::size_t l = 0; l < kv.keys.size(); ++l) {
      h.update(kv.keys[l].data(), static_cast<std::size_t>(kv.keys[l].size()) * sizeof(T));
      h.update(kv.values[l].data(), static_cast<std::size_t>(kv.values[l].size()) * sizeof(T));
    }
    return h.digest();
  }

  bool operator==(const Segment& o) const {
    return kind == o.kind && tokens == o.tokens && positions == o.positions && kv == o.kv &&
           next_logits == o.next_logits && question_checksum == o.question_checksum;
  }
};

template <typename T>
Segment<T> prefill_question(const ModelBundle<T>& model, std::span<const TokenId> question_tokens) {
  if (question_tokens.empty()) throw InvalidArgument("prefill_question: empty question");
  if (question_tokens.size() > model.config.max_position) {
    throw PositionOverflow("prefill_question: question longer than max_position");
  }
  Segment<T> seg;
  seg.kind = SegmentKind::kQuestion;
  seg.tokens.assign(question_tokens.begin(), question_tokens.end());
  seg.positions = assign_position_ids(SegmentPlan{question_tokens.size(), {}, 0}, model.config.max_position);
  auto res = forward(model, ForwardRequest<T>{seg.tokens, seg.positions, {}, nullptr});
  seg.kv = std::move(res.kv);
  seg.next_logits = res.logits.row(res.logits.rows() - 1);
  seg.question_checksum = seg.checksum();
  return seg;
}

template <typename T>
Segment<T> prefill_context(const ModelBundle<T>& model, const Segment<T>& question,
                           std::span<const TokenId> context_tokens) {
  if (question.kind != SegmentKind::kQuestion || question.size() == 0) {
    throw InvalidArgument("prefill_context: first argument must be a prefilled question segment");
  }
  if (context_tokens.empty()) throw InvalidArgument("prefill_context: empty context");
  Segment<T> seg;
  seg.kind = SegmentKind::kContext;
  seg.tokens.assign(context_tokens.begin(), context_tokens.end());
  const SegmentPlan plan{question.size(), {context_tokens.size()}, 0};
  auto all = assign_position_ids(plan, model.config.max_position);
  seg.positions.assign(all.begin() + static_cast<std::ptrdiff_t>(question.size()), all.end());
  CacheView<T> view{{&question.kv}, nullptr};
  auto res = forward(model, ForwardRequest<T>{seg.tokens, seg.positions, view, nullptr});
  seg.kv = std::move(res.kv);
  seg.next_logits = res.logits.row(res.logits.rows() - 1);
  seg.question_checksum = question.question_checksum;
  return seg;
}

template <typename T>
class SegmentedCache {
 public:
  explicit SegmentedCache(std::shared_ptr<const Segment<T>> question) : question_(std::move(question)) {
    if (!question_ || question_->kind != SegmentKind::kQuestion) {
      throw InvalidArgument("SegmentedCache: needs a question segment");
    }
  }

  // Prefills the question and every context. Contexts are independent, so
  // with threads > 1 they are prefilled concurrently.
  static SegmentedCache build(const ModelBundle<T>& model, std::span<const TokenId> question_tokens,
                              const std::vector<std::vector<TokenId>>& contexts, unsigned threads = 1) {
    SegmentedCache cache(std::make_shared<const Segment<T>>(prefill_question(model, question_tokens)));
    std::vector<Segment<T>> segs(contexts.size());
    const auto& q = *cache.question_;
    if (threads <= 1 || contexts.size() <= 1) {
      for (std::size_t i = 0; i < contexts.size(); ++i) segs[i] = prefill_context(model, q, contexts[i]);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(threads);
      for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
          try {
            for (std::size_t i = t; i < contexts.size(); i += threads) segs[i] = prefill_context(model, q, contexts[i]);
          } catch (...) {
            errors[t] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
    }
    for (auto& s : segs) cache.add_context(std::move(s));
    return cache;
  }

  void add_context(Segment<T> segment) {
    if (segment.kind != SegmentKind::kContext) throw InvalidArgument("SegmentedCache: not a context segment");
    if (segment.question_checksum != question_->question_checksum) {
      throw InvalidArgument("SegmentedCache: context was prefilled against a different question");
    }
    if (segment.positions.empty() || segment.positions.front() != static_cast<Position>(question_->size())) {
      throw InvalidArgument("SegmentedCache: context positions must start at question_len");
    }
    contexts_.push_back(std::move(segment));
  }

  const Segment<T>& question() const { return *question_; }
  std::shared_ptr<const Segment<T>> question_ptr() const { return question_; }
  const std::vector<Segment<T>>& contexts() const { return contexts_; }
  std::size_t num_contexts() const { return contexts_.size(); }

  std::vector<std::size_t> context_lengths() const {
    std::vector<std::size_t> out;
    for (const auto& c : contexts_) out.push_back(c.size());
    return out;
  }

  std::optional<std::vector<double>> scores;
  std::optional<std::vector<std::size_t>> kept;

 private:
  std::shared_ptr<const Segment<T>> question_;
  std::vector<Segment<T>> contexts_;
};

// Canonical kept set: ascending, unique, validated against n.
inline std::vector<std::size_t> normalize_kept(std::vector<std::size_t> kept, std::size_t n) {
  std::sort(kept.begin(), kept.end());
  kept.erase(std::unique(kept.begin(), kept.end()), kept.end());
  for (auto i : kept) {
    if (i >= n) throw std::out_of_range("kept index " + std::to_string(i) + " out of range");
  }
  return kept;
}

// Decode-time view: question kv followed by the kept contexts in ascending
// (retrieval) order. Holds pointers into the cache; no kv is copied.
template <typename T>
CacheView<T> select(const SegmentedCache<T>& cache, std::vector<std::size_t> kept) {
  kept = normalize_kept(std::move(kept), cache.num_contexts());
  CacheView<T> view;
  view.blocks.push_back(&cache.question().kv);
  for (auto i : kept) view.blocks.push_back(&cache.contexts()[i].kv);
  if (kept.empty()) view.next_logits = &cache.question().next_logits;
  return view;
}

// View over the question and a single context, carrying that context's
// final-row logits so a continuation can be scored against it.
template <typename T>
CacheView<T> context_view(const SegmentedCache<T>& cache, std::size_t i) {
  if (i >= cache.num_contexts()) throw std::out_of_range("context index out of range");
  return CacheView<T>{{&cache.question().kv, &cache.contexts()[i].kv}, &cache.contexts()[i].next_logits};
}

// Debug dump in the checkpoint manifest + raw float layout.
template <typename T>
void save_cache_dump(const SegmentedCache<T>& cache, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  std::ofstream data(dir / "weights.bin", std::ios::binary);
  if (!manifest || !data) throw IoError("cache dump: cannot write to " + dir.string());
  manifest << "sparse-rag-kvdump 1\n";
  manifest << "dtype " << detail::dtype_name<T>() << "\n";
  std::size_t offset = 0;
  auto emit = [&](const std::string& name, const auto& tensor) {
    manifest << "tensor " << name << " " << tensor.rows() << " " << tensor.cols() << " " << offset << "\n";
    detail::write_le(data, tensor.data(), static_cast<std::size_t>(tensor.size()));
    offset += static_cast<std::size_t>(tensor.size()) * sizeof(T);
  };
  std::vector<const Segment<T>*> segs{&cache.question()};
  for (const auto& c : cache.contexts()) segs.push_back(&c);
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const auto& seg = *segs[s];
    manifest << "segment " << s << " " << to_string(seg.kind) << " " << seg.size() << " "
             << detail::hex64(seg.question_checksum) << " tokens";
    for (auto t : seg.tokens) manifest << " " << t;
    manifest << " positions";
    for (auto p : seg.positions) manifest << " " << p;
    manifest << "\n";
    const std::string p = "segment." + std::to_string(s) + ".";
    for (std::size_t l = 0; l < seg.kv.keys.size(); ++l) {
      emit(p + "layer." + std::to_string(l) + ".keys", seg.kv.keys[l]);
      emit(p + "layer." + std::to_string(l) + ".values", seg.kv.values[l]);
    }
    emit(p + "next_logits", seg.next_logits);
  }
}

template <typename T>
SegmentedCache<T> load_cache_dump(const std::filesystem::path& dir) {
  const auto m = detail::read_manifest(dir / "manifest.txt", "sparse-rag-kvdump");
  if (m.dtype != detail::dtype_name<T>()) throw IoError("cache dump: dtype mismatch");
  std::ifstream data(dir / "weights.bin", std::ios::binary);
  if (!data) throw IoError("cache dump: cannot open weights.bin");

  std::vector<Segment<T>> segs;
  for (const auto& line : m.extra) {
    std::istringstream ss(line);
    std::string kind_word, kind, word, checksum;
    std::size_t idx = 0, len = 0;
    ss >> kind_word >> idx >> kind >> len >> checksum >> word;
    if (kind_word != "segment" || word != "tokens") throw IoError("cache dump: malformed segment line");
    Segment<T> seg;
    seg.kind = kind == "question" ? SegmentKind::kQuestion
                                  : (kind == "context" ? SegmentKind::kContext : SegmentKind::kSuffix);
    seg.question_checksum = std::stoull(checksum, nullptr, 16);
    seg.tokens.resize(len);
    for (auto& t : seg.tokens) ss >> t;
    ss >> word;
    seg.positions.resize(len);
    for (auto& p : seg.positions) ss >> p;
    if (!ss) throw IoError("cache dump: malformed segment line");
    segs.push_back(std::move(seg));
  }
  std::size_t rec = 0;
  auto read = [&](auto& tensor) {
    if (rec >= m.tensors.size()) throw IoError("cache dump: missing tensors");
    const auto& r = m.tensors[rec++];
    tensor.resize(static_cast<Eigen::Index>(r.rows), static_cast<Eigen::Index>(r.cols));
    data.seekg(static_cast<std::streamoff>(r.offset));
    detail::read_le(data, tensor.data(), r.rows * r.cols);
  };
  for (auto& seg : segs) {
    std::size_t layers = 0;
    while (rec + layers * 2 < m.tensors.size() &&
           m.tensors[rec + layers * 2].name.find(".layer.") != std::string::npos) {
      ++layers;
    }
    seg.kv.keys.resize(layers);
    seg.kv.values.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      read(seg.kv.keys[l]);
      read(seg.kv.values[l]);
    }
    read(seg.next_logits);
  }
  if (segs.empty() || segs.front().kind != SegmentKind::kQuestion) throw IoError("cache dump: no question segment");
  SegmentedCache<T> cache(std::make_shared<const Segment<T>>(std::move(segs.front())));
  for (std::size_t i = 1; i < segs.size(); ++i) cache.add_context(std::move(segs[i]));
  return cache;
}

}  // namespace sparse_rag
