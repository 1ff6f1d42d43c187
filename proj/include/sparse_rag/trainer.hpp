#pragma once

// Trains the assessment + generation task mixture with AdamW.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <random>
#include <thread>
#include <vector>

#include "json.hpp"
#include "sparse_rag/checkpoint.hpp"
#include "sparse_rag/kv_store.hpp"
#include "sparse_rag/metrics.hpp"
#include "sparse_rag/model.hpp"
#include "sparse_rag/rag_pipeline.hpp"
#include "sparse_rag/synth_data.hpp"

namespace sparse_rag {

struct TrainConfig {
  double mixture_weight_assessment = 0.5;
  std::size_t batch_size = 16;
  std::size_t steps = 1000;
  double learning_rate = 3e-3;
  double dropout = 0.05;
  double grad_clip = 1.0;
  std::size_t checkpoint_every = 0;  // 0: evaluate once, after the last step
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  // Cosine decay from learning_rate down to min_lr_fraction * learning_rate.
  bool cosine_decay = true;
  double min_lr_fraction = 0.1;
  // Generation examples use a random subset (keeping >= 1 relevant context)
  // so that the model sees the shorter layouts produced by filtering.
  bool subsample_contexts = true;
  std::size_t eval_examples = 100;
  unsigned threads = 1;
  std::filesystem::path output_dir;  // checkpoints and metrics.jsonl, when set

  void validate() const {
    if (!(learning_rate > 0.0)) throw InvalidArgument("TrainConfig: learning_rate must be > 0");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw InvalidArgument("TrainConfig: dropout must lie in [0, 1)");
    if (!(mixture_weight_assessment >= 0.0 && mixture_weight_assessment <= 1.0)) {
      throw InvalidArgument("TrainConfig: mixture_weight_assessment must lie in [0, 1]");
    }
    if (batch_size == 0) throw InvalidArgument("TrainConfig: batch_size must be >= 1");
  }

  nlohmann::json to_json() const {
    return {{"mixture_weight_assessment", mixture_weight_assessment},
            {"batch_size", batch_size},
            {"steps", steps},
            {"learning_rate", learning_rate},
            {"dropout", dropout},
            {"grad_clip", grad_clip},
            {"checkpoint_every", checkpoint_every},
            {"seed", seed},
            {"weight_decay", weight_decay},
            {"beta1", beta1},
            {"beta2", beta2},
            {"epsilon", epsilon},
            {"cosine_decay", cosine_decay},
            {"min_lr_fraction", min_lr_fraction},
            {"subsample_contexts", subsample_contexts},
            {"eval_examples", eval_examples},
            {"threads", threads}};
  }
};

struct ValidationMetrics {
  std::size_t step = 0;
  double assessment_accuracy = 0.0;
  double auc = 0.0;
  double generation_em = 0.0;
  std::size_t examples = 0;
  std::size_t contexts = 0;

  double selection_score() const { return 0.5 * (auc + generation_em); }

  nlohmann::json to_json() const {
    return {{"step", step},          {"assessment_accuracy", assessment_accuracy},
            {"auc", auc},            {"generation_em", generation_em},
            {"examples", examples},  {"contexts", contexts}};
  }
};

template <typename T>
struct TrainResult {
  ModelBundle<T> model;  // best checkpoint by validation metric
  std::vector<double> loss_curve;
  std::vector<ValidationMetrics> validation;
  std::size_t best_step = 0;
};

// Assessment accuracy/AUC over every context and greedy generation EM with
// all contexts kept. At most max_examples examples are used (0: all).
template <typename T>
ValidationMetrics eval_checkpoint(const ModelBundle<T>& model, std::span<const RagExample> split,
                                  std::size_t max_examples = 0) {
  if (split.empty()) throw InvalidArgument("eval_checkpoint: empty split");
  const std::size_t n = max_examples == 0 ? split.size() : std::min(max_examples, split.size());
  std::vector<double> scores;
  std::vector<int> labels;
  std::size_t correct = 0, em = 0;
  for (std::size_t e = 0; e < n; ++e) {
    const auto& ex = split[e];
    if (!ex.labels) throw InvalidArgument("eval_checkpoint: example without labels");
    const auto cache = SegmentedCache<T>::build(model, ex.question, ex.contexts);
    for (std::size_t i = 0; i < cache.num_contexts(); ++i) {
      const auto d = rate_distribution(model, cache, i);
      scores.push_back(d.good);
      labels.push_back((*ex.labels)[i]);
      correct += ((d.good > d.bad) == ((*ex.labels)[i] == 1)) ? 1 : 0;
    }
    std::vector<std::size_t> all(cache.num_contexts());
    std::iota(all.begin(), all.end(), std::size_t{0});
    GenerationParams gp;
    gp.max_tokens = ex.answer.size() + 1;
    em += static_cast<std::size_t>(exact_match(generate(model, cache, all, gp), ex.answer));
  }
  ValidationMetrics m;
  m.examples = n;
  m.contexts = scores.size();
  m.assessment_accuracy = static_cast<double>(correct) / static_cast<double>(scores.size());
  m.auc = roc_auc(scores, labels);
  m.generation_em = static_cast<double>(em) / static_cast<double>(n);
  return m;
}

namespace detail {

template <typename T>
struct AdamState {
  Weights<T> m, v;
  std::size_t t = 0;
};

template <typename T>
void accumulate(Weights<T>& into, const Weights<T>& from) {
  std::vector<const T*> src;
  from.visit([&](const std::string&, const T* d, std::size_t, std::size_t) { src.push_back(d); });
  std::size_t k = 0;
  into.visit([&](const std::string&, T* d, std::size_t r, std::size_t c) {
    for (std::size_t i = 0; i < r * c; ++i) d[i] += src[k][i];
    ++k;
  });
}

template <typename T>
double squared_norm(const Weights<T>& w) {
  double s = 0;
  w.visit([&](const std::string&, const T* d, std::size_t r, std::size_t c) {
    for (std::size_t i = 0; i < r * c; ++i) s += static_cast<double>(d[i]) * static_cast<double>(d[i]);
  });
  return s;
}

template <typename T>
void adamw_step(ModelBundle<T>& model, const Weights<T>& grad, AdamState<T>& st, const TrainConfig& cfg, double lr,
                double grad_scale) {
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  std::vector<const T*> g;
  std::vector<T*> m, v;
  grad.visit([&](const std::string&, const T* d, std::size_t, std::size_t) { g.push_back(d); });
  st.m.visit([&](const std::string&, T* d, std::size_t, std::size_t) { m.push_back(d); });
  st.v.visit([&](const std::string&, T* d, std::size_t, std::size_t) { v.push_back(d); });
  std::size_t k = 0;
  model.weights.visit([&](const std::string&, T* p, std::size_t r, std::size_t c) {
    // Norm gains (single-row tensors) are not decayed.
    const double wd = r > 1 ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < r * c; ++i) {
      const double gi = static_cast<double>(g[k][i]) * grad_scale;
      const double mi = cfg.beta1 * static_cast<double>(m[k][i]) + (1.0 - cfg.beta1) * gi;
      const double vi = cfg.beta2 * static_cast<double>(v[k][i]) + (1.0 - cfg.beta2) * gi * gi;
      m[k][i] = static_cast<T>(mi);
      v[k][i] = static_cast<T>(vi);
      const double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg.epsilon) + wd * static_cast<double>(p[i]);
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * update);
    }
    ++k;
  });
}

// Draws one training sequence from the mixture.
inline FormattedExample sample_training_item(std::span<const RagExample> train, const TrainConfig& cfg,
                                             std::mt19937_64& rng) {
  const auto& ex = train[uniform_below(rng, train.size())];
  const bool assessment = uniform01(rng) < cfg.mixture_weight_assessment;
  if (assessment) {
    if (!ex.labels) throw InvalidArgument("train: corpus has no labels but the assessment weight is > 0");
    return format_assessment(ex, uniform_below(rng, ex.contexts.size()));
  }
  if (!cfg.subsample_contexts || ex.contexts.size() == 1) return format_generation(ex);

  const std::size_t n = ex.contexts.size();
  const std::size_t k = 1 + uniform_below(rng, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<std::size_t> chosen;
  for (;;) {
    for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + uniform_below(rng, n - i)]);
    chosen.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
    std::sort(chosen.begin(), chosen.end());
    if (!ex.labels) break;
    bool has_relevant = false;
    for (auto i : chosen) has_relevant = has_relevant || (*ex.labels)[i] == 1;
    if (has_relevant) break;
  }
  return format_generation(restrict_contexts(ex, chosen));
}

template <typename T>
BackwardResult<T> backward_item(const ModelBundle<T>& model, const FormattedExample& f, const DropoutSpec& drop) {
  ForwardRequest<T> req{f.tokens, f.positions, {}, f.visibility ? &*f.visibility : nullptr};
  return backward(model, req, f.target_mask, f.target_ids, drop);
}

}  // namespace detail

// Runs config.steps optimizer steps and returns the checkpoint with the best
// validation score (the input model when steps == 0).
template <typename T>
TrainResult<T> train(const ModelBundle<T>& initial, const Corpus& corpus, const TrainConfig& config,
                     const std::function<void(std::size_t, double)>& on_step = {}) {
  config.validate();
  const auto train_split = corpus.train();
  if (train_split.empty()) throw InvalidArgument("train: empty training split");
  if (config.mixture_weight_assessment > 0.0) {
    for (const auto& e : train_split) {
      if (!e.labels) throw InvalidArgument("train: corpus is missing labels while mixture_weight_assessment > 0");
    }
  }

  TrainResult<T> result{initial, {}, {}, 0};
  if (config.steps == 0) return result;

  ModelBundle<T> model = initial;
  detail::AdamState<T> adam{Weights<T>::zeros(model.config), Weights<T>::zeros(model.config), 0};
  std::mt19937_64 rng(config.seed);
  std::optional<double> best_score;

  std::ofstream metrics_log;
  if (!config.output_dir.empty()) {
    std::filesystem::create_directories(config.output_dir);
    metrics_log.open(config.output_dir / "metrics.jsonl");
  }

  const unsigned threads = std::max(1u, config.threads);
  std::vector<FormattedExample> batch(config.batch_size);
  std::vector<BackwardResult<T>> results(config.batch_size);

  for (std::size_t step = 0; step < config.steps; ++step) {
    for (auto& item : batch) item = detail::sample_training_item(train_split, config, rng);
    auto run = [&](std::size_t b) {
      const DropoutSpec drop{config.dropout, detail::mix_seed(config.seed, step * config.batch_size + b)};
      results[b] = detail::backward_item(model, batch[b], drop);
    };
    if (threads == 1) {
      for (std::size_t b = 0; b < batch.size(); ++b) run(b);
    } else {
      std::vector<std::thread> pool;
      for (unsigned t = 0; t < threads; ++t) {
        pool.emplace_back([&, t] {
          for (std::size_t b = t; b < batch.size(); b += threads) run(b);
        });
      }
      for (auto& th : pool) th.join();
    }

    // Fixed reduction order keeps the run independent of the thread count.
    Weights<T> grad = std::move(results[0].gradients);
    double loss = static_cast<double>(results[0].loss);
    for (std::size_t b = 1; b < results.size(); ++b) {
      detail::accumulate(grad, results[b].gradients);
      loss += static_cast<double>(results[b].loss);
    }
    const double inv_batch = 1.0 / static_cast<double>(config.batch_size);
    loss *= inv_batch;
    const double norm = std::sqrt(detail::squared_norm(grad)) * inv_batch;
    double scale = inv_batch;
    if (config.grad_clip > 0.0 && norm > config.grad_clip) scale *= config.grad_clip / norm;

    double lr = config.learning_rate;
    if (config.cosine_decay && config.steps > 1) {
      const double progress = static_cast<double>(step) / static_cast<double>(config.steps - 1);
      const double floor = config.min_lr_fraction;
      lr *= floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(M_PI * progress));
    }
    detail::adamw_step(model, grad, adam, config, lr, scale);
    result.loss_curve.push_back(loss);
    if (on_step) on_step(step, loss);

    const bool last = step + 1 == config.steps;
    const bool at_checkpoint = config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0;
    if ((last || at_checkpoint) && !corpus.validation().empty()) {
      auto m = eval_checkpoint(model, corpus.validation(), config.eval_examples);
      m.step = step + 1;
      result.validation.push_back(m);
      if (metrics_log.is_open()) {
        auto j = m.to_json();
        j["loss"] = loss;
        metrics_log << j.dump() << "\n" << std::flush;
      }
      if (!config.output_dir.empty()) {
        save_checkpoint(model, config.output_dir / ("step_" + std::to_string(step + 1)));
      }
      if (!best_score || m.selection_score() > *best_score) {
        best_score = m.selection_score();
        result.model = model;
        result.best_step = step + 1;
      }
    } else if (last && corpus.validation().empty()) {
      result.model = model;
      result.best_step = step + 1;
    }
  }
  return result;
}

}  // namespace sparse_rag
