#pragma once

// Minimal decoder-only transformer: pre-norm blocks (RMSNorm), rotary
// positions driven by caller-supplied position ids, GELU feed-forward and an
// untied output projection. Templated on the scalar so that gradient checks
// can run in double precision.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "sparse_rag/attention_layout.hpp"
#include "sparse_rag/types.hpp"

namespace sparse_rag {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct ModelConfig {
  std::size_t num_layers = 2;
  std::size_t num_heads = 4;
  std::size_t model_dim = 64;
  std::size_t head_dim = 16;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 0;
  std::size_t max_position = 1024;
  TokenId control_assessment_id = 2;
  TokenId control_generation_id = 3;
  TokenId rate_good_id = 4;
  TokenId rate_bad_id = 5;
  TokenId eos_id = 1;
  TokenId pad_id = 0;

  static constexpr double kRotaryBase = 10000.0;
  static constexpr double kNormEps = 1e-5;

  // Fills head_dim from model_dim / num_heads.
  static ModelConfig make(std::size_t layers, std::size_t heads, std::size_t dim, std::size_t ffn,
                          std::size_t vocab, std::size_t max_position) {
    ModelConfig c;
    c.num_layers = layers;
    c.num_heads = heads;
    c.model_dim = dim;
    c.head_dim = heads == 0 ? 0 : dim / heads;
    c.ffn_dim = ffn;
    c.vocab_size = vocab;
    c.max_position = max_position;
    return c;
  }

  std::vector<TokenId> reserved_ids() const {
    return {pad_id, eos_id, control_assessment_id, control_generation_id, rate_good_id, rate_bad_id};
  }

  void validate() const {
    if (num_layers == 0 || num_heads == 0 || model_dim == 0 || ffn_dim == 0 || max_position == 0) {
      throw InvalidArgument("ModelConfig: dimensions must be positive");
    }
    if (model_dim % num_heads != 0 || head_dim * num_heads != model_dim) {
      throw InvalidArgument("ModelConfig: model_dim (" + std::to_string(model_dim) +
                            ") must equal num_heads * head_dim");
    }
    if (head_dim % 2 != 0) throw InvalidArgument("ModelConfig: head_dim must be even for rotary encoding");
    const auto ids = reserved_ids();
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab_size) {
        throw InvalidArgument("ModelConfig: reserved token id out of vocabulary");
      }
      for (std::size_t j = 0; j < i; ++j) {
        if (ids[i] == ids[j]) throw InvalidArgument("ModelConfig: reserved token ids must be distinct");
      }
    }
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerWeights {
  RowVector<T> attention_norm;
  Matrix<T> wq, wk, wv, wo;  // (dim, dim); y = x * W
  RowVector<T> ffn_norm;
  Matrix<T> w_up;    // (dim, ffn)
  Matrix<T> w_down;  // (ffn, dim)
};

template <typename T>
struct Weights {
  Matrix<T> token_embedding;  // (vocab, dim)
  std::vector<LayerWeights<T>> layers;
  RowVector<T> final_norm;
  Matrix<T> output;  // (dim, vocab)

  static Weights zeros(const ModelConfig& c) {
    Weights w;
    const auto d = static_cast<Eigen::Index>(c.model_dim);
    const auto f = static_cast<Eigen::Index>(c.ffn_dim);
    const auto v = static_cast<Eigen::Index>(c.vocab_size);
    w.token_embedding = Matrix<T>::Zero(v, d);
    w.layers.resize(c.num_layers);
    for (auto& l : w.layers) {
      l.attention_norm = RowVector<T>::Zero(d);
      l.wq = Matrix<T>::Zero(d, d);
      l.wk = Matrix<T>::Zero(d, d);
      l.wv = Matrix<T>::Zero(d, d);
      l.wo = Matrix<T>::Zero(d, d);
      l.ffn_norm = RowVector<T>::Zero(d);
      l.w_up = Matrix<T>::Zero(d, f);
      l.w_down = Matrix<T>::Zero(f, d);
    }
    w.final_norm = RowVector<T>::Zero(d);
    w.output = Matrix<T>::Zero(d, v);
    return w;
  }

  // Calls f(name, data, rows, cols) for every tensor in a fixed order.
  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const T*, std::size_t r, std::size_t c) { n += r * c; });
    return n;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    auto emit = [&](const std::string& name, auto& tensor) {
      f(name, tensor.data(), static_cast<std::size_t>(tensor.rows()), static_cast<std::size_t>(tensor.cols()));
    };
    emit("token_embedding", self.token_embedding);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      emit(p + "attention_norm", l.attention_norm);
      emit(p + "wq", l.wq);
      emit(p + "wk", l.wk);
      emit(p + "wv", l.wv);
      emit(p + "wo", l.wo);
      emit(p + "ffn_norm", l.ffn_norm);
      emit(p + "w_up", l.w_up);
      emit(p + "w_down", l.w_down);
    }
    emit("final_norm", self.final_norm);
    emit("output", self.output);
  }
};

template <typename T>
struct ModelBundle {
  ModelConfig config;
  Weights<T> weights;

  std::uint64_t checksum() const {
    detail::Fnv1a h;
    h.update_value(config.num_layers);
    h.update_value(config.num_heads);
    h.update_value(config.model_dim);
    h.update_value(config.ffn_dim);
    h.update_value(config.vocab_size);
    h.update_value(config.max_position);
    weights.visit([&](const std::string& name, const T* data, std::size_t r, std::size_t c) {
      h.update_string(name);
      h.update(data, r * c * sizeof(T));
    });
    return h.digest();
  }
};

using Model = ModelBundle<float>;

namespace detail {

// Portable sampling on top of mt19937_64 (whose output sequence is fixed by
// the standard, unlike the std distributions).
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

inline double standard_normal(std::mt19937_64& rng) {
  double u1 = uniform01(rng);
  while (u1 <= 0.0) u1 = uniform01(rng);
  const double u2 = uniform01(rng);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) {
  if (n == 0) throw InvalidArgument("uniform_below: empty range");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

template <typename T = float>
ModelBundle<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelBundle<T> m{config, Weights<T>::zeros(config)};
  std::mt19937_64 rng(seed);
  const double base_std = 0.02;
  const double residual_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config.num_layers));
  auto fill = [&](auto& tensor, double std) {
    for (Eigen::Index i = 0; i < tensor.size(); ++i) {
      tensor.data()[i] = static_cast<T>(std * detail::standard_normal(rng));
    }
  };
  fill(m.weights.token_embedding, base_std);
  for (auto& l : m.weights.layers) {
    l.attention_norm.setOnes();
    fill(l.wq, base_std);
    fill(l.wk, base_std);
    fill(l.wv, base_std);
    fill(l.wo, residual_std);
    l.ffn_norm.setOnes();
    fill(l.w_up, base_std);
    fill(l.w_down, residual_std);
  }
  m.weights.final_norm.setOnes();
  fill(m.weights.output, base_std);
  return m;
}

// Cached keys/values for a contiguous run of tokens, one (tokens, dim) matrix
// per layer. Keys are stored with rotary already applied.
template <typename T>
struct KvBlock {
  std::vector<Matrix<T>> keys;
  std::vector<Matrix<T>> values;

  std::size_t size() const { return keys.empty() ? 0 : static_cast<std::size_t>(keys.front().rows()); }

  static KvBlock empty(const ModelConfig& c) {
    KvBlock b;
    b.keys.assign(c.num_layers, Matrix<T>(0, static_cast<Eigen::Index>(c.model_dim)));
    b.values.assign(c.num_layers, Matrix<T>(0, static_cast<Eigen::Index>(c.model_dim)));
    return b;
  }

  void append(const KvBlock& other) {
    if (keys.empty()) {
      *this = other;
      return;
    }
    for (std::size_t l = 0; l < keys.size(); ++l) {
      const auto old = keys[l].rows();
      const auto add = other.keys[l].rows();
      keys[l].conservativeResize(old + add, Eigen::NoChange);
      keys[l].bottomRows(add) = other.keys[l];
      values[l].conservativeResize(old + add, Eigen::NoChange);
      values[l].bottomRows(add) = other.values[l];
    }
  }

  bool operator==(const KvBlock& o) const { return keys == o.keys && values == o.values; }
};

// Read-only sequence of cached blocks a forward call attends over, in order.
// next_logits, when set, is the output row of the last cached token; it is
// what conditions the first token of a scored continuation.
template <typename T>
struct CacheView {
  std::vector<const KvBlock<T>*> blocks;
  const RowVector<T>* next_logits = nullptr;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto* b : blocks) n += b->size();
    return n;
  }
};

template <typename T>
struct ForwardRequest {
  std::span<const TokenId> tokens;
  std::span<const Position> positions;
  CacheView<T> cache;
  // Null means: every new token sees the whole cache plus earlier new tokens.
  const Visibility* visibility = nullptr;
};

struct DropoutSpec {
  double rate = 0.0;
  std::uint64_t seed = 0;
  bool enabled() const { return rate > 0.0; }
};

template <typename T>
struct ForwardResult {
  Matrix<T> logits;  // (tokens, vocab)
  KvBlock<T> kv;
};

template <typename T>
struct BackwardResult {
  T loss{};
  Weights<T> gradients;
};

namespace detail {

template <typename T>
struct LayerTrace {
  Matrix<T> x_in, h, q, k, v, attn, drop_attn, x_mid, h2, up, act, drop_ffn;
  Eigen::Matrix<T, Eigen::Dynamic, 1> r1, r2;
  std::vector<Matrix<T>> probs;  // per head, (tokens, cols)
};

template <typename T>
struct Trace {
  std::vector<LayerTrace<T>> layers;
  Matrix<T> x_final, xf;
  Eigen::Matrix<T, Eigen::Dynamic, 1> rf;
};

template <typename T>
void rms_norm(const Matrix<T>& x, const RowVector<T>& gain, Matrix<T>& out,
              Eigen::Matrix<T, Eigen::Dynamic, 1>& inv) {
  const auto d = static_cast<T>(x.cols());
  inv = ((x.array().square().rowwise().sum() / d) + static_cast<T>(ModelConfig::kNormEps)).rsqrt();
  out = (x.array().colwise() * inv.array()).rowwise() * gain.array();
}

// Returns dx; accumulates the gain gradient.
template <typename T>
Matrix<T> rms_norm_backward(const Matrix<T>& dy, const Matrix<T>& x, const RowVector<T>& gain,
                            const Eigen::Matrix<T, Eigen::Dynamic, 1>& inv, RowVector<T>& dgain) {
  const auto d = static_cast<T>(x.cols());
  dgain += (dy.array() * (x.array().colwise() * inv.array())).colwise().sum().matrix();
  Matrix<T> dxhat = dy.array().rowwise() * gain.array();
  Eigen::Matrix<T, Eigen::Dynamic, 1> dots = (dxhat.array() * x.array()).rowwise().sum();
  Eigen::Matrix<T, Eigen::Dynamic, 1> coef = inv.array().cube() * dots.array() / d;
  return (dxhat.array().colwise() * inv.array()) - (x.array().colwise() * coef.array());
}

// Rotates consecutive (even, odd) pairs inside each head; sign = -1 inverts.
template <typename T>
void apply_rotary(Matrix<T>& x, std::span<const Position> positions, std::size_t num_heads,
                  std::size_t head_dim, double sign = 1.0) {
  const std::size_t half = head_dim / 2;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double pos = static_cast<double>(positions[static_cast<std::size_t>(r)]);
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(ModelConfig::kRotaryBase, -2.0 * static_cast<double>(i) / head_dim);
      const double angle = sign * pos * freq;
      const T c = static_cast<T>(std::cos(angle));
      const T s = static_cast<T>(std::sin(angle));
      for (std::size_t h = 0; h < num_heads; ++h) {
        const auto col = static_cast<Eigen::Index>(h * head_dim + 2 * i);
        const T a = x(r, col);
        const T b = x(r, col + 1);
        x(r, col) = a * c - b * s;
        x(r, col + 1) = a * s + b * c;
      }
    }
  }
}

template <typename T>
T gelu(T u) {
  constexpr T kC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return static_cast<T>(0.5) * u * (static_cast<T>(1) + std::tanh(kC * (u + static_cast<T>(0.044715) * u * u * u)));
}

template <typename T>
T gelu_grad(T u) {
  constexpr T kC = static_cast<T>(0.7978845608028654);
  const T t = std::tanh(kC * (u + static_cast<T>(0.044715) * u * u * u));
  return static_cast<T>(0.5) * (static_cast<T>(1) + t) +
         static_cast<T>(0.5) * u * (static_cast<T>(1) - t * t) * kC *
             (static_cast<T>(1) + static_cast<T>(3 * 0.044715) * u * u);
}

template <typename T>
Matrix<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, const DropoutSpec& spec, std::uint64_t stream) {
  Matrix<T> mask(rows, cols);
  if (!spec.enabled()) {
    mask.setOnes();
    return mask;
  }
  std::mt19937_64 rng(mix_seed(spec.seed, stream));
  const T keep_scale = static_cast<T>(1.0 / (1.0 - spec.rate));
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = uniform01(rng) < spec.rate ? T(0) : keep_scale;
  }
  return mask;
}

template <typename T>
void validate_request(const ModelBundle<T>& m, const ForwardRequest<T>& req) {
  const auto& c = m.config;
  if (req.tokens.size() != req.positions.size()) {
    throw InvalidArgument("forward: tokens and positions differ in length");
  }
  if (req.tokens.empty()) throw InvalidArgument("forward: no tokens");
  for (auto t : req.tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
      throw InvalidArgument("forward: token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  for (auto p : req.positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= c.max_position) {
      throw PositionOverflow("forward: position id " + std::to_string(p) + " outside [0, " +
                             std::to_string(c.max_position) + ")");
    }
  }
  for (const auto* b : req.cache.blocks) {
    if (b == nullptr || b->keys.size() != c.num_layers || b->values.size() != c.num_layers) {
      throw InvalidArgument("forward: cache block layer count does not match config");
    }
    for (std::size_t l = 0; l < c.num_layers; ++l) {
      if (static_cast<std::size_t>(b->keys[l].cols()) != c.model_dim ||
          static_cast<std::size_t>(b->values[l].cols()) != c.model_dim ||
          b->keys[l].rows() != b->values[l].rows()) {
        throw InvalidArgument("forward: cache block shape does not match config");
      }
    }
  }
  if (req.visibility != nullptr) {
    const auto& v = *req.visibility;
    if (v.rows() != req.tokens.size() || v.cols() != req.cache.size() + req.tokens.size()) {
      throw InvalidArgument("forward: visibility shape does not match request");
    }
    if (!v.is_causal_within_new()) throw InvalidArgument("forward: visibility lets a token see a later token");
  }
}

template <typename T>
ForwardResult<T> forward_impl(const ModelBundle<T>& m, const ForwardRequest<T>& req, const DropoutSpec& drop,
                              Trace<T>* trace) {
  validate_request(m, req);
  const auto& c = m.config;
  const auto& w = m.weights;
  const auto n = static_cast<Eigen::Index>(req.tokens.size());
  const auto d = static_cast<Eigen::Index>(c.model_dim);
  const auto hd = static_cast<Eigen::Index>(c.head_dim);
  const auto prior = static_cast<Eigen::Index>(req.cache.size());
  const Eigen::Index cols = prior + n;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c.head_dim)));
  const T neg_inf = -std::numeric_limits<T>::infinity();

  ForwardResult<T> out;
  out.kv.keys.resize(c.num_layers);
  out.kv.values.resize(c.num_layers);
  if (trace) trace->layers.resize(c.num_layers);

  Matrix<T> x(n, d);
  for (Eigen::Index i = 0; i < n; ++i) x.row(i) = w.token_embedding.row(req.tokens[static_cast<std::size_t>(i)]);

  Matrix<T> h, h2;
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv;
  Matrix<T> scores(n, cols);
  for (std::size_t li = 0; li < c.num_layers; ++li) {
    const auto& lw = w.layers[li];
    LayerTrace<T>* lt = trace ? &trace->layers[li] : nullptr;
    if (lt) lt->x_in = x;

    rms_norm(x, lw.attention_norm, h, inv);
    if (lt) lt->r1 = inv;
    Matrix<T> q = h * lw.wq;
    Matrix<T> k = h * lw.wk;
    Matrix<T> v = h * lw.wv;
    apply_rotary(q, req.positions, c.num_heads, c.head_dim);
    apply_rotary(k, req.positions, c.num_heads, c.head_dim);

    Matrix<T> attn(n, d);
    if (lt) lt->probs.resize(c.num_heads);
    for (std::size_t hh = 0; hh < c.num_heads; ++hh) {
      const Eigen::Index off = static_cast<Eigen::Index>(hh) * hd;
      const auto q_h = q.middleCols(off, hd);
      Eigen::Index col = 0;
      for (const auto* b : req.cache.blocks) {
        const auto rows = b->keys[li].rows();
        if (rows == 0) continue;
        scores.middleCols(col, rows).noalias() = q_h * b->keys[li].middleCols(off, hd).transpose();
        col += rows;
      }
      scores.rightCols(n).noalias() = q_h * k.middleCols(off, hd).transpose();
      scores *= scale;

      for (Eigen::Index i = 0; i < n; ++i) {
        auto row = scores.row(i);
        if (req.visibility) {
          for (Eigen::Index j = 0; j < cols; ++j) {
            if (!req.visibility->visible(static_cast<std::size_t>(i), static_cast<std::size_t>(j))) row(j) = neg_inf;
          }
        } else {
          for (Eigen::Index j = prior + i + 1; j < cols; ++j) row(j) = neg_inf;
        }
        const T mx = row.maxCoeff();
        row = (row.array() - mx).exp();
        row /= row.sum();
      }

      auto a_h = attn.middleCols(off, hd);
      a_h.setZero();
      col = 0;
      for (const auto* b : req.cache.blocks) {
        const auto rows = b->values[li].rows();
        if (rows == 0) continue;
        a_h.noalias() += scores.middleCols(col, rows) * b->values[li].middleCols(off, hd);
        col += rows;
      }
      a_h.noalias() += scores.rightCols(n) * v.middleCols(off, hd);
      if (lt) lt->probs[hh] = scores;
    }

    Matrix<T> o = attn * lw.wo;
    if (drop.enabled()) {
      Matrix<T> mask = dropout_mask<T>(n, d, drop, 2 * li);
      o.array() *= mask.array();
      if (lt) lt->drop_attn = std::move(mask);
    }
    if (lt) {
      lt->h = h;
      lt->q = q;
      lt->k = k;
      lt->v = v;
      lt->attn = attn;
    }
    x += o;
    if (lt) lt->x_mid = x;

    rms_norm(x, lw.ffn_norm, h2, inv);
    if (lt) lt->r2 = inv;
    Matrix<T> up = h2 * lw.w_up;
    Matrix<T> act = up.unaryExpr([](T u) { return gelu(u); });
    if (lt) {
      lt->h2 = h2;
      lt->up = up;
      lt->act = act;
    }
    if (drop.enabled()) {
      Matrix<T> mask = dropout_mask<T>(n, act.cols(), drop, 2 * li + 1);
      act.array() *= mask.array();
      if (lt) lt->drop_ffn = std::move(mask);
    }
    x.noalias() += act * lw.w_down;

    out.kv.keys[li] = std::move(k);
    out.kv.values[li] = std::move(v);
  }

  Matrix<T> xf;
  rms_norm(x, w.final_norm, xf, inv);
  out.logits.noalias() = xf * w.output;
  if (trace) {
    trace->x_final = std::move(x);
    trace->xf = std::move(xf);
    trace->rf = inv;
  }
  return out;
}

template <typename T>
RowVector<T> log_softmax(const Eigen::Ref<const RowVector<T>>& logits) {
  const T mx = logits.maxCoeff();
  const T lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

}  // namespace detail

// Runs the new tokens against the cache view. Pure: neither the model nor the
// cached blocks are modified.
template <typename T>
ForwardResult<T> forward(const ModelBundle<T>& model, const ForwardRequest<T>& request,
                         const DropoutSpec& dropout = {}) {
  return detail::forward_impl<T>(model, request, dropout, nullptr);
}

// Log-probability of each continuation token given the cache view and the
// preceding continuation tokens. The first token is scored with
// view.next_logits, so the view must carry them.
template <typename T>
std::vector<T> logprob_of_continuation(const ModelBundle<T>& model, const CacheView<T>& view,
                                       std::span<const TokenId> tokens, std::span<const Position> positions) {
  if (tokens.empty()) throw InvalidArgument("logprob_of_continuation: empty continuation");
  if (tokens.size() != positions.size()) {
    throw InvalidArgument("logprob_of_continuation: tokens and positions differ in length");
  }
  if (view.next_logits == nullptr) {
    throw InvalidArgument("logprob_of_continuation: cache view has no next-token logits");
  }
  for (auto p : positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= model.config.max_position) {
      throw PositionOverflow("logprob_of_continuation: position overflow");
    }
  }
  std::vector<T> out;
  out.reserve(tokens.size());
  out.push_back(detail::log_softmax<T>(*view.next_logits)(tokens[0]));
  if (tokens.size() > 1) {
    ForwardRequest<T> req{tokens.first(tokens.size() - 1), positions.first(positions.size() - 1), view, nullptr};
    const auto res = forward(model, req);
    for (std::size_t i = 1; i < tokens.size(); ++i) {
      const RowVector<T> row = res.logits.row(static_cast<Eigen::Index>(i - 1));
      out.push_back(detail::log_softmax<T>(row)(tokens[i]));
    }
  }
  return out;
}

// Mean cross-entropy over rows where target_mask is set (row i is scored
// against target_ids[i]) and its exact gradient. Full-sequence only: the
// request must not carry a cache.
template <typename T>
BackwardResult<T> backward(const ModelBundle<T>& model, const ForwardRequest<T>& request,
                           std::span<const std::uint8_t> target_mask, std::span<const TokenId> target_ids,
                           const DropoutSpec& dropout = {}) {
  const auto& c = model.config;
  const auto& w = model.weights;
  if (!request.cache.blocks.empty() && request.cache.size() > 0) {
    throw InvalidArgument("backward: cached prefixes are not supported");
  }
  if (target_mask.size() != request.tokens.size() || target_ids.size() != request.tokens.size()) {
    throw InvalidArgument("backward: target mask/ids must match the token count");
  }
  std::size_t count = 0;
  for (auto b : target_mask) count += b ? 1 : 0;
  if (count == 0) throw InvalidArgument("backward: target mask selects no positions");

  detail::Trace<T> trace;
  const auto res = detail::forward_impl<T>(model, request, dropout, &trace);
  const auto n = res.logits.rows();
  const auto hd = static_cast<Eigen::Index>(c.head_dim);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c.head_dim)));

  BackwardResult<T> out;
  out.gradients = Weights<T>::zeros(c);
  auto& g = out.gradients;

  Matrix<T> dlogits = Matrix<T>::Zero(n, res.logits.cols());
  T loss = 0;
  const T inv_count = static_cast<T>(1.0) / static_cast<T>(count);
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!target_mask[static_cast<std::size_t>(i)]) continue;
    const TokenId t = target_ids[static_cast<std::size_t>(i)];
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) throw InvalidArgument("backward: target id outside vocabulary");
    const RowVector<T> row = res.logits.row(i);
    const RowVector<T> lp = detail::log_softmax<T>(row);
    loss -= lp(t);
    dlogits.row(i) = lp.array().exp() * inv_count;
    dlogits(i, t) -= inv_count;
  }
  out.loss = loss * inv_count;

  g.output.noalias() = trace.xf.transpose() * dlogits;
  Matrix<T> dxf = dlogits * w.output.transpose();
  Matrix<T> dx = detail::rms_norm_backward<T>(dxf, trace.x_final, w.final_norm, trace.rf, g.final_norm);

  for (std::size_t li = c.num_layers; li-- > 0;) {
    const auto& lw = w.layers[li];
    auto& lg = g.layers[li];
    const auto& lt = trace.layers[li];

    // Feed-forward branch.
    Matrix<T> act = lt.act;
    if (dropout.enabled()) act.array() *= lt.drop_ffn.array();
    lg.w_down.noalias() = act.transpose() * dx;
    Matrix<T> dact = dx * lw.w_down.transpose();
    if (dropout.enabled()) dact.array() *= lt.drop_ffn.array();
    Matrix<T> dup = dact.array() * lt.up.unaryExpr([](T u) { return detail::gelu_grad(u); }).array();
    lg.w_up.noalias() = lt.h2.transpose() * dup;
    Matrix<T> dh2 = dup * lw.w_up.transpose();
    dx += detail::rms_norm_backward<T>(dh2, lt.x_mid, lw.ffn_norm, lt.r2, lg.ffn_norm);

    // Attention branch.
    Matrix<T> dout = dx;
    if (dropout.enabled()) dout.array() *= lt.drop_attn.array();
    lg.wo.noalias() = lt.attn.transpose() * dout;
    Matrix<T> dattn = dout * lw.wo.transpose();

    Matrix<T> dq = Matrix<T>::Zero(n, lt.q.cols());
    Matrix<T> dk = Matrix<T>::Zero(n, lt.k.cols());
    Matrix<T> dv = Matrix<T>::Zero(n, lt.v.cols());
    for (std::size_t hh = 0; hh < c.num_heads; ++hh) {
      const Eigen::Index off = static_cast<Eigen::Index>(hh) * hd;
      const Matrix<T>& p = lt.probs[hh];
      const Matrix<T> da_h = dattn.middleCols(off, hd);
      Matrix<T> dp = da_h * lt.v.middleCols(off, hd).transpose();
      dv.middleCols(off, hd).noalias() = p.transpose() * da_h;
      Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dp.array() * p.array()).rowwise().sum();
      Matrix<T> ds = p.array() * (dp.array().colwise() - rowdot.array());
      ds *= scale;
      dq.middleCols(off, hd).noalias() = ds * lt.k.middleCols(off, hd);
      dk.middleCols(off, hd).noalias() = ds.transpose() * lt.q.middleCols(off, hd);
    }
    detail::apply_rotary(dq, request.positions, c.num_heads, c.head_dim, -1.0);
    detail::apply_rotary(dk, request.positions, c.num_heads, c.head_dim, -1.0);
    lg.wq.noalias() = lt.h.transpose() * dq;
    lg.wk.noalias() = lt.h.transpose() * dk;
    lg.wv.noalias() = lt.h.transpose() * dv;
    Matrix<T> dh = dq * lw.wq.transpose();
    dh.noalias() += dk * lw.wk.transpose();
    dh.noalias() += dv * lw.wv.transpose();
    dx += detail::rms_norm_backward<T>(dh, lt.x_in, lw.attention_norm, lt.r1, lg.attention_norm);
  }

  for (Eigen::Index i = 0; i < n; ++i) g.token_embedding.row(request.tokens[static_cast<std::size_t>(i)]) += dx.row(i);
  return out;
}

// Converts every tensor to another scalar type (e.g. float -> double for
// gradient checks).
template <typename U, typename T>
ModelBundle<U> cast_model(const ModelBundle<T>& m) {
  ModelBundle<U> out{m.config, Weights<U>::zeros(m.config)};
  std::vector<const T*> src;
  m.weights.visit([&](const std::string&, const T* data, std::size_t, std::size_t) { src.push_back(data); });
  std::size_t idx = 0;
  out.weights.visit([&](const std::string&, U* data, std::size_t r, std::size_t c) {
    for (std::size_t i = 0; i < r * c; ++i) data[i] = static_cast<U>(src[idx][i]);
    ++idx;
  });
  return out;
}

}  // namespace sparse_rag
