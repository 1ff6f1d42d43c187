#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "sparse_rag/model.hpp"

namespace fixtures {

inline sparse_rag::ModelConfig tiny_config(std::size_t vocab = 16, std::size_t layers = 2) {
  return sparse_rag::ModelConfig::make(layers, 2, 8, 16, vocab, 256);
}

// Weights with larger scale than the training init, so that attention and
// GELU run in their nonlinear range.
template <typename T>
sparse_rag::ModelBundle<T> random_model(const sparse_rag::ModelConfig& c, std::uint64_t seed, double scale = 0.5) {
  auto m = sparse_rag::init_model<T>(c, seed);
  std::mt19937_64 rng(seed ^ 0x5eed);
  std::normal_distribution<double> nd(0.0, scale);
  m.weights.visit([&](const std::string& name, T* data, std::size_t r, std::size_t cols) {
    const bool norm = name.find("norm") != std::string::npos;
    for (std::size_t i = 0; i < r * cols; ++i) data[i] = static_cast<T>(norm ? 1.0 + 0.2 * nd(rng) : nd(rng));
  });
  return m;
}

inline std::vector<sparse_rag::TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab,
                                                      sparse_rag::TokenId lo = 0) {
  std::uniform_int_distribution<int> d(lo, static_cast<int>(vocab) - 1);
  std::vector<sparse_rag::TokenId> v(n);
  for (auto& t : v) t = d(rng);
  return v;
}

inline double rel_diff(double a, double b) {
  const double den = std::max(std::abs(a), std::abs(b));
  return den == 0.0 ? 0.0 : std::abs(a - b) / den;
}

// Largest elementwise |a-b| / max(|a|,|b|,floor).
template <typename A, typename B>
double max_rel(const A& a, const B& b, double floor) {
  double worst = 0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double x = static_cast<double>(a(i, j)), y = static_cast<double>(b(i, j));
      worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), floor}));
    }
  return worst;
}

}  // namespace fixtures
