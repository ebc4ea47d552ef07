#pragma once

// Random differentiable graphs for property tests. A graph is a recipe that
// can be replayed on any input matrix, so finite differences and analytic
// gradients see the same function.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "toxitrace/autograd.hpp"

namespace toxitrace::testkit {

struct RandomGraph {
  std::size_t rows = 2;
  std::size_t cols = 3;
  std::function<ag::Var(const ag::Var&)> build;
  std::vector<double> point;

  double eval(std::span<const double> x) const {
    ag::NoGradGuard guard;
    return build(ag::constant(ag::Tensor(rows, cols, std::vector<double>(x.begin(), x.end())))).item();
  }
};

// Minimum distance of any hinge / max / min argument from its kink; graphs
// with arguments closer than 1e-3 are rejected by make_random_graph.
inline thread_local double g_kink_margin = 1e9;

inline ag::Var guarded_hinge(const ag::Var& a) {
  for (double v : a.value().data) g_kink_margin = std::min(g_kink_margin, std::abs(v));
  return ag::hinge(a);
}

inline RandomGraph make_random_graph(std::uint64_t seed) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    std::mt19937_64 rng(seed * 7919 + attempt);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_int_distribution<int> pick(0, 9);
    RandomGraph g;
    g.rows = 2 + rng() % 2;
    g.cols = 2 + rng() % 3;
    const auto r = g.rows;
    const auto c = g.cols;
    ag::Tensor w(c, c);
    for (auto& v : w.data) v = 0.7 * normal(rng);
    ag::Tensor weights(r, c);
    for (auto& v : weights.data) v = normal(rng);
    std::vector<int> ops(3 + rng() % 4);
    for (auto& o : ops) o = pick(rng);
    const double shift = normal(rng);
    g.point.resize(r * c);
    for (auto& v : g.point) v = normal(rng);

    g.build = [=](const ag::Var& x) {
      using namespace ag;
      Var h = x;
      for (int o : ops) {
        switch (o) {
          case 0: h = tanh(h); break;
          case 1: h = matmul(h, constant(w)); break;
          case 2: h = softmax(h); break;
          case 3: h = add(h, scale(mul(h, tanh(h)), 0.5)); break;
          case 4: h = mul(h, broadcast_cols(tanh(row_norm(h)), c)); break;
          case 5: h = log(add_scalar(exp(h), 1.0)); break;
          case 6: h = add(guarded_hinge(add_scalar(h, shift)), scale(h, 0.3)); break;
          case 7: h = sub(h, broadcast_rows(scale(sum_rows(h), 1.0 / static_cast<double>(r)), r)); break;
          case 8: h = add(scale(h, 0.8), scale(exp(tanh(h)), 0.2)); break;
          case 9: h = concat_rows({slice_rows(h, 1, r), slice_rows(h, 0, 1)}); break;
        }
      }
      return add(dot(h, constant(weights)), mean(tanh(h)));
    };
    g_kink_margin = 1e9;
    const double y = g.eval(g.point);
    if (g_kink_margin > 1e-3 && std::abs(y) < 1e3) return g;
  }
}

}  // namespace toxitrace::testkit
