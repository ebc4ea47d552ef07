#include "toxitrace/saliency.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "toxitrace/error.hpp"

using namespace toxitrace;
using ag::Tensor;

namespace {

TokenizedText tokens_for(std::vector<std::size_t> content) {
  TokenizedText t;
  t.ids.push_back(Vocabulary::kCls);
  for (std::size_t k = 0; k < content.size(); ++k) {
    t.ids.push_back(content[k]);
    t.offsets.push_back(k);
  }
  t.ids.push_back(Vocabulary::kSep);
  return t;
}

}  // namespace

TEST(Saliency, ZeroClassifierGivesZeroScores) {
  auto p = EncoderParams::random(12, 8, 5);
  p.cls_weight = Tensor(8, 2);
  auto seq = gradnorm_sequence(p, tokens_for({5, 6, 7, 8}));
  EXPECT_EQ(seq.scores, std::vector<double>(4, 0.0));
  EXPECT_EQ(seq.kind, SaliencyKind::kGradientNorm);
  EXPECT_EQ(seq.target_class, kToxic);
  EXPECT_EQ(seq.offsets, (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(Saliency, LinearScalarModelHasConstantNorms) {
  // log P = w * sum(e_i) with scalar embeddings -> g_i = |w|.
  auto e = ag::leaf(Tensor::column({0.3, -1.0, 2.0, 0.5}));
  const double w = -1.7;
  auto log_p = ag::scale(ag::sum(e), w);
  auto g = gradient_norms(log_p, e, {0, 1, 2, 3}, false).value().data;
  for (double gi : g) EXPECT_DOUBLE_EQ(gi, 1.7);
}

TEST(Saliency, GradientTimesInputScalarCase) {
  // e_i = 2, d log P / d e_i = 3 -> s_i = 6; a zero embedding scores zero.
  auto e = ag::leaf(Tensor::column({2.0, 0.0}));
  auto log_p = ag::scale(ag::sum(e), 3.0);
  auto s = gradient_input_norms(log_p, e, {0, 1}).value().data;
  EXPECT_DOUBLE_EQ(s[0], 6.0);
  EXPECT_DOUBLE_EQ(s[1], 0.0);
}

TEST(Saliency, GradientNormMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    auto p = EncoderParams::random(14, 6, rng());
    auto vars = bind(p, false);
    auto tok = tokens_for({5, 9, 13, 7, 6});
    auto enc = encode(p, tok.ids);
    const Tensor x0 = enc.embeddings.value();
    auto analytic = ag::gradient(enc.log_prob(kToxic), {enc.embeddings}, false)[0].value();
    auto seq = gradnorm_sequence(p, tok);
    for (std::size_t row = 1; row <= 5; ++row) {
      std::vector<double> point(x0.data.begin() + row * 6, x0.data.begin() + (row + 1) * 6);
      std::vector<double> grad(analytic.data.begin() + row * 6, analytic.data.begin() + (row + 1) * 6);
      auto f = [&](std::span<const double> e) {
        Tensor x = x0;
        std::copy(e.begin(), e.end(), x.data.begin() + row * 6);
        return encode_embeddings(vars, tok.ids, ag::constant(x)).log_probs.value().data[kToxic];
      };
      EXPECT_LT(ag::finite_difference_check(f, point, grad, 1e-5), 1e-6);
      double norm = 0.0;
      for (double v : grad) norm += v * v;
      EXPECT_NEAR(seq.scores[row - 1], std::sqrt(norm), 1e-15);
    }
  }
}

TEST(SaliencyProperty, CauchySchwarzBoundAndDeterminism) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    auto p = EncoderParams::random(20, 8, rng());
    std::vector<std::size_t> content(2 + rng() % 15);
    for (auto& id : content) id = 5 + rng() % 15;
    auto tok = tokens_for(content);
    const int cls = trial % 2;
    auto g = gradnorm_sequence(p, tok, cls);
    auto s = saliency_sequence(p, tok, cls);
    ASSERT_EQ(g.scores.size(), content.size());
    ASSERT_EQ(s.scores.size(), content.size());
    auto e = encode(p, tok.ids).embeddings.value();
    for (std::size_t i = 0; i < content.size(); ++i) {
      double norm = 0.0;
      for (std::size_t c = 0; c < e.cols; ++c) norm += e(i + 1, c) * e(i + 1, c);
      EXPECT_GE(s.scores[i], 0.0);
      EXPECT_TRUE(std::isfinite(g.scores[i]));
      EXPECT_LE(s.scores[i], std::sqrt(norm) * g.scores[i] * (1 + 1e-12) + 1e-300);
    }
    EXPECT_EQ(saliency_sequence(p, tok, cls).scores, s.scores);
  }
}

TEST(Saliency, RecordedNormsAreDifferentiable) {
  auto p = EncoderParams::random(10, 4, 3);
  auto vars = bind(p, true);
  std::vector<std::size_t> ids = {1, 5, 6, 7, 2};
  auto enc = encode(vars, ids);
  auto g = gradnorm_nodes(enc, kToxic);
  EXPECT_TRUE(g.requires_grad());
  EXPECT_EQ(g.rows(), 3u);
  auto grads = ag::gradient(ag::sum(g), vars.tensors, false);
  double mass = 0.0;
  for (double x : grads[2].value().data) mass += std::abs(x);  // query projection
  EXPECT_GT(mass, 0.0);
}

TEST(Saliency, BadClassIsRejected) {
  auto p = EncoderParams::random(10, 4, 3);
  EXPECT_THROW(gradnorm_sequence(p, tokens_for({5, 6}), 2), ContractViolation);
}
