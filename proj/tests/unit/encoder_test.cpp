#include "toxitrace/encoder.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "toxitrace/error.hpp"
#include "toxitrace/utf8.hpp"

using namespace toxitrace;

namespace {

const std::vector<std::string> kTexts = {"河南人挺狠", "abc", "你好 world"};

std::vector<std::size_t> random_ids(std::mt19937_64& rng, std::size_t vocab, std::size_t n) {
  std::vector<std::size_t> ids = {Vocabulary::kCls};
  for (std::size_t i = 0; i < n; ++i) ids.push_back(rng() % vocab);
  ids.push_back(Vocabulary::kSep);
  return ids;
}

}  // namespace

TEST(Utf8, RoundTripAndRejectsMalformed) {
  const std::string s = "河南人a\xF0\x9F\x98\x80";
  auto cps = utf8::decode(s);
  EXPECT_EQ(cps.size(), 5u);
  EXPECT_EQ(cps[0], U'河');
  EXPECT_EQ(utf8::encode(cps), s);
  EXPECT_THROW(utf8::decode("\xE6\xB2"), DataError);
  EXPECT_THROW(utf8::decode("\xC0\x80"), DataError);
}

TEST(Vocabulary, ReservedIdsAndDenseCorpusIds) {
  auto v = Vocabulary::build(kTexts);
  EXPECT_EQ(v.size(), Vocabulary::kReserved + v.symbols().size());
  EXPECT_EQ(v.id(U'\U0001F600'), Vocabulary::kUnk);
  std::vector<bool> seen(v.size(), false);
  for (char32_t ch : v.symbols()) {
    auto id = v.id(ch);
    ASSERT_GE(id, Vocabulary::kReserved);
    ASSERT_LT(id, v.size());
    EXPECT_FALSE(seen[id]);
    seen[id] = true;
  }
  EXPECT_THROW(Vocabulary::from_symbols({U'a', U'a'}), DataError);
}

TEST(Tokenize, OffsetsRoundTripToText) {
  auto v = Vocabulary::build(kTexts);
  for (const auto& text : kTexts) {
    auto tok = tokenize(v, text);
    auto chars = utf8::decode(text);
    ASSERT_EQ(tok.ids.size(), chars.size() + 2);
    EXPECT_EQ(tok.ids.front(), Vocabulary::kCls);
    EXPECT_EQ(tok.ids.back(), Vocabulary::kSep);
    std::u32string rebuilt;
    for (std::size_t k = 0; k < tok.offsets.size(); ++k) {
      rebuilt += chars[tok.offsets[k]];
      EXPECT_EQ(v.symbols()[tok.ids[k + 1] - Vocabulary::kReserved], chars[tok.offsets[k]]);
    }
    EXPECT_EQ(rebuilt, chars);
  }
}

TEST(Tokenize, OverlengthIsTruncationError) {
  auto v = Vocabulary::build(kTexts);
  EXPECT_NO_THROW(tokenize(v, std::string(510, 'a')));
  EXPECT_THROW(tokenize(v, std::string(511, 'a')), TruncationError);
}

TEST(Encoder, ZeroParamsGiveEvenOdds) {
  auto p = EncoderParams::zeros(10, 8);
  std::vector<std::size_t> ids = {1, 5, 6, 7, 2};
  auto enc = encode(p, ids);
  EXPECT_DOUBLE_EQ(enc.probability(kToxic), 0.5);
  EXPECT_DOUBLE_EQ(enc.probability(kNonToxic), 0.5);
  EXPECT_EQ(predict_ids(p, ids).label, kNonToxic);  // tie goes to non-toxic
}

TEST(Encoder, Shapes) {
  auto p = EncoderParams::random(12, 8, 1);
  std::vector<std::size_t> ids = {1, 5, 6, 7, 2};
  auto enc = encode(p, ids);
  EXPECT_EQ(enc.embeddings.rows(), 5u);
  EXPECT_EQ(enc.embeddings.cols(), 8u);
  EXPECT_EQ(enc.states.rows(), 5u);
  EXPECT_EQ(enc.cls_state.rows(), 1u);
  EXPECT_EQ(enc.num_tokens(), 3u);
  EXPECT_EQ(enc.content_rows(), (std::vector<std::size_t>{1, 2, 3}));
  EXPECT_TRUE(enc.embeddings.requires_grad());
}

TEST(Encoder, ParameterCensusMatchesShapes) {
  auto p = EncoderParams::random(30, 32, 3);
  const std::size_t d = 32;
  const std::size_t expected = 30 * d + 512 * d + 4 * d * d + 2 * 4 * d * d + d * 2 + 2;
  EXPECT_EQ(p.parameter_count(), expected);
  EXPECT_EQ(p.flatten().size(), expected);
  EXPECT_TRUE(p.all_finite());
  auto q = EncoderParams::zeros(30, 32);
  q.assign(p.flatten());
  EXPECT_EQ(p, q);
}

TEST(Encoder, Deterministic) {
  auto p = EncoderParams::random(20, 16, 9);
  std::vector<std::size_t> ids = {1, 5, 9, 13, 7, 2};
  EXPECT_EQ(encode(p, ids).log_probs.value(), encode(p, ids).log_probs.value());
  EXPECT_EQ(EncoderParams::random(20, 16, 9), p);
}

TEST(Encoder, ContractErrors) {
  auto p = EncoderParams::random(10, 8, 1);
  std::vector<std::size_t> bad = {1, 10, 2};
  EXPECT_THROW(encode(p, bad), ContractViolation);
  EXPECT_THROW(encode(p, std::vector<std::size_t>(kMaxSequence + 1, 5)), ContractViolation);
  EXPECT_THROW(predict(p, Vocabulary::build(kTexts), ""), ContractViolation);
}

TEST(EncoderProperty, ProbabilitiesNormalizedAndGradientFlows) {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 30; ++t) {
    auto p = EncoderParams::random(15, 8, rng());
    auto ids = random_ids(rng, 15, 1 + rng() % 20);
    auto enc = encode(p, ids);
    EXPECT_NEAR(enc.probability(0) + enc.probability(1), 1.0, 1e-9);
    auto grad = ag::gradient(enc.log_prob(kToxic), {enc.embeddings}, false)[0].value();
    bool nonzero = false;
    for (std::size_t r = 1; r + 1 < grad.rows; ++r)
      for (std::size_t c = 0; c < grad.cols; ++c) nonzero |= grad(r, c) != 0.0;
    EXPECT_TRUE(nonzero);
  }
}

TEST(Encoder, TrainableBindingReachesEveryTensor) {
  auto p = EncoderParams::random(10, 4, 2);
  auto vars = bind(p, true);
  std::vector<std::size_t> ids = {1, 5, 6, 2};
  auto enc = encode(vars, ids);
  auto grads = ag::gradient(enc.log_prob(kToxic), vars.tensors, false);
  for (std::size_t k = 0; k < grads.size(); ++k) {
    double mass = 0.0;
    for (double x : grads[k].value().data) mass += std::abs(x);
    EXPECT_GT(mass, 0.0) << EncoderParams::field_names()[k];
  }
}
