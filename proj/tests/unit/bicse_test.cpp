#include "toxitrace/bicse.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "toxitrace/error.hpp"

using namespace toxitrace;
using bicse::TokenSpan;

namespace {

using Spans = std::vector<TokenSpan>;

const std::vector<double> kCliff = {0.1, 0.1, 0.9, 0.95, 0.2, 0.1};
const std::vector<double> kSlope = {0.2, 0.9, 0.8, 0.7, 0.6, 0.2};

Spans spans(std::initializer_list<std::pair<std::size_t, std::size_t>> list) {
  Spans out;
  for (auto [s, e] : list) out.push_back({s, e});
  return out;
}

Spans reversed_extract(const std::vector<double>& scores) {
  std::vector<double> rev(scores.rbegin(), scores.rend());
  Spans out;
  for (const auto& s : bicse::extract(rev)) out.push_back(bicse::reverse_map(s, scores.size()));
  std::sort(out.begin(), out.end(), [](auto& a, auto& b) { return a.start < b.start; });
  return out;
}

std::vector<double> random_integer_scores(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(1, 30);
  std::uniform_int_distribution<int> value(0, 12);
  std::vector<double> s(len(rng));
  for (auto& x : s) x = value(rng);
  return s;
}

std::vector<double> random_real_scores(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> len(1, 40);
  std::exponential_distribution<double> value(2.0);
  std::vector<double> s(len(rng));
  for (auto& x : s) x = value(rng);
  return s;
}

}  // namespace

TEST(Thresholds, ConstantSequence) {
  const std::vector<double> s = {1, 1, 1, 1};
  auto th = bicse::thresholds(s);
  EXPECT_EQ(th.mu, 1.0);
  EXPECT_EQ(th.tau_d, 0.0);
}

TEST(Thresholds, HandComputedExamples) {
  auto a = bicse::thresholds(kCliff);
  EXPECT_NEAR(a.mu, 2.35 / 6.0, 1e-15);
  EXPECT_NEAR(a.tau_d, 0.1, 1e-15);
  auto b = bicse::thresholds(kSlope);
  EXPECT_NEAR(b.mu, 3.4 / 6.0, 1e-15);
  EXPECT_NEAR(b.tau_d, 0.1, 1e-15);
}

TEST(Thresholds, EvenCountMedianAveragesMiddlePair) {
  const std::vector<double> s = {0, 1, 4, 4, 6};  // diffs 1,3,0,2 -> (1+2)/2
  EXPECT_DOUBLE_EQ(bicse::thresholds(s).tau_d, 1.5);
}

TEST(Thresholds, UndefinedBelowTwoScores) {
  const std::vector<double> one = {0.3};
  EXPECT_THROW(bicse::thresholds(one), bicse::UndefinedThresholds);
  EXPECT_THROW(bicse::thresholds(std::vector<double>{}), bicse::UndefinedThresholds);
}

TEST(Thresholds, NanIsNumericFault) {
  const std::vector<double> s = {0.3, NAN, 0.1};
  EXPECT_THROW(bicse::thresholds(s), NumericFault);
  EXPECT_THROW(bicse::extract(s), NumericFault);
}

TEST(FindCliffEnd, StopsAtCliffEdge) {
  EXPECT_EQ(bicse::find_cliff_end(kCliff, 3, bicse::thresholds(kCliff)), 4u);
}

TEST(FindCliffEnd, FallsBackToLastAboveMean) {
  EXPECT_EQ(bicse::find_cliff_end(kSlope, 2, bicse::thresholds(kSlope)), 5u);
}

TEST(FindCliffEnd, RunsToTheEndWithoutCliff) {
  const std::vector<double> s = {0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0};
  EXPECT_EQ(bicse::find_cliff_end(s, 4, bicse::thresholds(s)), 7u);
}

TEST(FindCliffEnd, StartOutOfRange) {
  auto th = bicse::thresholds(kCliff);
  EXPECT_THROW(bicse::find_cliff_end(kCliff, 0, th), ContractViolation);
  EXPECT_THROW(bicse::find_cliff_end(kCliff, 7, th), ContractViolation);
}

TEST(ForwardScan, Examples) {
  const std::vector<double> flat = {1, 1, 1, 1};
  EXPECT_TRUE(bicse::forward_scan(flat, bicse::thresholds(flat)).empty());
  EXPECT_EQ(bicse::forward_scan(kCliff, bicse::thresholds(kCliff)), spans({{3, 4}}));
  EXPECT_EQ(bicse::forward_scan(kSlope, bicse::thresholds(kSlope)), spans({{2, 5}}));
}

TEST(Extract, Examples) {
  EXPECT_EQ(bicse::extract(kCliff), spans({{3, 4}}));
  EXPECT_EQ(bicse::extract(kSlope), spans({{2, 5}}));
  EXPECT_TRUE(bicse::extract(std::vector<double>(9, 0.4)).empty());
}

TEST(Extract, ShortSequencesAreEmpty) {
  EXPECT_TRUE(bicse::extract(std::vector<double>{}).empty());
  EXPECT_TRUE(bicse::extract(std::vector<double>{5.0}).empty());
  EXPECT_TRUE(bicse::extract(std::vector<double>{0.0, 5.0}).empty());
}

TEST(Extract, BackwardScanRecoversRisingTail) {
  // Forward scan alone stops at the plateau; the backward scan sees the
  // descent from the right and extends the span.
  const std::vector<double> s = {0.0, 0.0, 1.0, 1.0, 1.0, 3.0, 0.0, 0.0};
  auto th = bicse::thresholds(s);
  auto fwd = bicse::forward_scan(s, th);
  auto all = bicse::extract(s);
  ASSERT_FALSE(all.empty());
  for (const auto& f : fwd) {
    bool covered = false;
    for (const auto& a : all) covered |= a.start <= f.start && f.end <= a.end;
    EXPECT_TRUE(covered);
  }
}

TEST(Merge, Examples) {
  EXPECT_EQ(bicse::merge(spans({{3, 4}, {3, 4}})), spans({{3, 4}}));
  EXPECT_EQ(bicse::merge(spans({{4, 7}, {2, 5}})), spans({{2, 7}}));
  EXPECT_EQ(bicse::merge(spans({{2, 3}, {4, 5}})), spans({{2, 3}, {4, 5}}));
  EXPECT_EQ(bicse::merge(spans({{2, 3}, {4, 5}}), {.merge_adjacent = true}), spans({{2, 5}}));
  EXPECT_EQ(bicse::merge(spans({{2, 3}, {4, 5}}))[0].provenance, bicse::Provenance::kForward);
  EXPECT_EQ(bicse::merge(spans({{2, 5}, {4, 7}}))[0].provenance, bicse::Provenance::kMerged);
}

TEST(ReverseMap, Example) {
  auto r = bicse::reverse_map({1, 2}, 6);
  EXPECT_EQ(r.start, 5u);
  EXPECT_EQ(r.end, 6u);
  EXPECT_EQ(r.provenance, bicse::Provenance::kBackward);
}

TEST(BicseProperty, ReversalSymmetry) {
  std::mt19937_64 rng(101);
  for (int t = 0; t < 1000; ++t) {
    auto s = t % 2 ? random_real_scores(rng) : random_integer_scores(rng);
    EXPECT_EQ(bicse::extract(s), reversed_extract(s)) << "trial " << t;
  }
}

TEST(BicseProperty, ScaleAndShiftInvariance) {
  // Integer scores keep every comparison exact under the transforms.
  std::mt19937_64 rng(202);
  for (int t = 0; t < 1000; ++t) {
    auto s = random_integer_scores(rng);
    auto base = bicse::extract(s);
    for (double c : {2.0, 3.0, 0.5, 7.0}) {
      auto scaled = s;
      for (auto& x : scaled) x *= c;
      EXPECT_EQ(bicse::extract(scaled), base) << "trial " << t << " scale " << c;
    }
    for (double c : {-5.0, 1.0, 100.0}) {
      auto shifted = s;
      for (auto& x : shifted) x += c;
      EXPECT_EQ(bicse::extract(shifted), base) << "trial " << t << " shift " << c;
    }
  }
}

TEST(BicseProperty, OutputWellFormedWithEvidence) {
  std::mt19937_64 rng(303);
  for (int t = 0; t < 1000; ++t) {
    auto s = t % 2 ? random_real_scores(rng) : random_integer_scores(rng);
    auto out = bicse::extract(s);
    if (s.size() < 3) {
      EXPECT_TRUE(out.empty());
      continue;
    }
    const double mu = bicse::thresholds(s).mu;
    for (std::size_t k = 0; k < out.size(); ++k) {
      EXPECT_GE(out[k].start, 1u);
      EXPECT_LE(out[k].start, out[k].end);
      EXPECT_LE(out[k].end, s.size());
      if (k > 0) EXPECT_LT(out[k - 1].end, out[k].start);
      bool evidence = false;
      for (std::size_t i = out[k].start; i <= out[k].end; ++i) evidence |= s[i - 1] > mu;
      EXPECT_TRUE(evidence) << "trial " << t;
    }
  }
}
