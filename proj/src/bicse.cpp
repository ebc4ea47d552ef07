#include "toxitrace/bicse.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "toxitrace/error.hpp"

namespace toxitrace::bicse {

namespace {

void check_finite(std::span<const double> scores) {
  for (double x : scores) {
    if (!std::isfinite(x)) throw NumericFault("bicse", "non-finite score");
  }
}

// g(i) with 1-indexed i.
struct View {
  std::span<const double> s;
  double operator()(std::size_t i) const { return s[i - 1]; }
  std::size_t n() const { return s.size(); }
};

}  // namespace

ScanThresholds thresholds(std::span<const double> scores) {
  if (scores.size() < 2) {
    throw UndefinedThresholds("scan thresholds need at least two scores");
  }
  check_finite(scores);
  ScanThresholds th;
  // Summed in sorted order so a sequence and its reversal get the same mean bit for bit.
  std::vector<double> sorted(scores.begin(), scores.end());
  std::sort(sorted.begin(), sorted.end());
  th.mu = std::accumulate(sorted.begin(), sorted.end(), 0.0) / static_cast<double>(sorted.size());

  std::vector<double> diffs(scores.size() - 1);
  for (std::size_t i = 1; i < scores.size(); ++i) diffs[i - 1] = std::abs(scores[i] - scores[i - 1]);
  std::sort(diffs.begin(), diffs.end());
  const std::size_t m = diffs.size();
  th.tau_d = m % 2 == 1 ? diffs[m / 2] : 0.5 * (diffs[m / 2 - 1] + diffs[m / 2]);
  return th;
}

std::size_t find_cliff_end(std::span<const double> scores, std::size_t start,
                           const ScanThresholds& th) {
  const View g{scores};
  const std::size_t n = g.n();
  if (start < 1 || start > n) throw ContractViolation("cliff scan start out of range");
  std::size_t p = start;
  for (std::size_t i = start; i <= n; ++i) {
    if (g(i) > th.mu) p = i;
    if (i + 2 <= n && g(i) - g(i + 1) > th.tau_d) {
      if (g(i + 1) - g(i + 2) <= th.tau_d) return i;
    }
    if (g(i) <= th.mu) return p;
  }
  return p;
}

std::vector<TokenSpan> forward_scan(std::span<const double> scores, const ScanThresholds& th) {
  const View g{scores};
  const std::size_t n = g.n();
  std::vector<TokenSpan> spans;
  std::size_t i = 2;
  while (i <= n) {
    if (g(i) > th.mu && g(i) - g(i - 1) > th.tau_d) {
      const std::size_t s = i;
      const std::size_t e = find_cliff_end(scores, s, th);
      spans.push_back({s, e, Provenance::kForward});
      i = e + 1;
    } else {
      ++i;
    }
  }
  return spans;
}

TokenSpan reverse_map(const TokenSpan& span, std::size_t n) {
  return {n + 1 - span.end, n + 1 - span.start, Provenance::kBackward};
}

std::vector<TokenSpan> merge(std::vector<TokenSpan> spans, const Options& options) {
  std::sort(spans.begin(), spans.end(), [](const TokenSpan& a, const TokenSpan& b) {
    return a.start != b.start ? a.start < b.start : a.end < b.end;
  });
  std::vector<TokenSpan> out;
  for (const auto& s : spans) {
    const bool joins = !out.empty() && (s.start <= out.back().end ||
                                        (options.merge_adjacent && s.start == out.back().end + 1));
    if (joins) {
      auto& last = out.back();
      last.end = std::max(last.end, s.end);
      last.provenance = Provenance::kMerged;
    } else {
      out.push_back(s);
    }
  }
  return out;
}

std::vector<TokenSpan> extract(std::span<const double> scores, const Options& options) {
  check_finite(scores);
  const std::size_t n = scores.size();
  if (n < 3) return {};
  const auto th = thresholds(scores);

  auto spans = forward_scan(scores, th);
  std::vector<double> reversed(scores.rbegin(), scores.rend());
  for (const auto& s : forward_scan(reversed, th)) spans.push_back(reverse_map(s, n));
  return merge(std::move(spans), options);
}

std::vector<CharSpan> to_char_spans(const std::vector<TokenSpan>& spans,
                                    std::span<const std::size_t> offsets) {
  std::vector<CharSpan> out;
  for (const auto& s : spans) {
    if (s.start < 1 || s.end < s.start || s.end > offsets.size()) {
      throw ContractViolation("token span outside the offset map");
    }
    out.push_back({offsets[s.start - 1], offsets[s.end - 1] + 1});
  }
  return normalize_spans(std::move(out));
}

}  // namespace toxitrace::bicse
