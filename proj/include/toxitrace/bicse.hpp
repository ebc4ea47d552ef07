#pragma once

// Bidirectional cliff-based span extraction over a score sequence.
//
// Positions are 1-indexed and inclusive inside this module, mirroring the
// scan as usually written down. Use to_char_spans() at the boundary.

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "toxitrace/char_span.hpp"

namespace toxitrace::bicse {

enum class Provenance { kForward, kBackward, kMerged };

struct TokenSpan {
  std::size_t start = 0;  // 1-indexed, inclusive
  std::size_t end = 0;    // 1-indexed, inclusive
  Provenance provenance = Provenance::kForward;

  bool operator==(const TokenSpan& o) const { return start == o.start && end == o.end; }
};

struct ScanThresholds {
  double mu = 0.0;     // mean of the scores
  double tau_d = 0.0;  // median absolute adjacent difference
};

struct Options {
  // Also coalesce spans that touch without overlapping, e.g. (2,3) and (4,5).
  bool merge_adjacent = false;
};

// Throws UndefinedThresholds for fewer than two scores, NumericFault on NaN.
ScanThresholds thresholds(std::span<const double> scores);

std::size_t find_cliff_end(std::span<const double> scores, std::size_t start,
                           const ScanThresholds& th);
std::vector<TokenSpan> forward_scan(std::span<const double> scores, const ScanThresholds& th);
std::vector<TokenSpan> merge(std::vector<TokenSpan> spans, const Options& options = {});
std::vector<TokenSpan> extract(std::span<const double> scores, const Options& options = {});

// Maps a span found on the reversed sequence back to forward coordinates.
TokenSpan reverse_map(const TokenSpan& span, std::size_t n);

// 0-indexed half-open character intervals; offsets[k] is the character index
// of token k + 1.
std::vector<CharSpan> to_char_spans(const std::vector<TokenSpan>& spans,
                                    std::span<const std::size_t> offsets);

}  // namespace toxitrace::bicse
