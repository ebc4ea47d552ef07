#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "toxitrace/char_span.hpp"
#include "toxitrace/corpus.hpp"
#include "toxitrace/encoder.hpp"
#include "toxitrace/inference.hpp"

namespace toxitrace {

struct SpanPrediction {
  std::string id;
  std::vector<CharSpan> predicted;
  std::vector<CharSpan> gold;
  std::size_t text_length = 0;
};

struct OverlapMetrics {
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  std::size_t matched = 0;
  std::size_t gold_total = 0;
  std::size_t pred_total = 0;
  bool undefined = false;  // a zero denominator forced a metric to 0
};

// Pairs every corpus record carrying gold spans with its prediction, in corpus
// order. Throws DataError on a missing or duplicate prediction, or a predicted
// span outside the text.
std::vector<SpanPrediction> pair_with_gold(const std::vector<CorpusRecord>& corpus,
                                           const std::vector<PredictionRecord>& predictions);

enum class OverlapDenominator { kGold, kPredicted, kUnion };

struct OverlapOptions {
  double threshold = 0.5;
  OverlapDenominator denominator = OverlapDenominator::kGold;
};

// A prediction matches a gold span when their character overlap exceeds
// `threshold` times the denominator length. One-to-one, greedy by overlap.
OverlapMetrics overlap_metrics(std::span<const SpanPrediction> predictions, const OverlapOptions& options = {});

struct CharMetrics {
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  double iou = 0.0;
  std::size_t intersection = 0;
  std::size_t predicted_chars = 0;
  std::size_t gold_chars = 0;
  std::size_t union_chars = 0;
  std::size_t samples_without_prediction = 0;
  std::size_t samples_without_gold = 0;
};

enum class Averaging { kMicro, kMacro };

// Micro: ratios of counts pooled over samples. Macro: per-sample ratios
// averaged, a zero denominator contributing 0. Counts are pooled either way.
CharMetrics char_metrics(std::span<const SpanPrediction> predictions, Averaging averaging = Averaging::kMicro);

struct ClassificationMetrics {
  double accuracy = 0.0;
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  double macro_f1 = 0.0;
  std::size_t count = 0;
};

// Toxic (1) is the positive class.
ClassificationMetrics classification_metrics(std::span<const int> labels, std::span<const int> predictions);

// Token ids with every token whose character lies in `spans` replaced by the mask id.
std::vector<std::size_t> mask_spans(const TokenizedText& tokens, std::span<const CharSpan> spans);

struct DropResult {
  double before = 0.0;
  double after = 0.0;
  double drop = 0.0;
  std::size_t masked = 0;
  bool empty = false;
};

DropResult confidence_drop(const EncoderParams& params, const TokenizedText& tokens,
                           std::span<const CharSpan> spans);

// k distinct positions in [0, n), sorted.
std::vector<std::size_t> random_positions(std::size_t n, std::size_t k, std::uint64_t seed);

DropResult random_mask_baseline(const EncoderParams& params, const TokenizedText& tokens, std::size_t k,
                                std::uint64_t seed);

struct FaithfulnessRecord {
  std::string id;
  double before = 0.0;
  double after_span = 0.0;
  double after_random = 0.0;
  double span_drop = 0.0;
  double random_drop = 0.0;
  std::size_t masked = 0;
  std::uint64_t seed = 0;
  bool empty_spans = false;
};

struct FaithfulnessSummary {
  std::size_t samples = 0;
  std::size_t empty_span_samples = 0;
  double mean_span_drop = 0.0;
  double mean_random_drop = 0.0;
};

FaithfulnessSummary summarize(std::span<const FaithfulnessRecord> records);

// Seed for one sample's random mask, derived from the run seed and the id.
std::uint64_t sample_seed(std::uint64_t seed, const std::string& id);

// Span masking drop plus a random mask of the same token count.
FaithfulnessRecord faithfulness_record(const EncoderParams& params, const TokenizedText& tokens,
                                       const std::string& id, std::span<const CharSpan> spans,
                                       std::uint64_t seed);

// Tokens in the top `fraction` of scores (at least one), as merged character spans.
std::vector<CharSpan> top_fraction_spans(std::span<const double> scores, std::span<const std::size_t> offsets,
                                         double fraction);

struct MetricsReport {
  std::optional<ClassificationMetrics> classification;
  std::optional<OverlapMetrics> overlap;
  std::optional<CharMetrics> character;
  std::optional<FaithfulnessSummary> faithfulness;
  std::size_t samples = 0;
};

std::string report_to_json(const MetricsReport& report);
// Flat "section,metric,value" rows.
std::string report_to_csv(const MetricsReport& report);

}  // namespace toxitrace
