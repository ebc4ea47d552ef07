#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "toxitrace/bicse.hpp"
#include "toxitrace/char_span.hpp"
#include "toxitrace/encoder.hpp"
#include "toxitrace/saliency.hpp"

namespace toxitrace {

struct Extraction {
  Prediction prediction;
  SaliencySequence saliency;  // toxic-class scores
  std::vector<bicse::TokenSpan> token_spans;
  std::vector<CharSpan> spans;  // empty unless predicted toxic
};

// Classify, score every character toward the toxic class, and run the span
// scan when the prediction is toxic.
Extraction extract_spans(const EncoderParams& params, const Vocabulary& vocab, std::string_view text,
                         SaliencyKind kind = SaliencyKind::kGradientTimesInput,
                         const bicse::Options& options = {});

// One line of the extraction output.
struct PredictionRecord {
  std::string id;
  int label = kNonToxic;
  double toxic_probability = 0.0;
  std::vector<CharSpan> spans;
  std::optional<std::vector<double>> saliency;  // per character, when dumped

  bool operator==(const PredictionRecord&) const = default;
};

PredictionRecord to_record(const std::string& id, const Extraction& extraction, bool with_saliency);
std::string prediction_to_json(const PredictionRecord& record);
PredictionRecord prediction_from_json(const std::string& line);
// Errors carry the 1-based line number.
std::vector<PredictionRecord> load_predictions(const std::filesystem::path& path);

}  // namespace toxitrace
