#include "toxitrace/inference.hpp"

#include <fstream>

#include "json.hpp"
#include "toxitrace/error.hpp"

namespace toxitrace {

Extraction extract_spans(const EncoderParams& params, const Vocabulary& vocab, std::string_view text,
                         SaliencyKind kind, const bicse::Options& options) {
  if (text.empty()) throw ContractViolation("extract on empty text");
  const auto tokens = tokenize(vocab, text);
  Extraction out;
  out.prediction = predict_ids(params, tokens.ids);
  out.saliency = kind == SaliencyKind::kGradientTimesInput ? saliency_sequence(params, tokens, kToxic)
                                                           : gradnorm_sequence(params, tokens, kToxic);
  if (out.prediction.label == kToxic) {
    out.token_spans = bicse::extract(out.saliency.scores, options);
    out.spans = bicse::to_char_spans(out.token_spans, out.saliency.offsets);
  }
  return out;
}

PredictionRecord to_record(const std::string& id, const Extraction& extraction, bool with_saliency) {
  PredictionRecord r;
  r.id = id;
  r.label = extraction.prediction.label;
  r.toxic_probability = extraction.prediction.toxic_probability;
  r.spans = extraction.spans;
  if (with_saliency) r.saliency = extraction.saliency.scores;
  return r;
}

std::string prediction_to_json(const PredictionRecord& r) {
  nlohmann::ordered_json spans = nlohmann::ordered_json::array();
  for (const auto& s : r.spans) spans.push_back({s.begin, s.end});
  nlohmann::ordered_json j = {
      {"id", r.id}, {"label", r.label}, {"toxic_probability", r.toxic_probability}, {"spans", spans}};
  if (r.saliency) j["saliency"] = *r.saliency;
  return j.dump();
}

PredictionRecord prediction_from_json(const std::string& line) {
  try {
    const auto j = nlohmann::json::parse(line);
    PredictionRecord r;
    r.id = j.at("id").get<std::string>();
    r.label = j.at("label").get<int>();
    if (r.label != kToxic && r.label != kNonToxic) throw DataError("prediction " + r.id + ": label must be 0 or 1");
    r.toxic_probability = j.at("toxic_probability").get<double>();
    for (const auto& s : j.at("spans")) {
      if (!s.is_array() || s.size() != 2) throw DataError("prediction " + r.id + ": span must be [begin,end]");
      r.spans.push_back({s[0].get<std::size_t>(), s[1].get<std::size_t>()});
      if (r.spans.back().begin >= r.spans.back().end) throw DataError("prediction " + r.id + ": empty span");
    }
    if (j.contains("saliency")) r.saliency = j["saliency"].get<std::vector<double>>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed prediction: ") + e.what());
  }
}

std::vector<PredictionRecord> load_predictions(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<PredictionRecord> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      out.push_back(prediction_from_json(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace toxitrace
