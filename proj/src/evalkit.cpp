#include "toxitrace/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "toxitrace/error.hpp"
#include "toxitrace/utf8.hpp"

namespace toxitrace {

using json = nlohmann::ordered_json;

namespace {

std::size_t overlap(const CharSpan& a, const CharSpan& b) {
  const auto lo = std::max(a.begin, b.begin);
  const auto hi = std::min(a.end, b.end);
  return hi > lo ? hi - lo : 0;
}

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

double harmonic(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

std::set<std::size_t> covered(std::span<const CharSpan> spans) {
  std::set<std::size_t> chars;
  for (const auto& s : spans)
    for (auto c = s.begin; c < s.end; ++c) chars.insert(c);
  return chars;
}

}  // namespace

std::vector<SpanPrediction> pair_with_gold(const std::vector<CorpusRecord>& corpus,
                                           const std::vector<PredictionRecord>& predictions) {
  std::map<std::string, const PredictionRecord*> by_id;
  for (const auto& p : predictions) {
    if (!by_id.emplace(p.id, &p).second) throw DataError("duplicate prediction for " + p.id);
  }
  std::vector<SpanPrediction> out;
  for (const auto& r : corpus) {
    if (!r.gold_spans) continue;
    const auto it = by_id.find(r.id);
    if (it == by_id.end()) throw DataError("no prediction for record " + r.id);
    SpanPrediction sp;
    sp.id = r.id;
    sp.gold = *r.gold_spans;
    sp.predicted = it->second->spans;
    sp.text_length = utf8::decode(r.text).size();
    for (const auto& s : sp.predicted) {
      if (s.end > sp.text_length) throw DataError("prediction " + r.id + ": span outside the text");
    }
    out.push_back(std::move(sp));
  }
  return out;
}

OverlapMetrics overlap_metrics(std::span<const SpanPrediction> predictions, const OverlapOptions& options) {
  OverlapMetrics m;
  for (const auto& p : predictions) {
    m.gold_total += p.gold.size();
    m.pred_total += p.predicted.size();
    // (overlap, gold index, pred index) for every admissible pair.
    std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> pairs;
    for (std::size_t g = 0; g < p.gold.size(); ++g) {
      for (std::size_t k = 0; k < p.predicted.size(); ++k) {
        const auto ov = overlap(p.predicted[k], p.gold[g]);
        std::size_t den = p.gold[g].length();
        if (options.denominator == OverlapDenominator::kPredicted) den = p.predicted[k].length();
        if (options.denominator == OverlapDenominator::kUnion) den = p.gold[g].length() + p.predicted[k].length() - ov;
        if (ov > 0 && static_cast<double>(ov) > options.threshold * static_cast<double>(den)) {
          pairs.emplace_back(ov, g, k);
        }
      }
    }
    std::sort(pairs.begin(), pairs.end(), [&](const auto& a, const auto& b) {
      if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
      // Ties resolved by span position so input order does not matter.
      const auto& ga = p.gold[std::get<1>(a)];
      const auto& gb = p.gold[std::get<1>(b)];
      if (ga != gb) return ga < gb;
      return p.predicted[std::get<2>(a)] < p.predicted[std::get<2>(b)];
    });
    std::vector<bool> gold_used(p.gold.size()), pred_used(p.predicted.size());
    for (const auto& [ov, g, k] : pairs) {
      if (gold_used[g] || pred_used[k]) continue;
      gold_used[g] = pred_used[k] = true;
      ++m.matched;
    }
  }
  m.undefined = m.gold_total == 0 || m.pred_total == 0;
  m.recall = ratio(m.matched, m.gold_total);
  m.precision = ratio(m.matched, m.pred_total);
  m.f1 = harmonic(m.precision, m.recall);
  return m;
}

CharMetrics char_metrics(std::span<const SpanPrediction> predictions, Averaging averaging) {
  CharMetrics m;
  double p_sum = 0.0, r_sum = 0.0, f_sum = 0.0, iou_sum = 0.0;
  for (const auto& p : predictions) {
    const auto pred = covered(p.predicted);
    const auto gold = covered(p.gold);
    if (pred.empty()) ++m.samples_without_prediction;
    if (gold.empty()) ++m.samples_without_gold;
    std::size_t inter = 0;
    for (auto c : pred) inter += gold.count(c);
    m.intersection += inter;
    m.predicted_chars += pred.size();
    m.gold_chars += gold.size();
    m.union_chars += pred.size() + gold.size() - inter;
    const double sp = ratio(inter, pred.size()), sr = ratio(inter, gold.size());
    p_sum += sp;
    r_sum += sr;
    f_sum += harmonic(sp, sr);
    iou_sum += ratio(inter, pred.size() + gold.size() - inter);
  }
  if (averaging == Averaging::kMacro) {
    const double n = predictions.empty() ? 1.0 : static_cast<double>(predictions.size());
    m.precision = p_sum / n;
    m.recall = r_sum / n;
    m.f1 = f_sum / n;
    m.iou = iou_sum / n;
    return m;
  }
  m.precision = ratio(m.intersection, m.predicted_chars);
  m.recall = ratio(m.intersection, m.gold_chars);
  m.f1 = harmonic(m.precision, m.recall);
  m.iou = ratio(m.intersection, m.union_chars);
  return m;
}

ClassificationMetrics classification_metrics(std::span<const int> labels, std::span<const int> predictions) {
  if (labels.size() != predictions.size()) throw ContractViolation("labels and predictions differ in length");
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool gold = labels[i] == kToxic;
    const bool pred = predictions[i] == kToxic;
    if (gold && pred) ++tp;
    else if (!gold && !pred) ++tn;
    else if (pred) ++fp;
    else ++fn;
  }
  ClassificationMetrics m;
  m.count = labels.size();
  m.accuracy = ratio(tp + tn, labels.size());
  m.precision = ratio(tp, tp + fp);
  m.recall = ratio(tp, tp + fn);
  m.f1 = harmonic(m.precision, m.recall);
  const double neg_f1 = harmonic(ratio(tn, tn + fn), ratio(tn, tn + fp));
  m.macro_f1 = 0.5 * (m.f1 + neg_f1);
  return m;
}

std::vector<std::size_t> mask_spans(const TokenizedText& tokens, std::span<const CharSpan> spans) {
  auto ids = tokens.ids;
  for (std::size_t k = 0; k < tokens.offsets.size(); ++k) {
    const auto off = tokens.offsets[k];
    for (const auto& s : spans) {
      if (off >= s.begin && off < s.end) {
        ids[k + 1] = Vocabulary::kMask;
        break;
      }
    }
  }
  return ids;
}

namespace {

DropResult drop_for(const EncoderParams& params, const TokenizedText& tokens,
                    const std::vector<std::size_t>& masked_ids) {
  DropResult r;
  r.before = predict_ids(params, tokens.ids).toxic_probability;
  r.after = predict_ids(params, masked_ids).toxic_probability;
  r.drop = r.before - r.after;
  for (std::size_t k = 0; k < masked_ids.size(); ++k) r.masked += masked_ids[k] != tokens.ids[k];
  return r;
}

}  // namespace

DropResult confidence_drop(const EncoderParams& params, const TokenizedText& tokens,
                           std::span<const CharSpan> spans) {
  if (spans.empty()) {
    DropResult r;
    r.before = r.after = predict_ids(params, tokens.ids).toxic_probability;
    r.empty = true;
    return r;
  }
  return drop_for(params, tokens, mask_spans(tokens, spans));
}

std::vector<std::size_t> random_positions(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k > n) throw ContractViolation("cannot mask more tokens than the text holds");
  std::vector<std::size_t> pool(n);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < k; ++i) {
    const auto j = std::uniform_int_distribution<std::size_t>(i, n - 1)(rng);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(k);
  std::sort(pool.begin(), pool.end());
  return pool;
}

DropResult random_mask_baseline(const EncoderParams& params, const TokenizedText& tokens, std::size_t k,
                                std::uint64_t seed) {
  auto ids = tokens.ids;
  for (auto pos : random_positions(tokens.num_chars(), k, seed)) ids[pos + 1] = Vocabulary::kMask;
  auto r = drop_for(params, tokens, ids);
  r.empty = k == 0;
  return r;
}

FaithfulnessSummary summarize(std::span<const FaithfulnessRecord> records) {
  FaithfulnessSummary s;
  double span_sum = 0.0, random_sum = 0.0;
  for (const auto& r : records) {
    ++s.samples;
    s.empty_span_samples += r.empty_spans;
    span_sum += r.span_drop;
    random_sum += r.random_drop;
  }
  if (s.samples) {
    s.mean_span_drop = span_sum / static_cast<double>(s.samples);
    s.mean_random_drop = random_sum / static_cast<double>(s.samples);
  }
  return s;
}

std::uint64_t sample_seed(std::uint64_t seed, const std::string& id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : id) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h ^ (seed * 0x9e3779b97f4a7c15ULL);
}

FaithfulnessRecord faithfulness_record(const EncoderParams& params, const TokenizedText& tokens,
                                       const std::string& id, std::span<const CharSpan> spans,
                                       std::uint64_t seed) {
  const auto span = confidence_drop(params, tokens, spans);
  FaithfulnessRecord r;
  r.id = id;
  r.seed = sample_seed(seed, id);
  r.before = span.before;
  r.after_span = span.after;
  r.span_drop = span.drop;
  r.masked = span.masked;
  r.empty_spans = span.empty;
  const auto random = random_mask_baseline(params, tokens, span.masked, r.seed);
  r.after_random = random.after;
  r.random_drop = random.drop;
  return r;
}

std::vector<CharSpan> top_fraction_spans(std::span<const double> scores, std::span<const std::size_t> offsets,
                                         double fraction) {
  if (scores.size() != offsets.size()) throw ContractViolation("scores and offsets differ in length");
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ContractViolation("fraction must lie in (0,1]");
  if (scores.empty()) return {};
  const auto k = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(scores.size()) - 1e-9)));
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  std::vector<CharSpan> spans;
  for (std::size_t i = 0; i < k; ++i) spans.push_back({offsets[order[i]], offsets[order[i]] + 1});
  std::sort(spans.begin(), spans.end());
  std::vector<CharSpan> merged;
  for (const auto& s : spans) {
    if (!merged.empty() && merged.back().end == s.begin) merged.back().end = s.end;
    else merged.push_back(s);
  }
  return merged;
}

namespace {

json report_json(const MetricsReport& r) {
  json j;
  j["samples"] = r.samples;
  if (r.classification) {
    const auto& c = *r.classification;
    j["classification"] = {{"accuracy", c.accuracy}, {"recall", c.recall},     {"precision", c.precision},
                           {"f1", c.f1},             {"macro_f1", c.macro_f1}, {"count", c.count}};
  }
  if (r.overlap) {
    const auto& o = *r.overlap;
    j["overlap"] = {{"recall", o.recall},         {"precision", o.precision},   {"f1", o.f1},
                    {"matched", o.matched},       {"gold_total", o.gold_total}, {"pred_total", o.pred_total},
                    {"undefined", o.undefined}};
  }
  if (r.character) {
    const auto& c = *r.character;
    j["character"] = {{"recall", c.recall},
                      {"precision", c.precision},
                      {"f1", c.f1},
                      {"iou", c.iou},
                      {"intersection", c.intersection},
                      {"predicted_chars", c.predicted_chars},
                      {"gold_chars", c.gold_chars},
                      {"union_chars", c.union_chars},
                      {"samples_without_prediction", c.samples_without_prediction},
                      {"samples_without_gold", c.samples_without_gold}};
  }
  if (r.faithfulness) {
    const auto& f = *r.faithfulness;
    j["faithfulness"] = {{"samples", f.samples},
                         {"empty_span_samples", f.empty_span_samples},
                         {"mean_span_drop", f.mean_span_drop},
                         {"mean_random_drop", f.mean_random_drop},
                         {"gap", f.mean_span_drop - f.mean_random_drop}};
  }
  return j;
}

}  // namespace

std::string report_to_json(const MetricsReport& report) { return report_json(report).dump(2) + "\n"; }

std::string report_to_csv(const MetricsReport& report) {
  std::ostringstream out;
  out << "section,metric,value\n";
  const auto j = report_json(report);
  for (const auto& [section, value] : j.items()) {
    if (!value.is_object()) {
      out << "report," << section << ',' << value.dump() << '\n';
      continue;
    }
    for (const auto& [metric, v] : value.items()) out << section << ',' << metric << ',' << v.dump() << '\n';
  }
  return out.str();
}

}  // namespace toxitrace
