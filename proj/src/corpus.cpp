#include "toxitrace/corpus.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <random>

#include "json.hpp"

#include "toxitrace/error.hpp"
#include "toxitrace/utf8.hpp"

namespace toxitrace {

using json = nlohmann::ordered_json;

namespace {

void check_spans(const CorpusRecord& r, const std::vector<CharSpan>& spans, std::size_t length,
                 const char* field) {
  std::vector<CharSpan> sorted = spans;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    const auto& s = sorted[i];
    if (s.begin >= s.end || s.end > length) {
      throw DataError("record " + r.id + ": " + field + " span [" + std::to_string(s.begin) + "," +
                      std::to_string(s.end) + ") out of range for text of " +
                      std::to_string(length) + " characters");
    }
    if (i > 0 && s.begin < sorted[i - 1].end) {
      throw DataError("record " + r.id + ": overlapping " + field + " spans");
    }
  }
}

json spans_to_json(const std::vector<CharSpan>& spans) {
  json arr = json::array();
  for (const auto& s : spans) arr.push_back(json::array({s.begin, s.end}));
  return arr;
}

std::vector<CharSpan> spans_from_json(const json& arr) {
  if (!arr.is_array()) throw DataError("span list must be an array");
  std::vector<CharSpan> out;
  for (const auto& item : arr) {
    if (!item.is_array() || item.size() != 2 || !item[0].is_number_unsigned() ||
        !item[1].is_number_unsigned()) {
      throw DataError("span must be a [begin, end) pair of non-negative integers");
    }
    out.push_back({item[0].get<std::size_t>(), item[1].get<std::size_t>()});
  }
  return out;
}

}  // namespace

void validate(const CorpusRecord& r) {
  if (r.id.empty()) throw DataError("record without id");
  if (r.label != 0 && r.label != 1) throw DataError("record " + r.id + ": label must be 0 or 1");
  const std::size_t length = utf8::decode(r.text).size();
  if (r.gold_spans) {
    check_spans(r, *r.gold_spans, length, "gold");
    if (!r.gold_spans->empty() && r.label != 1) {
      throw DataError("record " + r.id + ": gold spans on a non-toxic record");
    }
  }
  if (r.weak_spans) check_spans(r, *r.weak_spans, length, "weak");
}

CorpusRecord parse_record(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw DataError("record must be a JSON object");
  CorpusRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.text = j.at("text").get<std::string>();
    r.label = j.at("label").get<int>();
    if (j.contains("gold_spans")) r.gold_spans = spans_from_json(j["gold_spans"]);
    if (j.contains("weak_spans")) r.weak_spans = spans_from_json(j["weak_spans"]);
    if (j.contains("reasonings")) {
      const auto& rs = j["reasonings"];
      r.reasonings = Reasonings{rs.at("toxic").get<std::string>(), rs.at("normal").get<std::string>()};
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("record schema violation: ") + e.what());
  }
  validate(r);
  return r;
}

std::string serialize_record(const CorpusRecord& r) {
  json j;
  j["id"] = r.id;
  j["text"] = r.text;
  j["label"] = r.label;
  if (r.gold_spans) j["gold_spans"] = spans_to_json(*r.gold_spans);
  if (r.weak_spans) j["weak_spans"] = spans_to_json(*r.weak_spans);
  if (r.reasonings) j["reasonings"] = {{"toxic", r.reasonings->toxic}, {"normal", r.reasonings->normal}};
  return j.dump();
}

std::vector<CorpusRecord> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus " + path.string());
  std::vector<CorpusRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(parse_record(line));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_corpus(const std::vector<CorpusRecord>& records, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus " + path.string());
  for (const auto& r : records) out << serialize_record(r) << '\n';
}

// --- synthetic corpus -------------------------------------------------------

void SynthConfig::validate() const {
  auto fail = [](const char* what) { throw ContractViolation(std::string("synth config: ") + what); };
  if (alphabet_size < 10) fail("alphabet too small");
  if (lexicon_size == 0) fail("empty lexicon");
  if (phrase_min < 2 || phrase_max < phrase_min) fail("phrase length range");
  if (length_min < 1 || length_max < length_min) fail("sentence length range");
  if (phrases_min < 1 || phrases_max < phrases_min) fail("planted phrase count range");
  if (phrases_max * phrase_max + phrases_max - 1 > length_max) fail("sentences too short for planted phrases");
  if (!(lexicon_filler_weight >= 0.0)) fail("negative filler weight");
}

namespace {

using Rng = std::mt19937_64;

std::size_t uniform(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

// Occurrences of any lexicon phrase as (begin, end) in text.
std::vector<CharSpan> lexicon_hits(const std::u32string& text, const std::vector<std::u32string>& lexicon) {
  std::vector<CharSpan> hits;
  for (const auto& phrase : lexicon) {
    for (auto pos = text.find(phrase); pos != std::u32string::npos; pos = text.find(phrase, pos + 1)) {
      hits.push_back({pos, pos + phrase.size()});
    }
  }
  return hits;
}

class Generator {
 public:
  explicit Generator(const SynthConfig& cfg) : cfg_(cfg), rng_(cfg.seed) {
    for (std::size_t i = 0; i < cfg.alphabet_size; ++i) {
      alphabet_.push_back(static_cast<char32_t>(0x4E00 + 3 * i));
    }
    build_lexicon();
    std::vector<double> weights(alphabet_.size(), 1.0);
    for (const auto& phrase : lexicon_) {
      for (char32_t ch : phrase) {
        weights[static_cast<std::size_t>(ch - 0x4E00) / 3] = cfg.lexicon_filler_weight;
      }
    }
    filler_ = std::discrete_distribution<std::size_t>(weights.begin(), weights.end());
  }

  SynthCorpus run() {
    SynthCorpus out;
    out.lexicon = lexicon_;
    std::vector<CorpusRecord> toxic, clean;
    for (std::size_t i = 0; i < cfg_.per_class; ++i) {
      toxic.push_back(make_toxic(out.planted));
      clean.push_back(make_clean());
    }
    for (std::size_t i = 0; i < cfg_.per_class; ++i) {
      out.records.push_back(std::move(toxic[i]));
      out.records.push_back(std::move(clean[i]));
    }
    std::shuffle(out.records.begin(), out.records.end(), rng_);
    return out;
  }

 private:
  void build_lexicon() {
    while (lexicon_.size() < cfg_.lexicon_size) {
      const auto len = uniform(rng_, cfg_.phrase_min, cfg_.phrase_max);
      std::u32string phrase;
      while (phrase.size() < len) {
        const char32_t ch = alphabet_[uniform(rng_, 0, alphabet_.size() - 1)];
        if (phrase.find(ch) == std::u32string::npos) phrase.push_back(ch);
      }
      const bool clash = std::any_of(lexicon_.begin(), lexicon_.end(), [&](const std::u32string& other) {
        return other.find(phrase) != std::u32string::npos || phrase.find(other) != std::u32string::npos;
      });
      if (!clash) lexicon_.push_back(phrase);
    }
  }

  std::u32string filler(std::size_t n) {
    std::u32string s;
    for (std::size_t i = 0; i < n; ++i) s.push_back(alphabet_[filler_(rng_)]);
    return s;
  }

  std::string next_id() {
    char buf[32];
    std::snprintf(buf, sizeof buf, "syn-%05zu", counter_++);
    return buf;
  }

  CorpusRecord make_clean() {
    const auto len = uniform(rng_, cfg_.length_min, cfg_.length_max);
    std::u32string text;
    do {
      text = filler(len);
    } while (!lexicon_hits(text, lexicon_).empty());
    return {next_id(), utf8::encode(text), 0, std::vector<CharSpan>{}, std::nullopt, std::nullopt};
  }

  CorpusRecord make_toxic(std::map<std::string, std::vector<std::string>>& planted) {
    for (;;) {
      const auto len = uniform(rng_, cfg_.length_min, cfg_.length_max);
      const auto count = uniform(rng_, cfg_.phrases_min, cfg_.phrases_max);
      std::vector<std::size_t> chosen;
      std::size_t phrase_chars = 0;
      for (std::size_t k = 0; k < count; ++k) {
        chosen.push_back(uniform(rng_, 0, lexicon_.size() - 1));
        phrase_chars += lexicon_[chosen.back()].size();
      }
      if (phrase_chars + (count - 1) > len) continue;

      // Split the filler budget into count+1 gaps; inner gaps hold at least one character.
      const std::size_t free_chars = len - phrase_chars - (count - 1);
      std::vector<std::size_t> cuts;
      for (std::size_t k = 0; k < count; ++k) cuts.push_back(uniform(rng_, 0, free_chars));
      std::sort(cuts.begin(), cuts.end());
      std::vector<std::size_t> gaps;
      std::size_t prev = 0;
      for (auto c : cuts) {
        gaps.push_back(c - prev);
        prev = c;
      }
      gaps.push_back(free_chars - prev);
      for (std::size_t k = 1; k < count; ++k) gaps[k] += 1;

      std::u32string text;
      std::vector<CharSpan> spans;
      std::vector<std::string> phrases;
      for (std::size_t k = 0; k < count; ++k) {
        text += filler(gaps[k]);
        const auto& phrase = lexicon_[chosen[k]];
        spans.push_back({text.size(), text.size() + phrase.size()});
        phrases.push_back(utf8::encode(phrase));
        text += phrase;
      }
      text += filler(gaps[count]);

      // Every lexicon occurrence must be exactly one of the planted spans.
      auto hits = lexicon_hits(text, lexicon_);
      const bool exact = std::all_of(hits.begin(), hits.end(), [&](const CharSpan& h) {
        return std::find(spans.begin(), spans.end(), h) != spans.end();
      });
      if (!exact) continue;

      CorpusRecord r{next_id(), utf8::encode(text), 1, spans, std::nullopt, std::nullopt};
      planted[r.id] = std::move(phrases);
      return r;
    }
  }

  SynthConfig cfg_;
  Rng rng_;
  std::vector<char32_t> alphabet_;
  std::vector<std::u32string> lexicon_;
  std::discrete_distribution<std::size_t> filler_;
  std::size_t counter_ = 0;
};

}  // namespace

SynthCorpus generate(const SynthConfig& config) {
  config.validate();
  return Generator(config).run();
}

std::pair<std::vector<CorpusRecord>, std::vector<CorpusRecord>> split_corpus(
    const std::vector<CorpusRecord>& records, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ContractViolation("test fraction must lie in (0,1)");
  }
  Rng rng(seed);
  std::vector<CorpusRecord> train, test;
  for (int label : {1, 0}) {
    std::vector<const CorpusRecord*> group;
    for (const auto& r : records)
      if (r.label == label) group.push_back(&r);
    std::shuffle(group.begin(), group.end(), rng);
    const auto n_test = static_cast<std::size_t>(test_fraction * static_cast<double>(group.size()) + 0.5);
    for (std::size_t i = 0; i < group.size(); ++i) (i < n_test ? test : train).push_back(*group[i]);
  }
  auto by_id = [](const CorpusRecord& a, const CorpusRecord& b) { return a.id < b.id; };
  std::sort(train.begin(), train.end(), by_id);
  std::sort(test.begin(), test.end(), by_id);
  return {std::move(train), std::move(test)};
}

}  // namespace toxitrace
