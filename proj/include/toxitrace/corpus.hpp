#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "toxitrace/char_span.hpp"

namespace toxitrace {

inline constexpr int kCorpusSchemaVersion = 1;

struct Reasonings {
  std::string toxic;
  std::string normal;
  bool operator==(const Reasonings&) const = default;
};

// One JSON-lines record. Offsets count unicode scalar values.
struct CorpusRecord {
  std::string id;
  std::string text;
  int label = 0;
  std::optional<std::vector<CharSpan>> gold_spans;
  std::optional<std::vector<CharSpan>> weak_spans;
  std::optional<Reasonings> reasonings;

  bool operator==(const CorpusRecord&) const = default;
};

// Throws DataError naming the record on out-of-range or overlapping spans,
// or gold spans on a non-toxic record.
void validate(const CorpusRecord& record);

CorpusRecord parse_record(const std::string& json_line);
std::string serialize_record(const CorpusRecord& record);

// Errors carry the 1-based line number.
std::vector<CorpusRecord> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::vector<CorpusRecord>& records, const std::filesystem::path& path);

struct SynthConfig {
  std::size_t alphabet_size = 200;
  std::size_t lexicon_size = 20;
  std::size_t phrase_min = 2;
  std::size_t phrase_max = 4;
  std::size_t per_class = 1000;
  std::size_t length_min = 8;
  std::size_t length_max = 40;
  std::size_t phrases_min = 1;
  std::size_t phrases_max = 2;
  // Relative sampling weight of lexicon characters inside filler text.
  double lexicon_filler_weight = 0.05;
  std::uint64_t seed = 7;

  void validate() const;
};

struct SynthCorpus {
  std::vector<std::u32string> lexicon;
  std::vector<CorpusRecord> records;
  // Planted phrases per toxic record id, in text order.
  std::map<std::string, std::vector<std::string>> planted;
};

SynthCorpus generate(const SynthConfig& config);

// Stratified, seeded split into (train, test).
std::pair<std::vector<CorpusRecord>, std::vector<CorpusRecord>> split_corpus(
    const std::vector<CorpusRecord>& records, double test_fraction, std::uint64_t seed);

}  // namespace toxitrace
