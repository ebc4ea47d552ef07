#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "toxitrace/bicse.hpp"
#include "toxitrace/char_span.hpp"
#include "toxitrace/corpus.hpp"
#include "toxitrace/encoder.hpp"
#include "toxitrace/error.hpp"

namespace toxitrace::cusa {

// --- prompts -------------------------------------------------------------------

struct Prompt {
  std::string system;  // empty for single-segment prompts
  std::string user;
  bool operator==(const Prompt&) const = default;
};

// System and user segments joined by a blank line; the user segment alone when
// there is no system segment.
std::string prompt_text(const Prompt& prompt);

enum class Template { kRefineSystem, kRefineUser, kReasoningToxic, kReasoningNormal };
const std::string& template_text(Template which);

// Replaces every {name} occurrence with its value; other braces are kept.
std::string fill(std::string_view pattern, const std::map<std::string, std::string>& values);

inline constexpr std::string_view kEnumerationMark = "、";

Prompt render_refine_prompt(std::string_view text, std::span<const std::string> cues);

struct ReasoningPrompts {
  Prompt toxic;
  Prompt normal;
};
ReasoningPrompts render_reasoning_prompts(std::string_view text);

// --- parsing and alignment ---------------------------------------------------

class ParseEmpty : public DataError {
 public:
  using DataError::DataError;
};

// Strips whitespace and markdown fences, splits on the enumeration mark or an
// ASCII comma, drops empty items and repeats. Throws ParseEmpty when nothing is left.
std::vector<std::string> parse_refiner_output(std::string_view raw);

struct Alignment {
  std::vector<CharSpan> spans;        // normalized
  std::vector<std::string> warnings;  // one per phrase absent from the text
};

// Every non-overlapping occurrence of each phrase, leftmost first; spans from
// different phrases that intersect are merged.
Alignment align_phrases(std::string_view text, std::span<const std::string> phrases);

// Substring of a UTF-8 text addressed by character offsets.
std::string char_substring(std::string_view text, const CharSpan& span);

// --- cues ----------------------------------------------------------------------

struct Cues {
  std::vector<CharSpan> spans;
  std::vector<std::string> phrases;  // text under each span
  std::size_t cue_tokens = 0;
  std::size_t cue_tokens_in_top = 0;  // cue tokens whose score is in the top quantile
  double top_quantile_threshold = 0.0;
};

inline constexpr double kTopQuantile = 0.15;

// Toxic-class saliency, span scan and character mapping. Throws
// ContractViolation on empty text.
Cues extract_cues(const EncoderParams& params, const Vocabulary& vocab, std::string_view text,
                  const bicse::Options& options = {});

// --- clients -------------------------------------------------------------------

enum class Task { kRefine, kToxicReasoning, kNormalReasoning };
std::string task_name(Task task);

struct Request {
  std::string id;
  Task task = Task::kRefine;
  Prompt prompt;
};

class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class RefinerClient {
 public:
  virtual ~RefinerClient() = default;
  // Must be safe to call from several threads at once.
  virtual std::string complete(const Request& request) = 0;
};

// Fixture map {"refine": {id: text}, "toxic_reasoning": {...}, "normal_reasoning": {...}}.
// Unknown ids raise TransportError.
class MockClient : public RefinerClient {
 public:
  explicit MockClient(std::map<Task, std::map<std::string, std::string>> responses);
  static MockClient from_json(const std::string& text);
  static MockClient load(const std::filesystem::path& path);
  std::string complete(const Request& request) override;

 private:
  std::map<Task, std::map<std::string, std::string>> responses_;
};

using MockResponses = std::map<Task, std::map<std::string, std::string>>;

// Deterministic stand-in responses for a synthetic corpus. The refiner returns
// the planted phrases of each toxic record. The toxic-stance reasoning lists
// the planted phrases (a clean record gets its first three characters); the
// normal-stance reasoning is the text with planted spans removed.
MockResponses synthetic_mock_responses(const SynthCorpus& corpus);

std::string mock_fixture_to_json(const std::map<Task, std::map<std::string, std::string>>& responses);

struct HttpConfig {
  std::string endpoint;  // scheme://host[:port]/path
  std::string token_env = "TOXITRACE_REFINER_TOKEN";
  // JSON document; string values may contain {{system}}, {{user}}, {{prompt}}, {{id}}.
  std::string request_template =
      R"({"messages":[{"role":"system","content":"{{system}}"},{"role":"user","content":"{{user}}"}]})";
  std::string response_path = "/choices/0/message/content";  // JSON pointer
  double timeout_seconds = 60.0;
  std::size_t retries = 2;
  std::size_t parallelism = 4;

  void validate() const;
};

// Keys mirror HttpConfig field names; unknown keys are rejected.
HttpConfig http_config_from_json(const std::string& text, HttpConfig base = {});

// Builds the request body for one call.
std::string render_request_body(const HttpConfig& config, const Request& request);
// Pulls the generated text out of a response body.
std::string select_response_text(const HttpConfig& config, const std::string& body);

// POSTs the rendered body with a bearer token read from the environment.
// Error messages name the endpoint and status, never the token.
class HttpClient : public RefinerClient {
 public:
  explicit HttpClient(HttpConfig config);
  std::string complete(const Request& request) override;

 private:
  HttpConfig config_;
  std::optional<std::string> token_;
  std::string base_;
  std::string path_;
};

// --- annotation ------------------------------------------------------------------

enum class Source { kCueOnly, kRefined };
std::string source_name(Source source);

struct WeakAnnotation {
  std::string id;
  std::vector<CharSpan> spans;
  Source source = Source::kCueOnly;
  std::vector<std::string> warnings;
  std::optional<std::string> raw_output;
  std::optional<std::string> error;  // client failure that caused a fallback

  bool operator==(const WeakAnnotation&) const = default;
};

std::string annotation_to_json(const WeakAnnotation& annotation);
WeakAnnotation annotation_from_json(const std::string& line);

// Render, complete, parse, align; falls back to the cue spans when the client
// fails (recorded as error), the output parses empty or no phrase can be
// located (recorded as warnings).
WeakAnnotation refine(RefinerClient& client, const std::string& id, std::string_view text, const Cues& cues);

struct AnnotateOptions {
  std::size_t parallelism = 4;
  bicse::Options bicse;
};

// Annotates the toxic-labeled records. Results are sorted by id whatever the
// completion order.
std::vector<WeakAnnotation> annotate(const EncoderParams& params, const Vocabulary& vocab,
                                     const std::vector<CorpusRecord>& records, RefinerClient& client,
                                     const AnnotateOptions& options = {});

// Copies annotation spans into weak_spans of the matching records.
void apply_annotations(std::vector<CorpusRecord>& records, const std::vector<WeakAnnotation>& annotations);

struct ReasoningResult {
  std::string id;
  std::optional<Reasonings> reasonings;
  std::optional<std::string> error;
};

// Requests both stance reasonings for every record; sorted by id.
std::vector<ReasoningResult> generate_reasonings(const std::vector<CorpusRecord>& records, RefinerClient& client,
                                                 std::size_t parallelism = 4);

// Runs fn(i) for i in [0, n) on up to `workers` threads. The first exception is rethrown.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

}  // namespace toxitrace::cusa
