#include "toxitrace/cusa.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "prompt_assets.hpp"
#include "toxitrace/losses.hpp"
#include "toxitrace/saliency.hpp"
#include "toxitrace/utf8.hpp"

namespace toxitrace::cusa {

using json = nlohmann::ordered_json;

// --- prompts -------------------------------------------------------------------

std::string prompt_text(const Prompt& prompt) {
  if (prompt.system.empty()) return prompt.user;
  return prompt.system + "\n\n" + prompt.user;
}

const std::string& template_text(Template which) {
  static const std::string refine_system = assets::refine_system;
  static const std::string refine_user = assets::refine_user;
  static const std::string reasoning_toxic = assets::reasoning_toxic;
  static const std::string reasoning_normal = assets::reasoning_normal;
  switch (which) {
    case Template::kRefineSystem: return refine_system;
    case Template::kRefineUser: return refine_user;
    case Template::kReasoningToxic: return reasoning_toxic;
    case Template::kReasoningNormal: return reasoning_normal;
  }
  throw ContractViolation("unknown template");
}

std::string fill(std::string_view pattern, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(pattern.size());
  std::size_t i = 0;
  while (i < pattern.size()) {
    if (pattern[i] == '{') {
      const auto close = pattern.find('}', i + 1);
      if (close != std::string_view::npos) {
        const auto it = values.find(std::string(pattern.substr(i + 1, close - i - 1)));
        if (it != values.end()) {
          out += it->second;
          i = close + 1;
          continue;
        }
      }
    }
    out.push_back(pattern[i++]);
  }
  return out;
}

Prompt render_refine_prompt(std::string_view text, std::span<const std::string> cues) {
  std::string hint;
  for (std::size_t k = 0; k < cues.size(); ++k) {
    if (k) hint += kEnumerationMark;
    hint += cues[k];
  }
  // Values are substituted in one pass so braces inside the text stay literal.
  return {template_text(Template::kRefineSystem),
          fill(template_text(Template::kRefineUser), {{"sentence", std::string(text)}, {"hint_text", hint}})};
}

ReasoningPrompts render_reasoning_prompts(std::string_view text) {
  const std::map<std::string, std::string> values = {{"sentence", std::string(text)}};
  return {{"", fill(template_text(Template::kReasoningToxic), values)},
          {"", fill(template_text(Template::kReasoningNormal), values)}};
}

// --- parsing and alignment ---------------------------------------------------

namespace {

std::string_view trim(std::string_view s) {
  const auto* ws = " \t\r\n\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

std::string_view strip_wrappers(std::string_view s) {
  s = trim(s);
  if (s.starts_with("```")) {
    const auto nl = s.find('\n');
    s = nl == std::string_view::npos ? s.substr(3) : s.substr(nl + 1);
    s = trim(s);
    if (s.ends_with("```")) s = trim(s.substr(0, s.size() - 3));
  }
  while (s.size() >= 2 && ((s.front() == '`' && s.back() == '`') || (s.starts_with("**") && s.ends_with("**")))) {
    const std::size_t n = s.front() == '`' ? 1 : 2;
    if (s.size() < 2 * n) break;
    s = trim(s.substr(n, s.size() - 2 * n));
  }
  return s;
}

}  // namespace

std::vector<std::string> parse_refiner_output(std::string_view raw) {
  const auto body = strip_wrappers(raw);
  std::vector<std::string> items;
  std::size_t i = 0;
  auto push = [&](std::string_view item) {
    const auto t = strip_wrappers(item);
    if (t.empty()) return;
    std::string s(t);
    if (std::find(items.begin(), items.end(), s) == items.end()) items.push_back(std::move(s));
  };
  std::size_t start = 0;
  while (i < body.size()) {
    if (body.substr(i).starts_with(kEnumerationMark)) {
      push(body.substr(start, i - start));
      i += kEnumerationMark.size();
      start = i;
    } else if (body[i] == ',' || body[i] == '\n') {
      push(body.substr(start, i - start));
      start = ++i;
    } else {
      ++i;
    }
  }
  push(body.substr(start));
  if (items.empty()) throw ParseEmpty("refiner output holds no phrase");
  return items;
}

std::string char_substring(std::string_view text, const CharSpan& span) {
  const auto chars = utf8::decode(text);
  if (span.begin > span.end || span.end > chars.size()) throw ContractViolation("span outside the text");
  return utf8::encode(std::u32string_view(chars).substr(span.begin, span.length()));
}

Alignment align_phrases(std::string_view text, std::span<const std::string> phrases) {
  const auto chars = utf8::decode(text);
  Alignment out;
  for (const auto& phrase : phrases) {
    const auto needle = utf8::decode(phrase);
    if (needle.empty()) continue;
    bool found = false;
    std::size_t pos = 0;
    while ((pos = chars.find(needle, pos)) != std::u32string::npos) {
      out.spans.push_back({pos, pos + needle.size()});
      found = true;
      pos += needle.size();
    }
    if (!found) out.warnings.push_back("phrase not found in text: " + phrase);
  }
  out.spans = normalize_spans(std::move(out.spans));
  return out;
}

// --- cues ----------------------------------------------------------------------

Cues extract_cues(const EncoderParams& params, const Vocabulary& vocab, std::string_view text,
                  const bicse::Options& options) {
  if (text.empty()) throw ContractViolation("cue extraction on empty text");
  const auto tokens = tokenize(vocab, text);
  const auto saliency = saliency_sequence(params, tokens, kToxic);
  const auto token_spans = bicse::extract(saliency.scores, options);
  Cues cues;
  cues.spans = bicse::to_char_spans(token_spans, saliency.offsets);
  for (const auto& s : cues.spans) cues.phrases.push_back(char_substring(text, s));
  cues.top_quantile_threshold = percentile(saliency.scores, 1.0 - kTopQuantile);
  for (const auto& s : token_spans) {
    for (auto k = s.start; k <= s.end; ++k) {
      ++cues.cue_tokens;
      cues.cue_tokens_in_top += saliency.scores[k - 1] >= cues.top_quantile_threshold;
    }
  }
  return cues;
}

// --- clients -------------------------------------------------------------------

std::string task_name(Task task) {
  switch (task) {
    case Task::kRefine: return "refine";
    case Task::kToxicReasoning: return "toxic_reasoning";
    case Task::kNormalReasoning: return "normal_reasoning";
  }
  throw ContractViolation("unknown task");
}

MockClient::MockClient(std::map<Task, std::map<std::string, std::string>> responses)
    : responses_(std::move(responses)) {}

MockClient MockClient::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("malformed mock fixture: ") + e.what());
  }
  if (!j.is_object()) throw DataError("mock fixture must be a JSON object");
  std::map<Task, std::map<std::string, std::string>> responses;
  for (const auto& [key, table] : j.items()) {
    std::optional<Task> task;
    for (auto t : {Task::kRefine, Task::kToxicReasoning, Task::kNormalReasoning}) {
      if (task_name(t) == key) task = t;
    }
    if (!task) throw DataError("unknown mock fixture section " + key);
    if (!table.is_object()) throw DataError("mock fixture section " + key + " must be an object");
    for (const auto& [id, value] : table.items()) {
      if (!value.is_string()) throw DataError("mock fixture entry " + key + "/" + id + " must be a string");
      responses[*task][id] = value.get<std::string>();
    }
  }
  return MockClient(std::move(responses));
}

MockClient MockClient::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  try {
    return from_json(ss.str());
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string MockClient::complete(const Request& request) {
  const auto table = responses_.find(request.task);
  if (table != responses_.end()) {
    const auto it = table->second.find(request.id);
    if (it != table->second.end()) return it->second;
  }
  throw TransportError("mock has no " + task_name(request.task) + " response for " + request.id);
}

std::string mock_fixture_to_json(const std::map<Task, std::map<std::string, std::string>>& responses) {
  json j = json::object();
  for (const auto& [task, table] : responses) {
    auto& section = j[task_name(task)] = json::object();
    for (const auto& [id, text] : table) section[id] = text;
  }
  return j.dump(2) + "\n";
}

MockResponses synthetic_mock_responses(const SynthCorpus& corpus) {
  MockResponses out;
  for (const auto& r : corpus.records) {
    const auto chars = utf8::decode(r.text);
    std::string refined, kept;
    if (const auto it = corpus.planted.find(r.id); it != corpus.planted.end()) {
      for (std::size_t k = 0; k < it->second.size(); ++k) {
        if (k) refined += kEnumerationMark;
        refined += it->second[k];
      }
    }
    std::vector<bool> planted(chars.size(), false);
    if (r.gold_spans) {
      for (const auto& s : *r.gold_spans) std::fill(planted.begin() + s.begin, planted.begin() + s.end, true);
    }
    for (std::size_t i = 0; i < chars.size(); ++i) {
      if (!planted[i]) kept += utf8::encode(chars[i]);
    }
    if (r.label == kToxic) {
      out[Task::kRefine][r.id] = refined;
      out[Task::kToxicReasoning][r.id] = refined;
    } else {
      out[Task::kToxicReasoning][r.id] = utf8::encode(std::u32string_view(chars).substr(0, 3));
    }
    out[Task::kNormalReasoning][r.id] = kept;
  }
  return out;
}

// --- annotation ------------------------------------------------------------------

std::string source_name(Source source) { return source == Source::kRefined ? "refined" : "cue_only"; }

std::string annotation_to_json(const WeakAnnotation& a) {
  json spans = json::array();
  for (const auto& s : a.spans) spans.push_back({s.begin, s.end});
  json j = {{"id", a.id}, {"spans", spans}, {"source", source_name(a.source)}, {"warnings", a.warnings}};
  j["raw_output"] = a.raw_output ? json(*a.raw_output) : json(nullptr);
  if (a.error) j["error"] = *a.error;
  return j.dump();
}

WeakAnnotation annotation_from_json(const std::string& line) {
  try {
    const auto j = json::parse(line);
    WeakAnnotation a;
    a.id = j.at("id").get<std::string>();
    for (const auto& s : j.at("spans")) a.spans.push_back({s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()});
    const auto source = j.at("source").get<std::string>();
    if (source == "refined") a.source = Source::kRefined;
    else if (source == "cue_only") a.source = Source::kCueOnly;
    else throw DataError("unknown annotation source " + source);
    a.warnings = j.at("warnings").get<std::vector<std::string>>();
    if (!j.at("raw_output").is_null()) a.raw_output = j.at("raw_output").get<std::string>();
    if (j.contains("error")) a.error = j.at("error").get<std::string>();
    return a;
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed annotation: ") + e.what());
  }
}

WeakAnnotation refine(RefinerClient& client, const std::string& id, std::string_view text, const Cues& cues) {
  WeakAnnotation out;
  out.id = id;
  auto fallback = [&]() {
    out.spans = cues.spans;
    out.source = Source::kCueOnly;
    return out;
  };
  const Request request{id, Task::kRefine, render_refine_prompt(text, cues.phrases)};
  try {
    out.raw_output = client.complete(request);
  } catch (const std::exception& e) {
    out.error = e.what();
    return fallback();
  }
  std::vector<std::string> phrases;
  try {
    phrases = parse_refiner_output(*out.raw_output);
  } catch (const ParseEmpty& e) {
    out.warnings.push_back(e.what());
    return fallback();
  }
  auto aligned = align_phrases(text, phrases);
  out.warnings = std::move(aligned.warnings);
  if (aligned.spans.empty()) {
    out.warnings.push_back("no refined phrase occurs in the text");
    return fallback();
  }
  out.spans = std::move(aligned.spans);
  out.source = Source::kRefined;
  return out;
}

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto run = [&]() {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        const std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(run);
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::vector<WeakAnnotation> annotate(const EncoderParams& params, const Vocabulary& vocab,
                                     const std::vector<CorpusRecord>& records, RefinerClient& client,
                                     const AnnotateOptions& options) {
  std::vector<const CorpusRecord*> toxic;
  for (const auto& r : records) {
    if (r.label == kToxic) toxic.push_back(&r);
  }
  std::vector<WeakAnnotation> out(toxic.size());
  parallel_for(toxic.size(), options.parallelism, [&](std::size_t i) {
    const auto& r = *toxic[i];
    out[i] = refine(client, r.id, r.text, extract_cues(params, vocab, r.text, options.bicse));
  });
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

void apply_annotations(std::vector<CorpusRecord>& records, const std::vector<WeakAnnotation>& annotations) {
  std::map<std::string, const WeakAnnotation*> by_id;
  for (const auto& a : annotations) {
    if (!by_id.emplace(a.id, &a).second) throw DataError("duplicate annotation for " + a.id);
  }
  for (auto& r : records) {
    const auto it = by_id.find(r.id);
    if (it == by_id.end()) continue;
    r.weak_spans = it->second->spans;
    validate(r);
    by_id.erase(it);
  }
  if (!by_id.empty()) throw DataError("annotation for unknown record " + by_id.begin()->first);
}

std::vector<ReasoningResult> generate_reasonings(const std::vector<CorpusRecord>& records, RefinerClient& client,
                                                 std::size_t parallelism) {
  std::vector<ReasoningResult> out(records.size());
  parallel_for(records.size(), parallelism, [&](std::size_t i) {
    const auto& r = records[i];
    out[i].id = r.id;
    const auto prompts = render_reasoning_prompts(r.text);
    try {
      Reasonings reasons;
      reasons.toxic = std::string(trim(client.complete({r.id, Task::kToxicReasoning, prompts.toxic})));
      reasons.normal = std::string(trim(client.complete({r.id, Task::kNormalReasoning, prompts.normal})));
      out[i].reasonings = std::move(reasons);
    } catch (const std::exception& e) {
      out[i].error = e.what();
    }
  });
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
  return out;
}

}  // namespace toxitrace::cusa
