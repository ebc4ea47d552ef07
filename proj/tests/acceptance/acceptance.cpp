#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "random_graphs.hpp"
#include "toxitrace/bicse.hpp"
#include "toxitrace/corpus.hpp"
#include "toxitrace/cusa.hpp"
#include "toxitrace/evalkit.hpp"
#include "toxitrace/inference.hpp"
#include "toxitrace/losses.hpp"
#include "toxitrace/manifest.hpp"
#include "toxitrace/training.hpp"
#include "toxitrace/utf8.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace toxitrace;
using ag::Tensor;
using ag::Var;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;
  std::string failures;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      failures += " [failed: " + what + "]";
    }
  }
};

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) { return json::parse(read_file(path)); }

// Runs the command-line tool; stdout and stderr go to a log in the work directory.
int cli(const fs::path& log, const std::string& args) {
  const std::string command = std::string("\"") + TOXITRACE_CLI + "\" " + args + " >>\"" + log.string() + "\" 2>&1";
  const int status = std::system(command.c_str());
  return status == 0 ? 0 : 1;
}

std::vector<bicse::TokenSpan> spans_of(std::initializer_list<std::pair<std::size_t, std::size_t>> list) {
  std::vector<bicse::TokenSpan> out;
  for (auto [s, e] : list) out.push_back({s, e});
  return out;
}

std::vector<bicse::TokenSpan> reversed_extract(const std::vector<double>& scores) {
  std::vector<double> rev(scores.rbegin(), scores.rend());
  std::vector<bicse::TokenSpan> out;
  for (const auto& s : bicse::extract(rev)) out.push_back(bicse::reverse_map(s, scores.size()));
  std::sort(out.begin(), out.end(), [](auto& a, auto& b) { return a.start < b.start; });
  return out;
}

Outcome criterion1() {
  Outcome o;
  const auto start = Clock::now();
  o.require(bicse::extract(std::vector<double>{0.1, 0.1, 0.9, 0.95, 0.2, 0.1}) == spans_of({{3, 4}}), "cliff example");
  o.require(bicse::extract(std::vector<double>{0.2, 0.9, 0.8, 0.7, 0.6, 0.2}) == spans_of({{2, 5}}), "slope example");
  o.require(bicse::extract(std::vector<double>(9, 0.4)).empty(), "flat example");

  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<std::size_t> len(1, 40);
  std::uniform_int_distribution<int> value(0, 12);
  std::size_t violations = 0;
  for (int t = 0; t < 1000; ++t) {
    // Integer-valued scores keep every comparison exact under scaling and shifting.
    std::vector<double> s(len(rng));
    for (auto& x : s) x = value(rng);
    const auto base = bicse::extract(s);
    bool ok = base == reversed_extract(s);
    for (double c : {0.5, 3.0}) {
      auto scaled = s;
      for (auto& x : scaled) x *= c;
      ok &= bicse::extract(scaled) == base;
    }
    for (double c : {-4.0, 25.0}) {
      auto shifted = s;
      for (auto& x : shifted) x += c;
      ok &= bicse::extract(shifted) == base;
    }
    if (s.size() >= 3) {
      const double mu = bicse::thresholds(s).mu;
      for (std::size_t k = 0; k < base.size(); ++k) {
        ok &= base[k].start >= 1 && base[k].start <= base[k].end && base[k].end <= s.size();
        if (k > 0) ok &= base[k - 1].end < base[k].start;
        bool evidence = false;
        for (std::size_t i = base[k].start; i <= base[k].end; ++i) evidence |= s[i - 1] > mu;
        ok &= evidence;
      }
    } else {
      ok &= base.empty();
    }
    violations += !ok;
  }
  const double elapsed = seconds_since(start);
  o.require(violations == 0, "property violations");
  o.require(elapsed < 5.0, "runtime < 5 s");
  o.detail << "examples + 1000 sequences, " << violations << " violations, " << elapsed << " s";
  return o;
}

TokenPartition partition(std::vector<std::size_t> toxic, std::size_t n) {
  TokenPartition part;
  part.toxic = toxic;
  for (std::size_t i = 0; i < n; ++i)
    if (std::find(toxic.begin(), toxic.end(), i) == toxic.end()) part.non_toxic.push_back(i);
  return part;
}

Outcome criterion2() {
  Outcome o;
  const double pgr = pgr_loss(ag::constant(Tensor::column({2.0, 1.5, 3.0})), partition({0}, 3), 1.0).item();
  std::vector<double> g(10);
  for (int i = 0; i < 10; ++i) g[i] = i + 1;
  const double ppt = ppt_loss(ag::constant(Tensor::column(g)), partition({8, 9}, 10), GcConfig{}).item();
  std::vector<Var> negs = {ag::constant(Tensor::row({0.5, 3.0}))};
  const double nce =
      infonce_term(ag::constant(Tensor::row({1.0, 0.0})), ag::constant(Tensor::row({1.0, 0.0})), negs, 0.05).item();
  auto c = [](double v) { return ag::constant(Tensor::scalar(v)); };
  const double joint = joint_loss(c(1.0), c(1.25), c(1.43125), c(0.5), 0.8, 0.5).item();
  o.require(std::abs(pgr - 1.25) <= 1e-9, "PGR");
  o.require(std::abs(ppt - 1.43125) <= 1e-9, "PPT");
  o.require(std::abs(nce - std::log1p(std::exp(-10.0))) <= 1e-9, "InfoNCE");
  o.require(std::abs(joint - 3.395) <= 1e-9, "joint");
  o.detail.precision(12);
  o.detail << "PGR " << pgr << ", PPT " << ppt << ", InfoNCE " << nce << ", joint " << joint;
  return o;
}

Outcome criterion3() {
  Outcome o;
  const auto start = Clock::now();
  double worst_first = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto g = testkit::make_random_graph(seed);
    auto x = ag::leaf(Tensor(g.rows, g.cols, g.point));
    const auto analytic = ag::gradient(g.build(x), {x}, false)[0].value().data;
    auto f = [&](std::span<const double> p) { return g.eval(p); };
    worst_first = std::max(worst_first, ag::finite_difference_check(f, g.point, analytic, 1e-5));
  }

  SynthConfig sc;
  sc.alphabet_size = 30;
  sc.lexicon_size = 4;
  sc.per_class = 24;
  sc.length_min = 8;
  sc.length_max = 14;
  sc.seed = 3;
  auto records = generate(sc).records;
  TrainConfig tc;
  tc.warmup_epochs = 2;
  tc.self_test_coordinates = 0;
  const auto ckpt = warmup(tc, records);
  std::vector<TrainSample> toxic, clean;
  for (auto& r : records) {
    if (r.label == 1) r.weak_spans = r.gold_spans;
    r.reasonings = Reasonings{r.text.substr(0, 6), r.text.substr(r.text.size() - 6)};
    (r.label == 1 ? toxic : clean).push_back(prepare_sample(r, ckpt.vocab));
  }
  GradCheckReport report;
  for (const auto& t : toxic) {
    const std::vector<TrainSample> batch = {t, clean.front()};
    report = joint_gradient_check(ckpt.params, batch, tc);
    if (report.min_hinge_margin > 1e-3) break;
  }
  const double elapsed = seconds_since(start);
  o.require(worst_first < 1e-6, "first-order FD < 1e-6");
  o.require(report.min_hinge_margin > 1e-3, "batch clear of hinge kinks");
  o.require(report.max_relative_error < 1e-4, "joint FD < 1e-4");
  o.require(elapsed < 30.0, "runtime < 30 s");
  o.detail << "100 graphs worst " << worst_first << "; joint objective (d=" << tc.dim << ") " << report.coordinates
           << " coordinates worst " << report.max_relative_error << ", " << report.untouched
           << " untouched; " << elapsed << " s";
  return o;
}

struct PipelineRun {
  bool ok = true;
  double seconds = 0.0;
  std::string failed_step;
};

PipelineRun run_pipeline(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto log = dir / "cli.log";
  const std::string d = "\"" + dir.string() + "\"";
  auto p = [&](const char* name) { return "\"" + (dir / name).string() + "\""; };
  const std::vector<std::pair<std::string, std::string>> steps = {
      {"synth", "synth --seed 7 --out " + d},
      {"train-warmup", "train-warmup --seed 7 --train " + p("train.jsonl") + " --out " + d},
      {"annotate", "annotate --checkpoint " + p("warmup_checkpoint.json") + " --corpus " + p("train.jsonl") +
                       " --mock-refiner " + p("mock_refiner.json") + " --parallelism 1 --out " + d},
      {"reasonings", "reasonings --corpus " + p("annotated.jsonl") + " --mock-refiner " + p("mock_refiner.json") +
                         " --parallelism 1 --out " + d},
      {"train-joint", "train-joint --checkpoint " + p("warmup_checkpoint.json") + " --train " +
                          p("with_reasonings.jsonl") + " --out " + d},
      {"extract", "extract --checkpoint " + p("joint_checkpoint.json") + " --corpus " + p("test.jsonl") +
                      " --out " + d},
      {"eval-classify", "eval-classify --corpus " + p("test.jsonl") + " --predictions " + p("predictions.jsonl") +
                            " --out " + d},
      {"eval-spans", "eval-spans --corpus " + p("test.jsonl") + " --predictions " + p("predictions.jsonl") +
                         " --out " + d},
      {"faithfulness", "faithfulness --checkpoint " + p("joint_checkpoint.json") + " --corpus " + p("test.jsonl") +
                           " --predictions " + p("predictions.jsonl") + " --out " + d},
  };
  PipelineRun run;
  const auto start = Clock::now();
  for (const auto& [name, args] : steps) {
    if (cli(log, args) != 0) {
      run.ok = false;
      run.failed_step = name;
      break;
    }
  }
  run.seconds = seconds_since(start);
  return run;
}

Outcome criterion4(const fs::path& dir, const PipelineRun& run) {
  Outcome o;
  if (!run.ok) {
    o.require(false, "pipeline step " + run.failed_step);
    return o;
  }
  const auto warm_dir = dir / "warmup_only";
  fs::create_directories(warm_dir);
  const auto log = dir / "cli.log";
  auto q = [](const fs::path& path) { return "\"" + path.string() + "\""; };
  const auto warm_start = Clock::now();
  const bool ok =
      cli(log, "extract --checkpoint " + q(dir / "warmup_checkpoint.json") + " --corpus " + q(dir / "test.jsonl") +
                   " --out " + q(warm_dir)) == 0 &&
      cli(log, "eval-classify --corpus " + q(dir / "test.jsonl") + " --predictions " +
                   q(warm_dir / "predictions.jsonl") + " --out " + q(warm_dir)) == 0 &&
      cli(log, "eval-spans --corpus " + q(dir / "test.jsonl") + " --predictions " + q(warm_dir / "predictions.jsonl") +
                   " --out " + q(warm_dir)) == 0;
  const double total = run.seconds + seconds_since(warm_start);
  if (!ok) {
    o.require(false, "warm-up-only evaluation");
    return o;
  }
  const double warm_acc = read_json(warm_dir / "classification_report.json")["classification"]["accuracy"];
  const auto warm_chars = read_json(warm_dir / "span_report.json")["character"];
  const auto joint_chars = read_json(dir / "span_report.json")["character"];
  const double joint_acc = read_json(dir / "classification_report.json")["classification"]["accuracy"];
  const double gain = 100.0 * (joint_chars["f1"].get<double>() - warm_chars["f1"].get<double>());
  const double iou = joint_chars["iou"];
  o.require(warm_acc >= 0.95, "warm-up accuracy >= 0.95");
  o.require(gain >= 15.0, "joint char-F1 gain >= 15 points");
  o.require(iou >= 0.6, "joint char-IoU >= 0.6");
  o.require(total < 300.0, "runtime < 5 min");
  o.detail.precision(4);
  o.detail << "warm-up acc " << warm_acc << "; char F1 warm-up " << warm_chars["f1"].get<double>() << " -> joint "
           << joint_chars["f1"].get<double>() << " (gain " << gain << " points); joint IoU " << iou
           << "; joint acc " << joint_acc << "; " << total << " s";
  return o;
}

Outcome criterion5(const fs::path& dir, const PipelineRun& run) {
  Outcome o;
  if (!run.ok) {
    o.require(false, "pipeline step " + run.failed_step);
    return o;
  }
  const auto f = read_json(dir / "faithfulness_report.json")["faithfulness"];
  const std::size_t samples = f["samples"];
  const double span_drop = f["mean_span_drop"];
  const double random_drop = f["mean_random_drop"];
  o.require(samples >= 200, ">= 200 toxic test samples");
  o.require(span_drop - random_drop >= 0.2, "span drop exceeds random drop by >= 0.2");
  o.require(random_drop <= 0.05, "random drop <= 0.05");
  o.detail.precision(4);
  o.detail << samples << " samples; span drop " << span_drop << ", random drop " << random_drop << ", gap "
           << span_drop - random_drop;
  return o;
}

Outcome criterion6(const fs::path& dir, const PipelineRun& run) {
  Outcome o;
  if (!run.ok) {
    o.require(false, "pipeline step " + run.failed_step);
    return o;
  }
  std::vector<SpanPrediction> pairs;
  for (const auto& r : load_corpus(dir / "annotated.jsonl")) {
    if (r.label != 1) continue;
    pairs.push_back({r.id, r.weak_spans.value_or(std::vector<CharSpan>{}), r.gold_spans.value_or(std::vector<CharSpan>{}),
                     utf8::decode(r.text).size()});
  }
  const auto chars = char_metrics(pairs);

  const auto empty_dir = dir / "fallback";
  fs::create_directories(empty_dir);
  auto q = [](const fs::path& path) { return "\"" + path.string() + "\""; };
  const bool ran = cli(dir / "cli.log", "annotate --checkpoint " + q(dir / "warmup_checkpoint.json") + " --corpus " +
                                            q(dir / "train.jsonl") + " --mock-refiner " +
                                            q(dir / "mock_refiner_empty.json") + " --out " + q(empty_dir)) == 0;
  std::size_t annotations = 0, fallbacks = 0;
  if (ran) {
    std::ifstream in(empty_dir / "annotations.jsonl");
    for (std::string line; std::getline(in, line);) {
      const auto a = cusa::annotation_from_json(line);
      ++annotations;
      fallbacks += a.source == cusa::Source::kCueOnly && !a.error && !a.warnings.empty();
    }
  }
  o.require(chars.iou >= 0.9, "weak-annotation char-IoU >= 0.9");
  o.require(ran, "empty-mock annotate run");
  o.require(annotations > 0 && fallbacks == annotations, "every empty-mock record falls back to cues");
  o.detail.precision(4);
  o.detail << pairs.size() << " toxic records, char-IoU " << chars.iou << "; empty mock: " << fallbacks << "/"
           << annotations << " cue-only fallbacks";
  return o;
}

Outcome criterion7() {
  Outcome o;
  // "厦门河南人..." with gold "河南人" at [2,5).
  const std::vector<SpanPrediction> henan = {{"h", {{2, 4}}, {{2, 5}}, 20}};
  const std::vector<SpanPrediction> nan = {{"n", {{3, 4}}, {{2, 5}}, 20}};
  o.require(overlap_metrics(henan).matched == 1, "河南 matches 河南人");
  o.require(overlap_metrics(nan).matched == 0, "南 does not match 河南人");

  const fs::path golden = TOXITRACE_GOLDEN_DIR;
  const auto paired =
      pair_with_gold(load_corpus(golden / "fixture_corpus.jsonl"), load_predictions(golden / "fixture_predictions.jsonl"));
  MetricsReport report;
  report.samples = paired.size();
  report.overlap = overlap_metrics(paired);
  report.character = char_metrics(paired);
  const bool bitwise = report_to_json(report) == read_file(golden / "fixture_report.json");
  o.require(bitwise, "golden report bitwise");
  o.detail << "example matches as specified; golden report " << (bitwise ? "identical" : "differs");
  return o;
}

Outcome criterion8(const fs::path& a, const fs::path& b, const PipelineRun& ra, const PipelineRun& rb) {
  Outcome o;
  if (!ra.ok || !rb.ok) {
    o.require(false, "pipeline step " + (ra.ok ? rb.failed_step : ra.failed_step));
    return o;
  }
  std::size_t compared = 0, differing = 0;
  for (const auto& entry : fs::directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    const auto name = entry.path().filename().string();
    if (name == "cli.log") continue;
    if (name.ends_with(".manifest.json")) {
      // Durations differ between runs; the recorded hashes must not.
      auto ma = manifest_from_json(read_file(entry.path()));
      auto mb = manifest_from_json(read_file(b / name));
      ++compared;
      differing += !(ma.inputs.size() == mb.inputs.size() && ma.outputs.size() == mb.outputs.size() &&
                     std::equal(ma.outputs.begin(), ma.outputs.end(), mb.outputs.begin(),
                                [](auto& x, auto& y) { return x.sha1 == y.sha1; }) &&
                     std::equal(ma.inputs.begin(), ma.inputs.end(), mb.inputs.begin(),
                                [](auto& x, auto& y) { return x.sha1 == y.sha1; }));
      continue;
    }
    ++compared;
    differing += !fs::exists(b / name) || file_blob_sha1(entry.path()) != file_blob_sha1(b / name);
  }
  o.require(compared > 0 && differing == 0, "identical output hashes");
  o.detail << compared << " files compared, " << differing << " differ";
  return o;
}

void print(int n, const Outcome& o) {
  std::cout << "criterion " << n << ": " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail.str() << o.failures << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "toxitrace_acceptance";
  std::vector<Outcome> outcomes;
  outcomes.push_back(criterion1());
  print(1, outcomes.back());
  outcomes.push_back(criterion2());
  print(2, outcomes.back());
  outcomes.push_back(criterion3());
  print(3, outcomes.back());
  const auto run_a = run_pipeline(work / "run_a");
  outcomes.push_back(criterion4(work / "run_a", run_a));
  print(4, outcomes.back());
  outcomes.push_back(criterion5(work / "run_a", run_a));
  print(5, outcomes.back());
  outcomes.push_back(criterion6(work / "run_a", run_a));
  print(6, outcomes.back());
  outcomes.push_back(criterion7());
  print(7, outcomes.back());
  const auto run_b = run_pipeline(work / "run_b");
  outcomes.push_back(criterion8(work / "run_a", work / "run_b", run_a, run_b));
  print(8, outcomes.back());
  std::size_t passed = 0;
  for (const auto& o : outcomes) passed += o.pass;
  std::cout << passed << "/" << outcomes.size() << " criteria passed" << std::endl;
  return passed == outcomes.size() ? 0 : 1;
}
