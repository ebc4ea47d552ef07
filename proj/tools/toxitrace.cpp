#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "toxitrace/bicse.hpp"
#include "toxitrace/corpus.hpp"
#include "toxitrace/cusa.hpp"
#include "toxitrace/error.hpp"
#include "toxitrace/evalkit.hpp"
#include "toxitrace/inference.hpp"
#include "toxitrace/manifest.hpp"
#include "toxitrace/training.hpp"
#include "toxitrace/utf8.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace toxitrace;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool out_required = true) {
  cmd->add_option("--config", c.config, "training configuration (JSON)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "overrides the configured seed");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (out_required) out->required();
}

TrainConfig resolve_config(const Common& c) {
  TrainConfig config = c.config.empty() ? TrainConfig{} : load_config(c.config);
  if (c.seed) config.seed = *c.seed;
  config.validate();
  return config;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

template <typename T, typename F>
void write_lines(const fs::path& path, const std::vector<T>& items, F&& line) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& item : items) out << line(item) << '\n';
}

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const DataError*>(&e)) return "data_error";
  if (dynamic_cast<const ContractViolation*>(&e)) return "contract_violation";
  if (dynamic_cast<const NumericFault*>(&e)) return "numeric_fault";
  if (dynamic_cast<const TruncationError*>(&e)) return "truncation";
  if (dynamic_cast<const bicse::UndefinedThresholds*>(&e)) return "undefined_thresholds";
  if (dynamic_cast<const cusa::TransportError*>(&e)) return "transport_error";
  return "internal";
}

void report_error(const std::string& command, const std::string& kind, const std::string& message) {
  std::cerr << json{{"error", {{"command", command}, {"kind", kind}, {"message", message}}}}.dump() << '\n';
}

// Runs one subcommand body, then writes the manifest next to its outputs.
int run(const std::string& command, const Common& common, const std::function<void(RunManifest&)>& body) {
  const auto started = std::chrono::steady_clock::now();
  RunManifest manifest;
  manifest.command = command;
  try {
    if (!common.out.empty()) fs::create_directories(common.out);
    body(manifest);
    manifest.duration_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (!common.out.empty()) write_text(fs::path(common.out) / (command + ".manifest.json"), manifest_to_json(manifest));
  } catch (const std::exception& e) {
    report_error(command, error_kind(e), e.what());
    return 1;
  }
  for (const auto& e : manifest.errors) report_error(command, "record_error", e);
  return manifest.errors.empty() ? 0 : 1;
}

std::unique_ptr<cusa::RefinerClient> make_client(const std::string& mock, const std::string& endpoint,
                                                 const std::string& refiner_config, RunManifest& manifest,
                                                 std::size_t& parallelism) {
  const bool http = !endpoint.empty() || !refiner_config.empty();
  if (mock.empty() != http) throw ContractViolation("give exactly one of --mock-refiner or --endpoint");
  if (!mock.empty()) {
    manifest.add_input(mock);
    return std::make_unique<cusa::MockClient>(cusa::MockClient::load(mock));
  }
  cusa::HttpConfig config;
  if (!refiner_config.empty()) {
    manifest.add_input(refiner_config);
    config = cusa::http_config_from_json(read_text(refiner_config));
  }
  if (!endpoint.empty()) config.endpoint = endpoint;
  if (parallelism == 0) parallelism = config.parallelism;
  return std::make_unique<cusa::HttpClient>(config);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Saliency-guided toxic span extraction toolkit"};
  app.require_subcommand(1);
  int status = 0;

  // synth
  Common synth_common;
  SynthConfig synth;
  double test_fraction = 0.25;
  auto* synth_cmd = app.add_subcommand("synth", "generate a planted-span corpus and mock refiner fixtures");
  add_common(synth_cmd, synth_common);
  synth_cmd->add_option("--per-class", synth.per_class, "sentences per class");
  synth_cmd->add_option("--alphabet-size", synth.alphabet_size);
  synth_cmd->add_option("--lexicon-size", synth.lexicon_size);
  synth_cmd->add_option("--filler-weight", synth.lexicon_filler_weight, "weight of lexicon characters in filler");
  synth_cmd->add_option("--test-fraction", test_fraction)->check(CLI::Range(0.0, 1.0));
  synth_cmd->callback([&] {
    status = run("synth", synth_common, [&](RunManifest& m) {
      const auto config = resolve_config(synth_common);
      synth.seed = config.seed;
      m.seed = config.seed;
      m.config_json = json{{"per_class", synth.per_class},
                           {"alphabet_size", synth.alphabet_size},
                           {"lexicon_size", synth.lexicon_size},
                           {"lexicon_filler_weight", synth.lexicon_filler_weight},
                           {"test_fraction", test_fraction},
                           {"seed", synth.seed}}
                          .dump();
      const auto corpus = generate(synth);
      const auto [train, test] = split_corpus(corpus.records, test_fraction, synth.seed);
      const fs::path out = synth_common.out;
      save_corpus(train, out / "train.jsonl");
      save_corpus(test, out / "test.jsonl");
      auto responses = cusa::synthetic_mock_responses(corpus);
      write_text(out / "mock_refiner.json", cusa::mock_fixture_to_json(responses));
      for (auto& [id, text] : responses[cusa::Task::kRefine]) text.clear();
      write_text(out / "mock_refiner_empty.json", cusa::mock_fixture_to_json(responses));
      for (const char* name : {"train.jsonl", "test.jsonl", "mock_refiner.json", "mock_refiner_empty.json"}) {
        m.add_output(out / name);
      }
      std::cout << "synth: " << train.size() << " train, " << test.size() << " test records\n";
    });
  });

  // train-warmup
  Common warm_common;
  std::string warm_train;
  auto* warm_cmd = app.add_subcommand("train-warmup", "cross-entropy warm-up training");
  add_common(warm_cmd, warm_common);
  warm_cmd->add_option("--train", warm_train, "training corpus (JSON lines)")->required()->check(CLI::ExistingFile);
  warm_cmd->callback([&] {
    status = run("train-warmup", warm_common, [&](RunManifest& m) {
      const auto config = resolve_config(warm_common);
      m.seed = config.seed;
      m.config_json = config_to_json(config);
      m.add_input(warm_train);
      const fs::path out = warm_common.out;
      std::ofstream log(out / "warmup_log.jsonl", std::ios::binary);
      double last_ce = 0.0;
      const auto ckpt = warmup(config, load_corpus(warm_train), [&](const StepLog& s) {
        log << step_log_to_json(s) << '\n';
        last_ce = s.ce;
      });
      log.close();
      save_checkpoint(ckpt, out / "warmup_checkpoint.json");
      m.add_output(out / "warmup_checkpoint.json");
      m.add_output(out / "warmup_log.jsonl");
      std::cout << "train-warmup: " << ckpt.step << " steps, last batch CE " << last_ce << "\n";
    });
  });

  // annotate
  Common ann_common;
  std::string ann_ckpt, ann_corpus, ann_mock, ann_endpoint, ann_refiner_config;
  std::size_t ann_parallelism = 0;
  auto* ann_cmd = app.add_subcommand("annotate", "weak span annotation from saliency cues and a refiner");
  add_common(ann_cmd, ann_common);
  ann_cmd->add_option("--checkpoint", ann_ckpt)->required()->check(CLI::ExistingFile);
  ann_cmd->add_option("--corpus", ann_corpus)->required()->check(CLI::ExistingFile);
  ann_cmd->add_option("--mock-refiner", ann_mock, "mock fixture (JSON)")->check(CLI::ExistingFile);
  ann_cmd->add_option("--endpoint", ann_endpoint, "refiner URL");
  ann_cmd->add_option("--refiner-config", ann_refiner_config, "HTTP refiner settings (JSON)")
      ->check(CLI::ExistingFile);
  ann_cmd->add_option("--parallelism", ann_parallelism, "concurrent refiner calls (default 4)");
  ann_cmd->callback([&] {
    status = run("annotate", ann_common, [&](RunManifest& m) {
      const auto ckpt = load_checkpoint(ann_ckpt);
      m.seed = ckpt.config.seed;
      m.add_input(ann_ckpt);
      m.add_input(ann_corpus);
      auto client = make_client(ann_mock, ann_endpoint, ann_refiner_config, m, ann_parallelism);
      auto records = load_corpus(ann_corpus);
      cusa::AnnotateOptions options;
      options.parallelism = ann_parallelism == 0 ? 4 : ann_parallelism;
      const auto annotations = cusa::annotate(ckpt.params, ckpt.vocab, records, *client, options);
      cusa::apply_annotations(records, annotations);
      const fs::path out = ann_common.out;
      write_lines(out / "annotations.jsonl", annotations, cusa::annotation_to_json);
      save_corpus(records, out / "annotated.jsonl");
      m.add_output(out / "annotations.jsonl");
      m.add_output(out / "annotated.jsonl");
      std::size_t refined = 0;
      for (const auto& a : annotations) {
        refined += a.source == cusa::Source::kRefined;
        if (a.error) m.errors.push_back("record " + a.id + ": " + *a.error);
      }
      std::cout << "annotate: " << annotations.size() << " toxic records, " << refined << " refined, "
                << annotations.size() - refined << " cue_only\n";
    });
  });

  // reasonings
  Common rea_common;
  std::string rea_corpus, rea_mock, rea_endpoint, rea_refiner_config;
  std::size_t rea_parallelism = 0;
  auto* rea_cmd = app.add_subcommand("reasonings", "stance reasonings for every record");
  add_common(rea_cmd, rea_common);
  rea_cmd->add_option("--corpus", rea_corpus)->required()->check(CLI::ExistingFile);
  rea_cmd->add_option("--mock-refiner", rea_mock)->check(CLI::ExistingFile);
  rea_cmd->add_option("--endpoint", rea_endpoint);
  rea_cmd->add_option("--refiner-config", rea_refiner_config)->check(CLI::ExistingFile);
  rea_cmd->add_option("--parallelism", rea_parallelism);
  rea_cmd->callback([&] {
    status = run("reasonings", rea_common, [&](RunManifest& m) {
      m.add_input(rea_corpus);
      auto client = make_client(rea_mock, rea_endpoint, rea_refiner_config, m, rea_parallelism);
      auto records = load_corpus(rea_corpus);
      const auto results = cusa::generate_reasonings(records, *client, rea_parallelism == 0 ? 4 : rea_parallelism);
      std::map<std::string, const cusa::ReasoningResult*> by_id;
      for (const auto& r : results) by_id[r.id] = &r;
      for (auto& r : records) {
        const auto* res = by_id.at(r.id);
        if (res->reasonings) r.reasonings = res->reasonings;
        if (res->error) m.errors.push_back("record " + r.id + ": " + *res->error);
      }
      const fs::path out = rea_common.out;
      save_corpus(records, out / "with_reasonings.jsonl");
      m.add_output(out / "with_reasonings.jsonl");
      std::cout << "reasonings: " << records.size() - m.errors.size() << " of " << records.size()
                << " records\n";
    });
  });

  // train-joint
  Common joint_common;
  std::string joint_ckpt, joint_train_path;
  auto* joint_cmd = app.add_subcommand("train-joint", "joint training from a warm-up checkpoint");
  add_common(joint_cmd, joint_common);
  joint_cmd->add_option("--checkpoint", joint_ckpt, "warm-up checkpoint")->required()->check(CLI::ExistingFile);
  joint_cmd->add_option("--train", joint_train_path, "corpus with weak spans and reasonings")
      ->required()
      ->check(CLI::ExistingFile);
  joint_cmd->callback([&] {
    status = run("train-joint", joint_common, [&](RunManifest& m) {
      const auto start = load_checkpoint(joint_ckpt);
      auto config = joint_common.config.empty() ? start.config : load_config(joint_common.config);
      if (joint_common.seed) config.seed = *joint_common.seed;
      m.seed = config.seed;
      m.config_json = config_to_json(config);
      m.add_input(joint_ckpt);
      m.add_input(joint_train_path);
      const fs::path out = joint_common.out;
      std::ofstream log(out / "joint_log.jsonl", std::ios::binary);
      std::vector<double> first_ratio, last_ratio;
      const auto ckpt = joint_train(config, load_corpus(joint_train_path), start, [&](const StepLog& s) {
        log << step_log_to_json(s) << '\n';
        if (s.g_toxic && s.g_non_toxic && *s.g_non_toxic > 0.0) {
          const double ratio = *s.g_toxic / *s.g_non_toxic;
          if (s.epoch == 0) first_ratio.push_back(ratio);
          if (s.epoch + 1 == config.joint_epochs) last_ratio.push_back(ratio);
        }
      });
      log.close();
      save_checkpoint(ckpt, out / "joint_checkpoint.json");
      m.add_output(out / "joint_checkpoint.json");
      m.add_output(out / "joint_log.jsonl");
      std::cout << "train-joint: " << ckpt.step << " total steps, mean toxic/non-toxic gradient-norm ratio "
                << mean_of(first_ratio) << " first epoch, " << mean_of(last_ratio) << " last epoch\n";
    });
  });

  // extract
  Common ext_common;
  std::string ext_ckpt, ext_corpus, ext_saliency = "input", ext_selector = "bicse";
  bool ext_dump = false, ext_merge_adjacent = false;
  double ext_fraction = 0.15;
  auto* ext_cmd = app.add_subcommand("extract", "predicted label and spans per record");
  add_common(ext_cmd, ext_common);
  ext_cmd->add_option("--checkpoint", ext_ckpt)->required()->check(CLI::ExistingFile);
  ext_cmd->add_option("--corpus", ext_corpus)->required()->check(CLI::ExistingFile);
  ext_cmd->add_flag("--dump-saliency", ext_dump, "include per-character scores");
  ext_cmd->add_option("--saliency", ext_saliency, "input (gradient x input) or norm (gradient norm)")
      ->check(CLI::IsMember({"input", "norm"}));
  ext_cmd->add_option("--selector", ext_selector, "bicse or top-fraction")
      ->check(CLI::IsMember({"bicse", "top-fraction"}));
  ext_cmd->add_option("--fraction", ext_fraction, "share of tokens kept by top-fraction")
      ->check(CLI::Range(0.0, 1.0));
  ext_cmd->add_flag("--merge-adjacent", ext_merge_adjacent, "coalesce touching spans");
  ext_cmd->callback([&] {
    status = run("extract", ext_common, [&](RunManifest& m) {
      const auto ckpt = load_checkpoint(ext_ckpt);
      m.seed = ckpt.config.seed;
      m.config_json = json{{"saliency", ext_saliency},
                           {"selector", ext_selector},
                           {"fraction", ext_fraction},
                           {"merge_adjacent", ext_merge_adjacent}}
                          .dump();
      m.add_input(ext_ckpt);
      m.add_input(ext_corpus);
      const auto records = load_corpus(ext_corpus);
      const auto kind = ext_saliency == "input" ? SaliencyKind::kGradientTimesInput : SaliencyKind::kGradientNorm;
      bicse::Options options;
      options.merge_adjacent = ext_merge_adjacent;
      std::vector<PredictionRecord> preds;
      std::size_t toxic = 0;
      for (const auto& r : records) {
        auto e = extract_spans(ckpt.params, ckpt.vocab, r.text, kind, options);
        if (ext_selector == "top-fraction" && e.prediction.label == kToxic) {
          e.spans = top_fraction_spans(e.saliency.scores, e.saliency.offsets, ext_fraction);
        }
        toxic += e.prediction.label == kToxic;
        preds.push_back(to_record(r.id, e, ext_dump));
      }
      const fs::path out = ext_common.out;
      write_lines(out / "predictions.jsonl", preds, prediction_to_json);
      m.add_output(out / "predictions.jsonl");
      std::cout << "extract: " << preds.size() << " records, " << toxic << " predicted toxic\n";
    });
  });

  // eval-classify
  Common cls_common;
  std::string cls_corpus, cls_preds;
  bool cls_csv = false;
  auto* cls_cmd = app.add_subcommand("eval-classify", "classification metrics");
  add_common(cls_cmd, cls_common);
  cls_cmd->add_option("--corpus", cls_corpus)->required()->check(CLI::ExistingFile);
  cls_cmd->add_option("--predictions", cls_preds)->required()->check(CLI::ExistingFile);
  cls_cmd->add_flag("--csv", cls_csv, "also write a flat CSV table");
  cls_cmd->callback([&] {
    status = run("eval-classify", cls_common, [&](RunManifest& m) {
      m.add_input(cls_corpus);
      m.add_input(cls_preds);
      const auto records = load_corpus(cls_corpus);
      std::map<std::string, int> predicted;
      for (const auto& p : load_predictions(cls_preds)) {
        if (!predicted.emplace(p.id, p.label).second) throw DataError("duplicate prediction for " + p.id);
      }
      std::vector<int> labels, preds;
      for (const auto& r : records) {
        const auto it = predicted.find(r.id);
        if (it == predicted.end()) throw DataError("no prediction for record " + r.id);
        labels.push_back(r.label);
        preds.push_back(it->second);
      }
      MetricsReport report;
      report.samples = labels.size();
      report.classification = classification_metrics(labels, preds);
      const fs::path out = cls_common.out;
      write_text(out / "classification_report.json", report_to_json(report));
      m.add_output(out / "classification_report.json");
      if (cls_csv) {
        write_text(out / "classification_report.csv", report_to_csv(report));
        m.add_output(out / "classification_report.csv");
      }
      std::cout << "eval-classify: accuracy " << report.classification->accuracy << ", macro-F1 "
                << report.classification->macro_f1 << "\n";
    });
  });

  // eval-spans
  Common spn_common;
  std::string spn_corpus, spn_preds, spn_denominator = "gold", spn_averaging = "micro";
  double spn_threshold = 0.5;
  bool spn_csv = false;
  auto* spn_cmd = app.add_subcommand("eval-spans", "span-level and character-level extraction metrics");
  add_common(spn_cmd, spn_common);
  spn_cmd->add_option("--corpus", spn_corpus, "corpus with gold spans")->required()->check(CLI::ExistingFile);
  spn_cmd->add_option("--predictions", spn_preds)->required()->check(CLI::ExistingFile);
  spn_cmd->add_flag("--csv", spn_csv, "also write a flat CSV table");
  spn_cmd->add_option("--threshold", spn_threshold, "overlap share required for a span match")
      ->check(CLI::Range(0.0, 1.0));
  spn_cmd->add_option("--denominator", spn_denominator, "overlap denominator: gold, pred or union")
      ->check(CLI::IsMember({"gold", "pred", "union"}));
  spn_cmd->add_option("--averaging", spn_averaging, "character metrics: micro or macro")
      ->check(CLI::IsMember({"micro", "macro"}));
  spn_cmd->callback([&] {
    status = run("eval-spans", spn_common, [&](RunManifest& m) {
      m.config_json = json{{"threshold", spn_threshold}, {"denominator", spn_denominator}, {"averaging", spn_averaging}}
                          .dump();
      m.add_input(spn_corpus);
      m.add_input(spn_preds);
      const auto paired = pair_with_gold(load_corpus(spn_corpus), load_predictions(spn_preds));
      OverlapOptions overlap;
      overlap.threshold = spn_threshold;
      if (spn_denominator == "pred") overlap.denominator = OverlapDenominator::kPredicted;
      if (spn_denominator == "union") overlap.denominator = OverlapDenominator::kUnion;
      MetricsReport report;
      report.samples = paired.size();
      report.overlap = overlap_metrics(paired, overlap);
      report.character = char_metrics(paired, spn_averaging == "macro" ? Averaging::kMacro : Averaging::kMicro);
      const fs::path out = spn_common.out;
      write_text(out / "span_report.json", report_to_json(report));
      m.add_output(out / "span_report.json");
      if (spn_csv) {
        write_text(out / "span_report.csv", report_to_csv(report));
        m.add_output(out / "span_report.csv");
      }
      std::cout << "eval-spans: char F1 " << report.character->f1 << ", IoU " << report.character->iou
                << ", span F1 " << report.overlap->f1 << "\n";
    });
  });

  // faithfulness
  Common fai_common;
  std::string fai_ckpt, fai_corpus, fai_preds;
  bool fai_csv = false;
  auto* fai_cmd = app.add_subcommand("faithfulness", "confidence drop under span and random masking");
  add_common(fai_cmd, fai_common);
  fai_cmd->add_option("--checkpoint", fai_ckpt)->required()->check(CLI::ExistingFile);
  fai_cmd->add_option("--corpus", fai_corpus)->required()->check(CLI::ExistingFile);
  fai_cmd->add_option("--predictions", fai_preds)->required()->check(CLI::ExistingFile);
  fai_cmd->add_flag("--csv", fai_csv, "also write a flat CSV table");
  fai_cmd->callback([&] {
    status = run("faithfulness", fai_common, [&](RunManifest& m) {
      const auto ckpt = load_checkpoint(fai_ckpt);
      const auto seed = fai_common.seed.value_or(ckpt.config.seed);
      m.seed = seed;
      m.add_input(fai_ckpt);
      m.add_input(fai_corpus);
      m.add_input(fai_preds);
      std::map<std::string, PredictionRecord> by_id;
      for (auto& p : load_predictions(fai_preds)) {
        const auto id = p.id;
        if (!by_id.emplace(id, std::move(p)).second) throw DataError("duplicate prediction for " + id);
      }
      std::vector<FaithfulnessRecord> records;
      for (const auto& r : load_corpus(fai_corpus)) {
        if (r.label != kToxic) continue;
        const auto it = by_id.find(r.id);
        if (it == by_id.end()) throw DataError("no prediction for record " + r.id);
        const auto tokens = tokenize(ckpt.vocab, r.text);
        if (predict_ids(ckpt.params, tokens.ids).label != kToxic) continue;
        records.push_back(faithfulness_record(ckpt.params, tokens, r.id, it->second.spans, seed));
      }
      MetricsReport report;
      report.samples = records.size();
      report.faithfulness = summarize(records);
      const fs::path out = fai_common.out;
      write_lines(out / "faithfulness_records.jsonl", records, [](const FaithfulnessRecord& r) {
        return json{{"id", r.id},
                    {"before", r.before},
                    {"after_span", r.after_span},
                    {"after_random", r.after_random},
                    {"span_drop", r.span_drop},
                    {"random_drop", r.random_drop},
                    {"masked", r.masked},
                    {"seed", r.seed},
                    {"empty_spans", r.empty_spans}}
            .dump();
      });
      write_text(out / "faithfulness_report.json", report_to_json(report));
      m.add_output(out / "faithfulness_records.jsonl");
      m.add_output(out / "faithfulness_report.json");
      if (fai_csv) {
        write_text(out / "faithfulness_report.csv", report_to_csv(report));
        m.add_output(out / "faithfulness_report.csv");
      }
      const auto& f = *report.faithfulness;
      std::cout << "faithfulness: " << f.samples << " samples, span drop " << f.mean_span_drop << ", random drop "
                << f.mean_random_drop << "\n";
    });
  });

  // bicse
  Common bic_common;
  std::string bic_scores, bic_scores_file;
  bool bic_merge_adjacent = false;
  auto* bic_cmd = app.add_subcommand("bicse", "span scan over raw scores");
  add_common(bic_cmd, bic_common, false);
  bic_cmd->add_option("--scores", bic_scores, "comma-separated scores");
  bic_cmd->add_option("--scores-file", bic_scores_file, "JSON array of scores")->check(CLI::ExistingFile);
  bic_cmd->add_flag("--merge-adjacent", bic_merge_adjacent, "coalesce touching spans");
  bic_cmd->callback([&] {
    status = run("bicse", bic_common, [&](RunManifest& m) {
      if (bic_scores.empty() == bic_scores_file.empty()) {
        throw ContractViolation("give exactly one of --scores or --scores-file");
      }
      std::vector<double> scores;
      if (!bic_scores_file.empty()) {
        m.add_input(bic_scores_file);
        try {
          scores = json::parse(read_text(bic_scores_file)).get<std::vector<double>>();
        } catch (const json::exception& e) {
          throw DataError(std::string("scores file must hold a JSON array of numbers: ") + e.what());
        }
      } else {
        std::stringstream ss(bic_scores);
        for (std::string item; std::getline(ss, item, ',');) {
          std::size_t used = 0;
          try {
            scores.push_back(std::stod(item, &used));
          } catch (const std::exception&) {
            throw DataError("not a number: " + item);
          }
          if (item.find_first_not_of(" \t", used) != std::string::npos) throw DataError("not a number: " + item);
        }
      }
      bicse::Options options;
      options.merge_adjacent = bic_merge_adjacent;
      json spans = json::array();
      const auto found = scores.size() < 3 ? std::vector<bicse::TokenSpan>{} : bicse::extract(scores, options);
      for (const auto& s : found) spans.push_back({s.start, s.end});
      const auto result = json{{"n", scores.size()}, {"spans", spans}}.dump();
      std::cout << result << "\n";
      if (!bic_common.out.empty()) {
        const auto path = fs::path(bic_common.out) / "bicse_spans.json";
        write_text(path, result + "\n");
        m.add_output(path);
      }
    });
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error(app.get_subcommands().empty() ? "" : app.get_subcommands().front()->get_name(), "usage", e.what());
    return 2;
  }
  return status;
}
