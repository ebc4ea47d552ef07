#include "toxitrace/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "json.hpp"
#include "toxitrace/error.hpp"
#include "toxitrace/saliency.hpp"
#include "toxitrace/utf8.hpp"

namespace toxitrace {

using json = nlohmann::ordered_json;
using ag::Tensor;
using ag::Var;

// --- config -----------------------------------------------------------------

void TrainConfig::validate() const {
  auto fail = [](const std::string& what) { throw ContractViolation("train config: " + what); };
  if (warmup_epochs < 1) fail("warmup_epochs must be at least 1");
  if (joint_epochs < 1) fail("joint_epochs must be at least 1");
  if (batch_size < 1) fail("batch_size must be at least 1");
  if (dim < 1) fail("dim must be positive");
  for (double lr : {encoder_lr_warmup, head_lr_warmup, encoder_lr_joint, head_lr_joint}) {
    if (!(lr > 0.0)) fail("learning rates must be positive");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0,1)");
  if (!(epsilon > 0.0)) fail("epsilon must be positive");
  if (!(weight_decay >= 0.0)) fail("weight_decay must be non-negative");
  gc.validate();
  arcl.validate();
}

namespace {

json config_json(const TrainConfig& c) {
  return {
      {"warmup_epochs", c.warmup_epochs},
      {"joint_epochs", c.joint_epochs},
      {"batch_size", c.batch_size},
      {"dim", c.dim},
      {"encoder_lr_warmup", c.encoder_lr_warmup},
      {"head_lr_warmup", c.head_lr_warmup},
      {"encoder_lr_joint", c.encoder_lr_joint},
      {"head_lr_joint", c.head_lr_joint},
      {"beta1", c.beta1},
      {"beta2", c.beta2},
      {"epsilon", c.epsilon},
      {"weight_decay", c.weight_decay},
      {"seed", c.seed},
      {"self_test_coordinates", c.self_test_coordinates},
      {"gc",
       {{"margin", c.gc.margin},
        {"percentile", c.gc.percentile},
        {"alpha", c.gc.alpha},
        {"tau_cap", c.gc.tau_cap}}},
      {"arcl",
       {{"temperature", c.arcl.temperature},
        {"lambda_grad", c.arcl.lambda_grad},
        {"lambda_sem", c.arcl.lambda_sem},
        {"normalize", c.arcl.normalize}}},
  };
}

template <typename T>
void read_field(const json& j, const char* key, T& out, std::set<std::string>& seen) {
  if (!j.contains(key)) return;
  seen.insert(key);
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw DataError(std::string("config field ") + key + " has the wrong type");
  }
}

void reject_unknown(const json& j, const std::set<std::string>& seen, const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!seen.count(key)) throw DataError("unknown config field " + where + key);
  }
}

TrainConfig apply_json(const json& j, TrainConfig c) {
  if (!j.is_object()) throw DataError("config must be a JSON object");
  std::set<std::string> seen;
  read_field(j, "warmup_epochs", c.warmup_epochs, seen);
  read_field(j, "joint_epochs", c.joint_epochs, seen);
  read_field(j, "batch_size", c.batch_size, seen);
  read_field(j, "dim", c.dim, seen);
  read_field(j, "encoder_lr_warmup", c.encoder_lr_warmup, seen);
  read_field(j, "head_lr_warmup", c.head_lr_warmup, seen);
  read_field(j, "encoder_lr_joint", c.encoder_lr_joint, seen);
  read_field(j, "head_lr_joint", c.head_lr_joint, seen);
  read_field(j, "beta1", c.beta1, seen);
  read_field(j, "beta2", c.beta2, seen);
  read_field(j, "epsilon", c.epsilon, seen);
  read_field(j, "weight_decay", c.weight_decay, seen);
  read_field(j, "seed", c.seed, seen);
  read_field(j, "self_test_coordinates", c.self_test_coordinates, seen);
  if (j.contains("gc")) {
    seen.insert("gc");
    const auto& g = j["gc"];
    std::set<std::string> gs;
    read_field(g, "margin", c.gc.margin, gs);
    read_field(g, "percentile", c.gc.percentile, gs);
    read_field(g, "alpha", c.gc.alpha, gs);
    read_field(g, "tau_cap", c.gc.tau_cap, gs);
    reject_unknown(g, gs, "gc.");
  }
  if (j.contains("arcl")) {
    seen.insert("arcl");
    const auto& a = j["arcl"];
    std::set<std::string> as;
    read_field(a, "temperature", c.arcl.temperature, as);
    read_field(a, "lambda_grad", c.arcl.lambda_grad, as);
    read_field(a, "lambda_sem", c.arcl.lambda_sem, as);
    read_field(a, "normalize", c.arcl.normalize, as);
    reject_unknown(a, as, "arcl.");
  }
  reject_unknown(j, seen, "");
  c.validate();
  return c;
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError("malformed " + what + ": " + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string config_to_json(const TrainConfig& config) { return config_json(config).dump(2); }

TrainConfig config_from_json(const std::string& text, TrainConfig base) {
  return apply_json(parse_json(text, "config"), base);
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  try {
    return config_from_json(read_file(path), base);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// --- optimizer --------------------------------------------------------------

double cosine_lr(double lr0, std::size_t t, std::size_t total) {
  if (total == 0) throw ContractViolation("cosine schedule needs a positive horizon");
  const double frac = static_cast<double>(std::min(t, total)) / static_cast<double>(total);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

AdamW::AdamW(const std::vector<Tensor*>& params, AdamWHyper hyper) : hyper_(hyper) {
  for (const auto* p : params) {
    m_.emplace_back(p->rows, p->cols);
    v_.emplace_back(p->rows, p->cols);
  }
}

void AdamW::step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                 std::span<const double> lrs) {
  if (params.size() != m_.size() || grads.size() != m_.size() || lrs.size() != m_.size()) {
    throw ContractViolation("optimizer step with mismatched parameter lists");
  }
  ++t_;
  const double c1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k]->data;
    const auto& g = grads[k].data;
    if (g.size() != p.size()) throw ContractViolation("gradient shape differs from parameter");
    auto& m = m_[k].data;
    auto& v = v_[k].data;
    const double lr = lrs[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * g[i];
      v[i] = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * g[i] * g[i];
      const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + hyper_.epsilon);
      p[i] -= lr * (update + hyper_.weight_decay * p[i]);
    }
  }
}

// --- checkpoints ------------------------------------------------------------

std::string stage_name(Stage stage) { return stage == Stage::kWarmup ? "warmup" : "joint"; }

namespace {

Stage parse_stage(const std::string& s) {
  if (s == "warmup") return Stage::kWarmup;
  if (s == "joint") return Stage::kJoint;
  throw DataError("unknown checkpoint stage " + s);
}

}  // namespace

std::string checkpoint_to_json(const Checkpoint& c) {
  json j;
  j["format_version"] = kCheckpointFormatVersion;
  j["stage"] = stage_name(c.stage);
  j["step"] = c.step;
  j["config"] = config_json(c.config);
  json symbols = json::array();
  for (char32_t ch : c.vocab.symbols()) symbols.push_back(static_cast<std::uint32_t>(ch));
  j["vocabulary"] = symbols;
  j["vocab_size"] = c.params.vocab_size;
  j["dim"] = c.params.dim;
  json tensors = json::object();
  const auto& names = EncoderParams::field_names();
  const auto fields = c.params.fields();
  for (std::size_t k = 0; k < fields.size(); ++k) {
    tensors[names[k]] = {{"rows", fields[k]->rows}, {"cols", fields[k]->cols}, {"data", fields[k]->data}};
  }
  j["params"] = tensors;
  return j.dump();
}

Checkpoint checkpoint_from_json(const std::string& text) {
  const json j = parse_json(text, "checkpoint");
  Checkpoint c;
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion) {
      throw DataError("unsupported checkpoint format version " + std::to_string(version));
    }
    c.stage = parse_stage(j.at("stage").get<std::string>());
    c.step = j.at("step").get<std::size_t>();
    c.config = apply_json(j.at("config"), TrainConfig{});
    std::vector<char32_t> symbols;
    for (const auto& s : j.at("vocabulary")) symbols.push_back(static_cast<char32_t>(s.get<std::uint32_t>()));
    c.vocab = Vocabulary::from_symbols(std::move(symbols));
    const auto vocab_size = j.at("vocab_size").get<std::size_t>();
    const auto dim = j.at("dim").get<std::size_t>();
    if (vocab_size != c.vocab.size()) throw DataError("checkpoint vocabulary size mismatch");
    c.params = EncoderParams::zeros(vocab_size, dim);
    const auto& names = EncoderParams::field_names();
    auto fields = c.params.fields();
    for (std::size_t k = 0; k < fields.size(); ++k) {
      const auto& t = j.at("params").at(names[k]);
      if (t.at("rows").get<std::size_t>() != fields[k]->rows ||
          t.at("cols").get<std::size_t>() != fields[k]->cols) {
        throw DataError("checkpoint tensor " + names[k] + " has the wrong shape");
      }
      auto data = t.at("data").get<std::vector<double>>();
      if (data.size() != fields[k]->size()) throw DataError("checkpoint tensor " + names[k] + " is truncated");
      fields[k]->data = std::move(data);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint schema violation: ") + e.what());
  }
  if (!c.params.all_finite()) throw DataError("checkpoint holds non-finite parameters");
  return c;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(checkpoint) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  try {
    return checkpoint_from_json(read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

std::string step_log_to_json(const StepLog& s) {
  json j;
  j["stage"] = stage_name(s.stage);
  j["step"] = s.step;
  j["epoch"] = s.epoch;
  j["lr"] = s.lr_encoder;
  j["lr_head"] = s.lr_head;
  j["ce"] = s.ce;
  j["pgr"] = s.pgr;
  j["ppt"] = s.ppt;
  j["arcl"] = s.arcl;
  j["total"] = s.total;
  if (s.g_toxic) j["g_toxic"] = *s.g_toxic;
  if (s.g_non_toxic) j["g_non_toxic"] = *s.g_non_toxic;
  return j.dump();
}

// --- samples and objective --------------------------------------------------

namespace {

std::vector<std::size_t> reason_ids(const Vocabulary& vocab, const std::string& text) {
  auto chars = utf8::decode(text);
  if (chars.size() + 2 > kMaxSequence) chars.resize(kMaxSequence - 2);
  return tokenize(vocab, utf8::encode(chars)).ids;
}

}  // namespace

TrainSample prepare_sample(const CorpusRecord& r, const Vocabulary& vocab) {
  TrainSample s;
  s.id = r.id;
  s.label = r.label;
  try {
    s.tokens = tokenize(vocab, r.text);
  } catch (const TruncationError& e) {
    throw TruncationError("record " + r.id + ": " + e.what());
  }
  if (s.tokens.num_chars() == 0) throw DataError("record " + r.id + ": empty text");
  if (r.weak_spans) s.partition = partition_tokens(s.tokens.offsets, *r.weak_spans);
  if (r.reasonings) {
    s.toxic_reason = reason_ids(vocab, r.reasonings->toxic);
    s.normal_reason = reason_ids(vocab, r.reasonings->normal);
  }
  return s;
}

namespace {

Var zero() { return ag::constant(Tensor::scalar(0.0)); }

Var accumulate(const Var& total, const Var& term) { return total.defined() ? ag::add(total, term) : term; }

bool uses_gc(const TrainSample& s) { return s.label == kToxic && s.partition.eligible(); }

}  // namespace

JointTerms joint_objective(const ParamVars& params, std::span<const TrainSample> batch,
                           const TrainConfig& config, const FrozenThresholds* frozen) {
  if (batch.empty()) throw ContractViolation("empty training batch");
  if (frozen && frozen->size() != batch.size()) throw ContractViolation("frozen thresholds per sample");
  const double lambda_grad = config.arcl.lambda_grad;
  const double lambda_sem = config.arcl.lambda_sem;

  JointTerms out;
  Var ce, gc_pgr, gc_ppt;
  std::vector<Var> texts, toxic_reasons, normal_reasons;
  double g_tox_sum = 0.0, g_non_sum = 0.0;
  std::size_t g_tox_n = 0, g_non_n = 0;

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = batch[b];
    auto enc = encode(params, s.tokens.ids);
    ce = accumulate(ce, ce_loss(enc.log_probs, s.label));

    if (lambda_grad > 0.0 && uses_gc(s)) {
      auto g = gradnorm_nodes(enc, kToxic);
      std::optional<PptThresholds> th;
      if (frozen) th = (*frozen)[b];
      gc_pgr = accumulate(gc_pgr, pgr_loss(g, s.partition, config.gc.margin));
      gc_ppt = accumulate(gc_ppt, ppt_loss(g, s.partition, config.gc, th));
      ++out.eligible;
      const auto& gv = g.value().data;
      for (auto i : s.partition.toxic) g_tox_sum += gv[i];
      for (auto j : s.partition.non_toxic) g_non_sum += gv[j];
      g_tox_n += s.partition.toxic.size();
      g_non_n += s.partition.non_toxic.size();
    }
    if (lambda_sem > 0.0 && s.toxic_reason && s.normal_reason) {
      texts.push_back(enc.cls_state);
      toxic_reasons.push_back(encode(params, *s.toxic_reason).cls_state);
      normal_reasons.push_back(encode(params, *s.normal_reason).cls_state);
    }
  }

  out.ce = ag::scale(ce, 1.0 / static_cast<double>(batch.size()));
  const double per_eligible = out.eligible ? 1.0 / static_cast<double>(out.eligible) : 0.0;
  out.pgr = out.eligible ? ag::scale(gc_pgr, per_eligible) : zero();
  out.ppt = out.eligible ? ag::scale(gc_ppt, per_eligible) : zero();
  out.arcl = texts.empty() ? zero()
                           : arcl_loss(texts, toxic_reasons, normal_reasons, config.arcl.temperature,
                                       config.arcl.normalize);
  out.total = out.ce;
  if (lambda_grad > 0.0 && out.eligible) {
    out.total = ag::add(out.total, ag::scale(ag::add(out.pgr, out.ppt), lambda_grad));
  }
  if (lambda_sem > 0.0 && !texts.empty()) out.total = ag::add(out.total, ag::scale(out.arcl, lambda_sem));
  if (g_tox_n) out.g_toxic = g_tox_sum / static_cast<double>(g_tox_n);
  if (g_non_n) out.g_non_toxic = g_non_sum / static_cast<double>(g_non_n);
  return out;
}

FrozenThresholds current_thresholds(const EncoderParams& params, std::span<const TrainSample> batch,
                                    const GcConfig& gc) {
  FrozenThresholds out;
  for (const auto& s : batch) {
    if (!uses_gc(s)) {
      out.emplace_back();
      continue;
    }
    auto seq = gradnorm_sequence(params, s.tokens, kToxic);
    out.push_back(ppt_thresholds(seq.scores, gc));
  }
  return out;
}

// --- training loops ---------------------------------------------------------

namespace {

struct StageSpec {
  Stage stage;
  std::size_t epochs;
  double encoder_lr;
  double head_lr;
  bool ce_only;
};

std::mt19937_64 epoch_rng(std::uint64_t seed, std::size_t epoch) {
  std::seed_seq seq{seed, static_cast<std::uint64_t>(epoch), std::uint64_t{0x746f78}};
  return std::mt19937_64(seq);
}

void check_finite_loss(double v, const std::string& id_hint) {
  if (!std::isfinite(v)) throw NumericFault("training", "loss diverged (" + id_hint + ")");
}

Checkpoint run_stage(Checkpoint ckpt, const TrainConfig& config, const std::vector<TrainSample>& samples,
                     const StageSpec& spec, const StepSink& sink) {
  if (spec.epochs < 1) throw ContractViolation("training stage needs at least one epoch");
  if (samples.empty()) throw DataError("no training samples");
  TrainConfig objective_config = config;
  if (spec.ce_only) {
    objective_config.arcl.lambda_grad = 0.0;
    objective_config.arcl.lambda_sem = 0.0;
  }

  const std::size_t batches = (samples.size() + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = batches * spec.epochs;
  auto fields = ckpt.params.fields();
  AdamW opt(fields, {config.beta1, config.beta2, config.epsilon, config.weight_decay});
  std::vector<std::size_t> order(samples.size());
  std::vector<TrainSample> batch;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto rng = epoch_rng(config.seed, epoch);
    std::shuffle(order.begin(), order.end(), rng);

    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      batch.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k) {
        batch.push_back(samples[order[k]]);
      }
      const double lr_enc = cosine_lr(spec.encoder_lr, step, total_steps);
      const double lr_head = cosine_lr(spec.head_lr, step, total_steps);

      auto vars = bind(ckpt.params, true);
      auto terms = joint_objective(vars, batch, objective_config);
      check_finite_loss(terms.total.item(), "step " + std::to_string(step));
      auto grads = ag::gradient(terms.total, vars.tensors, false);
      std::vector<Tensor> gvals;
      gvals.reserve(grads.size());
      for (auto& g : grads) gvals.push_back(g.value());
      std::vector<double> lrs(fields.size(), lr_enc);
      for (std::size_t k = ParamVars::kHeadBegin; k < lrs.size(); ++k) lrs[k] = lr_head;
      opt.step(fields, gvals, lrs);
      if (!ckpt.params.all_finite()) throw NumericFault("training", "non-finite parameters after update");

      if (sink) {
        StepLog log;
        log.stage = spec.stage;
        log.step = step;
        log.epoch = epoch;
        log.lr_encoder = lr_enc;
        log.lr_head = lr_head;
        log.ce = terms.ce.item();
        log.pgr = terms.pgr.item();
        log.ppt = terms.ppt.item();
        log.arcl = terms.arcl.item();
        log.total = terms.total.item();
        log.g_toxic = terms.g_toxic;
        log.g_non_toxic = terms.g_non_toxic;
        sink(log);
      }
      ++step;
    }
  }
  ckpt.stage = spec.stage;
  ckpt.step += step;
  ckpt.config = config;
  return ckpt;
}

std::vector<TrainSample> prepare_all(const std::vector<CorpusRecord>& records, const Vocabulary& vocab) {
  std::vector<TrainSample> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    if (r.label != 0 && r.label != 1) throw DataError("record " + r.id + ": label must be 0 or 1");
    out.push_back(prepare_sample(r, vocab));
  }
  return out;
}

// Compares the joint gradient with central differences on a two-sample batch
// before any update. Pairs sitting on a hinge kink are skipped.
void self_test(const EncoderParams& params, const std::vector<TrainSample>& samples, const TrainConfig& config) {
  const auto negative = std::find_if(samples.begin(), samples.end(), [](const auto& s) { return s.label != kToxic; });
  if (negative == samples.end()) return;
  std::size_t tried = 0;
  for (const auto& s : samples) {
    if (!uses_gc(s)) continue;
    if (++tried > 8) return;
    const std::vector<TrainSample> batch = {s, *negative};
    const auto report = joint_gradient_check(params, batch, config, 1e-5, config.self_test_coordinates);
    if (report.min_hinge_margin < 1e-3) continue;
    if (!(report.max_relative_error < 1e-4)) {
      throw NumericFault("joint gradient self-test",
                         "relative error " + std::to_string(report.max_relative_error) + " on sample " + s.id);
    }
    return;
  }
}

}  // namespace

Checkpoint warmup(const TrainConfig& config, const std::vector<CorpusRecord>& records, const StepSink& sink) {
  config.validate();
  std::vector<std::string> texts;
  texts.reserve(records.size());
  for (const auto& r : records) texts.push_back(r.text);
  Checkpoint ckpt;
  ckpt.vocab = Vocabulary::build(texts);
  ckpt.params = EncoderParams::random(ckpt.vocab.size(), config.dim, config.seed);
  ckpt.config = config;
  const auto samples = prepare_all(records, ckpt.vocab);
  return run_stage(std::move(ckpt), config, samples,
                   {Stage::kWarmup, config.warmup_epochs, config.encoder_lr_warmup, config.head_lr_warmup, true},
                   sink);
}

Checkpoint continue_ce(const Checkpoint& start, const TrainConfig& config,
                       const std::vector<CorpusRecord>& records, std::size_t epochs, double encoder_lr,
                       double head_lr, Stage stage, const StepSink& sink) {
  config.validate();
  const auto samples = prepare_all(records, start.vocab);
  return run_stage(start, config, samples, {stage, epochs, encoder_lr, head_lr, true}, sink);
}

Checkpoint joint_train(const TrainConfig& config, const std::vector<CorpusRecord>& records,
                       const Checkpoint& start, const StepSink& sink) {
  config.validate();
  if (start.stage != Stage::kWarmup) throw ContractViolation("joint training starts from a warm-up checkpoint");
  for (const auto& r : records) {
    if (r.label != kToxic) continue;
    if (!r.weak_spans) throw DataError("record " + r.id + ": toxic sample without weak spans");
    if (!r.reasonings) throw DataError("record " + r.id + ": toxic sample without reasonings");
  }
  const auto samples = prepare_all(records, start.vocab);
  if (config.self_test_coordinates > 0) self_test(start.params, samples, config);
  return run_stage(start, config, samples,
                   {Stage::kJoint, config.joint_epochs, config.encoder_lr_joint, config.head_lr_joint, false},
                   sink);
}

// --- gradient check ---------------------------------------------------------

namespace {

double hinge_margin(const EncoderParams& params, std::span<const TrainSample> batch, const TrainConfig& config,
                    const FrozenThresholds& frozen) {
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& s = batch[b];
    if (!uses_gc(s)) continue;
    const auto g = gradnorm_sequence(params, s.tokens, kToxic).scores;
    const auto& th = *frozen[b];
    for (auto i : s.partition.toxic) {
      margin = std::min(margin, std::abs(th.target - g[i]));
      for (auto j : s.partition.non_toxic) margin = std::min(margin, std::abs(g[j] - g[i] + config.gc.margin));
    }
    for (auto j : s.partition.non_toxic) margin = std::min(margin, std::abs(g[j] - th.floor));
  }
  return margin;
}

}  // namespace

GradCheckReport joint_gradient_check(const EncoderParams& params, std::span<const TrainSample> batch,
                                     const TrainConfig& config, double step, std::size_t max_coordinates) {
  const auto frozen = current_thresholds(params, batch, config.gc);
  GradCheckReport report;
  report.min_hinge_margin = hinge_margin(params, batch, config, frozen);

  auto vars = bind(params, true);
  auto terms = joint_objective(vars, batch, config, &frozen);
  auto grads = ag::gradient(terms.total, vars.tensors, false);

  // Embedding rows the batch never reads cannot influence the loss.
  std::set<std::size_t> used_tokens;
  std::size_t max_len = 0;
  auto note = [&](const std::vector<std::size_t>& ids) {
    used_tokens.insert(ids.begin(), ids.end());
    max_len = std::max(max_len, ids.size());
  };
  for (const auto& s : batch) {
    note(s.tokens.ids);
    if (s.toxic_reason) note(*s.toxic_reason);
    if (s.normal_reason) note(*s.normal_reason);
  }

  EncoderParams work = params;
  auto fields = work.fields();
  auto value = [&]() {
    auto v = bind(work, false);
    return joint_objective(v, batch, config, &frozen).total.item();
  };

  struct Coord {
    std::size_t k, r, c;
  };
  std::vector<Coord> coords;
  for (std::size_t k = 0; k < fields.size(); ++k) {
    const auto& t = *fields[k];
    const auto& g = grads[k].value();
    for (std::size_t r = 0; r < t.rows; ++r) {
      const bool unread = (k == 0 && !used_tokens.count(r)) || (k == 1 && r >= max_len);
      for (std::size_t c = 0; c < t.cols; ++c) {
        if (!unread) {
          coords.push_back({k, r, c});
          continue;
        }
        ++report.untouched;
        if (g(r, c) != 0.0) report.max_relative_error = std::numeric_limits<double>::infinity();
      }
    }
  }
  if (max_coordinates > 0 && coords.size() > max_coordinates) {
    std::mt19937_64 rng(config.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(max_coordinates);
  }

  for (const auto& [k, r, c] : coords) {
    auto& t = *fields[k];
    const double orig = t(r, c);
    const std::vector<double> point = {orig};
    const std::vector<double> analytic = {grads[k].value()(r, c)};
    auto f = [&](std::span<const double> x) {
      t(r, c) = x[0];
      return value();
    };
    const double err = ag::finite_difference_check(f, point, analytic, step);
    t(r, c) = orig;
    report.max_relative_error = std::max(report.max_relative_error, err);
    ++report.coordinates;
  }
  return report;
}

}  // namespace toxitrace
