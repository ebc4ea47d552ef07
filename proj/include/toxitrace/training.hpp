#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "toxitrace/corpus.hpp"
#include "toxitrace/encoder.hpp"
#include "toxitrace/losses.hpp"

namespace toxitrace {

struct TrainConfig {
  std::size_t warmup_epochs = 3;
  std::size_t joint_epochs = 3;
  std::size_t batch_size = 8;
  std::size_t dim = 32;
  double encoder_lr_warmup = 3e-3;
  double head_lr_warmup = 1e-2;
  double encoder_lr_joint = 3e-5;
  double head_lr_joint = 3e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  std::uint64_t seed = 7;
  // Coordinates compared by the gradient self-test that precedes joint training; 0 skips it.
  std::size_t self_test_coordinates = 32;
  GcConfig gc;
  ArclConfig arcl;

  void validate() const;
};

// Both directions use the TrainConfig field names; nested "gc" and "arcl"
// objects. Unknown keys are rejected, missing keys keep their defaults.
std::string config_to_json(const TrainConfig& config);
TrainConfig config_from_json(const std::string& text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});

// lr0 * 0.5 * (1 + cos(pi * t / total)).
double cosine_lr(double lr0, std::size_t t, std::size_t total);

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
};

// Adaptive moments with decoupled weight decay, one moment pair per tensor.
class AdamW {
 public:
  AdamW(const std::vector<ag::Tensor*>& params, AdamWHyper hyper);
  // lrs[k] is the learning rate for params[k].
  void step(const std::vector<ag::Tensor*>& params, const std::vector<ag::Tensor>& grads,
            std::span<const double> lrs);
  std::size_t steps() const noexcept { return t_; }

 private:
  AdamWHyper hyper_;
  std::vector<ag::Tensor> m_;
  std::vector<ag::Tensor> v_;
  std::size_t t_ = 0;
};

enum class Stage { kWarmup, kJoint };
std::string stage_name(Stage stage);

inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
  EncoderParams params;
  Vocabulary vocab;
  TrainConfig config;
  Stage stage = Stage::kWarmup;
  std::size_t step = 0;
};

std::string checkpoint_to_json(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_json(const std::string& text);
void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct StepLog {
  Stage stage = Stage::kWarmup;
  std::size_t step = 0;
  std::size_t epoch = 0;
  double lr_encoder = 0.0;
  double lr_head = 0.0;
  double ce = 0.0;
  double pgr = 0.0;
  double ppt = 0.0;
  double arcl = 0.0;
  double total = 0.0;
  // Mean g over weak-toxic and over non-toxic tokens of the batch's eligible samples.
  std::optional<double> g_toxic;
  std::optional<double> g_non_toxic;
};

std::string step_log_to_json(const StepLog& log);
using StepSink = std::function<void(const StepLog&)>;

// A training sample after tokenization.
struct TrainSample {
  std::string id;
  int label = 0;
  TokenizedText tokens;
  TokenPartition partition;                     // from weak spans; empty when absent
  std::optional<std::vector<std::size_t>> toxic_reason;   // token ids incl. cls/sep
  std::optional<std::vector<std::size_t>> normal_reason;
};

// Reasoning texts longer than the sequence cap are cut to fit.
TrainSample prepare_sample(const CorpusRecord& record, const Vocabulary& vocab);

struct JointTerms {
  ag::Var ce;
  ag::Var pgr;
  ag::Var ppt;
  ag::Var arcl;
  ag::Var total;
  std::size_t eligible = 0;
  std::optional<double> g_toxic;
  std::optional<double> g_non_toxic;
};

// Per-sample push-pull thresholds; when given, they replace the ones computed
// from the current gradient norms (used to freeze a batch for gradient checks).
using FrozenThresholds = std::vector<std::optional<PptThresholds>>;

// Batch objective: mean CE, mean over eligible samples of PGR + PPT, and the
// contrastive term over samples that carry both reasonings.
JointTerms joint_objective(const ParamVars& params, std::span<const TrainSample> batch,
                           const TrainConfig& config, const FrozenThresholds* frozen = nullptr);

// Thresholds each eligible sample would use at the current parameters.
FrozenThresholds current_thresholds(const EncoderParams& params, std::span<const TrainSample> batch,
                                    const GcConfig& gc);

Checkpoint warmup(const TrainConfig& config, const std::vector<CorpusRecord>& records,
                  const StepSink& sink = {});

// Continues CE-only training from `start` with the given learning rates.
Checkpoint continue_ce(const Checkpoint& start, const TrainConfig& config,
                       const std::vector<CorpusRecord>& records, std::size_t epochs,
                       double encoder_lr, double head_lr, Stage stage, const StepSink& sink = {});

// Throws DataError naming the sample when a toxic record lacks weak spans or reasonings.
Checkpoint joint_train(const TrainConfig& config, const std::vector<CorpusRecord>& records,
                       const Checkpoint& start, const StepSink& sink = {});

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;         // coordinates compared against finite differences
  std::size_t untouched = 0;           // embedding rows the batch never reads; analytic grad must be 0
  double min_hinge_margin = 0.0;       // smallest |hinge argument| at the base point
};

// Full parameter gradient of the joint objective versus central differences,
// thresholds frozen at the base point. A nonzero max_coordinates compares a
// seeded sample of that many coordinates instead of all of them.
GradCheckReport joint_gradient_check(const EncoderParams& params, std::span<const TrainSample> batch,
                                     const TrainConfig& config, double step = 1e-5,
                                     std::size_t max_coordinates = 0);

}  // namespace toxitrace
