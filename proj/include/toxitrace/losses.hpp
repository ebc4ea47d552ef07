#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "toxitrace/autograd.hpp"
#include "toxitrace/char_span.hpp"

namespace toxitrace {

// Toxic (P) and non-toxic (N) token positions, 0-based over non-special tokens.
struct TokenPartition {
  std::vector<std::size_t> toxic;
  std::vector<std::size_t> non_toxic;

  bool eligible() const noexcept { return !toxic.empty() && !non_toxic.empty(); }
};

// Tokens whose character index falls in any [begin, end) span are toxic.
TokenPartition partition_tokens(std::span<const std::size_t> token_offsets,
                                std::span<const CharSpan> char_spans);

struct GcConfig {
  double margin = 1.0;
  double percentile = 0.15;
  double alpha = 1.1;
  double tau_cap = 10.0;

  void validate() const;
};

struct ArclConfig {
  double temperature = 0.05;
  double lambda_grad = 0.8;
  double lambda_sem = 0.5;
  bool normalize = false;  // unit-normalise embeddings before the dot products

  void validate() const;
};

// Linear interpolation between order statistics at rank level * (n - 1).
double percentile(std::vector<double> values, double level);

ag::Var ce_loss(const ag::Var& log_probs, int label);

// Mean over P x N of max(0, g_j - g_i + margin). Zero when P or N is empty.
ag::Var pgr_loss(const ag::Var& gradnorms, const TokenPartition& part, double margin);

// The two data-dependent thresholds of the push-pull term. Both are held
// constant while differentiating.
struct PptThresholds {
  double floor = 0.0;   // percentile of all gradient norms; non-toxic norms are pulled below it
  double target = 0.0;  // min(alpha * max norm, cap); toxic norms are pushed above it
};

PptThresholds ppt_thresholds(std::span<const double> gradnorms, const GcConfig& config);

// (L_pos + L_neg) / 2. Thresholds are computed from `gradnorms` unless given.
ag::Var ppt_loss(const ag::Var& gradnorms, const TokenPartition& part, const GcConfig& config,
                 std::optional<PptThresholds> thresholds = std::nullopt);

// -log softmax over [anchor.positive, anchor.negative_k...] / temperature, first entry.
ag::Var infonce_term(const ag::Var& anchor, const ag::Var& positive,
                     std::span<const ag::Var> negatives, double temperature);

// Mean over the batch of (L_tox + L_nor) / 2. Each of `texts`, `toxic_reasons`,
// `normal_reasons` holds one 1 x d representation per sample.
ag::Var arcl_loss(std::span<const ag::Var> texts, std::span<const ag::Var> toxic_reasons,
                  std::span<const ag::Var> normal_reasons, double temperature,
                  bool normalize = false);

ag::Var joint_loss(const ag::Var& ce, const ag::Var& pgr, const ag::Var& ppt, const ag::Var& arcl,
                   double lambda_grad, double lambda_sem);

}  // namespace toxitrace
