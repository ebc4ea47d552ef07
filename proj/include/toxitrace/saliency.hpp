#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "toxitrace/autograd.hpp"
#include "toxitrace/encoder.hpp"

namespace toxitrace {

enum class SaliencyKind {
  kGradientTimesInput,  // s_i = |e_i * d log P / d e_i|
  kGradientNorm,        // g_i = |d log P / d e_i|
};

struct SaliencySequence {
  SaliencyKind kind = SaliencyKind::kGradientTimesInput;
  int target_class = kToxic;
  std::vector<double> scores;        // one per non-special token
  std::vector<std::size_t> offsets;  // character index of each scored token
};

// Per-row scores of d log_prob / d embeddings restricted to `rows`.
// With record_backward the returned column (rows.size() x 1) is differentiable
// with respect to everything log_prob depends on.
ag::Var gradient_norms(const ag::Var& log_prob, const ag::Var& embeddings,
                       const std::vector<std::size_t>& rows, bool record_backward);
ag::Var gradient_input_norms(const ag::Var& log_prob, const ag::Var& embeddings,
                             const std::vector<std::size_t>& rows);

SaliencySequence gradnorm_sequence(const EncoderParams& params, const TokenizedText& tokens,
                                   int target_class = kToxic);
SaliencySequence saliency_sequence(const EncoderParams& params, const TokenizedText& tokens,
                                   int target_class = kToxic);

// Differentiable g_i for one encoded sample (used by the gradient-constrained losses).
ag::Var gradnorm_nodes(const EncodedSample& encoded, int target_class);

}  // namespace toxitrace
