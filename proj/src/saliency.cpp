#include "toxitrace/saliency.hpp"

#include <cmath>
#include <optional>

#include "toxitrace/error.hpp"

namespace toxitrace {

namespace {

void check_class(int target_class) {
  if (target_class != kToxic && target_class != kNonToxic) {
    throw ContractViolation("saliency class must be 0 or 1");
  }
}

void check_finite(const ag::Var& v, const char* what) {
  for (double x : v.value().data) {
    if (!std::isfinite(x)) throw NumericFault(what, "non-finite saliency score");
  }
}

SaliencySequence sequence_from(const ag::Var& column, SaliencyKind kind, int target_class,
                               const TokenizedText& tokens) {
  SaliencySequence out;
  out.kind = kind;
  out.target_class = target_class;
  out.scores = column.value().data;
  out.offsets = tokens.offsets;
  return out;
}

}  // namespace

ag::Var gradient_norms(const ag::Var& log_prob, const ag::Var& embeddings,
                       const std::vector<std::size_t>& rows, bool record_backward) {
  auto grads = ag::gradient(log_prob, {embeddings}, record_backward);
  std::optional<ag::NoGradGuard> guard;
  if (!record_backward) guard.emplace();
  auto norms = ag::row_norm(ag::gather(grads[0], rows));
  check_finite(norms, "gradient_norms");
  return norms;
}

ag::Var gradient_input_norms(const ag::Var& log_prob, const ag::Var& embeddings,
                             const std::vector<std::size_t>& rows) {
  auto grads = ag::gradient(log_prob, {embeddings}, false);
  ag::NoGradGuard guard;
  auto prod = ag::mul(ag::gather(ag::detach(embeddings), rows), ag::gather(grads[0], rows));
  auto norms = ag::row_norm(prod);
  check_finite(norms, "gradient_input_norms");
  return norms;
}

SaliencySequence gradnorm_sequence(const EncoderParams& params, const TokenizedText& tokens,
                                   int target_class) {
  check_class(target_class);
  auto enc = encode(params, tokens.ids);
  auto col = gradient_norms(enc.log_prob(target_class), enc.embeddings, enc.content_rows(), false);
  return sequence_from(col, SaliencyKind::kGradientNorm, target_class, tokens);
}

SaliencySequence saliency_sequence(const EncoderParams& params, const TokenizedText& tokens,
                                   int target_class) {
  check_class(target_class);
  auto enc = encode(params, tokens.ids);
  auto col = gradient_input_norms(enc.log_prob(target_class), enc.embeddings, enc.content_rows());
  return sequence_from(col, SaliencyKind::kGradientTimesInput, target_class, tokens);
}

ag::Var gradnorm_nodes(const EncodedSample& encoded, int target_class) {
  check_class(target_class);
  return gradient_norms(encoded.log_prob(target_class), encoded.embeddings,
                        encoded.content_rows(), true);
}

}  // namespace toxitrace
