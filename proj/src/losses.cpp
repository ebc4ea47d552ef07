#include "toxitrace/losses.hpp"

#include <algorithm>
#include <cmath>

#include "toxitrace/error.hpp"

namespace toxitrace {

using ag::Tensor;
using ag::Var;

TokenPartition partition_tokens(std::span<const std::size_t> token_offsets,
                                std::span<const CharSpan> char_spans) {
  TokenPartition part;
  for (std::size_t k = 0; k < token_offsets.size(); ++k) {
    const auto off = token_offsets[k];
    const bool inside = std::any_of(char_spans.begin(), char_spans.end(),
                                    [off](const CharSpan& s) { return off >= s.begin && off < s.end; });
    (inside ? part.toxic : part.non_toxic).push_back(k);
  }
  return part;
}

void GcConfig::validate() const {
  if (!(margin > 0.0)) throw ContractViolation("PGR margin must be positive");
  if (!(percentile > 0.0 && percentile < 1.0)) throw ContractViolation("percentile level must lie in (0,1)");
  if (!(alpha > 1.0)) throw ContractViolation("PPT target coefficient must exceed 1");
  if (!(tau_cap > 0.0)) throw ContractViolation("PPT gradient cap must be positive");
}

void ArclConfig::validate() const {
  if (!(temperature > 0.0)) throw ContractViolation("InfoNCE temperature must be positive");
  if (lambda_grad < 0.0 || lambda_sem < 0.0) throw ContractViolation("loss weights must be non-negative");
}

double percentile(std::vector<double> values, double level) {
  if (values.empty()) throw ContractViolation("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double rank = level * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = rank - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

Var ce_loss(const Var& log_probs, int label) {
  if (label != 0 && label != 1) throw ContractViolation("label must be 0 or 1");
  return ag::neg(ag::element(log_probs, 0, static_cast<std::size_t>(label)));
}

Var pgr_loss(const Var& g, const TokenPartition& part, double margin) {
  if (!part.eligible()) return ag::constant(Tensor::scalar(0.0));
  const auto np = part.toxic.size();
  const auto nn = part.non_toxic.size();
  auto pos = ag::broadcast_cols(ag::gather(g, part.toxic), nn);                      // g_i
  auto negs = ag::broadcast_rows(ag::transpose(ag::gather(g, part.non_toxic)), np);  // g_j
  return ag::mean(ag::hinge(ag::add_scalar(ag::sub(negs, pos), margin)));
}

PptThresholds ppt_thresholds(std::span<const double> g, const GcConfig& config) {
  if (g.empty()) throw ContractViolation("PPT thresholds of an empty sequence");
  PptThresholds th;
  th.floor = percentile(std::vector<double>(g.begin(), g.end()), config.percentile);
  const double gmax = *std::max_element(g.begin(), g.end());
  th.target = std::min(config.alpha * gmax, config.tau_cap);
  return th;
}

Var ppt_loss(const Var& g, const TokenPartition& part, const GcConfig& config,
             std::optional<PptThresholds> thresholds) {
  if (!part.eligible()) return ag::constant(Tensor::scalar(0.0));
  const auto th = thresholds.value_or(ppt_thresholds(g.value().data, config));
  auto l_neg = ag::mean(ag::hinge(ag::add_scalar(ag::gather(g, part.non_toxic), -th.floor)));
  auto l_pos = ag::mean(ag::hinge(ag::add_scalar(ag::neg(ag::gather(g, part.toxic)), th.target)));
  return ag::scale(ag::add(l_pos, l_neg), 0.5);
}

Var infonce_term(const Var& anchor, const Var& positive, std::span<const Var> negatives,
                 double temperature) {
  std::vector<Var> logits;
  logits.reserve(negatives.size() + 1);
  logits.push_back(ag::dot(anchor, positive));
  for (const auto& n : negatives) logits.push_back(ag::dot(anchor, n));
  auto row = ag::scale(ag::transpose(ag::concat_rows(logits)), 1.0 / temperature);
  return ag::neg(ag::element(ag::log_softmax(row), 0, 0));
}

namespace {

Var unit(const Var& v) {
  return ag::mul(v, ag::broadcast_cols(ag::reciprocal(ag::row_norm(v)), v.cols()));
}

}  // namespace

Var arcl_loss(std::span<const Var> texts, std::span<const Var> toxic_reasons,
              std::span<const Var> normal_reasons, double temperature, bool normalize) {
  const std::size_t batch = texts.size();
  if (batch == 0 || toxic_reasons.size() != batch || normal_reasons.size() != batch) {
    throw ContractViolation("ARCL needs one toxic and one normal reasoning per sample");
  }
  if (!(temperature > 0.0)) throw ContractViolation("InfoNCE temperature must be positive");

  std::vector<Var> t(texts.begin(), texts.end());
  std::vector<Var> p(toxic_reasons.begin(), toxic_reasons.end());
  std::vector<Var> n(normal_reasons.begin(), normal_reasons.end());
  if (normalize) {
    for (auto* group : {&t, &p, &n})
      for (auto& v : *group) v = unit(v);
  }

  Var total;
  std::vector<Var> others;
  for (std::size_t i = 0; i < batch; ++i) {
    others.clear();
    for (std::size_t k = 0; k < batch; ++k)
      if (k != i) others.push_back(n[k]);
    auto l_tox = infonce_term(t[i], p[i], others, temperature);
    others.clear();
    for (std::size_t k = 0; k < batch; ++k)
      if (k != i) others.push_back(p[k]);
    auto l_nor = infonce_term(t[i], n[i], others, temperature);
    auto term = ag::scale(ag::add(l_tox, l_nor), 0.5);
    total = total.defined() ? ag::add(total, term) : term;
  }
  return ag::scale(total, 1.0 / static_cast<double>(batch));
}

Var joint_loss(const Var& ce, const Var& pgr, const Var& ppt, const Var& arcl, double lambda_grad,
               double lambda_sem) {
  return ag::add(ag::add(ce, ag::scale(ag::add(pgr, ppt), lambda_grad)), ag::scale(arcl, lambda_sem));
}

}  // namespace toxitrace
