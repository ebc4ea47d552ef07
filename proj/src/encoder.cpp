#include "toxitrace/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "toxitrace/error.hpp"
#include "toxitrace/utf8.hpp"

namespace toxitrace {

Vocabulary Vocabulary::build(std::span<const std::string> texts) {
  std::set<char32_t> seen;
  for (const auto& t : texts) {
    for (char32_t ch : utf8::decode(t)) seen.insert(ch);
  }
  return from_symbols(std::vector<char32_t>(seen.begin(), seen.end()));
}

Vocabulary Vocabulary::from_symbols(std::vector<char32_t> symbols) {
  Vocabulary v;
  v.symbols_ = std::move(symbols);
  for (std::size_t i = 0; i < v.symbols_.size(); ++i) {
    auto [it, inserted] = v.index_.emplace(v.symbols_[i], kReserved + i);
    if (!inserted) throw DataError("duplicate vocabulary symbol");
  }
  return v;
}

std::size_t Vocabulary::id(char32_t ch) const {
  auto it = index_.find(ch);
  return it == index_.end() ? kUnk : it->second;
}

TokenizedText tokenize(const Vocabulary& vocab, std::string_view utf8_text) {
  const auto chars = utf8::decode(utf8_text);
  if (chars.size() + 2 > kMaxSequence) {
    throw TruncationError("text of " + std::to_string(chars.size()) +
                          " characters exceeds the sequence cap of " +
                          std::to_string(kMaxSequence) + " tokens");
  }
  TokenizedText out;
  out.ids.reserve(chars.size() + 2);
  out.ids.push_back(Vocabulary::kCls);
  for (std::size_t i = 0; i < chars.size(); ++i) {
    out.ids.push_back(vocab.id(chars[i]));
    out.offsets.push_back(i);
  }
  out.ids.push_back(Vocabulary::kSep);
  return out;
}

namespace {

using ag::Tensor;

Tensor normal_tensor(std::size_t r, std::size_t c, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(r, c);
  for (auto& x : t.data) x = dist(rng);
  return t;
}

}  // namespace

EncoderParams EncoderParams::zeros(std::size_t vocab_size, std::size_t dim) {
  EncoderParams p;
  p.vocab_size = vocab_size;
  p.dim = dim;
  p.token_embedding = Tensor(vocab_size, dim);
  p.position_embedding = Tensor(kMaxSequence, dim);
  p.query = Tensor(dim, dim);
  p.key = Tensor(dim, dim);
  p.value = Tensor(dim, dim);
  p.output = Tensor(dim, dim);
  p.ff_in = Tensor(dim, 4 * dim);
  p.ff_out = Tensor(4 * dim, dim);
  p.cls_weight = Tensor(dim, kNumClasses);
  p.cls_bias = Tensor(1, kNumClasses);
  return p;
}

EncoderParams EncoderParams::random(std::size_t vocab_size, std::size_t dim, std::uint64_t seed) {
  if (vocab_size < Vocabulary::kReserved || dim == 0) {
    throw ContractViolation("encoder needs a vocabulary and a positive width");
  }
  std::mt19937_64 rng(seed);
  const double proj = 1.0 / std::sqrt(static_cast<double>(dim));
  EncoderParams p;
  p.vocab_size = vocab_size;
  p.dim = dim;
  p.token_embedding = normal_tensor(vocab_size, dim, 0.5, rng);
  p.position_embedding = normal_tensor(kMaxSequence, dim, 0.1, rng);
  p.query = normal_tensor(dim, dim, proj, rng);
  p.key = normal_tensor(dim, dim, proj, rng);
  p.value = normal_tensor(dim, dim, proj, rng);
  p.output = normal_tensor(dim, dim, proj, rng);
  p.ff_in = normal_tensor(dim, 4 * dim, proj, rng);
  p.ff_out = normal_tensor(4 * dim, dim, 0.5 / std::sqrt(4.0 * static_cast<double>(dim)), rng);
  p.cls_weight = normal_tensor(dim, kNumClasses, proj, rng);
  p.cls_bias = Tensor(1, kNumClasses);
  return p;
}

const std::vector<std::string>& EncoderParams::field_names() {
  static const std::vector<std::string> names = {
      "token_embedding", "position_embedding", "query",  "key",        "value",
      "output",          "ff_in",              "ff_out", "cls_weight", "cls_bias"};
  return names;
}

std::vector<ag::Tensor*> EncoderParams::fields() {
  return {&token_embedding, &position_embedding, &query,  &key,        &value,
          &output,          &ff_in,              &ff_out, &cls_weight, &cls_bias};
}

std::vector<const ag::Tensor*> EncoderParams::fields() const {
  return {&token_embedding, &position_embedding, &query,  &key,        &value,
          &output,          &ff_in,              &ff_out, &cls_weight, &cls_bias};
}

std::size_t EncoderParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto* t : fields()) n += t->size();
  return n;
}

std::vector<double> EncoderParams::flatten() const {
  std::vector<double> flat;
  flat.reserve(parameter_count());
  for (const auto* t : fields()) flat.insert(flat.end(), t->data.begin(), t->data.end());
  return flat;
}

void EncoderParams::assign(std::span<const double> flat) {
  if (flat.size() != parameter_count()) {
    throw ContractViolation("flat parameter vector has the wrong length");
  }
  std::size_t offset = 0;
  for (auto* t : fields()) {
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), t->size(), t->data.begin());
    offset += t->size();
  }
}

bool EncoderParams::all_finite() const {
  for (const auto* t : fields()) {
    if (!std::all_of(t->data.begin(), t->data.end(), [](double x) { return std::isfinite(x); })) {
      return false;
    }
  }
  return true;
}

ParamVars bind(const EncoderParams& params, bool trainable) {
  ParamVars out;
  out.dim = params.dim;
  for (const auto* t : params.fields()) {
    out.tensors.push_back(trainable ? ag::leaf(*t) : ag::constant(*t));
  }
  return out;
}

std::vector<std::size_t> EncodedSample::content_rows() const {
  std::vector<std::size_t> rows(num_tokens());
  std::iota(rows.begin(), rows.end(), std::size_t{1});
  return rows;
}

double EncodedSample::probability(int label) const {
  return std::exp(log_probs.value().data.at(static_cast<std::size_t>(label)));
}

ag::Var EncodedSample::log_prob(int label) const {
  return ag::element(log_probs, 0, static_cast<std::size_t>(label));
}

EncodedSample encode_embeddings(const ParamVars& p, std::vector<std::size_t> token_ids,
                                const ag::Var& x) {
  using namespace ag;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(p.dim));

  auto q = matmul(x, p.query());
  auto k = matmul(x, p.key());
  auto v = matmul(x, p.value());
  auto attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt_d));
  auto h1 = add(x, matmul(matmul(attn, v), p.output()));
  auto h = add(h1, matmul(tanh(matmul(h1, p.ff_in())), p.ff_out()));

  EncodedSample out;
  out.token_ids = std::move(token_ids);
  out.embeddings = x;
  out.states = h;
  out.cls_state = gather(h, {0});
  auto logits = add(matmul(out.cls_state, p.cls_weight()), p.cls_bias());
  out.log_probs = log_softmax(logits);
  return out;
}

EncodedSample encode(const ParamVars& p, std::span<const std::size_t> token_ids) {
  using namespace ag;
  const std::size_t len = token_ids.size();
  if (len < 2 || len > kMaxSequence) {
    throw ContractViolation("token sequence length must lie in [2, " +
                            std::to_string(kMaxSequence) + "]");
  }
  const std::size_t vocab = p.token_embedding().rows();
  std::vector<std::size_t> ids(token_ids.begin(), token_ids.end());
  for (auto id : ids) {
    if (id >= vocab) throw ContractViolation("token id out of vocabulary range");
  }
  std::vector<std::size_t> positions(len);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  auto x = add(gather(p.token_embedding(), ids), gather(p.position_embedding(), positions));
  if (!x.requires_grad()) x = leaf(x.value());
  return encode_embeddings(p, std::move(ids), x);
}

EncodedSample encode(const EncoderParams& params, std::span<const std::size_t> token_ids) {
  return encode(bind(params, false), token_ids);
}

Prediction predict_ids(const EncoderParams& params, std::span<const std::size_t> token_ids) {
  ag::NoGradGuard no_grad;
  auto enc = encode(params, token_ids);
  const auto& lp = enc.log_probs.value().data;
  Prediction out;
  out.toxic_probability = std::exp(lp[kToxic]);
  out.label = lp[kToxic] > lp[kNonToxic] ? kToxic : kNonToxic;
  return out;
}

Prediction predict(const EncoderParams& params, const Vocabulary& vocab, std::string_view text) {
  if (text.empty()) throw ContractViolation("predict on empty text");
  return predict_ids(params, tokenize(vocab, text).ids);
}

}  // namespace toxitrace
