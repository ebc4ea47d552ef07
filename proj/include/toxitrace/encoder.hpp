#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "toxitrace/autograd.hpp"

namespace toxitrace {

inline constexpr std::size_t kMaxSequence = 512;
inline constexpr std::size_t kNumClasses = 2;
inline constexpr int kToxic = 1;
inline constexpr int kNonToxic = 0;

// Character vocabulary. Ids 0..4 are reserved; corpus characters follow in
// ascending code point order.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kCls = 1;
  static constexpr std::size_t kSep = 2;
  static constexpr std::size_t kMask = 3;
  static constexpr std::size_t kUnk = 4;
  static constexpr std::size_t kReserved = 5;

  Vocabulary() = default;
  static Vocabulary build(std::span<const std::string> texts);
  static Vocabulary from_symbols(std::vector<char32_t> symbols);

  std::size_t size() const noexcept { return kReserved + symbols_.size(); }
  std::size_t id(char32_t ch) const;
  const std::vector<char32_t>& symbols() const noexcept { return symbols_; }

  bool operator==(const Vocabulary& o) const { return symbols_ == o.symbols_; }

 private:
  std::vector<char32_t> symbols_;
  std::unordered_map<char32_t, std::size_t> index_;
};

// cls + one token per character + sep. offsets[k] is the character index of
// the (k+1)-th token; special tokens have no offset.
struct TokenizedText {
  std::vector<std::size_t> ids;
  std::vector<std::size_t> offsets;
  std::size_t num_chars() const noexcept { return offsets.size(); }
};

// Throws TruncationError when the text needs more than kMaxSequence tokens.
TokenizedText tokenize(const Vocabulary& vocab, std::string_view utf8_text);

struct EncoderParams {
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  ag::Tensor token_embedding;     // V x d
  ag::Tensor position_embedding;  // kMaxSequence x d
  ag::Tensor query;               // d x d
  ag::Tensor key;
  ag::Tensor value;
  ag::Tensor output;
  ag::Tensor ff_in;       // d x 4d
  ag::Tensor ff_out;      // 4d x d
  ag::Tensor cls_weight;  // d x 2
  ag::Tensor cls_bias;    // 1 x 2

  static EncoderParams zeros(std::size_t vocab_size, std::size_t dim = 32);
  static EncoderParams random(std::size_t vocab_size, std::size_t dim, std::uint64_t seed);

  // Field order used by flatten(), assign() and checkpoints.
  static const std::vector<std::string>& field_names();
  std::vector<ag::Tensor*> fields();
  std::vector<const ag::Tensor*> fields() const;

  std::size_t parameter_count() const;
  std::vector<double> flatten() const;
  void assign(std::span<const double> flat);
  bool all_finite() const;

  bool operator==(const EncoderParams& o) const = default;
};

// Leaf (or constant) Vars for one graph over a parameter set.
struct ParamVars {
  std::vector<ag::Var> tensors;  // same order as EncoderParams::fields()
  std::size_t dim = 0;

  const ag::Var& token_embedding() const { return tensors[0]; }
  const ag::Var& position_embedding() const { return tensors[1]; }
  const ag::Var& query() const { return tensors[2]; }
  const ag::Var& key() const { return tensors[3]; }
  const ag::Var& value() const { return tensors[4]; }
  const ag::Var& output() const { return tensors[5]; }
  const ag::Var& ff_in() const { return tensors[6]; }
  const ag::Var& ff_out() const { return tensors[7]; }
  const ag::Var& cls_weight() const { return tensors[8]; }
  const ag::Var& cls_bias() const { return tensors[9]; }

  static constexpr std::size_t kHeadBegin = 8;  // tensors[8..] form the classifier head
};

ParamVars bind(const EncoderParams& params, bool trainable);

struct EncodedSample {
  std::vector<std::size_t> token_ids;
  ag::Var embeddings;  // L x d input embeddings, rows cls, chars..., sep
  ag::Var states;      // L x d contextual states
  ag::Var cls_state;   // 1 x d
  ag::Var log_probs;   // 1 x 2

  std::size_t num_tokens() const noexcept { return token_ids.size() - 2; }
  // Rows of `embeddings` holding non-special tokens.
  std::vector<std::size_t> content_rows() const;
  double probability(int label) const;
  ag::Var log_prob(int label) const;
};

// Embedding rows are differentiable in both modes: through the tables when
// `params` is trainable, or as a fresh leaf when it is constant.
EncodedSample encode(const ParamVars& params, std::span<const std::size_t> token_ids);
EncodedSample encode(const EncoderParams& params, std::span<const std::size_t> token_ids);
// Runs the encoder on a given embedding matrix (rows as produced by the embedding layer).
EncodedSample encode_embeddings(const ParamVars& params, std::vector<std::size_t> token_ids,
                                const ag::Var& embeddings);

struct Prediction {
  int label = kNonToxic;
  double toxic_probability = 0.0;
};

// Argmax over the two classes; ties go to non-toxic.
Prediction predict(const EncoderParams& params, const Vocabulary& vocab, std::string_view text);
Prediction predict_ids(const EncoderParams& params, std::span<const std::size_t> token_ids);

}  // namespace toxitrace
