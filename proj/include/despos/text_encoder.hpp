#pragma once

// Stepped text encoder: frozen backbone, a prior head distilled against a
// frozen teacher, and an alignment head producing the retrieval descriptor.

#include "despos/autodiff.hpp"
#include "despos/nn.hpp"
#include "despos/scenegen.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace despos {

class Vocabulary {
 public:
  static constexpr int kUnknown = 0;

  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> words);
  /// Grammar words, relations, palette colors and classes, and ".".
  static Vocabulary from_palette(const Palette& palette);

  int id(const std::string& word) const;
  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;  // words_[0] is the unknown token
  std::map<std::string, int> index_;
};

struct TokenSeq {
  std::vector<int> ids;
  /// Exclusive end offset of each sentence in `ids`.
  std::vector<Eigen::Index> sentence_ends;
};

/// Lower-cases, splits on whitespace and peels trailing punctuation into
/// separate tokens. Unknown words map to Vocabulary::kUnknown.
TokenSeq tokenize(const std::vector<std::string>& sentences, const Vocabulary& vocab);

struct TextEncoderConfig {
  int width = 128;
  int heads = 4;
  int ffn = 256;
  int backbone_layers = 2;
  int prior_layers = 2;
  int prior_dim = 64;
  int align_width = 64;
  int align_hidden = 128;
  int out_dim = 256;
  int max_tokens = 16;
  int max_sentences = 16;
  friend bool operator==(const TextEncoderConfig&, const TextEncoderConfig&) = default;
};

/// Sentence -> unit-norm vector. Stands in for a pretrained image-text model.
class TeacherEmbedder {
 public:
  virtual ~TeacherEmbedder() = default;
  virtual Eigen::RowVectorXd embed(const std::string& sentence) const = 0;
  virtual int dim() const = 0;
};

/// Frozen, randomly initialized one-layer transformer with a recorded seed.
class RandomTransformerTeacher : public TeacherEmbedder {
 public:
  RandomTransformerTeacher(const Vocabulary& vocab, int dim, std::uint64_t seed);
  Eigen::RowVectorXd embed(const std::string& sentence) const override;
  int dim() const override { return dim_; }
  std::uint64_t seed() const { return seed_; }

 private:
  Vocabulary vocab_;
  int dim_;
  std::uint64_t seed_;
  Parameter embedding_;
  Parameter positions_;
  TransformerLayer layer_;
  Linear head_;
};

/// Frozen per-sentence outputs reused by the trainable heads.
struct SentenceFeatures {
  Mat tokens;             // backbone features, one row per token
  Eigen::RowVectorXd prior;  // prior head output, unit norm
};

/// Backbone features of a whole query plus per-sentence priors.
struct QueryFeatures {
  Mat tokens;
  std::vector<Eigen::Index> sentence_ends;
  Mat priors;  // one row per sentence
};

class SteModel {
 public:
  SteModel() = default;
  SteModel(const TextEncoderConfig& config, const Vocabulary& vocab, std::uint64_t seed);

  const TextEncoderConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }

  /// Per-token backbone features; sentences are encoded independently.
  Mat backbone_encode(const TokenSeq& tokens) const;
  /// Transformer stack -> MLP -> max over tokens -> L2 normalize.
  Var prior_head(Graph& g, Var features) const;
  /// Token transformer (per sentence) -> MLP over [token, sentence prior] ->
  /// max per sentence -> sentence transformer -> mean -> projection -> L2.
  Var alignment_head(Graph& g, Var features, const std::vector<Eigen::Index>& sentence_ends,
                     Var priors) const;

  SentenceFeatures sentence_features(const std::string& sentence) const;

  void collect_backbone(ParamList& out);
  void collect_prior(ParamList& out);
  void collect_alignment(ParamList& out);
  void collect(ParamList& out);

  Parameter embedding;
  Parameter positions;
  std::vector<TransformerLayer> backbone_layers;
  LayerNorm backbone_norm;

  std::vector<TransformerLayer> prior_layers;
  Mlp prior_mlp;

  Linear align_in;
  TransformerLayer align_tokens;
  Mlp align_mlp;
  Parameter sentence_positions;
  TransformerLayer align_sentences;
  Linear align_out;

 private:
  TextEncoderConfig config_;
  Vocabulary vocab_;
};

/// Memoized frozen sentence features, keyed by sentence text.
class SentenceCache {
 public:
  explicit SentenceCache(const SteModel& model) : model_(&model) {}
  const SentenceFeatures& get(const std::string& sentence);
  QueryFeatures query(const std::vector<std::string>& hints);

 private:
  const SteModel* model_;
  std::map<std::string, SentenceFeatures> cache_;
};

/// Every distinct grammar sentence the palette can realize, in a fixed order.
std::vector<std::string> enumerate_sentences(const Palette& palette);

/// 1 - cos(student, teacher). Throws std::domain_error on a zero vector.
double distill_loss(const Eigen::RowVectorXd& student, const Eigen::RowVectorXd& teacher);
Var distill_loss(Var student, Var teacher);

}  // namespace despos
