#include "despos/text_encoder.hpp"

#include <algorithm>
#include <cctype>
#include <random>
#include <sstream>
#include <stdexcept>

namespace despos {

Vocabulary::Vocabulary(std::vector<std::string> words) : words_(std::move(words)) {
  if (words_.empty() || words_.front() != "<unk>") words_.insert(words_.begin(), "<unk>");
  for (std::size_t i = 0; i < words_.size(); ++i) index_.emplace(words_[i], static_cast<int>(i));
}

Vocabulary Vocabulary::from_palette(const Palette& palette) {
  std::vector<std::string> words{"<unk>", "the", "pose", "is", "of", "a", "."};
  for (Relation r : {Relation::North, Relation::South, Relation::East, Relation::West, Relation::OnTop}) {
    words.emplace_back(to_string(r));
  }
  auto add = [&](const std::string& w) {
    if (std::find(words.begin(), words.end(), w) == words.end()) words.push_back(w);
  };
  for (const ColorSpec& c : palette.colors) add(c.name);
  for (const ClassSpec& c : palette.classes) add(c.name);
  return Vocabulary(std::move(words));
}

int Vocabulary::id(const std::string& word) const {
  auto it = index_.find(word);
  return it == index_.end() ? kUnknown : it->second;
}

TokenSeq tokenize(const std::vector<std::string>& sentences, const Vocabulary& vocab) {
  TokenSeq out;
  for (const std::string& sentence : sentences) {
    std::istringstream in(sentence);
    for (std::string word; in >> word;) {
      for (char& ch : word) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      std::vector<std::string> trailing;
      while (!word.empty() && std::ispunct(static_cast<unsigned char>(word.back())) && word.back() != '-') {
        trailing.insert(trailing.begin(), std::string(1, word.back()));
        word.pop_back();
      }
      if (!word.empty()) out.ids.push_back(vocab.id(word));
      for (const std::string& p : trailing) out.ids.push_back(vocab.id(p));
    }
    auto end = static_cast<Eigen::Index>(out.ids.size());
    // An empty sentence contributes no block.
    if (out.sentence_ends.empty() ? end > 0 : end > out.sentence_ends.back()) out.sentence_ends.push_back(end);
  }
  return out;
}

namespace {

Parameter make_param(const std::string& name, Mat value) {
  Parameter p;
  p.name = name;
  p.value = std::move(value);
  return p;
}

// Embedding rows of `ids` plus learned positions, restarting at each block.
Var embed_tokens(Graph& g, const Parameter& embedding, const Parameter& positions, const std::vector<int>& ids,
                 const std::vector<Eigen::Index>& ends) {
  std::vector<Eigen::Index> rows(ids.begin(), ids.end());
  std::vector<Eigen::Index> pos;
  pos.reserve(ids.size());
  const Eigen::Index max_pos = positions.value.rows() - 1;
  Eigen::Index start = 0;
  for (Eigen::Index end : ends) {
    for (Eigen::Index t = start; t < end; ++t) pos.push_back(std::min(t - start, max_pos));
    start = end;
  }
  return add(gather_rows(g.param(embedding), rows), gather_rows(g.param(positions), pos));
}

}  // namespace

RandomTransformerTeacher::RandomTransformerTeacher(const Vocabulary& vocab, int dim, std::uint64_t seed)
    : vocab_(vocab), dim_(dim), seed_(seed) {
  std::mt19937_64 rng(seed);
  const int width = 64;
  embedding_ = make_param("teacher.embedding", glorot_uniform(vocab.size(), width, rng) * 4.0);
  positions_ = make_param("teacher.positions", glorot_uniform(16, width, rng));
  layer_ = TransformerLayer("teacher.layer", width, 4, 128, rng);
  head_ = Linear("teacher.head", width, dim, rng);
}

Eigen::RowVectorXd RandomTransformerTeacher::embed(const std::string& sentence) const {
  TokenSeq tokens = tokenize({sentence}, vocab_);
  if (tokens.ids.empty()) throw std::invalid_argument("teacher: empty sentence");
  Graph g;
  Var x = embed_tokens(g, embedding_, positions_, tokens.ids, tokens.sentence_ends);
  Var y = head_(g, mean_rows(layer_(g, x)));
  return l2_normalize(tanh(y)).value().row(0);
}

SteModel::SteModel(const TextEncoderConfig& c, const Vocabulary& vocab, std::uint64_t seed)
    : config_(c), vocab_(vocab) {
  std::mt19937_64 rng(seed);
  embedding = make_param("text.backbone.embedding", glorot_uniform(vocab.size(), c.width, rng) * 4.0);
  positions = make_param("text.backbone.positions", glorot_uniform(c.max_tokens, c.width, rng));
  round_to_float(embedding.value);
  for (int l = 0; l < c.backbone_layers; ++l) {
    backbone_layers.emplace_back("text.backbone.layer" + std::to_string(l), c.width, c.heads, c.ffn, rng);
  }
  backbone_norm = LayerNorm("text.backbone.norm", c.width);

  for (int l = 0; l < c.prior_layers; ++l) {
    prior_layers.emplace_back("text.prior.layer" + std::to_string(l), c.width, c.heads, c.ffn, rng);
  }
  prior_mlp = Mlp("text.prior.mlp", c.width, c.width, c.prior_dim, rng, false);

  align_in = Linear("text.align.in", c.width, c.align_width, rng);
  align_tokens = TransformerLayer("text.align.tokens", c.align_width, c.heads, 2 * c.align_width, rng);
  align_mlp = Mlp("text.align.mlp", c.align_width + c.prior_dim, c.align_hidden, c.align_hidden, rng, false);
  sentence_positions = make_param("text.align.sentence_positions", glorot_uniform(c.max_sentences, c.align_hidden, rng));
  align_sentences = TransformerLayer("text.align.sentences", c.align_hidden, c.heads, 2 * c.align_hidden, rng);
  align_out = Linear("text.align.out", c.align_hidden, c.out_dim, rng);

  ParamList frozen;
  collect_backbone(frozen);
  set_frozen(frozen, true);
}

Mat SteModel::backbone_encode(const TokenSeq& tokens) const {
  if (tokens.ids.empty()) throw std::invalid_argument("backbone_encode: no tokens");
  Graph g;
  Var x = embed_tokens(g, embedding, positions, tokens.ids, tokens.sentence_ends);
  for (const TransformerLayer& layer : backbone_layers) x = layer.blockwise(g, x, tokens.sentence_ends);
  return backbone_norm(g, x).value();
}

Var SteModel::prior_head(Graph& g, Var features) const {
  if (features.rows() < 1) throw std::invalid_argument("prior_head: no tokens");
  Var x = features;
  for (const TransformerLayer& layer : prior_layers) x = layer(g, x);
  return l2_normalize(max_rows(prior_mlp(g, x)));
}

Var SteModel::alignment_head(Graph& g, Var features, const std::vector<Eigen::Index>& ends, Var priors) const {
  if (features.rows() < 1 || ends.empty()) throw std::invalid_argument("alignment_head: no tokens");
  if (priors.rows() != static_cast<Eigen::Index>(ends.size())) {
    throw std::invalid_argument("alignment_head: one prior row per sentence expected");
  }
  Var x = align_tokens.blockwise(g, align_in(g, features), ends);
  // Each token sees the prior of its own sentence.
  std::vector<Eigen::Index> sentence_of;
  sentence_of.reserve(static_cast<std::size_t>(features.rows()));
  Eigen::Index start = 0;
  for (std::size_t s = 0; s < ends.size(); ++s) {
    for (Eigen::Index t = start; t < ends[s]; ++t) sentence_of.push_back(static_cast<Eigen::Index>(s));
    start = ends[s];
  }
  Var mixed = align_mlp(g, concat_cols({x, gather_rows(priors, sentence_of)}));
  std::vector<Var> pooled;
  start = 0;
  for (Eigen::Index end : ends) {
    pooled.push_back(max_rows(slice_rows(mixed, start, end - start)));
    start = end;
  }
  const auto n = static_cast<Eigen::Index>(ends.size());
  std::vector<Eigen::Index> slots;
  for (Eigen::Index s = 0; s < n; ++s) slots.push_back(std::min<Eigen::Index>(s, config_.max_sentences - 1));
  Var sentences = add(concat_rows(pooled), gather_rows(g.param(sentence_positions), slots));
  Var y = align_sentences(g, sentences);
  return l2_normalize(align_out(g, mean_rows(y)));
}

SentenceFeatures SteModel::sentence_features(const std::string& sentence) const {
  SentenceFeatures f;
  f.tokens = backbone_encode(tokenize({sentence}, vocab_));
  Graph g;
  f.prior = prior_head(g, g.constant(f.tokens)).value().row(0);
  return f;
}

void SteModel::collect_backbone(ParamList& out) {
  out.push_back(&embedding);
  out.push_back(&positions);
  for (TransformerLayer& l : backbone_layers) l.collect(out);
  backbone_norm.collect(out);
}

void SteModel::collect_prior(ParamList& out) {
  for (TransformerLayer& l : prior_layers) l.collect(out);
  prior_mlp.collect(out);
}

void SteModel::collect_alignment(ParamList& out) {
  align_in.collect(out);
  align_tokens.collect(out);
  align_mlp.collect(out);
  out.push_back(&sentence_positions);
  align_sentences.collect(out);
  align_out.collect(out);
}

void SteModel::collect(ParamList& out) {
  collect_backbone(out);
  collect_prior(out);
  collect_alignment(out);
}

const SentenceFeatures& SentenceCache::get(const std::string& sentence) {
  auto it = cache_.find(sentence);
  if (it != cache_.end()) return it->second;
  return cache_.emplace(sentence, model_->sentence_features(sentence)).first->second;
}

QueryFeatures SentenceCache::query(const std::vector<std::string>& hints) {
  QueryFeatures q;
  Eigen::Index rows = 0;
  std::vector<const SentenceFeatures*> parts;
  for (const std::string& h : hints) {
    const SentenceFeatures& f = get(h);
    if (f.tokens.rows() == 0) continue;
    parts.push_back(&f);
    rows += f.tokens.rows();
  }
  if (parts.empty()) throw std::invalid_argument("query has no tokens");
  const Eigen::Index width = parts.front()->tokens.cols();
  q.tokens.resize(rows, width);
  q.priors.resize(static_cast<Eigen::Index>(parts.size()), parts.front()->prior.size());
  Eigen::Index r = 0;
  for (std::size_t s = 0; s < parts.size(); ++s) {
    q.tokens.middleRows(r, parts[s]->tokens.rows()) = parts[s]->tokens;
    r += parts[s]->tokens.rows();
    q.sentence_ends.push_back(r);
    q.priors.row(static_cast<Eigen::Index>(s)) = parts[s]->prior;
  }
  return q;
}

std::vector<std::string> enumerate_sentences(const Palette& palette) {
  std::vector<std::string> out;
  for (Relation r : {Relation::North, Relation::South, Relation::East, Relation::West, Relation::OnTop}) {
    for (const ColorSpec& color : palette.colors) {
      for (const ClassSpec& cls : palette.classes) out.push_back(render_hint({r, color.name, cls.name}));
    }
  }
  return out;
}

double distill_loss(const Eigen::RowVectorXd& student, const Eigen::RowVectorXd& teacher) {
  const double ns = student.norm(), nt = teacher.norm();
  if (!(ns > 0.0) || !(nt > 0.0)) throw std::domain_error("distill_loss: zero vector");
  if (student.size() != teacher.size()) throw std::invalid_argument("distill_loss: dimension mismatch");
  return 1.0 - student.dot(teacher) / (ns * nt);
}

Var distill_loss(Var student, Var teacher) {
  Var cos = sum(mul(l2_normalize(student), l2_normalize(teacher)));
  Graph& g = *student.graph;
  return sub(g.constant(Mat::Ones(1, 1)), cos);
}

}  // namespace despos
