#include "despos/fine_localizer.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace despos {

namespace {

Parameter make_param(const std::string& name, Mat value) {
  Parameter p;
  p.name = name;
  p.value = std::move(value);
  return p;
}

}  // namespace

Var CrossAttention::operator()(Graph& g, Var q_in, Var kv_in, Mat* weights) const {
  const double d_k = static_cast<double>(query.value.cols());
  Var q = matmul(q_in, g.param(query));
  Var k = matmul(kv_in, g.param(key));
  Var v = matmul(kv_in, g.param(value));
  Var w = softmax_rows(scale(matmul_nt(q, k), 1.0 / std::sqrt(d_k)));
  if (weights) *weights = w.value();
  return matmul(matmul(w, v), g.param(output));
}

FineLocalizer::FineLocalizer(const FineConfig& c, const TextEncoderConfig& text, const PcEncoderConfig& pc,
                             std::uint64_t seed)
    : config_(c) {
  if (c.depth < 2) throw std::invalid_argument("cascaded residual attention needs depth >= 2");
  std::mt19937_64 rng(seed);
  text_in = Linear("fine.text_in", text.width + text.prior_dim, c.width, rng);
  text_layer = TransformerLayer("fine.text_layer", c.width, c.heads, 2 * c.width, rng);
  sentence_positions = make_param("fine.sentence_positions", glorot_uniform(text.max_sentences, c.width, rng));
  pc_in = Linear("fine.pc_in", 2 * pc.d_h + 2, c.width, rng);
  for (int l = 0; l < c.depth; ++l) {
    const std::string tag = "fine.cra" + std::to_string(l);
    CrossAttention a;
    a.query = make_param(tag + ".q", glorot_uniform(c.width, c.d_k, rng));
    a.key = make_param(tag + ".k", glorot_uniform(c.width, c.d_k, rng));
    a.value = make_param(tag + ".v", glorot_uniform(c.width, c.width, rng));
    a.output = make_param(tag + ".o", glorot_uniform(c.width, c.width, rng));
    layers.push_back(std::move(a));
  }
  offset_hidden = Linear("fine.offset.0", c.width, c.offset_hidden, rng);
  offset_out = Linear("fine.offset.1", c.offset_hidden, 2, rng);
}

Var FineLocalizer::text_sequence(Graph& g, const QueryFeatures& q) const {
  std::vector<Eigen::Index> sentence_of;
  Eigen::Index start = 0;
  for (std::size_t s = 0; s < q.sentence_ends.size(); ++s) {
    for (Eigen::Index t = start; t < q.sentence_ends[s]; ++t) sentence_of.push_back(static_cast<Eigen::Index>(s));
    start = q.sentence_ends[s];
  }
  Var priors = gather_rows(g.constant(q.priors), sentence_of);
  Var x = text_in(g, concat_cols({g.constant(q.tokens), priors}));
  x = text_layer.blockwise(g, x, q.sentence_ends);
  std::vector<Var> pooled;
  std::vector<Eigen::Index> slots;
  const Eigen::Index max_slot = sentence_positions.value.rows() - 1;
  start = 0;
  for (std::size_t s = 0; s < q.sentence_ends.size(); ++s) {
    pooled.push_back(max_rows(slice_rows(x, start, q.sentence_ends[s] - start)));
    slots.push_back(std::min<Eigen::Index>(static_cast<Eigen::Index>(s), max_slot));
    start = q.sentence_ends[s];
  }
  return add(concat_rows(pooled), gather_rows(g.param(sentence_positions), slots));
}

Var FineLocalizer::pc_sequence(Graph& g, Var hidden, const Mat& relative_xy) const {
  return pc_in(g, concat_cols({hidden, g.constant(relative_xy)}));
}

Var FineLocalizer::cra_fuse(Graph& g, Var text_seq, Var pc_seq, CraTrace* trace) const {
  if (text_seq.rows() < 1 || pc_seq.rows() < 1) throw std::invalid_argument("cra_fuse: empty sequence");
  Mat w;
  Mat* wp = trace ? &w : nullptr;
  auto record = [&](Var r) {
    if (trace) {
      trace->attention.push_back(w);
      trace->fused.push_back(r.value());
    }
  };
  Var r_prev2 = add(layers[0](g, text_seq, pc_seq, wp), text_seq);
  record(r_prev2);
  Var r_prev1 = add(layers[1](g, pc_seq, r_prev2, wp), pc_seq);
  record(r_prev1);
  for (std::size_t l = 2; l < layers.size(); ++l) {
    Var r = add(layers[l](g, r_prev2, r_prev1, wp), r_prev2);
    record(r);
    r_prev2 = r_prev1;
    r_prev1 = r;
  }
  return mean_rows(r_prev1);
}

Var FineLocalizer::predict_offset(Graph& g, Var fused) const {
  return offset_out(g, relu(offset_hidden(g, fused)));
}

void FineLocalizer::collect(ParamList& out) {
  text_in.collect(out);
  text_layer.collect(out);
  out.push_back(&sentence_positions);
  pc_in.collect(out);
  for (CrossAttention& a : layers) {
    out.push_back(&a.query);
    out.push_back(&a.key);
    out.push_back(&a.value);
    out.push_back(&a.output);
  }
  offset_hidden.collect(out);
  offset_out.collect(out);
}

Var fine_loss(Var pred, Var gt) { return l2_norm(sub(gt, pred)); }

double fine_loss(Vec2 pred, Vec2 gt) { return std::hypot(gt.x - pred.x, gt.y - pred.y); }

SubmapSequence submap_sequence(const PcEncoder& encoder, const Submap& submap) {
  SubmapSequence s;
  Graph g;
  s.hidden = encoder.encode_sequence(g, submap).value();
  s.relative_xy = instance_inputs(submap).relative_centroids.leftCols(2);
  return s;
}

PosePrediction localize(const FineLocalizer& fine, const QueryFeatures& query, const Submap& submap,
                        const SubmapSequence& seq, double similarity) {
  PosePrediction p;
  p.submap_id = submap.id;
  p.similarity = similarity;
  if (submap.instances.empty()) {
    p.position = submap.center;
    p.empty_submap = true;
    return p;
  }
  Graph g;
  Var t = fine.text_sequence(g, query);
  Var n = fine.pc_sequence(g, g.constant(seq.hidden), seq.relative_xy);
  Var offset = fine.predict_offset(g, fine.cra_fuse(g, t, n));
  p.offset = {offset.value()(0, 0), offset.value()(0, 1)};
  p.position = {submap.center.x + p.offset.x, submap.center.y + p.offset.y};
  return p;
}

PosePrediction localize(const FineLocalizer& fine, const PcEncoder& encoder, SentenceCache& text,
                        const TextQuery& query, const Submap& submap, double similarity) {
  if (submap.instances.empty()) return localize(fine, QueryFeatures{}, submap, SubmapSequence{}, similarity);
  return localize(fine, text.query(query.hints), submap, submap_sequence(encoder, submap), similarity);
}

}  // namespace despos
