#include "despos/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace despos {

void round_to_float(Mat& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  }
}

Mat glorot_uniform(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Mat m(rows, cols);
  // Column-major fill keeps the draw order independent of Eigen internals.
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = dist(rng);
  }
  round_to_float(m);
  return m;
}

void set_frozen(const ParamList& params, bool frozen) {
  for (Parameter* p : params) p->frozen = frozen;
}

Linear::Linear(const std::string& name, Eigen::Index in, Eigen::Index out, std::mt19937_64& rng) {
  weight.name = name + ".weight";
  weight.value = glorot_uniform(in, out, rng);
  bias.name = name + ".bias";
  bias.value = Mat::Zero(1, out);
}

Var Linear::operator()(Graph& g, Var x) const {
  return add_row(matmul(x, g.param(weight)), g.param(bias));
}

void Linear::collect(ParamList& out) {
  out.push_back(&weight);
  out.push_back(&bias);
}

LayerNorm::LayerNorm(const std::string& name, Eigen::Index width) {
  gain.name = name + ".gain";
  gain.value = Mat::Ones(1, width);
  bias.name = name + ".bias";
  bias.value = Mat::Zero(1, width);
}

Var LayerNorm::operator()(Graph& g, Var x) const {
  return layer_norm(x, g.param(gain), g.param(bias));
}

void LayerNorm::collect(ParamList& out) {
  out.push_back(&gain);
  out.push_back(&bias);
}

Mlp::Mlp(const std::string& name, Eigen::Index in, Eigen::Index hidden, Eigen::Index out,
         std::mt19937_64& rng, bool relu_out_)
    : first(name + ".0", in, hidden, rng), second(name + ".1", hidden, out, rng), relu_out(relu_out_) {}

Var Mlp::operator()(Graph& g, Var x) const {
  Var y = second(g, relu(first(g, x)));
  return relu_out ? relu(y) : y;
}

void Mlp::collect(ParamList& out) {
  first.collect(out);
  second.collect(out);
}

Var scaled_dot_attention(Var q, Var k, Var v, double d_k) {
  Var weights = softmax_rows(scale(matmul_nt(q, k), 1.0 / std::sqrt(d_k)));
  return matmul(weights, v);
}

MultiHeadAttention::MultiHeadAttention(const std::string& name, Eigen::Index width, int heads_,
                                       std::mt19937_64& rng)
    : query(name + ".q", width, width, rng),
      key(name + ".k", width, width, rng),
      value(name + ".v", width, width, rng),
      output(name + ".o", width, width, rng),
      heads(heads_) {
  if (heads < 1 || width % heads != 0) {
    throw std::invalid_argument("MultiHeadAttention: width must be divisible by heads");
  }
}

Var MultiHeadAttention::operator()(Graph& g, Var q_in, Var kv_in) const {
  Var q = query(g, q_in);
  Var k = key(g, kv_in);
  Var v = value(g, kv_in);
  const Eigen::Index width = q.cols();
  const Eigen::Index head_width = width / heads;
  if (heads == 1) return output(g, scaled_dot_attention(q, k, v, static_cast<double>(width)));
  std::vector<Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Eigen::Index start = h * head_width;
    outs.push_back(scaled_dot_attention(slice_cols(q, start, head_width), slice_cols(k, start, head_width),
                                        slice_cols(v, start, head_width), static_cast<double>(head_width)));
  }
  return output(g, concat_cols(outs));
}

void MultiHeadAttention::collect(ParamList& out) {
  query.collect(out);
  key.collect(out);
  value.collect(out);
  output.collect(out);
}

TransformerLayer::TransformerLayer(const std::string& name, Eigen::Index width, int heads,
                                   Eigen::Index ffn_width, std::mt19937_64& rng)
    : norm1(name + ".ln1", width),
      attn(name + ".attn", width, heads, rng),
      norm2(name + ".ln2", width),
      ffn(name + ".ffn", width, ffn_width, width, rng, false) {}

Var TransformerLayer::operator()(Graph& g, Var x) const {
  Var n = norm1(g, x);
  Var h = add(x, attn(g, n, n));
  return add(h, ffn(g, norm2(g, h)));
}

Var TransformerLayer::blockwise(Graph& g, Var x, const std::vector<Eigen::Index>& ends) const {
  if (ends.size() <= 1) return (*this)(g, x);
  std::vector<Var> blocks;
  blocks.reserve(ends.size());
  Eigen::Index start = 0;
  for (Eigen::Index end : ends) {
    blocks.push_back((*this)(g, slice_rows(x, start, end - start)));
    start = end;
  }
  return concat_rows(blocks);
}

void TransformerLayer::collect(ParamList& out) {
  norm1.collect(out);
  attn.collect(out);
  norm2.collect(out);
  ffn.collect(out);
}

}  // namespace despos
