#pragma once

// Small neural building blocks expressed on top of the autodiff Graph.

#include "despos/autodiff.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace despos {

using ParamList = std::vector<Parameter*>;
using ConstParamList = std::vector<const Parameter*>;

/// Rounds every entry to the nearest float32 so checkpoints stored as 32-bit
/// floats reload to bit-identical doubles.
void round_to_float(Mat& m);

/// Uniform in +-sqrt(6 / (fan_in + fan_out)), float32-representable.
Mat glorot_uniform(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng);

void set_frozen(const ParamList& params, bool frozen);

/// y = x W + b, with W stored in x in-dim by out-dim layout.
struct Linear {
  Parameter weight;
  Parameter bias;

  Linear() = default;
  Linear(const std::string& name, Eigen::Index in, Eigen::Index out, std::mt19937_64& rng);

  Var operator()(Graph& g, Var x) const;
  void collect(ParamList& out);
  Eigen::Index in_dim() const { return weight.value.rows(); }
  Eigen::Index out_dim() const { return weight.value.cols(); }
};

struct LayerNorm {
  Parameter gain;
  Parameter bias;

  LayerNorm() = default;
  LayerNorm(const std::string& name, Eigen::Index width);

  Var operator()(Graph& g, Var x) const;
  void collect(ParamList& out);
};

/// Linear -> ReLU -> Linear (-> ReLU when `relu_out`).
struct Mlp {
  Linear first;
  Linear second;
  bool relu_out = false;

  Mlp() = default;
  Mlp(const std::string& name, Eigen::Index in, Eigen::Index hidden, Eigen::Index out,
      std::mt19937_64& rng, bool relu_out);

  Var operator()(Graph& g, Var x) const;
  void collect(ParamList& out);
};

/// softmax(Q K^T / sqrt(d_k)) V for already projected streams.
Var scaled_dot_attention(Var q, Var k, Var v, double d_k);

/// Multi-head attention; queries from one stream, keys and values from another.
struct MultiHeadAttention {
  Linear query;
  Linear key;
  Linear value;
  Linear output;
  int heads = 1;

  MultiHeadAttention() = default;
  MultiHeadAttention(const std::string& name, Eigen::Index width, int heads, std::mt19937_64& rng);

  Var operator()(Graph& g, Var q_in, Var kv_in) const;
  void collect(ParamList& out);
};

/// Pre-norm transformer encoder layer: x + MHA(LN x), then x + FFN(LN x).
struct TransformerLayer {
  LayerNorm norm1;
  MultiHeadAttention attn;
  LayerNorm norm2;
  Mlp ffn;

  TransformerLayer() = default;
  TransformerLayer(const std::string& name, Eigen::Index width, int heads, Eigen::Index ffn_width,
                   std::mt19937_64& rng);

  Var operator()(Graph& g, Var x) const;
  /// Attention restricted to blocks [ends[i-1], ends[i]) of rows.
  Var blockwise(Graph& g, Var x, const std::vector<Eigen::Index>& ends) const;
  void collect(ParamList& out);
};

}  // namespace despos
