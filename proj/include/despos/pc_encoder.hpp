#pragma once

// Submap -> unit-norm global descriptor.
//
// Pipeline: canonical instance order -> per-instance featurization (PointNet
// style max over points plus color, position and density encoders) ->
// multi-scale convolution + self-attention fusion -> bidirectional LSTM ->
// strided pooling, projection and L2 normalization.

#include "despos/autodiff.hpp"
#include "despos/nn.hpp"
#include "despos/scenegen.hpp"

#include <array>
#include <cstdint>
#include <vector>

namespace despos {

struct PcEncoderConfig {
  int point_hidden = 32;
  int point_out = 64;
  int aggregate = 64;
  int color_dim = 16;
  int position_dim = 32;
  int density_dim = 8;
  int d_model = 128;
  int d_h = 128;
  int d_k = 64;
  int stride = 2;
  int out_dim = 256;
  friend bool operator==(const PcEncoderConfig&, const PcEncoderConfig&) = default;
};

/// Lexicographic (x, y, z) order of centroids; stable for ties.
/// Throws DataError on an empty submap.
std::vector<int> order_instances(const Submap& submap);

/// Strided indices 0, k, 2k, ... < length (0-based).
std::vector<Eigen::Index> strided_indices(Eigen::Index length, int stride);

/// One LSTM direction. W maps [h_{t-1}, x_t] to the four gates, column
/// blocks ordered forget, input, candidate, output.
struct LstmWeights {
  Parameter weight;  // (d_h + d_in) x 4 d_h
  Parameter bias;    // 1 x 4 d_h
};

/// Per-step gate activations, recorded only when requested.
struct LstmTrace {
  std::vector<Mat> forget, input, candidate, output, cell, hidden;
};

/// Softmax maps produced inside the multi-scale fusion block.
struct MfamTrace {
  std::array<Mat, 3> self_attention;  // scales 1, 3, 5
  Mat fine_map;                       // softmax(F3 F1^T / sqrt d_k)
  Mat wide_map;                       // softmax(F3 F5^T / sqrt d_k)
  Mat product_map;                    // elementwise product
};

/// Runs one direction over the rows of `seq`; `reverse` walks from the last row
/// to the first but returns states aligned with the input rows.
Var lstm_direction(Graph& g, Var seq, const LstmWeights& w, bool reverse, LstmTrace* trace = nullptr);

class PcEncoder {
 public:
  PcEncoder() = default;
  PcEncoder(const PcEncoderConfig& config, std::uint64_t seed);

  const PcEncoderConfig& config() const { return config_; }

  /// Rows follow order_instances(submap).
  Var encode_instances(Graph& g, const Submap& submap) const;
  Var mfam(Graph& g, Var seq, MfamTrace* trace = nullptr) const;
  /// T x 2 d_h, forward states then backward states per row.
  Var bilstm(Graph& g, Var seq, LstmTrace* fwd = nullptr, LstmTrace* bwd = nullptr) const;
  Var pool_global(Graph& g, Var hidden) const;
  /// Normalized learned vector used for empty submaps.
  Var null_descriptor(Graph& g) const;

  /// Full pipeline, 1 x out_dim, unit norm.
  Var encode_submap(Graph& g, const Submap& submap) const;
  /// Hidden states of a non-empty submap (canonical order), T x 2 d_h.
  Var encode_sequence(Graph& g, const Submap& submap) const;

  /// Convenience: descriptor as a plain vector.
  Eigen::RowVectorXd descriptor(const Submap& submap) const;

  void collect(ParamList& out);
  ConstParamList params() const;

  // Exposed for tests that pin individual weights.
  Mlp point_mlp;
  Linear aggregator;
  Mlp color_mlp;
  Mlp position_mlp;
  Mlp density_mlp;
  Linear fusion;
  std::array<std::vector<Parameter>, 3> conv_kernels;  // widths 1, 3, 5
  std::array<Parameter, 3> conv_bias;
  std::array<Parameter, 3> attn_query;
  std::array<Parameter, 3> attn_key;
  std::array<Parameter, 3> attn_value;
  LstmWeights lstm_forward;
  LstmWeights lstm_backward;
  Linear projection;
  Parameter null_vector;

 private:
  PcEncoderConfig config_;
};

/// Instance-level inputs in canonical order, shared with the fine stage.
struct InstanceInputs {
  std::vector<int> order;
  Mat relative_centroids;  // S x 3: (dx / half side, dy / half side, z / world height)
  Mat mean_colors;         // S x 3
  Mat log_density;         // S x 1
};
InstanceInputs instance_inputs(const Submap& submap);

}  // namespace despos
