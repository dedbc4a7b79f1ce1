#pragma once

// Fine stage: cascaded residual cross-attention between hint and instance
// sequences, then an offset from the submap center.

#include "despos/autodiff.hpp"
#include "despos/nn.hpp"
#include "despos/pc_encoder.hpp"
#include "despos/scenegen.hpp"
#include "despos/text_encoder.hpp"

#include <cstdint>
#include <vector>

namespace despos {

struct FineConfig {
  int width = 64;
  int d_k = 32;
  int depth = 4;
  int heads = 4;
  int offset_hidden = 64;
  friend bool operator==(const FineConfig&, const FineConfig&) = default;
};

/// Single-head cross attention with query/key/value/output projections.
struct CrossAttention {
  Parameter query;   // width x d_k
  Parameter key;     // width x d_k
  Parameter value;   // width x width
  Parameter output;  // width x width

  Var operator()(Graph& g, Var q_in, Var kv_in, Mat* weights = nullptr) const;
};

struct CraTrace {
  std::vector<Mat> attention;  // one softmax map per layer
  std::vector<Mat> fused;      // R_1 .. R_L
};

struct PosePrediction {
  int submap_id = 0;
  Vec2 offset;
  Vec2 position;
  double similarity = 0.0;
  /// Set when the submap had no instances and the center was returned.
  bool empty_submap = false;
};

class FineLocalizer {
 public:
  FineLocalizer() = default;
  /// Throws std::invalid_argument when depth < 2.
  FineLocalizer(const FineConfig& config, const TextEncoderConfig& text, const PcEncoderConfig& pc,
                std::uint64_t seed);

  const FineConfig& config() const { return config_; }

  /// Hint sequence t: frozen token features with sentence priors -> trainable
  /// transformer layer -> max per sentence -> sentence positions.
  Var text_sequence(Graph& g, const QueryFeatures& q) const;
  /// Instance sequence n: frozen biLSTM states with relative centroid (x, y).
  Var pc_sequence(Graph& g, Var hidden, const Mat& relative_xy) const;

  /// R_1 = A(t, n) + t, R_2 = A(n, R_1) + n, R_i = A(R_{i-2}, R_{i-1}) + R_{i-2};
  /// returns the row mean of R_L.
  Var cra_fuse(Graph& g, Var text_seq, Var pc_seq, CraTrace* trace = nullptr) const;
  /// Two-layer MLP to (dx, dy) in meters, 1 x 2.
  Var predict_offset(Graph& g, Var fused) const;

  void collect(ParamList& out);

  Linear text_in;
  TransformerLayer text_layer;
  Parameter sentence_positions;
  Linear pc_in;
  std::vector<CrossAttention> layers;
  Linear offset_hidden;
  Linear offset_out;

 private:
  FineConfig config_;
};

/// ||gt - pred||_2, both 1 x 2.
Var fine_loss(Var pred, Var gt);
double fine_loss(Vec2 pred, Vec2 gt);

/// Frozen point-cloud side of the fine stage for one submap.
struct SubmapSequence {
  Mat hidden;       // T x 2 d_h
  Mat relative_xy;  // T x 2
};
SubmapSequence submap_sequence(const PcEncoder& encoder, const Submap& submap);

/// center + offset, where offset comes from the fused query/submap pair.
PosePrediction localize(const FineLocalizer& fine, const PcEncoder& encoder, SentenceCache& text,
                        const TextQuery& query, const Submap& submap, double similarity = 0.0);

/// Same as localize() with the submap sequence already computed.
PosePrediction localize(const FineLocalizer& fine, const QueryFeatures& query, const Submap& submap,
                        const SubmapSequence& seq, double similarity = 0.0);

}  // namespace despos
