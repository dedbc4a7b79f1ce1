#pragma once

// The three training phases, their losses, and the optimizer contract.

#include "despos/dataset.hpp"
#include "despos/model.hpp"

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

namespace despos {

using Logger = std::function<void(const std::string&)>;

/// Symmetric batch InfoNCE over rows of `pc` and `text` (both B x d).
/// Throws std::invalid_argument when tau <= 0 or the shapes differ.
double contrastive_loss(const Mat& pc, const Mat& text, double tau);
Var contrastive_loss(Var pc, Var text, double tau);

/// Sums parameter gradients from many graphs in the order they are added.
class GradientSum {
 public:
  explicit GradientSum(const ParamList& params);
  void add(const Graph& g, double weight = 1.0);
  void add(const GradientSum& other);
  const std::vector<Mat>& grads() const { return grads_; }
  void clear();

 private:
  ParamList params_;
  std::unordered_map<const Parameter*, std::size_t> slot_;
  std::vector<Mat> grads_;
};

/// Fixed-step first-order optimizer; parameter values are rounded to float32
/// after every step.
class Optimizer {
 public:
  Optimizer(const TrainConfig& config, ParamList params);
  void step(const std::vector<Mat>& grads);
  const ParamList& params() const { return params_; }

 private:
  bool adam_;
  double lr_;
  double momentum_;
  long step_count_ = 0;
  ParamList params_;
  std::vector<Mat> m_, v_;
};

/// Query descriptor from frozen sentence features: alignment head output.
Var encode_query(Graph& g, const SteModel& text, const QueryFeatures& q);

/// Distills the prior head onto `teacher` over `sentences`. The backbone stays
/// frozen; the prior head is frozen again when the phase ends.
Checkpoint train_ste_stage1(const TrainConfig& config, const std::vector<std::string>& sentences,
                            const TeacherEmbedder& teacher, Checkpoint ckpt, const Logger& log = {});

/// Contrastive alignment of the point-cloud encoder and the alignment head on
/// the train split. Requires a stage-1 checkpoint.
Checkpoint train_coarse(const TrainConfig& config, const Dataset& data, Checkpoint ckpt, const Logger& log = {});

/// Offset regression of the fine stage on (query, positive submap) pairs of the
/// train split. Requires a coarse checkpoint.
Checkpoint train_fine(const TrainConfig& config, const Dataset& data, Checkpoint ckpt, const Logger& log = {});

/// Greedy batches over `order` such that no two members share a key.
std::vector<std::vector<std::size_t>> distinct_key_batches(const std::vector<std::size_t>& order,
                                                           const std::vector<int>& keys, std::size_t batch_size);

/// True if every entry is <= its predecessor + tol.
bool non_increasing(const std::vector<double>& values, double tol);

}  // namespace despos
