#pragma once

// Descriptor index, top-k retrieval, recall tables, reports, and the
// end-to-end evaluation driver.

#include "despos/fine_localizer.hpp"
#include "despos/model.hpp"
#include "despos/scenegen.hpp"

#include <map>
#include <string>
#include <vector>

namespace despos {

struct Candidate {
  int submap_id = 0;
  double similarity = 0.0;
  friend bool operator==(const Candidate&, const Candidate&) = default;
};

/// Ranked by similarity descending, ties by ascending submap id.
struct CandidateSet {
  int query_id = 0;
  std::vector<Candidate> ranked;
};

class DescriptorIndex {
 public:
  /// Rows must have norm 1 +- 1e-6; anything else throws DataError.
  static DescriptorIndex build(const Mat& descriptors, std::vector<int> ids);
  /// Ids 0 .. N-1.
  static DescriptorIndex build(const Mat& descriptors);

  /// Exact scan. k > size() returns size() results; k < 1 throws.
  CandidateSet topk(const Eigen::RowVectorXd& query, int k, int query_id = 0) const;

  std::size_t size() const { return ids_.size(); }
  Eigen::Index dim() const { return matrix_.cols(); }
  const Mat& matrix() const { return matrix_; }
  const std::vector<int>& ids() const { return ids_; }

 private:
  Mat matrix_;
  std::vector<int> ids_;
};

/// Recall per (k, threshold). Coarse tables have no thresholds and a single
/// recall column.
struct MetricsTable {
  std::string name;
  std::vector<int> ks;
  std::vector<double> thresholds;
  Mat recall;  // ks.size() x max(1, thresholds.size())
  int n = 0;

  double at(std::size_t k_index, std::size_t t_index = 0) const { return recall(k_index, t_index); }
  /// Non-decreasing along k and along threshold, all values in [0, 1].
  bool valid() const;
};

/// Positive id per query; `containing` counts any submap that contains the pose.
enum class PositiveRule { Nearest, Containing };

MetricsTable coarse_recall(const std::vector<CandidateSet>& sets, const std::vector<TextQuery>& queries,
                           const std::vector<int>& ks = {1, 3, 5}, PositiveRule rule = PositiveRule::Nearest,
                           const World* world = nullptr);

/// predictions[q] holds refined poses for the ranked candidates of query q.
/// Success at (k, eps) if any of the first k lies strictly within eps meters.
MetricsTable localization_recall(const std::vector<std::vector<PosePrediction>>& predictions,
                                 const std::vector<TextQuery>& queries, const std::vector<int>& ks = {1, 5, 10},
                                 const std::vector<double>& thresholds = {5, 10, 15});

/// "csv" (k,threshold_m,recall,n rows for every table) or "markdown".
/// Anything else throws std::invalid_argument.
std::string emit_report(const std::vector<MetricsTable>& tables, const std::string& format);

struct EvalOptions {
  std::vector<int> ks{1, 5, 10};
  std::vector<double> thresholds{5, 10, 15};
  std::vector<int> coarse_ks{1, 3, 5};
  PositiveRule positive = PositiveRule::Nearest;
};

struct Evaluation {
  MetricsTable coarse;
  MetricsTable localization;
  /// Fine stage on queries whose top-1 submap is the positive.
  int correct_top1 = 0;
  double fine_error = 0.0;
  double center_error = 0.0;
  std::vector<CandidateSet> candidates;
  std::vector<std::vector<PosePrediction>> predictions;
};

/// Submap descriptors of every submap (empty ones get the null descriptor).
DescriptorIndex build_submap_index(const PcEncoder& encoder, const World& world);

/// Retrieval with `coarse`, refinement with `fine`.
Evaluation evaluate(const Model& coarse, const Model& fine, const World& world, const std::vector<TextQuery>& queries,
                    const EvalOptions& options = {});

/// Re-runs evaluate() on perturbed copies of `queries`; query i of mode m uses
/// seed `seed + i`.
std::map<PerturbMode, Evaluation> robustness_sweep(const Model& coarse, const Model& fine, const World& world,
                                                   const std::vector<TextQuery>& queries,
                                                   const std::vector<PerturbMode>& modes, std::uint64_t seed,
                                                   const EvalOptions& options = {});

/// Ranked, refined candidates for a free-form list of hint sentences.
std::vector<PosePrediction> query_pipeline(const Model& coarse, const Model& fine, const World& world,
                                           const std::vector<std::string>& hints, int k);

}  // namespace despos
