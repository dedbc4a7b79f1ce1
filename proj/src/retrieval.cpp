#include "despos/retrieval.hpp"

#include "despos/errors.hpp"
#include "despos/parallel.hpp"
#include "despos/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace despos {

namespace {

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string compact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

bool inside(const Submap& s, Vec2 p) {
  const double h = s.side / 2.0;
  return std::abs(p.x - s.center.x) <= h && std::abs(p.y - s.center.y) <= h;
}

const Submap& submap_by_id(const World& w, int id) {
  if (id >= 0 && static_cast<std::size_t>(id) < w.submaps.size() && w.submaps[id].id == id) return w.submaps[id];
  for (const Submap& s : w.submaps) {
    if (s.id == id) return s;
  }
  throw DataError("unknown submap id " + std::to_string(id));
}

std::vector<Eigen::RowVectorXd> query_descriptors(const Model& model, const std::vector<TextQuery>& queries) {
  SentenceCache cache(model.text);
  std::vector<QueryFeatures> feats;
  feats.reserve(queries.size());
  for (const TextQuery& q : queries) feats.push_back(cache.query(q.hints));
  std::vector<Eigen::RowVectorXd> out(queries.size());
  parallel_for(queries.size(), [&](std::size_t i) {
    Graph g;
    out[i] = encode_query(g, model.text, feats[i]).value();
  });
  return out;
}

std::vector<SubmapSequence> all_sequences(const PcEncoder& pc, const World& world) {
  std::vector<SubmapSequence> out(world.submaps.size());
  parallel_for(out.size(), [&](std::size_t i) {
    if (!world.submaps[i].instances.empty()) out[i] = submap_sequence(pc, world.submaps[i]);
  });
  return out;
}

}  // namespace

DescriptorIndex DescriptorIndex::build(const Mat& descriptors, std::vector<int> ids) {
  if (static_cast<Eigen::Index>(ids.size()) != descriptors.rows()) {
    throw DataError("descriptor index: " + std::to_string(ids.size()) + " ids for " +
                    std::to_string(descriptors.rows()) + " rows");
  }
  for (Eigen::Index r = 0; r < descriptors.rows(); ++r) {
    const double n = descriptors.row(r).norm();
    if (!(std::abs(n - 1.0) <= 1e-6)) {
      throw DataError("descriptor index: row " + std::to_string(r) + " has norm " + compact(n));
    }
  }
  DescriptorIndex idx;
  idx.matrix_ = descriptors;
  idx.ids_ = std::move(ids);
  return idx;
}

DescriptorIndex DescriptorIndex::build(const Mat& descriptors) {
  std::vector<int> ids(static_cast<std::size_t>(descriptors.rows()));
  std::iota(ids.begin(), ids.end(), 0);
  return build(descriptors, std::move(ids));
}

CandidateSet DescriptorIndex::topk(const Eigen::RowVectorXd& query, int k, int query_id) const {
  if (k < 1) throw std::invalid_argument("topk: k must be >= 1");
  if (query.size() != matrix_.cols()) throw std::invalid_argument("topk: dimension mismatch");
  const Eigen::VectorXd sims = matrix_ * query.transpose();
  std::vector<std::size_t> order(ids_.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(k), order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (sims(a) != sims(b)) return sims(a) > sims(b);
                      return ids_[a] < ids_[b];
                    });
  CandidateSet out;
  out.query_id = query_id;
  for (std::size_t i = 0; i < n; ++i) out.ranked.push_back({ids_[order[i]], sims(order[i])});
  return out;
}

bool MetricsTable::valid() const {
  for (Eigen::Index i = 0; i < recall.rows(); ++i) {
    for (Eigen::Index j = 0; j < recall.cols(); ++j) {
      const double v = recall(i, j);
      if (!(v >= 0.0 && v <= 1.0)) return false;
      if (i > 0 && v < recall(i - 1, j)) return false;
      if (j > 0 && v < recall(i, j - 1)) return false;
    }
  }
  return true;
}

MetricsTable coarse_recall(const std::vector<CandidateSet>& sets, const std::vector<TextQuery>& queries,
                           const std::vector<int>& ks, PositiveRule rule, const World* world) {
  if (sets.size() != queries.size()) throw std::invalid_argument("coarse_recall: one candidate set per query");
  if (rule == PositiveRule::Containing && !world) throw std::invalid_argument("coarse_recall: rule needs the world");
  MetricsTable t;
  t.name = "coarse";
  t.ks = ks;
  t.n = static_cast<int>(queries.size());
  t.recall = Mat::Zero(static_cast<Eigen::Index>(ks.size()), 1);
  if (queries.empty()) return t;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    // Rank (0-based) of the first hit.
    std::size_t hit = sets[q].ranked.size();
    for (std::size_t r = 0; r < sets[q].ranked.size(); ++r) {
      const int id = sets[q].ranked[r].submap_id;
      const bool ok = rule == PositiveRule::Nearest ? id == queries[q].positive_submap_id
                                                    : inside(submap_by_id(*world, id), queries[q].pose_gt);
      if (ok) {
        hit = r;
        break;
      }
    }
    for (std::size_t i = 0; i < ks.size(); ++i) {
      if (hit < static_cast<std::size_t>(std::max(ks[i], 0))) t.recall(static_cast<Eigen::Index>(i), 0) += 1.0;
    }
  }
  t.recall /= static_cast<double>(queries.size());
  return t;
}

MetricsTable localization_recall(const std::vector<std::vector<PosePrediction>>& predictions,
                                 const std::vector<TextQuery>& queries, const std::vector<int>& ks,
                                 const std::vector<double>& thresholds) {
  if (predictions.size() != queries.size()) {
    throw std::invalid_argument("localization_recall: one prediction list per query");
  }
  MetricsTable t;
  t.name = "localization";
  t.ks = ks;
  t.thresholds = thresholds;
  t.n = static_cast<int>(queries.size());
  t.recall = Mat::Zero(static_cast<Eigen::Index>(ks.size()), static_cast<Eigen::Index>(thresholds.size()));
  if (queries.empty()) return t;
  for (std::size_t q = 0; q < queries.size(); ++q) {
    for (std::size_t i = 0; i < ks.size(); ++i) {
      const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(std::max(ks[i], 0)), predictions[q].size());
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t r = 0; r < k; ++r) best = std::min(best, fine_loss(predictions[q][r].position, queries[q].pose_gt));
      for (std::size_t j = 0; j < thresholds.size(); ++j) {
        if (best < thresholds[j]) t.recall(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) += 1.0;
      }
    }
  }
  t.recall /= static_cast<double>(queries.size());
  return t;
}

std::string emit_report(const std::vector<MetricsTable>& tables, const std::string& format) {
  std::string out;
  if (format == "csv") {
    out = "k,threshold_m,recall,n\n";
    for (const MetricsTable& t : tables) {
      for (std::size_t i = 0; i < t.ks.size(); ++i) {
        if (t.thresholds.empty()) {
          out += std::to_string(t.ks[i]) + ",," + fixed(t.at(i), 6) + "," + std::to_string(t.n) + "\n";
        }
        for (std::size_t j = 0; j < t.thresholds.size(); ++j) {
          out += std::to_string(t.ks[i]) + "," + compact(t.thresholds[j]) + "," + fixed(t.at(i, j), 6) + "," +
                 std::to_string(t.n) + "\n";
        }
      }
    }
    return out;
  }
  if (format == "markdown") {
    for (const MetricsTable& t : tables) {
      if (!out.empty()) out += "\n";
      if (t.thresholds.empty()) {
        std::string head = "| " + t.name + " | ";
        std::string cell;
        for (std::size_t i = 0; i < t.ks.size(); ++i) {
          head += (i ? " / " : "") + std::string("R@") + std::to_string(t.ks[i]);
          cell += (i ? " / " : "") + fixed(t.at(i), 2);
        }
        out += head + " | n |\n|---|---|---|\n| recall | " + cell + " | " + std::to_string(t.n) + " |\n";
      } else {
        std::string head = "| " + t.name + " |";
        std::string rule = "|---|";
        std::string row = "| E < ";
        for (std::size_t j = 0; j < t.thresholds.size(); ++j) row += (j ? "/" : "") + compact(t.thresholds[j]);
        row += " m |";
        for (std::size_t i = 0; i < t.ks.size(); ++i) {
          head += " k=" + std::to_string(t.ks[i]) + " |";
          rule += "---|";
          std::string cell;
          for (std::size_t j = 0; j < t.thresholds.size(); ++j) cell += (j ? "/" : "") + fixed(t.at(i, j), 2);
          row += " " + cell + " |";
        }
        out += head + " n |\n" + rule + "---|\n" + row + " " + std::to_string(t.n) + " |\n";
      }
    }
    return out;
  }
  throw std::invalid_argument("emit_report: unknown format '" + format + "'");
}

DescriptorIndex build_submap_index(const PcEncoder& encoder, const World& world) {
  Mat desc(static_cast<Eigen::Index>(world.submaps.size()), encoder.config().out_dim);
  std::vector<int> ids(world.submaps.size());
  parallel_for(world.submaps.size(), [&](std::size_t i) {
    desc.row(static_cast<Eigen::Index>(i)) = encoder.descriptor(world.submaps[i]);
    ids[i] = world.submaps[i].id;
  });
  return DescriptorIndex::build(desc, std::move(ids));
}

Evaluation evaluate(const Model& coarse, const Model& fine, const World& world, const std::vector<TextQuery>& queries,
                    const EvalOptions& options) {
  Evaluation ev;
  const DescriptorIndex index = build_submap_index(coarse.pc, world);
  const auto descs = query_descriptors(coarse, queries);
  int kmax = 1;
  for (int k : options.ks) kmax = std::max(kmax, k);
  for (int k : options.coarse_ks) kmax = std::max(kmax, k);
  ev.candidates.resize(queries.size());
  for (std::size_t q = 0; q < queries.size(); ++q) ev.candidates[q] = index.topk(descs[q], kmax, static_cast<int>(q));
  ev.coarse = coarse_recall(ev.candidates, queries, options.coarse_ks, options.positive, &world);

  int kfine = 1;
  for (int k : options.ks) kfine = std::max(kfine, k);
  const auto sequences = all_sequences(fine.pc, world);
  SentenceCache cache(fine.text);
  std::vector<QueryFeatures> feats;
  feats.reserve(queries.size());
  for (const TextQuery& q : queries) feats.push_back(cache.query(q.hints));
  ev.predictions.resize(queries.size());
  parallel_for(queries.size(), [&](std::size_t q) {
    const auto& ranked = ev.candidates[q].ranked;
    for (std::size_t r = 0; r < std::min<std::size_t>(static_cast<std::size_t>(kfine), ranked.size()); ++r) {
      const Submap& s = submap_by_id(world, ranked[r].submap_id);
      const auto slot = static_cast<std::size_t>(&s - world.submaps.data());
      ev.predictions[q].push_back(localize(fine.fine, feats[q], s, sequences[slot], ranked[r].similarity));
    }
  });
  ev.localization = localization_recall(ev.predictions, queries, options.ks, options.thresholds);

  for (std::size_t q = 0; q < queries.size(); ++q) {
    if (ev.predictions[q].empty() || ev.predictions[q][0].submap_id != queries[q].positive_submap_id) continue;
    ++ev.correct_top1;
    ev.fine_error += fine_loss(ev.predictions[q][0].position, queries[q].pose_gt);
    ev.center_error += fine_loss(submap_by_id(world, queries[q].positive_submap_id).center, queries[q].pose_gt);
  }
  if (ev.correct_top1 > 0) {
    ev.fine_error /= ev.correct_top1;
    ev.center_error /= ev.correct_top1;
  }
  return ev;
}

std::map<PerturbMode, Evaluation> robustness_sweep(const Model& coarse, const Model& fine, const World& world,
                                                   const std::vector<TextQuery>& queries,
                                                   const std::vector<PerturbMode>& modes, std::uint64_t seed,
                                                   const EvalOptions& options) {
  std::map<PerturbMode, Evaluation> out;
  for (PerturbMode m : modes) {
    std::vector<TextQuery> perturbed;
    perturbed.reserve(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) perturbed.push_back(perturb_hints(queries[i], m, seed + i, world));
    Evaluation ev = evaluate(coarse, fine, world, perturbed, options);
    ev.coarse.name = "coarse_" + std::string(to_string(m));
    ev.localization.name = "localization_" + std::string(to_string(m));
    out.emplace(m, std::move(ev));
  }
  return out;
}

std::vector<PosePrediction> query_pipeline(const Model& coarse, const Model& fine, const World& world,
                                           const std::vector<std::string>& hints, int k) {
  TextQuery q;
  q.hints = hints;
  const auto desc = query_descriptors(coarse, {q});
  const CandidateSet set = build_submap_index(coarse.pc, world).topk(desc[0], k);
  SentenceCache cache(fine.text);
  const QueryFeatures feats = cache.query(hints);
  std::vector<PosePrediction> out;
  for (const Candidate& c : set.ranked) {
    const Submap& s = submap_by_id(world, c.submap_id);
    const SubmapSequence seq = s.instances.empty() ? SubmapSequence{} : submap_sequence(fine.pc, s);
    out.push_back(localize(fine.fine, feats, s, seq, c.similarity));
  }
  return out;
}

}  // namespace despos
