#include "despos/retrieval.hpp"
#include "fixtures.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <thread>

using namespace despos;
using namespace despos::testing;

namespace {

Mat unit_rows(Eigen::Index n, Eigen::Index d, std::uint64_t seed) {
  Mat m = random_mat(n, d, seed);
  for (Eigen::Index i = 0; i < n; ++i) m.row(i).normalize();
  return m;
}

// O(N d) scan with explicit loops and a stable ordering rule.
std::vector<Candidate> brute_force(const Mat& index, const std::vector<int>& ids, const RowVec& q, int k) {
  std::vector<Candidate> all;
  for (Eigen::Index i = 0; i < index.rows(); ++i) {
    double dot = 0.0;
    for (Eigen::Index j = 0; j < index.cols(); ++j) dot += index(i, j) * q(j);
    all.push_back({ids[static_cast<std::size_t>(i)], dot});
  }
  std::sort(all.begin(), all.end(), [](const Candidate& a, const Candidate& b) {
    if (a.similarity != b.similarity) return a.similarity > b.similarity;
    return a.submap_id < b.submap_id;
  });
  all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(k)));
  return all;
}

TextQuery query_at(double x, double y, int positive) {
  TextQuery q;
  q.pose_gt = {x, y};
  q.positive_submap_id = positive;
  return q;
}

CandidateSet ranked_ids(std::vector<int> ids) {
  CandidateSet s;
  double sim = 1.0;
  for (int id : ids) s.ranked.push_back({id, sim -= 0.01});
  return s;
}

}  // namespace

TEST(DescriptorIndex, BuildValidation) {
  const Mat d = unit_rows(16, 8, 1);
  EXPECT_EQ(DescriptorIndex::build(d).size(), 16u);
  Mat dup(2, 8);
  dup << d.row(0), d.row(0);
  EXPECT_EQ(DescriptorIndex::build(dup).size(), 2u);
  Mat bad = d;
  bad.row(3).setZero();
  EXPECT_THROW(DescriptorIndex::build(bad), DataError);
  bad = d;
  bad.row(3) *= 1.001;
  EXPECT_THROW(DescriptorIndex::build(bad), DataError);
}

TEST(DescriptorIndex, SelfQueryRanksFirst) {
  const Mat d = unit_rows(10, 16, 2);
  const auto idx = DescriptorIndex::build(d, {10, 11, 12, 13, 14, 15, 16, 17, 18, 19});
  const CandidateSet s = idx.topk(d.row(4), 3, 7);
  EXPECT_EQ(s.query_id, 7);
  EXPECT_EQ(s.ranked[0].submap_id, 14);
  EXPECT_NEAR(s.ranked[0].similarity, 1.0, 1e-6);
  EXPECT_EQ(idx.topk(d.row(0), 50).ranked.size(), 10u);
  EXPECT_THROW(idx.topk(d.row(0), 0), std::invalid_argument);
}

TEST(DescriptorIndex, MatchesBruteForceOnFiveVectors) {
  const Mat d = unit_rows(5, 4, 3);
  const std::vector<int> ids{0, 1, 2, 3, 4};
  const auto idx = DescriptorIndex::build(d);
  const Mat q = unit_rows(10, 4, 4);
  for (Eigen::Index i = 0; i < q.rows(); ++i) EXPECT_EQ(idx.topk(q.row(i), 3).ranked, brute_force(d, ids, q.row(i), 3));
}

TEST(DescriptorIndex, TiesGoToLowerId) {
  Mat d(4, 2);
  d << 0, 1, 1, 0, 1, 0, 0, -1;
  const auto idx = DescriptorIndex::build(d, {9, 5, 7, 1});
  RowVec q(2);
  q << 1, 0;
  const CandidateSet s = idx.topk(q, 4);
  EXPECT_EQ(s.ranked[0].submap_id, 5);
  EXPECT_EQ(s.ranked[1].submap_id, 7);
  EXPECT_EQ(s.ranked[2].submap_id, 1);
  EXPECT_EQ(s.ranked[3].submap_id, 9);
}

TEST(DescriptorIndex, ConcurrentQueriesMatchSerial) {
  const Mat d = unit_rows(200, 32, 5);
  const auto idx = DescriptorIndex::build(d);
  const Mat q = unit_rows(64, 32, 6);
  std::vector<CandidateSet> serial, parallel(64);
  for (Eigen::Index i = 0; i < 64; ++i) serial.push_back(idx.topk(q.row(i), 5));
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t) {
    threads.emplace_back([&, t] {
      for (int i = t; i < 64; i += 4) parallel[static_cast<std::size_t>(i)] = idx.topk(q.row(i), 5);
    });
  }
  for (auto& th : threads) th.join();
  for (std::size_t i = 0; i < 64; ++i) EXPECT_EQ(parallel[i].ranked, serial[i].ranked);
}

TEST(CoarseRecall, HandCounts) {
  const std::vector<TextQuery> qs{query_at(0, 0, 1), query_at(0, 0, 2), query_at(0, 0, 7)};
  const std::vector<CandidateSet> sets{ranked_ids({1, 9, 8, 6, 5, 4, 7}), ranked_ids({9, 2, 8, 6, 5, 4, 7}),
                                       ranked_ids({9, 8, 6, 5, 4, 3, 7})};
  const MetricsTable t = coarse_recall(sets, qs);
  EXPECT_DOUBLE_EQ(t.at(0), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(t.at(1), 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(t.at(2), 2.0 / 3.0);
  EXPECT_EQ(t.n, 3);
  EXPECT_TRUE(t.valid());
  const MetricsTable all = coarse_recall({ranked_ids({1}), ranked_ids({2}), ranked_ids({7})}, qs);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(all.at(i), 1.0);
}

TEST(CoarseRecall, ContainingRule) {
  World w;
  w.extent = {60, 60};
  w.submaps = partition_submaps(w);
  // (20, 15) lies inside the windows centered at (15,15) and (25,15), among others.
  const std::vector<TextQuery> qs{query_at(20, 15, 0)};
  const MetricsTable nearest = coarse_recall({ranked_ids({1})}, qs, {1}, PositiveRule::Nearest, &w);
  const MetricsTable containing = coarse_recall({ranked_ids({1})}, qs, {1}, PositiveRule::Containing, &w);
  EXPECT_EQ(nearest.at(0), 0.0);
  EXPECT_EQ(containing.at(0), 1.0);
}

TEST(LocalizationRecall, StrictThresholdAndAnyOfTopK) {
  const std::vector<TextQuery> qs{query_at(0, 0, 0), query_at(0, 0, 0)};
  auto pred = [](double x) {
    PosePrediction p;
    p.position = {x, 0};
    return p;
  };
  const std::vector<std::vector<PosePrediction>> preds{{pred(4.9), pred(20)}, {pred(5.1), pred(0.5)}};
  const MetricsTable t = localization_recall(preds, qs, {1, 2}, {5, 10});
  EXPECT_DOUBLE_EQ(t.at(0, 0), 0.5);  // 4.9 counts, 5.1 does not
  EXPECT_DOUBLE_EQ(t.at(0, 1), 1.0);
  EXPECT_DOUBLE_EQ(t.at(1, 0), 1.0);  // second candidate of query 2 is within 5 m
  EXPECT_TRUE(t.valid());
}

TEST(MetricsTable, ValidityChecks) {
  MetricsTable t{"x", {1, 5}, {5, 10}, Mat(2, 2), 4};
  t.recall << 0.2, 0.4, 0.5, 0.6;
  EXPECT_TRUE(t.valid());
  t.recall(1, 0) = 0.1;
  EXPECT_FALSE(t.valid());
  t.recall << 0.2, 0.1, 0.5, 0.6;
  EXPECT_FALSE(t.valid());
  t.recall << 0.2, 0.4, 0.5, 1.2;
  EXPECT_FALSE(t.valid());
}

TEST(Report, CsvAndMarkdownLayout) {
  MetricsTable coarse{"coarse", {1, 3, 5}, {}, Mat(3, 1), 500};
  coarse.recall << 0.33, 0.54, 0.64;
  MetricsTable loc{"localization", {1, 5, 10}, {5, 10, 15}, Mat(3, 3), 500};
  loc.recall << 0.40, 0.54, 0.57, 0.65, 0.80, 0.85, 0.75, 0.89, 0.91;
  const std::string csv = emit_report({coarse, loc}, "csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "k,threshold_m,recall,n");
  EXPECT_NE(csv.find("\n1,,0.330000,500\n"), std::string::npos);
  EXPECT_NE(csv.find("\n10,15,0.910000,500\n"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 3 + 9);

  const std::string md = emit_report({coarse, loc}, "markdown");
  EXPECT_NE(md.find("0.33 / 0.54 / 0.64"), std::string::npos) << md;
  EXPECT_NE(md.find("| E < 5/10/15 m | 0.40/0.54/0.57 |"), std::string::npos) << md;
  EXPECT_EQ(emit_report({coarse, loc}, "markdown"), md);
  EXPECT_THROW(emit_report({coarse}, "xml"), std::invalid_argument);
  EXPECT_EQ(emit_report({}, "csv"), "k,threshold_m,recall,n\n");
}

TEST(Evaluate, UntrainedPipelineProducesValidTables) {
  ModelConfig cfg;
  cfg.pc = tiny_pc();
  cfg.text = tiny_text();
  cfg.fine = tiny_fine();
  const Model m = Model::create(cfg, 4);
  World w = generate_world(2, {60, 60}, 40, default_palette());
  const auto qs = generate_queries(w, 12, 6, 3, "test");
  const Evaluation ev = evaluate(m, m, w, qs);
  EXPECT_TRUE(ev.coarse.valid());
  EXPECT_TRUE(ev.localization.valid());
  ASSERT_EQ(ev.candidates.size(), 12u);
  for (std::size_t q = 0; q < qs.size(); ++q) {
    EXPECT_EQ(ev.predictions[q].size(), 10u);
    for (std::size_t r = 0; r < ev.predictions[q].size(); ++r) {
      EXPECT_EQ(ev.predictions[q][r].submap_id, ev.candidates[q].ranked[r].submap_id);
    }
  }
  const auto sweep = robustness_sweep(m, m, w, qs, {PerturbMode::Full, PerturbMode::Save50}, 9);
  EXPECT_EQ(sweep.at(PerturbMode::Full).localization.recall, ev.localization.recall);
  EXPECT_EQ(sweep.at(PerturbMode::Full).coarse.recall, ev.coarse.recall);
  const auto ranked = query_pipeline(m, m, w, qs[0].hints, 3);
  ASSERT_EQ(ranked.size(), 3u);
  EXPECT_EQ(ranked[0].submap_id, ev.candidates[0].ranked[0].submap_id);
}
