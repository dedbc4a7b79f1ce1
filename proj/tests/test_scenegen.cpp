#include "despos/scenegen.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>

using namespace despos;

namespace {

PointInstance point_at(double x, double y, double z = 1.0) {
  PointInstance p;
  p.points.resize(1, 3);
  p.points << x, y, z;
  p.colors = Eigen::MatrixX3d::Constant(1, 3, 0.5);
  p.intensities = Eigen::VectorXd::Constant(1, 0.5);
  p.centroid = {x, y, z};
  p.density = 1.0;
  p.class_name = "pole";
  p.color_name = "gray";
  return p;
}

// Independent sector rule: angle of (pose - centroid), measured in degrees.
std::string sector_oracle(Vec2 pose, const Eigen::Vector3d& c) {
  const double dx = pose.x - c.x(), dy = pose.y - c.y();
  if (std::sqrt(dx * dx + dy * dy) < 1.0) return "on-top";
  double a = std::atan2(dy, dx) / std::numbers::pi * 180.0;
  if (a < -135.0 || a >= 135.0) return "west";
  if (a < -45.0) return "south";
  if (a < 45.0) return "east";
  return "north";
}

}  // namespace

TEST(GenerateWorld, SameSeedIsIdentical) {
  const World a = generate_world(7, {60, 60}, 40, default_palette());
  const World b = generate_world(7, {60, 60}, 40, default_palette());
  EXPECT_TRUE(a == b);
  const World c = generate_world(8, {60, 60}, 40, default_palette());
  EXPECT_FALSE(a == c);
}

TEST(GenerateWorld, RejectsUndersizedExtentAndZeroCount) {
  EXPECT_THROW(generate_world(7, {20, 20}, 40, default_palette()), SizingError);
  EXPECT_THROW(generate_world(7, {60, 60}, 0, default_palette()), SizingError);
  EXPECT_THROW(generate_world(7, {60, 60}, 4, Palette{}), SizingError);
}

TEST(GenerateWorld, InstanceInvariants) {
  const World w = generate_world(7, {60, 60}, 40, default_palette());
  ASSERT_EQ(w.instances.size(), 40u);
  for (const PointInstance& p : w.instances) {
    EXPECT_GE(p.points.rows(), 32);
    EXPECT_LE(p.points.rows(), 256);
    const Eigen::Vector3d mean = p.points.colwise().mean();
    EXPECT_LT((mean - p.centroid).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_GE(p.centroid.x(), 0.0);
    EXPECT_LE(p.centroid.x(), 60.0);
    EXPECT_GE(p.centroid.y(), 0.0);
    EXPECT_LE(p.centroid.y(), 60.0);
    EXPECT_GT(p.density, 0.0);
    EXPECT_GE(p.colors.minCoeff(), 0.0);
    EXPECT_LE(p.colors.maxCoeff(), 1.0);
    EXPECT_GE(p.intensities.minCoeff(), 0.0);
    EXPECT_LE(p.intensities.maxCoeff(), 1.0);
  }
}

TEST(PartitionSubmaps, GridCounts) {
  World w = generate_world(7, {60, 60}, 40, default_palette());
  EXPECT_EQ(partition_submaps(w).size(), 16u);
  w.extent = {30, 30};
  EXPECT_EQ(partition_submaps(w).size(), 1u);
  w.extent = {110, 110};
  EXPECT_EQ(partition_submaps(w).size(), 81u);
  w.extent = {75, 42};
  // floor(45/10)+1 = 5 by floor(12/10)+1 = 2
  EXPECT_EQ(partition_submaps(w).size(), 10u);
  EXPECT_THROW(partition_submaps(w, 30, 0), SizingError);
  EXPECT_THROW(partition_submaps(w, 50, 10), SizingError);
}

TEST(PartitionSubmaps, ContainmentAndIds) {
  World w;
  w.extent = {60, 60};
  w.instances = {point_at(31, 5), point_at(29.5, 5), point_at(45, 45)};
  const auto subs = partition_submaps(w);
  std::set<int> ids;
  for (const Submap& s : subs) {
    ids.insert(s.id);
    for (const PointInstance& p : s.instances) {
      EXPECT_LE(std::abs(p.centroid.x() - s.center.x), s.side / 2);
      EXPECT_LE(std::abs(p.centroid.y() - s.center.y), s.side / 2);
    }
  }
  EXPECT_EQ(ids.size(), subs.size());
  // Window [0,30]x[0,30] is id 0.
  ASSERT_EQ(subs[0].center, (Vec2{15, 15}));
  ASSERT_EQ(subs[0].instances.size(), 1u);
  EXPECT_DOUBLE_EQ(subs[0].instances[0].centroid.x(), 29.5);
  // Row-major: id 1 is the window starting at x = 10.
  EXPECT_EQ(subs[1].center, (Vec2{25, 15}));
  // Empty windows are kept.
  EXPECT_TRUE(std::any_of(subs.begin(), subs.end(), [](const Submap& s) { return s.instances.empty(); }));
}

TEST(Relations, SectorExamples) {
  EXPECT_EQ(relation_of({0, 0}, {12, 0, 0}), Relation::West);
  EXPECT_EQ(relation_of({24, 0}, {12, 0, 0}), Relation::East);
  EXPECT_EQ(relation_of({12, 9}, {12, 0, 0}), Relation::North);
  EXPECT_EQ(relation_of({12, -9}, {12, 0, 0}), Relation::South);
  EXPECT_EQ(relation_of({12, 0}, {12, 0, 0}), Relation::OnTop);
  EXPECT_EQ(relation_of({12.5, 0.5}, {12, 0, 0}), Relation::OnTop);
}

TEST(Relations, SectorAgreesWithIndependentOracle) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-40, 40);
  for (int i = 0; i < 5000; ++i) {
    const Vec2 pose{u(rng), u(rng)};
    const Eigen::Vector3d c(u(rng), u(rng), 1.0);
    EXPECT_EQ(std::string(to_string(relation_of(pose, c))), sector_oracle(pose, c));
  }
}

TEST(Hints, RenderParseRoundTrip) {
  const Hint h{Relation::West, "black", "garage"};
  EXPECT_EQ(render_hint(h), "The pose is west of a black garage.");
  EXPECT_EQ(parse_hint("The pose is west of a black garage."), h);
  EXPECT_EQ(parse_hint("The pose is on-top of a red car.")->relation, Relation::OnTop);
  EXPECT_FALSE(parse_hint("The pose is near a black garage.").has_value());
  EXPECT_FALSE(parse_hint("pose is west of a black garage.").has_value());
}

TEST(NearestSubmap, TiesGoToLowerId) {
  World w;
  w.extent = {60, 60};
  const auto subs = partition_submaps(w);
  // (20, 15) is equidistant from centers (15,15) and (25,15).
  EXPECT_EQ(nearest_submap(subs, {20, 15}), 0);
  EXPECT_EQ(nearest_submap(subs, {20.01, 15}), 1);
}

TEST(DescribePose, NearestFirstWithOracleRelations) {
  World w;
  w.extent = {60, 60};
  w.instances = {point_at(12, 0), point_at(0, 5), point_at(-20, 0), point_at(0, -3), point_at(50, 50)};
  w.instances[0].class_name = "garage";
  w.instances[0].color_name = "black";
  w.submaps = partition_submaps(w);
  const TextQuery q = describe_pose(w, {0, 0}, 3, 1);
  ASSERT_EQ(q.hints.size(), 3u);
  EXPECT_EQ(parse_hint(q.hints[0])->relation, Relation::North);  // (0,-3) is nearest; pose lies north of it
  EXPECT_EQ(parse_hint(q.hints[1])->relation, Relation::South);
  EXPECT_EQ(q.hints[2], "The pose is west of a black garage.");
  EXPECT_EQ(q.positive_submap_id, nearest_submap(w.submaps, {0, 0}));
}

TEST(DescribePose, DeficitIsReported) {
  World w;
  w.extent = {60, 60};
  w.instances = {point_at(5, 5), point_at(55, 55)};
  w.submaps = partition_submaps(w);
  try {
    describe_pose(w, {5, 6}, 3, 0);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find('2'), std::string::npos) << e.what();
  }
}

TEST(DescribePose, SixHintsOnDenseWorldMatchSortOracle) {
  const World w = generate_world(11, {60, 60}, 60, default_palette());
  const Vec2 pose{30, 30};
  const TextQuery q = describe_pose(w, pose, 6, 0);
  ASSERT_EQ(q.hints.size(), 6u);
  std::vector<std::pair<double, int>> dist;
  for (std::size_t i = 0; i < w.instances.size(); ++i) {
    const auto& c = w.instances[i].centroid;
    dist.emplace_back(std::hypot(c.x() - pose.x, c.y() - pose.y), static_cast<int>(i));
  }
  std::sort(dist.begin(), dist.end());
  for (int k = 0; k < 6; ++k) {
    const PointInstance& p = w.instances[dist[k].second];
    const Hint expect{relation_of(pose, p.centroid), p.color_name, p.class_name};
    EXPECT_EQ(q.hints[k], render_hint(expect));
  }
}

TEST(GenerateQueries, HintsParseAndPositiveIsNearest) {
  const World w = generate_world(5, {60, 60}, 40, default_palette());
  const auto qs = generate_queries(w, 50, 6, 9, "train");
  ASSERT_EQ(qs.size(), 50u);
  for (const TextQuery& q : qs) {
    EXPECT_EQ(q.hints.size(), 6u);
    for (const auto& h : q.hints) EXPECT_TRUE(parse_hint(h).has_value()) << h;
    EXPECT_EQ(q.positive_submap_id, nearest_submap(w.submaps, q.pose_gt));
    EXPECT_EQ(q.split, "train");
  }
  EXPECT_EQ(qs, generate_queries(w, 50, 6, 9, "train"));
}

TEST(PerturbHints, Counts) {
  const World w = generate_world(5, {60, 60}, 40, default_palette());
  const TextQuery q = generate_queries(w, 1, 6, 9, "test")[0];
  EXPECT_EQ(perturb_hints(q, PerturbMode::Full, 1, w), q);
  EXPECT_EQ(perturb_hints(q, PerturbMode::Save75, 1, w).hints.size(), 5u);
  EXPECT_EQ(perturb_hints(q, PerturbMode::Save50, 1, w).hints.size(), 3u);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const TextQuery s = perturb_hints(q, PerturbMode::SwapOne, seed, w);
    ASSERT_EQ(s.hints.size(), 6u);
    int shared = 0;
    for (std::size_t i = 0; i < 6; ++i) shared += s.hints[i] == q.hints[i];
    EXPECT_EQ(shared, 5);
    EXPECT_EQ(s.pose_gt, q.pose_gt);
  }
}

TEST(PerturbHints, SaveModesPreserveOrder) {
  const World w = generate_world(5, {60, 60}, 40, default_palette());
  const TextQuery q = generate_queries(w, 1, 6, 9, "test")[0];
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const TextQuery s = perturb_hints(q, PerturbMode::Save50, seed, w);
    std::size_t pos = 0;
    for (const auto& h : s.hints) {
      auto it = std::find(q.hints.begin() + static_cast<std::ptrdiff_t>(pos), q.hints.end(), h);
      ASSERT_NE(it, q.hints.end());
      pos = static_cast<std::size_t>(it - q.hints.begin()) + 1;
    }
  }
  TextQuery one = q;
  one.hints.resize(1);
  EXPECT_THROW(perturb_hints(one, PerturbMode::Save75, 0, w), std::invalid_argument);
  EXPECT_EQ(perturb_hints(one, PerturbMode::SwapOne, 0, w).hints.size(), 1u);
}
