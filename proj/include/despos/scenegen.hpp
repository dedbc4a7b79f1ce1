#pragma once

// Procedural synthetic urban world: instances, overlapping submaps, and
// templated pose descriptions.

#include "despos/errors.hpp"

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace despos {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

/// A pre-segmented object: its points plus per-point color and intensity.
struct PointInstance {
  Eigen::MatrixX3d points;   // meters
  Eigen::MatrixX3d colors;   // RGB in [0,1]
  Eigen::VectorXd intensities;
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  double density = 0.0;  // points per cubic meter of the bounding box
  std::string class_name;
  std::string color_name;

  friend bool operator==(const PointInstance& a, const PointInstance& b);
};

struct Submap {
  int id = 0;
  Vec2 center;
  double side = 30.0;
  std::vector<PointInstance> instances;
  /// Index of each instance in World::instances.
  std::vector<int> instance_ids;

  bool contains(const Eigen::Vector3d& p) const;
  friend bool operator==(const Submap&, const Submap&) = default;
};

enum class Shape { Box, Cylinder, Canopy, Plate };

struct ClassSpec {
  std::string name;
  double half_x = 1.0;
  double half_y = 1.0;
  double height = 1.0;
  Shape shape = Shape::Box;
  double intensity = 0.5;
};

struct ColorSpec {
  std::string name;
  std::array<double, 3> rgb{0.5, 0.5, 0.5};
};

struct Palette {
  std::vector<ClassSpec> classes;
  std::vector<ColorSpec> colors;
};

/// Eight object classes and eight colors with distinct geometry and RGB.
Palette default_palette();

struct World {
  std::uint64_t seed = 0;
  Vec2 extent;
  std::vector<PointInstance> instances;
  std::vector<Submap> submaps;

  friend bool operator==(const World&, const World&) = default;
};

enum class Relation { North, South, East, West, OnTop };

std::string_view to_string(Relation r);
std::optional<Relation> parse_relation(std::string_view word);

struct Hint {
  Relation relation = Relation::North;
  std::string color;
  std::string class_name;
  friend bool operator==(const Hint&, const Hint&) = default;
};

/// "The pose is <rel> of a <color> <class>."
std::string render_hint(const Hint& h);
/// Inverse of render_hint; nullopt if the sentence is off-grammar.
std::optional<Hint> parse_hint(std::string_view sentence);

struct TextQuery {
  Vec2 pose_gt;
  std::vector<std::string> hints;
  int positive_submap_id = 0;
  /// "train" or "test"; not part of the retrieval contract.
  std::string split = "train";
  friend bool operator==(const TextQuery&, const TextQuery&) = default;
};

inline constexpr double kSubmapSide = 30.0;
inline constexpr double kSubmapStride = 10.0;
inline constexpr double kOnTopRadius = 1.0;
inline constexpr double kDescribeRadius = 30.0;
inline constexpr double kWorldHeight = 10.0;

/// Seeded world with `instance_count` instances and the default 30 m / 10 m
/// submap grid. Throws SizingError.
World generate_world(std::uint64_t seed, Vec2 extent, int instance_count, const Palette& palette);

/// Square windows with origins on the stride grid, fully inside the extent.
/// Ids are row-major: id = iy * nx + ix.
std::vector<Submap> partition_submaps(const World& world, double side = kSubmapSide,
                                      double stride = kSubmapStride);

/// Compass sector of `pose` as seen from `centroid`; OnTop inside 1 m.
Relation relation_of(Vec2 pose, const Eigen::Vector3d& centroid);

/// Nearest submap center, ties to the lower id.
int nearest_submap(const std::vector<Submap>& submaps, Vec2 pose);

/// Hints about the `num_hints` nearest instances (within 30 m), nearest first.
/// `rng_seed` is accepted for interface symmetry; the output is a pure
/// function of world and pose.
TextQuery describe_pose(const World& world, Vec2 pose, int num_hints, std::uint64_t rng_seed);

enum class PerturbMode { Full, Save75, Save50, SwapOne };
std::string_view to_string(PerturbMode m);
std::optional<PerturbMode> parse_perturb_mode(std::string_view s);

TextQuery perturb_hints(const TextQuery& query, PerturbMode mode, std::uint64_t rng_seed,
                        const World& world);

/// Samples poses uniformly over the region spanned by submap centers and
/// describes each one. Poses with too few nearby instances are redrawn.
std::vector<TextQuery> generate_queries(const World& world, int count, int num_hints, std::uint64_t seed,
                                        const std::string& split);

}  // namespace despos
