#include "despos/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

namespace despos {

bool operator==(const PointInstance& a, const PointInstance& b) {
  auto same = [](const auto& x, const auto& y) {
    return x.rows() == y.rows() && x.cols() == y.cols() && x == y;
  };
  return same(a.points, b.points) && same(a.colors, b.colors) && same(a.intensities, b.intensities) &&
         a.centroid == b.centroid && a.density == b.density && a.class_name == b.class_name &&
         a.color_name == b.color_name;
}

bool Submap::contains(const Eigen::Vector3d& p) const {
  const double h = side / 2.0;
  return p.x() >= center.x - h && p.x() <= center.x + h && p.y() >= center.y - h && p.y() <= center.y + h;
}

Palette default_palette() {
  Palette p;
  p.classes = {
      {"building", 6.0, 5.0, 9.0, Shape::Box, 0.35},
      {"garage", 3.0, 2.5, 3.0, Shape::Box, 0.55},
      {"wall", 5.0, 0.3, 3.0, Shape::Box, 0.25},
      {"fence", 4.0, 0.1, 1.2, Shape::Box, 0.7},
      {"pole", 0.15, 0.15, 6.0, Shape::Cylinder, 0.85},
      {"tree", 2.5, 2.5, 7.0, Shape::Canopy, 0.15},
      {"car", 2.2, 0.9, 1.5, Shape::Box, 0.95},
      {"sign", 0.5, 0.05, 2.8, Shape::Plate, 0.6},
  };
  p.colors = {
      {"black", {0.08, 0.08, 0.08}}, {"gray", {0.5, 0.5, 0.5}},   {"white", {0.92, 0.92, 0.92}},
      {"red", {0.8, 0.15, 0.12}},    {"green", {0.2, 0.6, 0.2}},  {"blue", {0.15, 0.3, 0.8}},
      {"beige", {0.85, 0.78, 0.6}},  {"brown", {0.45, 0.3, 0.15}},
  };
  return p;
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

// A point on the class surface in the object frame (origin at the footprint center, z up).
Eigen::Vector3d sample_surface(const ClassSpec& spec, Rng& rng) {
  const double hx = spec.half_x, hy = spec.half_y, h = spec.height;
  switch (spec.shape) {
    case Shape::Box: {
      // Four sides and the roof, chosen by area.
      const double ax = 2.0 * hy * h, ay = 2.0 * hx * h, roof = 4.0 * hx * hy;
      double pick = uniform(rng, 0.0, 2.0 * ax + 2.0 * ay + roof);
      double u = uniform(rng, -1.0, 1.0), v = uniform(rng, 0.0, 1.0);
      if (pick < 2.0 * ax) return {pick < ax ? hx : -hx, u * hy, v * h};
      pick -= 2.0 * ax;
      if (pick < 2.0 * ay) return {u * hx, pick < ay ? hy : -hy, v * h};
      return {u * hx, uniform(rng, -1.0, 1.0) * hy, h};
    }
    case Shape::Cylinder: {
      double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      return {hx * std::cos(a), hy * std::sin(a), uniform(rng, 0.0, h)};
    }
    case Shape::Canopy: {
      double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
      if (uniform(rng, 0.0, 1.0) < 0.2) {
        return {0.2 * std::cos(a), 0.2 * std::sin(a), uniform(rng, 0.0, 0.5 * h)};
      }
      double cz = uniform(rng, -1.0, 1.0), r = std::sqrt(1.0 - cz * cz);
      double radius = std::min(hx, h / 3.0);
      return {hx * r * std::cos(a), hy * r * std::sin(a), 0.7 * h + radius * cz};
    }
    case Shape::Plate: {
      if (uniform(rng, 0.0, 1.0) < 0.3) {
        double a = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        return {0.04 * std::cos(a), 0.04 * std::sin(a), uniform(rng, 0.0, h - 0.8)};
      }
      return {uniform(rng, -hx, hx), uniform(rng, -hy, hy), uniform(rng, h - 0.8, h)};
    }
  }
  return Eigen::Vector3d::Zero();
}

PointInstance make_instance(const ClassSpec& cls, const ColorSpec& color, Vec2 where, Rng& rng) {
  const int n = std::uniform_int_distribution<int>(32, 256)(rng);
  const double yaw = uniform(rng, 0.0, std::numbers::pi);
  const double c = std::cos(yaw), s = std::sin(yaw);
  std::normal_distribution<double> jitter(0.0, 0.03), tint(0.0, 0.04), glow(0.0, 0.05);

  PointInstance inst;
  inst.class_name = cls.name;
  inst.color_name = color.name;
  inst.points.resize(n, 3);
  inst.colors.resize(n, 3);
  inst.intensities.resize(n);
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d q = sample_surface(cls, rng);
    double x = c * q.x() - s * q.y() + jitter(rng);
    double y = s * q.x() + c * q.y() + jitter(rng);
    double z = std::clamp(q.z() + jitter(rng), 0.0, kWorldHeight);
    inst.points.row(i) << x, y, z;
    for (int k = 0; k < 3; ++k) inst.colors(i, k) = std::clamp(color.rgb[k] + tint(rng), 0.0, 1.0);
    inst.intensities(i) = std::clamp(cls.intensity + glow(rng), 0.0, 1.0);
  }
  // Shift in the plane so the mean lands exactly on the drawn location.
  Eigen::RowVector3d mean = inst.points.colwise().mean();
  inst.points.col(0).array() += where.x - mean(0);
  inst.points.col(1).array() += where.y - mean(1);
  inst.centroid = inst.points.colwise().mean().transpose();

  Eigen::RowVector3d lo = inst.points.colwise().minCoeff(), hi = inst.points.colwise().maxCoeff();
  double volume = 1.0;
  for (int k = 0; k < 3; ++k) volume *= std::max(hi(k) - lo(k), 0.5);
  inst.density = static_cast<double>(n) / volume;
  return inst;
}

}  // namespace

World generate_world(std::uint64_t seed, Vec2 extent, int instance_count, const Palette& palette) {
  if (extent.x < kSubmapSide || extent.y < kSubmapSide) {
    std::ostringstream msg;
    msg << "world extent " << extent.x << " x " << extent.y << " m is smaller than one " << kSubmapSide
        << " m submap";
    throw SizingError(msg.str());
  }
  if (instance_count < 1) throw SizingError("instance_count must be at least 1");
  if (palette.classes.empty() || palette.colors.empty()) throw SizingError("palette must not be empty");

  Rng rng(seed);
  World world;
  world.seed = seed;
  world.extent = extent;
  world.instances.reserve(static_cast<std::size_t>(instance_count));
  std::uniform_int_distribution<std::size_t> pick_class(0, palette.classes.size() - 1);
  std::uniform_int_distribution<std::size_t> pick_color(0, palette.colors.size() - 1);
  for (int i = 0; i < instance_count; ++i) {
    Vec2 where{uniform(rng, 0.0, extent.x), uniform(rng, 0.0, extent.y)};
    const ClassSpec& cls = palette.classes[pick_class(rng)];
    const ColorSpec& color = palette.colors[pick_color(rng)];
    world.instances.push_back(make_instance(cls, color, where, rng));
  }
  world.submaps = partition_submaps(world);
  return world;
}

std::vector<Submap> partition_submaps(const World& world, double side, double stride) {
  if (!(stride > 0.0)) throw SizingError("submap stride must be positive");
  if (side > std::min(world.extent.x, world.extent.y)) {
    throw SizingError("submap side exceeds the world extent");
  }
  const int nx = static_cast<int>(std::floor((world.extent.x - side) / stride + 1e-9)) + 1;
  const int ny = static_cast<int>(std::floor((world.extent.y - side) / stride + 1e-9)) + 1;
  std::vector<Submap> out;
  out.reserve(static_cast<std::size_t>(nx * ny));
  for (int iy = 0; iy < ny; ++iy) {
    for (int ix = 0; ix < nx; ++ix) {
      Submap m;
      m.id = iy * nx + ix;
      m.side = side;
      m.center = {ix * stride + side / 2.0, iy * stride + side / 2.0};
      for (std::size_t k = 0; k < world.instances.size(); ++k) {
        if (m.contains(world.instances[k].centroid)) {
          m.instances.push_back(world.instances[k]);
          m.instance_ids.push_back(static_cast<int>(k));
        }
      }
      out.push_back(std::move(m));
    }
  }
  return out;
}

std::string_view to_string(Relation r) {
  switch (r) {
    case Relation::North: return "north";
    case Relation::South: return "south";
    case Relation::East: return "east";
    case Relation::West: return "west";
    case Relation::OnTop: return "on-top";
  }
  return "?";
}

std::optional<Relation> parse_relation(std::string_view word) {
  for (Relation r : {Relation::North, Relation::South, Relation::East, Relation::West, Relation::OnTop}) {
    if (to_string(r) == word) return r;
  }
  return std::nullopt;
}

std::string render_hint(const Hint& h) {
  std::string s = "The pose is ";
  s += to_string(h.relation);
  s += " of a ";
  s += h.color;
  s += ' ';
  s += h.class_name;
  s += '.';
  return s;
}

std::optional<Hint> parse_hint(std::string_view sentence) {
  std::istringstream in{std::string(sentence)};
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  if (words.size() != 8) return std::nullopt;
  if (words[0] != "The" || words[1] != "pose" || words[2] != "is" || words[4] != "of" || words[5] != "a") {
    return std::nullopt;
  }
  if (words[7].size() < 2 || words[7].back() != '.') return std::nullopt;
  auto rel = parse_relation(words[3]);
  if (!rel) return std::nullopt;
  return Hint{*rel, words[6], words[7].substr(0, words[7].size() - 1)};
}

Relation relation_of(Vec2 pose, const Eigen::Vector3d& centroid) {
  const double dx = pose.x - centroid.x(), dy = pose.y - centroid.y();
  if (std::hypot(dx, dy) < kOnTopRadius) return Relation::OnTop;
  const double deg = std::atan2(dy, dx) * 180.0 / std::numbers::pi;
  if (deg >= -45.0 && deg < 45.0) return Relation::East;
  if (deg >= 45.0 && deg < 135.0) return Relation::North;
  if (deg >= -135.0 && deg < -45.0) return Relation::South;
  return Relation::West;
}

int nearest_submap(const std::vector<Submap>& submaps, Vec2 pose) {
  if (submaps.empty()) throw DataError("no submaps to choose from");
  int best = -1;
  double best_d = 0.0;
  for (const Submap& m : submaps) {
    double d = std::hypot(m.center.x - pose.x, m.center.y - pose.y);
    if (best < 0 || d < best_d || (d == best_d && m.id < best)) {
      best = m.id;
      best_d = d;
    }
  }
  return best;
}

namespace {

std::vector<std::size_t> instances_by_distance(const World& world, Vec2 pose, double radius) {
  std::vector<std::pair<double, std::size_t>> near;
  for (std::size_t k = 0; k < world.instances.size(); ++k) {
    const auto& c = world.instances[k].centroid;
    double d = std::hypot(c.x() - pose.x, c.y() - pose.y);
    if (d <= radius) near.emplace_back(d, k);
  }
  std::sort(near.begin(), near.end());
  std::vector<std::size_t> out;
  out.reserve(near.size());
  for (const auto& [d, k] : near) out.push_back(k);
  return out;
}

Hint hint_for(const PointInstance& inst, Vec2 pose) {
  return Hint{relation_of(pose, inst.centroid), inst.color_name, inst.class_name};
}

}  // namespace

TextQuery describe_pose(const World& world, Vec2 pose, int num_hints, std::uint64_t /*rng_seed*/) {
  if (num_hints < 1) throw std::invalid_argument("num_hints must be at least 1");
  std::vector<std::size_t> near = instances_by_distance(world, pose, kDescribeRadius);
  if (near.size() < static_cast<std::size_t>(num_hints)) {
    std::ostringstream msg;
    msg << "pose (" << pose.x << ", " << pose.y << ") has " << near.size() << " instances within "
        << kDescribeRadius << " m but " << num_hints << " hints were requested (short by "
        << num_hints - static_cast<int>(near.size()) << ")";
    throw DataError(msg.str());
  }
  TextQuery q;
  q.pose_gt = pose;
  for (int i = 0; i < num_hints; ++i) q.hints.push_back(render_hint(hint_for(world.instances[near[i]], pose)));
  q.positive_submap_id = world.submaps.empty() ? nearest_submap(partition_submaps(world), pose)
                                               : nearest_submap(world.submaps, pose);
  return q;
}

std::string_view to_string(PerturbMode m) {
  switch (m) {
    case PerturbMode::Full: return "full";
    case PerturbMode::Save75: return "save75";
    case PerturbMode::Save50: return "save50";
    case PerturbMode::SwapOne: return "swap_one";
  }
  return "?";
}

std::optional<PerturbMode> parse_perturb_mode(std::string_view s) {
  for (PerturbMode m : {PerturbMode::Full, PerturbMode::Save75, PerturbMode::Save50, PerturbMode::SwapOne}) {
    if (to_string(m) == s) return m;
  }
  return std::nullopt;
}

TextQuery perturb_hints(const TextQuery& query, PerturbMode mode, std::uint64_t rng_seed, const World& world) {
  Rng rng(rng_seed);
  const std::size_t h = query.hints.size();
  TextQuery out = query;
  switch (mode) {
    case PerturbMode::Full:
      return out;
    case PerturbMode::Save75:
    case PerturbMode::Save50: {
      if (h < 2) throw std::invalid_argument("sentence-dropping perturbation needs at least 2 hints");
      const double frac = mode == PerturbMode::Save75 ? 0.75 : 0.5;
      const auto keep = static_cast<std::size_t>(std::ceil(frac * static_cast<double>(h) - 1e-12));
      std::vector<std::size_t> idx(h);
      for (std::size_t i = 0; i < h; ++i) idx[i] = i;
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(keep);
      std::sort(idx.begin(), idx.end());
      out.hints.clear();
      for (std::size_t i : idx) out.hints.push_back(query.hints[i]);
      return out;
    }
    case PerturbMode::SwapOne: {
      if (h < 1) throw std::invalid_argument("swap_one needs at least 1 hint");
      const std::size_t victim = std::uniform_int_distribution<std::size_t>(0, h - 1)(rng);
      std::vector<std::size_t> far;
      for (std::size_t k = 0; k < world.instances.size(); ++k) {
        const auto& c = world.instances[k].centroid;
        if (std::hypot(c.x() - query.pose_gt.x, c.y() - query.pose_gt.y) > kDescribeRadius) far.push_back(k);
      }
      if (far.empty()) {
        // Small worlds: fall back to anything that is not among the nearest hints.
        std::vector<std::size_t> near = instances_by_distance(world, query.pose_gt, 1e300);
        far.assign(near.begin() + static_cast<std::ptrdiff_t>(std::min(h, near.size())), near.end());
      }
      std::shuffle(far.begin(), far.end(), rng);
      for (std::size_t k : far) {
        std::string s = render_hint(hint_for(world.instances[k], query.pose_gt));
        if (std::find(query.hints.begin(), query.hints.end(), s) == query.hints.end()) {
          out.hints[victim] = std::move(s);
          return out;
        }
      }
      throw DataError("swap_one: no distant instance yields a sentence distinct from the query");
    }
  }
  return out;
}

std::vector<TextQuery> generate_queries(const World& world, int count, int num_hints, std::uint64_t seed,
                                        const std::string& split) {
  if (world.submaps.empty()) throw DataError("world has no submaps");
  double lo_x = world.submaps.front().center.x, hi_x = lo_x;
  double lo_y = world.submaps.front().center.y, hi_y = lo_y;
  for (const Submap& m : world.submaps) {
    lo_x = std::min(lo_x, m.center.x);
    hi_x = std::max(hi_x, m.center.x);
    lo_y = std::min(lo_y, m.center.y);
    hi_y = std::max(hi_y, m.center.y);
  }
  Rng rng(seed);
  std::vector<TextQuery> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  int misses = 0;
  while (static_cast<int>(out.size()) < count) {
    Vec2 pose{uniform(rng, lo_x, hi_x), uniform(rng, lo_y, hi_y)};
    if (instances_by_distance(world, pose, kDescribeRadius).size() < static_cast<std::size_t>(num_hints)) {
      if (++misses > 100 * std::max(count, 1)) {
        throw DataError("world is too sparse to describe poses with " + std::to_string(num_hints) + " hints");
      }
      continue;
    }
    TextQuery q = describe_pose(world, pose, num_hints, seed);
    q.split = split;
    out.push_back(std::move(q));
  }
  return out;
}

}  // namespace despos
