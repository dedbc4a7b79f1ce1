#pragma once

// Small models and hand-built scenes shared by the unit tests.

#include "despos/fine_localizer.hpp"
#include "despos/pc_encoder.hpp"
#include "despos/scenegen.hpp"
#include "despos/text_encoder.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace despos::testing {

inline PcEncoderConfig tiny_pc() {
  PcEncoderConfig c;
  c.point_hidden = 6;
  c.point_out = 6;
  c.aggregate = 5;
  c.color_dim = 3;
  c.position_dim = 4;
  c.density_dim = 2;
  c.d_model = 6;
  c.d_h = 4;
  c.d_k = 3;
  c.stride = 2;
  c.out_dim = 8;
  return c;
}

inline TextEncoderConfig tiny_text() {
  TextEncoderConfig c;
  c.width = 8;
  c.heads = 2;
  c.ffn = 8;
  c.backbone_layers = 1;
  c.prior_layers = 1;
  c.prior_dim = 6;
  c.align_width = 6;
  c.align_hidden = 8;
  c.out_dim = 8;
  return c;
}

inline FineConfig tiny_fine() {
  FineConfig c;
  c.width = 6;
  c.d_k = 3;
  c.depth = 3;
  c.heads = 2;
  c.offset_hidden = 5;
  return c;
}

/// Instance with `n` seeded points scattered around `center`.
inline PointInstance make_instance(Eigen::Vector3d center, int n, std::uint64_t seed,
                                   const std::string& cls = "pole", const std::string& color = "gray") {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  PointInstance p;
  p.points.resize(n, 3);
  p.colors.resize(n, 3);
  p.intensities.resize(n);
  for (int i = 0; i < n; ++i) {
    p.points.row(i) << center.x() + u(rng), center.y() + u(rng), center.z() + 0.5 * u(rng);
    p.colors.row(i) << 0.5 + 0.4 * u(rng), 0.5 + 0.4 * u(rng), 0.5 + 0.4 * u(rng);
    p.intensities(i) = 0.5 + 0.4 * u(rng);
  }
  p.centroid = p.points.colwise().mean().transpose();
  p.density = 1.0 + 0.1 * n;
  p.class_name = cls;
  p.color_name = color;
  return p;
}

/// Submap centered at `center` with the given instance offsets.
inline Submap make_submap(Vec2 center, const std::vector<Eigen::Vector2d>& offsets, int points, std::uint64_t seed,
                          int id = 0) {
  Submap s;
  s.id = id;
  s.center = center;
  s.side = kSubmapSide;
  for (std::size_t i = 0; i < offsets.size(); ++i) {
    s.instances.push_back(make_instance({center.x + offsets[i].x(), center.y + offsets[i].y(), 1.0 + 0.3 * i},
                                        points, seed + i));
  }
  return s;
}

inline Submap translated(const Submap& s, double dx, double dy) {
  Submap t = s;
  t.center.x += dx;
  t.center.y += dy;
  for (PointInstance& p : t.instances) {
    p.points.col(0).array() += dx;
    p.points.col(1).array() += dy;
    p.centroid.x() += dx;
    p.centroid.y() += dy;
  }
  return t;
}

inline Mat random_mat(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m(i) = n(rng);
  return m;
}

}  // namespace despos::testing
