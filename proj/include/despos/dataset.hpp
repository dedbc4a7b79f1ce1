#pragma once

// On-disk dataset directory: world.json, queries.jsonl, manifest.json.

#include "despos/scenegen.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace despos {

inline constexpr int kDatasetFormatVersion = 1;

struct GenParams {
  std::uint64_t seed = 0;
  Vec2 extent{60.0, 60.0};
  int instance_count = 40;
  int query_count = 0;
  int test_query_count = 0;
  int num_hints = 6;
  double submap_side = kSubmapSide;
  double submap_stride = kSubmapStride;
  friend bool operator==(const GenParams&, const GenParams&) = default;
};

struct Dataset {
  GenParams params;
  World world;
  std::vector<TextQuery> queries;
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// World plus train queries (seed + 1) and test queries (seed + 2).
Dataset generate_dataset(const GenParams& params, const Palette& palette = default_palette());

/// Creates `dir` if needed and writes the three files. Floats use 17
/// significant digits so a reload is bit-exact.
void export_dataset(const Dataset& data, const std::filesystem::path& dir);

/// Throws ParseError naming the file and line/record on malformed input.
Dataset load_dataset(const std::filesystem::path& dir);

/// Queries of one split; if no query carries that split, all queries.
std::vector<TextQuery> select_split(const std::vector<TextQuery>& queries, const std::string& split);

/// "%.16e" rendering used for every float in the dataset files.
std::string format_double(double v);

}  // namespace despos
