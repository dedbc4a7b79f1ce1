#pragma once

// Plain-text `key = value` files with `#` comments.

#include "despos/dataset.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace despos {

struct ConfigEntry {
  std::string key;
  std::string value;
  int line = 0;
};

/// Blank lines and comments are skipped; a line without '=' throws
/// ParseError. Duplicate keys are kept in order (last one wins when applied).
std::vector<ConfigEntry> parse_key_values(const std::string& text, const std::string& source = "<config>");
std::string read_text_file(const std::filesystem::path& path);

/// Strict conversions; throw ParseError naming `source` and the entry line.
int config_int(const ConfigEntry& e, const std::string& source);
double config_double(const ConfigEntry& e, const std::string& source);
std::uint64_t config_u64(const ConfigEntry& e, const std::string& source);

/// Generator keys: seed, extent_x, extent_y, instances, queries, test_queries,
/// hints, submap_side, submap_stride. Returns the entries it did not consume.
std::vector<ConfigEntry> apply_gen_params(const std::vector<ConfigEntry>& entries, GenParams& p,
                                          const std::string& source = "<config>");

}  // namespace despos
