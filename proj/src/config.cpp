#include "despos/config.hpp"

#include "despos/errors.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

namespace despos {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const ConfigEntry& e, const std::string& source, const char* kind) {
  T out{};
  const char* first = e.value.data();
  const char* last = first + e.value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) {
    throw ParseError(source, static_cast<std::size_t>(e.line),
                     "key '" + e.key + "' expects " + kind + ", got '" + e.value + "'");
  }
  return out;
}

}  // namespace

std::vector<ConfigEntry> parse_key_values(const std::string& text, const std::string& source) {
  std::vector<ConfigEntry> out;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    if (hash != std::string::npos) raw.resize(hash);
    const std::string body = trim(raw);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ParseError(source, line, "expected 'key = value'");
    ConfigEntry e{trim(body.substr(0, eq)), trim(body.substr(eq + 1)), line};
    if (e.key.empty()) throw ParseError(source, line, "empty key");
    out.push_back(std::move(e));
  }
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int config_int(const ConfigEntry& e, const std::string& source) { return parse_number<int>(e, source, "an integer"); }

double config_double(const ConfigEntry& e, const std::string& source) {
  return parse_number<double>(e, source, "a number");
}

std::uint64_t config_u64(const ConfigEntry& e, const std::string& source) {
  return parse_number<std::uint64_t>(e, source, "a non-negative integer");
}

std::vector<ConfigEntry> apply_gen_params(const std::vector<ConfigEntry>& entries, GenParams& p,
                                          const std::string& source) {
  std::vector<ConfigEntry> rest;
  for (const ConfigEntry& e : entries) {
    if (e.key == "seed") p.seed = config_u64(e, source);
    else if (e.key == "extent_x") p.extent.x = config_double(e, source);
    else if (e.key == "extent_y") p.extent.y = config_double(e, source);
    else if (e.key == "instances") p.instance_count = config_int(e, source);
    else if (e.key == "queries") p.query_count = config_int(e, source);
    else if (e.key == "test_queries") p.test_query_count = config_int(e, source);
    else if (e.key == "hints") p.num_hints = config_int(e, source);
    else if (e.key == "submap_side") p.submap_side = config_double(e, source);
    else if (e.key == "submap_stride") p.submap_stride = config_double(e, source);
    else rest.push_back(e);
  }
  return rest;
}

}  // namespace despos
