#include "despos/dataset.hpp"

#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <sstream>

namespace despos {

using nlohmann::json;
namespace fs = std::filesystem;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.16e", v);
  return buf;
}

Dataset generate_dataset(const GenParams& params, const Palette& palette) {
  Dataset d;
  d.params = params;
  d.world = generate_world(params.seed, params.extent, params.instance_count, palette);
  if (params.submap_side != kSubmapSide || params.submap_stride != kSubmapStride) {
    d.world.submaps = partition_submaps(d.world, params.submap_side, params.submap_stride);
  }
  d.queries = generate_queries(d.world, params.query_count, params.num_hints, params.seed + 1, "train");
  auto test = generate_queries(d.world, params.test_query_count, params.num_hints, params.seed + 2, "test");
  d.queries.insert(d.queries.end(), test.begin(), test.end());
  return d;
}

namespace {

void write_row(std::ostream& out, const double* v, int n) {
  out << '[';
  for (int i = 0; i < n; ++i) out << (i ? "," : "") << format_double(v[i]);
  out << ']';
}

std::string quoted(const std::string& s) { return json(s).dump(); }

void write_instance(std::ostream& out, const PointInstance& inst) {
  out << "{\"class\":" << quoted(inst.class_name) << ",\"color\":" << quoted(inst.color_name)
      << ",\"centroid\":";
  write_row(out, inst.centroid.data(), 3);
  out << ",\"density\":" << format_double(inst.density) << ",\"points\":[";
  for (Eigen::Index i = 0; i < inst.points.rows(); ++i) {
    double p[3] = {inst.points(i, 0), inst.points(i, 1), inst.points(i, 2)};
    if (i) out << ',';
    write_row(out, p, 3);
  }
  out << "],\"colors\":[";
  for (Eigen::Index i = 0; i < inst.colors.rows(); ++i) {
    double c[3] = {inst.colors(i, 0), inst.colors(i, 1), inst.colors(i, 2)};
    if (i) out << ',';
    write_row(out, c, 3);
  }
  out << "],\"intensities\":";
  write_row(out, inst.intensities.data(), static_cast<int>(inst.intensities.size()));
  out << '}';
}

std::string query_line(const TextQuery& q) {
  std::ostringstream out;
  out << "{\"pose\":[" << format_double(q.pose_gt.x) << ',' << format_double(q.pose_gt.y) << "],\"hints\":[";
  for (std::size_t i = 0; i < q.hints.size(); ++i) out << (i ? "," : "") << quoted(q.hints[i]);
  out << "],\"positive_submap_id\":" << q.positive_submap_id << ",\"split\":" << quoted(q.split) << '}';
  return out.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << content;
  if (!out) throw DataError("failed writing " + path.string());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::size_t line_of(const std::string& text, std::size_t byte) {
  std::size_t line = 1;
  for (std::size_t i = 0; i < std::min(byte, text.size()); ++i) line += text[i] == '\n';
  return line;
}

json parse_json(const fs::path& path, const std::string& text, std::size_t record) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t where = record ? record : line_of(text, e.byte);
    throw ParseError(path.filename().string(), where, e.what());
  }
}

Eigen::MatrixX3d read_rows3(const json& arr) {
  Eigen::MatrixX3d m(static_cast<Eigen::Index>(arr.size()), 3);
  for (std::size_t i = 0; i < arr.size(); ++i) {
    if (arr[i].size() != 3) throw std::invalid_argument("expected a 3-vector");
    for (int k = 0; k < 3; ++k) m(static_cast<Eigen::Index>(i), k) = arr[i][k].get<double>();
  }
  return m;
}

PointInstance read_instance(const json& j) {
  PointInstance inst;
  inst.class_name = j.at("class").get<std::string>();
  inst.color_name = j.at("color").get<std::string>();
  const json& c = j.at("centroid");
  if (c.size() != 3) throw std::invalid_argument("centroid must have 3 entries");
  inst.centroid = {c[0].get<double>(), c[1].get<double>(), c[2].get<double>()};
  inst.density = j.at("density").get<double>();
  inst.points = read_rows3(j.at("points"));
  inst.colors = read_rows3(j.at("colors"));
  const json& in = j.at("intensities");
  inst.intensities.resize(static_cast<Eigen::Index>(in.size()));
  for (std::size_t i = 0; i < in.size(); ++i) inst.intensities(static_cast<Eigen::Index>(i)) = in[i].get<double>();
  if (inst.points.rows() < 1) throw std::invalid_argument("instance has no points");
  if (inst.colors.rows() != inst.points.rows() || inst.intensities.size() != inst.points.rows()) {
    throw std::invalid_argument("per-point arrays disagree in length");
  }
  return inst;
}

}  // namespace

void export_dataset(const Dataset& data, const fs::path& dir) {
  fs::create_directories(dir);
  const World& w = data.world;

  std::ostringstream world;
  world << "{\"seed\":" << w.seed << ",\"extent\":[" << format_double(w.extent.x) << ','
        << format_double(w.extent.y) << "],\n\"instances\":[\n";
  for (std::size_t i = 0; i < w.instances.size(); ++i) {
    write_instance(world, w.instances[i]);
    world << (i + 1 < w.instances.size() ? ",\n" : "\n");
  }
  world << "],\n\"submaps\":[\n";
  for (std::size_t i = 0; i < w.submaps.size(); ++i) {
    const Submap& m = w.submaps[i];
    world << "{\"id\":" << m.id << ",\"center\":[" << format_double(m.center.x) << ','
          << format_double(m.center.y) << "],\"side\":" << format_double(m.side) << ",\"instances\":[";
    for (std::size_t k = 0; k < m.instance_ids.size(); ++k) world << (k ? "," : "") << m.instance_ids[k];
    world << "]}" << (i + 1 < w.submaps.size() ? ",\n" : "\n");
  }
  world << "]}\n";
  write_file(dir / "world.json", world.str());

  std::string queries;
  for (const TextQuery& q : data.queries) queries += query_line(q) + "\n";
  write_file(dir / "queries.jsonl", queries);

  const GenParams& p = data.params;
  std::ostringstream manifest;
  manifest << "{\n  \"format_version\": " << kDatasetFormatVersion << ",\n  \"seed\": " << p.seed
           << ",\n  \"extent\": [" << format_double(p.extent.x) << ", " << format_double(p.extent.y)
           << "],\n  \"instances\": " << p.instance_count << ",\n  \"queries\": " << p.query_count
           << ",\n  \"test_queries\": " << p.test_query_count << ",\n  \"num_hints\": " << p.num_hints
           << ",\n  \"submap_side\": " << format_double(p.submap_side)
           << ",\n  \"submap_stride\": " << format_double(p.submap_stride) << "\n}\n";
  write_file(dir / "manifest.json", manifest.str());
}

Dataset load_dataset(const fs::path& dir) {
  Dataset d;
  {
    const fs::path path = dir / "manifest.json";
    json m = parse_json(path, read_file(path), 0);
    try {
      if (m.at("format_version").get<int>() != kDatasetFormatVersion) {
        throw std::invalid_argument("unsupported format_version");
      }
      d.params.seed = m.at("seed").get<std::uint64_t>();
      d.params.extent = {m.at("extent").at(0).get<double>(), m.at("extent").at(1).get<double>()};
      d.params.instance_count = m.at("instances").get<int>();
      d.params.query_count = m.at("queries").get<int>();
      d.params.test_query_count = m.value("test_queries", 0);
      d.params.num_hints = m.at("num_hints").get<int>();
      d.params.submap_side = m.value("submap_side", kSubmapSide);
      d.params.submap_stride = m.value("submap_stride", kSubmapStride);
    } catch (const std::exception& e) {
      throw ParseError("manifest.json", 1, e.what());
    }
  }
  {
    const fs::path path = dir / "world.json";
    const std::string text = read_file(path);
    json w = parse_json(path, text, 0);
    World& world = d.world;
    std::size_t record = 0;
    try {
      world.seed = w.at("seed").get<std::uint64_t>();
      world.extent = {w.at("extent").at(0).get<double>(), w.at("extent").at(1).get<double>()};
      for (const json& inst : w.at("instances")) {
        ++record;
        world.instances.push_back(read_instance(inst));
      }
      record = 0;
      for (const json& s : w.at("submaps")) {
        ++record;
        Submap m;
        m.id = s.at("id").get<int>();
        m.center = {s.at("center").at(0).get<double>(), s.at("center").at(1).get<double>()};
        m.side = s.at("side").get<double>();
        for (const json& k : s.at("instances")) {
          int idx = k.get<int>();
          if (idx < 0 || static_cast<std::size_t>(idx) >= world.instances.size()) {
            throw std::out_of_range("submap references unknown instance " + std::to_string(idx));
          }
          m.instance_ids.push_back(idx);
          m.instances.push_back(world.instances[static_cast<std::size_t>(idx)]);
        }
        world.submaps.push_back(std::move(m));
      }
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError("world.json", record, e.what());
    }
  }
  {
    const fs::path path = dir / "queries.jsonl";
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::string line;
    std::size_t lineno = 0;
    bool last_had_newline = true;
    std::string all = read_file(path);
    if (!all.empty() && all.back() != '\n') last_had_newline = false;
    std::istringstream lines(all);
    while (std::getline(lines, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j = parse_json(path, line, lineno);
      try {
        TextQuery q;
        q.pose_gt = {j.at("pose").at(0).get<double>(), j.at("pose").at(1).get<double>()};
        q.hints = j.at("hints").get<std::vector<std::string>>();
        q.positive_submap_id = j.at("positive_submap_id").get<int>();
        q.split = j.value("split", std::string("train"));
        d.queries.push_back(std::move(q));
      } catch (const std::exception& e) {
        throw ParseError("queries.jsonl", lineno, e.what());
      }
    }
    if (!last_had_newline) throw ParseError("queries.jsonl", lineno, "truncated final record");
  }
  return d;
}

std::vector<TextQuery> select_split(const std::vector<TextQuery>& queries, const std::string& split) {
  std::vector<TextQuery> out;
  for (const TextQuery& q : queries) {
    if (q.split == split) out.push_back(q);
  }
  return out.empty() ? queries : out;
}

}  // namespace despos
