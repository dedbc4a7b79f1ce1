#include "despos/model.hpp"

#include "despos/config.hpp"
#include "despos/dataset.hpp"
#include "despos/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>

namespace despos {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

std::string_view to_string(Phase p) {
  switch (p) {
    case Phase::Ste1: return "ste1";
    case Phase::Coarse: return "coarse";
    case Phase::Fine: return "fine";
  }
  return "?";
}

std::optional<Phase> parse_phase(std::string_view s) {
  if (s == "ste1") return Phase::Ste1;
  if (s == "coarse") return Phase::Coarse;
  if (s == "fine") return Phase::Fine;
  return std::nullopt;
}

TrainConfig default_config(Phase phase) {
  TrainConfig c;
  c.phase = phase;
  switch (phase) {
    case Phase::Ste1:
      c.batch_size = 32;
      c.learning_rate = 1e-3;
      c.epochs = 20;
      break;
    case Phase::Coarse:
      c.batch_size = 64;
      c.learning_rate = 5e-4;
      c.epochs = 20;
      break;
    case Phase::Fine:
      c.batch_size = 32;
      c.learning_rate = 3e-4;
      c.epochs = 35;
      break;
  }
  return c;
}

namespace {

// One table drives parsing and formatting so the two cannot drift apart.
struct Field {
  const char* key;
  std::function<void(TrainConfig&, const ConfigEntry&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

template <typename M>
Field int_field(const char* key, M member) {
  return {key, [member](TrainConfig& c, const ConfigEntry& e, const std::string& src) { member(c) = config_int(e, src); },
          [member](const TrainConfig& c) { return std::to_string(member(const_cast<TrainConfig&>(c))); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"phase",
                 [](TrainConfig& c, const ConfigEntry& e, const std::string& src) {
                   auto p = parse_phase(e.value);
                   if (!p) throw ParseError(src, e.line, "unknown phase '" + e.value + "'");
                   c.phase = *p;
                 },
                 [](const TrainConfig& c) { return std::string(to_string(c.phase)); }});
    f.push_back(int_field("batch_size", [](TrainConfig& c) -> int& { return c.batch_size; }));
    f.push_back({"learning_rate",
                 [](TrainConfig& c, const ConfigEntry& e, const std::string& src) { c.learning_rate = config_double(e, src); },
                 [](const TrainConfig& c) { return format_double(c.learning_rate); }});
    f.push_back(int_field("epochs", [](TrainConfig& c) -> int& { return c.epochs; }));
    f.push_back({"temperature",
                 [](TrainConfig& c, const ConfigEntry& e, const std::string& src) { c.temperature = config_double(e, src); },
                 [](const TrainConfig& c) { return format_double(c.temperature); }});
    f.push_back({"seed", [](TrainConfig& c, const ConfigEntry& e, const std::string& src) { c.seed = config_u64(e, src); },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }});
    f.push_back({"optimizer",
                 [](TrainConfig& c, const ConfigEntry& e, const std::string& src) {
                   if (e.value != "adam" && e.value != "sgd") {
                     throw ParseError(src, e.line, "optimizer must be adam or sgd");
                   }
                   c.optimizer = e.value;
                 },
                 [](const TrainConfig& c) { return c.optimizer; }});
    f.push_back({"momentum",
                 [](TrainConfig& c, const ConfigEntry& e, const std::string& src) { c.momentum = config_double(e, src); },
                 [](const TrainConfig& c) { return format_double(c.momentum); }});
    f.push_back(int_field("cra_depth", [](TrainConfig& c) -> int& { return c.model.fine.depth; }));
    f.push_back(int_field("pool_stride", [](TrainConfig& c) -> int& { return c.model.pc.stride; }));
    f.push_back(int_field("teacher_dim", [](TrainConfig& c) -> int& { return c.model.teacher_dim; }));
    f.push_back({"teacher_seed",
                 [](TrainConfig& c, const ConfigEntry& e, const std::string& src) { c.model.teacher_seed = config_u64(e, src); },
                 [](const TrainConfig& c) { return std::to_string(c.model.teacher_seed); }});
#define DESPOS_PC(name) f.push_back(int_field("pc." #name, [](TrainConfig& c) -> int& { return c.model.pc.name; }))
    DESPOS_PC(point_hidden);
    DESPOS_PC(point_out);
    DESPOS_PC(aggregate);
    DESPOS_PC(color_dim);
    DESPOS_PC(position_dim);
    DESPOS_PC(density_dim);
    DESPOS_PC(d_model);
    DESPOS_PC(d_h);
    DESPOS_PC(d_k);
    DESPOS_PC(out_dim);
#undef DESPOS_PC
#define DESPOS_TEXT(name) f.push_back(int_field("text." #name, [](TrainConfig& c) -> int& { return c.model.text.name; }))
    DESPOS_TEXT(width);
    DESPOS_TEXT(heads);
    DESPOS_TEXT(ffn);
    DESPOS_TEXT(backbone_layers);
    DESPOS_TEXT(prior_layers);
    DESPOS_TEXT(prior_dim);
    DESPOS_TEXT(align_width);
    DESPOS_TEXT(align_hidden);
    DESPOS_TEXT(out_dim);
    DESPOS_TEXT(max_tokens);
    DESPOS_TEXT(max_sentences);
#undef DESPOS_TEXT
#define DESPOS_FINE(name) f.push_back(int_field("fine." #name, [](TrainConfig& c) -> int& { return c.model.fine.name; }))
    DESPOS_FINE(width);
    DESPOS_FINE(d_k);
    DESPOS_FINE(heads);
    DESPOS_FINE(offset_hidden);
#undef DESPOS_FINE
    return f;
  }();
  return table;
}

void validate(const TrainConfig& c, const std::string& source) {
  auto fail = [&](const std::string& what) { throw ParseError(source, 0, what); };
  if (c.batch_size < 1) fail("batch_size must be >= 1");
  if (c.epochs < 1) fail("epochs must be >= 1");
  if (!(c.temperature > 0.0)) fail("temperature must be > 0");
  if (!(c.learning_rate > 0.0)) fail("learning_rate must be > 0");
  if (c.model.fine.depth < 2) fail("cra_depth must be >= 2");
  if (c.model.pc.stride < 1) fail("pool_stride must be >= 1");
  if (c.model.pc.out_dim != c.model.text.out_dim) fail("pc.out_dim and text.out_dim must match");
}

}  // namespace

TrainConfig parse_config(const std::string& text, TrainConfig base) {
  return parse_config_entries(parse_key_values(text), std::move(base));
}

TrainConfig parse_config_entries(const std::vector<ConfigEntry>& entries, TrainConfig base, const std::string& source) {
  for (const ConfigEntry& e : entries) {
    auto it = std::find_if(fields().begin(), fields().end(), [&](const Field& f) { return e.key == f.key; });
    if (it == fields().end()) throw ParseError(source, e.line, "unknown key '" + e.key + "'");
    it->set(base, e, source);
  }
  validate(base, source);
  return base;
}

TrainConfig load_config(const fs::path& path, TrainConfig base) {
  return parse_config_entries(parse_key_values(read_text_file(path), path.string()), std::move(base), path.string());
}

std::string format_config(const TrainConfig& c) {
  std::string out;
  for (const Field& f : fields()) out += std::string(f.key) + " = " + f.get(c) + "\n";
  return out;
}

Model Model::create(const ModelConfig& config, std::uint64_t seed, const Vocabulary& vocab) {
  Model m;
  m.config = config;
  m.seed = seed;
  m.vocab = vocab;
  m.pc = PcEncoder(config.pc, seed * 4 + 1);
  m.text = SteModel(config.text, vocab, seed * 4 + 2);
  m.fine = FineLocalizer(config.fine, config.text, config.pc, seed * 4 + 3);
  return m;
}

Model Model::create(const ModelConfig& config, std::uint64_t seed, const Palette& palette) {
  return create(config, seed, Vocabulary::from_palette(palette));
}

ParamList Model::params() {
  ParamList out;
  pc.collect(out);
  text.collect(out);
  fine.collect(out);
  return out;
}

ConstParamList Model::params() const {
  ParamList all = const_cast<Model*>(this)->params();
  return ConstParamList(all.begin(), all.end());
}

RandomTransformerTeacher Model::teacher() const {
  return RandomTransformerTeacher(vocab, config.teacher_dim, config.teacher_seed);
}

bool Checkpoint::has_phase(Phase p) const {
  return std::find(phases.begin(), phases.end(), std::string(to_string(p))) != phases.end();
}

Checkpoint init_checkpoint(const TrainConfig& config, const Palette& palette) {
  Checkpoint c;
  c.config = config;
  c.model = Model::create(config.model, config.seed, palette);
  return c;
}

std::string parameter_bytes(const ConstParamList& params) {
  std::string out;
  for (const Parameter* p : params) {
    for (Eigen::Index r = 0; r < p->value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p->value.cols(); ++c) {
        const float f = static_cast<float>(p->value(r, c));
        char buf[sizeof(float)];
        std::memcpy(buf, &f, sizeof(float));
        out.append(buf, sizeof(float));
      }
    }
  }
  return out;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  fs::create_directories(dir);
  const ConstParamList params = ckpt.model.params();
  json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["seed"] = ckpt.model.seed;
  json cfg = json::object();
  for (const ConfigEntry& e : parse_key_values(format_config(ckpt.config))) cfg[e.key] = e.value;
  // The model's own widths are authoritative; they may differ from the
  // config of the phase that last wrote this checkpoint.
  TrainConfig model_cfg = ckpt.config;
  model_cfg.model = ckpt.model.config;
  json mcfg = json::object();
  for (const ConfigEntry& e : parse_key_values(format_config(model_cfg))) mcfg[e.key] = e.value;
  manifest["train_config"] = cfg;
  manifest["model_config"] = mcfg;
  manifest["epoch"] = ckpt.epoch;
  manifest["loss_history"] = ckpt.loss_history;
  manifest["phases"] = ckpt.phases;
  manifest["flags"] = ckpt.flags;
  manifest["metrics"] = ckpt.metrics;
  manifest["vocab"] = ckpt.model.vocab.words();
  manifest["teacher"] = {{"kind", "random_transformer"},
                         {"dim", ckpt.model.config.teacher_dim},
                         {"seed", ckpt.model.config.teacher_seed}};
  json plist = json::array();
  std::size_t offset = 0;
  for (const Parameter* p : params) {
    plist.push_back({{"name", p->name},
                     {"shape", {p->value.rows(), p->value.cols()}},
                     {"frozen", p->frozen},
                     {"offset", offset}});
    offset += static_cast<std::size_t>(p->value.size());
  }
  manifest["params"] = plist;
  manifest["param_count"] = offset;
  manifest["params_file"] = "params.bin";
  {
    std::ofstream out(dir / "manifest.json", std::ios::binary);
    out << manifest.dump(2) << '\n';
    if (!out) throw DataError("failed writing " + (dir / "manifest.json").string());
  }
  std::ofstream bin(dir / "params.bin", std::ios::binary);
  const std::string bytes = parameter_bytes(params);
  bin.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!bin) throw DataError("failed writing " + (dir / "params.bin").string());
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  const std::string mfile = mpath.string();
  json m;
  try {
    m = json::parse(read_text_file(mpath));
  } catch (const json::parse_error& e) {
    throw ParseError(mfile, 0, e.what());
  }
  try {
    if (m.at("format_version").get<int>() != kCheckpointFormatVersion) {
      throw ParseError(mfile, 0, "unsupported format_version");
    }
    auto entries = [&](const json& obj) {
      std::vector<ConfigEntry> out;
      for (auto it = obj.begin(); it != obj.end(); ++it) out.push_back({it.key(), it.value().get<std::string>(), 0});
      return out;
    };
    Checkpoint c;
    c.config = parse_config_entries(entries(m.at("train_config")), TrainConfig{}, mfile);
    const TrainConfig model_cfg = parse_config_entries(entries(m.at("model_config")), TrainConfig{}, mfile);
    c.model = Model::create(model_cfg.model, m.at("seed").get<std::uint64_t>(),
                            Vocabulary(m.at("vocab").get<std::vector<std::string>>()));
    c.epoch = m.at("epoch").get<int>();
    c.loss_history = m.at("loss_history").get<std::vector<double>>();
    c.phases = m.at("phases").get<std::vector<std::string>>();
    c.flags = m.at("flags").get<std::vector<std::string>>();
    c.metrics = m.at("metrics").get<std::map<std::string, double>>();

    const std::string bytes = read_text_file(dir / "params.bin");
    ParamList params = c.model.params();
    const json& plist = m.at("params");
    if (plist.size() != params.size()) {
      throw ParseError(mfile, 0, "parameter count mismatch: manifest " + std::to_string(plist.size()) +
                                     ", model " + std::to_string(params.size()));
    }
    const std::size_t total = m.at("param_count").get<std::size_t>();
    if (bytes.size() != total * sizeof(float)) {
      throw ParseError((dir / "params.bin").string(), 0,
                       "expected " + std::to_string(total * sizeof(float)) + " bytes, found " +
                           std::to_string(bytes.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      Parameter& p = *params[i];
      const json& e = plist[i];
      const auto shape = e.at("shape").get<std::vector<Eigen::Index>>();
      if (e.at("name").get<std::string>() != p.name || shape.size() != 2 || shape[0] != p.value.rows() ||
          shape[1] != p.value.cols()) {
        throw ParseError(mfile, i, "parameter '" + e.at("name").get<std::string>() + "' does not match model '" +
                                       p.name + "' " + std::to_string(p.value.rows()) + "x" +
                                       std::to_string(p.value.cols()));
      }
      std::size_t offset = e.at("offset").get<std::size_t>();
      if (offset + static_cast<std::size_t>(p.value.size()) > total) {
        throw ParseError(mfile, i, "parameter '" + p.name + "' overruns params.bin");
      }
      for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
        for (Eigen::Index col = 0; col < p.value.cols(); ++col) {
          float f;
          std::memcpy(&f, bytes.data() + offset * sizeof(float), sizeof(float));
          p.value(r, col) = static_cast<double>(f);
          ++offset;
        }
      }
      p.frozen = e.at("frozen").get<bool>();
    }
    return c;
  } catch (const json::exception& e) {
    throw ParseError(mfile, 0, e.what());
  }
}

}  // namespace despos
