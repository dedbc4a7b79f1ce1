// Command-line entry point: gen, train-ste, train-coarse, train-fine, eval,
// query, report.

#include "despos/config.hpp"
#include "despos/dataset.hpp"
#include "despos/errors.hpp"
#include "despos/model.hpp"
#include "despos/retrieval.hpp"
#include "despos/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#ifndef DESPOS_VERSION
#define DESPOS_VERSION "unknown"
#endif

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace despos;

namespace {

// Bad flag combinations that CLI11 cannot express; exit code 1.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log_line(const std::string& msg) { std::cerr << "despos: " << msg << "\n"; }

class Stopwatch {
 public:
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count(); }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw DataError("failed writing " + path.string());
}

struct RunManifest {
  std::string command;
  json config = json::object();
  json seeds = json::object();
  json inputs = json::object();
  json outputs = json::object();

  void write(const fs::path& path, double seconds) const {
    json j;
    j["command"] = command;
    j["version"] = DESPOS_VERSION;
    j["config"] = config;
    j["seeds"] = seeds;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["wall_seconds"] = seconds;
    write_file(path, j.dump(2) + "\n");
  }
};

json config_json(const TrainConfig& c) {
  json j = json::object();
  for (const ConfigEntry& e : parse_key_values(format_config(c))) j[e.key] = e.value;
  return j;
}

json gen_json(const GenParams& p) {
  return {{"seed", p.seed},
          {"extent_x", p.extent.x},
          {"extent_y", p.extent.y},
          {"instances", p.instance_count},
          {"queries", p.query_count},
          {"test_queries", p.test_query_count},
          {"hints", p.num_hints},
          {"submap_side", p.submap_side},
          {"submap_stride", p.submap_stride}};
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, sep)) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

template <typename T>
std::vector<T> parse_numbers(const std::string& s, const std::string& flag) {
  std::vector<T> out;
  for (const std::string& item : split_list(s, ',')) {
    std::size_t used = 0;
    T v{};
    try {
      if constexpr (std::is_integral_v<T>) {
        v = static_cast<T>(std::stoi(item, &used));
      } else {
        v = static_cast<T>(std::stod(item, &used));
      }
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size() || item.empty()) throw UsageError(flag + ": '" + item + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

// ---- gen --------------------------------------------------------------------

struct GenArgs {
  std::optional<std::uint64_t> seed;
  std::vector<double> extent;
  std::optional<int> instances, queries, test_queries, hints;
  std::string config;
  std::string out;
};

int run_gen(const GenArgs& a) {
  Stopwatch clock;
  GenParams p;
  p.query_count = 200;
  if (!a.config.empty()) {
    const auto rest = apply_gen_params(parse_key_values(read_text_file(a.config), a.config), p, a.config);
    if (!rest.empty()) throw ParseError(a.config, static_cast<std::size_t>(rest.front().line), "unknown key '" + rest.front().key + "'");
  }
  if (a.seed) p.seed = *a.seed;
  if (!a.extent.empty()) p.extent = {a.extent[0], a.extent[1]};
  if (a.instances) p.instance_count = *a.instances;
  if (a.queries) p.query_count = *a.queries;
  if (a.test_queries) {
    p.test_query_count = *a.test_queries;
  } else if (a.config.empty() || p.test_query_count == 0) {
    p.test_query_count = std::max(1, p.query_count / 8);
  }
  if (a.hints) p.num_hints = *a.hints;
  if (p.query_count < 0 || p.test_query_count < 0) throw UsageError("query counts must be non-negative");

  log_line("generating world " + std::to_string(p.extent.x) + " x " + std::to_string(p.extent.y) + " m, " +
           std::to_string(p.instance_count) + " instances");
  const Dataset d = generate_dataset(p);
  export_dataset(d, a.out);
  log_line("wrote " + std::to_string(d.world.submaps.size()) + " submaps, " + std::to_string(d.queries.size()) +
           " queries to " + a.out);
  RunManifest m;
  m.command = "gen";
  m.config = gen_json(p);
  m.seeds = {{"world", p.seed}, {"train_queries", p.seed + 1}, {"test_queries", p.seed + 2}};
  m.outputs = {{"dataset", a.out}};
  if (!a.config.empty()) m.inputs = {{"config", a.config}};
  m.write(fs::path(a.out) / "run_manifest.json", clock.seconds());
  return 0;
}

// ---- train-* ----------------------------------------------------------------

struct TrainArgs {
  std::optional<std::uint64_t> seed;
  std::string config, data, out, resume;
};

TrainConfig resolve_config(Phase phase, const TrainArgs& a) {
  TrainConfig c = default_config(phase);
  if (!a.config.empty()) {
    c = load_config(a.config, c);
    if (c.phase != phase) {
      throw DataError(a.config + ": phase '" + std::string(to_string(c.phase)) + "' does not match command '" +
                      std::string(to_string(phase)) + "'");
    }
  }
  if (a.seed) c.seed = *a.seed;
  return c;
}

int run_train(Phase phase, const TrainArgs& a) {
  Stopwatch clock;
  const TrainConfig c = resolve_config(phase, a);
  if (phase != Phase::Ste1 && a.resume.empty()) {
    throw UsageError(std::string("train-") + (phase == Phase::Coarse ? "coarse" : "fine") +
                     " needs --resume with a checkpoint from the previous phase");
  }
  if (phase != Phase::Ste1 && a.data.empty()) throw UsageError("--data is required");
  Checkpoint ck = a.resume.empty() ? init_checkpoint(c) : load_checkpoint(a.resume);
  Logger log = [](const std::string& msg) { log_line(msg); };
  if (phase == Phase::Ste1) {
    // The sentence corpus is the grammar itself; the dataset is optional.
    const auto sentences = enumerate_sentences(default_palette());
    log_line("stage-1 distillation over " + std::to_string(sentences.size()) + " sentences");
    const RandomTransformerTeacher teacher = ck.model.teacher();
    ck = train_ste_stage1(c, sentences, teacher, std::move(ck), log);
  } else {
    const Dataset d = load_dataset(a.data);
    ck = phase == Phase::Coarse ? train_coarse(c, d, std::move(ck), log) : train_fine(c, d, std::move(ck), log);
  }
  for (const std::string& f : ck.flags) log_line("flag: " + f);
  save_checkpoint(ck, a.out);
  RunManifest m;
  m.command = std::string("train-") + (phase == Phase::Ste1 ? "ste" : std::string(to_string(phase)));
  m.config = config_json(c);
  m.seeds = {{"train", c.seed}, {"model", ck.model.seed}, {"teacher", ck.model.config.teacher_seed}};
  if (!a.config.empty()) m.inputs["config"] = a.config;
  if (!a.data.empty()) m.inputs["data"] = a.data;
  if (!a.resume.empty()) m.inputs["resume"] = a.resume;
  m.outputs = {{"checkpoint", a.out}};
  m.write(fs::path(a.out) / "run_manifest.json", clock.seconds());
  log_line("checkpoint written to " + a.out);
  return 0;
}

// ---- eval / report ----------------------------------------------------------

json table_json(const MetricsTable& t) {
  json rows = json::array();
  for (Eigen::Index i = 0; i < t.recall.rows(); ++i) {
    json row = json::array();
    for (Eigen::Index j = 0; j < t.recall.cols(); ++j) row.push_back(t.recall(i, j));
    rows.push_back(row);
  }
  return {{"name", t.name}, {"ks", t.ks}, {"thresholds", t.thresholds}, {"n", t.n}, {"recall", rows}};
}

MetricsTable table_from_json(const json& j) {
  MetricsTable t;
  t.name = j.at("name").get<std::string>();
  t.ks = j.at("ks").get<std::vector<int>>();
  t.thresholds = j.at("thresholds").get<std::vector<double>>();
  t.n = j.at("n").get<int>();
  const json& rows = j.at("recall");
  const auto cols = static_cast<Eigen::Index>(std::max<std::size_t>(1, t.thresholds.size()));
  if (rows.size() != t.ks.size()) throw DataError("table '" + t.name + "': recall rows do not match ks");
  t.recall.resize(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != static_cast<std::size_t>(cols)) throw DataError("table '" + t.name + "': ragged recall");
    for (Eigen::Index c = 0; c < cols; ++c) t.recall(static_cast<Eigen::Index>(i), c) = rows[i][static_cast<std::size_t>(c)].get<double>();
  }
  return t;
}

fs::path sidecar(const fs::path& report, const std::string& suffix) {
  fs::path p = report;
  p.replace_extension();
  return p.string() + suffix;
}

struct EvalArgs {
  std::optional<std::uint64_t> seed;
  std::string ckpt_coarse, ckpt_fine, data, out, topk = "1,5,10", thresholds = "5,10,15", coarse_topk = "1,3,5";
  std::string positive = "nearest", split = "test";
  bool robustness = false;
};

int run_eval(const EvalArgs& a) {
  Stopwatch clock;
  EvalOptions opt;
  opt.ks = parse_numbers<int>(a.topk, "--topk");
  opt.thresholds = parse_numbers<double>(a.thresholds, "--thresholds");
  opt.coarse_ks = parse_numbers<int>(a.coarse_topk, "--coarse-topk");
  for (int k : opt.ks) {
    if (k < 1) throw UsageError("--topk values must be >= 1");
  }
  for (int k : opt.coarse_ks) {
    if (k < 1) throw UsageError("--coarse-topk values must be >= 1");
  }
  if (a.positive == "containing") {
    opt.positive = PositiveRule::Containing;
  } else if (a.positive != "nearest") {
    throw UsageError("--positive must be nearest or containing");
  }
  const Checkpoint coarse = load_checkpoint(a.ckpt_coarse);
  const Checkpoint fine = load_checkpoint(a.ckpt_fine);
  if (!coarse.has_phase(Phase::Coarse)) log_line("warning: " + a.ckpt_coarse + " has no coarse phase");
  if (!fine.has_phase(Phase::Fine)) log_line("warning: " + a.ckpt_fine + " has no fine phase");
  const Dataset d = load_dataset(a.data);
  const auto queries = select_split(d.queries, a.split);
  if (queries.empty()) throw DataError(a.data + ": no queries to evaluate");
  log_line("evaluating " + std::to_string(queries.size()) + " queries over " +
           std::to_string(d.world.submaps.size()) + " submaps");

  const std::uint64_t seed = a.seed.value_or(0);
  std::vector<MetricsTable> tables;
  json extra = json::object();
  const Evaluation ev = evaluate(coarse.model, fine.model, d.world, queries, opt);
  tables.push_back(ev.coarse);
  tables.push_back(ev.localization);
  extra["correct_top1"] = ev.correct_top1;
  extra["fine_error_m"] = ev.fine_error;
  extra["center_baseline_error_m"] = ev.center_error;
  if (a.robustness) {
    const std::vector<PerturbMode> modes{PerturbMode::Full, PerturbMode::Save75, PerturbMode::Save50,
                                         PerturbMode::SwapOne};
    for (const auto& [mode, e] : robustness_sweep(coarse.model, fine.model, d.world, queries, modes, seed, opt)) {
      for (MetricsTable t : {e.coarse, e.localization}) {
        t.name += "_" + std::string(to_string(mode));
        tables.push_back(t);
      }
    }
  }

  bool valid = true;
  json tj = json::array();
  for (const MetricsTable& t : tables) {
    if (!t.valid()) {
      log_line("invariant violation: table '" + t.name + "' is not monotone in [0, 1]");
      valid = false;
    }
    tj.push_back(table_json(t));
  }
  write_file(a.out, emit_report(tables, "csv"));
  write_file(sidecar(a.out, ".md"), emit_report(tables, "markdown"));
  write_file(sidecar(a.out, ".tables.json"), json{{"tables", tj}, {"diagnostics", extra}}.dump(2) + "\n");
  std::cerr << emit_report(tables, "markdown");
  log_line("fine error on correct top-1: " + std::to_string(ev.fine_error) + " m (center baseline " +
           std::to_string(ev.center_error) + " m, " + std::to_string(ev.correct_top1) + " queries)");

  RunManifest m;
  m.command = "eval";
  m.config = {{"topk", opt.ks}, {"thresholds", opt.thresholds}, {"coarse_topk", opt.coarse_ks},
              {"positive", a.positive}, {"split", a.split}, {"robustness", a.robustness}};
  m.seeds = {{"perturbation", seed}};
  m.inputs = {{"ckpt_coarse", a.ckpt_coarse}, {"ckpt_fine", a.ckpt_fine}, {"data", a.data}};
  m.outputs = {{"report", a.out},
               {"markdown", sidecar(a.out, ".md").string()},
               {"tables", sidecar(a.out, ".tables.json").string()}};
  m.write(sidecar(a.out, ".run_manifest.json"), clock.seconds());
  return valid ? 0 : 2;
}

struct ReportArgs {
  std::string tables, format = "markdown", out;
};

int run_report(const ReportArgs& a) {
  json j;
  try {
    j = json::parse(read_text_file(a.tables));
  } catch (const json::exception& e) {
    throw ParseError(a.tables, 1, e.what());
  }
  std::vector<MetricsTable> tables;
  try {
    for (const json& t : j.at("tables")) tables.push_back(table_from_json(t));
  } catch (const json::exception& e) {
    throw ParseError(a.tables, 1, e.what());
  }
  if (a.format != "csv" && a.format != "markdown") throw UsageError("--format must be csv or markdown");
  const std::string text = emit_report(tables, a.format);
  if (a.out.empty()) {
    std::cout << text;
  } else {
    Stopwatch clock;
    write_file(a.out, text);
    RunManifest m;
    m.command = "report";
    m.config = {{"format", a.format}};
    m.inputs = {{"tables", a.tables}};
    m.outputs = {{"report", a.out}};
    m.write(sidecar(a.out, ".run_manifest.json"), clock.seconds());
  }
  for (const MetricsTable& t : tables) {
    if (!t.valid()) return 2;
  }
  return 0;
}

// ---- query ------------------------------------------------------------------

struct QueryArgs {
  std::string ckpt_coarse, ckpt_fine, data, text;
  int topk = 5;
};

int run_query(const QueryArgs& a) {
  if (a.topk < 1) throw UsageError("--topk must be >= 1");
  const std::vector<std::string> hints = split_list(a.text, ';');
  if (hints.empty()) throw UsageError("--text has no sentences");
  const Checkpoint coarse = load_checkpoint(a.ckpt_coarse);
  const Checkpoint fine = load_checkpoint(a.ckpt_fine);
  const Dataset d = load_dataset(a.data);
  const auto preds = query_pipeline(coarse.model, fine.model, d.world, hints, a.topk);
  std::cout << "rank\tsubmap_id\tx\ty\tsimilarity\n";
  char line[160];
  for (std::size_t r = 0; r < preds.size(); ++r) {
    std::snprintf(line, sizeof line, "%zu\t%d\t%.3f\t%.3f\t%.6f\n", r + 1, preds[r].submap_id, preds[r].position.x,
                  preds[r].position.y, preds[r].similarity);
    std::cout << line;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Text-to-point-cloud coarse-to-fine localization on synthetic worlds"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DESPOS_VERSION);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a world and its queries");
  g->add_option("--seed", gen.seed, "World seed (overrides the config file)");
  g->add_option("--extent", gen.extent, "World extent in meters: W H")->expected(2);
  g->add_option("--instances", gen.instances, "Number of instances");
  g->add_option("--queries", gen.queries, "Train queries (default 200)");
  g->add_option("--test-queries", gen.test_queries, "Test queries (default queries / 8)");
  g->add_option("--hints", gen.hints, "Hints per query (default 6)");
  g->add_option("--config", gen.config, "key = value file with generator keys")->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output dataset directory")->required();

  std::array<TrainArgs, 3> train;
  std::array<CLI::App*, 3> train_cmds{};
  const std::array<std::pair<const char*, const char*>, 3> train_names{
      std::pair{"train-ste", "Stage-1 distillation of the text prior head"},
      std::pair{"train-coarse", "Contrastive training of the point-cloud and text encoders"},
      std::pair{"train-fine", "Offset regression of the fine localizer"}};
  for (std::size_t i = 0; i < 3; ++i) {
    TrainArgs& t = train[i];
    CLI::App* c = app.add_subcommand(train_names[i].first, train_names[i].second);
    c->add_option("--seed", t.seed, "Training seed (overrides the config file)");
    c->add_option("--config", t.config, "key = value training config")->check(CLI::ExistingFile);
    c->add_option("--data", t.data, "Dataset directory")->check(CLI::ExistingDirectory);
    c->add_option("--out", t.out, "Output checkpoint directory")->required();
    c->add_option("--resume", t.resume, "Checkpoint to continue from")->check(CLI::ExistingDirectory);
    train_cmds[i] = c;
  }

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Retrieval and localization recall on held-out queries");
  e->add_option("--ckpt-coarse", ev.ckpt_coarse, "Checkpoint used for retrieval")->required()->check(CLI::ExistingDirectory);
  e->add_option("--ckpt-fine", ev.ckpt_fine, "Checkpoint used for refinement")->required()->check(CLI::ExistingDirectory);
  e->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--topk", ev.topk, "Localization k values")->capture_default_str();
  e->add_option("--thresholds", ev.thresholds, "Localization thresholds in meters")->capture_default_str();
  e->add_option("--coarse-topk", ev.coarse_topk, "Retrieval k values")->capture_default_str();
  e->add_option("--positive", ev.positive, "Coarse positive rule: nearest or containing")->capture_default_str();
  e->add_option("--split", ev.split, "Query split")->capture_default_str();
  e->add_option("--seed", ev.seed, "Perturbation seed for --robustness");
  e->add_flag("--robustness", ev.robustness, "Also run the hint perturbation sweep");
  e->add_option("--out", ev.out, "CSV report path")->required();

  QueryArgs q;
  auto* qc = app.add_subcommand("query", "Localize a free-form hint list");
  qc->add_option("--ckpt-coarse", q.ckpt_coarse)->required()->check(CLI::ExistingDirectory);
  qc->add_option("--ckpt-fine", q.ckpt_fine)->required()->check(CLI::ExistingDirectory);
  qc->add_option("--data", q.data)->required()->check(CLI::ExistingDirectory);
  qc->add_option("--text", q.text, "Hints separated by ';'")->required();
  qc->add_option("--topk", q.topk)->capture_default_str();

  ReportArgs rep;
  auto* rc = app.add_subcommand("report", "Re-render the tables written by eval");
  rc->add_option("--tables", rep.tables, "<report>.tables.json from eval")->required()->check(CLI::ExistingFile);
  rc->add_option("--format", rep.format, "csv or markdown")->capture_default_str();
  rc->add_option("--out", rep.out, "Output file (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForAllHelp& err) {
    return app.exit(err);
  } catch (const CLI::CallForVersion& err) {
    return app.exit(err);
  } catch (const CLI::ParseError& err) {
    app.exit(err, std::cerr, std::cerr);
    std::cerr << app.help();
    return 1;
  }

  try {
    if (*g) return run_gen(gen);
    for (std::size_t i = 0; i < 3; ++i) {
      if (*train_cmds[i]) return run_train(static_cast<Phase>(i), train[i]);
    }
    if (*e) return run_eval(ev);
    if (*qc) return run_query(q);
    if (*rc) return run_report(rep);
  } catch (const UsageError& err) {
    log_line("usage error: " + std::string(err.what()));
    return 1;
  } catch (const DataError& err) {
    log_line("error: " + std::string(err.what()));
    return 2;
  } catch (const std::exception& err) {
    log_line("internal error: " + std::string(err.what()));
    return 3;
  }
  return 1;
}
