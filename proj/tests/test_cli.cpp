// Runs the built command-line tool as a subprocess.

#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path p = fs::temp_directory_path() / ("despos_cli_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

Result run(const std::string& args) {
  const fs::path out = work_dir() / "stdout.txt";
  const std::string cmd = std::string(DESPOS_CLI_PATH) + " " + args + " > " + out.string() + " 2> " +
                          (work_dir() / "stderr.txt").string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(out);
  std::ostringstream s;
  s << in.rdbuf();
  r.out = s.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void write(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

std::string path(const std::string& name) { return (work_dir() / name).string(); }

const char* kTinyModel =
    "pc.point_hidden = 8\npc.point_out = 8\npc.aggregate = 8\npc.color_dim = 4\npc.position_dim = 4\n"
    "pc.density_dim = 2\npc.d_model = 8\npc.d_h = 6\npc.d_k = 4\npc.out_dim = 16\n"
    "text.width = 16\ntext.heads = 2\ntext.ffn = 16\ntext.backbone_layers = 1\ntext.prior_layers = 1\n"
    "text.prior_dim = 8\ntext.align_width = 8\ntext.align_hidden = 16\ntext.out_dim = 16\n"
    "teacher_dim = 8\nfine.width = 8\nfine.d_k = 4\nfine.heads = 2\nfine.offset_hidden = 8\n"
    "epochs = 1\nbatch_size = 16\n";

}  // namespace

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("frobnicate").code, 1);
  EXPECT_EQ(run("eval --ckpt-fine . --data . --out x.csv").code, 1);
  EXPECT_EQ(run("gen --seed 1").code, 1);
  EXPECT_EQ(run("gen --extent 60 --out " + path("bad")).code, 1);
}

TEST(Cli, GenWritesDatasetAndManifest) {
  const Result r = run("gen --seed 7 --extent 60 60 --instances 40 --queries 200 --out " + path("gen_a"));
  ASSERT_EQ(r.code, 0);
  for (const char* f : {"world.json", "queries.jsonl", "manifest.json", "run_manifest.json"}) {
    EXPECT_TRUE(fs::exists(work_dir() / "gen_a" / f)) << f;
  }
  ASSERT_EQ(run("gen --seed 7 --extent 60 60 --instances 40 --queries 200 --out " + path("gen_b")).code, 0);
  for (const char* f : {"world.json", "queries.jsonl", "manifest.json"}) {
    EXPECT_EQ(slurp(work_dir() / "gen_a" / f), slurp(work_dir() / "gen_b" / f)) << f;
  }
  ASSERT_EQ(run("gen --seed 8 --extent 60 60 --instances 40 --queries 200 --out " + path("gen_c")).code, 0);
  EXPECT_NE(slurp(work_dir() / "gen_a" / "world.json"), slurp(work_dir() / "gen_c" / "world.json"));
  const std::string manifest = slurp(work_dir() / "gen_a" / "run_manifest.json");
  EXPECT_NE(manifest.find("\"command\": \"gen\""), std::string::npos);
  EXPECT_NE(manifest.find("wall_seconds"), std::string::npos);
}

TEST(Cli, SeedFlagOverridesConfig) {
  write(work_dir() / "gen.cfg", "seed = 3\nextent_x = 60\nextent_y = 60\ninstances = 40\nqueries = 20\n");
  ASSERT_EQ(run("gen --config " + path("gen.cfg") + " --out " + path("cfg3")).code, 0);
  ASSERT_EQ(run("gen --seed 3 --extent 60 60 --instances 40 --queries 20 --out " + path("flag3")).code, 0);
  ASSERT_EQ(run("gen --config " + path("gen.cfg") + " --seed 3 --out " + path("both3")).code, 0);
  ASSERT_EQ(run("gen --config " + path("gen.cfg") + " --seed 4 --out " + path("both4")).code, 0);
  EXPECT_EQ(slurp(work_dir() / "cfg3" / "world.json"), slurp(work_dir() / "flag3" / "world.json"));
  EXPECT_EQ(slurp(work_dir() / "both3" / "world.json"), slurp(work_dir() / "cfg3" / "world.json"));
  EXPECT_NE(slurp(work_dir() / "both4" / "world.json"), slurp(work_dir() / "cfg3" / "world.json"));
}

TEST(Cli, DataErrorsExitTwo) {
  write(work_dir() / "bad.cfg", "phase = ste1\nbatch_size = lots\n");
  EXPECT_EQ(run("train-ste --config " + path("bad.cfg") + " --out " + path("ck_bad")).code, 2);
  write(work_dir() / "wrongphase.cfg", "phase = fine\n");
  EXPECT_EQ(run("train-ste --config " + path("wrongphase.cfg") + " --out " + path("ck_bad")).code, 2);
  fs::create_directories(work_dir() / "empty_data");
  fs::create_directories(work_dir() / "empty_ckpt");
  EXPECT_EQ(run("train-coarse --data " + path("empty_data") + " --resume " + path("empty_ckpt") + " --out " +
                path("ck_bad2"))
                .code,
            2);
  EXPECT_EQ(run("train-coarse --data " + path("empty_data") + " --out " + path("ck_bad2")).code, 1);
}

TEST(Cli, TinyPipelineEndToEnd) {
  ASSERT_EQ(run("gen --seed 2 --extent 60 60 --instances 40 --queries 64 --test-queries 12 --out " + path("data"))
                .code,
            0);
  write(work_dir() / "ste.cfg", std::string("phase = ste1\n") + kTinyModel);
  write(work_dir() / "coarse.cfg", std::string("phase = coarse\n") + kTinyModel);
  write(work_dir() / "fine.cfg", std::string("phase = fine\n") + kTinyModel);
  ASSERT_EQ(run("train-ste --config " + path("ste.cfg") + " --out " + path("ck1") + " --seed 5").code, 0);
  ASSERT_EQ(run("train-coarse --config " + path("coarse.cfg") + " --data " + path("data") + " --resume " +
                path("ck1") + " --out " + path("ck2"))
                .code,
            0);
  ASSERT_EQ(run("train-fine --config " + path("fine.cfg") + " --data " + path("data") + " --resume " + path("ck2") +
                " --out " + path("ck3"))
                .code,
            0);
  for (const char* f : {"manifest.json", "params.bin", "run_manifest.json"}) {
    EXPECT_TRUE(fs::exists(work_dir() / "ck3" / f)) << f;
  }
  EXPECT_EQ(run("eval --ckpt-coarse " + path("ck3") + " --ckpt-fine " + path("ck3") + " --data " + path("data") +
                " --robustness --out " + path("report.csv"))
                .code,
            0);
  const std::string csv = slurp(work_dir() / "report.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "k,threshold_m,recall,n");
  EXPECT_TRUE(fs::exists(work_dir() / "report.md"));
  EXPECT_TRUE(fs::exists(work_dir() / "report.tables.json"));
  EXPECT_TRUE(fs::exists(work_dir() / "report.run_manifest.json"));

  const Result md = run("report --tables " + path("report.tables.json") + " --format markdown");
  EXPECT_EQ(md.code, 0);
  EXPECT_EQ(md.out, slurp(work_dir() / "report.md"));
  EXPECT_NE(md.out.find("localization_save50"), std::string::npos);
  const Result again = run("report --tables " + path("report.tables.json") + " --format csv");
  EXPECT_EQ(again.out, csv);
  EXPECT_EQ(run("report --tables " + path("report.tables.json") + " --format xml").code, 1);

  const Result q = run("query --ckpt-coarse " + path("ck3") + " --ckpt-fine " + path("ck3") + " --data " +
                       path("data") + " --topk 3 --text \"The pose is west of a black garage.; The pose is north of a red car.\"");
  ASSERT_EQ(q.code, 0);
  std::istringstream lines(q.out);
  std::string line;
  int count = 0;
  while (std::getline(lines, line)) {
    ++count;
    if (count > 1) {
      EXPECT_EQ(std::count(line.begin(), line.end(), '\t'), 4) << line;
    }
  }
  EXPECT_EQ(count, 4);

  // Identical inputs and seeds give identical checkpoints and reports.
  ASSERT_EQ(run("train-ste --config " + path("ste.cfg") + " --out " + path("ck1b") + " --seed 5").code, 0);
  EXPECT_EQ(slurp(work_dir() / "ck1" / "params.bin"), slurp(work_dir() / "ck1b" / "params.bin"));
  EXPECT_EQ(slurp(work_dir() / "ck1" / "manifest.json"), slurp(work_dir() / "ck1b" / "manifest.json"));
  ASSERT_EQ(run("eval --ckpt-coarse " + path("ck3") + " --ckpt-fine " + path("ck3") + " --data " + path("data") +
                " --robustness --out " + path("report2.csv"))
                .code,
            0);
  EXPECT_EQ(slurp(work_dir() / "report2.csv"), csv);
}
