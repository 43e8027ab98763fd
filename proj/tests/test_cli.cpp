// End-to-end tests for the patchfool executable: help snapshot, exit codes,
// config-file precedence, PF_SEED fallback, output layout, and
// byte-reproducibility of repeated runs.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "pf/dataset.hpp"

#ifndef PF_CLI_PATH
#error "PF_CLI_PATH must point at the patchfool binary"
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct RunResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

/// Run the CLI with a shell argument string; PF_SEED is scrubbed from the
/// environment unless the caller injects one via `env`.
RunResult run_cli(const std::string& args, const std::string& env = "") {
  fs::create_directories("cli_tmp");
  const std::string cmd = "env -u PF_SEED " + env +
                          (env.empty() ? "" : " ") + std::string(PF_CLI_PATH) +
                          " " + args +
                          " > cli_tmp/stdout.txt 2> cli_tmp/stderr.txt";
  const int rc = std::system(cmd.c_str());
  RunResult r;
  r.code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
  r.out = slurp("cli_tmp/stdout.txt");
  r.err = slurp("cli_tmp/stderr.txt");
  return r;
}

/// Shared fixture: a tiny blobs dataset pair and a trained 6-block ViT
/// checkpoint, built through the CLI itself (once per binary run).
struct Fixture {
  std::string train_pfds = "cli_tmp/train.pfds";
  std::string test_pfds = "cli_tmp/test.pfds";
  std::string ckpt = "cli_tmp/vit.pfml";
};

const Fixture& fixture() {
  static Fixture fx;
  static bool built = false;
  if (!built) {
    REQUIRE(run_cli("make-data --kind blobs --out " + fx.train_pfds +
                    " --split train --count 24 --image 8 --seed 11")
                .code == 0);
    REQUIRE(run_cli("make-data --kind blobs --out " + fx.test_pfds +
                    " --split test --count 16 --image 8 --seed 12")
                .code == 0);
    REQUIRE(run_cli("train --model vit --data " + fx.train_pfds + " --out " +
                    fx.ckpt +
                    " --epochs 1 --lr 0.01 --seed 5 --patch 4 --dim 8"
                    " --layers 6 --heads 2 --mlp 2")
                .code == 0);
    built = true;
  }
  return fx;
}

const char* kRootHelp =
    "patchfool — patch-level adversarial robustness lab\n"
    "Usage: patchfool [OPTIONS] SUBCOMMAND\n"
    "\n"
    "Options:\n"
    "  -h,--help                   Print this help message and exit\n"
    "  --help-all                  Print help for every subcommand\n"
    "\n"
    "Subcommands:\n"
    "  make-data                   Generate a bundled synthetic dataset "
    "(.pfds)\n"
    "  train                       Train a model checkpoint\n"
    "  attack                      Attack a model and dump reports plus "
    "adversarial images\n"
    "  eval                        Measure clean and robust accuracy (no "
    "image dumps)\n"
    "  sweep                       Grid-evaluate over comma-separated axis "
    "lists\n"
    "  transfer                    Move one optimized patch across every grid "
    "location\n"
    "  export-attn                 Export per-layer head-averaged attention "
    "maps\n";

}  // namespace

TEST_CASE("help text snapshot and exit code") {
  auto r = run_cli("--help");
  CHECK(r.code == 0);
  CHECK(r.out == kRootHelp);
  CHECK(r.err.empty());
}

TEST_CASE("usage errors exit 1, runtime failures exit 2") {
  CHECK(run_cli("").code == 1);             // no subcommand
  CHECK(run_cli("").err.find("subcommand") != std::string::npos);
  CHECK(run_cli("frobnicate").code == 1);   // unknown subcommand
  CHECK(run_cli("attack").code == 1);       // missing required flags
  CHECK(run_cli("attack --bogus x").code == 1);  // unknown flag
  CHECK(run_cli("make-data --kind bogus --out cli_tmp/x.pfds").code == 1);
  // files that do not exist are runtime failures
  auto r = run_cli(
      "attack --model-ckpt cli_tmp/none.pfml --data cli_tmp/none.pfds"
      " --out cli_tmp/none");
  CHECK(r.code == 2);
  CHECK(r.err.find("error:") != std::string::npos);
}

TEST_CASE("make-data is reproducible and loadable") {
  REQUIRE(run_cli("make-data --kind shapes --out cli_tmp/a.pfds --count 10"
                  " --image 8 --seed 4")
              .code == 0);
  REQUIRE(run_cli("make-data --kind shapes --out cli_tmp/b.pfds --count 10"
                  " --image 8 --seed 4")
              .code == 0);
  CHECK(slurp("cli_tmp/a.pfds") == slurp("cli_tmp/b.pfds"));
  pf::Dataset ds = pf::load_dataset("cli_tmp/a.pfds");
  CHECK(ds.count() == 10);
  CHECK(ds.classes == 10);
  REQUIRE(run_cli("make-data --kind shapes --out cli_tmp/c.pfds --count 10"
                  " --image 8 --seed 5")
              .code == 0);
  CHECK(slurp("cli_tmp/a.pfds") != slurp("cli_tmp/c.pfds"));
}

TEST_CASE("attack run stamps paper defaults into the manifest") {
  const auto& fx = fixture();
  auto r = run_cli("attack --model-ckpt " + fx.ckpt + " --data " +
                   fx.test_pfds + " --out cli_tmp/defaults --limit 3");
  REQUIRE(r.code == 0);

  json manifest = json::parse(slurp("cli_tmp/defaults/manifest.json"));
  CHECK(manifest.at("config").at("variant") == "vanilla");
  CHECK(manifest.at("config").at("select") == "attention");
  CHECK(manifest.at("config").at("patches") == 1);
  CHECK(manifest.at("config").at("layer") == 5);
  CHECK(manifest.at("config").at("alpha") == 0.002);
  CHECK(manifest.at("config").at("eta") == 0.2);
  CHECK(manifest.at("config").at("iters") == 250);
  CHECK(manifest.at("subcommand") == "attack");
  CHECK(manifest.at("tool") == "patchfool");
  CHECK(manifest.contains("started_at"));
  CHECK(manifest.contains("finished_at"));
  CHECK(manifest.at("checkpoint").contains("fnv1a"));
  CHECK(manifest.at("dataset").contains("fnv1a"));

  json report = json::parse(slurp("cli_tmp/defaults/report.json"));
  CHECK(report.at("manifest") == "manifest.json");  // report -> manifest link
  CHECK(report.at("records").size() == 3);
  for (const auto& rec : report.at("records"))
    CHECK(!rec.contains("failed"));
  CHECK(slurp("cli_tmp/defaults/report.json").find("wall") ==
        std::string::npos);

  // adversarial dumps exist and are valid single-image datasets
  std::size_t dumped = 0;
  for (const auto& entry : fs::directory_iterator("cli_tmp/defaults/adv")) {
    pf::Dataset one = pf::load_dataset(entry.path().string());
    CHECK(one.count() == 1);
    CHECK(one.h == 8);
    ++dumped;
  }
  CHECK(dumped == 3);
}

TEST_CASE("identical commands give byte-identical reports and dumps") {
  const auto& fx = fixture();
  const std::string flags = " --variant sparse --select random --patches 2"
                            " --k 24 --layer 2 --iters 6 --seed 21 --limit 4";
  REQUIRE(run_cli("attack --model-ckpt " + fx.ckpt + " --data " +
                  fx.test_pfds + " --out cli_tmp/rep1" + flags)
              .code == 0);
  REQUIRE(run_cli("attack --model-ckpt " + fx.ckpt + " --data " +
                  fx.test_pfds + " --out cli_tmp/rep2" + flags)
              .code == 0);
  CHECK(slurp("cli_tmp/rep1/report.json") ==
        slurp("cli_tmp/rep2/report.json"));
  for (const auto& entry : fs::directory_iterator("cli_tmp/rep1/adv")) {
    const std::string name = entry.path().filename().string();
    CHECK(slurp("cli_tmp/rep1/adv/" + name) ==
          slurp("cli_tmp/rep2/adv/" + name));
  }
}

TEST_CASE("eval writes reports but no adversarial dumps") {
  const auto& fx = fixture();
  REQUIRE(run_cli("eval --model-ckpt " + fx.ckpt + " --data " + fx.test_pfds +
                  " --out cli_tmp/ev --layer 2 --iters 2 --limit 2")
              .code == 0);
  CHECK(fs::exists("cli_tmp/ev/report.json"));
  CHECK(fs::exists("cli_tmp/ev/manifest.json"));
  CHECK(!fs::exists("cli_tmp/ev/adv"));
}

TEST_CASE("config file merges under flags, with a notice") {
  const auto& fx = fixture();
  {
    std::ofstream cfg("cli_tmp/cfg.json");
    cfg << R"({"iters": 3, "seed": 42, "eta": 0.1, "layer": 2})";
  }
  auto r = run_cli("eval --model-ckpt " + fx.ckpt + " --data " + fx.test_pfds +
                   " --out cli_tmp/cfgrun --config cli_tmp/cfg.json"
                   " --iters 5 --limit 2");
  REQUIRE(r.code == 0);
  CHECK(r.err.find("overrides") != std::string::npos);  // --iters conflict
  json manifest = json::parse(slurp("cli_tmp/cfgrun/manifest.json"));
  CHECK(manifest.at("config").at("iters") == 5);    // flag wins
  CHECK(manifest.at("config").at("seed") == 42);    // file fills the rest
  CHECK(manifest.at("config").at("eta") == 0.1);
  CHECK(manifest.at("config").at("layer") == 2);
  CHECK(run_cli("eval --model-ckpt " + fx.ckpt + " --data " + fx.test_pfds +
                " --out cli_tmp/cfgbad --config cli_tmp/missing.json")
            .code == 1);
}

TEST_CASE("PF_SEED is the seed fallback of last resort") {
  const auto& fx = fixture();
  auto base = "eval --model-ckpt " + fx.ckpt + " --data " + fx.test_pfds +
              " --layer 2 --iters 2 --limit 2 --out cli_tmp/seed";
  REQUIRE(run_cli(base, "PF_SEED=77").code == 0);
  CHECK(json::parse(slurp("cli_tmp/seed/manifest.json")).at("seed") == 77);
  REQUIRE(run_cli(base + " --seed 9", "PF_SEED=77").code == 0);
  CHECK(json::parse(slurp("cli_tmp/seed/manifest.json")).at("seed") == 9);
  CHECK(run_cli(base, "PF_SEED=banana").code == 1);
}

TEST_CASE("sweep emits a grid over comma-separated axes") {
  const auto& fx = fixture();
  REQUIRE(run_cli("sweep --model-ckpt " + fx.ckpt + " --data " + fx.test_pfds +
                  " --out cli_tmp/sw --patches 1,2 --layer 2 --iters 2"
                  " --seed 3 --limit 2")
              .code == 0);
  const std::string csv = slurp("cli_tmp/sw/grid.csv");
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  CHECK(line == "patches,layer,clean_accuracy,robust_accuracy");
  std::size_t rows = 0;
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 2);
  json report = json::parse(slurp("cli_tmp/sw/report.json"));
  CHECK(report.at("cells").size() == 2);
  CHECK(report.at("manifest") == "manifest.json");
  // a sweep without any axis flag is a usage error
  CHECK(run_cli("sweep --model-ckpt " + fx.ckpt + " --data " + fx.test_pfds +
                " --out cli_tmp/sw2 --iters 2")
            .code == 1);
}

TEST_CASE("transfer emits one row per grid location") {
  const auto& fx = fixture();
  REQUIRE(run_cli("transfer --model-ckpt " + fx.ckpt + " --data " +
                  fx.test_pfds +
                  " --out cli_tmp/tr --source 1 --layer 2 --iters 2"
                  " --seed 3 --limit 2")
              .code == 0);
  const std::string csv = slurp("cli_tmp/tr/grid.csv");
  std::size_t rows = 0;
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  CHECK(line == "target,row,col,robust_accuracy");
  while (std::getline(is, line)) ++rows;
  CHECK(rows == 4);  // 2x2 patch grid
  json report = json::parse(slurp("cli_tmp/tr/report.json"));
  CHECK(report.at("source") == 1);
  CHECK(report.at("grid_rows") == 2);
}

TEST_CASE("export-attn writes csv and pfds maps") {
  const auto& fx = fixture();
  REQUIRE(run_cli("export-attn --model-ckpt " + fx.ckpt + " --data " +
                  fx.test_pfds + " --out cli_tmp/ex --index 1 --query 0")
              .code == 0);
  CHECK(fs::exists("cli_tmp/ex/attn.csv"));
  pf::Dataset maps = pf::load_dataset("cli_tmp/ex/attn.pfds");
  CHECK(maps.count() == 6);  // one map per block
  CHECK(maps.h == 2);
  CHECK(maps.w == 2);
  CHECK(run_cli("export-attn --model-ckpt " + fx.ckpt + " --data " +
                fx.test_pfds + " --out cli_tmp/ex --index 99")
            .code == 2);
}
