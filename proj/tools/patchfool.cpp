// patchfool — command-line driver for the patch-level robustness lab.
//
// Subcommands: train, attack, eval, sweep, transfer, export-attn.  Every run
// writes a manifest (resolved config, seeds, input hashes, tool version,
// timestamps) before its results; result files themselves carry no
// wall-clock data, so identical commands produce byte-identical reports.
//
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pf/attack.hpp"
#include "pf/dataset.hpp"
#include "pf/harness.hpp"
#include "pf/models.hpp"
#include "pf/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Small utilities
// ---------------------------------------------------------------------------

/// Usage-level problem discovered after flag parsing (exit code 1).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string iso_utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::uint64_t fnv1a_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::uint64_t h = 1469598103934665603ULL;
  char chunk[4096];
  while (in.read(chunk, sizeof(chunk)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(chunk[i]);
      h *= 1099511628211ULL;
    }
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(v));
  return buf;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path);
}

void write_json(const std::string& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

std::vector<double> parse_double_list(const std::string& flag,
                                      const std::string& text) {
  std::vector<double> out;
  std::istringstream is(text);
  std::string item;
  while (std::getline(is, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw UsageError(flag + ": '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

std::vector<std::size_t> parse_size_list(const std::string& flag,
                                         const std::string& text) {
  std::vector<std::size_t> out;
  for (double v : parse_double_list(flag, text)) {
    if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v)))
      throw UsageError(flag + ": expects non-negative integers");
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Config file overlay
// ---------------------------------------------------------------------------
// The config file is JSON with the same keys as the long flag names (no
// leading dashes).  A flag given on the command line wins over the file,
// with a notice on stderr.

class Overlay {
 public:
  Overlay(CLI::App& cmd, std::string config_path) : cmd_(cmd) {
    if (config_path.empty()) return;
    std::ifstream in(config_path);
    if (!in) throw UsageError("--config: cannot read " + config_path);
    try {
      in >> file_;
    } catch (const std::exception& e) {
      throw UsageError("--config: " + config_path + ": " + e.what());
    }
    if (!file_.is_object()) throw UsageError("--config: expected an object");
  }

  /// True when the config file supplies `key` and the flag is absent.
  bool wins(const std::string& key) {
    if (!file_.contains(key)) return false;
    if (cmd_.count("--" + key) > 0) {
      std::cerr << "note: --" << key
                << " from the command line overrides the config file\n";
      return false;
    }
    return true;
  }

  template <class T>
  void merge(const std::string& key, T& var) {
    if (!wins(key)) return;
    try {
      var = file_.at(key).get<T>();
    } catch (const std::exception&) {
      throw UsageError("--config: bad value for '" + key + "'");
    }
  }

  /// List-valued axis keys accept a scalar, an array, or a "1,2,3" string.
  void merge_list(const std::string& key, std::string& var) {
    if (!wins(key)) return;
    const json& v = file_.at(key);
    if (v.is_string()) {
      var = v.get<std::string>();
    } else if (v.is_array()) {
      std::string joined;
      for (const auto& item : v) {
        if (!joined.empty()) joined += ',';
        joined += item.dump();
      }
      var = joined;
    } else {
      var = v.dump();
    }
  }

  bool has(const std::string& key) const { return file_.contains(key); }

 private:
  CLI::App& cmd_;
  json file_;
};

/// Seed precedence: --seed flag > config file > PF_SEED env > 0.
std::uint64_t resolve_seed(CLI::App& cmd, Overlay& overlay,
                           std::uint64_t flag_value) {
  std::uint64_t seed = flag_value;
  if (cmd.count("--seed") > 0) return seed;
  if (overlay.has("seed")) {
    overlay.merge("seed", seed);
    return seed;
  }
  if (const char* env = std::getenv("PF_SEED")) {
    char* end = nullptr;
    const unsigned long long v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0')
      throw UsageError(std::string("PF_SEED: '") + env +
                       "' is not an unsigned integer");
    seed = static_cast<std::uint64_t>(v);
  }
  return seed;
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

json input_stamp(const std::string& path) {
  json j;
  j["path"] = path;
  j["fnv1a"] = hex64(fnv1a_file(path));
  return j;
}

json manifest_base(const std::string& subcommand) {
  json j;
  j["tool"] = "patchfool";
  j["version"] = pf::kVersion;
  j["subcommand"] = subcommand;
  j["started_at"] = iso_utc_now();
  return j;
}

void finish_manifest(const std::string& path, json manifest, double wall_ms) {
  manifest["finished_at"] = iso_utc_now();
  manifest["wall_ms"] = wall_ms;
  write_json(path, manifest);
}

// ---------------------------------------------------------------------------
// Shared attack-family options
// ---------------------------------------------------------------------------

struct AttackOpts {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string config_path;
  std::string variant = "vanilla";
  std::string select = "attention";
  std::size_t patches = 1;
  std::size_t layer = 5;
  double alpha = 0.002;
  double eta = 0.2;
  double decay = 0.95;
  std::size_t iters = 250;
  std::size_t k = 0;
  double epsilon = 0.0;
  bool sparse_spatial = false;
  std::uint64_t seed = 0;
  std::size_t limit = 500;
  std::size_t workers = 1;
};

void add_attack_flags(CLI::App& cmd, AttackOpts& o,
                      bool with_axis_scalars = true) {
  cmd.add_option("--model-ckpt", o.ckpt, "Model checkpoint (.pfml)")
      ->required();
  cmd.add_option("--data", o.data, "Evaluation dataset (.pfds, test split)")
      ->required();
  cmd.add_option("--out", o.out, "Output directory")->required();
  cmd.add_option("--config", o.config_path,
                 "JSON config file; keys mirror the flags, flags win");
  cmd.add_option("--variant", o.variant,
                 "Attack variant: vanilla|sparse|mild-l2|mild-linf|pgd")
      ->capture_default_str()
      ->check(CLI::IsMember({"vanilla", "sparse", "mild-l2", "mild_l2",
                             "mild-linf", "mild_linf", "pgd"}));
  cmd.add_option("--select", o.select,
                 "Patch selection: attention|saliency|random")
      ->capture_default_str()
      ->check(CLI::IsMember({"attention", "saliency", "random"}));
  if (with_axis_scalars) {
    cmd.add_option("--patches", o.patches, "Number of attacked patches")
        ->capture_default_str();
    cmd.add_option("--layer", o.layer, "Attention-selection block (1-based)")
        ->capture_default_str();
    cmd.add_option("--k", o.k, "Sparse element budget (sparse variant)")
        ->capture_default_str();
    cmd.add_option("--epsilon", o.epsilon,
                   "Norm bound (mild variants) or ball radius (pgd)")
        ->capture_default_str();
  }
  cmd.add_option("--alpha", o.alpha, "Attention-loss weight")
      ->capture_default_str();
  cmd.add_option("--eta", o.eta, "Initial step size")->capture_default_str();
  cmd.add_option("--decay", o.decay, "Step decay per 10 iterations")
      ->capture_default_str();
  cmd.add_option("--iters", o.iters, "Attack iterations")
      ->capture_default_str();
  cmd.add_flag("--sparse-spatial", o.sparse_spatial,
               "Sparse budget counts pixels (all channels share)");
  cmd.add_option("--seed", o.seed, "Run seed (PF_SEED is the env fallback)")
      ->capture_default_str();
  cmd.add_option("--limit", o.limit, "Evaluation subset size (0 = all)")
      ->capture_default_str();
  cmd.add_option("--workers", o.workers, "Concurrent per-image workers")
      ->capture_default_str();
}

void merge_attack_config(CLI::App& cmd, AttackOpts& o, Overlay& overlay,
                         bool axis_keys_are_lists = false) {
  overlay.merge("model-ckpt", o.ckpt);
  overlay.merge("data", o.data);
  overlay.merge("out", o.out);
  overlay.merge("variant", o.variant);
  overlay.merge("select", o.select);
  if (!axis_keys_are_lists) {
    // in `sweep` these four keys are axis lists, merged by the caller
    overlay.merge("patches", o.patches);
    overlay.merge("layer", o.layer);
    overlay.merge("k", o.k);
    overlay.merge("epsilon", o.epsilon);
  }
  overlay.merge("alpha", o.alpha);
  overlay.merge("eta", o.eta);
  overlay.merge("decay", o.decay);
  overlay.merge("iters", o.iters);
  overlay.merge("sparse-spatial", o.sparse_spatial);
  overlay.merge("limit", o.limit);
  overlay.merge("workers", o.workers);
  o.seed = resolve_seed(cmd, overlay, o.seed);
}

pf::attack::AttackConfig to_attack_config(const AttackOpts& o) {
  pf::attack::AttackConfig cfg;
  cfg.variant = pf::attack::variant_from_string(o.variant);
  cfg.selection = pf::attack::selection_from_string(o.select);
  cfg.num_patches = o.patches;
  cfg.layer_l = o.layer;
  cfg.alpha = o.alpha;
  cfg.eta0 = o.eta;
  cfg.decay = o.decay;
  cfg.iters = o.iters;
  cfg.k = o.k;
  cfg.epsilon = o.epsilon;
  cfg.sparse_spatial = o.sparse_spatial;
  cfg.seed = o.seed;
  return cfg;
}

json attack_manifest(const std::string& subcommand, const AttackOpts& o,
                     const pf::attack::AttackConfig& cfg,
                     const pf::Dataset& ds) {
  json m = manifest_base(subcommand);
  m["config"] = pf::harness::config_to_json(cfg);
  m["config"]["limit"] = o.limit;
  m["config"]["workers"] = o.workers;
  m["seed"] = cfg.seed;
  m["checkpoint"] = input_stamp(o.ckpt);
  m["dataset"] = input_stamp(o.data);
  m["dataset"]["count"] = ds.count();
  m["dataset"]["classes"] = ds.classes;
  return m;
}

/// Re-check the serialization invariants on an adversarial image: pixels in
/// [0, 1], and (for patch attacks) changes confined to the chosen patches.
void check_adversarial(const pf::PatchGrid& grid,
                       const std::vector<double>& clean,
                       const std::vector<double>& adv,
                       const std::vector<std::size_t>& patches,
                       bool patch_local) {
  if (adv.size() != clean.size())
    throw std::runtime_error("adversarial image has wrong size");
  const std::vector<double> mask =
      patch_local ? grid.pixel_mask(patches) : std::vector<double>{};
  for (std::size_t i = 0; i < adv.size(); ++i) {
    if (!(adv[i] >= 0.0 && adv[i] <= 1.0))
      throw std::runtime_error("adversarial pixel outside [0,1]");
    if (patch_local && mask[i] == 0.0 && adv[i] != clean[i])
      throw std::runtime_error("adversarial change outside chosen patches");
  }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

struct MakeDataOpts {
  std::string kind = "shapes";
  std::string out;
  std::string config_path;
  std::string split = "test";
  std::size_t count = 512;
  std::size_t image = 32;
  std::uint64_t seed = 0;
};

int run_make_data(CLI::App& cmd, MakeDataOpts& o) {
  Overlay overlay(cmd, o.config_path);
  overlay.merge("kind", o.kind);
  overlay.merge("out", o.out);
  overlay.merge("split", o.split);
  overlay.merge("count", o.count);
  overlay.merge("image", o.image);
  o.seed = resolve_seed(cmd, overlay, o.seed);

  pf::Dataset ds = o.kind == "shapes"
                       ? pf::make_shapes_dataset(o.count, o.seed, o.split,
                                                 o.image)
                       : pf::make_blobs_dataset(o.count, o.seed, o.split,
                                                o.image);
  pf::save_dataset(o.out, ds);

  json manifest = manifest_base("make-data");
  manifest["config"] = {{"kind", o.kind},
                        {"split", o.split},
                        {"count", o.count},
                        {"image", o.image}};
  manifest["seed"] = o.seed;
  manifest["dataset"] = input_stamp(o.out);
  manifest["dataset"]["count"] = ds.count();
  manifest["dataset"]["classes"] = ds.classes;
  manifest["finished_at"] = iso_utc_now();
  write_json(o.out + ".manifest.json", manifest);
  std::cout << "wrote " << o.out << " (" << ds.count() << " images, "
            << ds.classes << " classes)\n";
  return 0;
}

struct TrainOpts {
  std::string model;
  std::string data;
  std::string out;
  std::string config_path;
  std::size_t epochs = 10;
  double lr = 0.001;
  std::uint64_t seed = 0;
  std::size_t patch = 4;
  std::size_t dim = 64;
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t mlp = 2;
  std::string widths = "32,64,128";
};

int run_train(CLI::App& cmd, TrainOpts& o) {
  Overlay overlay(cmd, o.config_path);
  overlay.merge("model", o.model);
  overlay.merge("data", o.data);
  overlay.merge("out", o.out);
  overlay.merge("epochs", o.epochs);
  overlay.merge("lr", o.lr);
  overlay.merge("patch", o.patch);
  overlay.merge("dim", o.dim);
  overlay.merge("layers", o.layers);
  overlay.merge("heads", o.heads);
  overlay.merge("mlp", o.mlp);
  overlay.merge("widths", o.widths);
  o.seed = resolve_seed(cmd, overlay, o.seed);

  pf::Dataset train = pf::load_dataset(o.data, "train");
  if (train.h != train.w)
    throw std::runtime_error("train: dataset images must be square");

  pf::harness::ModelSpec spec;
  if (o.model == "vit") {
    pf::TinyViTConfig cfg;
    cfg.image = train.h;
    cfg.channels = train.c;
    cfg.patch = o.patch;
    cfg.dim = o.dim;
    cfg.layers = o.layers;
    cfg.heads = o.heads;
    cfg.mlp_ratio = o.mlp;
    cfg.classes = train.classes;
    spec = cfg;
  } else {
    pf::TinyCNNConfig cfg;
    cfg.image = train.h;
    cfg.channels = train.c;
    cfg.patch = o.patch;
    cfg.widths = parse_size_list("--widths", o.widths);
    cfg.classes = train.classes;
    spec = cfg;
  }

  const std::string manifest_path = o.out + ".manifest.json";
  json manifest = manifest_base("train");
  manifest["config"] = {{"model", o.model}, {"epochs", o.epochs},
                        {"lr", o.lr},       {"patch", o.patch},
                        {"dim", o.dim},     {"layers", o.layers},
                        {"heads", o.heads}, {"mlp", o.mlp},
                        {"widths", o.widths}};
  manifest["seed"] = o.seed;
  manifest["dataset"] = input_stamp(o.data);
  manifest["dataset"]["count"] = train.count();
  manifest["dataset"]["classes"] = train.classes;
  manifest["checkpoint"] = {{"path", o.out}};
  write_json(manifest_path, manifest);

  const auto t0 = std::chrono::steady_clock::now();
  pf::harness::train_model(spec, train, o.epochs, o.lr, o.seed, o.out, true);
  const auto t1 = std::chrono::steady_clock::now();

  manifest["checkpoint"]["fnv1a"] = hex64(fnv1a_file(o.out));
  finish_manifest(manifest_path, manifest,
                  std::chrono::duration<double, std::milli>(t1 - t0).count());
  std::cout << "wrote " << o.out << "\n";
  return 0;
}

int run_attack_family(CLI::App& cmd, AttackOpts& o, bool dump_adv) {
  Overlay overlay(cmd, o.config_path);
  merge_attack_config(cmd, o, overlay);

  auto model = pf::load_model(o.ckpt);
  pf::Dataset ds = pf::load_dataset(o.data, "test");
  pf::attack::AttackConfig cfg = to_attack_config(o);

  fs::create_directories(o.out);
  if (dump_adv) fs::create_directories(o.out + "/adv");
  json manifest =
      attack_manifest(dump_adv ? "attack" : "eval", o, cfg, ds);
  write_json(o.out + "/manifest.json", manifest);

  std::vector<pf::attack::AdversarialExample> examples;
  pf::harness::RobustnessReport report = pf::harness::evaluate_robust(
      *model, cfg, ds, o.limit, o.workers, dump_adv ? &examples : nullptr);

  if (dump_adv) {
    const pf::PatchGrid& grid = model->patch_grid();
    const bool patch_local = cfg.variant != pf::attack::Variant::Pgd;
    for (std::size_t slot = 0; slot < report.records.size(); ++slot) {
      const auto& rec = report.records[slot];
      if (rec.failed) continue;
      check_adversarial(grid, ds.image_copy(rec.index),
                        examples[slot].adversarial_image, rec.patches,
                        patch_local);
      pf::Dataset one;
      one.h = ds.h;
      one.w = ds.w;
      one.c = ds.c;
      one.classes = ds.classes;
      one.images = examples[slot].adversarial_image;
      one.labels = {ds.labels[rec.index]};
      one.split = "test";
      one.name = "adversarial";
      char name[32];
      std::snprintf(name, sizeof(name), "%04zu.pfds", rec.index);
      pf::save_dataset(o.out + "/adv/" + name, one);
    }
  }

  json rj = pf::harness::report_to_json(report);
  rj["manifest"] = "manifest.json";
  write_json(o.out + "/report.json", rj);
  finish_manifest(o.out + "/manifest.json", manifest, report.wall_ms);

  std::printf("clean accuracy  %.4f\nrobust accuracy %.4f\n",
              report.clean_accuracy, report.robust_accuracy);
  std::cout << "wrote " << o.out << "/report.json\n";
  return 0;
}

struct SweepOpts : AttackOpts {
  std::string patches_list;
  std::string epsilon_list;
  std::string layer_list;
  std::string pr_list;
  std::string k_list;
};

int run_sweep_cmd(CLI::App& cmd, SweepOpts& o) {
  Overlay overlay(cmd, o.config_path);
  merge_attack_config(cmd, o, overlay, /*axis_keys_are_lists=*/true);
  overlay.merge_list("patches", o.patches_list);
  overlay.merge_list("epsilon", o.epsilon_list);
  overlay.merge_list("layer", o.layer_list);
  overlay.merge_list("pr", o.pr_list);
  overlay.merge_list("k", o.k_list);

  std::vector<pf::harness::SweepAxis> axes;
  auto add_axis = [&](const char* name, const std::string& text) {
    if (text.empty()) return;
    axes.push_back({name, parse_double_list(std::string("--") + name, text)});
  };
  add_axis("patches", o.patches_list);
  add_axis("epsilon", o.epsilon_list);
  add_axis("layer", o.layer_list);
  add_axis("pr", o.pr_list);
  add_axis("k", o.k_list);
  if (axes.empty())
    throw UsageError(
        "sweep: give at least one axis (--patches/--epsilon/--layer/--pr/--k"
        " with a comma-separated list)");

  auto model = pf::load_model(o.ckpt);
  pf::Dataset ds = pf::load_dataset(o.data, "test");
  pf::attack::AttackConfig cfg = to_attack_config(o);

  fs::create_directories(o.out);
  json manifest = attack_manifest("sweep", o, cfg, ds);
  for (const auto& axis : axes)
    manifest["axes"][axis.name] = axis.values;
  write_json(o.out + "/manifest.json", manifest);

  const auto t0 = std::chrono::steady_clock::now();
  pf::harness::SweepGrid grid =
      pf::harness::run_sweep(*model, ds, cfg, axes, o.limit, o.workers);
  const auto t1 = std::chrono::steady_clock::now();

  json rj = pf::harness::grid_to_json(grid);
  rj["manifest"] = "manifest.json";
  write_json(o.out + "/report.json", rj);
  write_text(o.out + "/grid.csv", pf::harness::grid_to_csv(grid));
  finish_manifest(o.out + "/manifest.json", manifest,
                  std::chrono::duration<double, std::milli>(t1 - t0).count());

  std::cout << "wrote " << o.out << "/grid.csv (" << grid.cells.size()
            << " cells)\n";
  return 0;
}

struct TransferOpts : AttackOpts {
  std::size_t source = 0;
};

int run_transfer(CLI::App& cmd, TransferOpts& o) {
  Overlay overlay(cmd, o.config_path);
  merge_attack_config(cmd, o, overlay);
  overlay.merge("source", o.source);

  auto model = pf::load_model(o.ckpt);
  pf::Dataset ds = pf::load_dataset(o.data, "test");
  pf::attack::AttackConfig cfg = to_attack_config(o);

  fs::create_directories(o.out);
  json manifest = attack_manifest("transfer", o, cfg, ds);
  manifest["source"] = o.source;
  write_json(o.out + "/manifest.json", manifest);

  const auto t0 = std::chrono::steady_clock::now();
  pf::harness::TransferGrid grid = pf::harness::transferability_sweep(
      *model, ds, o.source, cfg, o.limit, o.workers);
  const auto t1 = std::chrono::steady_clock::now();

  json rj = pf::harness::transfer_to_json(grid);
  rj["manifest"] = "manifest.json";
  write_json(o.out + "/report.json", rj);
  write_text(o.out + "/grid.csv", pf::harness::transfer_to_csv(grid));
  finish_manifest(o.out + "/manifest.json", manifest,
                  std::chrono::duration<double, std::milli>(t1 - t0).count());

  std::cout << "wrote " << o.out << "/grid.csv (" << grid.robust_accuracy.size()
            << " targets)\n";
  return 0;
}

struct ExportOpts {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string config_path;
  std::size_t index = 0;
  std::size_t query = 0;
  std::uint64_t seed = 0;
};

int run_export(CLI::App& cmd, ExportOpts& o) {
  Overlay overlay(cmd, o.config_path);
  overlay.merge("model-ckpt", o.ckpt);
  overlay.merge("data", o.data);
  overlay.merge("out", o.out);
  overlay.merge("index", o.index);
  overlay.merge("query", o.query);
  o.seed = resolve_seed(cmd, overlay, o.seed);

  auto model = pf::load_model(o.ckpt);
  pf::Dataset ds = pf::load_dataset(o.data, "test");
  if (o.index >= ds.count())
    throw std::runtime_error("export-attn: --index out of range");

  fs::create_directories(o.out);
  json manifest = manifest_base("export-attn");
  manifest["config"] = {{"index", o.index}, {"query", o.query}};
  manifest["seed"] = o.seed;
  manifest["checkpoint"] = input_stamp(o.ckpt);
  manifest["dataset"] = input_stamp(o.data);
  write_json(o.out + "/manifest.json", manifest);

  const auto t0 = std::chrono::steady_clock::now();
  pf::harness::export_attention_maps(*model, ds.image_copy(o.index), o.query,
                                     o.out + "/attn");
  const auto t1 = std::chrono::steady_clock::now();

  json rj;
  rj["manifest"] = "manifest.json";
  rj["csv"] = "attn.csv";
  rj["maps"] = "attn.pfds";
  rj["index"] = o.index;
  rj["query"] = o.query;
  write_json(o.out + "/report.json", rj);
  finish_manifest(o.out + "/manifest.json", manifest,
                  std::chrono::duration<double, std::milli>(t1 - t0).count());

  std::cout << "wrote " << o.out << "/attn.csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"patchfool — patch-level adversarial robustness lab"};
  app.name("patchfool");  // stable help text regardless of argv[0]
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Print help for every subcommand");

  MakeDataOpts make_data_opts;
  CLI::App* make_data = app.add_subcommand(
      "make-data", "Generate a bundled synthetic dataset (.pfds)");
  make_data->add_option("--kind", make_data_opts.kind,
                        "Generator: shapes (10-class) | blobs (2-class)")
      ->capture_default_str()
      ->check(CLI::IsMember({"shapes", "blobs"}));
  make_data->add_option("--out", make_data_opts.out, "Output path (.pfds)")
      ->required();
  make_data->add_option("--config", make_data_opts.config_path,
                        "JSON config file; keys mirror the flags, flags win");
  make_data->add_option("--split", make_data_opts.split,
                        "Dataset split tag: train|test")
      ->capture_default_str()
      ->check(CLI::IsMember({"train", "test"}));
  make_data->add_option("--count", make_data_opts.count, "Number of images")
      ->capture_default_str();
  make_data->add_option("--image", make_data_opts.image,
                        "Square image size in pixels")
      ->capture_default_str();
  make_data->add_option("--seed", make_data_opts.seed,
                        "Generator seed (PF_SEED is the env fallback)")
      ->capture_default_str();

  TrainOpts train_opts;
  CLI::App* train = app.add_subcommand("train", "Train a model checkpoint");
  train->add_option("--model", train_opts.model, "Architecture: vit|cnn")
      ->required()
      ->check(CLI::IsMember({"vit", "cnn"}));
  train->add_option("--data", train_opts.data,
                    "Training dataset (.pfds, train split)")
      ->required();
  train->add_option("--out", train_opts.out, "Checkpoint path (.pfml)")
      ->required();
  train->add_option("--config", train_opts.config_path,
                    "JSON config file; keys mirror the flags, flags win");
  train->add_option("--epochs", train_opts.epochs, "Training epochs")
      ->capture_default_str();
  train->add_option("--lr", train_opts.lr, "Adam learning rate")
      ->capture_default_str();
  train->add_option("--seed", train_opts.seed,
                    "Init/shuffle seed (PF_SEED is the env fallback)")
      ->capture_default_str();
  train->add_option("--patch", train_opts.patch, "Patch size in pixels")
      ->capture_default_str();
  train->add_option("--dim", train_opts.dim, "ViT embedding width")
      ->capture_default_str();
  train->add_option("--layers", train_opts.layers, "ViT blocks")
      ->capture_default_str();
  train->add_option("--heads", train_opts.heads, "ViT attention heads")
      ->capture_default_str();
  train->add_option("--mlp", train_opts.mlp, "ViT MLP expansion ratio")
      ->capture_default_str();
  train->add_option("--widths", train_opts.widths,
                    "CNN stage widths, comma-separated")
      ->capture_default_str();

  AttackOpts attack_opts;
  CLI::App* attack = app.add_subcommand(
      "attack", "Attack a model and dump reports plus adversarial images");
  add_attack_flags(*attack, attack_opts);

  AttackOpts eval_opts;
  CLI::App* eval = app.add_subcommand(
      "eval", "Measure clean and robust accuracy (no image dumps)");
  add_attack_flags(*eval, eval_opts);

  SweepOpts sweep_opts;
  CLI::App* sweep = app.add_subcommand(
      "sweep", "Grid-evaluate over comma-separated axis lists");
  add_attack_flags(*sweep, sweep_opts, /*with_axis_scalars=*/false);
  sweep->add_option("--patches", sweep_opts.patches_list,
                    "Axis: patch counts, e.g. 1,2,3,4");
  sweep->add_option("--epsilon", sweep_opts.epsilon_list,
                    "Axis: norm bounds, e.g. 0.5,1,2,4");
  sweep->add_option("--layer", sweep_opts.layer_list,
                    "Axis: selection blocks, e.g. 1,2,3");
  sweep->add_option("--pr", sweep_opts.pr_list,
                    "Axis: sparse perturbation ratios, e.g. 0.01,0.05");
  sweep->add_option("--k", sweep_opts.k_list,
                    "Axis: sparse element budgets, e.g. 16,64,256");

  TransferOpts transfer_opts;
  CLI::App* transfer = app.add_subcommand(
      "transfer", "Move one optimized patch across every grid location");
  add_attack_flags(*transfer, transfer_opts);
  transfer->add_option("--source", transfer_opts.source,
                       "Source patch index (row-major)")
      ->capture_default_str();

  ExportOpts export_opts;
  CLI::App* exp = app.add_subcommand(
      "export-attn", "Export per-layer head-averaged attention maps");
  exp->add_option("--model-ckpt", export_opts.ckpt, "Model checkpoint (.pfml)")
      ->required();
  exp->add_option("--data", export_opts.data, "Dataset (.pfds, test split)")
      ->required();
  exp->add_option("--out", export_opts.out, "Output directory")->required();
  exp->add_option("--config", export_opts.config_path,
                  "JSON config file; keys mirror the flags, flags win");
  exp->add_option("--index", export_opts.index, "Image index in the dataset")
      ->capture_default_str();
  exp->add_option("--query", export_opts.query,
                  "Query token (0 = class token)")
      ->capture_default_str();
  exp->add_option("--seed", export_opts.seed,
                  "Run seed (PF_SEED is the env fallback)")
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exits 0
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help() << std::flush;
    return 1;
  }

  try {
    if (*make_data) return run_make_data(*make_data, make_data_opts);
    if (*train) return run_train(*train, train_opts);
    if (*attack) return run_attack_family(*attack, attack_opts, true);
    if (*eval) return run_attack_family(*eval, eval_opts, false);
    if (*sweep) return run_sweep_cmd(*sweep, sweep_opts);
    if (*transfer) return run_transfer(*transfer, transfer_opts);
    if (*exp) return run_export(*exp, export_opts);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
