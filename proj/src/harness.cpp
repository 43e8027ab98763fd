#include "pf/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "pf/adam.hpp"
#include "pf/ops.hpp"
#include "pf/rng.hpp"

namespace pf::harness {

namespace {

// Fixed stream tags for the harness's derived seeds.
constexpr std::uint64_t kSubsetSeed = 0x50465355ULL;   // evaluation subsets
constexpr std::uint64_t kShuffleStream = 0x53485546ULL;  // epoch shuffles

std::size_t argmax_index(const std::vector<double>& v) {
  return static_cast<std::size_t>(
      std::max_element(v.begin(), v.end()) - v.begin());
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

/// Format a double the same way everywhere (shortest round-trip).
std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  // trim to the shortest representation that round-trips
  for (int prec = 1; prec < 17; ++prec) {
    char probe[64];
    std::snprintf(probe, sizeof(probe), "%.*g", prec, v);
    if (std::strtod(probe, nullptr) == v) return probe;
  }
  return buf;
}

/// Run `count` slots over `workers` threads (or inline when workers <= 1).
/// Slots are claimed atomically; each writes only its own outputs, so the
/// result is independent of scheduling.
void parallel_slots(std::size_t count, std::size_t workers,
                    const std::function<void(std::size_t)>& body) {
  if (workers <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  auto drain = [&] {
    for (;;) {
      const std::size_t slot = next.fetch_add(1);
      if (slot >= count) return;
      body(slot);
    }
  };
  std::vector<std::thread> pool;
  const std::size_t spawn = std::min(workers, count);
  pool.reserve(spawn);
  for (std::size_t i = 0; i < spawn; ++i) pool.emplace_back(drain);
  for (auto& t : pool) t.join();
}

}  // namespace

// ---------------------------------------------------------------------------
// Models & training
// ---------------------------------------------------------------------------

std::unique_ptr<Model> make_model(const ModelSpec& spec, std::uint64_t seed) {
  return std::visit(
      [&](const auto& cfg) -> std::unique_ptr<Model> {
        using T = std::decay_t<decltype(cfg)>;
        if constexpr (std::is_same_v<T, TinyViTConfig>)
          return make_tiny_vit(cfg, seed);
        else
          return make_tiny_cnn(cfg, seed);
      },
      spec);
}

std::unique_ptr<Model> train_model(const ModelSpec& spec, const Dataset& train,
                                   std::size_t epochs, double lr,
                                   std::uint64_t seed,
                                   const std::string& checkpoint_path,
                                   bool verbose) {
  train.validate();
  if (train.split != "train")
    throw std::runtime_error("train_model: dataset split must be 'train'");
  if (train.count() == 0)
    throw std::runtime_error("train_model: empty dataset");

  auto model = make_model(spec, seed);
  model->set_requires_grad(true);
  auto params = model->parameters();
  AdamState adam = adam_init(params);

  const std::size_t N = train.count();
  Tape tape;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle = Rng::derive(seed, kShuffleStream + epoch);
    const auto order = shuffle.sample_without_replacement(N, N);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (const std::size_t idx : order) {
      tape.reset();
      auto leaf = tensor_from({train.h, train.w, train.c},
                              train.image_copy(idx));
      auto logits = model->forward(tape, leaf);
      auto ce = ops::cross_entropy_logits(tape, logits, train.labels[idx]);
      if (!std::isfinite(ce->value[0]))
        throw std::runtime_error("train_model: non-finite loss at epoch " +
                                 std::to_string(epoch));
      if (argmax_index(logits->value) == train.labels[idx]) ++correct;
      loss_sum += ce->value[0];
      for (auto& p : params) p->zero_grad();
      tape.backward(ce);
      adam_step(adam, params, lr);
    }
    if (verbose)
      std::printf("[train] epoch %zu/%zu  loss %.4f  acc %.2f%%\n", epoch + 1,
                  epochs, loss_sum / static_cast<double>(N),
                  100.0 * static_cast<double>(correct) /
                      static_cast<double>(N));
  }
  if (!checkpoint_path.empty()) save_model(checkpoint_path, *model);
  return model;
}

// ---------------------------------------------------------------------------
// Robust evaluation
// ---------------------------------------------------------------------------

std::vector<std::size_t> evaluation_subset(std::size_t dataset_size,
                                           std::size_t limit) {
  if (limit == 0 || limit > dataset_size) limit = dataset_size;
  Rng rng = Rng::derive(kSubsetSeed, dataset_size);
  auto subset = rng.sample_without_replacement(dataset_size, limit);
  std::sort(subset.begin(), subset.end());
  return subset;
}

RobustnessReport evaluate_robust(Model& model,
                                 const attack::AttackConfig& config,
                                 const Dataset& test, std::size_t limit,
                                 std::size_t workers,
                                 std::vector<attack::AdversarialExample>*
                                     examples) {
  test.validate();
  if (test.split != "test")
    throw std::runtime_error("evaluate_robust: dataset split must be 'test'");
  if (test.pixels() != model.patch_grid().pixels())
    throw std::runtime_error("evaluate_robust: dataset/model shape mismatch");
  model.freeze();

  const auto subset = evaluation_subset(test.count(), limit);
  RobustnessReport report;
  report.config = config;
  report.seed = config.seed;
  report.records.resize(subset.size());
  if (examples) examples->assign(subset.size(), {});

  const auto t0 = std::chrono::steady_clock::now();
  parallel_slots(subset.size(), workers, [&](std::size_t slot) {
    const std::size_t idx = subset[slot];
    const auto img = test.image_copy(idx);
    const std::size_t label = test.labels[idx];
    ImageRecord rec;
    rec.index = idx;
    Tape tape;
    const std::size_t clean_pred = model.predict(tape, img);
    rec.clean_correct = clean_pred == label;

    attack::AttackConfig per_image = config;
    per_image.seed = Rng::mix(config.seed, idx);
    try {
      auto ex = attack::run_attack(model, img, label, per_image);
      rec.adv_correct = ex.predicted == label;
      rec.patches = ex.patch_indices;
      rec.iterations = ex.iterations;
      if (examples) (*examples)[slot] = std::move(ex);
    } catch (const std::exception& e) {
      // Recorded, not fatal: the image counts as unattacked.
      rec.failed = true;
      rec.error = e.what();
      rec.adv_correct = rec.clean_correct;
      if (examples) {
        attack::AdversarialExample identity;
        identity.adversarial_image = img;
        identity.predicted = clean_pred;
        (*examples)[slot] = std::move(identity);
      }
    }
    report.records[slot] = std::move(rec);
  });
  const auto t1 = std::chrono::steady_clock::now();
  report.wall_ms =
      std::chrono::duration<double, std::milli>(t1 - t0).count();

  std::size_t clean = 0, robust = 0;
  for (const auto& r : report.records) {
    clean += r.clean_correct ? 1 : 0;
    robust += r.adv_correct ? 1 : 0;
  }
  const double denom = static_cast<double>(report.records.size());
  report.clean_accuracy = denom == 0.0 ? 0.0 : clean / denom;
  report.robust_accuracy = denom == 0.0 ? 0.0 : robust / denom;
  return report;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

std::size_t k_from_pr(double pr, std::size_t n, std::size_t d) {
  if (pr <= 0.0) throw std::runtime_error("k_from_pr: ratio must be positive");
  const double k = std::llround(pr * static_cast<double>(n) *
                                static_cast<double>(d));
  return std::max<std::size_t>(1, static_cast<std::size_t>(k));
}

namespace {

void apply_axis(attack::AttackConfig& cfg, const std::string& name, double v,
                const Model& model) {
  if (name == "patches") {
    cfg.num_patches = static_cast<std::size_t>(v);
  } else if (name == "epsilon") {
    cfg.epsilon = v;
  } else if (name == "layer") {
    cfg.layer_l = static_cast<std::size_t>(v);
  } else if (name == "k") {
    cfg.k = static_cast<std::size_t>(v);
  } else if (name == "pr") {
    cfg.k = k_from_pr(v, model.patch_grid().count(),
                      model.patch_grid().patch_dim());
  } else if (name == "iters") {
    cfg.iters = static_cast<std::size_t>(v);
  } else {
    throw std::runtime_error("sweep: unknown axis '" + name + "'");
  }
}

}  // namespace

SweepGrid run_sweep(Model& model, const Dataset& test,
                    const attack::AttackConfig& base,
                    const std::vector<SweepAxis>& axes, std::size_t limit,
                    std::size_t workers) {
  if (axes.empty()) throw std::runtime_error("sweep: no axes given");
  for (const auto& ax : axes)
    if (ax.values.empty())
      throw std::runtime_error("sweep: axis '" + ax.name + "' has no values");

  SweepGrid grid;
  for (const auto& ax : axes) grid.axis_names.push_back(ax.name);

  std::size_t cells = 1;
  for (const auto& ax : axes) cells *= ax.values.size();
  for (std::size_t cell = 0; cell < cells; ++cell) {
    // decode mixed-radix cell index, first axis slowest
    std::vector<std::pair<std::string, double>> coords;
    std::size_t rem = cell;
    for (std::size_t a = axes.size(); a-- > 0;) {
      const auto& ax = axes[a];
      coords.emplace_back(ax.name, ax.values[rem % ax.values.size()]);
      rem /= ax.values.size();
    }
    std::reverse(coords.begin(), coords.end());

    attack::AttackConfig cfg = base;
    std::string key;
    for (const auto& [name, value] : coords) {
      apply_axis(cfg, name, value, model);
      key += name + "=" + fmt_double(value) + ";";
    }
    // Cell seed from coordinates, never from execution order.
    cfg.seed = Rng::mix(base.seed, fnv1a(key));

    SweepCell out;
    out.coords = coords;
    out.report = evaluate_robust(model, cfg, test, limit, workers);
    grid.cells.push_back(std::move(out));
  }
  return grid;
}

SweepGrid layer_ablation_sweep(Model& model, const Dataset& test,
                               const std::vector<std::size_t>& layers,
                               const attack::AttackConfig& base,
                               std::size_t limit, std::size_t workers) {
  if (layers.empty())
    throw std::runtime_error("layer sweep: no layers given");
  attack::AttackConfig cfg = base;
  cfg.selection = attack::Selection::Attention;
  SweepAxis axis{"layer", {}};
  for (auto l : layers) axis.values.push_back(static_cast<double>(l));
  SweepGrid grid = run_sweep(model, test, cfg, {axis}, limit, workers);

  // early-vs-late summary: first half of the listed layers vs the rest
  const std::size_t half = (grid.cells.size() + 1) / 2;
  double early = 0.0, late = 0.0;
  for (std::size_t i = 0; i < grid.cells.size(); ++i)
    (i < half ? early : late) += grid.cells[i].report.robust_accuracy;
  grid.summary.emplace_back("early_mean_robust_accuracy",
                            early / static_cast<double>(half));
  if (grid.cells.size() > half)
    grid.summary.emplace_back(
        "late_mean_robust_accuracy",
        late / static_cast<double>(grid.cells.size() - half));
  return grid;
}

// ---------------------------------------------------------------------------
// Transferability
// ---------------------------------------------------------------------------

TransferGrid transferability_sweep(Model& model, const Dataset& test,
                                   std::size_t source,
                                   const attack::AttackConfig& base,
                                   std::size_t limit, std::size_t workers) {
  test.validate();
  if (test.split != "test")
    throw std::runtime_error("transfer sweep: dataset split must be 'test'");
  if (model.kind() != "vit")
    throw std::runtime_error("transfer sweep: needs a ViT model");
  if (base.variant == attack::Variant::Pgd)
    throw std::runtime_error("transfer sweep: PGD has no patch to move");
  const PatchGrid& grid = model.patch_grid();
  const std::size_t n = grid.count();
  const std::size_t d = grid.patch_dim();
  if (source >= n)
    throw std::runtime_error("transfer sweep: source patch out of range");
  model.freeze();

  const auto subset = evaluation_subset(test.count(), limit);
  const auto pidx = grid.patchify_index();

  TransferGrid out;
  out.source = source;
  out.grid_rows = grid.rows();
  out.grid_cols = grid.cols();
  out.images = subset.size();
  out.seed = base.seed;

  std::vector<std::uint8_t> clean_ok(subset.size(), 0);
  std::vector<std::vector<std::uint8_t>> target_ok(
      subset.size(), std::vector<std::uint8_t>(n, 0));

  parallel_slots(subset.size(), workers, [&](std::size_t slot) {
    const std::size_t idx = subset[slot];
    const auto img = test.image_copy(idx);
    const std::size_t label = test.labels[idx];
    Tape tape;
    clean_ok[slot] = model.predict(tape, img) == label ? 1 : 0;

    attack::AttackConfig cfg = base;
    cfg.forced_patches = {source};
    cfg.seed = Rng::mix(base.seed, idx);
    auto ex = attack::run_attack(model, img, label, cfg);

    // perturbation content of the source slot, in patch space
    std::vector<double> content(d);
    for (std::size_t f = 0; f < d; ++f)
      content[f] =
          ex.adversarial_image[pidx[source * d + f]] - img[pidx[source * d + f]];

    std::vector<double> adv = img;
    for (std::size_t t = 0; t < n; ++t) {
      if (t == source) {
        target_ok[slot][t] =
            model.predict(tape, ex.adversarial_image) == label ? 1 : 0;
        continue;
      }
      // stamp the content onto the target slot, restoring it afterwards
      for (std::size_t f = 0; f < d; ++f) {
        const std::size_t px = pidx[t * d + f];
        adv[px] = std::clamp(img[px] + content[f], 0.0, 1.0);
      }
      target_ok[slot][t] = model.predict(tape, adv) == label ? 1 : 0;
      for (std::size_t f = 0; f < d; ++f) {
        const std::size_t px = pidx[t * d + f];
        adv[px] = img[px];
      }
    }
  });

  const double denom = std::max<std::size_t>(1, subset.size());
  double clean = 0.0;
  for (auto v : clean_ok) clean += v;
  out.clean_accuracy = clean / denom;
  out.robust_accuracy.assign(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    double ok = 0.0;
    for (std::size_t s = 0; s < subset.size(); ++s) ok += target_ok[s][t];
    out.robust_accuracy[t] = ok / denom;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

std::vector<double> head_averaged_attention(Model& model,
                                            const std::vector<double>& image,
                                            std::size_t layer_l) {
  Tape tape;
  auto leaf = tensor_from({model.patch_grid().image_h,
                           model.patch_grid().image_w,
                           model.patch_grid().channels},
                          image);
  auto res = model.forward_with_attention(tape, leaf);
  if (res.attention.empty())
    throw std::runtime_error("attention export: model has no attention maps");
  if (layer_l < 1 || layer_l > res.attention.size())
    throw std::runtime_error("attention export: layer out of range");
  const auto& stack = res.attention[layer_l - 1];
  const std::size_t H = stack.heads();
  const std::size_t T = stack.tokens();
  std::vector<double> map(T * T, 0.0);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < T * T; ++i)
      map[i] += stack.probs->value[h * T * T + i];
  for (auto& v : map) v /= static_cast<double>(H);
  return map;
}

void export_attention_maps(Model& model, const std::vector<double>& image,
                           std::size_t query, const std::string& out_base) {
  const PatchGrid& grid = model.patch_grid();
  Tape tape;
  auto leaf = tensor_from({grid.image_h, grid.image_w, grid.channels}, image);
  auto res = model.forward_with_attention(tape, leaf);
  if (res.attention.empty())
    throw std::runtime_error("attention export: model has no attention maps");
  const std::size_t L = res.attention.size();
  const std::size_t T = res.attention[0].tokens();
  if (query >= T)
    throw std::runtime_error("attention export: query token out of range");
  const std::size_t n = grid.count();

  std::ofstream csv(out_base + ".csv");
  if (!csv)
    throw std::runtime_error("attention export: cannot write " + out_base +
                             ".csv");
  csv << "layer,row,col,value,class_token_value\n";

  Dataset maps;
  maps.h = grid.rows();
  maps.w = grid.cols();
  maps.c = 1;
  maps.classes = static_cast<std::uint32_t>(L);
  maps.split = "test";
  maps.name = "attention-maps";

  for (std::size_t l = 0; l < L; ++l) {
    const auto& stack = res.attention[l];
    const std::size_t H = stack.heads();
    std::vector<double> row(T, 0.0);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t t = 0; t < T; ++t)
        row[t] += stack.probs->value[(h * T + query) * T + t];
    for (auto& v : row) v /= static_cast<double>(H);

    const double class_mass = row[kClassToken];
    for (std::size_t p = 0; p < n; ++p) {
      csv << (l + 1) << ',' << grid.patch_row(p) << ',' << grid.patch_col(p)
          << ',' << fmt_double(row[token_of_patch(p)]) << ','
          << fmt_double(class_mass) << '\n';
      maps.images.push_back(std::clamp(row[token_of_patch(p)], 0.0, 1.0));
    }
    maps.labels.push_back(static_cast<std::uint32_t>(l));
  }
  if (!csv) throw std::runtime_error("attention export: csv write failed");
  csv.close();
  save_dataset(out_base + ".pfds", maps);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

nlohmann::json config_to_json(const attack::AttackConfig& cfg) {
  nlohmann::json j;
  j["variant"] = attack::to_string(cfg.variant);
  j["select"] = attack::to_string(cfg.selection);
  j["patches"] = cfg.num_patches;
  j["layer"] = cfg.layer_l;
  j["alpha"] = cfg.alpha;
  j["eta"] = cfg.eta0;
  j["decay"] = cfg.decay;
  j["iters"] = cfg.iters;
  j["k"] = cfg.k;
  j["epsilon"] = cfg.epsilon;
  j["seed"] = cfg.seed;
  j["sparse-spatial"] = cfg.sparse_spatial;
  if (!cfg.forced_patches.empty()) j["forced-patches"] = cfg.forced_patches;
  return j;
}

attack::AttackConfig config_from_json(const nlohmann::json& j) {
  attack::AttackConfig cfg;
  if (j.contains("variant"))
    cfg.variant = attack::variant_from_string(j.at("variant").get<std::string>());
  if (j.contains("select"))
    cfg.selection =
        attack::selection_from_string(j.at("select").get<std::string>());
  if (j.contains("patches")) cfg.num_patches = j.at("patches").get<std::size_t>();
  if (j.contains("layer")) cfg.layer_l = j.at("layer").get<std::size_t>();
  if (j.contains("alpha")) cfg.alpha = j.at("alpha").get<double>();
  if (j.contains("eta")) cfg.eta0 = j.at("eta").get<double>();
  if (j.contains("decay")) cfg.decay = j.at("decay").get<double>();
  if (j.contains("iters")) cfg.iters = j.at("iters").get<std::size_t>();
  if (j.contains("k")) cfg.k = j.at("k").get<std::size_t>();
  if (j.contains("epsilon")) cfg.epsilon = j.at("epsilon").get<double>();
  if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("sparse-spatial"))
    cfg.sparse_spatial = j.at("sparse-spatial").get<bool>();
  if (j.contains("forced-patches"))
    cfg.forced_patches =
        j.at("forced-patches").get<std::vector<std::size_t>>();
  return cfg;
}

nlohmann::json report_to_json(const RobustnessReport& report) {
  nlohmann::json j;
  j["config"] = config_to_json(report.config);
  j["clean_accuracy"] = report.clean_accuracy;
  j["robust_accuracy"] = report.robust_accuracy;
  j["seed"] = report.seed;
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& r : report.records) {
    nlohmann::json e;
    e["index"] = r.index;
    e["clean_correct"] = r.clean_correct;
    e["adv_correct"] = r.adv_correct;
    e["patches"] = r.patches;
    e["iterations"] = r.iterations;
    if (r.failed) {
      e["failed"] = true;
      e["error"] = r.error;
    }
    recs.push_back(std::move(e));
  }
  j["records"] = std::move(recs);
  return j;
}

nlohmann::json grid_to_json(const SweepGrid& grid) {
  nlohmann::json j;
  j["axes"] = grid.axis_names;
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& cell : grid.cells) {
    nlohmann::json c;
    nlohmann::json coords;
    for (const auto& [name, value] : cell.coords) coords[name] = value;
    c["coords"] = std::move(coords);
    c["report"] = report_to_json(cell.report);
    cells.push_back(std::move(c));
  }
  j["cells"] = std::move(cells);
  nlohmann::json summary;
  for (const auto& [name, value] : grid.summary) summary[name] = value;
  j["summary"] = std::move(summary);
  return j;
}

std::string grid_to_csv(const SweepGrid& grid) {
  std::ostringstream os;
  for (const auto& name : grid.axis_names) os << name << ',';
  os << "clean_accuracy,robust_accuracy\n";
  for (const auto& cell : grid.cells) {
    for (const auto& name : grid.axis_names) {
      for (const auto& [cname, cvalue] : cell.coords)
        if (cname == name) os << fmt_double(cvalue);
      os << ',';
    }
    os << fmt_double(cell.report.clean_accuracy) << ','
       << fmt_double(cell.report.robust_accuracy) << '\n';
  }
  return os.str();
}

nlohmann::json transfer_to_json(const TransferGrid& grid) {
  nlohmann::json j;
  j["source"] = grid.source;
  j["grid_rows"] = grid.grid_rows;
  j["grid_cols"] = grid.grid_cols;
  j["clean_accuracy"] = grid.clean_accuracy;
  j["robust_accuracy"] = grid.robust_accuracy;
  j["images"] = grid.images;
  j["seed"] = grid.seed;
  return j;
}

std::string transfer_to_csv(const TransferGrid& grid) {
  std::ostringstream os;
  os << "target,row,col,robust_accuracy\n";
  for (std::size_t t = 0; t < grid.robust_accuracy.size(); ++t)
    os << t << ',' << t / grid.grid_cols << ',' << t % grid.grid_cols << ','
       << fmt_double(grid.robust_accuracy[t]) << '\n';
  return os.str();
}

}  // namespace pf::harness
