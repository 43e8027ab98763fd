#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pf/attack.hpp"
#include "pf/dataset.hpp"
#include "pf/models.hpp"

namespace pf::harness {

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

using ModelSpec = std::variant<TinyViTConfig, TinyCNNConfig>;

std::unique_ptr<Model> make_model(const ModelSpec& spec, std::uint64_t seed);

/// Single-image Adam training with per-epoch shuffling; logs one line per
/// epoch to stdout when verbose, saves a checkpoint when a path is given.
/// Deterministic from the seed; throws on a non-finite loss.
std::unique_ptr<Model> train_model(const ModelSpec& spec, const Dataset& train,
                                   std::size_t epochs, double lr,
                                   std::uint64_t seed,
                                   const std::string& checkpoint_path = "",
                                   bool verbose = true);

// ---------------------------------------------------------------------------
// Robust evaluation
// ---------------------------------------------------------------------------

struct ImageRecord {
  std::size_t index = 0;  // index into the dataset
  bool clean_correct = false;
  bool adv_correct = false;
  std::vector<std::size_t> patches;
  std::size_t iterations = 0;
  bool failed = false;     // attack raised; the image counts as unattacked
  std::string error;
};

struct RobustnessReport {
  attack::AttackConfig config;
  double clean_accuracy = 0.0;
  double robust_accuracy = 0.0;
  std::vector<ImageRecord> records;
  std::uint64_t seed = 0;
  double wall_ms = 0.0;  // in-memory only; serialized into manifests, never
                         // into report files (byte-reproducibility)
};

/// The deterministic evaluation subset: `limit` indices sampled from
/// [0, dataset_size) under a fixed subset seed, ascending.  Every caller
/// (sweeps included) shares this, so comparisons are paired.
std::vector<std::size_t> evaluation_subset(std::size_t dataset_size,
                                           std::size_t limit);

/// Run the configured attack on each subset image.  Per-image RNG streams
/// derive from (config.seed, dataset index); workers > 1 processes images
/// concurrently with bit-identical results.  When `examples` is non-null it
/// receives the per-image attack outputs aligned with `records`.
RobustnessReport evaluate_robust(Model& model,
                                 const attack::AttackConfig& config,
                                 const Dataset& test, std::size_t limit,
                                 std::size_t workers = 1,
                                 std::vector<attack::AdversarialExample>*
                                     examples = nullptr);

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepAxis {
  std::string name;            // patches | epsilon | layer | pr | k
  std::vector<double> values;
};

struct SweepCell {
  std::vector<std::pair<std::string, double>> coords;
  RobustnessReport report;
};

struct SweepGrid {
  std::vector<std::string> axis_names;
  std::vector<SweepCell> cells;
  std::vector<std::pair<std::string, double>> summary;
};

/// Cross product of the axes; each cell evaluates the base config with the
/// axis values applied.  Cell seeds derive from the base seed and the cell
/// coordinates (never from execution order).
SweepGrid run_sweep(Model& model, const Dataset& test,
                    const attack::AttackConfig& base,
                    const std::vector<SweepAxis>& axes, std::size_t limit,
                    std::size_t workers = 1);

/// Attention-selection sweep over blocks, plus an early-vs-late summary
/// (mean robust accuracy over the first half of `layers` vs the rest).
SweepGrid layer_ablation_sweep(Model& model, const Dataset& test,
                               const std::vector<std::size_t>& layers,
                               const attack::AttackConfig& base,
                               std::size_t limit, std::size_t workers = 1);

/// Sparse-budget helper: the element budget for a global perturbation ratio
/// over the n×d patch matrix.
std::size_t k_from_pr(double pr, std::size_t n, std::size_t d);

// ---------------------------------------------------------------------------
// Transferability
// ---------------------------------------------------------------------------

struct TransferGrid {
  std::size_t source = 0;
  std::size_t grid_rows = 0;
  std::size_t grid_cols = 0;
  double clean_accuracy = 0.0;
  std::vector<double> robust_accuracy;  // one per target patch location
  std::size_t images = 0;
  std::uint64_t seed = 0;
};

/// Optimize the perturbation once per image at the source patch, then move
/// its content (adversarial minus clean, in patch space) to every target
/// slot without re-optimizing, recording accuracy per target location.
TransferGrid transferability_sweep(Model& model, const Dataset& test,
                                   std::size_t source,
                                   const attack::AttackConfig& base,
                                   std::size_t limit,
                                   std::size_t workers = 1);

// ---------------------------------------------------------------------------
// Attention export
// ---------------------------------------------------------------------------

/// Head-averaged attention map of one block (1-based), flattened [T, T].
std::vector<double> head_averaged_attention(Model& model,
                                            const std::vector<double>& image,
                                            std::size_t layer_l);

/// Write per-layer head-averaged attention rows for `query` as
/// `<out_base>.csv` (columns layer,row,col,value,class_token_value) and
/// `<out_base>.pfds` (one [rows, cols, 1] map per layer, label = layer).
void export_attention_maps(Model& model, const std::vector<double>& image,
                           std::size_t query, const std::string& out_base);

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

nlohmann::json config_to_json(const attack::AttackConfig& cfg);
attack::AttackConfig config_from_json(const nlohmann::json& j);

/// Report JSON carries no wall-clock data (manifests do).
nlohmann::json report_to_json(const RobustnessReport& report);

nlohmann::json grid_to_json(const SweepGrid& grid);
std::string grid_to_csv(const SweepGrid& grid);

nlohmann::json transfer_to_json(const TransferGrid& grid);
std::string transfer_to_csv(const TransferGrid& grid);

}  // namespace pf::harness
