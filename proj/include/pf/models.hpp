#pragma once

#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "pf/rng.hpp"
#include "pf/tensor.hpp"

namespace pf {

// ---------------------------------------------------------------------------
// Patch geometry
// ---------------------------------------------------------------------------

/// Maps between pixel space ([H,W,C], row-major, channels fastest) and the
/// grid of non-overlapping square patches that both the ViT tokenizer and
/// the patch-level attacks operate on.  Patch indices are 0-based,
/// row-major over the grid.
struct PatchGrid {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t channels = 3;
  std::size_t patch = 4;

  std::size_t rows() const { return image_h / patch; }
  std::size_t cols() const { return image_w / patch; }
  std::size_t count() const { return rows() * cols(); }
  std::size_t patch_dim() const { return patch * patch * channels; }
  std::size_t pixels() const { return image_h * image_w * channels; }

  void validate() const;

  std::size_t patch_row(std::size_t p) const { return p / cols(); }
  std::size_t patch_col(std::size_t p) const { return p % cols(); }
  std::size_t patch_at(std::size_t grid_row, std::size_t grid_col) const {
    return grid_row * cols() + grid_col;
  }

  /// Flat [H*W*C] indicator, 1.0 on every value belonging to one of the
  /// given patches.  This is the pixel footprint the attacks are allowed
  /// to touch.
  std::vector<double> pixel_mask(const std::vector<std::size_t>& patches) const;

  /// Gather table realizing [H,W,C] -> [count, patch_dim]; within a patch,
  /// features run (y, x, channel), matching the image layout.
  std::vector<std::size_t> patchify_index() const;
};

/// Extract patch tokens: image [H,W,C] -> [n, p*p*C].
DiffTensor patchify(Tape& tape, const PatchGrid& grid, const DiffTensor& image);

// ---------------------------------------------------------------------------
// Attention capture
// ---------------------------------------------------------------------------

/// Post-softmax attention probabilities of one transformer block.
/// `probs` has shape [heads, T, T] with T = patch count + 1; token 0 is the
/// class token and token p+1 corresponds to grid patch p.  Row i of a head
/// is the distribution of query token i over key tokens, so it sums to 1.
struct AttentionStack {
  DiffTensor probs;

  std::size_t heads() const { return probs->shape[0]; }
  std::size_t tokens() const { return probs->shape[1]; }
};

inline constexpr std::size_t kClassToken = 0;

/// Token index of a 0-based patch (class token occupies slot 0).
inline std::size_t token_of_patch(std::size_t p) { return p + 1; }

// ---------------------------------------------------------------------------
// Model configurations
// ---------------------------------------------------------------------------

struct TinyViTConfig {
  std::size_t image = 32;
  std::size_t channels = 3;
  std::size_t patch = 4;
  std::size_t dim = 64;
  std::size_t layers = 6;
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t classes = 10;
};

struct TinyCNNConfig {
  std::size_t image = 32;
  std::size_t channels = 3;
  std::size_t patch = 4;  // footprint unit for patch-level attacks
  std::vector<std::size_t> widths = {32, 64, 128};  // conv-relu-pool stages
  std::size_t classes = 10;
};

// ---------------------------------------------------------------------------
// Model interface
// ---------------------------------------------------------------------------

struct ForwardResult {
  DiffTensor logits;                      // [1, classes]
  std::vector<AttentionStack> attention;  // one per block; empty for CNNs
};

/// A classifier over [H,W,C] images in [0,1].  Implementations keep their
/// parameters as long-lived leaf tensors, so a model can be shared across
/// tape epochs; freeze() drops them out of gradient flow, which both skips
/// the parameter-gradient GEMMs during attacks and keeps a shared model
/// read-only.
class Model {
 public:
  virtual ~Model() = default;

  /// Forward pass; `capture_attention` additionally materializes each
  /// block's [H,T,T] attention stack (ViT only).
  virtual ForwardResult run(Tape& tape, const DiffTensor& image,
                            bool capture_attention) = 0;

  virtual std::vector<DiffTensor> parameters() const = 0;
  virtual const PatchGrid& patch_grid() const = 0;
  virtual std::size_t classes() const = 0;
  virtual std::string kind() const = 0;  // "vit" or "cnn"
  virtual nlohmann::json config_json() const = 0;

  ForwardResult forward_with_attention(Tape& tape, const DiffTensor& image) {
    return run(tape, image, true);
  }
  DiffTensor forward(Tape& tape, const DiffTensor& image) {
    return run(tape, image, false).logits;
  }

  void set_requires_grad(bool on) {
    for (auto& p : parameters()) p->requires_grad = on;
  }
  void freeze() { set_requires_grad(false); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters()) n += p->numel();
    return n;
  }

  /// Gradient of the cross-entropy loss at `label` with respect to every
  /// input value; returns a flat [H*W*C] buffer.  Parameters keep whatever
  /// requires_grad state they had (their gradients are not disturbed when
  /// frozen).
  std::vector<double> input_gradient(Tape& tape,
                                     const std::vector<double>& image_hwc,
                                     std::size_t label);

  /// Predicted class for an image, no gradients involved.
  std::size_t predict(Tape& tape, const std::vector<double>& image_hwc);
};

std::unique_ptr<Model> make_tiny_vit(const TinyViTConfig& cfg,
                                     std::uint64_t seed);
std::unique_ptr<Model> make_tiny_cnn(const TinyCNNConfig& cfg,
                                     std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
// Binary format: magic "PFML", u32 version, u32 JSON length, the config
// JSON (carries "kind" plus the architecture fields), then each parameter
// in declaration order as u32 rank, u32 dims..., little-endian f64 values.

void save_model(const std::string& path, const Model& model);
std::unique_ptr<Model> load_model(const std::string& path);

}  // namespace pf
