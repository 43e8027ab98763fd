#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pf/adam.hpp"
#include "pf/models.hpp"
#include "pf/rng.hpp"
#include "pf/tensor.hpp"

namespace pf::attack {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class Variant { Vanilla, Sparse, MildL2, MildLinf, Pgd };
enum class Selection { Attention, Saliency, Random };

std::string to_string(Variant v);
std::string to_string(Selection s);
Variant variant_from_string(const std::string& s);
Selection selection_from_string(const std::string& s);

/// Knobs of the Patch-Fool family and the PGD baseline.  Defaults are the
/// reference protocol: attention-guided selection at block 5, attention-loss
/// weight 0.002, Adam step 0.2 decayed by 0.95 every 10 iterations, 250
/// iterations.
struct AttackConfig {
  Variant variant = Variant::Vanilla;
  Selection selection = Selection::Attention;
  std::size_t num_patches = 1;
  std::size_t layer_l = 5;  // 1-based block index used by attention selection
  double alpha = 0.002;     // attention-loss weight
  double eta0 = 0.2;        // initial Adam step size
  double decay = 0.95;      // multiplicative step decay, applied every 10 iters
  std::size_t iters = 250;
  std::size_t k = 0;        // sparse element budget (sparse variant only)
  double epsilon = 0.0;     // norm bound (mild variants; L-inf ball for pgd)
  std::uint64_t seed = 0;

  /// Sparse variant: when true, the mask is decided per spatial pixel and
  /// shared across channels (k then counts pixels, not scalar elements).
  /// Default off: the element-wise reading of the sparsity budget.
  bool sparse_spatial = false;

  /// When non-empty, skip selection and attack exactly these patches
  /// (0-based).  Used by the transferability sweep to pin the source patch.
  std::vector<std::size_t> forced_patches;

  /// Throws on out-of-range / missing-required fields for the variant.
  void validate(std::size_t patch_count, std::size_t model_layers) const;
};

inline constexpr std::size_t kDecayPeriod = 10;

/// Step size at iteration t (0-based): eta0 * decay^(t / 10).
double step_size_at(const AttackConfig& cfg, std::size_t t);

// ---------------------------------------------------------------------------
// State & results
// ---------------------------------------------------------------------------

/// Optimization state of one attack instance.  E lives in patch space
/// ([n, patch_dim]); `indicator` is the multi-hot patch indicator realizing
/// the row-broadcast product that confines E to the chosen patches.  For the
/// sparse variant `mhat` is the continuous mask relaxation whose top-k
/// binarization gates E element-wise.
struct PerturbationState {
  DiffTensor E;                    // [n, d] leaf
  std::vector<double> indicator;   // [n] multi-hot over patches
  DiffTensor mhat;                 // [n, d] leaf; null unless sparse
  AdamState adam;                  // covers E (and mhat when present)
};

struct AdversarialExample {
  std::vector<double> adversarial_image;   // [H*W*C], clamped to [0,1]
  std::vector<std::size_t> patch_indices;  // 0-based, descending importance
  std::size_t iterations = 0;
  double final_ce = 0.0;
  std::vector<double> final_attn;          // per-layer attention loss values
  std::size_t predicted = 0;               // argmax on the final image
  bool success = false;                    // predicted != label
};

/// Invoked after every iteration with the live state and the current
/// (unclamped) adversarial image; lets property tests assert locality,
/// budget, and feasibility at every step, not just at the end.
using IterationObserver = std::function<void(
    std::size_t iter, const PerturbationState& state,
    const std::vector<double>& adv_image)>;

// ---------------------------------------------------------------------------
// Patch selection
// ---------------------------------------------------------------------------

/// Attention-guided selection: score s_j = sum over heads and query rows of
/// the attention column of patch j at block `layer_l` (1-based), class-token
/// column excluded as a candidate.  Returns `count` 0-based patch indices in
/// descending score order; ties break toward the lower index.
std::vector<std::size_t> select_patches_attention(
    const std::vector<AttentionStack>& attn, std::size_t layer_l,
    std::size_t count);

/// Saliency-guided selection: per-patch mean of |d J_CE / d input| over the
/// patch's pixels; top-`count`, lowest-index tie-break.
std::vector<std::size_t> select_patches_saliency(
    Model& model, const std::vector<double>& image, std::size_t label,
    std::size_t count);

/// Uniform selection without replacement, reproducible from the rng state.
std::vector<std::size_t> select_patches_random(Rng& rng, std::size_t n,
                                               std::size_t count);

// ---------------------------------------------------------------------------
// Losses & gradient combination
// ---------------------------------------------------------------------------

/// Per-block attention-attraction losses: for each block l, the total
/// attention mass landing on the chosen patches' columns, summed over heads
/// and all query rows.  Differentiable through the attention tensors.
std::vector<DiffTensor> attention_loss(
    Tape& tape, const std::vector<AttentionStack>& attn,
    const std::vector<std::size_t>& patches);

/// J = J_CE(logits, label) + alpha * sum_l J_ATTN^(l).  With alpha == 0 the
/// result is exactly the cross-entropy node.
DiffTensor combined_loss(Tape& tape, const DiffTensor& logits,
                         std::size_t label,
                         const std::vector<AttentionStack>& attn,
                         const std::vector<std::size_t>& patches,
                         double alpha);

/// Conflict-aware gradient combination.  For each block l with
/// <grad_ce, grad_attn_l> <= 0, the conflicting component is removed by
/// beta_l = <grad_ce, grad_attn_l> / ||grad_ce||^2; blocks with positive
/// inner product keep beta_l = 0.  Returns
///   delta = grad_J - alpha * (sum_l beta_l) * grad_ce.
/// Caller contract: grad_J == grad_ce + alpha * sum_l grad_attn[l].
/// A zero grad_ce with some conflicting block logs a diagnostic and treats
/// every beta_l as 0.
std::vector<double> pcgrad_combine(
    const std::vector<double>& grad_J, const std::vector<double>& grad_ce,
    const std::vector<std::vector<double>>& grad_attn, double alpha);

// ---------------------------------------------------------------------------
// Sparse mask
// ---------------------------------------------------------------------------

/// Binarize the continuous mask: among entries inside indicated patches,
/// the min(k, #candidates) largest mhat values become 1 (ties toward the
/// lower flat index); everything else is 0.  Straight-through backward:
/// identity on candidate entries, zero elsewhere.  `channel_group` > 1
/// groups that many consecutive elements into one mask decision (scored by
/// the group's mhat sum) — the channel-shared spatial reading.
DiffTensor sparse_mask_forward(Tape& tape, const DiffTensor& mhat,
                               std::size_t k,
                               const std::vector<double>& indicator,
                               std::size_t channel_group = 1);

// ---------------------------------------------------------------------------
// Projections (mild variants)
// ---------------------------------------------------------------------------

/// Scale into the L2 ball of radius epsilon (norm over the whole buffer).
std::vector<double> project_l2(const std::vector<double>& e, double epsilon);

/// Clamp every element into [-epsilon, epsilon].
std::vector<double> project_linf(const std::vector<double>& e, double epsilon);

// ---------------------------------------------------------------------------
// Attacks
// ---------------------------------------------------------------------------

/// The Patch-Fool loop (vanilla and mild variants): pick patches once from
/// the clean input, then run Adam ascent on the combined loss with
/// conflict-aware gradients, decaying the step every 10 iterations; mild
/// variants re-project E after every update.  The adversarial image is
/// clamped to [0,1] at the end only.
///
/// Works on any model; attention machinery engages only when the model
/// reports attention (transformers).  Attention-guided selection on a model
/// without attention is an error.
AdversarialExample patch_fool_attack(Model& model,
                                     const std::vector<double>& image,
                                     std::size_t label,
                                     const AttackConfig& config,
                                     const IterationObserver& observer = {});

/// Sparse variant: perturbation is indicator ⊙ (M ⊙ E) with M re-binarized
/// from mhat every iteration; E and mhat are optimized jointly.  The final
/// image differs from clean in at most k elements.
AdversarialExample sparse_patch_fool_attack(
    Model& model, const std::vector<double>& image, std::size_t label,
    const AttackConfig& config, const IterationObserver& observer = {});

/// L-inf PGD over the whole image: signed-gradient ascent on J_CE with a
/// per-step clamp into the epsilon-ball and the input domain.
AdversarialExample pgd_attack(Model& model, const std::vector<double>& image,
                              std::size_t label, double epsilon,
                              std::size_t steps, double step_size);

/// Dispatch on config.variant (pgd uses config.epsilon, config.iters, and
/// step size epsilon/4).
AdversarialExample run_attack(Model& model, const std::vector<double>& image,
                              std::size_t label, const AttackConfig& config,
                              const IterationObserver& observer = {});

}  // namespace pf::attack
