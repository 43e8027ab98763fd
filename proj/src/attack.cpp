#include "pf/attack.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "pf/ops.hpp"

namespace pf::attack {

namespace {

// RNG stream tags, mixed with the run seed so selection and mask init draw
// from independent deterministic streams.
constexpr std::uint64_t kSelectStream = 0x73656c6563ULL;
constexpr std::uint64_t kMaskStream = 0x6d61736bULL;

std::size_t argmax_index(const std::vector<double>& v) {
  return static_cast<std::size_t>(
      std::max_element(v.begin(), v.end()) - v.begin());
}

/// Indices of the `count` largest scores, descending; exact-tie break
/// toward the lower index.
std::vector<std::size_t> top_indices(const std::vector<double>& scores,
                                     std::size_t count) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });
  order.resize(count);
  return order;
}

/// Top-k binarization over candidate groups.  `group` consecutive elements
/// share one decision (group == 1 is element-wise); a group is a candidate
/// when its row's indicator is set.  Exactly min(k, #candidates) groups win,
/// ties toward the lower group index.
std::vector<double> binarize_topk(const std::vector<double>& vals,
                                  std::size_t n, std::size_t d, std::size_t k,
                                  const std::vector<double>& indicator,
                                  std::size_t group) {
  if (group == 0 || d % group != 0)
    throw std::runtime_error("binarize_topk: channel group must divide the patch dim");
  const std::size_t groups_per_row = d / group;
  std::vector<std::size_t> cand;
  std::vector<double> score;
  for (std::size_t p = 0; p < n; ++p) {
    if (indicator[p] == 0.0) continue;
    for (std::size_t g = 0; g < groups_per_row; ++g) {
      double s = 0.0;
      for (std::size_t c = 0; c < group; ++c) s += vals[p * d + g * group + c];
      cand.push_back(p * groups_per_row + g);
      score.push_back(s);
    }
  }
  std::vector<std::size_t> order(cand.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (score[a] != score[b]) return score[a] > score[b];
    return cand[a] < cand[b];
  });
  const std::size_t wins = std::min(k, cand.size());
  std::vector<double> mask(n * d, 0.0);
  for (std::size_t w = 0; w < wins; ++w) {
    const std::size_t gid = cand[order[w]];
    const std::size_t p = gid / groups_per_row;
    const std::size_t g = gid % groups_per_row;
    for (std::size_t c = 0; c < group; ++c) mask[p * d + g * group + c] = 1.0;
  }
  return mask;
}

void check_patches(const std::vector<std::size_t>& patches, std::size_t n) {
  if (patches.empty())
    throw std::runtime_error("attack: empty patch set");
  for (auto p : patches)
    if (p >= n)
      throw std::runtime_error("attack: patch index out of range");
}

}  // namespace

// ---------------------------------------------------------------------------
// Config plumbing
// ---------------------------------------------------------------------------

std::string to_string(Variant v) {
  switch (v) {
    case Variant::Vanilla: return "vanilla";
    case Variant::Sparse: return "sparse";
    case Variant::MildL2: return "mild-l2";
    case Variant::MildLinf: return "mild-linf";
    case Variant::Pgd: return "pgd";
  }
  throw std::runtime_error("unreachable variant");
}

std::string to_string(Selection s) {
  switch (s) {
    case Selection::Attention: return "attention";
    case Selection::Saliency: return "saliency";
    case Selection::Random: return "random";
  }
  throw std::runtime_error("unreachable selection");
}

Variant variant_from_string(const std::string& s) {
  if (s == "vanilla") return Variant::Vanilla;
  if (s == "sparse") return Variant::Sparse;
  if (s == "mild-l2" || s == "mild_l2") return Variant::MildL2;
  if (s == "mild-linf" || s == "mild_linf") return Variant::MildLinf;
  if (s == "pgd") return Variant::Pgd;
  throw std::runtime_error("unknown attack variant: " + s);
}

Selection selection_from_string(const std::string& s) {
  if (s == "attention") return Selection::Attention;
  if (s == "saliency") return Selection::Saliency;
  if (s == "random") return Selection::Random;
  throw std::runtime_error("unknown selection strategy: " + s);
}

void AttackConfig::validate(std::size_t patch_count,
                            std::size_t model_layers) const {
  if (num_patches < 1 || num_patches > patch_count)
    throw std::runtime_error("attack config: num_patches must be in [1, n]");
  if (layer_l < 1)
    throw std::runtime_error("attack config: layer_l is 1-based");
  if (model_layers > 0 && layer_l > model_layers)
    throw std::runtime_error("attack config: layer_l exceeds model depth");
  if (alpha < 0.0)
    throw std::runtime_error("attack config: alpha must be >= 0");
  if (eta0 < 0.0)
    throw std::runtime_error("attack config: eta0 must be >= 0");
  if (decay <= 0.0)
    throw std::runtime_error("attack config: decay must be positive");
  if (iters < 1)
    throw std::runtime_error("attack config: iters must be >= 1");
  if (variant == Variant::Sparse && k < 1)
    throw std::runtime_error("attack config: sparse variant needs k >= 1");
  const bool needs_epsilon = variant == Variant::MildL2 ||
                             variant == Variant::MildLinf ||
                             variant == Variant::Pgd;
  if (needs_epsilon && epsilon <= 0.0)
    throw std::runtime_error("attack config: this variant needs epsilon > 0");
  for (auto p : forced_patches)
    if (p >= patch_count)
      throw std::runtime_error("attack config: forced patch out of range");
}

double step_size_at(const AttackConfig& cfg, std::size_t t) {
  return cfg.eta0 * std::pow(cfg.decay, static_cast<double>(t / kDecayPeriod));
}

// ---------------------------------------------------------------------------
// Patch selection
// ---------------------------------------------------------------------------

std::vector<std::size_t> select_patches_attention(
    const std::vector<AttentionStack>& attn, std::size_t layer_l,
    std::size_t count) {
  if (attn.empty())
    throw std::runtime_error("select_patches_attention: no attention maps");
  if (layer_l < 1 || layer_l > attn.size())
    throw std::runtime_error("select_patches_attention: layer out of range");
  const AttentionStack& stack = attn[layer_l - 1];
  const std::size_t heads = stack.heads();
  const std::size_t T = stack.tokens();
  const std::size_t n = T - 1;
  if (count < 1 || count > n)
    throw std::runtime_error("select_patches_attention: count out of range");
  const auto& a = stack.probs->value;
  std::vector<double> scores(n, 0.0);
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t i = 0; i < T; ++i) {
      const double* row = a.data() + (h * T + i) * T;
      for (std::size_t j = 0; j < n; ++j) scores[j] += row[token_of_patch(j)];
    }
  return top_indices(scores, count);
}

std::vector<std::size_t> select_patches_saliency(Model& model,
                                                 const std::vector<double>& image,
                                                 std::size_t label,
                                                 std::size_t count) {
  const PatchGrid& grid = model.patch_grid();
  const std::size_t n = grid.count();
  const std::size_t d = grid.patch_dim();
  if (count < 1 || count > n)
    throw std::runtime_error("select_patches_saliency: count out of range");
  Tape tape;
  const std::vector<double> g = model.input_gradient(tape, image, label);
  const auto pidx = grid.patchify_index();
  std::vector<double> scores(n, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    double s = 0.0;
    for (std::size_t f = 0; f < d; ++f) s += std::abs(g[pidx[p * d + f]]);
    scores[p] = s / static_cast<double>(d);
  }
  return top_indices(scores, count);
}

std::vector<std::size_t> select_patches_random(Rng& rng, std::size_t n,
                                               std::size_t count) {
  if (count > n)
    throw std::runtime_error("select_patches_random: count exceeds n");
  return rng.sample_without_replacement(n, count);
}

// ---------------------------------------------------------------------------
// Losses & gradient combination
// ---------------------------------------------------------------------------

std::vector<DiffTensor> attention_loss(Tape& tape,
                                       const std::vector<AttentionStack>& attn,
                                       const std::vector<std::size_t>& patches) {
  if (attn.empty())
    throw std::runtime_error("attention_loss: no attention maps");
  std::vector<DiffTensor> losses;
  losses.reserve(attn.size());
  std::vector<double> w;
  std::size_t w_heads = 0, w_tokens = 0;
  for (const auto& stack : attn) {
    const std::size_t heads = stack.heads();
    const std::size_t T = stack.tokens();
    check_patches(patches, T - 1);
    if (w.empty() || heads != w_heads || T != w_tokens) {
      w.assign(heads * T * T, 0.0);
      for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t i = 0; i < T; ++i)
          for (auto p : patches) w[(h * T + i) * T + token_of_patch(p)] = 1.0;
      w_heads = heads;
      w_tokens = T;
    }
    losses.push_back(ops::sum_weighted(tape, stack.probs, w));
  }
  return losses;
}

DiffTensor combined_loss(Tape& tape, const DiffTensor& logits,
                         std::size_t label,
                         const std::vector<AttentionStack>& attn,
                         const std::vector<std::size_t>& patches,
                         double alpha) {
  DiffTensor ce = ops::cross_entropy_logits(tape, logits, label);
  if (alpha == 0.0 || attn.empty()) return ce;
  auto losses = attention_loss(tape, attn, patches);
  DiffTensor acc = losses[0];
  for (std::size_t l = 1; l < losses.size(); ++l)
    acc = ops::add(tape, acc, losses[l]);
  return ops::add(tape, ce, ops::scale(tape, acc, alpha));
}

std::vector<double> pcgrad_combine(
    const std::vector<double>& grad_J, const std::vector<double>& grad_ce,
    const std::vector<std::vector<double>>& grad_attn, double alpha) {
  const std::size_t m = grad_J.size();
  if (grad_ce.size() != m)
    throw std::runtime_error("pcgrad_combine: gradient size mismatch");
  for (const auto& g : grad_attn)
    if (g.size() != m)
      throw std::runtime_error("pcgrad_combine: gradient size mismatch");
  double ce_norm2 = 0.0;
  for (double v : grad_ce) ce_norm2 += v * v;
  double beta_sum = 0.0;
  bool warned = false;
  for (const auto& g : grad_attn) {
    double dot = 0.0;
    for (std::size_t i = 0; i < m; ++i) dot += grad_ce[i] * g[i];
    if (dot >= 0.0) continue;  // no conflict; beta stays 0
    if (ce_norm2 == 0.0) {
      if (!warned) {
        std::fprintf(stderr,
                     "pcgrad_combine: zero cross-entropy gradient with a "
                     "conflicting attention gradient; betas forced to 0\n");
        warned = true;
      }
      continue;
    }
    beta_sum += dot / ce_norm2;
  }
  std::vector<double> delta(m);
  const double c = alpha * beta_sum;
  for (std::size_t i = 0; i < m; ++i) delta[i] = grad_J[i] - c * grad_ce[i];
  return delta;
}

// ---------------------------------------------------------------------------
// Sparse mask
// ---------------------------------------------------------------------------

DiffTensor sparse_mask_forward(Tape& tape, const DiffTensor& mhat,
                               std::size_t k,
                               const std::vector<double>& indicator,
                               std::size_t channel_group) {
  if (k < 1) throw std::runtime_error("sparse_mask_forward: k must be >= 1");
  if (mhat->rank() != 2)
    throw std::runtime_error("sparse_mask_forward: mhat must be [n, d]");
  const std::size_t n = mhat->shape[0];
  const std::size_t d = mhat->shape[1];
  if (indicator.size() != n)
    throw std::runtime_error("sparse_mask_forward: indicator size mismatch");
  tape.check_usable(*mhat, "sparse_mask_forward");
  auto out = tensor_from({n, d},
                         binarize_topk(mhat->value, n, d, k, indicator,
                                       channel_group),
                         mhat->requires_grad);
  if (out->requires_grad) {
    // Straight-through: identity on every candidate entry regardless of
    // whether it won the top-k, zero outside indicated rows.
    std::vector<double> candidate(n * d, 0.0);
    for (std::size_t p = 0; p < n; ++p)
      if (indicator[p] != 0.0)
        std::fill(candidate.begin() + p * d, candidate.begin() + (p + 1) * d,
                  1.0);
    DiffTensor src = mhat;
    tape.record(out, {mhat}, [out, src, candidate]() {
      auto& g = src->grad_ref();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += candidate[i] * out->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Projections
// ---------------------------------------------------------------------------

std::vector<double> project_l2(const std::vector<double>& e, double epsilon) {
  double norm2 = 0.0;
  for (double v : e) norm2 += v * v;
  const double norm = std::sqrt(norm2);
  if (norm <= epsilon) return e;
  std::vector<double> out(e.size());
  const double s = epsilon / norm;
  for (std::size_t i = 0; i < e.size(); ++i) out[i] = e[i] * s;
  return out;
}

std::vector<double> project_linf(const std::vector<double>& e, double epsilon) {
  std::vector<double> out(e.size());
  for (std::size_t i = 0; i < e.size(); ++i)
    out[i] = std::clamp(e[i], -epsilon, epsilon);
  return out;
}

// ---------------------------------------------------------------------------
// The Patch-Fool loop
// ---------------------------------------------------------------------------

namespace {

/// Shared core of the vanilla/mild/sparse variants.
AdversarialExample run_patch_fool(Model& model,
                                  const std::vector<double>& image,
                                  std::size_t label, const AttackConfig& cfg,
                                  const IterationObserver& observer) {
  const PatchGrid& grid = model.patch_grid();
  if (image.size() != grid.pixels())
    throw std::runtime_error("attack: image size does not match the model grid");
  if (label >= model.classes())
    throw std::runtime_error("attack: label out of range");
  const std::size_t n = grid.count();
  const std::size_t d = grid.patch_dim();
  cfg.validate(n, 0);
  const bool is_sparse = cfg.variant == Variant::Sparse;
  const bool is_vit = model.kind() == "vit";
  const std::size_t mask_group = cfg.sparse_spatial ? grid.channels : 1;

  Tape tape;

  // --- patch selection, once, from the clean input -------------------------
  std::vector<std::size_t> patches;
  if (!cfg.forced_patches.empty()) {
    patches = cfg.forced_patches;
    check_patches(patches, n);
  } else {
    switch (cfg.selection) {
      case Selection::Attention: {
        tape.reset();
        auto clean_leaf = tensor_from({grid.image_h, grid.image_w,
                                       grid.channels},
                                      image);
        auto res = model.run(tape, clean_leaf, true);
        if (res.attention.empty())
          throw std::runtime_error(
              "attack: attention-guided selection needs a model that exposes "
              "attention maps");
        patches = select_patches_attention(res.attention, cfg.layer_l,
                                           cfg.num_patches);
        break;
      }
      case Selection::Saliency:
        patches = select_patches_saliency(model, image, label,
                                          cfg.num_patches);
        break;
      case Selection::Random: {
        Rng rng = Rng::derive(cfg.seed, kSelectStream);
        patches = select_patches_random(rng, n, cfg.num_patches);
        break;
      }
    }
  }

  // --- constants shared across iterations ----------------------------------
  const auto pidx = grid.patchify_index();
  std::vector<double> clean_patch_vals(n * d);
  for (std::size_t i = 0; i < n * d; ++i) clean_patch_vals[i] = image[pidx[i]];
  auto clean_patches = tensor_from({n, d}, clean_patch_vals);
  std::vector<std::size_t> inv(n * d);
  for (std::size_t i = 0; i < n * d; ++i) inv[pidx[i]] = i;

  PerturbationState st;
  st.indicator.assign(n, 0.0);
  for (auto p : patches) st.indicator[p] = 1.0;
  std::vector<double> rowmask_vals(n * d, 0.0);
  for (auto p : patches)
    std::fill(rowmask_vals.begin() + p * d, rowmask_vals.begin() + (p + 1) * d,
              1.0);
  auto rowmask = tensor_from({n, d}, rowmask_vals);

  st.E = tensor_zeros({n, d}, true);
  std::vector<DiffTensor> opt;
  opt.push_back(st.E);
  if (is_sparse) {
    Rng rng = Rng::derive(cfg.seed, kMaskStream);
    std::vector<double> init(n * d);
    for (auto& v : init) v = rng.uniform01();
    st.mhat = tensor_from({n, d}, std::move(init), true);
    opt.push_back(st.mhat);
  }
  st.adam = adam_init(opt);

  const bool use_attn_loss = is_vit && cfg.alpha != 0.0;

  // Current adversarial image from the live state (optionally clamped).
  auto rebuild_image = [&](bool clamp_domain) {
    std::vector<double> adv = image;
    std::vector<double> gate =
        is_sparse ? binarize_topk(st.mhat->value, n, d, cfg.k, st.indicator,
                                  mask_group)
                  : rowmask_vals;
    for (std::size_t i = 0; i < n * d; ++i)
      if (gate[i] != 0.0) adv[pidx[i]] = clean_patch_vals[i] + st.E->value[i];
    if (clamp_domain)
      for (auto& v : adv) v = std::clamp(v, 0.0, 1.0);
    return adv;
  };

  // --- Adam ascent ----------------------------------------------------------
  for (std::size_t t = 0; t < cfg.iters; ++t) {
    tape.reset();
    DiffTensor masked_E;
    if (is_sparse) {
      auto M = sparse_mask_forward(tape, st.mhat, cfg.k, st.indicator,
                                   mask_group);
      masked_E = ops::mul(tape, st.E, M);
    } else {
      masked_E = ops::mul(tape, st.E, rowmask);
    }
    auto patched = ops::add(tape, masked_E, clean_patches);
    auto adv = ops::gather(tape, patched, inv,
                           {grid.image_h, grid.image_w, grid.channels});
    auto res = model.run(tape, adv, use_attn_loss);
    auto ce = ops::cross_entropy_logits(tape, res.logits, label);
    std::vector<DiffTensor> attn_losses;
    if (use_attn_loss && !res.attention.empty())
      attn_losses = attention_loss(tape, res.attention, patches);

    double objective = ce->value[0];
    for (const auto& al : attn_losses) objective += cfg.alpha * al->value[0];
    if (!std::isfinite(objective))
      throw std::runtime_error("attack: non-finite objective at iteration " +
                               std::to_string(t));

    // Component gradients wrt each optimized leaf, from one shared forward.
    for (auto& p : opt) p->zero_grad();
    tape.backward(ce);
    std::vector<std::vector<double>> g_ce(opt.size());
    for (std::size_t j = 0; j < opt.size(); ++j) {
      g_ce[j] = opt[j]->grad_ref();
      opt[j]->zero_grad();
    }
    std::vector<std::vector<std::vector<double>>> g_attn(opt.size());
    for (const auto& al : attn_losses) {
      tape.backward(al);
      for (std::size_t j = 0; j < opt.size(); ++j) {
        g_attn[j].push_back(opt[j]->grad_ref());
        opt[j]->zero_grad();
      }
    }

    for (std::size_t j = 0; j < opt.size(); ++j) {
      std::vector<double> grad_J = g_ce[j];
      for (const auto& ga : g_attn[j])
        for (std::size_t i = 0; i < grad_J.size(); ++i)
          grad_J[i] += cfg.alpha * ga[i];
      opt[j]->grad_ref() =
          pcgrad_combine(grad_J, g_ce[j], g_attn[j], cfg.alpha);
    }
    adam_step(st.adam, opt, step_size_at(cfg, t), /*direction=*/+1.0);

    if (cfg.variant == Variant::MildL2)
      st.E->value = project_l2(st.E->value, cfg.epsilon);
    else if (cfg.variant == Variant::MildLinf)
      st.E->value = project_linf(st.E->value, cfg.epsilon);

    // Locality by construction *and* by enforcement: rows outside the
    // indicated patches never receive gradient, but zero them anyway so the
    // invariant holds exactly.
    for (std::size_t p = 0; p < n; ++p)
      if (st.indicator[p] == 0.0)
        std::fill(st.E->value.begin() + p * d,
                  st.E->value.begin() + (p + 1) * d, 0.0);

    if (observer) observer(t, st, rebuild_image(false));
  }

  // --- finalize --------------------------------------------------------------
  AdversarialExample ex;
  ex.adversarial_image = rebuild_image(true);
  ex.patch_indices = patches;
  ex.iterations = cfg.iters;

  tape.reset();
  auto final_leaf = tensor_from({grid.image_h, grid.image_w, grid.channels},
                                ex.adversarial_image);
  auto res = model.run(tape, final_leaf, is_vit);
  ex.predicted = argmax_index(res.logits->value);
  ex.success = ex.predicted != label;
  {
    auto ce = ops::cross_entropy_logits(tape, res.logits, label);
    ex.final_ce = ce->value[0];
  }
  for (const auto& stack : res.attention) {
    const std::size_t heads = stack.heads();
    const std::size_t T = stack.tokens();
    double mass = 0.0;
    const auto& a = stack.probs->value;
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < T; ++i)
        for (auto p : patches) mass += a[(h * T + i) * T + token_of_patch(p)];
    ex.final_attn.push_back(mass);
  }
  return ex;
}

}  // namespace

AdversarialExample patch_fool_attack(Model& model,
                                     const std::vector<double>& image,
                                     std::size_t label,
                                     const AttackConfig& config,
                                     const IterationObserver& observer) {
  if (config.variant != Variant::Vanilla && config.variant != Variant::MildL2 &&
      config.variant != Variant::MildLinf)
    throw std::runtime_error(
        "patch_fool_attack: variant must be vanilla or mild (use the sparse/"
        "pgd entry points otherwise)");
  return run_patch_fool(model, image, label, config, observer);
}

AdversarialExample sparse_patch_fool_attack(Model& model,
                                            const std::vector<double>& image,
                                            std::size_t label,
                                            const AttackConfig& config,
                                            const IterationObserver& observer) {
  if (config.variant != Variant::Sparse)
    throw std::runtime_error("sparse_patch_fool_attack: variant must be sparse");
  return run_patch_fool(model, image, label, config, observer);
}

AdversarialExample pgd_attack(Model& model, const std::vector<double>& image,
                              std::size_t label, double epsilon,
                              std::size_t steps, double step_size) {
  const PatchGrid& grid = model.patch_grid();
  if (image.size() != grid.pixels())
    throw std::runtime_error("pgd: image size does not match the model grid");
  if (label >= model.classes())
    throw std::runtime_error("pgd: label out of range");
  if (epsilon < 0.0)
    throw std::runtime_error("pgd: epsilon must be >= 0");

  Tape tape;
  std::vector<double> delta(image.size(), 0.0);
  for (std::size_t t = 0; t < steps; ++t) {
    tape.reset();
    std::vector<double> adv(image.size());
    for (std::size_t i = 0; i < adv.size(); ++i) adv[i] = image[i] + delta[i];
    auto leaf = tensor_from({grid.image_h, grid.image_w, grid.channels},
                            std::move(adv), true);
    auto ce = ops::cross_entropy_logits(tape, model.forward(tape, leaf), label);
    if (!std::isfinite(ce->value[0]))
      throw std::runtime_error("pgd: non-finite loss at step " +
                               std::to_string(t));
    tape.backward(ce);
    const auto& g = leaf->grad_ref();
    for (std::size_t i = 0; i < delta.size(); ++i) {
      const double sg = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
      double v = std::clamp(delta[i] + step_size * sg, -epsilon, epsilon);
      // keep the iterate inside the input domain as well
      v = std::clamp(image[i] + v, 0.0, 1.0) - image[i];
      delta[i] = v;
    }
  }

  AdversarialExample ex;
  ex.adversarial_image.resize(image.size());
  for (std::size_t i = 0; i < image.size(); ++i)
    ex.adversarial_image[i] = std::clamp(image[i] + delta[i], 0.0, 1.0);
  ex.iterations = steps;

  tape.reset();
  auto leaf = tensor_from({grid.image_h, grid.image_w, grid.channels},
                          ex.adversarial_image);
  auto logits = model.forward(tape, leaf);
  ex.predicted = argmax_index(logits->value);
  ex.success = ex.predicted != label;
  auto ce = ops::cross_entropy_logits(tape, logits, label);
  ex.final_ce = ce->value[0];
  return ex;
}

AdversarialExample run_attack(Model& model, const std::vector<double>& image,
                              std::size_t label, const AttackConfig& config,
                              const IterationObserver& observer) {
  switch (config.variant) {
    case Variant::Vanilla:
    case Variant::MildL2:
    case Variant::MildLinf:
      return patch_fool_attack(model, image, label, config, observer);
    case Variant::Sparse:
      return sparse_patch_fool_attack(model, image, label, config, observer);
    case Variant::Pgd:
      return pgd_attack(model, image, label, config.epsilon, config.iters,
                        config.epsilon / 4.0);
  }
  throw std::runtime_error("unreachable variant");
}

}  // namespace pf::attack
