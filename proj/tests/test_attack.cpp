#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "pf/attack.hpp"
#include "pf/grad_check.hpp"
#include "pf/models.hpp"
#include "pf/ops.hpp"
#include "pf/rng.hpp"

using namespace pf;
using namespace pf::attack;

namespace {

std::vector<double> random_image(Rng& rng, std::size_t n) {
  std::vector<double> img(n);
  for (auto& v : img) v = rng.uniform01();
  return img;
}

TinyViTConfig tiny_vit_cfg() {
  TinyViTConfig cfg;
  cfg.image = 8;
  cfg.patch = 4;
  cfg.channels = 3;
  cfg.dim = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.classes = 3;
  return cfg;
}

TinyCNNConfig tiny_cnn_cfg() {
  TinyCNNConfig cfg;
  cfg.image = 8;
  cfg.channels = 3;
  cfg.patch = 4;
  cfg.widths = {4, 6, 8};
  cfg.classes = 3;
  return cfg;
}

/// Wrap raw values as an attention stack (leaf tensor).
AttentionStack make_stack(std::size_t heads, std::size_t tokens,
                          std::vector<double> vals, bool requires_grad = false) {
  return AttentionStack{
      tensor_from({heads, tokens, tokens}, std::move(vals), requires_grad)};
}

/// Naive re-statement of the attention selection rule: per patch column,
/// sum attention over every head and every query row, then pick the best
/// `count` columns (lowest index on ties).  Triple loop on purpose — this is
/// the oracle the fast path must agree with.
std::vector<std::size_t> naive_attention_selection(const AttentionStack& stack,
                                                   std::size_t count) {
  const std::size_t H = stack.heads();
  const std::size_t T = stack.tokens();
  const std::size_t n = T - 1;
  std::vector<double> score(n, 0.0);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < T; ++i)
        score[j] += stack.probs->value[(h * T + i) * T + (j + 1)];
  std::vector<std::size_t> picked;
  std::vector<bool> used(n, false);
  while (picked.size() < count) {
    std::size_t best = n;
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j]) continue;
      if (best == n || score[j] > score[best]) best = j;
    }
    used[best] = true;
    picked.push_back(best);
  }
  return picked;
}

/// Count positions where two images differ at all.
std::size_t diff_count(const std::vector<double>& a,
                       const std::vector<double>& b) {
  std::size_t c = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i]) ++c;
  return c;
}

}  // namespace

// ===========================================================================
// Patch selection
// ===========================================================================

TEST_CASE("attention selection on the worked single-head example") {
  // class + 3 patches, one head; column sums over patch columns are
  // [0.8, 1.7, 0.8], so the middle patch wins.
  std::vector<double> a = {
      0.25, 0.25, 0.25, 0.25,  //
      0.10, 0.20, 0.50, 0.20,  //
      0.10, 0.10, 0.70, 0.10,  //
      0.25, 0.25, 0.25, 0.25,  //
  };
  auto stack = make_stack(1, 4, a);
  auto picked = select_patches_attention({stack}, 1, 1);
  REQUIRE(picked.size() == 1);
  CHECK(picked[0] == 1);  // 0-based: the second patch

  auto two = select_patches_attention({stack}, 1, 2);
  REQUIRE(two.size() == 2);
  CHECK(two[0] == 1);
  CHECK(two[1] == 0);  // 0.8 tie between patches 0 and 2 -> lower index
}

TEST_CASE("attention selection tie-breaking and exhaustive selection") {
  const std::size_t T = 5, H = 3;
  std::vector<double> a(H * T * T, 1.0 / T);  // uniform everywhere
  auto stack = make_stack(H, T, a);

  auto two = select_patches_attention({stack}, 1, 2);
  CHECK(two == std::vector<std::size_t>{0, 1});

  auto all = select_patches_attention({stack}, 1, T - 1);
  std::vector<std::size_t> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("attention selection matches the naive oracle on random stacks") {
  Rng rng(2024);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t H = 1 + rng.uniform_int(4);
    const std::size_t T = 3 + rng.uniform_int(7);
    std::vector<double> vals(H * T * T);
    // Quantized values provoke exact ties regularly.
    for (auto& v : vals) v = rng.uniform_int(8) / 8.0;
    auto stack = make_stack(H, T, vals);
    std::vector<AttentionStack> layers = {stack, stack};
    for (std::size_t count : {std::size_t{1}, (T - 1) / 2 + 1, T - 1}) {
      auto fast = select_patches_attention(layers, 2, count);
      auto oracle = naive_attention_selection(stack, count);
      CHECK(fast == oracle);
    }
  }
}

TEST_CASE("attention selection rejects bad layers and counts") {
  auto stack = make_stack(1, 4, std::vector<double>(16, 0.25));
  std::vector<AttentionStack> layers = {stack};
  CHECK_THROWS(select_patches_attention(layers, 0, 1));
  CHECK_THROWS(select_patches_attention(layers, 2, 1));
  CHECK_THROWS(select_patches_attention(layers, 1, 0));
  CHECK_THROWS(select_patches_attention(layers, 1, 4));
  CHECK_THROWS(select_patches_attention({}, 1, 1));
}

TEST_CASE("saliency selection matches a brute-force recomputation") {
  for (int model_kind = 0; model_kind < 2; ++model_kind) {
    auto model = model_kind == 0 ? make_tiny_vit(tiny_vit_cfg(), 7)
                                 : make_tiny_cnn(tiny_cnn_cfg(), 7);
    model->freeze();
    const PatchGrid& grid = model->patch_grid();
    Rng rng(55 + model_kind);
    auto img = random_image(rng, grid.pixels());

    Tape tape;
    auto g = model->input_gradient(tape, img, 1);
    const auto pidx = grid.patchify_index();
    const std::size_t n = grid.count(), d = grid.patch_dim();
    std::vector<double> score(n, 0.0);
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t f = 0; f < d; ++f) score[p] += std::abs(g[pidx[p * d + f]]);
      score[p] /= static_cast<double>(d);
    }
    std::size_t best = 0;
    for (std::size_t p = 1; p < n; ++p)
      if (score[p] > score[best]) best = p;

    auto picked = select_patches_saliency(*model, img, 1, 1);
    REQUIRE(picked.size() == 1);
    CHECK(picked[0] == best);

    auto all = select_patches_saliency(*model, img, 1, n);
    std::vector<std::size_t> sorted = all;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t p = 0; p < n; ++p) CHECK(sorted[p] == p);
  }
}

TEST_CASE("random selection is uniform, reproducible, and range-checked") {
  Rng a = Rng::derive(99, 1);
  Rng b = Rng::derive(99, 1);
  auto s1 = select_patches_random(a, 16, 4);
  auto s2 = select_patches_random(b, 16, 4);
  CHECK(s1 == s2);
  std::set<std::size_t> uniq(s1.begin(), s1.end());
  CHECK(uniq.size() == 4);

  Rng c(5);
  auto all = select_patches_random(c, 6, 6);
  std::vector<std::size_t> sorted = all;
  std::sort(sorted.begin(), sorted.end());
  CHECK(sorted == std::vector<std::size_t>{0, 1, 2, 3, 4, 5});

  CHECK_THROWS(select_patches_random(c, 3, 4));

  // frequency over 1e5 single draws from n=8: each within 3 sigma of 1/8
  Rng f(7);
  std::vector<int> hits(8, 0);
  const int draws = 100000;
  for (int i = 0; i < draws; ++i) ++hits[select_patches_random(f, 8, 1)[0]];
  const double expect = draws / 8.0;
  const double sigma = std::sqrt(draws * (1.0 / 8.0) * (7.0 / 8.0));
  for (int h : hits) CHECK(std::abs(h - expect) <= 3.0 * sigma);
}

// ===========================================================================
// Attention loss & combined loss
// ===========================================================================

TEST_CASE("attention loss equals H under uniform attention") {
  const std::size_t H = 3, T = 6;
  Tape tape;
  auto stack = make_stack(H, T, std::vector<double>(H * T * T, 1.0 / T));
  auto losses = attention_loss(tape, {stack, stack}, {2});
  REQUIRE(losses.size() == 2);
  for (auto& l : losses) CHECK(l->value[0] == doctest::Approx(double(H)).epsilon(1e-12));
}

TEST_CASE("attention loss is T when every query is one-hot on the target") {
  const std::size_t T = 5;
  std::vector<double> a(T * T, 0.0);
  for (std::size_t i = 0; i < T; ++i) a[i * T + token_of_patch(3)] = 1.0;
  Tape tape;
  auto losses = attention_loss(tape, {make_stack(1, T, a)}, {3});
  CHECK(losses[0]->value[0] == doctest::Approx(double(T)).epsilon(1e-12));
}

TEST_CASE("attention loss over all patches is T minus the class-column mass") {
  // 3x3 row-stochastic single-head example, checked by hand.
  std::vector<double> a = {
      0.5, 0.3, 0.2,  //
      0.1, 0.6, 0.3,  //
      0.4, 0.4, 0.2,  //
  };
  Tape tape;
  auto losses = attention_loss(tape, {make_stack(1, 3, a)}, {0, 1});
  const double class_mass = 0.5 + 0.1 + 0.4;
  CHECK(losses[0]->value[0] == doctest::Approx(3.0 - class_mass).epsilon(1e-12));
}

TEST_CASE("attention loss gradient is the column indicator") {
  const std::size_t H = 2, T = 4;
  Tape tape;
  Rng rng(3);
  std::vector<double> vals(H * T * T);
  for (auto& v : vals) v = rng.uniform01();
  auto stack = make_stack(H, T, vals, /*requires_grad=*/true);
  auto losses = attention_loss(tape, {stack}, {0, 2});
  tape.backward(losses[0]);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = 0; j < T; ++j) {
        const double g = stack.probs->grad[(h * T + i) * T + j];
        const bool target = j == token_of_patch(0) || j == token_of_patch(2);
        CHECK(g == (target ? 1.0 : 0.0));
      }
}

TEST_CASE("attention loss validates its patch indices") {
  Tape tape;
  auto stack = make_stack(1, 4, std::vector<double>(16, 0.25));
  CHECK_THROWS(attention_loss(tape, {stack}, {}));
  CHECK_THROWS(attention_loss(tape, {stack}, {3}));  // only 3 patches: 0..2
  CHECK_THROWS(attention_loss(tape, {}, {0}));
}

TEST_CASE("combined loss: alpha zero reduces to cross-entropy; arithmetic") {
  Tape tape;
  auto logits =
      tensor_from({1, 2}, {0.0, std::log(std::exp(0.7) - 1.0)}, true);
  // CE at label 0 of [0, z] is log(1 + e^z) = 0.7 by construction.
  auto stack = make_stack(1, 5, std::vector<double>(25, 0.5));
  // single patch, all queries: sum = 1 head * 5 rows * 0.5 = 2.5

  auto j0 = combined_loss(tape, logits, 0, {stack}, {1}, 0.0);
  auto ce = ops::cross_entropy_logits(tape, logits, 0);
  CHECK(j0->value[0] == doctest::Approx(ce->value[0]).epsilon(1e-15));
  CHECK(j0->value[0] == doctest::Approx(0.7).epsilon(1e-12));

  auto j1 = combined_loss(tape, logits, 0, {stack}, {1}, 1.0);
  CHECK(j1->value[0] == doctest::Approx(3.2).epsilon(1e-12));

  auto jh = combined_loss(tape, logits, 0, {stack}, {1}, 0.002);
  CHECK(jh->value[0] == doctest::Approx(0.7 + 0.002 * 2.5).epsilon(1e-12));
}

TEST_CASE("combined loss gradient is the linear combination of components") {
  Tape tape;
  Rng rng(11);
  const std::size_t H = 2, T = 4;
  std::vector<double> lv = {0.3, -0.8, 1.1};
  std::vector<double> av(H * T * T);
  for (auto& v : av) v = rng.uniform(0.0, 1.0);
  auto logits_leaf = tensor_from({1, 3}, lv, true);
  auto probs_leaf = tensor_from({H, T, T}, av, true);

  auto f = [&](Tape& tp, const std::vector<DiffTensor>& in) {
    AttentionStack s{in[1]};
    return combined_loss(tp, in[0], 2, {s}, {0, 1}, 0.37);
  };
  auto res = grad_check(tape, f, {logits_leaf, probs_leaf});
  CHECK(res.ok);
  CHECK(res.max_rel_err < 1e-4);
}

// ===========================================================================
// PCGrad
// ===========================================================================

TEST_CASE("pcgrad on the hand-worked conflict example") {
  std::vector<double> g_ce = {1.0, 0.0};
  std::vector<std::vector<double>> g_attn = {{-1.0, 1.0}};
  std::vector<double> g_J = {0.0, 1.0};  // g_ce + 1.0 * g_attn
  auto delta = pcgrad_combine(g_J, g_ce, g_attn, 1.0);
  REQUIRE(delta.size() == 2);
  CHECK(delta[0] == 1.0);
  CHECK(delta[1] == 1.0);
}

TEST_CASE("pcgrad leaves aligned gradients untouched") {
  std::vector<double> g_ce = {1.0, 2.0};
  std::vector<std::vector<double>> g_attn = {{0.5, 0.0}, {0.0, 0.0},
                                             {-2.0, 1.5}};
  // dots: 0.5, 0, -2+3=1 -> all >= 0 -> delta == grad_J
  std::vector<double> g_J(2);
  for (std::size_t i = 0; i < 2; ++i) {
    g_J[i] = g_ce[i];
    for (auto& g : g_attn) g_J[i] += 0.25 * g[i];
  }
  auto delta = pcgrad_combine(g_J, g_ce, g_attn, 0.25);
  CHECK(delta == g_J);
}

TEST_CASE("pcgrad with alpha zero is the cross-entropy gradient") {
  std::vector<double> g = {0.1, -0.4, 2.0};
  auto delta = pcgrad_combine(g, g, {{-1.0, 0.0, 0.0}}, 0.0);
  CHECK(delta == g);
}

TEST_CASE("pcgrad guards the zero-norm division") {
  // grad_ce so small its squared norm underflows to zero while the dot
  // product against grad_attn stays a normal (negative) number.
  std::vector<double> g_ce = {1e-200, 0.0};
  std::vector<std::vector<double>> g_attn = {{-1.0, 0.5}};
  std::vector<double> g_J = {1e-200 - 1.0, 0.5};
  auto delta = pcgrad_combine(g_J, g_ce, g_attn, 1.0);
  CHECK(delta == g_J);  // all betas forced to zero
}

TEST_CASE("pcgrad equals the component-removal formulation on random sets") {
  Rng rng(17);
  for (int rep = 0; rep < 1000; ++rep) {
    const std::size_t m = 1 + rng.uniform_int(12);
    const std::size_t L = rng.uniform_int(4);
    const double alpha = rep % 7 == 0 ? 0.0 : rng.uniform(0.0, 2.0);
    std::vector<double> g_ce(m);
    const bool zero_ce = rep % 13 == 0;
    for (auto& v : g_ce) v = zero_ce ? 0.0 : rng.uniform(-1.0, 1.0);
    std::vector<std::vector<double>> g_attn(L, std::vector<double>(m));
    for (auto& g : g_attn)
      for (auto& v : g) v = rng.uniform(-1.0, 1.0);

    std::vector<double> g_J = g_ce;
    for (const auto& g : g_attn)
      for (std::size_t i = 0; i < m; ++i) g_J[i] += alpha * g[i];

    auto delta = pcgrad_combine(g_J, g_ce, g_attn, alpha);

    // Oracle: remove each conflicting attention gradient's component along
    // grad_ce, then re-assemble the combination explicitly.
    double n2 = 0.0;
    for (double v : g_ce) n2 += v * v;
    std::vector<double> oracle = g_ce;
    for (const auto& g : g_attn) {
      double dot = 0.0;
      for (std::size_t i = 0; i < m; ++i) dot += g_ce[i] * g[i];
      const bool conflict = dot < 0.0 && n2 > 0.0;
      for (std::size_t i = 0; i < m; ++i) {
        double adj = g[i] - (conflict ? (dot / n2) * g_ce[i] : 0.0);
        oracle[i] += alpha * adj;
      }
    }
    for (std::size_t i = 0; i < m; ++i)
      CHECK(std::abs(delta[i] - oracle[i]) < 1e-10);
  }
}

TEST_CASE("pcgrad rejects mismatched shapes") {
  CHECK_THROWS(pcgrad_combine({1.0}, {1.0, 2.0}, {}, 1.0));
  CHECK_THROWS(pcgrad_combine({1.0}, {1.0}, {{1.0, 2.0}}, 1.0));
}

// ===========================================================================
// Sparse mask
// ===========================================================================

TEST_CASE("sparse mask picks the top-k candidates") {
  Tape tape;
  auto mhat = tensor_from({1, 4}, {0.3, 0.9, 0.1, 0.5});
  auto m = sparse_mask_forward(tape, mhat, 2, {1.0});
  CHECK(m->value == std::vector<double>{0.0, 1.0, 0.0, 1.0});

  auto all = sparse_mask_forward(tape, mhat, 9, {1.0});
  CHECK(all->value == std::vector<double>{1.0, 1.0, 1.0, 1.0});
}

TEST_CASE("sparse mask stays inside indicated patches and counts exactly") {
  Tape tape;
  Rng rng(4);
  const std::size_t n = 4, d = 6;
  std::vector<double> mv(n * d);
  for (auto& v : mv) v = rng.uniform01();
  auto mhat = tensor_from({n, d}, mv);
  std::vector<double> indicator = {0.0, 1.0, 0.0, 1.0};
  for (std::size_t k : {std::size_t{1}, std::size_t{5}, std::size_t{12},
                        std::size_t{40}}) {
    auto m = sparse_mask_forward(tape, mhat, k, indicator);
    std::size_t ones = 0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t f = 0; f < d; ++f) {
        const double v = m->value[p * d + f];
        CHECK((v == 0.0 || v == 1.0));
        if (v == 1.0) {
          CHECK(indicator[p] == 1.0);
          ++ones;
        }
      }
    CHECK(ones == std::min(k, std::size_t{2 * d}));
  }
}

TEST_CASE("sparse mask ties break toward the lower flat index") {
  Tape tape;
  auto mhat = tensor_from({1, 5}, std::vector<double>(5, 0.42));
  auto m = sparse_mask_forward(tape, mhat, 2, {1.0});
  CHECK(m->value == std::vector<double>{1.0, 1.0, 0.0, 0.0, 0.0});
}

TEST_CASE("sparse mask straight-through gradient covers all candidates") {
  Tape tape;
  Rng rng(9);
  const std::size_t n = 3, d = 4;
  std::vector<double> mv(n * d);
  for (auto& v : mv) v = rng.uniform01();
  auto mhat = tensor_from({n, d}, mv, true);
  std::vector<double> indicator = {1.0, 0.0, 1.0};
  auto m = sparse_mask_forward(tape, mhat, 2, indicator);
  std::vector<double> w(n * d);
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  auto loss = ops::sum_weighted(tape, m, w);
  tape.backward(loss);
  for (std::size_t p = 0; p < n; ++p)
    for (std::size_t f = 0; f < d; ++f) {
      const double g = mhat->grad[p * d + f];
      if (indicator[p] != 0.0)
        CHECK(g == w[p * d + f]);  // identity on candidates, won or not
      else
        CHECK(g == 0.0);
    }
}

TEST_CASE("sparse mask channel grouping shares one decision per pixel") {
  Tape tape;
  // one patch, 2 pixels x 3 channels; second pixel has the larger sum
  auto mhat = tensor_from({1, 6}, {0.9, 0.0, 0.0, 0.4, 0.4, 0.4});
  auto m = sparse_mask_forward(tape, mhat, 1, {1.0}, 3);
  CHECK(m->value == std::vector<double>{0.0, 0.0, 0.0, 1.0, 1.0, 1.0});
}

// ===========================================================================
// Projections & schedule
// ===========================================================================

TEST_CASE("L2 projection scales the 3-4-5 triangle and respects the boundary") {
  auto p = project_l2({3.0, 4.0}, 1.0);
  CHECK(p[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(0.8).epsilon(1e-15));

  std::vector<double> onball = {0.5, 0.0};
  CHECK(project_l2(onball, 0.5) == onball);  // boundary: untouched

  Rng rng(21);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> e(10);
    for (auto& v : e) v = rng.uniform(-2.0, 2.0);
    const double eps = rng.uniform(0.1, 3.0);
    auto q = project_l2(e, eps);
    double n2 = 0.0, dot = 0.0, en2 = 0.0;
    for (std::size_t i = 0; i < e.size(); ++i) {
      n2 += q[i] * q[i];
      dot += q[i] * e[i];
      en2 += e[i] * e[i];
    }
    CHECK(std::sqrt(n2) <= eps + 1e-9);
    // parallel: cosine similarity 1
    CHECK(dot / std::sqrt(n2 * en2) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("Linf projection clamps, preserves feasible points, idempotent") {
  auto p = project_linf({0.9, -0.7}, 0.5);
  CHECK(p == std::vector<double>{0.5, -0.5});
  std::vector<double> in = {0.2, -0.3, 0.0};
  CHECK(project_linf(in, 0.5) == in);
  auto once = project_linf({1.7, -2.9, 0.1}, 0.25);
  CHECK(project_linf(once, 0.25) == once);
}

TEST_CASE("step size decays by 0.95 every 10 iterations") {
  AttackConfig cfg;
  CHECK(step_size_at(cfg, 0) == 0.2);
  CHECK(step_size_at(cfg, 9) == 0.2);
  CHECK(step_size_at(cfg, 10) == doctest::Approx(0.19).epsilon(1e-15));
  CHECK(step_size_at(cfg, 25) ==
        doctest::Approx(0.2 * std::pow(0.95, 2)).epsilon(1e-15));
  CHECK(step_size_at(cfg, 249) ==
        doctest::Approx(0.2 * std::pow(0.95, 24)).epsilon(1e-15));
}

// ===========================================================================
// Config validation
// ===========================================================================

TEST_CASE("attack config validation") {
  AttackConfig cfg;
  CHECK_NOTHROW(cfg.validate(64, 6));
  CHECK(cfg.alpha == 0.002);
  CHECK(cfg.eta0 == 0.2);
  CHECK(cfg.decay == 0.95);
  CHECK(cfg.iters == 250);
  CHECK(cfg.layer_l == 5);
  CHECK(cfg.num_patches == 1);

  AttackConfig bad = cfg;
  bad.num_patches = 0;
  CHECK_THROWS(bad.validate(64, 6));
  bad = cfg;
  bad.num_patches = 65;
  CHECK_THROWS(bad.validate(64, 6));
  bad = cfg;
  bad.layer_l = 7;
  CHECK_THROWS(bad.validate(64, 6));
  bad = cfg;
  bad.variant = Variant::Sparse;
  CHECK_THROWS(bad.validate(64, 6));  // k missing
  bad.k = 1;
  CHECK_NOTHROW(bad.validate(64, 6));
  bad = cfg;
  bad.variant = Variant::MildL2;
  CHECK_THROWS(bad.validate(64, 6));  // epsilon missing
  bad.epsilon = 0.5;
  CHECK_NOTHROW(bad.validate(64, 6));

  CHECK(variant_from_string("mild-linf") == Variant::MildLinf);
  CHECK(selection_from_string("saliency") == Selection::Saliency);
  CHECK_THROWS(variant_from_string("nope"));
  CHECK(to_string(Variant::Sparse) == "sparse");
  CHECK(to_string(Selection::Random) == "random");
}

// ===========================================================================
// Full attack runs: locality, budget, feasibility, determinism
// ===========================================================================

TEST_CASE("eta0 = 0 is the identity attack") {
  auto model = make_tiny_vit(tiny_vit_cfg(), 31);
  model->freeze();
  Rng rng(100);
  auto img = random_image(rng, model->patch_grid().pixels());
  Tape tape;
  const std::size_t clean_pred = model->predict(tape, img);

  AttackConfig cfg;
  cfg.layer_l = 2;
  cfg.eta0 = 0.0;
  cfg.iters = 12;
  auto ex = patch_fool_attack(*model, img, 0, cfg);
  CHECK(ex.adversarial_image == img);
  CHECK(ex.predicted == clean_pred);
  CHECK(ex.iterations == 12);
}

TEST_CASE("vanilla attack: locality holds at every iteration and the end") {
  auto model = make_tiny_vit(tiny_vit_cfg(), 31);
  model->freeze();
  const PatchGrid& grid = model->patch_grid();
  Rng rng(101);
  auto img = random_image(rng, grid.pixels());

  AttackConfig cfg;
  cfg.layer_l = 2;
  cfg.iters = 25;
  cfg.num_patches = 2;
  cfg.seed = 5;

  std::size_t calls = 0;
  std::vector<std::size_t> seen_patches;
  auto observer = [&](std::size_t, const PerturbationState& st,
                      const std::vector<double>& adv) {
    ++calls;
    seen_patches.clear();
    for (std::size_t p = 0; p < st.indicator.size(); ++p)
      if (st.indicator[p] != 0.0) seen_patches.push_back(p);
    auto allowed = grid.pixel_mask(seen_patches);
    for (std::size_t i = 0; i < adv.size(); ++i)
      if (allowed[i] == 0.0) CHECK(adv[i] == img[i]);
  };
  auto ex = patch_fool_attack(*model, img, 1, cfg, observer);
  CHECK(calls == cfg.iters);

  auto allowed = grid.pixel_mask(ex.patch_indices);
  for (std::size_t i = 0; i < img.size(); ++i) {
    if (allowed[i] == 0.0) CHECK(ex.adversarial_image[i] == img[i]);
    CHECK(ex.adversarial_image[i] >= 0.0);
    CHECK(ex.adversarial_image[i] <= 1.0);
  }
  CHECK(ex.patch_indices.size() == 2);
  CHECK(ex.final_attn.size() == tiny_vit_cfg().layers);
}

TEST_CASE("sparse attack respects the element budget at every iteration") {
  auto model = make_tiny_vit(tiny_vit_cfg(), 31);
  model->freeze();
  Rng rng(102);
  auto img = random_image(rng, model->patch_grid().pixels());

  for (std::size_t k : {std::size_t{1}, std::size_t{7}}) {
    AttackConfig cfg;
    cfg.layer_l = 2;
    cfg.variant = Variant::Sparse;
    cfg.k = k;
    cfg.iters = 20;
    cfg.seed = 3;
    auto observer = [&](std::size_t, const PerturbationState& st,
                        const std::vector<double>& adv) {
      CHECK(diff_count(adv, img) <= k);
      REQUIRE(st.mhat != nullptr);
    };
    auto ex = sparse_patch_fool_attack(*model, img, 2, cfg, observer);
    CHECK(diff_count(ex.adversarial_image, img) <= k);
    for (double v : ex.adversarial_image) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("sparse attack with spatial grouping perturbs whole pixels") {
  auto model = make_tiny_vit(tiny_vit_cfg(), 31);
  model->freeze();
  const PatchGrid& grid = model->patch_grid();
  Rng rng(103);
  auto img = random_image(rng, grid.pixels());

  AttackConfig cfg;
  cfg.layer_l = 2;
  cfg.variant = Variant::Sparse;
  cfg.k = 2;  // counts pixels under the spatial reading
  cfg.sparse_spatial = true;
  cfg.iters = 15;
  auto ex = sparse_patch_fool_attack(*model, img, 0, cfg);
  // changed scalar count is at most k * channels, and changed positions
  // group into at most k spatial pixels
  std::set<std::size_t> pixels_touched;
  for (std::size_t i = 0; i < img.size(); ++i)
    if (ex.adversarial_image[i] != img[i])
      pixels_touched.insert(i / grid.channels);
  CHECK(pixels_touched.size() <= 2);
}

TEST_CASE("mild variants stay feasible after every update") {
  auto model = make_tiny_vit(tiny_vit_cfg(), 31);
  model->freeze();
  Rng rng(104);
  auto img = random_image(rng, model->patch_grid().pixels());

  AttackConfig l2 = {};
  l2.layer_l = 2;
  l2.variant = Variant::MildL2;
  l2.epsilon = 0.8;
  l2.iters = 20;
  auto obs_l2 = [&](std::size_t, const PerturbationState& st,
                    const std::vector<double>&) {
    double n2 = 0.0;
    for (double v : st.E->value) n2 += v * v;
    CHECK(std::sqrt(n2) <= l2.epsilon + 1e-9);
  };
  patch_fool_attack(*model, img, 0, l2, obs_l2);

  AttackConfig li = {};
  li.layer_l = 2;
  li.variant = Variant::MildLinf;
  li.epsilon = 0.07;
  li.iters = 20;
  auto obs_li = [&](std::size_t, const PerturbationState& st,
                    const std::vector<double>&) {
    for (double v : st.E->value) CHECK(std::abs(v) <= li.epsilon + 1e-9);
  };
  auto ex = patch_fool_attack(*model, img, 0, li, obs_li);
  for (std::size_t i = 0; i < img.size(); ++i)
    CHECK(std::abs(ex.adversarial_image[i] - img[i]) <= li.epsilon + 1e-9);
}

TEST_CASE("attacks are bit-deterministic given seed, config, model, image") {
  auto model = make_tiny_vit(tiny_vit_cfg(), 31);
  model->freeze();
  Rng rng(105);
  auto img = random_image(rng, model->patch_grid().pixels());

  for (auto variant : {Variant::Vanilla, Variant::Sparse, Variant::MildLinf}) {
    AttackConfig cfg;
    cfg.variant = variant;
    cfg.selection = Selection::Random;
    cfg.iters = 18;
    cfg.seed = 77;
    if (variant == Variant::Sparse) cfg.k = 5;
    if (variant == Variant::MildLinf) cfg.epsilon = 0.1;
    auto a = run_attack(*model, img, 1, cfg);
    auto b = run_attack(*model, img, 1, cfg);
    CHECK(a.adversarial_image == b.adversarial_image);
    CHECK(a.patch_indices == b.patch_indices);
    CHECK(a.final_ce == b.final_ce);
    CHECK(a.final_attn == b.final_attn);
    CHECK(a.predicted == b.predicted);
    CHECK(a.success == b.success);
  }
}

TEST_CASE("combined objective gradient wrt E checks against finite differences") {
  auto model = make_tiny_vit(tiny_vit_cfg(), 31);
  model->freeze();
  const PatchGrid& grid = model->patch_grid();
  Rng rng(106);
  auto img = random_image(rng, grid.pixels());
  const std::size_t n = grid.count(), d = grid.patch_dim();

  const std::vector<std::size_t> patches = {1, 3};
  std::vector<double> rowmask_vals(n * d, 0.0);
  for (auto p : patches)
    std::fill(rowmask_vals.begin() + p * d, rowmask_vals.begin() + (p + 1) * d,
              1.0);
  auto rowmask = tensor_from({n, d}, rowmask_vals);
  const auto pidx = grid.patchify_index();
  std::vector<double> clean_patch_vals(n * d);
  for (std::size_t i = 0; i < n * d; ++i) clean_patch_vals[i] = img[pidx[i]];
  auto clean_patches = tensor_from({n, d}, clean_patch_vals);
  std::vector<std::size_t> inv(n * d);
  for (std::size_t i = 0; i < n * d; ++i) inv[pidx[i]] = i;

  std::vector<double> e0(n * d, 0.0);
  for (auto p : patches)
    for (std::size_t f = 0; f < d; ++f) e0[p * d + f] = rng.uniform(-0.3, 0.3);
  auto E = tensor_from({n, d}, e0, true);

  Tape tape;
  auto f = [&](Tape& tp, const std::vector<DiffTensor>& in) {
    auto masked = ops::mul(tp, in[0], rowmask);
    auto patched = ops::add(tp, masked, clean_patches);
    auto adv =
        ops::gather(tp, patched, inv, {grid.image_h, grid.image_w, grid.channels});
    auto res = model->run(tp, adv, true);
    return combined_loss(tp, res.logits, 2, res.attention, patches, 0.002);
  };
  auto res = grad_check(tape, f, {E});
  CHECK(res.ok);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("forced patches skip selection and pin the perturbation site") {
  auto model = make_tiny_vit(tiny_vit_cfg(), 31);
  model->freeze();
  const PatchGrid& grid = model->patch_grid();
  Rng rng(107);
  auto img = random_image(rng, grid.pixels());

  AttackConfig cfg;
  cfg.layer_l = 2;
  cfg.iters = 10;
  cfg.forced_patches = {2};
  auto ex = patch_fool_attack(*model, img, 0, cfg);
  CHECK(ex.patch_indices == std::vector<std::size_t>{2});
  auto allowed = grid.pixel_mask({2});
  for (std::size_t i = 0; i < img.size(); ++i)
    if (allowed[i] == 0.0) CHECK(ex.adversarial_image[i] == img[i]);
}

TEST_CASE("patch-fool on a CNN works with saliency and random selection") {
  auto model = make_tiny_cnn(tiny_cnn_cfg(), 41);
  model->freeze();
  const PatchGrid& grid = model->patch_grid();
  Rng rng(108);
  auto img = random_image(rng, grid.pixels());

  AttackConfig cfg;
  cfg.selection = Selection::Saliency;
  cfg.iters = 12;
  auto ex = patch_fool_attack(*model, img, 1, cfg);
  CHECK(ex.final_attn.empty());
  auto allowed = grid.pixel_mask(ex.patch_indices);
  for (std::size_t i = 0; i < img.size(); ++i)
    if (allowed[i] == 0.0) CHECK(ex.adversarial_image[i] == img[i]);

  // attention-guided selection has nothing to read on a CNN
  AttackConfig bad;
  bad.selection = Selection::Attention;
  CHECK_THROWS(patch_fool_attack(*model, img, 1, bad));
}

TEST_CASE("entry points reject mismatched variants") {
  auto model = make_tiny_vit(tiny_vit_cfg(), 31);
  model->freeze();
  Rng rng(109);
  auto img = random_image(rng, model->patch_grid().pixels());
  AttackConfig sparse;
  sparse.variant = Variant::Sparse;
  sparse.k = 3;
  CHECK_THROWS(patch_fool_attack(*model, img, 0, sparse));
  AttackConfig vanilla;
  CHECK_THROWS(sparse_patch_fool_attack(*model, img, 0, vanilla));
}

// ===========================================================================
// PGD baseline
// ===========================================================================

TEST_CASE("pgd with epsilon zero is the identity") {
  auto model = make_tiny_vit(tiny_vit_cfg(), 31);
  model->freeze();
  Rng rng(110);
  auto img = random_image(rng, model->patch_grid().pixels());
  Tape tape;
  const std::size_t clean_pred = model->predict(tape, img);
  auto ex = pgd_attack(*model, img, 0, 0.0, 5, 0.1);
  CHECK(ex.adversarial_image == img);
  CHECK(ex.predicted == clean_pred);
}

TEST_CASE("single-step pgd is FGSM inside the ball") {
  auto model = make_tiny_vit(tiny_vit_cfg(), 31);
  model->freeze();
  Rng rng(111);
  auto img = random_image(rng, model->patch_grid().pixels());
  const double eps = 0.05;

  Tape tape;
  auto g = model->input_gradient(tape, img, 1);
  std::vector<double> expected(img.size());
  for (std::size_t i = 0; i < img.size(); ++i) {
    const double sg = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    expected[i] = std::clamp(img[i] + eps * sg, 0.0, 1.0);
  }
  auto ex = pgd_attack(*model, img, 1, eps, 1, eps);
  CHECK(ex.adversarial_image == expected);
}

TEST_CASE("pgd respects the epsilon ball and the input domain") {
  auto model = make_tiny_cnn(tiny_cnn_cfg(), 42);
  model->freeze();
  Rng rng(112);
  auto img = random_image(rng, model->patch_grid().pixels());
  const double eps = 0.03;
  auto ex = pgd_attack(*model, img, 0, eps, 8, eps / 4.0);
  for (std::size_t i = 0; i < img.size(); ++i) {
    CHECK(std::abs(ex.adversarial_image[i] - img[i]) <= eps + 1e-12);
    CHECK(ex.adversarial_image[i] >= 0.0);
    CHECK(ex.adversarial_image[i] <= 1.0);
  }
  CHECK(ex.patch_indices.empty());

  AttackConfig cfg;
  cfg.variant = Variant::Pgd;
  cfg.epsilon = eps;
  cfg.iters = 4;
  auto first = run_attack(*model, img, 0, cfg);
  auto again = run_attack(*model, img, 0, cfg);
  CHECK(first.adversarial_image == again.adversarial_image);
}
