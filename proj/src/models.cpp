#include "pf/models.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>

#include "pf/ops.hpp"

namespace pf {

// ---------------------------------------------------------------------------
// PatchGrid
// ---------------------------------------------------------------------------

void PatchGrid::validate() const {
  if (patch == 0 || image_h % patch != 0 || image_w % patch != 0) {
    throw std::runtime_error(
        "PatchGrid: patch size must evenly divide both image dimensions");
  }
  if (channels == 0) throw std::runtime_error("PatchGrid: zero channels");
}

std::vector<double> PatchGrid::pixel_mask(
    const std::vector<std::size_t>& patches) const {
  std::vector<double> mask(pixels(), 0.0);
  for (std::size_t p : patches) {
    if (p >= count()) {
      throw std::runtime_error("PatchGrid::pixel_mask: patch index " +
                               std::to_string(p) + " out of range");
    }
    const std::size_t y0 = patch_row(p) * patch;
    const std::size_t x0 = patch_col(p) * patch;
    for (std::size_t y = y0; y < y0 + patch; ++y)
      for (std::size_t x = x0; x < x0 + patch; ++x)
        for (std::size_t c = 0; c < channels; ++c)
          mask[(y * image_w + x) * channels + c] = 1.0;
  }
  return mask;
}

std::vector<std::size_t> PatchGrid::patchify_index() const {
  std::vector<std::size_t> idx;
  idx.reserve(pixels());
  for (std::size_t p = 0; p < count(); ++p) {
    const std::size_t y0 = patch_row(p) * patch;
    const std::size_t x0 = patch_col(p) * patch;
    for (std::size_t py = 0; py < patch; ++py)
      for (std::size_t px = 0; px < patch; ++px)
        for (std::size_t c = 0; c < channels; ++c)
          idx.push_back(((y0 + py) * image_w + (x0 + px)) * channels + c);
  }
  return idx;
}

DiffTensor patchify(Tape& tape, const PatchGrid& grid,
                    const DiffTensor& image) {
  if (image->numel() != grid.pixels()) {
    throw std::runtime_error("patchify: image numel " +
                             std::to_string(image->numel()) +
                             " does not match grid pixel count " +
                             std::to_string(grid.pixels()));
  }
  return ops::gather(tape, image, grid.patchify_index(),
                     {grid.count(), grid.patch_dim()});
}

// ---------------------------------------------------------------------------
// Shared model helpers
// ---------------------------------------------------------------------------

namespace {

DiffTensor trunc_normal_param(Rng& rng, std::vector<std::size_t> shape,
                              double stddev = 0.02) {
  auto t = tensor_zeros(std::move(shape), true);
  for (auto& v : t->value) v = rng.truncated_normal(stddev);
  return t;
}

DiffTensor const_param(std::vector<std::size_t> shape, double fill) {
  auto t = tensor_zeros(std::move(shape), true);
  std::fill(t->value.begin(), t->value.end(), fill);
  return t;
}

DiffTensor kaiming_uniform_param(Rng& rng, std::vector<std::size_t> shape,
                                 std::size_t fan_in) {
  auto t = tensor_zeros(std::move(shape), true);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : t->value) v = rng.uniform(-bound, bound);
  return t;
}

void check_image(const Tensor& image, const PatchGrid& grid,
                 const char* who) {
  const std::vector<std::size_t> want{grid.image_h, grid.image_w,
                                      grid.channels};
  if (image.shape != want) {
    throw std::runtime_error(std::string(who) + ": expected image shaped " +
                             shape_str(want) + ", got " +
                             shape_str(image.shape));
  }
}

}  // namespace

std::vector<double> Model::input_gradient(Tape& tape,
                                          const std::vector<double>& image_hwc,
                                          std::size_t label) {
  const auto& grid = patch_grid();
  tape.reset();
  auto x = tensor_from({grid.image_h, grid.image_w, grid.channels}, image_hwc,
                       /*requires_grad=*/true);
  auto logits = forward(tape, x);
  auto loss = ops::cross_entropy_logits(tape, logits, label);
  tape.backward(loss);
  auto g = x->grad_ref();
  tape.reset();
  return g;
}

std::size_t Model::predict(Tape& tape, const std::vector<double>& image_hwc) {
  const auto& grid = patch_grid();
  tape.reset();
  auto x = tensor_from({grid.image_h, grid.image_w, grid.channels}, image_hwc);
  auto logits = forward(tape, x);
  std::size_t best = 0;
  for (std::size_t c = 1; c < logits->numel(); ++c)
    if (logits->value[c] > logits->value[best]) best = c;
  tape.reset();
  return best;
}

// ---------------------------------------------------------------------------
// TinyViT: pre-LN encoder blocks over 4x4 patch tokens plus a class token
// ---------------------------------------------------------------------------

namespace {

class TinyViT final : public Model {
 public:
  TinyViT(const TinyViTConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    grid_ = PatchGrid{cfg.image, cfg.image, cfg.channels, cfg.patch};
    grid_.validate();
    if (cfg.dim % cfg.heads != 0) {
      throw std::runtime_error(
          "TinyViT: embedding dim must be divisible by head count");
    }
    patch_index_ = grid_.patchify_index();

    const std::size_t d = grid_.patch_dim();
    const std::size_t D = cfg.dim;
    const std::size_t T = grid_.count() + 1;
    Rng rng = Rng::derive(seed, 0x766974ULL);  // independent init stream

    embed_w_ = trunc_normal_param(rng, {d, D});
    embed_b_ = const_param({D}, 0.0);
    cls_ = trunc_normal_param(rng, {1, D});
    pos_ = trunc_normal_param(rng, {T, D});
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      Block b;
      b.ln1_g = const_param({D}, 1.0);
      b.ln1_b = const_param({D}, 0.0);
      b.wqkv = trunc_normal_param(rng, {D, 3 * D});
      b.bqkv = const_param({3 * D}, 0.0);
      b.wproj = trunc_normal_param(rng, {D, D});
      b.bproj = const_param({D}, 0.0);
      b.ln2_g = const_param({D}, 1.0);
      b.ln2_b = const_param({D}, 0.0);
      b.w1 = trunc_normal_param(rng, {D, cfg.mlp_ratio * D});
      b.b1 = const_param({cfg.mlp_ratio * D}, 0.0);
      b.w2 = trunc_normal_param(rng, {cfg.mlp_ratio * D, D});
      b.b2 = const_param({D}, 0.0);
      blocks_.push_back(std::move(b));
    }
    lnf_g_ = const_param({D}, 1.0);
    lnf_b_ = const_param({D}, 0.0);
    head_w_ = trunc_normal_param(rng, {D, cfg.classes});
    head_b_ = const_param({cfg.classes}, 0.0);
  }

  ForwardResult run(Tape& tape, const DiffTensor& image,
                    bool capture_attention) override {
    check_image(*image, grid_, "TinyViT::run");
    const std::size_t D = cfg_.dim;
    const std::size_t H = cfg_.heads;
    const std::size_t dh = D / H;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    auto tokens = ops::gather(tape, image, patch_index_,
                              {grid_.count(), grid_.patch_dim()});
    auto x = ops::add_rowvec(tape, ops::matmul(tape, tokens, embed_w_),
                             embed_b_);
    x = ops::concat_rows(tape, {cls_, x});
    x = ops::add(tape, x, pos_);

    ForwardResult out;
    for (const auto& blk : blocks_) {
      auto h = ops::layer_norm(tape, x, blk.ln1_g, blk.ln1_b);
      auto qkv = ops::add_rowvec(tape, ops::matmul(tape, h, blk.wqkv),
                                 blk.bqkv);
      std::vector<DiffTensor> ctx_heads, att_heads;
      ctx_heads.reserve(H);
      att_heads.reserve(H);
      for (std::size_t hd = 0; hd < H; ++hd) {
        auto q = ops::slice_cols(tape, qkv, hd * dh, dh);
        auto k = ops::slice_cols(tape, qkv, D + hd * dh, dh);
        auto v = ops::slice_cols(tape, qkv, 2 * D + hd * dh, dh);
        auto att =
            ops::softmax_rows(tape, ops::matmul_nt(tape, q, k, inv_sqrt_dh));
        att_heads.push_back(att);
        ctx_heads.push_back(ops::matmul(tape, att, v));
      }
      if (capture_attention) {
        out.attention.push_back(
            AttentionStack{ops::stack(tape, att_heads)});
      }
      auto ctx = ops::concat_cols(tape, ctx_heads);
      auto att_out = ops::add_rowvec(tape, ops::matmul(tape, ctx, blk.wproj),
                                     blk.bproj);
      x = ops::add(tape, x, att_out);

      auto h2 = ops::layer_norm(tape, x, blk.ln2_g, blk.ln2_b);
      auto mid = ops::gelu(
          tape, ops::add_rowvec(tape, ops::matmul(tape, h2, blk.w1), blk.b1));
      auto mlp = ops::add_rowvec(tape, ops::matmul(tape, mid, blk.w2),
                                 blk.b2);
      x = ops::add(tape, x, mlp);
    }

    x = ops::layer_norm(tape, x, lnf_g_, lnf_b_);
    std::vector<std::size_t> cls_idx(D);
    for (std::size_t j = 0; j < D; ++j) cls_idx[j] = j;  // row 0
    auto cls_row = ops::gather(tape, x, cls_idx, {1, D});
    out.logits = ops::add_rowvec(tape, ops::matmul(tape, cls_row, head_w_),
                                 head_b_);
    return out;
  }

  std::vector<DiffTensor> parameters() const override {
    std::vector<DiffTensor> ps{embed_w_, embed_b_, cls_, pos_};
    for (const auto& b : blocks_) {
      for (const auto& t : {b.ln1_g, b.ln1_b, b.wqkv, b.bqkv, b.wproj,
                            b.bproj, b.ln2_g, b.ln2_b, b.w1, b.b1, b.w2,
                            b.b2})
        ps.push_back(t);
    }
    ps.push_back(lnf_g_);
    ps.push_back(lnf_b_);
    ps.push_back(head_w_);
    ps.push_back(head_b_);
    return ps;
  }

  const PatchGrid& patch_grid() const override { return grid_; }
  std::size_t classes() const override { return cfg_.classes; }
  std::string kind() const override { return "vit"; }

  nlohmann::json config_json() const override {
    return {{"kind", "vit"},          {"image", cfg_.image},
            {"channels", cfg_.channels}, {"patch", cfg_.patch},
            {"dim", cfg_.dim},        {"layers", cfg_.layers},
            {"heads", cfg_.heads},    {"mlp_ratio", cfg_.mlp_ratio},
            {"classes", cfg_.classes}};
  }

 private:
  struct Block {
    DiffTensor ln1_g, ln1_b, wqkv, bqkv, wproj, bproj;
    DiffTensor ln2_g, ln2_b, w1, b1, w2, b2;
  };

  TinyViTConfig cfg_;
  PatchGrid grid_;
  std::vector<std::size_t> patch_index_;
  DiffTensor embed_w_, embed_b_, cls_, pos_;
  std::vector<Block> blocks_;
  DiffTensor lnf_g_, lnf_b_, head_w_, head_b_;
};

// ---------------------------------------------------------------------------
// TinyCNN: conv-relu-pool stages and a linear head
// ---------------------------------------------------------------------------

class TinyCNN final : public Model {
 public:
  TinyCNN(const TinyCNNConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    grid_ = PatchGrid{cfg.image, cfg.image, cfg.channels, cfg.patch};
    grid_.validate();
    if (cfg.widths.empty()) {
      throw std::runtime_error("TinyCNN: needs at least one conv stage");
    }
    std::size_t side = cfg.image;
    for (std::size_t i = 0; i < cfg.widths.size(); ++i) {
      if (side % 2 != 0) {
        throw std::runtime_error(
            "TinyCNN: image side must halve cleanly at every stage");
      }
      side /= 2;
    }

    // [H,W,C] -> [C,H,W] gather table for the conv stack.
    const std::size_t Hh = cfg.image, Ww = cfg.image, C = cfg.channels;
    chw_index_.reserve(Hh * Ww * C);
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < Hh; ++y)
        for (std::size_t x = 0; x < Ww; ++x)
          chw_index_.push_back((y * Ww + x) * C + c);

    Rng rng = Rng::derive(seed, 0x636e6eULL);  // independent init stream
    std::size_t in_ch = C;
    for (std::size_t w : cfg.widths) {
      conv_w_.push_back(
          kaiming_uniform_param(rng, {w, in_ch, 3, 3}, in_ch * 9));
      conv_b_.push_back(const_param({w}, 0.0));
      in_ch = w;
    }
    flat_ = cfg.widths.back() * side * side;
    head_w_ = kaiming_uniform_param(rng, {flat_, cfg.classes}, flat_);
    head_b_ = const_param({cfg.classes}, 0.0);
  }

  ForwardResult run(Tape& tape, const DiffTensor& image,
                    bool /*capture_attention*/) override {
    check_image(*image, grid_, "TinyCNN::run");
    auto x = ops::gather(tape, image, chw_index_,
                         {cfg_.channels, cfg_.image, cfg_.image});
    for (std::size_t i = 0; i < conv_w_.size(); ++i) {
      x = ops::maxpool2(
          tape, ops::relu(tape, ops::conv2d(tape, x, conv_w_[i], conv_b_[i])));
    }
    auto flat = ops::reshape(tape, x, {1, flat_});
    ForwardResult out;
    out.logits = ops::add_rowvec(tape, ops::matmul(tape, flat, head_w_),
                                 head_b_);
    return out;  // no attention to report
  }

  std::vector<DiffTensor> parameters() const override {
    std::vector<DiffTensor> ps;
    for (std::size_t i = 0; i < conv_w_.size(); ++i) {
      ps.push_back(conv_w_[i]);
      ps.push_back(conv_b_[i]);
    }
    ps.push_back(head_w_);
    ps.push_back(head_b_);
    return ps;
  }

  const PatchGrid& patch_grid() const override { return grid_; }
  std::size_t classes() const override { return cfg_.classes; }
  std::string kind() const override { return "cnn"; }

  nlohmann::json config_json() const override {
    return {{"kind", "cnn"},
            {"image", cfg_.image},
            {"channels", cfg_.channels},
            {"patch", cfg_.patch},
            {"widths", cfg_.widths},
            {"classes", cfg_.classes}};
  }

 private:
  TinyCNNConfig cfg_;
  PatchGrid grid_;
  std::vector<std::size_t> chw_index_;
  std::vector<DiffTensor> conv_w_, conv_b_;
  std::size_t flat_ = 0;
  DiffTensor head_w_, head_b_;
};

}  // namespace

std::unique_ptr<Model> make_tiny_vit(const TinyViTConfig& cfg,
                                     std::uint64_t seed) {
  return std::make_unique<TinyViT>(cfg, seed);
}

std::unique_ptr<Model> make_tiny_cnn(const TinyCNNConfig& cfg,
                                     std::uint64_t seed) {
  return std::make_unique<TinyCNN>(cfg, seed);
}

// ---------------------------------------------------------------------------
// Checkpoint io
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'F', 'M', 'L'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated u32");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

void write_f64(std::ostream& os, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i)
    b[i] = static_cast<unsigned char>(bits >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

double read_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated f64");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_model(const std::string& path, const Model& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_model: cannot open " + path);
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  const std::string cfg = model.config_json().dump();
  write_u32(os, static_cast<std::uint32_t>(cfg.size()));
  os.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  for (const auto& p : model.parameters()) {
    write_u32(os, static_cast<std::uint32_t>(p->rank()));
    for (std::size_t d : p->shape)
      write_u32(os, static_cast<std::uint32_t>(d));
    for (double v : p->value) write_f64(os, v);
  }
  if (!os) throw std::runtime_error("save_model: write failed for " + path);
}

std::unique_ptr<Model> load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("load_model: cannot open " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::string(magic, 4) != std::string(kMagic, 4)) {
    throw std::runtime_error("load_model: " + path +
                             " is not a model checkpoint (bad magic)");
  }
  const std::uint32_t version = read_u32(is);
  if (version != kVersion) {
    throw std::runtime_error("load_model: unsupported checkpoint version " +
                             std::to_string(version));
  }
  const std::uint32_t cfg_len = read_u32(is);
  std::string cfg_str(cfg_len, '\0');
  is.read(cfg_str.data(), cfg_len);
  if (!is) throw std::runtime_error("load_model: truncated config");
  const auto j = nlohmann::json::parse(cfg_str);

  std::unique_ptr<Model> model;
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "vit") {
    TinyViTConfig cfg;
    cfg.image = j.at("image").get<std::size_t>();
    cfg.channels = j.at("channels").get<std::size_t>();
    cfg.patch = j.at("patch").get<std::size_t>();
    cfg.dim = j.at("dim").get<std::size_t>();
    cfg.layers = j.at("layers").get<std::size_t>();
    cfg.heads = j.at("heads").get<std::size_t>();
    cfg.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
    cfg.classes = j.at("classes").get<std::size_t>();
    model = make_tiny_vit(cfg, 0);
  } else if (kind == "cnn") {
    TinyCNNConfig cfg;
    cfg.image = j.at("image").get<std::size_t>();
    cfg.channels = j.at("channels").get<std::size_t>();
    cfg.patch = j.at("patch").get<std::size_t>();
    cfg.widths = j.at("widths").get<std::vector<std::size_t>>();
    cfg.classes = j.at("classes").get<std::size_t>();
    model = make_tiny_cnn(cfg, 0);
  } else {
    throw std::runtime_error("load_model: unknown model kind '" + kind + "'");
  }

  for (const auto& p : model->parameters()) {
    const std::uint32_t rank = read_u32(is);
    if (rank != p->rank()) {
      throw std::runtime_error("load_model: parameter rank mismatch");
    }
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = read_u32(is);
    if (shape != p->shape) {
      throw std::runtime_error("load_model: parameter shape mismatch, file " +
                               shape_str(shape) + " vs model " +
                               shape_str(p->shape));
    }
    for (auto& v : p->value) v = read_f64(is);
  }
  if (!is) throw std::runtime_error("load_model: truncated parameters");
  return model;
}

}  // namespace pf
