#include "pf/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <stdexcept>

#include "pf/rng.hpp"

namespace pf {

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

void Dataset::validate() const {
  if (h == 0 || w == 0 || c == 0)
    throw std::runtime_error("dataset: empty image dimensions");
  if (classes == 0) throw std::runtime_error("dataset: zero classes");
  if (images.size() != count() * pixels())
    throw std::runtime_error("dataset: image buffer size does not match count");
  if (split != "train" && split != "test")
    throw std::runtime_error("dataset: split must be 'train' or 'test'");
  for (double v : images)
    if (!(v >= 0.0 && v <= 1.0))
      throw std::runtime_error("dataset: pixel outside [0,1]");
  for (auto l : labels)
    if (l >= classes)
      throw std::runtime_error("dataset: label outside [0, classes)");
}

// ---------------------------------------------------------------------------
// PFDS io
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'F', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
               static_cast<char>((v >> 16) & 0xff),
               static_cast<char>((v >> 24) & 0xff)};
  os.write(b, 4);
}

std::uint32_t read_u32(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw std::runtime_error(std::string("PFDS: truncated while reading ") +
                             what + " at offset " +
                             std::to_string(static_cast<long long>(is.tellg())));
  return static_cast<std::uint32_t>(b[0]) |
         (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void write_f64(std::ostream& os, double d) {
  const auto bits = std::bit_cast<std::uint64_t>(d);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  os.write(b, 8);
}

double read_f64(std::istream& is, std::size_t index) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw std::runtime_error("PFDS: truncated at pixel " + std::to_string(index));
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

Dataset load_dataset(const std::string& path, const std::string& split) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("PFDS: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || !std::equal(magic, magic + 4, kMagic))
    throw std::runtime_error("PFDS: bad magic at offset 0 in " + path);
  const std::uint32_t version = read_u32(is, "version");
  if (version != kVersion)
    throw std::runtime_error("PFDS: unsupported version " +
                             std::to_string(version));
  Dataset ds;
  const std::uint32_t count = read_u32(is, "count");
  ds.h = read_u32(is, "height");
  ds.w = read_u32(is, "width");
  ds.c = read_u32(is, "channels");
  ds.classes = read_u32(is, "classes");
  ds.images.resize(static_cast<std::size_t>(count) * ds.h * ds.w * ds.c);
  for (std::size_t i = 0; i < ds.images.size(); ++i)
    ds.images[i] = read_f64(is, i);
  ds.labels.resize(count);
  for (std::size_t i = 0; i < count; ++i)
    ds.labels[i] = read_u32(is, "label");
  ds.split = split;
  ds.name = path;
  ds.validate();
  return ds;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  ds.validate();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("PFDS: cannot write " + path);
  os.write(kMagic, 4);
  write_u32(os, kVersion);
  write_u32(os, static_cast<std::uint32_t>(ds.count()));
  write_u32(os, static_cast<std::uint32_t>(ds.h));
  write_u32(os, static_cast<std::uint32_t>(ds.w));
  write_u32(os, static_cast<std::uint32_t>(ds.c));
  write_u32(os, static_cast<std::uint32_t>(ds.classes));
  for (double v : ds.images) write_f64(os, v);
  for (auto l : ds.labels) write_u32(os, l);
  if (!os) throw std::runtime_error("PFDS: write failed for " + path);
}

// ---------------------------------------------------------------------------
// Synthetic generators
// ---------------------------------------------------------------------------

namespace {

struct Color {
  double r, g, b;
};

/// One background/foreground pair per palette.
struct Palette {
  Color bg, fg;
};

constexpr Palette kPalettes[2] = {
    {{0.15, 0.15, 0.20}, {0.90, 0.30, 0.20}},  // warm glyph on a dark field
    {{0.85, 0.90, 0.95}, {0.20, 0.40, 0.85}},  // cool glyph on a light field
};

bool glyph_hit(std::size_t shape, double dx, double dy, double r) {
  switch (shape) {
    case 0:  // square
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case 1:  // disc
      return dx * dx + dy * dy <= r * r;
    case 2:  // upward triangle
      return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) * 0.5;
    case 3:  // cross
      return (std::abs(dx) <= r * 0.35 && std::abs(dy) <= r) ||
             (std::abs(dy) <= r * 0.35 && std::abs(dx) <= r);
    case 4:  // ring
    default: {
      const double rr = std::sqrt(dx * dx + dy * dy);
      return rr >= r * 0.55 && rr <= r;
    }
  }
}

double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

}  // namespace

Dataset make_shapes_dataset(std::size_t count, std::uint64_t seed,
                            const std::string& split, std::size_t image) {
  Dataset ds;
  ds.h = image;
  ds.w = image;
  ds.c = 3;
  ds.classes = 10;
  ds.split = split;
  ds.name = "shapes-" + split;
  ds.images.resize(count * ds.pixels());
  ds.labels.resize(count);

  // Separate streams for train/test so the splits never share images.
  const std::uint64_t split_tag = split == "train" ? 0x7472 : 0x7465;
  Rng rng = Rng::derive(seed, split_tag);

  const double half = image / 2.0;
  const double noise = 0.05;
  for (std::size_t idx = 0; idx < count; ++idx) {
    const std::size_t shape = rng.uniform_int(5);
    const std::size_t palette = rng.uniform_int(2);
    ds.labels[idx] = static_cast<std::uint32_t>(shape * 2 + palette);
    const Palette& pal = kPalettes[palette];
    // Center jitter of up to ±3 px at 32px (scaled down for smaller images)
    // keeps the glyph off the corners.
    const double jmax = std::max(1.0, image * 3.0 / 32.0);
    const double cx = half + rng.uniform(-jmax, jmax);
    const double cy = half + rng.uniform(-jmax, jmax);
    const double r = image * (0.22 + 0.03 * rng.uniform01());

    double* img = ds.images.data() + idx * ds.pixels();
    for (std::size_t y = 0; y < image; ++y)
      for (std::size_t x = 0; x < image; ++x) {
        const bool hit =
            glyph_hit(shape, (x + 0.5) - cx, (y + 0.5) - cy, r);
        const Color& col = hit ? pal.fg : pal.bg;
        double* px = img + (y * image + x) * 3;
        px[0] = clamp01(col.r + rng.uniform(-noise, noise));
        px[1] = clamp01(col.g + rng.uniform(-noise, noise));
        px[2] = clamp01(col.b + rng.uniform(-noise, noise));
      }
  }
  ds.validate();
  return ds;
}

Dataset make_blobs_dataset(std::size_t count, std::uint64_t seed,
                           const std::string& split, std::size_t image) {
  Dataset ds;
  ds.h = image;
  ds.w = image;
  ds.c = 3;
  ds.classes = 2;
  ds.split = split;
  ds.name = "blobs-" + split;
  ds.images.resize(count * ds.pixels());
  ds.labels.resize(count);

  const std::uint64_t split_tag = split == "train" ? 0x6274 : 0x6265;
  Rng rng = Rng::derive(seed, split_tag);

  const double half = image / 2.0;
  const double radius = image * 0.28;
  const Color bg = {0.5, 0.5, 0.5};
  const Color cls[2] = {{0.8, 0.2, 0.2}, {0.2, 0.2, 0.8}};
  for (std::size_t idx = 0; idx < count; ++idx) {
    const std::size_t label = rng.uniform_int(2);
    ds.labels[idx] = static_cast<std::uint32_t>(label);
    const double cx = half + rng.uniform(-1.5, 1.5);
    const double cy = half + rng.uniform(-1.5, 1.5);
    double* img = ds.images.data() + idx * ds.pixels();
    for (std::size_t y = 0; y < image; ++y)
      for (std::size_t x = 0; x < image; ++x) {
        const double dx = (x + 0.5) - cx, dy = (y + 0.5) - cy;
        const bool hit = dx * dx + dy * dy <= radius * radius;
        const Color& col = hit ? cls[label] : bg;
        double* px = img + (y * image + x) * 3;
        px[0] = clamp01(col.r + rng.uniform(-0.05, 0.05));
        px[1] = clamp01(col.g + rng.uniform(-0.05, 0.05));
        px[2] = clamp01(col.b + rng.uniform(-0.05, 0.05));
      }
  }
  ds.validate();
  return ds;
}

}  // namespace pf
