#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace pf {

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// A labeled image set: N images of [H,W,C] doubles in [0,1] with integer
/// labels in [0, classes).
struct Dataset {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t c = 0;
  std::size_t classes = 0;
  std::vector<double> images;          // N * h * w * c, row-major HWC
  std::vector<std::uint32_t> labels;   // N
  std::string split = "test";          // "train" or "test"
  std::string name = "dataset";

  std::size_t pixels() const { return h * w * c; }
  std::size_t count() const { return labels.size(); }

  const double* image(std::size_t i) const { return images.data() + i * pixels(); }
  std::vector<double> image_copy(std::size_t i) const {
    return {image(i), image(i) + pixels()};
  }

  /// Throws on size mismatches, out-of-range pixels, or bad labels.
  void validate() const;
};

// ---------------------------------------------------------------------------
// PFDS on-disk format
// ---------------------------------------------------------------------------
// magic "PFDS", u32 version, u32 count, u32 H, u32 W, u32 C, u32 classes,
// then images as little-endian f64, then labels as u32.

Dataset load_dataset(const std::string& path, const std::string& split = "test");
void save_dataset(const std::string& path, const Dataset& ds);

// ---------------------------------------------------------------------------
// Bundled synthetic generators
// ---------------------------------------------------------------------------

/// Ten-class set: five glyphs (square, disc, triangle, cross, ring) in two
/// palettes, centered with a few pixels of jitter so image corners stay
/// near-background.  Deterministic from the seed.
Dataset make_shapes_dataset(std::size_t count, std::uint64_t seed,
                            const std::string& split, std::size_t image = 32);

/// Two linearly separable classes: a colored disc on a gray background, the
/// disc color deciding the class.  Used for quick trainability checks.
Dataset make_blobs_dataset(std::size_t count, std::uint64_t seed,
                           const std::string& split, std::size_t image = 32);

}  // namespace pf
