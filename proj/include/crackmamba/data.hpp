#pragma once

#include <optional>
#include <string>
#include <vector>

#include "crackmamba/tensor.hpp"

namespace crackmamba {

// Synthetic crack dataset: serpentine random-walk cracks over a textured
// background, deterministic per seed, stored as binary PNM plus a TSV
// manifest.

class PnmParseError : public IoError {
 public:
  PnmParseError(const std::string& path, const std::string& what, std::size_t byte_offset)
      : IoError(path + ": " + what + " (byte " + std::to_string(byte_offset) + ")"),
        byte_offset_(byte_offset) {}
  std::size_t byte_offset() const { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

// ---------------------------------------------------------------------------
// PNM (binary P5 grayscale / P6 RGB, maxval 255).
// ---------------------------------------------------------------------------

struct PnmImage {
  Index height = 0;
  Index width = 0;
  Index channels = 1;                // 1 = P5, 3 = P6
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

PnmImage read_pnm(const std::string& path);
void write_pnm(const std::string& path, const PnmImage& img);

/// [3,H,W] floats in [0,1] -> P6 bytes (round to nearest).
void write_image(const std::string& path, const Tensor<float>& image);
/// {0,1} mask -> P5 with values {0,255}.
void write_mask(const std::string& path, const Tensor<std::uint8_t>& mask);
/// P6 (or P5, replicated to three channels) -> [3,H,W] floats in [0,1].
Tensor<float> read_image(const std::string& path);
/// P5; any nonzero byte counts as crack.
Tensor<std::uint8_t> read_mask(const std::string& path);

// ---------------------------------------------------------------------------
// Samples.
// ---------------------------------------------------------------------------

struct Sample {
  Tensor<float> image;        // [3,H,W] in [0,1]
  Tensor<std::uint8_t> mask;  // [H,W], values in {0,1}
  std::string id;
};

enum class Morphology { linear, branching, reticulated };

const char* to_string(Morphology m);
std::optional<Morphology> parse_morphology(const std::string& name);

/// Deterministic synthetic sample: low-frequency background texture plus
/// per-pixel noise; cracks are 8-connected random walks with curvature bias,
/// width 1-3 px, darkened in the image exactly on the mask support.
/// `branching` spawns child walks, `reticulated` overlays 3-6 walks,
/// `crack_free` leaves the mask empty.
Sample gen_crack_sample(std::uint64_t seed, Index height, Index width, Morphology morphology,
                        bool crack_free = false);

// ---------------------------------------------------------------------------
// Train/test split: n = round-half-up(N * ratio) clamped to >= 1, selection
// interval m = N/n, test indices { floor(k*m) : k = 0..n-1 }.
// ---------------------------------------------------------------------------

struct SplitSpec {
  Index total = 0;
  Index test_count = 0;
  double interval = 0;
  std::vector<Index> test_indices;  // strictly increasing
};

SplitSpec split_dataset(Index total, double ratio = 0.05);

// ---------------------------------------------------------------------------
// On-disk dataset: images/<id>.ppm, masks/<id>.pgm, manifest.tsv with
// columns (id, morphology, seed, split).
// ---------------------------------------------------------------------------

struct DatasetEntry {
  std::string id;
  Morphology morphology = Morphology::linear;
  bool crack_free = false;
  std::uint64_t seed = 0;
  bool is_test = false;
};

struct GenDataConfig {
  std::string out_dir;
  Index count = 40;
  Index size = 64;
  std::uint64_t seed = 0;
  double crack_free_frac = 0.25;
};

/// Generates `count` samples (morphologies cycled, crack-free interleaved at
/// the requested fraction), writes images/masks/manifest, returns the rows.
std::vector<DatasetEntry> generate_dataset(const GenDataConfig& cfg);

std::vector<DatasetEntry> read_manifest(const std::string& dir);
Sample load_sample(const std::string& dir, const DatasetEntry& entry);

}  // namespace crackmamba
