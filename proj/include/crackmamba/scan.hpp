#pragma once

#include <array>
#include <optional>
#include <string>

#include "crackmamba/tensor.hpp"

namespace crackmamba {

// 2D -> 1D scan orderings. A ScanOrder is a permutation of the flat
// row-major grid indices: perm[t] is the cell visited at step t.

enum class ScanKind {
  cross_v1,  // row-major
  cross_v2,  // column-major
  cross_v3,  // reverse of v1
  cross_v4,  // reverse of v2
  snake_s1,  // serpentine over anti-diagonals, zigzag starting at (0,0)
  snake_s2,  // s1 on the horizontally mirrored grid (main-diagonal serpentine)
  snake_s3,  // reverse of s1
  snake_s4,  // reverse of s2
  random_r1,
  random_r2,
  random_r3,  // reverse of r1
  random_r4,  // reverse of r2
};

constexpr int kScanKindCount = 12;

const char* to_string(ScanKind kind);
std::optional<ScanKind> parse_scan_kind(const std::string& name);

struct ScanOrder {
  Index height = 0;
  Index width = 0;
  ScanKind kind = ScanKind::cross_v1;
  std::vector<Index> perm;  // perm[t] = flat index r*W+c visited at step t
  std::vector<Index> inv;   // inv[perm[t]] = t

  Index length() const { return height * width; }
};

/// Exactly four orders over one grid, used by expand/merge.
struct DirectionSet {
  std::array<ScanOrder, 4> orders;

  Index height() const { return orders[0].height; }
  Index width() const { return orders[0].width; }
  Index length() const { return orders[0].length(); }
};

ScanOrder cross_order(Index height, Index width, ScanKind dir);
ScanOrder snake_order(Index height, Index width, ScanKind dir);

/// The four cross directions {v1..v4} / snake directions {s1..s4}.
DirectionSet cross_orders(Index height, Index width);
DirectionSet snake_orders(Index height, Index width);

/// r1, r2 are independent uniform permutations from SplitMix64 Fisher-Yates
/// streams seeded with seed_mix({seed, H, W, branch}) for branch 1 and 2;
/// r3/r4 are their reversals. Identical inputs give identical sets on every
/// platform (see common.hpp for the generator contract).
DirectionSet random_orders(Index height, Index width, std::uint64_t seed);

/// Any single order by kind (random kinds use `seed`).
ScanOrder make_order(Index height, Index width, ScanKind kind, std::uint64_t seed = 0);

struct AdjacencyProfile {
  Index max_step = 0;    // max Chebyshev distance between consecutive cells
  double mean_step = 0;  // mean of the same
};

AdjacencyProfile adjacency_profile(const ScanOrder& order);

/// Visit-time image: byte at cell (r,c) = round(inv[r*W+c] * 255 / (L-1)),
/// 0 for a single-cell grid.
std::vector<std::uint8_t> scan_viz_image(const ScanOrder& order);

// ---------------------------------------------------------------------------
// Scan expansion / merge over feature maps.
// ---------------------------------------------------------------------------

/// [N,C,H,W] -> [N,4,C,L]: out(n,k,c,t) = x(n,c, perm_k[t]).
template <typename S>
Tensor<S> expand(const Tensor<S>& x, const DirectionSet& dirs) {
  check_arg(x.rank() == 4, "expand: input must be [N,C,H,W], got " + shape_str(x.shape()));
  const Index n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  check_arg(h == dirs.height() && w == dirs.width(),
            "expand: direction set is " + std::to_string(dirs.height()) + "x" +
                std::to_string(dirs.width()) + ", input is " + std::to_string(h) + "x" +
                std::to_string(w));
  const Index l = h * w;
  Tensor<S> out({n, 4, c, l});
  for (Index in = 0; in < n; ++in)
    for (Index k = 0; k < 4; ++k) {
      const auto& perm = dirs.orders[static_cast<std::size_t>(k)].perm;
      for (Index ic = 0; ic < c; ++ic) {
        const S* src = x.data() + (in * c + ic) * l;
        S* dst = out.data() + ((in * 4 + k) * c + ic) * l;
        for (Index t = 0; t < l; ++t) dst[t] = src[perm[static_cast<std::size_t>(t)]];
      }
    }
  return out;
}

/// [N,4,C,L] -> [N,C,H,W]: each sequence is inverse-permuted back onto the
/// grid and the four grids are summed.
template <typename S>
Tensor<S> merge(const Tensor<S>& seqs, const DirectionSet& dirs) {
  check_arg(seqs.rank() == 4 && seqs.dim(1) == 4,
            "merge: input must be [N,4,C,L], got " + shape_str(seqs.shape()));
  const Index n = seqs.dim(0), c = seqs.dim(2), l = seqs.dim(3);
  check_arg(l == dirs.length(), "merge: sequence length " + std::to_string(l) +
                                    " does not match grid " + std::to_string(dirs.height()) + "x" +
                                    std::to_string(dirs.width()));
  Tensor<S> out({n, c, dirs.height(), dirs.width()});
  for (Index in = 0; in < n; ++in)
    for (Index k = 0; k < 4; ++k) {
      const auto& perm = dirs.orders[static_cast<std::size_t>(k)].perm;
      for (Index ic = 0; ic < c; ++ic) {
        const S* src = seqs.data() + ((in * 4 + k) * c + ic) * l;
        S* dst = out.data() + (in * c + ic) * l;
        for (Index t = 0; t < l; ++t) dst[perm[static_cast<std::size_t>(t)]] += src[t];
      }
    }
  return out;
}

}  // namespace crackmamba
