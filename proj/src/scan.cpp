#include "crackmamba/scan.hpp"

#include <algorithm>
#include <cmath>

namespace crackmamba {

namespace {

const char* const kKindNames[kScanKindCount] = {"v1", "v2", "v3", "v4", "s1", "s2",
                                                "s3", "s4", "r1", "r2", "r3", "r4"};

void check_dims(Index h, Index w) {
  check_arg(h >= 1 && w >= 1, "scan order: grid dimensions must be positive, got " +
                                  std::to_string(h) + "x" + std::to_string(w));
}

void fill_inverse(ScanOrder& o) {
  o.inv.assign(o.perm.size(), 0);
  for (Index t = 0; t < o.length(); ++t) o.inv[static_cast<std::size_t>(o.perm[static_cast<std::size_t>(t)])] = t;
}

ScanOrder reversed(const ScanOrder& base, ScanKind kind) {
  ScanOrder o;
  o.height = base.height;
  o.width = base.width;
  o.kind = kind;
  o.perm.assign(base.perm.rbegin(), base.perm.rend());
  fill_inverse(o);
  return o;
}

// Serpentine over anti-diagonals d = r+c, d ascending. Odd diagonals are
// walked with r ascending, even ones with r descending, so the path starts
// at (0,0) and every step moves to an 8-neighbour (JPEG zigzag convention).
ScanOrder snake_s1(Index h, Index w) {
  ScanOrder o;
  o.height = h;
  o.width = w;
  o.kind = ScanKind::snake_s1;
  o.perm.reserve(static_cast<std::size_t>(h * w));
  for (Index d = 0; d <= h + w - 2; ++d) {
    const Index r_lo = std::max<Index>(0, d - w + 1);
    const Index r_hi = std::min<Index>(h - 1, d);
    if (d % 2 == 1) {
      for (Index r = r_lo; r <= r_hi; ++r) o.perm.push_back(r * w + (d - r));
    } else {
      for (Index r = r_hi; r >= r_lo; --r) o.perm.push_back(r * w + (d - r));
    }
  }
  fill_inverse(o);
  return o;
}

// s1 on the horizontally mirrored grid, expressed in original indices:
// the path follows main diagonals instead of anti-diagonals.
ScanOrder snake_s2(Index h, Index w) {
  ScanOrder o = snake_s1(h, w);
  o.kind = ScanKind::snake_s2;
  for (auto& p : o.perm) {
    const Index r = p / w, c = p % w;
    p = r * w + (w - 1 - c);
  }
  fill_inverse(o);
  return o;
}

std::vector<Index> random_perm(Index l, std::uint64_t stream_seed) {
  std::vector<Index> perm(static_cast<std::size_t>(l));
  for (Index i = 0; i < l; ++i) perm[static_cast<std::size_t>(i)] = i;
  SplitMix64 rng(stream_seed);
  rng.shuffle(perm);
  return perm;
}

}  // namespace

const char* to_string(ScanKind kind) { return kKindNames[static_cast<int>(kind)]; }

std::optional<ScanKind> parse_scan_kind(const std::string& name) {
  for (int i = 0; i < kScanKindCount; ++i)
    if (name == kKindNames[i]) return static_cast<ScanKind>(i);
  return std::nullopt;
}

ScanOrder cross_order(Index h, Index w, ScanKind dir) {
  check_dims(h, w);
  ScanOrder o;
  o.height = h;
  o.width = w;
  o.kind = dir;
  o.perm.reserve(static_cast<std::size_t>(h * w));
  switch (dir) {
    case ScanKind::cross_v1:
      for (Index i = 0; i < h * w; ++i) o.perm.push_back(i);
      break;
    case ScanKind::cross_v2:
      for (Index c = 0; c < w; ++c)
        for (Index r = 0; r < h; ++r) o.perm.push_back(r * w + c);
      break;
    case ScanKind::cross_v3:
      return reversed(cross_order(h, w, ScanKind::cross_v1), dir);
    case ScanKind::cross_v4:
      return reversed(cross_order(h, w, ScanKind::cross_v2), dir);
    default:
      throw std::invalid_argument("cross_order: kind must be one of v1..v4");
  }
  fill_inverse(o);
  return o;
}

ScanOrder snake_order(Index h, Index w, ScanKind dir) {
  check_dims(h, w);
  switch (dir) {
    case ScanKind::snake_s1:
      return snake_s1(h, w);
    case ScanKind::snake_s2:
      return snake_s2(h, w);
    case ScanKind::snake_s3:
      return reversed(snake_s1(h, w), dir);
    case ScanKind::snake_s4:
      return reversed(snake_s2(h, w), dir);
    default:
      throw std::invalid_argument("snake_order: kind must be one of s1..s4");
  }
}

DirectionSet cross_orders(Index h, Index w) {
  return {{cross_order(h, w, ScanKind::cross_v1), cross_order(h, w, ScanKind::cross_v2),
           cross_order(h, w, ScanKind::cross_v3), cross_order(h, w, ScanKind::cross_v4)}};
}

DirectionSet snake_orders(Index h, Index w) {
  return {{snake_order(h, w, ScanKind::snake_s1), snake_order(h, w, ScanKind::snake_s2),
           snake_order(h, w, ScanKind::snake_s3), snake_order(h, w, ScanKind::snake_s4)}};
}

DirectionSet random_orders(Index h, Index w, std::uint64_t seed) {
  check_dims(h, w);
  DirectionSet set;
  for (int branch = 0; branch < 2; ++branch) {
    ScanOrder o;
    o.height = h;
    o.width = w;
    o.kind = branch == 0 ? ScanKind::random_r1 : ScanKind::random_r2;
    o.perm = random_perm(h * w, seed_mix({seed, static_cast<std::uint64_t>(h),
                                          static_cast<std::uint64_t>(w),
                                          static_cast<std::uint64_t>(branch + 1)}));
    fill_inverse(o);
    set.orders[static_cast<std::size_t>(branch)] = o;
  }
  set.orders[2] = reversed(set.orders[0], ScanKind::random_r3);
  set.orders[3] = reversed(set.orders[1], ScanKind::random_r4);
  return set;
}

ScanOrder make_order(Index h, Index w, ScanKind kind, std::uint64_t seed) {
  switch (kind) {
    case ScanKind::cross_v1:
    case ScanKind::cross_v2:
    case ScanKind::cross_v3:
    case ScanKind::cross_v4:
      return cross_order(h, w, kind);
    case ScanKind::snake_s1:
    case ScanKind::snake_s2:
    case ScanKind::snake_s3:
    case ScanKind::snake_s4:
      return snake_order(h, w, kind);
    default: {
      const DirectionSet set = random_orders(h, w, seed);
      return set.orders[static_cast<std::size_t>(static_cast<int>(kind) -
                                                 static_cast<int>(ScanKind::random_r1))];
    }
  }
}

AdjacencyProfile adjacency_profile(const ScanOrder& order) {
  const Index l = order.length();
  check_arg(l >= 2, "adjacency_profile: empty profile, single-cell order has no steps");
  AdjacencyProfile p;
  Index total = 0;
  for (Index t = 0; t + 1 < l; ++t) {
    const Index a = order.perm[static_cast<std::size_t>(t)];
    const Index b = order.perm[static_cast<std::size_t>(t + 1)];
    const Index dr = std::abs(a / order.width - b / order.width);
    const Index dc = std::abs(a % order.width - b % order.width);
    const Index step = std::max(dr, dc);
    p.max_step = std::max(p.max_step, step);
    total += step;
  }
  p.mean_step = static_cast<double>(total) / static_cast<double>(l - 1);
  return p;
}

std::vector<std::uint8_t> scan_viz_image(const ScanOrder& order) {
  const Index l = order.length();
  std::vector<std::uint8_t> img(static_cast<std::size_t>(l), 0);
  if (l == 1) return img;
  for (Index i = 0; i < l; ++i) {
    const double v = static_cast<double>(order.inv[static_cast<std::size_t>(i)]) * 255.0 /
                     static_cast<double>(l - 1);
    img[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(std::lround(v));
  }
  return img;
}

}  // namespace crackmamba
