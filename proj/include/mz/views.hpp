#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "mz/grid.hpp"
#include "mz/rng.hpp"

namespace mz {

enum class ViewErrorKind { SamplingExhausted, BadArgument };

class ViewError : public std::runtime_error {
 public:
  ViewError(ViewErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ViewErrorKind kind() const { return kind_; }

 private:
  ViewErrorKind kind_;
};

enum class CropKind { Global, Local };

/// An S×S window cut from a grid. Per-cell level-0 coordinates ride along so
/// spatial augmentation keeps geometry consistent with content.
struct Crop {
  int row0 = 0;
  int col0 = 0;
  int size = 0;
  CropKind kind = CropKind::Global;
  int d_patch = 0;
  float spacing = 0.0f;
  std::vector<float> features;        // S*S*d_patch row-major
  std::vector<std::uint8_t> validity; // S*S
  std::vector<double> coord_x;        // S*S
  std::vector<double> coord_y;        // S*S

  std::size_t cells() const { return static_cast<std::size_t>(size) * size; }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : validity) n += v != 0;
    return n;
  }
};

/// Rectangular-block mask over a crop; masked cells are always valid cells and
/// the masked count hits floor(gamma * valid) exactly.
struct BlockMask {
  int size = 0;
  double gamma = 0.0;
  std::vector<std::uint8_t> mask;  // S*S

  std::size_t masked_count() const {
    std::size_t n = 0;
    for (auto v : mask) n += v != 0;
    return n;
  }
};

/// Ranks retained by the token cap, ascending in valid-token rank order.
struct CapResult {
  std::vector<std::size_t> ranks;
};

/// Uniformly samples an in-bounds S×S window until the valid-token ratio
/// reaches rho_min; throws SamplingExhausted after max_attempts failures.
inline Crop sample_crop(const FeatureGrid& grid, int size, CropKind kind, double rho_min,
                        RngStream& rng, int max_attempts) {
  if (size < 1 || size > std::min(grid.height, grid.width))
    throw ViewError(ViewErrorKind::BadArgument,
                    "sample_crop: size " + std::to_string(size) + " exceeds grid " +
                        std::to_string(grid.height) + "x" + std::to_string(grid.width));
  if (!(rho_min > 0.0 && rho_min <= 1.0))
    throw ViewError(ViewErrorKind::BadArgument, "sample_crop: rho_min out of (0,1]");
  if (max_attempts < 1)
    throw ViewError(ViewErrorKind::BadArgument, "sample_crop: max_attempts must be >= 1");

  const int row_span = grid.height - size + 1;
  const int col_span = grid.width - size + 1;
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    const int r0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(row_span)));
    const int c0 = static_cast<int>(rng.below(static_cast<std::uint64_t>(col_span)));
    std::size_t n_valid = 0;
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c) n_valid += grid.valid(r0 + r, c0 + c);
    if (static_cast<double>(n_valid) < rho_min * size * size) continue;

    Crop crop;
    crop.row0 = r0;
    crop.col0 = c0;
    crop.size = size;
    crop.kind = kind;
    crop.d_patch = grid.d_patch;
    crop.spacing = grid.spacing;
    crop.features.resize(crop.cells() * grid.d_patch);
    crop.validity.resize(crop.cells());
    crop.coord_x.resize(crop.cells());
    crop.coord_y.resize(crop.cells());
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c) {
        const std::size_t k = static_cast<std::size_t>(r) * size + c;
        crop.validity[k] = grid.valid(r0 + r, c0 + c) ? 1 : 0;
        crop.coord_x[k] = grid.cell_x(c0 + c);
        crop.coord_y[k] = grid.cell_y(r0 + r);
        auto f = grid.feature(r0 + r, c0 + c);
        std::copy(f.begin(), f.end(), crop.features.begin() + k * grid.d_patch);
      }
    return crop;
  }
  throw ViewError(ViewErrorKind::SamplingExhausted,
                  "sample_crop: no window reached the valid-token ratio after " +
                      std::to_string(max_attempts) + " attempts");
}

namespace detail {

template <typename Fn>
void remap_crop(Crop& crop, Fn&& index_of_source) {
  const int s = crop.size, d = crop.d_patch;
  Crop out = crop;
  for (int r = 0; r < s; ++r)
    for (int c = 0; c < s; ++c) {
      const std::size_t dst = static_cast<std::size_t>(r) * s + c;
      const std::size_t src = index_of_source(r, c);
      out.validity[dst] = crop.validity[src];
      out.coord_x[dst] = crop.coord_x[src];
      out.coord_y[dst] = crop.coord_y[src];
      std::copy(crop.features.begin() + src * d, crop.features.begin() + (src + 1) * d,
                out.features.begin() + dst * d);
    }
  crop = std::move(out);
}

}  // namespace detail

inline void flip_horizontal(Crop& crop) {
  const int s = crop.size;
  detail::remap_crop(crop, [s](int r, int c) {
    return static_cast<std::size_t>(r) * s + (s - 1 - c);
  });
}

inline void flip_vertical(Crop& crop) {
  const int s = crop.size;
  detail::remap_crop(crop, [s](int r, int c) {
    return static_cast<std::size_t>(s - 1 - r) * s + c;
  });
}

/// One clockwise quarter turn.
inline void rotate90(Crop& crop) {
  const int s = crop.size;
  detail::remap_crop(crop, [s](int r, int c) {
    return static_cast<std::size_t>(s - 1 - c) * s + r;
  });
}

/// Independent horizontal/vertical flips with probabilities p_h, p_v, then
/// with probability p_r one rotation drawn uniformly from {90, 180, 270}.
inline Crop apply_spatial_augment(Crop crop, double p_h, double p_v, double p_r, RngStream& rng) {
  if (rng.bernoulli(p_h)) flip_horizontal(crop);
  if (rng.bernoulli(p_v)) flip_vertical(crop);
  if (rng.bernoulli(p_r)) {
    const int quarter_turns = 1 + static_cast<int>(rng.below(3));
    for (int i = 0; i < quarter_turns; ++i) rotate90(crop);
  }
  return crop;
}

/// Random permutation of linspace(gamma_min, gamma_max, n). A length-1
/// linspace takes the left endpoint.
inline std::vector<double> assign_mask_ratios(int n_selected, double gamma_min, double gamma_max,
                                              RngStream& rng) {
  if (n_selected < 1)
    throw ViewError(ViewErrorKind::BadArgument, "assign_mask_ratios: n_selected must be >= 1");
  std::vector<double> ratios(n_selected);
  if (n_selected == 1) {
    ratios[0] = gamma_min;
  } else {
    for (int i = 0; i < n_selected; ++i)
      ratios[i] = gamma_min + (gamma_max - gamma_min) * i / (n_selected - 1);
  }
  rng.shuffle(ratios);
  return ratios;
}

/// Iteratively places axis-aligned rectangles with log-uniform aspect ratios
/// until floor(gamma * valid) valid cells are masked, filling any residual
/// budget below min_block with uniformly chosen single valid tokens. Rounding
/// overshoot is trimmed back to the exact target.
inline BlockMask build_block_mask(const std::vector<std::uint8_t>& validity, int size,
                                  double gamma, double aspect_min, double aspect_max,
                                  int min_block, RngStream& rng) {
  if (!(gamma > 0.0 && gamma <= 1.0))
    throw ViewError(ViewErrorKind::BadArgument, "build_block_mask: gamma out of (0,1]");
  std::size_t n_valid = 0;
  for (auto v : validity) n_valid += v != 0;
  if (n_valid == 0)
    throw ViewError(ViewErrorKind::BadArgument, "build_block_mask: no valid cells");

  BlockMask bm;
  bm.size = size;
  bm.gamma = gamma;
  bm.mask.assign(validity.size(), 0);
  const std::size_t target = static_cast<std::size_t>(std::floor(gamma * n_valid));
  if (target == 0) return bm;

  std::size_t masked = 0;
  double area = static_cast<double>(min_block);
  const double log_amin = std::log(aspect_min), log_amax = std::log(aspect_max);
  int stalls = 0;
  while (masked + static_cast<std::size_t>(min_block) <= target && stalls < 16 * size) {
    const double aspect = std::exp(rng.uniform(log_amin, log_amax));
    int h = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, size);
    int w = std::clamp(static_cast<int>(std::lround(std::sqrt(area / aspect))), 1, size);
    // Blocks may overhang the crop and are clipped: every cell is then hit by
    // exactly h*w of the (S+h-1)*(S+w-1) placements, which keeps per-cell
    // coverage uniform out to the borders.
    const int r0 = -h + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(size + h - 1)));
    const int c0 = -w + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(size + w - 1)));
    std::size_t newly = 0;
    for (int r = std::max(0, r0); r < std::min(size, r0 + h); ++r)
      for (int c = std::max(0, c0); c < std::min(size, c0 + w); ++c) {
        const std::size_t k = static_cast<std::size_t>(r) * size + c;
        if (validity[k] && !bm.mask[k]) {
          bm.mask[k] = 1;
          ++newly;
        }
      }
    masked += newly;
    stalls = newly == 0 ? stalls + 1 : 0;
    const std::size_t remaining = target > masked ? target - masked : 0;
    area = std::min(area * 1.5,
                    static_cast<double>(std::max<std::size_t>(min_block, remaining)));
  }

  if (masked > target) {
    // Trim rounding overshoot: unmask a uniform subset of masked cells.
    std::vector<std::size_t> on;
    for (std::size_t k = 0; k < bm.mask.size(); ++k)
      if (bm.mask[k]) on.push_back(k);
    auto drop = rng.sample_without_replacement(on.size(), masked - target);
    for (std::size_t i : drop) bm.mask[on[i]] = 0;
  } else if (masked < target) {
    // Residual budget: single valid tokens chosen uniformly.
    std::vector<std::size_t> candidates;
    for (std::size_t k = 0; k < bm.mask.size(); ++k)
      if (validity[k] && !bm.mask[k]) candidates.push_back(k);
    auto pick = rng.sample_without_replacement(candidates.size(), target - masked);
    for (std::size_t i : pick) bm.mask[candidates[i]] = 1;
  }
  return bm;
}

/// Removes exactly floor(rho * valid) uniformly chosen valid cells (features
/// zeroed, validity cleared). At least one valid cell always survives.
inline FeatureGrid apply_token_dropout(FeatureGrid grid, double rho, RngStream& rng) {
  const std::size_t v = grid.valid_count();
  std::size_t k = static_cast<std::size_t>(std::floor(rho * static_cast<double>(v)));
  if (k >= v) k = v - 1;
  if (k == 0) return grid;
  std::vector<std::size_t> valid_cells;
  for (std::size_t i = 0; i < grid.cells(); ++i)
    if (grid.validity[i]) valid_cells.push_back(i);
  auto drop = rng.sample_without_replacement(valid_cells.size(), k);
  for (std::size_t i : drop) {
    const std::size_t cell = valid_cells[i];
    grid.validity[cell] = 0;
    std::fill(grid.features.begin() + cell * grid.d_patch,
              grid.features.begin() + (cell + 1) * grid.d_patch, 0.0f);
  }
  return grid;
}

/// Draws rho ~ Uniform[0, rho_max] then applies the exact-count dropout above.
inline FeatureGrid token_dropout(const FeatureGrid& grid, double rho_max, RngStream& rng) {
  if (!(rho_max >= 0.0 && rho_max < 1.0))
    throw ViewError(ViewErrorKind::BadArgument, "token_dropout: rho_max out of [0,1)");
  const double rho = rng.uniform(0.0, rho_max);
  if (rho_max == 0.0) return grid;
  return apply_token_dropout(grid, rho, rng);
}

/// Stratified token cap: ranks 0..V-1 are split into K equal-width bins
/// s_b = floor(bV/K), e_b = floor((b+1)V/K) - 1 and one rank is drawn
/// uniformly per bin. Identity when V <= K.
inline CapResult cap_tokens(std::size_t valid_count, std::size_t k_max, RngStream& rng) {
  if (valid_count < 1 || k_max < 1)
    throw ViewError(ViewErrorKind::BadArgument, "cap_tokens: counts must be >= 1");
  CapResult out;
  if (valid_count <= k_max) {
    out.ranks.resize(valid_count);
    for (std::size_t i = 0; i < valid_count; ++i) out.ranks[i] = i;
    return out;
  }
  out.ranks.reserve(k_max);
  for (std::size_t b = 0; b < k_max; ++b) {
    const std::size_t s = b * valid_count / k_max;
    const std::size_t e = (b + 1) * valid_count / k_max - 1;
    const std::size_t span = e >= s ? e - s + 1 : 1;
    out.ranks.push_back(s + rng.below(span));
  }
  return out;
}

}  // namespace mz
