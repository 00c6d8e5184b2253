#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mz {

/// One patch: level-0 pixel coordinates plus its frozen feature vector.
struct PatchRecord {
  std::int64_t x = 0;
  std::int64_t y = 0;
  std::vector<float> feature;
};

enum class GridErrorKind {
  EmptyInput,
  BadSpacing,
  NegativeCoordinate,
  InconsistentFeatureLength,
  CellCollision,
  BadMagic,
  BadVersion,
  Truncated,
  ValidityZeroMismatch,
  InvalidHeader,
  WriteFailure,
};

class GridError : public std::runtime_error {
 public:
  GridError(GridErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  GridErrorKind kind() const { return kind_; }

 private:
  GridErrorKind kind_;
};

/// Dense H×W×d_patch feature lattice with a validity mask. Invalid cells hold
/// all-zero features. Immutable by convention after construction.
struct FeatureGrid {
  int height = 0;
  int width = 0;
  int d_patch = 0;
  float spacing = 0.0f;
  float origin_x = 0.0f;
  float origin_y = 0.0f;
  std::string magnification;
  std::vector<float> features;        // row-major H*W*d_patch
  std::vector<std::uint8_t> validity; // row-major H*W, 0/1

  std::size_t cells() const { return static_cast<std::size_t>(height) * width; }

  bool valid(int r, int c) const { return validity[static_cast<std::size_t>(r) * width + c] != 0; }

  std::span<const float> feature(int r, int c) const {
    return {features.data() + (static_cast<std::size_t>(r) * width + c) * d_patch,
            static_cast<std::size_t>(d_patch)};
  }

  std::span<float> feature_mut(int r, int c) {
    return {features.data() + (static_cast<std::size_t>(r) * width + c) * d_patch,
            static_cast<std::size_t>(d_patch)};
  }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : validity) n += v != 0;
    return n;
  }

  /// Level-0 coordinate of a cell, reconstructed from the grid geometry.
  double cell_x(int c) const { return static_cast<double>(origin_x) + static_cast<double>(c) * spacing; }
  double cell_y(int r) const { return static_cast<double>(origin_y) + static_cast<double>(r) * spacing; }

  bool operator==(const FeatureGrid&) const = default;
};

/// Places patches on the minimal grid covering them. Placement uses
/// r = floor((y - y_min)/spacing + 0.5), c likewise for x. Two patches mapping
/// to the same cell is a hard error (the tiling upstream must not overlap).
inline FeatureGrid build_grid(const std::vector<PatchRecord>& patches, float spacing,
                              std::string magnification = {}) {
  if (patches.empty()) throw GridError(GridErrorKind::EmptyInput, "build_grid: no patches");
  if (!(spacing > 0.0f)) throw GridError(GridErrorKind::BadSpacing, "build_grid: spacing must be > 0");

  const std::size_t d = patches.front().feature.size();
  std::int64_t x_min = patches.front().x, y_min = patches.front().y;
  for (const auto& p : patches) {
    if (p.feature.size() != d)
      throw GridError(GridErrorKind::InconsistentFeatureLength,
                      "build_grid: feature length " + std::to_string(p.feature.size()) +
                          " != " + std::to_string(d));
    if (p.x < 0 || p.y < 0)
      throw GridError(GridErrorKind::NegativeCoordinate, "build_grid: negative coordinate (" +
                                                             std::to_string(p.x) + ", " +
                                                             std::to_string(p.y) + ")");
    x_min = std::min(x_min, p.x);
    y_min = std::min(y_min, p.y);
  }

  auto place = [&](const PatchRecord& p) {
    int r = static_cast<int>(std::floor(static_cast<double>(p.y - y_min) / spacing + 0.5));
    int c = static_cast<int>(std::floor(static_cast<double>(p.x - x_min) / spacing + 0.5));
    return std::pair<int, int>{r, c};
  };

  int h = 0, w = 0;
  for (const auto& p : patches) {
    auto [r, c] = place(p);
    h = std::max(h, r + 1);
    w = std::max(w, c + 1);
  }

  FeatureGrid g;
  g.height = h;
  g.width = w;
  g.d_patch = static_cast<int>(d);
  g.spacing = spacing;
  g.origin_x = static_cast<float>(x_min);
  g.origin_y = static_cast<float>(y_min);
  g.magnification = std::move(magnification);
  g.features.assign(g.cells() * d, 0.0f);
  g.validity.assign(g.cells(), 0);

  // Remember which patch claimed each cell so collisions can name both sources.
  std::map<std::size_t, std::pair<std::int64_t, std::int64_t>> owner;
  for (const auto& p : patches) {
    auto [r, c] = place(p);
    std::size_t cell = static_cast<std::size_t>(r) * w + c;
    auto [it, inserted] = owner.emplace(cell, std::pair{p.x, p.y});
    if (!inserted)
      throw GridError(GridErrorKind::CellCollision,
                      "build_grid: patches (" + std::to_string(it->second.first) + ", " +
                          std::to_string(it->second.second) + ") and (" + std::to_string(p.x) +
                          ", " + std::to_string(p.y) + ") collide at cell (" + std::to_string(r) +
                          ", " + std::to_string(c) + ")");
    g.validity[cell] = 1;
    std::copy(p.feature.begin(), p.feature.end(), g.features.begin() + cell * d);
  }
  return g;
}

namespace detail {

inline void put_bytes(std::ostream& out, const void* p, std::size_t n, std::size_t& offset) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!out)
    throw GridError(GridErrorKind::WriteFailure,
                    "grid write failed at byte offset " + std::to_string(offset));
  offset += n;
}

inline void put_u32(std::ostream& out, std::uint32_t v, std::size_t& offset) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  put_bytes(out, b, 4, offset);
}

inline void put_u16(std::ostream& out, std::uint16_t v, std::size_t& offset) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  put_bytes(out, b, 2, offset);
}

inline void put_f32(std::ostream& out, float v, std::size_t& offset) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits, offset);
}

inline void get_bytes(std::istream& in, void* p, std::size_t n, const char* what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw GridError(GridErrorKind::Truncated, std::string("grid read truncated in ") + what +
                                                  ": expected " + std::to_string(n) +
                                                  " bytes, got " + std::to_string(in.gcount()));
}

inline std::uint32_t get_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  get_bytes(in, b, 4, what);
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
         (std::uint32_t{b[3]} << 24);
}

inline std::uint16_t get_u16(std::istream& in, const char* what) {
  unsigned char b[2];
  get_bytes(in, b, 2, what);
  return static_cast<std::uint16_t>(std::uint16_t{b[0]} | (std::uint16_t{b[1]} << 8));
}

inline float get_f32(std::istream& in, const char* what) {
  std::uint32_t bits = get_u32(in, what);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace detail

inline constexpr char kGridMagic[4] = {'M', 'Z', 'G', 'R'};
inline constexpr std::uint32_t kGridVersion = 1;

/// Serializes a grid in the MZGR format. Returns the number of bytes written.
inline std::size_t write_grid(const FeatureGrid& g, std::ostream& out) {
  std::size_t offset = 0;
  detail::put_bytes(out, kGridMagic, 4, offset);
  detail::put_u32(out, kGridVersion, offset);
  detail::put_u32(out, static_cast<std::uint32_t>(g.height), offset);
  detail::put_u32(out, static_cast<std::uint32_t>(g.width), offset);
  detail::put_u32(out, static_cast<std::uint32_t>(g.d_patch), offset);
  detail::put_f32(out, g.spacing, offset);
  detail::put_f32(out, g.origin_x, offset);
  detail::put_f32(out, g.origin_y, offset);
  detail::put_u16(out, static_cast<std::uint16_t>(g.magnification.size()), offset);
  if (!g.magnification.empty())
    detail::put_bytes(out, g.magnification.data(), g.magnification.size(), offset);

  // Validity bitmap, row-major, bit k of byte k/8 (LSB first) = cell k.
  std::vector<unsigned char> bits((g.cells() + 7) / 8, 0);
  for (std::size_t k = 0; k < g.cells(); ++k)
    if (g.validity[k]) bits[k / 8] |= static_cast<unsigned char>(1u << (k % 8));
  detail::put_bytes(out, bits.data(), bits.size(), offset);

  for (float f : g.features) detail::put_f32(out, f, offset);
  out.flush();
  if (!out)
    throw GridError(GridErrorKind::WriteFailure,
                    "grid write failed at byte offset " + std::to_string(offset));
  return offset;
}

inline FeatureGrid read_grid(std::istream& in) {
  char magic[4];
  detail::get_bytes(in, magic, 4, "magic");
  if (std::memcmp(magic, kGridMagic, 4) != 0)
    throw GridError(GridErrorKind::BadMagic,
                    std::string("bad grid magic: expected \"MZGR\", got \"") +
                        std::string(magic, 4) + "\"");
  const std::uint32_t version = detail::get_u32(in, "version");
  if (version != kGridVersion)
    throw GridError(GridErrorKind::BadVersion,
                    "unsupported grid version " + std::to_string(version));

  FeatureGrid g;
  g.height = static_cast<int>(detail::get_u32(in, "height"));
  g.width = static_cast<int>(detail::get_u32(in, "width"));
  g.d_patch = static_cast<int>(detail::get_u32(in, "d_patch"));
  g.spacing = detail::get_f32(in, "spacing");
  g.origin_x = detail::get_f32(in, "origin_x");
  g.origin_y = detail::get_f32(in, "origin_y");
  if (g.height < 1 || g.width < 1 || g.d_patch < 1 || !(g.spacing > 0.0f))
    throw GridError(GridErrorKind::InvalidHeader, "grid header violates invariants");

  const std::uint16_t tag_len = detail::get_u16(in, "magnification tag");
  g.magnification.resize(tag_len);
  if (tag_len > 0) detail::get_bytes(in, g.magnification.data(), tag_len, "magnification tag");

  std::vector<unsigned char> bits((g.cells() + 7) / 8);
  detail::get_bytes(in, bits.data(), bits.size(), "validity bitmap");
  g.validity.resize(g.cells());
  std::size_t n_valid = 0;
  for (std::size_t k = 0; k < g.cells(); ++k) {
    g.validity[k] = (bits[k / 8] >> (k % 8)) & 1u;
    n_valid += g.validity[k];
  }
  if (n_valid == 0)
    throw GridError(GridErrorKind::InvalidHeader, "grid has no valid cells");

  const std::size_t n_values = g.cells() * static_cast<std::size_t>(g.d_patch);
  g.features.resize(n_values);
  for (std::size_t i = 0; i < n_values; ++i) g.features[i] = detail::get_f32(in, "features");

  for (std::size_t k = 0; k < g.cells(); ++k) {
    if (g.validity[k]) continue;
    for (int j = 0; j < g.d_patch; ++j)
      if (g.features[k * g.d_patch + j] != 0.0f)
        throw GridError(GridErrorKind::ValidityZeroMismatch,
                        "nonzero feature at invalid cell " + std::to_string(k));
  }
  return g;
}

}  // namespace mz
