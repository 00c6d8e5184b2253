#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mz/align.hpp"
#include "mz/encoder.hpp"
#include "mz/grid.hpp"
#include "mz/parallel.hpp"
#include "mz/tensor.hpp"

namespace mz::diag {

using nn::Tape;
using nn::Tensor;
using nn::Var;

class DiagError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Attribution maps
// ---------------------------------------------------------------------------

struct PatchBox {
  double x = 0.0;
  double y = 0.0;
  double size = 0.0;
};

struct AttributionMap {
  std::vector<double> raw;         // s_i >= 0, per valid patch
  std::vector<double> normalized;  // rank/N with average ranks for ties
  std::vector<PatchBox> boxes;     // level-0 geometry for overlay export
};

/// Average-rank normalization: s~_i = rank(s_i)/N with ties sharing the mean
/// of their rank range, so the overall mean stays (N+1)/(2N).
inline std::vector<double> rank_normalize(const std::vector<double>& scores) {
  const std::size_t n = scores.size();
  if (n == 0) throw DiagError("rank_normalize: empty input");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> out(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mean_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) out[order[k]] = mean_rank / static_cast<double>(n);
    i = j + 1;
  }
  return out;
}

/// Grad-x-Input relevance of each valid patch for phi = 0.5*||z||^2 of the
/// slide CLS embedding: s_i = ||x_i (.) dphi/dx_i||_1. Encoder runs in eval
/// mode; invalid patches are excluded.
inline AttributionMap gradxinput_map(const FeatureGrid& grid, const nn::ParamStore& params,
                                     const enc::SlideEncoderConfig& cfg,
                                     std::size_t k_max = SIZE_MAX) {
  RngStream quiet(0);
  auto seq = align::grid_tokens(grid, k_max, quiet);
  const int n = seq.count();

  Tape t;
  Var features = t.leaf(seq.features, "input");
  enc::ParamCtx p{&t, &params, "slide/", false};
  // Re-run the embed path manually so the input leaf carries the gradient.
  Var x = t.gelu(nn::affine(t, features, p("embed.w"), p("embed.b")));
  std::vector<Var> parts{p("cls")};
  if (cfg.registers > 0) parts.push_back(p("reg"));
  parts.push_back(x);
  Var seq_var = t.concat_rows(parts);
  const int special = 1 + cfg.registers;
  std::vector<Tensor> bias =
      enc::alibi_bias(seq.coord_x, seq.coord_y, seq.spacing, cfg.slopes(), special);
  const Tensor bg = enc::background_mask(seq.validity, special);
  for (auto& b : bias)
    for (std::size_t i = 0; i < b.v.size(); ++i) b.v[i] += bg.v[i];
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string blk = "blocks." + std::to_string(l);
    Var h = t.layer_norm(seq_var, p(blk + ".ln1.g"), p(blk + ".ln1.b"));
    Var attn =
        enc::detail::attention(t, p, blk + ".attn", h, cfg.heads, &bias, 0.0, quiet, false);
    seq_var = t.add(seq_var, attn);
    Var h2 = t.layer_norm(seq_var, p(blk + ".ln2.g"), p(blk + ".ln2.b"));
    Var f = enc::detail::ffn(t, p, blk + ".ffn", h2, 0.0, quiet, false);
    seq_var = t.add(seq_var, f);
  }
  Var out = t.layer_norm(seq_var, p("norm.g"), p("norm.b"));
  Var cls = t.slice_rows(out, 0, 1);
  Var phi = t.mul_scalar(t.sum(t.mul(cls, cls)), 0.5);
  t.backward(phi);
  Tensor grad = t.grad(features);

  AttributionMap map;
  map.raw.resize(n);
  map.boxes.resize(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < grid.d_patch; ++j)
      s += std::fabs(seq.features.at(i, j) * grad.at(i, j));
    map.raw[i] = s;
    map.boxes[i] = {seq.coord_x[i], seq.coord_y[i], static_cast<double>(grid.spacing)};
  }
  map.normalized = rank_normalize(map.raw);
  return map;
}

/// The same phi under a caller-supplied embedding builder; used by tests with
/// closed-form encoders.
template <typename EmbedFn>
std::vector<double> gradxinput_scores(const Tensor& features, EmbedFn&& embed) {
  Tape t;
  Var input = t.leaf(features, "input");
  Var z = embed(t, input);
  Var phi = t.mul_scalar(t.sum(t.mul(z, z)), 0.5);
  t.backward(phi);
  Tensor grad = t.grad(input);
  std::vector<double> out(features.rows());
  for (int i = 0; i < features.rows(); ++i) {
    double s = 0.0;
    for (int j = 0; j < features.cols(); ++j) s += std::fabs(features.at(i, j) * grad.at(i, j));
    out[i] = s;
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA compactness
// ---------------------------------------------------------------------------

/// Eigenvalues of a symmetric matrix by cyclic Jacobi sweeps, descending.
inline std::vector<double> symmetric_eigenvalues(std::vector<std::vector<double>> a,
                                                 double tol = 1e-10) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        if (i != j) off += a[i][j] * a[i][j];
        scale += a[i][j] * a[i][j];
      }
    if (off <= tol * tol * std::max(scale, 1e-300)) break;
    for (std::size_t p = 0; p + 1 < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::fabs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double sign = theta >= 0 ? 1.0 : -1.0;
        const double tv = sign / (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(tv * tv + 1.0);
        const double s = tv * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = a[i][i];
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

struct CompactnessReport {
  std::vector<double> eigenvalues;          // descending, clamped at 0
  std::vector<double> cumulative_ratio;     // V(r)
  std::map<double, int> rank_at_threshold;  // tau -> r_tau
};

/// Centered covariance spectrum and the smallest rank reaching each
/// cumulative explained-variance threshold.
inline CompactnessReport pca_compactness(const std::vector<std::vector<double>>& embeddings,
                                         const std::vector<double>& thresholds = {0.80, 0.90,
                                                                                  0.95}) {
  const std::size_t n = embeddings.size();
  if (n < 2) throw DiagError("pca_compactness: need at least 2 rows");
  const std::size_t d = embeddings[0].size();
  std::vector<double> mean(d, 0.0);
  for (const auto& row : embeddings)
    for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
  for (auto& m : mean) m /= static_cast<double>(n);

  std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
  for (const auto& row : embeddings)
    for (std::size_t i = 0; i < d; ++i) {
      const double ci = row[i] - mean[i];
      for (std::size_t j = i; j < d; ++j) cov[i][j] += ci * (row[j] - mean[j]);
    }
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      cov[i][j] /= static_cast<double>(n - 1);
      cov[j][i] = cov[i][j];
    }

  CompactnessReport report;
  report.eigenvalues = symmetric_eigenvalues(std::move(cov));
  double total = 0.0;
  for (auto& v : report.eigenvalues) {
    v = std::max(v, 0.0);
    total += v;
  }
  if (total <= 0.0) throw DiagError("pca_compactness: zero total variance");
  double acc = 0.0;
  for (double v : report.eigenvalues) {
    acc += v;
    report.cumulative_ratio.push_back(acc / total);
  }
  for (double tau : thresholds) {
    int r = static_cast<int>(d);
    for (std::size_t i = 0; i < report.cumulative_ratio.size(); ++i)
      if (report.cumulative_ratio[i] >= tau) {
        r = static_cast<int>(i) + 1;
        break;
      }
    report.rank_at_threshold[tau] = r;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Bootstrap neighborhood stability
// ---------------------------------------------------------------------------

struct StabilityPoint {
  int k = 0;
  double mean = 0.0;
  double stddev = 0.0;  // over repeats
};

namespace detail {

/// k nearest neighbors by cosine distance among `candidates`, self excluded;
/// ties at the boundary break toward the lowest index.
inline std::vector<std::size_t> knn_of(const std::vector<std::vector<double>>& unit_rows,
                                       std::size_t query,
                                       const std::vector<std::size_t>& candidates, int k) {
  std::vector<std::pair<double, std::size_t>> dist;
  dist.reserve(candidates.size());
  for (std::size_t c : candidates) {
    if (c == query) continue;
    double dot = 0.0;
    for (std::size_t j = 0; j < unit_rows[query].size(); ++j)
      dot += unit_rows[query][j] * unit_rows[c][j];
    dist.emplace_back(1.0 - dot, c);
  }
  std::sort(dist.begin(), dist.end());
  std::vector<std::size_t> out;
  for (int i = 0; i < k && i < static_cast<int>(dist.size()); ++i) out.push_back(dist[i].second);
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Bootstrap kNN overlap: full-set neighbors vs neighbors recomputed on
/// subsets of round(rho*N) rows sampled without replacement; per-slide
/// overlaps averaged per repeat, then across repeats.
inline std::vector<StabilityPoint> neighborhood_stability(
    const std::vector<std::vector<double>>& embeddings, const std::vector<int>& k_list,
    double rho, int repeats, RngStream& rng, int threads = 1) {
  const std::size_t n = embeddings.size();
  if (n < 2) throw DiagError("neighborhood_stability: need at least 2 rows");
  const int k_max = *std::max_element(k_list.begin(), k_list.end());
  const std::size_t m = static_cast<std::size_t>(std::lround(rho * static_cast<double>(n)));
  if (m <= static_cast<std::size_t>(k_max) + 1)
    throw DiagError("neighborhood_stability: rho*N must exceed max(k)+1");

  // L2-normalize once; cosine distance is then 1 - dot.
  std::vector<std::vector<double>> unit = embeddings;
  for (auto& row : unit) {
    double norm = 0.0;
    for (double v : row) norm += v * v;
    norm = std::max(std::sqrt(norm), 1e-12);
    for (auto& v : row) v /= norm;
  }

  std::vector<std::size_t> everyone(n);
  for (std::size_t i = 0; i < n; ++i) everyone[i] = i;
  std::vector<std::vector<std::size_t>> full_knn = parallel_map<std::vector<std::size_t>>(
      n, threads, [&](std::size_t i) { return detail::knn_of(unit, i, everyone, k_max); });

  std::vector<std::vector<double>> per_repeat = parallel_map<std::vector<double>>(
      static_cast<std::size_t>(repeats), threads, [&](std::size_t b) {
        RngStream brng = rng.child("repeat").child(b);
        auto subset = brng.sample_without_replacement(n, m);
        std::vector<double> overlaps(k_list.size(), 0.0);
        for (std::size_t si = 0; si < subset.size(); ++si) {
          const std::size_t i = subset[si];
          auto sub_knn = detail::knn_of(unit, i, subset, k_max);
          for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
            const int k = k_list[ki];
            // Neighbor lists are ascending; take the k nearest by recomputing
            // prefix sets.
            auto full_k = detail::knn_of(unit, i, everyone, k);
            auto sub_k = detail::knn_of(unit, i, subset, k);
            std::vector<std::size_t> inter;
            std::set_intersection(full_k.begin(), full_k.end(), sub_k.begin(), sub_k.end(),
                                  std::back_inserter(inter));
            overlaps[ki] += static_cast<double>(inter.size()) / k;
          }
        }
        for (auto& o : overlaps) o /= static_cast<double>(subset.size());
        return overlaps;
      });

  std::vector<StabilityPoint> out;
  for (std::size_t ki = 0; ki < k_list.size(); ++ki) {
    StabilityPoint pt;
    pt.k = k_list[ki];
    for (const auto& rep : per_repeat) pt.mean += rep[ki];
    pt.mean /= repeats;
    for (const auto& rep : per_repeat) pt.stddev += (rep[ki] - pt.mean) * (rep[ki] - pt.mean);
    pt.stddev = repeats > 1 ? std::sqrt(pt.stddev / repeats) : 0.0;
    out.push_back(pt);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Overlay export
// ---------------------------------------------------------------------------

/// Rasterizes normalized scores onto level-0 patch boxes with per-pixel
/// averaging where boxes overlap; emits binary PGM (P5, maxval 255).
inline void write_attribution_pgm(std::ostream& out, const AttributionMap& map,
                                  int pixels_per_patch = 8) {
  if (map.boxes.empty()) throw DiagError("write_attribution_pgm: empty map");
  double min_x = map.boxes[0].x, min_y = map.boxes[0].y, max_x = min_x, max_y = min_y;
  double box = map.boxes[0].size;
  for (const auto& b : map.boxes) {
    min_x = std::min(min_x, b.x);
    min_y = std::min(min_y, b.y);
    max_x = std::max(max_x, b.x + b.size);
    max_y = std::max(max_y, b.y + b.size);
    box = b.size;
  }
  const double scale = pixels_per_patch / box;
  const int width = std::max(1, static_cast<int>(std::ceil((max_x - min_x) * scale)));
  const int height = std::max(1, static_cast<int>(std::ceil((max_y - min_y) * scale)));
  std::vector<double> sum(static_cast<std::size_t>(width) * height, 0.0);
  std::vector<int> count(static_cast<std::size_t>(width) * height, 0);
  for (std::size_t i = 0; i < map.boxes.size(); ++i) {
    const auto& b = map.boxes[i];
    const int x0 = static_cast<int>(std::floor((b.x - min_x) * scale));
    const int y0 = static_cast<int>(std::floor((b.y - min_y) * scale));
    const int x1 = std::min(width, static_cast<int>(std::ceil((b.x - min_x + b.size) * scale)));
    const int y1 = std::min(height, static_cast<int>(std::ceil((b.y - min_y + b.size) * scale)));
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        sum[static_cast<std::size_t>(y) * width + x] += map.normalized[i];
        count[static_cast<std::size_t>(y) * width + x] += 1;
      }
  }
  out << "P5\n" << width << ' ' << height << "\n255\n";
  for (std::size_t i = 0; i < sum.size(); ++i) {
    const double v = count[i] > 0 ? sum[i] / count[i] : 0.0;
    out.put(static_cast<char>(std::lround(v * 255.0)));
  }
}

inline void write_attribution_csv(std::ostream& out, const AttributionMap& map) {
  out << "x,y,size,raw,normalized\n";
  for (std::size_t i = 0; i < map.boxes.size(); ++i)
    out << map.boxes[i].x << ',' << map.boxes[i].y << ',' << map.boxes[i].size << ','
        << map.raw[i] << ',' << map.normalized[i] << '\n';
}

}  // namespace mz::diag
