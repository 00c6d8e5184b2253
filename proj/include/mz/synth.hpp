#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mz/align.hpp"
#include "mz/config.hpp"
#include "mz/grid.hpp"
#include "mz/rng.hpp"

namespace mz::cli {

/// Synthetic corpus description: clustered patch features on blob-shaped
/// grids, plus planted classification and survival tasks that a linear model
/// on mean patch features can recover by construction.
struct SynthSpec {
  int slides = 520;
  int grid_min = 16;
  int grid_max = 22;
  int d_patch = 16;
  int clusters = 4;
  double cluster_scale = 1.0;
  std::vector<int> class_task_counts{3, 2, 4};
  double class_shift = 2.5;
  // Class-conditional checkerboard amplitude: a per-class direction whose
  // sign alternates with cell parity, so it cancels in mean pooling but stays
  // readable at patch level. Zero keeps the corpus purely mean-encoded.
  double pattern_amp = 0.0;
  int survival_tasks = 2;
  double censor_rate = 0.3;
  double noise = 0.6;
  double base_rate = 0.08;
  double risk_beta = 1.2;
  double p_two_slides = 0.23;   // slide-to-patient ratio lands near 1.33
  double p_three_slides = 0.05;
  double label_density = 1.0;
  std::string magnification = "20x";
  float spacing = 224.0f;
};

inline SynthSpec synth_spec(const Config& c) {
  SynthSpec s;
  s.slides = static_cast<int>(c.get_int("synth.slides"));
  s.grid_min = static_cast<int>(c.get_int("synth.grid_min"));
  s.grid_max = static_cast<int>(c.get_int("synth.grid_max"));
  s.d_patch = static_cast<int>(c.get_int("synth.d_patch"));
  s.clusters = static_cast<int>(c.get_int("synth.clusters"));
  s.cluster_scale = c.get_real("synth.cluster_scale");
  s.class_task_counts = parse_int_list(c.get_str("synth.class_counts"));
  s.class_shift = c.get_real("synth.class_shift");
  s.pattern_amp = c.get_real("synth.pattern_amp");
  s.survival_tasks = static_cast<int>(c.get_int("synth.survival_tasks"));
  s.censor_rate = c.get_real("synth.censor_rate");
  s.noise = c.get_real("synth.noise");
  s.base_rate = c.get_real("synth.base_rate");
  s.risk_beta = c.get_real("synth.risk_beta");
  s.p_two_slides = c.get_real("synth.p_two_slides");
  s.p_three_slides = c.get_real("synth.p_three_slides");
  s.label_density = c.get_real("synth.label_density");
  s.magnification = c.get_str("synth.magnification");
  s.spacing = static_cast<float>(c.get_real("synth.spacing"));
  return s;
}

struct SynthOutput {
  std::vector<FeatureGrid> grids;       // one per slide, case order
  std::vector<std::string> grid_names;  // slide_NNNN.mzgr
  std::vector<align::TaskSpec> tasks;
  std::vector<align::CaseRecord> cases;
  // Ground truth for oracles.
  std::vector<int> case_cluster;
  std::vector<std::vector<int>> case_class;    // [task][case]
  std::vector<std::vector<double>> case_risk;  // [task][case], latent in [0,1]
};

namespace detail {

inline std::vector<double> unit_direction(int dim, RngStream& rng) {
  std::vector<double> v(dim);
  double norm = 0.0;
  for (auto& x : v) {
    x = rng.normal();
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (auto& x : v) x /= norm;
  return v;
}

/// For T ~ Exp(rate) and U ~ Uniform(0, a/rate), P(censored) = P(T > U) =
/// (1 - e^-a)/a, decreasing in a. Returns the multiplier a hitting the
/// configured censoring fraction in expectation.
inline double censor_horizon_multiplier(double censor_rate) {
  double lo = 1e-6, hi = 200.0;
  for (int iter = 0; iter < 200; ++iter) {
    const double mid = 0.5 * (lo + hi);
    const double censored = (1.0 - std::exp(-mid)) / mid;
    (censored > censor_rate ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

/// One survival draw: event time from an exponential whose rate scales with
/// the latent risk, censored by an independent uniform cutoff.
inline std::pair<double, int> sample_survival(double latent_risk, double base_rate, double beta,
                                              double censor_horizon, RngStream& rng) {
  const double rate = base_rate * std::exp(beta * (latent_risk - 0.5));
  double u = rng.next_double();
  while (u <= 0.0) u = rng.next_double();
  const double event_time = -std::log(u) / rate;
  const double cutoff = rng.uniform(0.0, censor_horizon);
  if (event_time <= cutoff) return {event_time, 1};
  return {cutoff, 0};
}

/// Blob validity: the union of a centered disc and 1-2 satellites. Keeps the
/// mask nontrivial while guaranteeing crop-sized valid regions.
inline std::vector<std::uint8_t> blob_mask(int h, int w, RngStream& rng) {
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(h) * w, 0);
  struct Disc {
    double r, c, radius;
  };
  std::vector<Disc> discs;
  const double base_radius = 0.48 * std::min(h, w);
  discs.push_back({h / 2.0, w / 2.0, base_radius});
  const int extras = 1 + static_cast<int>(rng.below(2));
  for (int i = 0; i < extras; ++i)
    discs.push_back({rng.uniform(0.2 * h, 0.8 * h), rng.uniform(0.2 * w, 0.8 * w),
                     rng.uniform(0.25, 0.45) * std::min(h, w)});
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      for (const auto& d : discs) {
        const double dr = r - d.r, dc = c - d.c;
        if (dr * dr + dc * dc <= d.radius * d.radius) {
          mask[static_cast<std::size_t>(r) * w + c] = 1;
          break;
        }
      }
  return mask;
}

}  // namespace detail

/// Deterministic synthetic corpus: grids, task manifest and case manifest.
inline SynthOutput synth_dataset(const SynthSpec& spec, std::uint64_t seed) {
  RngStream root(seed);
  SynthOutput out;

  // Planted structure: cluster centroids, class-conditional directions and
  // survival risk directions, all in feature space.
  RngStream struct_rng = root.child("structure");
  std::vector<std::vector<double>> centroids;
  for (int j = 0; j < spec.clusters; ++j) {
    auto dir = detail::unit_direction(spec.d_patch, struct_rng);
    for (auto& x : dir) x *= spec.cluster_scale;
    centroids.push_back(std::move(dir));
  }
  std::vector<std::vector<std::vector<double>>> class_dirs(spec.class_task_counts.size());
  std::vector<std::vector<std::vector<double>>> pattern_dirs(spec.class_task_counts.size());
  for (std::size_t t = 0; t < spec.class_task_counts.size(); ++t)
    for (int y = 0; y < spec.class_task_counts[t]; ++y) {
      auto dir = detail::unit_direction(spec.d_patch, struct_rng);
      for (auto& x : dir) x *= spec.class_shift;
      class_dirs[t].push_back(std::move(dir));
      auto pat = detail::unit_direction(spec.d_patch, struct_rng);
      for (auto& x : pat) x *= spec.pattern_amp;
      pattern_dirs[t].push_back(std::move(pat));
    }
  std::vector<std::vector<double>> risk_dirs;
  for (int t = 0; t < spec.survival_tasks; ++t)
    risk_dirs.push_back(detail::unit_direction(spec.d_patch, struct_rng));
  const double censor_horizon =
      detail::censor_horizon_multiplier(spec.censor_rate) / spec.base_rate;

  for (std::size_t t = 0; t < spec.class_task_counts.size(); ++t) {
    align::TaskSpec task;
    task.id = "cls" + std::to_string(t);
    task.kind = align::TaskKind::Classification;
    for (int y = 0; y < spec.class_task_counts[t]; ++y)
      task.class_names.push_back("class" + std::to_string(y));
    out.tasks.push_back(std::move(task));
  }
  const char* endpoints[4] = {"OS", "DSS", "DFI", "PFI"};
  for (int t = 0; t < spec.survival_tasks; ++t) {
    align::TaskSpec task;
    task.id = "surv" + std::to_string(t);
    task.kind = align::TaskKind::Survival;
    task.endpoint = endpoints[t % 4];
    out.tasks.push_back(std::move(task));
  }

  out.case_class.resize(spec.class_task_counts.size());
  out.case_risk.resize(spec.survival_tasks);

  RngStream case_rng = root.child("cases");
  int slides_made = 0;
  int case_index = 0;
  while (slides_made < spec.slides) {
    RngStream crng = case_rng.child(static_cast<std::uint64_t>(case_index));
    const double u = crng.next_double();
    int n_slides = u < spec.p_three_slides ? 3
                   : u < spec.p_three_slides + spec.p_two_slides ? 2
                                                                 : 1;
    n_slides = std::min(n_slides, spec.slides - slides_made);

    align::CaseRecord rec;
    rec.id = "case" + std::to_string(case_index);
    const int cluster = static_cast<int>(crng.below(spec.clusters));
    out.case_cluster.push_back(cluster);

    // Case-level planted targets.
    std::vector<int> ys(spec.class_task_counts.size());
    for (std::size_t t = 0; t < ys.size(); ++t) {
      ys[t] = static_cast<int>(crng.below(spec.class_task_counts[t]));
      out.case_class[t].push_back(ys[t]);
    }
    std::vector<double> risks(spec.survival_tasks);
    for (int t = 0; t < spec.survival_tasks; ++t) {
      risks[t] = crng.next_double();
      out.case_risk[t].push_back(risks[t]);
    }

    // The mean patch feature encodes cluster + class shifts + risk loadings.
    std::vector<double> base(spec.d_patch, 0.0);
    for (int j = 0; j < spec.d_patch; ++j) {
      base[j] = centroids[cluster][j];
      for (std::size_t t = 0; t < ys.size(); ++t) base[j] += class_dirs[t][ys[t]][j];
      for (int t = 0; t < spec.survival_tasks; ++t)
        base[j] += spec.risk_beta * (risks[t] - 0.5) * risk_dirs[t][j];
    }

    for (int s = 0; s < n_slides; ++s) {
      RngStream srng = crng.child("slide").child(static_cast<std::uint64_t>(s));
      const int h = spec.grid_min + static_cast<int>(srng.below(spec.grid_max - spec.grid_min + 1));
      const int w = spec.grid_min + static_cast<int>(srng.below(spec.grid_max - spec.grid_min + 1));
      auto mask = detail::blob_mask(h, w, srng);
      std::vector<PatchRecord> patches;
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) {
          if (!mask[static_cast<std::size_t>(r) * w + c]) continue;
          const double parity = (r + c) % 2 == 0 ? 1.0 : -1.0;
          std::vector<float> f(spec.d_patch);
          for (int j = 0; j < spec.d_patch; ++j) {
            double v = base[j] + spec.noise * srng.normal();
            if (spec.pattern_amp != 0.0)
              for (std::size_t t = 0; t < ys.size(); ++t)
                v += parity * pattern_dirs[t][ys[t]][j];
            f[j] = static_cast<float>(v);
          }
          patches.push_back({static_cast<std::int64_t>(c) * static_cast<std::int64_t>(spec.spacing),
                             static_cast<std::int64_t>(r) * static_cast<std::int64_t>(spec.spacing),
                             std::move(f)});
        }
      char name[32];
      std::snprintf(name, sizeof(name), "slide_%05d.mzgr", slides_made);
      out.grid_names.emplace_back(name);
      out.grids.push_back(build_grid(patches, spec.spacing, spec.magnification));
      rec.slide_files.emplace_back(name);
      ++slides_made;
    }

    RngStream lrng = crng.child("labels");
    for (std::size_t t = 0; t < ys.size(); ++t) {
      if (!lrng.bernoulli(spec.label_density)) continue;
      align::Label l;
      l.task_id = "cls" + std::to_string(t);
      l.class_index = ys[t];
      rec.labels.push_back(l);
    }
    for (int t = 0; t < spec.survival_tasks; ++t) {
      if (!lrng.bernoulli(spec.label_density)) continue;
      auto [time, event] = detail::sample_survival(risks[t], spec.base_rate, spec.risk_beta,
                                                   censor_horizon, lrng);
      align::Label l;
      l.task_id = "surv" + std::to_string(t);
      l.time = time;
      l.event = event;
      rec.labels.push_back(l);
    }
    out.cases.push_back(std::move(rec));
    ++case_index;
  }
  return out;
}

}  // namespace mz::cli
