#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "mz/encoder.hpp"
#include "mz/eval.hpp"
#include "mz/grid.hpp"
#include "mz/optim.hpp"
#include "mz/parallel.hpp"
#include "mz/ssl.hpp"
#include "mz/tensor.hpp"
#include "mz/views.hpp"

namespace mz::align {

using nn::GradMap;
using nn::ParamStore;
using nn::Tape;
using nn::Tensor;
using nn::Var;

class AlignError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class TaskKind { Classification, Survival };
enum class TaskLevel { Slide, Case };

/// One supervised task: a K-way classification or a discrete-time survival
/// endpoint. Weights and bin edges are filled from the training split during
/// setup.
struct TaskSpec {
  std::string id;
  TaskKind kind = TaskKind::Classification;
  TaskLevel level = TaskLevel::Case;
  std::vector<std::string> class_names;   // classification, K_t >= 2
  std::vector<double> class_weights;      // K_t, filled at setup
  double smoothing = 0.03;
  std::string endpoint;                   // survival: OS|DSS|DFI|PFI
  std::vector<double> cut_points;         // survival, B_t - 1 interior edges
  int bins = 0;                           // survival, B_t

  int classes() const { return static_cast<int>(class_names.size()); }
  int out_dim() const { return kind == TaskKind::Classification ? classes() : bins; }
};

struct Label {
  std::string task_id;
  int class_index = -1;  // classification
  double time = 0.0;     // survival
  int event = 0;         // survival: 1 = observed, 0 = censored
};

/// A patient case: one or more slide grids plus a sparse set of task labels.
struct CaseRecord {
  std::string id;
  std::vector<std::string> slide_files;
  std::vector<Label> labels;
};

// ---------------------------------------------------------------------------
// Losses and survival machinery
// ---------------------------------------------------------------------------

/// Inverse-frequency class weights w_k = N/(K*n_k). Every class must appear.
inline std::vector<double> class_weights(const std::vector<int>& labels, int classes) {
  std::vector<double> counts(classes, 0.0);
  for (int y : labels) {
    if (y < 0 || y >= classes) throw AlignError("class_weights: label out of range");
    counts[y] += 1.0;
  }
  std::vector<double> w(classes);
  for (int k = 0; k < classes; ++k) {
    if (counts[k] == 0.0)
      throw AlignError("class_weights: class " + std::to_string(k) + " has no samples");
    w[k] = static_cast<double>(labels.size()) / (classes * counts[k]);
  }
  return w;
}

/// Label-smoothed cross-entropy scaled by the true-class weight:
/// -w_y * sum_k t_k log softmax(logits)_k with t = (1-eps)*onehot + eps/K.
inline Var smoothed_weighted_ce(Tape& t, Var logits, int y, const std::vector<double>& weights,
                                double eps) {
  const int k = t.val(logits).cols();
  Tensor target = Tensor::full({1, k}, eps / k);
  target.v[y] += 1.0 - eps;
  Var logq = t.log_softmax(logits);
  Var ce = t.mul_scalar(t.sum(t.mul(t.input(target), logq)), -1.0);
  return t.mul_scalar(ce, weights[y]);
}

/// Adaptive bin count from the training event count E and the configured
/// (min, target, max) bounds.
inline int survival_bin_count(int events, int b_min, int b_target, int b_max) {
  if (events < b_target) return std::max(b_min, std::max(1, events));
  return std::min(b_max, b_target + (events - b_target) / (3 * b_target));
}

struct SurvivalBinning {
  int provisional = 0;          // B-hat
  int bins = 0;                 // effective B_t after merging
  std::vector<double> cut_points;  // ascending interior edges (bins - 1)
};

/// Linear-interpolation quantile (inclusive endpoints) over sorted values.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * (sorted.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const double frac = pos - lo;
  if (lo + 1 >= sorted.size()) return sorted.back();
  return sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]);
}

/// Equally spaced quantile cut-points of the training event times; coincident
/// cut-points are merged. If merging collapses below b_min bins, the range
/// midpoint splits the axis instead.
inline SurvivalBinning survival_bin_edges(std::vector<double> event_times, int provisional,
                                          int b_min = 2) {
  if (event_times.empty()) throw AlignError("survival_bin_edges: no event times");
  std::sort(event_times.begin(), event_times.end());
  SurvivalBinning out;
  out.provisional = provisional;
  for (int i = 1; i < provisional; ++i)
    out.cut_points.push_back(quantile_sorted(event_times, static_cast<double>(i) / provisional));
  out.cut_points.erase(std::unique(out.cut_points.begin(), out.cut_points.end()),
                       out.cut_points.end());
  if (static_cast<int>(out.cut_points.size()) < b_min - 1) {
    out.cut_points.clear();
    const double lo = event_times.front(), hi = event_times.back();
    for (int i = 1; i < b_min; ++i)
      out.cut_points.push_back(lo + (hi - lo) * i / b_min);
    out.cut_points.erase(std::unique(out.cut_points.begin(), out.cut_points.end()),
                         out.cut_points.end());
    if (static_cast<int>(out.cut_points.size()) < b_min - 1) {
      // Total tie: every time identical; split at the (degenerate) midpoint.
      out.cut_points.assign(1, lo);
      while (static_cast<int>(out.cut_points.size()) < b_min - 1)
        out.cut_points.push_back(out.cut_points.back() + 1.0);
    }
  }
  out.bins = static_cast<int>(out.cut_points.size()) + 1;
  return out;
}

/// 1-based bin of a time: bins are (-inf, c1], (c1, c2], ..., (c_{B-1}, inf),
/// so times beyond the last edge land in the final bin.
inline int bin_index(const SurvivalBinning& binning, double time) {
  int j = 1;
  for (double c : binning.cut_points)
    if (time > c) ++j;
  return j;
}

/// Discrete-hazard negative log-likelihood. Bin index j is 1-based. Built on
/// log-sigmoid so both tails stay finite.
inline Var survival_nll(Tape& t, Var hazard_logits, int j, int event) {
  const int b = t.val(hazard_logits).cols();
  if (j < 1 || j > b) throw AlignError("survival_nll: bin index out of range");
  Var log_one_minus_h = t.log_sigmoid(t.mul_scalar(hazard_logits, -1.0));
  Var acc = t.input(Tensor::scalar(0.0));
  const int survive_through = event ? j - 1 : j;
  if (survive_through > 0) acc = t.sum(t.slice_cols(log_one_minus_h, 0, survive_through));
  if (event) {
    Var log_h = t.log_sigmoid(hazard_logits);
    acc = t.add(acc, t.sum(t.slice_cols(log_h, j - 1, j)));
  }
  return t.mul_scalar(acc, -1.0);
}

/// Plain-arithmetic NLL, used for validation monitoring.
inline double survival_nll_value(const std::vector<double>& logits, int j, int event) {
  auto log_sig = [](double x) { return nn::detail::log_sigmoid_value(x); };
  double acc = 0.0;
  const int survive_through = event ? j - 1 : j;
  for (int k = 0; k < survive_through; ++k) acc += log_sig(-logits[k]);
  if (event) acc += log_sig(logits[j - 1]);
  return -acc;
}

/// Scalar risk r = -sum_k log(1 - sigmoid(a_k)).
inline double risk_score(const std::vector<double>& hazard_logits) {
  double r = 0.0;
  for (double a : hazard_logits) r -= nn::detail::log_sigmoid_value(-a);
  return r;
}

/// Mean over active tasks (Eq.-9 style); empty set means the batch is
/// skipped, signalled by nullopt.
inline std::optional<Var> multitask_loss(Tape& t, const std::vector<Var>& active_losses) {
  if (active_losses.empty()) return std::nullopt;
  Var acc = active_losses[0];
  for (std::size_t i = 1; i < active_losses.size(); ++i) acc = t.add(acc, active_losses[i]);
  return t.mul_scalar(acc, 1.0 / static_cast<double>(active_losses.size()));
}

// ---------------------------------------------------------------------------
// Stratified holdout
// ---------------------------------------------------------------------------

struct HoldoutSplit {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Per task, holds out ~fraction of its labeled cases with class (or event
/// indicator) proportions preserved; a case held out for any task leaves
/// training entirely. Tasks with < 2 labeled cases contribute nothing.
inline HoldoutSplit stratified_holdout(const std::vector<CaseRecord>& cases,
                                       const std::vector<TaskSpec>& tasks, double fraction,
                                       RngStream& rng) {
  if (!(fraction > 0.0 && fraction < 1.0))
    throw AlignError("stratified_holdout: fraction out of (0,1)");
  std::set<std::size_t> held;
  for (const TaskSpec& task : tasks) {
    std::map<int, std::vector<std::size_t>> strata;
    std::size_t labeled = 0;
    for (std::size_t i = 0; i < cases.size(); ++i) {
      for (const Label& l : cases[i].labels) {
        if (l.task_id != task.id) continue;
        const int stratum = task.kind == TaskKind::Classification ? l.class_index : l.event;
        strata[stratum].push_back(i);
        ++labeled;
      }
    }
    if (labeled < 2) continue;
    RngStream task_rng = rng.child(task.id);
    for (auto& [stratum, ids] : strata) {
      RngStream srng = task_rng.child(static_cast<std::uint64_t>(stratum));
      srng.shuffle(ids);
      const std::size_t n_hold =
          static_cast<std::size_t>(std::floor(fraction * ids.size() + 0.5));
      for (std::size_t i = 0; i < n_hold && i < ids.size(); ++i) held.insert(ids[i]);
    }
  }
  HoldoutSplit split;
  for (std::size_t i = 0; i < cases.size(); ++i)
    (held.count(i) ? split.validation : split.train).push_back(i);
  return split;
}

// ---------------------------------------------------------------------------
// Stage-2 trainer
// ---------------------------------------------------------------------------

struct AlignConfig {
  double base_lr = 5e-5;
  double min_lr = 2e-7;
  long long warmup_steps = 0;
  double weight_decay = 0.4;
  double clip_norm = 0.3;
  int epochs = 12;
  int micro_batch = 1;   // cases per micro-batch
  int accum_steps = 128;
  double label_smoothing = 0.03;
  int bins_min = 2;
  int bins_target = 8;
  int bins_max = 16;
  double token_dropout_max = 0.1;
  std::size_t k_max = 1024;
  double flip_h = 0.5;
  double flip_v = 0.5;
  double rot_prob = 0.5;
  double holdout_fraction = 0.05;
  enc::HeadKind head_kind = enc::HeadKind::Mlp;
  double head_dropout = 0.1;
};

/// Full-grid spatial augmentation: flips/rotations of content and validity.
/// Cell coordinates are re-derived from the lattice afterwards; flips and
/// quarter turns are isometries of the grid, so pairwise distances (all that
/// the encoder reads) match coordinates that move with their cells.
inline FeatureGrid augment_grid(const FeatureGrid& grid, double p_h, double p_v, double p_r,
                                RngStream& rng) {
  FeatureGrid g = grid;
  auto remap = [&](auto&& index_of_source, bool swap_dims) {
    FeatureGrid out = g;
    if (swap_dims) {
      out.height = g.width;
      out.width = g.height;
    }
    for (int r = 0; r < out.height; ++r)
      for (int c = 0; c < out.width; ++c) {
        const std::size_t dst = static_cast<std::size_t>(r) * out.width + c;
        const std::size_t src = index_of_source(r, c);
        out.validity[dst] = g.validity[src];
        std::copy(g.features.begin() + src * g.d_patch, g.features.begin() + (src + 1) * g.d_patch,
                  out.features.begin() + dst * g.d_patch);
      }
    g = std::move(out);
  };
  if (rng.bernoulli(p_h)) {
    const int w = g.width;
    remap([&, w](int r, int c) { return static_cast<std::size_t>(r) * w + (w - 1 - c); }, false);
  }
  if (rng.bernoulli(p_v)) {
    const int w = g.width, h = g.height;
    remap([&, w, h](int r, int c) { return static_cast<std::size_t>(h - 1 - r) * w + c; }, false);
  }
  if (rng.bernoulli(p_r)) {
    const int turns = 1 + static_cast<int>(rng.below(3));
    for (int i = 0; i < turns; ++i) {
      const int w = g.width, h = g.height;
      // Clockwise quarter turn: new (r, c) reads old (h-1-c, r).
      remap([&, w, h](int r, int c) { return static_cast<std::size_t>(h - 1 - c) * w + r; },
            true);
    }
  }
  return g;
}

/// Compacted token sequence for a full grid: valid cells only, in raster
/// order, optionally capped by stratified sampling.
inline enc::TokenSequence grid_tokens(const FeatureGrid& grid, std::size_t k_max,
                                      RngStream& rng) {
  std::vector<std::size_t> valid_cells;
  for (std::size_t k = 0; k < grid.cells(); ++k)
    if (grid.validity[k]) valid_cells.push_back(k);
  if (valid_cells.empty()) throw AlignError("grid_tokens: no valid cells");
  CapResult cap = cap_tokens(valid_cells.size(), k_max, rng);

  enc::TokenSequence seq;
  const int n = static_cast<int>(cap.ranks.size());
  seq.features = Tensor::zeros({n, grid.d_patch});
  seq.validity.assign(n, 1);
  seq.coord_x.resize(n);
  seq.coord_y.resize(n);
  seq.spacing = grid.spacing;
  for (int i = 0; i < n; ++i) {
    const std::size_t cell = valid_cells[cap.ranks[i]];
    const int r = static_cast<int>(cell / grid.width);
    const int c = static_cast<int>(cell % grid.width);
    seq.coord_x[i] = grid.cell_x(c);
    seq.coord_y[i] = grid.cell_y(r);
    for (int j = 0; j < grid.d_patch; ++j)
      seq.features.at(i, j) = grid.features[cell * grid.d_patch + j];
  }
  return seq;
}

/// A case resolved to in-memory grids.
struct ResolvedCase {
  std::string id;
  std::vector<const FeatureGrid*> grids;
  std::vector<Label> labels;
};

struct EpochReport {
  int epoch = 0;
  double train_loss = 0.0;
  double selection_score = 0.0;
  std::map<std::string, double> task_scores;  // weighted F1 or -mean NLL
};

/// Stage-2 driver: fine-tunes the Stage-1 teacher encoder end-to-end with a
/// case transformer and per-task heads under sparse multi-task supervision.
class Stage2Trainer {
 public:
  Stage2Trainer(std::vector<ResolvedCase> cases, std::vector<TaskSpec> tasks,
                const ParamStore& stage1_teacher, enc::SlideEncoderConfig enc_cfg,
                enc::CaseTransformerConfig case_cfg, AlignConfig cfg, std::uint64_t seed,
                int threads = 1)
      : cases_(std::move(cases)),
        tasks_(std::move(tasks)),
        enc_cfg_(enc_cfg),
        case_cfg_(case_cfg),
        cfg_(cfg),
        root_(seed),
        threads_(threads) {
    // Slide encoder starts from the Stage-1 teacher weights.
    for (const auto& [name, t] : stage1_teacher.values)
      if (name.rfind("slide/", 0) == 0) params_.values.emplace(name, t);
    if (params_.values.empty()) throw AlignError("stage-1 teacher has no slide/ parameters");

    RngStream init = root_.child("init");
    enc::init_case_transformer(params_, "case/", enc_cfg_.dim, case_cfg_, init);

    // Holdout before any statistics: weights and bins come from train only.
    std::vector<CaseRecord> shells(cases_.size());
    for (std::size_t i = 0; i < cases_.size(); ++i) {
      shells[i].id = cases_[i].id;
      shells[i].labels = cases_[i].labels;
    }
    RngStream hold_rng = root_.child("holdout");
    split_ = stratified_holdout(shells, tasks_, cfg_.holdout_fraction, hold_rng);

    for (TaskSpec& task : tasks_) {
      if (task.kind == TaskKind::Classification) {
        std::vector<int> ys;
        for (std::size_t i : split_.train)
          for (const Label& l : cases_[i].labels)
            if (l.task_id == task.id) ys.push_back(l.class_index);
        // Registered tasks may have no labels in this corpus; their heads
        // exist but never receive gradients.
        task.class_weights = ys.empty() ? std::vector<double>(task.classes(), 1.0)
                                        : class_weights(ys, task.classes());
        task.smoothing = cfg_.label_smoothing;
      } else {
        std::vector<double> event_times;
        for (std::size_t i : split_.train)
          for (const Label& l : cases_[i].labels)
            if (l.task_id == task.id && l.event == 1) event_times.push_back(l.time);
        const int e = static_cast<int>(event_times.size());
        const int provisional =
            survival_bin_count(e, cfg_.bins_min, cfg_.bins_target, cfg_.bins_max);
        if (event_times.empty()) {
          // No observed events in training: fall back to censoring times.
          for (std::size_t i : split_.train)
            for (const Label& l : cases_[i].labels)
              if (l.task_id == task.id) event_times.push_back(l.time);
        }
        if (event_times.empty()) {
          task.bins = cfg_.bins_min;
          task.cut_points.assign(1, 0.0);
          while (static_cast<int>(task.cut_points.size()) < cfg_.bins_min - 1)
            task.cut_points.push_back(task.cut_points.back() + 1.0);
        } else {
          auto binning = survival_bin_edges(event_times, provisional, cfg_.bins_min);
          task.cut_points = binning.cut_points;
          task.bins = binning.bins;
        }
      }
      enc::TaskHeadConfig head;
      head.kind = cfg_.head_kind;
      head.out_dim = task.out_dim();
      head.head_dropout = cfg_.head_dropout;
      enc::init_task_head(params_, "head/" + task.id + "/", enc_cfg_.dim, head, init);
    }

    opt_.lr = 0.0;
    opt_.weight_decay = cfg_.weight_decay;
    const int per_step = cfg_.micro_batch * cfg_.accum_steps;
    steps_per_epoch_ = static_cast<int>(
        (split_.train.size() + per_step - 1) / static_cast<std::size_t>(per_step));
    steps_per_epoch_ = std::max(steps_per_epoch_, 1);
    total_steps_ = static_cast<long long>(steps_per_epoch_) * cfg_.epochs;
  }

  const ParamStore& params() const { return params_; }

  /// Overwrites any parameter that `source` carries (used to resume from a
  /// full Stage-2 checkpoint rather than a Stage-1 teacher).
  void load_params(const ParamStore& source) {
    for (auto& [name, t] : params_.values)
      if (source.has(name)) t = source.at(name);
  }

  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  const HoldoutSplit& split() const { return split_; }
  long long total_steps() const { return total_steps_; }
  int steps_per_epoch() const { return steps_per_epoch_; }
  const ParamStore& best_params() const {
    return best_params_.values.empty() ? params_ : best_params_;
  }

  /// One optimizer step (accum_steps micro-batches of micro_batch cases).
  double step() {
    const int epoch = static_cast<int>(step_ / steps_per_epoch_);
    ensure_epoch_order(epoch);
    const std::size_t per_step = static_cast<std::size_t>(cfg_.micro_batch) * cfg_.accum_steps;
    const std::size_t base = static_cast<std::size_t>(step_ % steps_per_epoch_) * per_step;
    std::vector<std::size_t> ids;
    for (std::size_t i = base; i < std::min(order_.size(), base + per_step); ++i)
      ids.push_back(order_[i]);

    struct CaseResult {
      GradMap grads;
      double loss = 0.0;
      bool skipped = true;
    };
    std::vector<CaseResult> results = parallel_map<CaseResult>(
        ids.size(), threads_, [&](std::size_t i) {
          CaseResult res;
          auto [loss, grads, active] = case_backward(cases_[ids[i]], case_counter_ + i);
          if (active == 0) return res;
          res.skipped = false;
          res.loss = loss;
          res.grads = std::move(grads);
          return res;
        });

    GradMap grads;
    double loss_sum = 0.0;
    std::size_t contributing = 0;
    for (std::size_t g = 0; g < ids.size(); g += cfg_.micro_batch) {
      const std::size_t hi = std::min(ids.size(), g + cfg_.micro_batch);
      std::size_t in_group = 0;
      for (std::size_t i = g; i < hi; ++i) in_group += results[i].skipped ? 0 : 1;
      if (in_group == 0) continue;
      ++contributing;
      const double inv = 1.0 / static_cast<double>(in_group);
      for (std::size_t i = g; i < hi; ++i) {
        if (results[i].skipped) continue;
        loss_sum += results[i].loss;
        for (auto& [name, g2] : results[i].grads) {
          auto it = grads.try_emplace(name, Tensor::zeros(g2.shape)).first;
          for (std::size_t x = 0; x < g2.v.size(); ++x) it->second.v[x] += inv * g2.v[x];
        }
      }
    }
    case_counter_ += static_cast<long long>(ids.size());
    if (contributing == 0) {
      step_ += 1;
      return 0.0;
    }
    for (auto& [name, g] : grads)
      for (auto& x : g.v) x /= static_cast<double>(contributing);

    const double mean_loss = loss_sum / static_cast<double>(ids.size());
    if (!std::isfinite(mean_loss))
      throw ssl::TrainError("non-finite stage-2 loss at step " + std::to_string(step_) +
                                " (case " + cases_[ids.front()].id + ")",
                            step_);

    nn::clip_global_norm(grads, cfg_.clip_norm);
    opt_.lr = nn::cosine_schedule(step_, total_steps_, cfg_.warmup_steps, 0.0, cfg_.base_lr,
                                  cfg_.min_lr);
    opt_.weight_decay = cfg_.weight_decay;
    nn::adamw_step(params_, grads, opt_);
    step_ += 1;
    return mean_loss;
  }

  /// Runs a full epoch and evaluates the holdout; keeps the best snapshot by
  /// mean task score (weighted F1 for classification, -mean NLL for
  /// survival).
  EpochReport run_epoch() {
    EpochReport report;
    report.epoch = static_cast<int>(step_ / steps_per_epoch_);
    double loss = 0.0;
    for (int s = 0; s < steps_per_epoch_; ++s) loss += step();
    report.train_loss = loss / steps_per_epoch_;
    report.task_scores = validate();
    double score = 0.0;
    for (const auto& [task, v] : report.task_scores) score += v;
    report.selection_score =
        report.task_scores.empty() ? 0.0 : score / report.task_scores.size();
    if (report.selection_score > best_score_ || best_params_.values.empty()) {
      best_score_ = report.selection_score;
      best_params_ = params_;
    }
    return report;
  }

  /// Case embedding in eval mode (no augmentation, no dropout); token capping
  /// still applies when a grid exceeds the budget, under a fixed stream.
  Tensor embed_case(const ResolvedCase& c) const {
    Tape t;
    RngStream quiet = root_.child("embed").child(c.id);
    enc::ParamCtx pe{&t, &params_, "slide/", false};
    enc::ParamCtx pc{&t, &params_, "case/", false};
    Var h = case_embedding(t, pe, pc, c, false, quiet);
    return t.val(h);
  }

  /// Per-task holdout scores: weighted F1 (classification), -mean NLL
  /// (survival).
  std::map<std::string, double> validate() const {
    std::map<std::string, double> scores;
    if (split_.validation.empty()) return scores;
    std::vector<Tensor> embeddings = parallel_map<Tensor>(
        split_.validation.size(), threads_, [&](std::size_t i) {
          Tape t;
          RngStream quiet = root_.child("val").child(cases_[split_.validation[i]].id);
          enc::ParamCtx pe{&t, &params_, "slide/", false};
          enc::ParamCtx pc{&t, &params_, "case/", false};
          return t.val(case_embedding(t, pe, pc, cases_[split_.validation[i]], false, quiet));
        });
    for (const TaskSpec& task : tasks_) {
      std::vector<int> y_true, y_pred;
      std::vector<std::vector<double>> y_scores;
      double nll = 0.0;
      int n_surv = 0;
      for (std::size_t vi = 0; vi < split_.validation.size(); ++vi) {
        const auto& c = cases_[split_.validation[vi]];
        for (const Label& l : c.labels) {
          if (l.task_id != task.id) continue;
          Tape t;
          RngStream quiet(0);
          enc::ParamCtx ph{&t, &params_, "head/" + task.id + "/", false};
          enc::TaskHeadConfig head;
          head.kind = cfg_.head_kind;
          head.out_dim = task.out_dim();
          head.head_dropout = cfg_.head_dropout;
          Var logits =
              enc::task_head_forward(t, ph, head, t.input(embeddings[vi]), false, quiet);
          const Tensor& lv = t.val(logits);
          if (task.kind == TaskKind::Classification) {
            int best = 0;
            for (int j = 1; j < lv.cols(); ++j)
              if (lv.v[j] > lv.v[best]) best = j;
            y_true.push_back(l.class_index);
            y_pred.push_back(best);
          } else {
            SurvivalBinning binning;
            binning.bins = task.bins;
            binning.cut_points = task.cut_points;
            nll += survival_nll_value(lv.v, bin_index(binning, l.time), l.event);
            ++n_surv;
          }
        }
      }
      if (task.kind == TaskKind::Classification && !y_true.empty())
        scores[task.id] = eval::compute_metrics(y_true, y_pred, {}).weighted_f1;
      else if (task.kind == TaskKind::Survival && n_surv > 0)
        scores[task.id] = -nll / n_surv;
    }
    return scores;
  }

 private:
  Var case_embedding(Tape& t, const enc::ParamCtx& pe, const enc::ParamCtx& pc,
                     const ResolvedCase& c, bool train, RngStream& rng) const {
    std::vector<Var> slide_cls;
    for (std::size_t s = 0; s < c.grids.size(); ++s) {
      RngStream srng = rng.child("slide").child(s);
      FeatureGrid g = train
                            ? token_dropout(augment_grid(*c.grids[s], cfg_.flip_h, cfg_.flip_v,
                                                         cfg_.rot_prob, srng),
                                            cfg_.token_dropout_max, srng)
                            : *c.grids[s];
      auto seq = grid_tokens(g, cfg_.k_max, srng);
      auto encoded = enc::encode_slide(t, pe, enc_cfg_, seq, train, srng);
      slide_cls.push_back(encoded.cls);
    }
    Var slides = slide_cls.size() == 1 ? slide_cls[0] : t.concat_rows(slide_cls);
    return enc::aggregate_case(t, pc, case_cfg_, slides, train, rng);
  }

  std::tuple<double, GradMap, int> case_backward(const ResolvedCase& c, long long seq) {
    Tape t;
    RngStream rng = root_.child("case").child(static_cast<std::uint64_t>(seq));
    enc::ParamCtx pe{&t, &params_, "slide/", true};
    enc::ParamCtx pc{&t, &params_, "case/", true};
    Var h = case_embedding(t, pe, pc, c, true, rng);

    std::vector<Var> active;
    for (const TaskSpec& task : tasks_) {
      for (const Label& l : c.labels) {
        if (l.task_id != task.id) continue;
        enc::ParamCtx ph{&t, &params_, "head/" + task.id + "/", true};
        enc::TaskHeadConfig head;
        head.kind = cfg_.head_kind;
        head.out_dim = task.out_dim();
        head.head_dropout = cfg_.head_dropout;
        RngStream hrng = rng.child("head").child(task.id);
        Var logits = enc::task_head_forward(t, ph, head, h, true, hrng);
        if (task.kind == TaskKind::Classification) {
          // Weight-normalized reduction: at micro-batch granularity each case
          // contributes w_y*ce / w_y.
          Var weighted =
              smoothed_weighted_ce(t, logits, l.class_index, task.class_weights, task.smoothing);
          active.push_back(t.mul_scalar(weighted, 1.0 / task.class_weights[l.class_index]));
        } else {
          SurvivalBinning binning;
          binning.bins = task.bins;
          binning.cut_points = task.cut_points;
          active.push_back(survival_nll(t, logits, bin_index(binning, l.time), l.event));
        }
      }
    }
    auto loss = multitask_loss(t, active);
    if (!loss) return {0.0, {}, 0};
    t.backward(*loss);
    return {t.val(*loss).item(), t.named_grads(), static_cast<int>(active.size())};
  }

  void ensure_epoch_order(int epoch) {
    if (epoch == shuffled_epoch_) return;
    order_ = split_.train;
    RngStream shuffle_rng = root_.child("epoch").child(static_cast<std::uint64_t>(epoch));
    shuffle_rng.shuffle(order_);
    shuffled_epoch_ = epoch;
  }

  std::vector<ResolvedCase> cases_;
  std::vector<TaskSpec> tasks_;
  enc::SlideEncoderConfig enc_cfg_;
  enc::CaseTransformerConfig case_cfg_;
  AlignConfig cfg_;
  RngStream root_;
  int threads_;
  ParamStore params_;
  ParamStore best_params_;
  double best_score_ = -std::numeric_limits<double>::infinity();
  nn::OptState opt_;
  HoldoutSplit split_;
  std::vector<std::size_t> order_;
  int shuffled_epoch_ = -1;
  long long step_ = 0;
  long long case_counter_ = 0;
  int steps_per_epoch_ = 1;
  long long total_steps_ = 1;
};

}  // namespace mz::align
