#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mz/checkpoint.hpp"
#include "mz/encoder.hpp"
#include "mz/grid.hpp"
#include "mz/optim.hpp"
#include "mz/parallel.hpp"
#include "mz/tensor.hpp"
#include "mz/views.hpp"

namespace mz::ssl {

using nn::GradMap;
using nn::ParamStore;
using nn::Tape;
using nn::Tensor;
using nn::Var;

class TrainError : public std::runtime_error {
 public:
  TrainError(const std::string& what, long long batch_id)
      : std::runtime_error(what), batch_id_(batch_id) {}
  long long batch_id() const { return batch_id_; }

 private:
  long long batch_id_ = -1;
};

/// Stage-1 hyperparameters. Defaults mirror the full-scale recipe tables.
struct SSLConfig {
  double student_temp = 0.1;
  double teacher_temp_start = 0.04;
  double teacher_temp_end = 0.07;
  double teacher_patch_temp_start = 0.04;
  double teacher_patch_temp_end = 0.07;
  double temp_warmup_epochs = 30.0;
  double mu0 = 0.996;
  double muT = 1.0;
  double center_momentum = 0.9;
  bool centering = true;
  bool separate_patch_center = true;
  int freeze_proto_epochs = 3;
  double base_lr = 5e-4;
  double min_lr = 2e-6;
  double warmup_epochs = 5.0;
  double wd_start = 0.04;
  double wd_end = 0.4;
  double clip_norm = 0.3;
  int ref_batch = 256;
  int epochs = 200;
  int micro_batch = 64;
  int accum_steps = 2;
  int global_crops = 2;   // G
  int local_crops = 4;    // L
  int global_size = 20;   // S_g
  int local_size = 12;    // S_l
  double min_valid_ratio = 0.25;
  int max_attempts = 3;
  double mask_prob = 0.5;
  double mask_ratio_min = 0.1;
  double mask_ratio_max = 0.5;
  int min_block = 4;
  double aspect_min = 0.3;
  double flip_h = 0.5;
  double flip_v = 0.5;
  double rot_prob = 0.5;
};

/// EMA teacher: parameter mirror plus running centers for the CLS and patch
/// logit streams. Teacher parameters never receive gradients; they only move
/// through ema_update.
struct TeacherState {
  ParamStore params;
  Tensor cls_center;
  Tensor patch_center;
};

/// xi <- mu*xi + (1-mu)*theta, elementwise over matching names.
inline void ema_update(ParamStore& teacher, const ParamStore& student, double mu) {
  for (auto& [name, t] : teacher.values) {
    const Tensor& s = student.at(name);
    for (std::size_t i = 0; i < t.v.size(); ++i) t.v[i] = mu * t.v[i] + (1.0 - mu) * s.v[i];
  }
}

/// c' = lambda*c + (1-lambda)*rowmean(batch_logits).
inline Tensor center_update(const Tensor& center, const Tensor& batch_logits, double lambda) {
  const int n = batch_logits.rows(), k = batch_logits.cols();
  Tensor out = center;
  for (int j = 0; j < k; ++j) {
    double mean = 0.0;
    for (int i = 0; i < n; ++i) mean += batch_logits.at(i, j);
    mean /= n;
    out.v[j] = lambda * center.v[j] + (1.0 - lambda) * mean;
  }
  return out;
}

/// softmax((logits - center)/temp) per row, plain arithmetic (teacher side).
inline Tensor centered_softmax(const Tensor& logits, const Tensor& center, double temp) {
  const int n = logits.rows(), k = logits.cols();
  Tensor out = Tensor::zeros({n, k});
  for (int i = 0; i < n; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < k; ++j) m = std::max(m, (logits.at(i, j) - center.v[j]) / temp);
    double z = 0.0;
    for (int j = 0; j < k; ++j) {
      out.at(i, j) = std::exp((logits.at(i, j) - center.v[j]) / temp - m);
      z += out.at(i, j);
    }
    for (int j = 0; j < k; ++j) out.at(i, j) /= z;
  }
  return out;
}

inline double mean_row_entropy(const Tensor& probs) {
  double total = 0.0;
  for (int i = 0; i < probs.rows(); ++i) {
    double h = 0.0;
    for (int j = 0; j < probs.cols(); ++j) {
      const double p = probs.at(i, j);
      if (p > 0.0) h -= p * std::log(p);
    }
    total += h;
  }
  return probs.rows() > 0 ? total / probs.rows() : 0.0;
}

/// CLS distillation: teacher soft targets from global views against student
/// predictions from every other view, normalized by G*(G+L-1). Teacher
/// distributions arrive as plain tensors so no gradient can reach them.
inline Var loss_cls(Tape& t, const std::vector<Tensor>& teacher_probs,
                    const std::vector<Var>& student_cls_logits, double student_temp) {
  const int n_teacher = static_cast<int>(teacher_probs.size());
  const int n_views = static_cast<int>(student_cls_logits.size());
  std::vector<Var> log_q(n_views);
  for (int i = 0; i < n_views; ++i)
    log_q[i] = t.log_softmax(t.mul_scalar(student_cls_logits[i], 1.0 / student_temp));
  std::optional<Var> acc;
  for (int j = 0; j < n_teacher; ++j) {
    Var p = t.input(teacher_probs[j]);
    for (int i = 0; i < n_views; ++i) {
      if (i == j) continue;
      Var term = t.sum(t.mul(p, log_q[i]));
      acc = acc ? t.add(*acc, term) : term;
    }
  }
  const double denom = static_cast<double>(n_teacher) * (n_views - 1);
  return t.mul_scalar(*acc, -1.0 / denom);
}

/// Masked-patch prediction at the positions in M (rows of both operands),
/// averaged by |M|. Empty M contributes exactly zero with no gradient.
inline Var loss_mim(Tape& t, const Tensor& teacher_probs, std::optional<Var> student_patch_logits,
                    double student_temp) {
  const int m = teacher_probs.rows();
  if (m == 0 || !student_patch_logits) return t.input(Tensor::scalar(0.0));
  Var log_q = t.log_softmax(t.mul_scalar(*student_patch_logits, 1.0 / student_temp));
  return t.mul_scalar(t.sum(t.mul(t.input(teacher_probs), log_q)), -1.0 / m);
}

struct StepMetrics {
  long long step = 0;
  double loss_cls = 0.0;
  double loss_mim = 0.0;
  double lr = 0.0;
  double wd = 0.0;
  double mu = 0.0;
  double teacher_entropy = 0.0;
};

inline std::string metrics_line(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld, %.10g, %.10g, %.10g, %.10g, %.10g, %.10g", m.step,
                m.loss_cls, m.loss_mim, m.lr, m.wd, m.mu, m.teacher_entropy);
  return std::string(buf);
}

/// Stage-1 training driver over an in-memory corpus of feature grids.
class Trainer {
 public:
  Trainer(const std::vector<FeatureGrid>* corpus, SSLConfig cfg, enc::SlideEncoderConfig enc_cfg,
          enc::ProjectionConfig proj_cfg, std::uint64_t seed, int threads = 1)
      : corpus_(corpus),
        cfg_(cfg),
        enc_cfg_(enc_cfg),
        proj_cfg_(proj_cfg),
        root_(seed),
        threads_(threads) {
    enc_cfg_.validate();
    RngStream init = root_.child("init");
    enc::init_slide_encoder(student_, "slide/", enc_cfg_, init);
    enc::init_projection_head(student_, "proj/", enc_cfg_.dim, proj_cfg_, init);
    teacher_.params = student_;  // teacher starts as a copy of the student
    teacher_.cls_center = Tensor::zeros({proj_cfg_.prototypes});
    teacher_.patch_center = Tensor::zeros({proj_cfg_.prototypes});
    opt_.lr = 0.0;
    opt_.weight_decay = 0.0;
    const int per_step = cfg_.micro_batch * cfg_.accum_steps;
    steps_per_epoch_ =
        static_cast<int>((corpus_->size() + per_step - 1) / static_cast<std::size_t>(per_step));
    total_steps_ = static_cast<long long>(steps_per_epoch_) * cfg_.epochs;
  }

  long long total_steps() const { return total_steps_; }
  int steps_per_epoch() const { return steps_per_epoch_; }
  long long step_index() const { return step_; }
  const ParamStore& student() const { return student_; }
  const TeacherState& teacher() const { return teacher_; }
  const nn::OptState& opt_state() const { return opt_; }
  const enc::SlideEncoderConfig& encoder_config() const { return enc_cfg_; }

  /// Runs one optimizer step. Throws TrainError on a non-finite loss.
  StepMetrics step() {
    const double epoch_f = static_cast<double>(step_) / steps_per_epoch_;
    const int epoch_i = static_cast<int>(step_ / steps_per_epoch_);
    const double tau_t =
        nn::linear_warmup(epoch_f, cfg_.temp_warmup_epochs, cfg_.teacher_temp_start,
                          cfg_.teacher_temp_end);
    const double tau_tp =
        nn::linear_warmup(epoch_f, cfg_.temp_warmup_epochs, cfg_.teacher_patch_temp_start,
                          cfg_.teacher_patch_temp_end);

    const std::vector<std::size_t> slide_ids = step_slides(epoch_i);
    const std::size_t n_slides = slide_ids.size();

    // 1. Views for every slide in the step batch.
    std::vector<SlideViews> views(n_slides);
    for (std::size_t s = 0; s < n_slides; ++s)
      views[s] = make_views((*corpus_)[slide_ids[s]], slide_counter_ + s);

    // 2. Batch-level mask selection: each global crop independently selected
    // with probability mask_prob; a shuffled linspace of ratios over the
    // selected subset.
    RngStream mask_rng = root_.child("mask").child(static_cast<std::uint64_t>(step_));
    std::vector<std::pair<std::size_t, std::size_t>> selected;  // (slide, view)
    for (std::size_t s = 0; s < n_slides; ++s)
      for (std::size_t g = 0; g < views[s].globals.size(); ++g)
        if (mask_rng.bernoulli(cfg_.mask_prob)) selected.emplace_back(s, g);
    if (!selected.empty()) {
      auto ratios = assign_mask_ratios(static_cast<int>(selected.size()), cfg_.mask_ratio_min,
                                       cfg_.mask_ratio_max, mask_rng);
      for (std::size_t i = 0; i < selected.size(); ++i) {
        auto [s, g] = selected[i];
        RngStream block_rng = mask_rng.child(i);
        const Crop& crop = views[s].globals[g];
        views[s].masks[g] = build_block_mask(crop.validity, crop.size, ratios[i], cfg_.aspect_min,
                                             1.0 / cfg_.aspect_min, cfg_.min_block, block_rng);
      }
    }

    // 3. Teacher forward on unmasked globals (plain tensors, frozen params).
    struct TeacherOut {
      std::vector<Tensor> cls_logits;                // per global view, 1xK
      std::vector<Tensor> patch_logits;              // per global view, N_valid x K
      std::vector<std::vector<int>> valid_positions; // flat crop cells, per view
    };
    std::vector<TeacherOut> teacher_out = parallel_map<TeacherOut>(
        n_slides, threads_, [&](std::size_t s) {
          TeacherOut out;
          for (const Crop& crop : views[s].globals) {
            Tape t;
            RngStream quiet(0);
            enc::ParamCtx p{&t, &teacher_.params, "slide/", false};
            enc::ParamCtx pj{&t, &teacher_.params, "proj/", false};
            auto seq = to_tokens(crop, nullptr);
            auto encoded = enc::encode_slide(t, p, enc_cfg_, seq, false, quiet);
            out.cls_logits.push_back(t.val(enc::project_prototypes(t, pj, encoded.cls)));
            std::vector<int> valid;
            for (std::size_t k = 0; k < crop.validity.size(); ++k)
              if (crop.validity[k]) valid.push_back(static_cast<int>(k));
            Var patch_rows = t.gather_rows(encoded.patches, valid);
            out.patch_logits.push_back(t.val(enc::project_prototypes(t, pj, patch_rows)));
            out.valid_positions.push_back(std::move(valid));
          }
          return out;
        });

    // 4. Center update from this batch's teacher logits, before the loss.
    Tensor cls_rows = collect_rows(teacher_out, /*cls=*/true);
    Tensor patch_rows = collect_rows(teacher_out, /*cls=*/false);
    if (cfg_.centering) {
      teacher_.cls_center = center_update(teacher_.cls_center, cls_rows, cfg_.center_momentum);
      if (cfg_.separate_patch_center)
        teacher_.patch_center =
            center_update(teacher_.patch_center, patch_rows, cfg_.center_momentum);
    }
    const Tensor& patch_center_used =
        cfg_.separate_patch_center ? teacher_.patch_center : teacher_.cls_center;

    const Tensor teacher_cls_probs_all = centered_softmax(cls_rows, teacher_.cls_center, tau_t);
    const double entropy = mean_row_entropy(teacher_cls_probs_all);

    // 5. Student forward/backward per slide; gradients joined in slide order.
    std::vector<SlideResult> results = parallel_map<SlideResult>(
        n_slides, threads_, [&](std::size_t s) {
          return slide_backward(views[s], teacher_out[s], tau_t, tau_tp, patch_center_used,
                                slide_counter_ + s);
        });

    // Effective-batch accumulation: mean over micro-batches of per-micro means.
    GradMap grads;
    double sum_cls = 0.0, sum_mim = 0.0;
    std::size_t n_groups = 0;
    for (std::size_t base = 0; base < n_slides; base += cfg_.micro_batch, ++n_groups) {
      const std::size_t hi = std::min(n_slides, base + cfg_.micro_batch);
      const double inv = 1.0 / static_cast<double>(hi - base);
      for (std::size_t s = base; s < hi; ++s) {
        for (auto& [name, g] : results[s].grads) {
          auto it = grads.try_emplace(name, Tensor::zeros(g.shape)).first;
          for (std::size_t i = 0; i < g.v.size(); ++i) it->second.v[i] += inv * g.v[i];
        }
        sum_cls += results[s].loss_cls;
        sum_mim += results[s].loss_mim;
      }
    }
    for (auto& [name, g] : grads)
      for (auto& x : g.v) x /= static_cast<double>(n_groups);

    const double step_loss_cls = sum_cls / n_slides;
    const double step_loss_mim = sum_mim / n_slides;
    if (!std::isfinite(step_loss_cls) || !std::isfinite(step_loss_mim))
      throw TrainError("non-finite loss at step " + std::to_string(step_), step_);

    nn::clip_global_norm(grads, cfg_.clip_norm);

    const double eff_batch = static_cast<double>(cfg_.micro_batch) * cfg_.accum_steps;
    const double peak_lr = cfg_.base_lr * eff_batch / cfg_.ref_batch;
    const long long warmup_steps =
        static_cast<long long>(cfg_.warmup_epochs * steps_per_epoch_);
    opt_.lr = nn::cosine_schedule(step_, total_steps_, warmup_steps, 0.0, peak_lr, cfg_.min_lr);
    opt_.weight_decay =
        nn::cosine_schedule(step_, total_steps_, 0, cfg_.wd_start, cfg_.wd_start, cfg_.wd_end);

    std::set<std::string> frozen;
    const bool proto_frozen = epoch_i < cfg_.freeze_proto_epochs;
    if (proto_frozen) frozen.insert("proj/proto");
    nn::adamw_step(student_, grads, opt_, frozen.empty() ? nullptr : &frozen);
    if (!proto_frozen) enc::renormalize_prototypes(student_, "proj/proto");

    const double mu = nn::momentum_at(step_, total_steps_, cfg_.mu0, cfg_.muT);
    ema_update(teacher_.params, student_, mu);
    if (!proto_frozen) enc::renormalize_prototypes(teacher_.params, "proj/proto");

    StepMetrics m;
    m.step = step_;
    m.loss_cls = step_loss_cls;
    m.loss_mim = step_loss_mim;
    m.lr = opt_.lr;
    m.wd = opt_.weight_decay;
    m.mu = mu;
    m.teacher_entropy = entropy;
    step_ += 1;
    slide_counter_ += static_cast<long long>(n_slides);
    return m;
  }

 private:
  struct SlideViews {
    std::vector<Crop> globals;
    std::vector<Crop> locals;
    std::vector<BlockMask> masks;  // parallel to globals; empty = unmasked
  };

  struct SlideResult {
    GradMap grads;
    double loss_cls = 0.0;
    double loss_mim = 0.0;
  };

  std::vector<std::size_t> step_slides(int epoch) {
    if (epoch != shuffled_epoch_) {
      order_.resize(corpus_->size());
      for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
      RngStream shuffle_rng = root_.child("epoch").child(static_cast<std::uint64_t>(epoch));
      shuffle_rng.shuffle(order_);
      shuffled_epoch_ = epoch;
    }
    const std::size_t per_step = static_cast<std::size_t>(cfg_.micro_batch) * cfg_.accum_steps;
    const std::size_t in_epoch = static_cast<std::size_t>(step_ % steps_per_epoch_) * per_step;
    std::vector<std::size_t> ids;
    for (std::size_t i = in_epoch; i < std::min(order_.size(), in_epoch + per_step); ++i)
      ids.push_back(order_[i]);
    return ids;
  }

  SlideViews make_views(const FeatureGrid& grid, long long slide_seq) {
    RngStream rng = root_.child("views").child(static_cast<std::uint64_t>(slide_seq));
    SlideViews v;
    for (int g = 0; g < cfg_.global_crops; ++g) {
      RngStream sub = rng.child("global").child(static_cast<std::uint64_t>(g));
      Crop crop = sample_crop(grid, cfg_.global_size, CropKind::Global, cfg_.min_valid_ratio, sub,
                              cfg_.max_attempts);
      v.globals.push_back(
          apply_spatial_augment(std::move(crop), cfg_.flip_h, cfg_.flip_v, cfg_.rot_prob, sub));
    }
    for (int l = 0; l < cfg_.local_crops; ++l) {
      RngStream sub = rng.child("local").child(static_cast<std::uint64_t>(l));
      Crop crop = sample_crop(grid, cfg_.local_size, CropKind::Local, cfg_.min_valid_ratio, sub,
                              cfg_.max_attempts);
      v.locals.push_back(
          apply_spatial_augment(std::move(crop), cfg_.flip_h, cfg_.flip_v, cfg_.rot_prob, sub));
    }
    v.masks.resize(v.globals.size());
    return v;
  }

  static enc::TokenSequence to_tokens(const Crop& crop, const BlockMask* mask) {
    enc::TokenSequence seq;
    const int n = static_cast<int>(crop.cells());
    seq.features = Tensor::zeros({n, crop.d_patch});
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < crop.d_patch; ++j)
        seq.features.at(i, j) = crop.features[static_cast<std::size_t>(i) * crop.d_patch + j];
    seq.validity = crop.validity;
    if (mask && !mask->mask.empty()) seq.masked = mask->mask;
    seq.coord_x = crop.coord_x;
    seq.coord_y = crop.coord_y;
    seq.spacing = crop.spacing;
    return seq;
  }

  template <typename TeacherOut>
  static Tensor collect_rows(const std::vector<TeacherOut>& outs, bool cls) {
    std::vector<const Tensor*> blocks;
    int k = 0, total = 0;
    for (const auto& o : outs) {
      const auto& list = cls ? o.cls_logits : o.patch_logits;
      for (const auto& t : list) {
        blocks.push_back(&t);
        total += t.rows();
        k = t.cols();
      }
    }
    Tensor rows = Tensor::zeros({total, k});
    int at = 0;
    for (const Tensor* b : blocks) {
      std::copy(b->v.begin(), b->v.end(), rows.v.begin() + static_cast<std::size_t>(at) * k);
      at += b->rows();
    }
    return rows;
  }

  template <typename TeacherOut>
  SlideResult slide_backward(const SlideViews& views, const TeacherOut& teacher, double tau_t,
                             double tau_tp, const Tensor& patch_center, long long slide_seq) {
    SlideResult res;
    Tape t;
    RngStream fwd_rng = root_.child("fwd").child(static_cast<std::uint64_t>(slide_seq));
    enc::ParamCtx p{&t, &student_, "slide/", true};
    enc::ParamCtx pj{&t, &student_, "proj/", true};

    std::vector<Var> student_cls;
    std::vector<std::optional<Var>> student_masked_logits(views.globals.size());
    std::vector<Tensor> teacher_masked_probs(views.globals.size(),
                                             Tensor::zeros({0, proj_cfg_.prototypes}));

    for (std::size_t g = 0; g < views.globals.size(); ++g) {
      RngStream view_rng = fwd_rng.child("g").child(g);
      const BlockMask* mask = views.masks[g].mask.empty() ? nullptr : &views.masks[g];
      auto seq = to_tokens(views.globals[g], mask);
      auto encoded = enc::encode_slide(t, p, enc_cfg_, seq, true, view_rng);
      student_cls.push_back(enc::project_prototypes(t, pj, encoded.cls));
      if (!mask) continue;

      // Positions masked on the student side, expressed both as crop cells
      // (student gather) and as teacher valid-row indices.
      std::vector<int> masked_cells;
      for (std::size_t k = 0; k < mask->mask.size(); ++k)
        if (mask->mask[k]) masked_cells.push_back(static_cast<int>(k));
      if (masked_cells.empty()) continue;
      Var rows = t.gather_rows(encoded.patches, masked_cells);
      student_masked_logits[g] = enc::project_prototypes(t, pj, rows);

      const auto& valid = teacher.valid_positions[g];
      std::vector<int> teacher_rows;
      teacher_rows.reserve(masked_cells.size());
      for (int cell : masked_cells) {
        const auto it = std::lower_bound(valid.begin(), valid.end(), cell);
        teacher_rows.push_back(static_cast<int>(it - valid.begin()));
      }
      Tensor probs_all = centered_softmax(teacher.patch_logits[g], patch_center, tau_tp);
      Tensor sel = Tensor::zeros({static_cast<int>(teacher_rows.size()), probs_all.cols()});
      for (std::size_t r = 0; r < teacher_rows.size(); ++r)
        for (int j = 0; j < probs_all.cols(); ++j) sel.at(static_cast<int>(r), j) =
            probs_all.at(teacher_rows[r], j);
      teacher_masked_probs[g] = std::move(sel);
    }

    for (std::size_t l = 0; l < views.locals.size(); ++l) {
      RngStream view_rng = fwd_rng.child("l").child(l);
      auto seq = to_tokens(views.locals[l], nullptr);
      auto encoded = enc::encode_slide(t, p, enc_cfg_, seq, true, view_rng);
      student_cls.push_back(enc::project_prototypes(t, pj, encoded.cls));
    }

    std::vector<Tensor> teacher_probs;
    for (const Tensor& logits : teacher.cls_logits)
      teacher_probs.push_back(centered_softmax(logits, teacher_.cls_center, tau_t));

    Var l_cls = loss_cls(t, teacher_probs, student_cls, cfg_.student_temp);

    // Slide-level M: masked positions pooled across this slide's global views.
    int m_total = 0;
    for (const auto& probs : teacher_masked_probs) m_total += probs.rows();
    Var l_mim = t.input(Tensor::scalar(0.0));
    if (m_total > 0) {
      std::optional<Var> acc;
      for (std::size_t g = 0; g < views.globals.size(); ++g) {
        if (teacher_masked_probs[g].rows() == 0) continue;
        Var log_q =
            t.log_softmax(t.mul_scalar(*student_masked_logits[g], 1.0 / cfg_.student_temp));
        Var term = t.sum(t.mul(t.input(teacher_masked_probs[g]), log_q));
        acc = acc ? t.add(*acc, term) : term;
      }
      l_mim = t.mul_scalar(*acc, -1.0 / m_total);
    }

    Var total = t.add(l_cls, l_mim);
    t.backward(total);
    res.grads = t.named_grads();
    res.loss_cls = t.val(l_cls).item();
    res.loss_mim = t.val(l_mim).item();
    return res;
  }

  const std::vector<FeatureGrid>* corpus_;
  SSLConfig cfg_;
  enc::SlideEncoderConfig enc_cfg_;
  enc::ProjectionConfig proj_cfg_;
  RngStream root_;
  int threads_;
  ParamStore student_;
  TeacherState teacher_;
  nn::OptState opt_;
  long long step_ = 0;
  long long slide_counter_ = 0;
  int steps_per_epoch_ = 1;
  long long total_steps_ = 1;
  std::vector<std::size_t> order_;
  int shuffled_epoch_ = -1;
};

}  // namespace mz::ssl
