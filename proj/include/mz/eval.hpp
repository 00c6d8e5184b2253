#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mz/encoder.hpp"
#include "mz/optim.hpp"
#include "mz/parallel.hpp"
#include "mz/rng.hpp"
#include "mz/tensor.hpp"

namespace mz::eval {

using nn::Tape;
using nn::Tensor;
using nn::Var;

class EvalError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct MetricEntry {
  double weighted_f1 = 0.0;
  double weighted_auc = 0.0;
  double balanced_accuracy = 0.0;
  std::vector<std::string> warnings;
};

/// Weighted F1 (support-weighted per-class F1), weighted one-vs-rest ROC-AUC
/// (ties count 0.5 per pair) and balanced accuracy (macro recall). Classes
/// absent from the true labels are excluded from the weighting with a
/// warning.
inline MetricEntry compute_metrics(const std::vector<int>& y_true, const std::vector<int>& y_pred,
                                   const std::vector<std::vector<double>>& scores) {
  if (y_true.size() != y_pred.size() || (!scores.empty() && scores.size() != y_true.size()))
    throw EvalError("compute_metrics: length mismatch");
  const std::size_t n = y_true.size();
  int k = 0;
  for (std::size_t i = 0; i < n; ++i) k = std::max({k, y_true[i] + 1, y_pred[i] + 1});
  if (!scores.empty()) k = std::max(k, static_cast<int>(scores[0].size()));

  std::vector<double> tp(k, 0), fp(k, 0), fn(k, 0), support(k, 0);
  for (std::size_t i = 0; i < n; ++i) {
    support[y_true[i]] += 1;
    if (y_true[i] == y_pred[i]) {
      tp[y_true[i]] += 1;
    } else {
      fp[y_pred[i]] += 1;
      fn[y_true[i]] += 1;
    }
  }

  MetricEntry out;
  double f1_weighted = 0.0, recall_sum = 0.0, total_support = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c) {
    if (support[c] == 0) {
      out.warnings.push_back("class " + std::to_string(c) + " absent from true labels");
      continue;
    }
    const double precision = tp[c] + fp[c] > 0 ? tp[c] / (tp[c] + fp[c]) : 0.0;
    const double recall = tp[c] / (tp[c] + fn[c]);
    const double f1 =
        precision + recall > 0 ? 2.0 * precision * recall / (precision + recall) : 0.0;
    f1_weighted += support[c] * f1;
    recall_sum += recall;
    total_support += support[c];
    ++present;
  }
  out.weighted_f1 = total_support > 0 ? f1_weighted / total_support : 0.0;
  out.balanced_accuracy = present > 0 ? recall_sum / present : 0.0;

  if (!scores.empty()) {
    double auc_weighted = 0.0, auc_support = 0.0;
    for (int c = 0; c < k; ++c) {
      if (support[c] == 0 || support[c] == static_cast<double>(n)) {
        if (support[c] == static_cast<double>(n))
          out.warnings.push_back("class " + std::to_string(c) + " has no negatives for AUC");
        continue;
      }
      // One-vs-rest pair counting; tied scores contribute 0.5.
      double wins = 0.0;
      std::size_t pairs = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (y_true[i] != c) continue;
        for (std::size_t j = 0; j < n; ++j) {
          if (y_true[j] == c) continue;
          const double si = scores[i][c], sj = scores[j][c];
          wins += si > sj ? 1.0 : (si == sj ? 0.5 : 0.0);
          ++pairs;
        }
      }
      auc_weighted += support[c] * (wins / pairs);
      auc_support += support[c];
    }
    out.weighted_auc = auc_support > 0 ? auc_weighted / auc_support : 0.0;
  }
  return out;
}

struct MetricReport {
  std::vector<MetricEntry> folds;
  std::vector<std::string> warnings;
  bool converged = true;

  double mean_f1() const { return mean([](const MetricEntry& e) { return e.weighted_f1; }); }
  double std_f1() const { return stddev([](const MetricEntry& e) { return e.weighted_f1; }); }
  double mean_auc() const { return mean([](const MetricEntry& e) { return e.weighted_auc; }); }
  double std_auc() const { return stddev([](const MetricEntry& e) { return e.weighted_auc; }); }
  double mean_bal() const {
    return mean([](const MetricEntry& e) { return e.balanced_accuracy; });
  }
  double std_bal() const {
    return stddev([](const MetricEntry& e) { return e.balanced_accuracy; });
  }

 private:
  template <typename F>
  double mean(F f) const {
    if (folds.empty()) return 0.0;
    double s = 0.0;
    for (const auto& e : folds) s += f(e);
    return s / folds.size();
  }
  template <typename F>
  double stddev(F f) const {
    if (folds.size() < 2) return 0.0;
    const double m = mean(f);
    double s = 0.0;
    for (const auto& e : folds) s += (f(e) - m) * (f(e) - m);
    return std::sqrt(s / folds.size());
  }
};

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

struct FoldItem {
  std::string case_id;
  std::string patient_id;
  int label = 0;
};

struct Fold {
  std::vector<std::size_t> train;  // indices into the item list
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

struct FoldPlan {
  std::vector<Fold> folds;
  std::vector<std::string> warnings;
};

/// Label-stratified k-fold plan grouped by patient: every item of a patient
/// lands in the same fold role, and within each fold the non-test patients
/// are split 80/20 into train/validation per class.
inline FoldPlan make_folds(const std::vector<FoldItem>& items, int k, RngStream& rng) {
  if (k < 2) throw EvalError("make_folds: k must be >= 2");
  std::map<std::string, std::vector<std::size_t>> by_patient;
  std::map<std::string, int> patient_label;
  for (std::size_t i = 0; i < items.size(); ++i) {
    by_patient[items[i].patient_id].push_back(i);
    patient_label.emplace(items[i].patient_id, items[i].label);
  }
  if (by_patient.size() < static_cast<std::size_t>(k))
    throw EvalError("make_folds: fewer labeled patients than folds");

  FoldPlan plan;
  plan.folds.resize(k);

  std::map<int, std::vector<std::string>> by_class;
  for (const auto& [pid, label] : patient_label) by_class[label].push_back(pid);

  std::map<std::string, int> fold_of;
  int next_fold = 0;
  for (auto& [label, patients] : by_class) {
    if (patients.size() < static_cast<std::size_t>(k))
      plan.warnings.push_back("class " + std::to_string(label) + " has fewer patients (" +
                              std::to_string(patients.size()) + ") than folds; best effort");
    RngStream sub = rng.child("class").child(static_cast<std::uint64_t>(label));
    sub.shuffle(patients);
    // Deal cyclically, continuing the cursor across classes to balance fold
    // sizes overall.
    for (const auto& pid : patients) {
      fold_of[pid] = next_fold;
      next_fold = (next_fold + 1) % k;
    }
  }

  for (int f = 0; f < k; ++f) {
    // Test = patients of fold f; remaining patients split 80/20 per class.
    std::map<int, std::vector<std::string>> rest_by_class;
    for (const auto& [pid, fold] : fold_of) {
      if (fold == f) {
        for (std::size_t i : by_patient[pid]) plan.folds[f].test.push_back(i);
      } else {
        rest_by_class[patient_label[pid]].push_back(pid);
      }
    }
    for (auto& [label, patients] : rest_by_class) {
      RngStream sub =
          rng.child("val").child(static_cast<std::uint64_t>(f)).child(
              static_cast<std::uint64_t>(label));
      sub.shuffle(patients);
      std::size_t n_val = static_cast<std::size_t>(std::floor(0.2 * patients.size() + 0.5));
      if (patients.size() >= 2 && n_val == 0) n_val = 1;
      for (std::size_t i = 0; i < patients.size(); ++i) {
        auto& dst = i < n_val ? plan.folds[f].validation : plan.folds[f].train;
        for (std::size_t j : by_patient[patients[i]]) dst.push_back(j);
      }
    }
    std::sort(plan.folds[f].train.begin(), plan.folds[f].train.end());
    std::sort(plan.folds[f].validation.begin(), plan.folds[f].validation.end());
    std::sort(plan.folds[f].test.begin(), plan.folds[f].test.end());
  }
  return plan;
}

// ---------------------------------------------------------------------------
// MLP probe
// ---------------------------------------------------------------------------

struct MlpProbeConfig {
  int epochs = 200;
  int batch = 64;
  double lr = 1e-3;
  double weight_decay = 1e-2;
  double dropout = 0.25;
  int threads = 1;
};

/// Adaptive hidden sizes: h1 = max(4, round(0.66 D)), h2 = max(2, round(0.5
/// h1)), with round-half-up.
inline std::pair<int, int> mlp_hidden_sizes(int dim) {
  const int h1 = std::max(4, static_cast<int>(std::floor(0.66 * dim + 0.5)));
  const int h2 = std::max(2, static_cast<int>(std::floor(0.5 * h1 + 0.5)));
  return {h1, h2};
}

namespace detail {

struct MlpHead {
  nn::ParamStore params;
  int dim = 0, h1 = 0, h2 = 0, classes = 0;

  static MlpHead init(int dim, int classes, RngStream& rng) {
    MlpHead m;
    m.dim = dim;
    m.classes = classes;
    std::tie(m.h1, m.h2) = mlp_hidden_sizes(dim);
    enc::detail::init_layer_norm(m.params, "ln", dim);
    enc::detail::init_affine(m.params, "l1", dim, m.h1, rng, 1.0 / std::sqrt(dim));
    enc::detail::init_affine(m.params, "l2", m.h1, m.h2, rng, 1.0 / std::sqrt(m.h1));
    enc::detail::init_affine(m.params, "out", m.h2, classes, rng, 1.0 / std::sqrt(m.h2));
    return m;
  }

  Var forward(Tape& t, Var x, bool train, double dropout, RngStream& rng) const {
    enc::ParamCtx p{&t, &params, "", train};
    Var h = t.layer_norm(x, p("ln.g"), p("ln.b"));
    h = t.dropout(t.gelu(nn::affine(t, h, p("l1.w"), p("l1.b"))), dropout, rng, train);
    h = t.dropout(t.gelu(nn::affine(t, h, p("l2.w"), p("l2.b"))), dropout, rng, train);
    return nn::affine(t, h, p("out.w"), p("out.b"));
  }
};

inline Tensor rows_to_tensor(const std::vector<std::vector<double>>& rows,
                             const std::vector<std::size_t>& ids) {
  const int d = static_cast<int>(rows[0].size());
  Tensor t = Tensor::zeros({static_cast<int>(ids.size()), d});
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (int j = 0; j < d; ++j) t.at(static_cast<int>(i), j) = rows[ids[i]][j];
  return t;
}

inline std::vector<std::vector<double>> softmax_rows(const Tensor& logits) {
  std::vector<std::vector<double>> out(logits.rows());
  for (int i = 0; i < logits.rows(); ++i) {
    double m = logits.at(i, 0);
    for (int j = 1; j < logits.cols(); ++j) m = std::max(m, logits.at(i, j));
    double z = 0.0;
    out[i].resize(logits.cols());
    for (int j = 0; j < logits.cols(); ++j) {
      out[i][j] = std::exp(logits.at(i, j) - m);
      z += out[i][j];
    }
    for (auto& v : out[i]) v /= z;
  }
  return out;
}

inline std::vector<int> argmax_rows(const Tensor& logits) {
  std::vector<int> out(logits.rows());
  for (int i = 0; i < logits.rows(); ++i) {
    int best = 0;
    for (int j = 1; j < logits.cols(); ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    out[i] = best;
  }
  return out;
}

}  // namespace detail

/// Frozen-feature MLP probe: per fold, trains the three-layer head with
/// class-balanced sampling, selects the epoch with the best validation
/// weighted F1 and reports test metrics. Features are read-only throughout.
inline MetricReport mlp_probe(const std::vector<std::vector<double>>& features,
                              const std::vector<int>& labels, const FoldPlan& plan,
                              const MlpProbeConfig& cfg, RngStream& rng) {
  if (features.size() != labels.size()) throw EvalError("mlp_probe: length mismatch");
  const int dim = static_cast<int>(features[0].size());
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;

  std::vector<MetricEntry> fold_entries = parallel_map<MetricEntry>(
      plan.folds.size(), cfg.threads, [&](std::size_t f) {
        const Fold& fold = plan.folds[f];
        RngStream fold_rng = rng.child("fold").child(f);
        auto head = detail::MlpHead::init(dim, classes, fold_rng);
        nn::OptState opt;
        opt.lr = cfg.lr;
        opt.weight_decay = cfg.weight_decay;

        // Inverse-frequency sampling with replacement, epoch length N.
        std::map<int, std::vector<std::size_t>> by_class;
        for (std::size_t i : fold.train) by_class[labels[i]].push_back(i);
        std::vector<int> class_list;
        for (const auto& [c, ids] : by_class) class_list.push_back(c);

        auto eval_split = [&](const std::vector<std::size_t>& ids) {
          Tape t;
          Tensor x = detail::rows_to_tensor(features, ids);
          RngStream quiet(0);
          Var logits = head.forward(t, t.input(x), false, 0.0, quiet);
          std::vector<int> y_true;
          for (std::size_t i : ids) y_true.push_back(labels[i]);
          const Tensor& lv = t.val(logits);
          return compute_metrics(y_true, detail::argmax_rows(lv), detail::softmax_rows(lv));
        };

        double best_f1 = -1.0;
        nn::ParamStore best_params = head.params;
        for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
          RngStream erng = fold_rng.child("epoch").child(static_cast<std::uint64_t>(epoch));
          const std::size_t epoch_len = fold.train.size();
          std::vector<std::size_t> order(epoch_len);
          for (auto& id : order) {
            const int c = class_list[erng.below(class_list.size())];
            const auto& members = by_class[c];
            id = members[erng.below(members.size())];
          }
          for (std::size_t base = 0; base < epoch_len; base += cfg.batch) {
            const std::size_t hi = std::min(epoch_len, base + cfg.batch);
            std::vector<std::size_t> ids(order.begin() + base, order.begin() + hi);
            Tape t;
            RngStream drng = erng.child("batch").child(base);
            Tensor x = detail::rows_to_tensor(features, ids);
            Var logits = head.forward(t, t.input(x), true, cfg.dropout, drng);
            Var logq = t.log_softmax(logits);
            Tensor onehot = Tensor::zeros({static_cast<int>(ids.size()), classes});
            for (std::size_t i = 0; i < ids.size(); ++i)
              onehot.at(static_cast<int>(i), labels[ids[i]]) = 1.0;
            Var loss = t.mul_scalar(t.sum(t.mul(t.input(onehot), logq)),
                                    -1.0 / static_cast<double>(ids.size()));
            t.backward(loss);
            auto grads = t.named_grads();
            nn::adamw_step(head.params, grads, opt);
          }
          const double val_f1 =
              fold.validation.empty() ? 0.0 : eval_split(fold.validation).weighted_f1;
          if (val_f1 > best_f1) {
            best_f1 = val_f1;
            best_params = head.params;
          }
        }
        head.params = best_params;
        return eval_split(fold.test);
      });

  MetricReport report;
  report.folds = std::move(fold_entries);
  report.warnings = plan.warnings;
  return report;
}

// ---------------------------------------------------------------------------
// Linear probe
// ---------------------------------------------------------------------------

struct LinearProbeConfig {
  int grid_points = 45;
  double strength_min = 1e-6;
  double strength_max = 1e5;
  int max_iterations = 500;
  double gradient_tolerance = 1e-6;
  int threads = 1;
};

inline std::vector<double> log_spaced(int n, double lo, double hi) {
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i)
    out[i] = std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * i / (n - 1));
  return out;
}

namespace detail {

/// Multinomial logistic objective with class-balanced sample weights and an
/// L2 penalty on every coefficient (including intercepts): the objective is
/// then strictly convex with a unique minimizer.
struct LogisticProblem {
  const std::vector<std::vector<double>>* x;
  const std::vector<int>* y;
  std::vector<std::size_t> ids;
  std::vector<double> sample_weight;  // per id
  int dim = 0, classes = 0;
  double lambda = 0.0;

  std::size_t n_params() const {
    return static_cast<std::size_t>(classes) * (dim + 1);
  }

  double value_and_grad(const std::vector<double>& w, std::vector<double>* grad) const {
    if (grad) grad->assign(w.size(), 0.0);
    double weight_sum = 0.0;
    for (double sw : sample_weight) weight_sum += sw;
    double loss = 0.0;
    std::vector<double> logits(classes);
    for (std::size_t s = 0; s < ids.size(); ++s) {
      const auto& xi = (*x)[ids[s]];
      const int yi = (*y)[ids[s]];
      const double sw = sample_weight[s] / weight_sum;
      for (int c = 0; c < classes; ++c) {
        double z = w[static_cast<std::size_t>(c) * (dim + 1) + dim];  // intercept
        for (int j = 0; j < dim; ++j) z += w[static_cast<std::size_t>(c) * (dim + 1) + j] * xi[j];
        logits[c] = z;
      }
      double m = logits[0];
      for (int c = 1; c < classes; ++c) m = std::max(m, logits[c]);
      double zsum = 0.0;
      for (int c = 0; c < classes; ++c) zsum += std::exp(logits[c] - m);
      const double lse = m + std::log(zsum);
      loss += sw * (lse - logits[yi]);
      if (grad) {
        for (int c = 0; c < classes; ++c) {
          const double p = std::exp(logits[c] - lse);
          const double coef = sw * (p - (c == yi ? 1.0 : 0.0));
          double* gr = grad->data() + static_cast<std::size_t>(c) * (dim + 1);
          for (int j = 0; j < dim; ++j) gr[j] += coef * xi[j];
          gr[dim] += coef;
        }
      }
    }
    for (std::size_t i = 0; i < w.size(); ++i) {
      loss += 0.5 * lambda * w[i] * w[i];
      if (grad) (*grad)[i] += lambda * w[i];
    }
    return loss;
  }
};

/// LBFGS with Armijo backtracking; returns whether the gradient tolerance was
/// reached within the iteration budget.
inline bool lbfgs_minimize(const LogisticProblem& prob, std::vector<double>& w, int max_iter,
                           double tol) {
  const std::size_t n = w.size();
  std::vector<std::vector<double>> s_hist, y_hist;
  std::vector<double> rho_hist;
  std::vector<double> grad(n), new_grad(n);
  double f = prob.value_and_grad(w, &grad);
  const int memory = 10;
  for (int iter = 0; iter < max_iter; ++iter) {
    double gnorm = 0.0;
    for (double g : grad) gnorm += g * g;
    if (std::sqrt(gnorm) <= tol) return true;

    // Two-loop recursion.
    std::vector<double> q = grad;
    std::vector<double> alpha(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += s_hist[i][j] * q[j];
      alpha[i] = rho_hist[i] * dot;
      for (std::size_t j = 0; j < n; ++j) q[j] -= alpha[i] * y_hist[i][j];
    }
    double h0 = 1.0;
    if (!s_hist.empty()) {
      double sy = 0.0, yy = 0.0;
      const auto& s_last = s_hist.back();
      const auto& y_last = y_hist.back();
      for (std::size_t j = 0; j < n; ++j) {
        sy += s_last[j] * y_last[j];
        yy += y_last[j] * y_last[j];
      }
      if (yy > 0) h0 = sy / yy;
    }
    for (auto& v : q) v *= h0;
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y_hist[i][j] * q[j];
      const double beta = rho_hist[i] * dot;
      for (std::size_t j = 0; j < n; ++j) q[j] += s_hist[i][j] * (alpha[i] - beta);
    }

    // Descent direction is -q; Armijo backtracking.
    double dir_dot_grad = 0.0;
    for (std::size_t j = 0; j < n; ++j) dir_dot_grad += -q[j] * grad[j];
    if (dir_dot_grad >= 0.0) {  // fall back to steepest descent
      for (std::size_t j = 0; j < n; ++j) q[j] = grad[j];
      dir_dot_grad = 0.0;
      for (std::size_t j = 0; j < n; ++j) dir_dot_grad += -q[j] * grad[j];
    }
    double step = 1.0;
    std::vector<double> w_new(n);
    double f_new = f;
    for (int ls = 0; ls < 40; ++ls) {
      for (std::size_t j = 0; j < n; ++j) w_new[j] = w[j] - step * q[j];
      f_new = prob.value_and_grad(w_new, &new_grad);
      if (f_new <= f + 1e-4 * step * dir_dot_grad) break;
      step *= 0.5;
    }

    std::vector<double> s_vec(n), y_vec(n);
    double sy = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      s_vec[j] = w_new[j] - w[j];
      y_vec[j] = new_grad[j] - grad[j];
      sy += s_vec[j] * y_vec[j];
    }
    w = w_new;
    f = f_new;
    grad = new_grad;
    if (sy > 1e-12) {
      s_hist.push_back(std::move(s_vec));
      y_hist.push_back(std::move(y_vec));
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > memory) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
    }
  }
  double gnorm = 0.0;
  for (double g : grad) gnorm += g * g;
  return std::sqrt(gnorm) <= tol;
}

}  // namespace detail

struct LinearFit {
  std::vector<double> coefficients;  // classes x (dim+1), intercept last
  double strength = 0.0;
  bool converged = true;
  int dim = 0, classes = 0;

  std::vector<double> logits(const std::vector<double>& x) const {
    std::vector<double> out(classes);
    for (int c = 0; c < classes; ++c) {
      double z = coefficients[static_cast<std::size_t>(c) * (dim + 1) + dim];
      for (int j = 0; j < dim; ++j)
        z += coefficients[static_cast<std::size_t>(c) * (dim + 1) + j] * x[j];
      out[c] = z;
    }
    return out;
  }
};

/// Fits one multinomial logistic model at a fixed penalty strength.
inline LinearFit fit_logistic(const std::vector<std::vector<double>>& features,
                              const std::vector<int>& labels,
                              const std::vector<std::size_t>& train_ids, int classes,
                              double lambda, int max_iter, double tol) {
  detail::LogisticProblem prob;
  prob.x = &features;
  prob.y = &labels;
  prob.ids = train_ids;
  prob.dim = static_cast<int>(features[0].size());
  prob.classes = classes;
  prob.lambda = lambda;
  std::map<int, int> counts;
  for (std::size_t i : train_ids) counts[labels[i]] += 1;
  prob.sample_weight.resize(train_ids.size());
  for (std::size_t s = 0; s < train_ids.size(); ++s) {
    const int c = labels[train_ids[s]];
    prob.sample_weight[s] =
        static_cast<double>(train_ids.size()) / (counts.size() * counts[c]);
  }
  LinearFit fit;
  fit.dim = prob.dim;
  fit.classes = classes;
  fit.strength = lambda;
  fit.coefficients.assign(prob.n_params(), 0.0);
  fit.converged = detail::lbfgs_minimize(prob, fit.coefficients, max_iter, tol);
  return fit;
}

/// L2-penalized multinomial logistic probe: the strength is selected by
/// minimum validation loss over a log-spaced grid; non-convergence is
/// reported, not fatal.
inline MetricReport linear_probe(const std::vector<std::vector<double>>& features,
                                 const std::vector<int>& labels, const FoldPlan& plan,
                                 const LinearProbeConfig& cfg = {}) {
  if (features.size() != labels.size()) throw EvalError("linear_probe: length mismatch");
  const int classes = *std::max_element(labels.begin(), labels.end()) + 1;
  const auto strengths = log_spaced(cfg.grid_points, cfg.strength_min, cfg.strength_max);

  MetricReport report;
  std::vector<std::pair<MetricEntry, bool>> entries =
      parallel_map<std::pair<MetricEntry, bool>>(plan.folds.size(), cfg.threads, [&](
                                                     std::size_t f) {
        const Fold& fold = plan.folds[f];
        bool fold_converged = true;
        double best_val = std::numeric_limits<double>::infinity();
        LinearFit best_fit;
        for (double lambda : strengths) {
          LinearFit fit = fit_logistic(features, labels, fold.train, classes, lambda,
                                       cfg.max_iterations, cfg.gradient_tolerance);
          if (!fit.converged) fold_converged = false;
          // Validation loss: class-balanced cross-entropy, unpenalized.
          std::map<int, int> vcounts;
          for (std::size_t i : fold.validation) vcounts[labels[i]] += 1;
          double loss = 0.0, wsum = 0.0;
          for (std::size_t i : fold.validation) {
            auto z = fit.logits(features[i]);
            double m = z[0];
            for (double v : z) m = std::max(m, v);
            double zs = 0.0;
            for (double v : z) zs += std::exp(v - m);
            const double w =
                static_cast<double>(fold.validation.size()) /
                (vcounts.size() * vcounts[labels[i]]);
            loss += w * (m + std::log(zs) - z[labels[i]]);
            wsum += w;
          }
          loss = wsum > 0 ? loss / wsum : 0.0;
          if (loss < best_val) {
            best_val = loss;
            best_fit = fit;
          }
        }
        std::vector<int> y_true, y_pred;
        std::vector<std::vector<double>> scores;
        for (std::size_t i : fold.test) {
          auto z = best_fit.logits(features[i]);
          double m = z[0];
          for (double v : z) m = std::max(m, v);
          double zs = 0.0;
          for (double v : z) zs += std::exp(v - m);
          std::vector<double> p(classes);
          for (int c = 0; c < classes; ++c) p[c] = std::exp(z[c] - m) / zs;
          y_true.push_back(labels[i]);
          y_pred.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
          scores.push_back(std::move(p));
        }
        return std::pair{compute_metrics(y_true, y_pred, scores), fold_converged};
      });
  report.converged = true;
  for (auto& [entry, conv] : entries) {
    report.folds.push_back(std::move(entry));
    report.converged = report.converged && conv;
  }
  report.warnings = plan.warnings;
  return report;
}

}  // namespace mz::eval
