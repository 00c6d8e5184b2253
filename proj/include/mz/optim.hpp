#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>

#include "mz/tensor.hpp"

namespace mz::nn {

/// Named parameter collection. Map ordering keeps every iteration over the
/// parameters deterministic.
struct ParamStore {
  std::map<std::string, Tensor> values;

  Tensor& at(const std::string& name) { return values.at(name); }
  const Tensor& at(const std::string& name) const { return values.at(name); }
  bool has(const std::string& name) const { return values.count(name) != 0; }
  void set(const std::string& name, Tensor t) { values[name] = std::move(t); }
};

using GradMap = std::map<std::string, Tensor>;

/// AdamW state: first/second moments per parameter plus the shared step
/// counter and hyperparameters.
struct OptState {
  GradMap m;
  GradMap v;
  long long t = 0;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

inline double global_grad_norm(const GradMap& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads)
    for (double x : g.v) sq += x * x;
  return std::sqrt(sq);
}

/// Scales all gradients by max_norm/g when the global L2 norm g exceeds
/// max_norm; otherwise leaves them untouched.
inline void clip_global_norm(GradMap& grads, double max_norm) {
  const double norm = global_grad_norm(grads);
  if (norm <= max_norm || norm == 0.0) return;
  const double scale = max_norm / norm;
  for (auto& [name, g] : grads)
    for (double& x : g.v) x *= scale;
}

/// Bias-corrected moment update followed by the decoupled-decay step
/// param <- param - lr*(m_hat/(sqrt(v_hat)+eps) + wd*param).
/// Parameters listed in `frozen` keep their values and skip moment updates.
inline void adamw_step(ParamStore& params, const GradMap& grads, OptState& st,
                       const std::set<std::string>* frozen = nullptr) {
  st.t += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.t));
  for (auto& [name, p] : params.values) {
    if (frozen && frozen->count(name)) continue;
    auto git = grads.find(name);
    const Tensor* g = git != grads.end() ? &git->second : nullptr;
    Tensor& m = st.m.try_emplace(name, Tensor::zeros(p.shape)).first->second;
    Tensor& v = st.v.try_emplace(name, Tensor::zeros(p.shape)).first->second;
    for (std::size_t i = 0; i < p.v.size(); ++i) {
      const double gi = g ? g->v[i] : 0.0;
      m.v[i] = st.beta1 * m.v[i] + (1.0 - st.beta1) * gi;
      v.v[i] = st.beta2 * v.v[i] + (1.0 - st.beta2) * gi * gi;
      const double m_hat = m.v[i] / bc1;
      const double v_hat = v.v[i] / bc2;
      p.v[i] -= st.lr * (m_hat / (std::sqrt(v_hat) + st.eps) + st.weight_decay * p.v[i]);
    }
  }
}

/// Linear warmup from `start` to `peak` over `warmup` steps, then cosine decay
/// peak -> end over the remaining steps. Endpoints are exact.
inline double cosine_schedule(long long t, long long total, long long warmup, double start,
                              double peak, double end) {
  if (t <= 0 && warmup > 0) return start;
  if (t < warmup) return start + (peak - start) * static_cast<double>(t) / warmup;
  if (t == warmup) return peak;
  if (t >= total) return end;
  const double s = static_cast<double>(t - warmup) / static_cast<double>(total - warmup);
  return end + (peak - end) * (std::cos(3.14159265358979323846 * s) + 1.0) * 0.5;
}

/// Cosine ramp for the EMA teacher momentum: mu(t) = muT - (muT-mu0)*(cos(pi
/// t/T)+1)/2. Exact at both endpoints.
inline double momentum_at(long long t, long long total, double mu0, double muT) {
  if (t <= 0) return mu0;
  if (t >= total) return muT;
  const double c = (std::cos(3.14159265358979323846 * static_cast<double>(t) /
                             static_cast<double>(total)) +
                    1.0) *
                   0.5;
  return muT - (muT - mu0) * c;
}

/// Linear warmup (used for the teacher temperature): start -> end over
/// `warmup` units, constant afterwards. Exact at and beyond `warmup`.
inline double linear_warmup(double t, double warmup, double start, double end) {
  if (warmup <= 0.0 || t >= warmup) return end;
  if (t <= 0.0) return start;
  return start + (end - start) * t / warmup;
}

}  // namespace mz::nn
