// Central finite-difference oracle for reverse-mode gradients. Rebuilds the
// forward pass from scratch at each perturbed point, so it stays independent
// of the tape's adjoint rules.
#pragma once

#include <functional>
#include <vector>

#include "mz/tensor.hpp"

namespace fd {

using BuildFn =
    std::function<mz::nn::Var(mz::nn::Tape&, std::vector<mz::nn::Var>&)>;

struct Result {
  double max_rel_err = 0.0;
  double worst_ad = 0.0;
  double worst_fd = 0.0;
};

// Scalarizes an arbitrary-shaped output as sum(out * W) with a fixed random
// weight so every output element contributes to the gradient.
inline Result check(std::vector<mz::nn::Tensor> inputs, const BuildFn& build,
                    std::uint64_t weight_seed = 99, double step = 1e-5) {
  using namespace mz::nn;

  auto eval = [&](const std::vector<Tensor>& points, Tensor* weight_out,
                  std::vector<Tensor>* grads_out) {
    Tape t;
    std::vector<Var> vars;
    vars.reserve(points.size());
    for (const auto& p : points) vars.push_back(t.leaf(p));
    Var out = build(t, vars);
    mz::RngStream wrng(weight_seed);
    Tensor w = Tensor::randn(t.val(out).shape, wrng);
    if (weight_out) *weight_out = w;
    Var loss = t.sum(t.mul(out, t.input(w)));
    if (grads_out) {
      t.backward(loss);
      grads_out->clear();
      for (Var v : vars) grads_out->push_back(t.grad(v));
    }
    return t.val(loss).item();
  };

  std::vector<Tensor> ad_grads;
  eval(inputs, nullptr, &ad_grads);

  Result res;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].numel(); ++j) {
      std::vector<Tensor> plus = inputs, minus = inputs;
      plus[i].v[j] += step;
      minus[i].v[j] -= step;
      const double f_plus = eval(plus, nullptr, nullptr);
      const double f_minus = eval(minus, nullptr, nullptr);
      const double fd_grad = (f_plus - f_minus) / (2.0 * step);
      const double ad = ad_grads[i].v[j];
      const double rel = std::fabs(ad - fd_grad) / std::max(1.0, std::fabs(fd_grad));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst_ad = ad;
        res.worst_fd = fd_grad;
      }
    }
  }
  return res;
}

inline mz::nn::Tensor rand_tensor(mz::nn::Shape shape, std::uint64_t seed, double scale = 1.0,
                                  double offset = 0.0) {
  mz::RngStream rng(seed);
  mz::nn::Tensor t = mz::nn::Tensor::randn(std::move(shape), rng, scale);
  for (auto& x : t.v) x += offset;
  return t;
}

}  // namespace fd
