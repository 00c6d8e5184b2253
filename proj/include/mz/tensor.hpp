#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mz/rng.hpp"

namespace mz::nn {

class ShapeError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

/// Dense row-major tensor of doubles. Rank is 1 or 2 in practice; scalars use
/// shape {1}.
struct Tensor {
  Shape shape;
  std::vector<double> v;

  Tensor() = default;
  Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), v(std::move(values)) {}

  static Tensor zeros(Shape s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(Shape s, double value) {
    Tensor t = zeros(std::move(s));
    for (auto& x : t.v) x = value;
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  static Tensor randn(Shape s, RngStream& rng, double stddev = 1.0) {
    Tensor t = zeros(std::move(s));
    for (auto& x : t.v) x = rng.normal() * stddev;
    return t;
  }

  static Tensor trunc_normal(Shape s, RngStream& rng, double stddev) {
    Tensor t = zeros(std::move(s));
    for (auto& x : t.v) x = rng.trunc_normal(stddev);
    return t;
  }

  std::size_t numel() const { return v.size(); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
  double& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols() + c]; }
  double item() const { return v.at(0); }

  bool operator==(const Tensor&) const = default;
};

namespace detail {

// C += or = A(M,K) * B(K,N)
inline void matmul_into(const double* a, const double* b, double* c, int m, int k, int n,
                        bool accumulate) {
  if (!accumulate)
    for (int i = 0; i < m * n; ++i) c[i] = 0.0;
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    double* crow = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += or = A(M,K) * B(N,K)^T
inline void matmul_nt_into(const double* a, const double* b, double* c, int m, int k, int n,
                           bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<std::size_t>(i) * k;
    for (int j = 0; j < n; ++j) {
      const double* brow = b + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      double* cp = c + static_cast<std::size_t>(i) * n + j;
      *cp = accumulate ? *cp + acc : acc;
    }
  }
}

// C += or = A(K,M)^T * B(K,N)
inline void matmul_tn_into(const double* a, const double* b, double* c, int m, int k, int n,
                           bool accumulate) {
  if (!accumulate)
    for (int i = 0; i < m * n; ++i) c[i] = 0.0;
  for (int p = 0; p < k; ++p) {
    const double* arow = a + static_cast<std::size_t>(p) * m;
    const double* brow = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244)); }

inline double gelu_derivative(double x) {
  const double phi = std::exp(-0.5 * x * x) * 0.3989422804014326779;  // N(0,1) pdf
  return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)) + x * phi;
}

inline double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double log_sigmoid_value(double x) {
  return x >= 0.0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x));
}

}  // namespace detail

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
  bool ok() const { return tape != nullptr && id >= 0; }
};

/// Records a forward computation as a sequence of primitive applications and
/// plays exact reverse-mode adjoints back through it. Nodes are created in
/// topological order by construction; backward walks ids in reverse and visits
/// each node once.
class Tape {
 public:
  // ---- leaves ----

  /// Constant leaf; never receives a gradient.
  Var input(Tensor value) { return push(std::move(value), false, {}, nullptr); }

  /// Differentiable leaf. If `name` is non-empty the gradient is retrievable
  /// by name after backward (used for model parameters). Repeated requests
  /// for the same name return the same node, so gradients from every use site
  /// accumulate into one slot.
  Var leaf(Tensor value, const std::string& name = {}) {
    if (!name.empty()) {
      auto it = named_ids_.find(name);
      if (it != named_ids_.end()) return Var{this, it->second};
    }
    Var v = push(std::move(value), true, {}, nullptr);
    if (!name.empty()) named_ids_.emplace(name, v.id);
    return v;
  }

  const Tensor& val(Var v) const { return nodes_[v.id].value; }

  std::size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    same_shape(a, b, "add");
    Tensor out = val(a);
    const Tensor& bv = val(b);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv.v[i];
    return push(std::move(out), grad_any({a, b}), {a.id, b.id},
                [ia = a.id, ib = b.id](Tape& t, const Tensor& g, int) {
                  t.accum(ia, g.v.data());
                  t.accum(ib, g.v.data());
                });
  }

  Var sub(Var a, Var b) {
    same_shape(a, b, "sub");
    Tensor out = val(a);
    const Tensor& bv = val(b);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] -= bv.v[i];
    return push(std::move(out), grad_any({a, b}), {a.id, b.id},
                [ia = a.id, ib = b.id](Tape& t, const Tensor& g, int) {
                  t.accum(ia, g.v.data());
                  t.accum_scaled(ib, g.v.data(), -1.0);
                });
  }

  Var mul(Var a, Var b) {
    same_shape(a, b, "mul");
    Tensor out = val(a);
    const Tensor& bv = val(b);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] *= bv.v[i];
    return push(std::move(out), grad_any({a, b}), {a.id, b.id},
                [ia = a.id, ib = b.id](Tape& t, const Tensor& g, int) {
                  t.accum_mul(ia, g, t.nodes_[ib].value);
                  t.accum_mul(ib, g, t.nodes_[ia].value);
                });
  }

  Var div(Var a, Var b) {
    same_shape(a, b, "div");
    Tensor out = val(a);
    const Tensor& bv = val(b);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] /= bv.v[i];
    return push(std::move(out), grad_any({a, b}), {a.id, b.id},
                [ia = a.id, ib = b.id](Tape& t, const Tensor& g, int self) {
                  const Tensor& bv2 = t.nodes_[ib].value;
                  const Tensor& ov = t.nodes_[self].value;
                  Tensor ga = g, gb = g;
                  for (std::size_t i = 0; i < g.v.size(); ++i) {
                    ga.v[i] = g.v[i] / bv2.v[i];
                    gb.v[i] = -g.v[i] * ov.v[i] / bv2.v[i];
                  }
                  t.accum(ia, ga.v.data());
                  t.accum(ib, gb.v.data());
                });
  }

  Var add_scalar(Var a, double c) {
    Tensor out = val(a);
    for (auto& x : out.v) x += c;
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id](Tape& t, const Tensor& g, int) { t.accum(ia, g.v.data()); });
  }

  Var mul_scalar(Var a, double c) {
    Tensor out = val(a);
    for (auto& x : out.v) x *= c;
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id, c](Tape& t, const Tensor& g, int) {
                  t.accum_scaled(ia, g.v.data(), c);
                });
  }

  // ---- broadcast helpers ----

  /// (N,D) + (D) row vector.
  Var add_rowvec(Var x, Var b) {
    const Tensor& xv = val(x);
    const Tensor& bv = val(b);
    if (xv.cols() != static_cast<int>(bv.numel()))
      throw ShapeError("add_rowvec: " + shape_str(xv.shape) + " vs " + shape_str(bv.shape));
    Tensor out = xv;
    const int n = xv.rows(), d = xv.cols();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) out.v[static_cast<std::size_t>(i) * d + j] += bv.v[j];
    return push(std::move(out), grad_any({x, b}), {x.id, b.id},
                [ix = x.id, ib = b.id, n, d](Tape& t, const Tensor& g, int) {
                  t.accum(ix, g.v.data());
                  Tensor gb = Tensor::zeros({d});
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) gb.v[j] += g.v[static_cast<std::size_t>(i) * d + j];
                  t.accum(ib, gb.v.data());
                });
  }

  /// (N,D) * (D) row vector, elementwise per row.
  Var mul_rowvec(Var x, Var s) {
    const Tensor& xv = val(x);
    const Tensor& sv = val(s);
    if (xv.cols() != static_cast<int>(sv.numel()))
      throw ShapeError("mul_rowvec: " + shape_str(xv.shape) + " vs " + shape_str(sv.shape));
    Tensor out = xv;
    const int n = xv.rows(), d = xv.cols();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) out.v[static_cast<std::size_t>(i) * d + j] *= sv.v[j];
    return push(std::move(out), grad_any({x, s}), {x.id, s.id},
                [ix = x.id, is = s.id, n, d](Tape& t, const Tensor& g, int) {
                  const Tensor& xv2 = t.nodes_[ix].value;
                  const Tensor& sv2 = t.nodes_[is].value;
                  Tensor gx = g;
                  Tensor gs = Tensor::zeros({d});
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) {
                      std::size_t k = static_cast<std::size_t>(i) * d + j;
                      gx.v[k] = g.v[k] * sv2.v[j];
                      gs.v[j] += g.v[k] * xv2.v[k];
                    }
                  t.accum(ix, gx.v.data());
                  t.accum(is, gs.v.data());
                });
  }

  /// (N,D) * (N) column vector, elementwise per column.
  Var mul_colvec(Var x, Var m) {
    const Tensor& xv = val(x);
    const Tensor& mv = val(m);
    if (xv.rows() != static_cast<int>(mv.numel()))
      throw ShapeError("mul_colvec: " + shape_str(xv.shape) + " vs " + shape_str(mv.shape));
    Tensor out = xv;
    const int n = xv.rows(), d = xv.cols();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) out.v[static_cast<std::size_t>(i) * d + j] *= mv.v[i];
    return push(std::move(out), grad_any({x, m}), {x.id, m.id},
                [ix = x.id, im = m.id, n, d](Tape& t, const Tensor& g, int) {
                  const Tensor& xv2 = t.nodes_[ix].value;
                  const Tensor& mv2 = t.nodes_[im].value;
                  Tensor gx = g;
                  Tensor gm = Tensor::zeros({n});
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) {
                      std::size_t k = static_cast<std::size_t>(i) * d + j;
                      gx.v[k] = g.v[k] * mv2.v[i];
                      gm.v[i] += g.v[k] * xv2.v[k];
                    }
                  t.accum(ix, gx.v.data());
                  t.accum(im, gm.v.data());
                });
  }

  /// Repeats a (1,D) row n times into (n,D).
  Var repeat_rows(Var x, int n) {
    const Tensor& xv = val(x);
    const int d = static_cast<int>(xv.numel());
    Tensor out = Tensor::zeros({n, d});
    for (int i = 0; i < n; ++i)
      std::copy(xv.v.begin(), xv.v.end(), out.v.begin() + static_cast<std::size_t>(i) * d);
    return push(std::move(out), grad_any({x}), {x.id},
                [ix = x.id, n, d](Tape& t, const Tensor& g, int) {
                  Tensor gx = Tensor::zeros({1, d});
                  for (int i = 0; i < n; ++i)
                    for (int j = 0; j < d; ++j) gx.v[j] += g.v[static_cast<std::size_t>(i) * d + j];
                  t.accum(ix, gx.v.data());
                });
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.cols() != bv.rows())
      throw ShapeError("matmul: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    const int m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor out = Tensor::zeros({m, n});
    detail::matmul_into(av.v.data(), bv.v.data(), out.v.data(), m, k, n, false);
    return push(std::move(out), grad_any({a, b}), {a.id, b.id},
                [ia = a.id, ib = b.id, m, k, n](Tape& t, const Tensor& g, int) {
                  const Tensor& av2 = t.nodes_[ia].value;
                  const Tensor& bv2 = t.nodes_[ib].value;
                  if (t.wants_grad(ia)) {
                    Tensor ga = Tensor::zeros({m, k});
                    detail::matmul_nt_into(g.v.data(), bv2.v.data(), ga.v.data(), m, n, k, false);
                    t.accum(ia, ga.v.data());
                  }
                  if (t.wants_grad(ib)) {
                    Tensor gb = Tensor::zeros({k, n});
                    detail::matmul_tn_into(av2.v.data(), g.v.data(), gb.v.data(), k, m, n, false);
                    t.accum(ib, gb.v.data());
                  }
                });
  }

  /// a (M,K) x b(N,K)^T -> (M,N)
  Var matmul_nt(Var a, Var b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.cols() != bv.cols())
      throw ShapeError("matmul_nt: " + shape_str(av.shape) + " x " + shape_str(bv.shape));
    const int m = av.rows(), k = av.cols(), n = bv.rows();
    Tensor out = Tensor::zeros({m, n});
    detail::matmul_nt_into(av.v.data(), bv.v.data(), out.v.data(), m, k, n, false);
    return push(std::move(out), grad_any({a, b}), {a.id, b.id},
                [ia = a.id, ib = b.id, m, k, n](Tape& t, const Tensor& g, int) {
                  const Tensor& av2 = t.nodes_[ia].value;
                  const Tensor& bv2 = t.nodes_[ib].value;
                  if (t.wants_grad(ia)) {
                    Tensor ga = Tensor::zeros({m, k});
                    detail::matmul_into(g.v.data(), bv2.v.data(), ga.v.data(), m, n, k, false);
                    t.accum(ia, ga.v.data());
                  }
                  if (t.wants_grad(ib)) {
                    Tensor gb = Tensor::zeros({n, k});
                    detail::matmul_tn_into(g.v.data(), av2.v.data(), gb.v.data(), n, m, k, false);
                    t.accum(ib, gb.v.data());
                  }
                });
  }

  Var transpose(Var a) {
    const Tensor& av = val(a);
    if (av.shape.size() != 2) throw ShapeError("transpose: rank must be 2");
    const int m = av.rows(), n = av.cols();
    Tensor out = Tensor::zeros({n, m});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.at(j, i) = av.at(i, j);
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id, m, n](Tape& t, const Tensor& g, int) {
                  Tensor ga = Tensor::zeros({m, n});
                  for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) ga.at(i, j) = g.at(j, i);
                  t.accum(ia, ga.v.data());
                });
  }

  Var reshape(Var a, Shape s) {
    const Tensor& av = val(a);
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    if (n != av.numel())
      throw ShapeError("reshape: " + shape_str(av.shape) + " -> " + shape_str(s));
    Tensor out(std::move(s), av.v);
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id](Tape& t, const Tensor& g, int) { t.accum(ia, g.v.data()); });
  }

  // ---- concat / slice / gather ----

  Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty");
    const int d = val(parts[0]).cols();
    int total = 0;
    bool needs = false;
    std::vector<int> ids;
    std::vector<int> row_counts;
    for (Var p : parts) {
      const Tensor& pv = val(p);
      if (pv.cols() != d) throw ShapeError("concat_rows: column mismatch");
      total += pv.rows();
      needs = needs || nodes_[p.id].needs_grad;
      ids.push_back(p.id);
      row_counts.push_back(pv.rows());
    }
    Tensor out = Tensor::zeros({total, d});
    std::size_t off = 0;
    for (Var p : parts) {
      const Tensor& pv = val(p);
      std::copy(pv.v.begin(), pv.v.end(), out.v.begin() + off);
      off += pv.v.size();
    }
    return push(std::move(out), needs, ids,
                [ids, row_counts, d](Tape& t, const Tensor& g, int) {
                  std::size_t off2 = 0;
                  for (std::size_t p = 0; p < ids.size(); ++p) {
                    const std::size_t n = static_cast<std::size_t>(row_counts[p]) * d;
                    t.accum(ids[p], g.v.data() + off2);
                    off2 += n;
                  }
                });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty");
    const int n = val(parts[0]).rows();
    int total = 0;
    bool needs = false;
    std::vector<int> ids;
    std::vector<int> col_counts;
    for (Var p : parts) {
      const Tensor& pv = val(p);
      if (pv.rows() != n) throw ShapeError("concat_cols: row mismatch");
      total += pv.cols();
      needs = needs || nodes_[p.id].needs_grad;
      ids.push_back(p.id);
      col_counts.push_back(pv.cols());
    }
    Tensor out = Tensor::zeros({n, total});
    int col0 = 0;
    for (Var p : parts) {
      const Tensor& pv = val(p);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < pv.cols(); ++j) out.at(i, col0 + j) = pv.at(i, j);
      col0 += pv.cols();
    }
    return push(std::move(out), needs, ids,
                [ids, col_counts, n, total](Tape& t, const Tensor& g, int) {
                  int c0 = 0;
                  for (std::size_t p = 0; p < ids.size(); ++p) {
                    const int pc = col_counts[p];
                    Tensor gp = Tensor::zeros({n, pc});
                    for (int i = 0; i < n; ++i)
                      for (int j = 0; j < pc; ++j)
                        gp.at(i, j) = g.v[static_cast<std::size_t>(i) * total + c0 + j];
                    t.accum(ids[p], gp.v.data());
                    c0 += pc;
                  }
                });
  }

  Var slice_rows(Var a, int r0, int r1) {
    const Tensor& av = val(a);
    if (r0 < 0 || r1 < r0 || r1 > av.rows()) throw ShapeError("slice_rows: bad range");
    const int d = av.cols(), n = av.rows();
    Tensor out = Tensor::zeros({r1 - r0, d});
    std::copy(av.v.begin() + static_cast<std::size_t>(r0) * d,
              av.v.begin() + static_cast<std::size_t>(r1) * d, out.v.begin());
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id, r0, n, d](Tape& t, const Tensor& g, int) {
                  Tensor ga = Tensor::zeros({n, d});
                  std::copy(g.v.begin(), g.v.end(), ga.v.begin() + static_cast<std::size_t>(r0) * d);
                  t.accum(ia, ga.v.data());
                });
  }

  Var slice_cols(Var a, int c0, int c1) {
    const Tensor& av = val(a);
    if (c0 < 0 || c1 < c0 || c1 > av.cols()) throw ShapeError("slice_cols: bad range");
    const int n = av.rows(), d = av.cols();
    Tensor out = Tensor::zeros({n, c1 - c0});
    for (int i = 0; i < n; ++i)
      for (int j = c0; j < c1; ++j) out.at(i, j - c0) = av.at(i, j);
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id, c0, c1, n, d](Tape& t, const Tensor& g, int) {
                  Tensor ga = Tensor::zeros({n, d});
                  for (int i = 0; i < n; ++i)
                    for (int j = c0; j < c1; ++j) ga.at(i, j) = g.at(i, j - c0);
                  t.accum(ia, ga.v.data());
                });
  }

  /// Row gather; serves as the embedding lookup (table rows selected by index).
  Var gather_rows(Var a, std::vector<int> idx) {
    const Tensor& av = val(a);
    const int d = av.cols(), n = av.rows();
    for (int i : idx)
      if (i < 0 || i >= n) throw ShapeError("gather_rows: index out of range");
    Tensor out = Tensor::zeros({static_cast<int>(idx.size()), d});
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy(av.v.begin() + static_cast<std::size_t>(idx[r]) * d,
                av.v.begin() + static_cast<std::size_t>(idx[r] + 1) * d,
                out.v.begin() + r * d);
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id, idx = std::move(idx), n, d](Tape& t, const Tensor& g, int) {
                  Tensor ga = Tensor::zeros({n, d});
                  for (std::size_t r = 0; r < idx.size(); ++r)
                    for (int j = 0; j < d; ++j)
                      ga.v[static_cast<std::size_t>(idx[r]) * d + j] += g.v[r * d + j];
                  t.accum(ia, ga.v.data());
                });
  }

  // ---- pointwise nonlinearities ----

  Var exp(Var a) {
    Tensor out = val(a);
    for (auto& x : out.v) x = std::exp(x);
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id](Tape& t, const Tensor& g, int self) {
                  t.accum_mul(ia, g, t.nodes_[self].value);
                });
  }

  Var log(Var a) {
    Tensor out = val(a);
    for (auto& x : out.v) x = std::log(x);
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id](Tape& t, const Tensor& g, int) {
                  const Tensor& av = t.nodes_[ia].value;
                  Tensor ga = g;
                  for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] = g.v[i] / av.v[i];
                  t.accum(ia, ga.v.data());
                });
  }

  Var sqrt(Var a) {
    Tensor out = val(a);
    for (auto& x : out.v) x = std::sqrt(x);
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id](Tape& t, const Tensor& g, int self) {
                  const Tensor& ov = t.nodes_[self].value;
                  Tensor ga = g;
                  for (std::size_t i = 0; i < g.v.size(); ++i) ga.v[i] = g.v[i] / (2.0 * ov.v[i]);
                  t.accum(ia, ga.v.data());
                });
  }

  /// Exact Gaussian-CDF GELU.
  Var gelu(Var a) {
    Tensor out = val(a);
    for (auto& x : out.v) x = detail::gelu_value(x);
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id](Tape& t, const Tensor& g, int) {
                  const Tensor& av = t.nodes_[ia].value;
                  Tensor ga = g;
                  for (std::size_t i = 0; i < g.v.size(); ++i)
                    ga.v[i] = g.v[i] * detail::gelu_derivative(av.v[i]);
                  t.accum(ia, ga.v.data());
                });
  }

  Var sigmoid(Var a) {
    Tensor out = val(a);
    for (auto& x : out.v) x = detail::sigmoid_value(x);
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id](Tape& t, const Tensor& g, int self) {
                  const Tensor& ov = t.nodes_[self].value;
                  Tensor ga = g;
                  for (std::size_t i = 0; i < g.v.size(); ++i)
                    ga.v[i] = g.v[i] * ov.v[i] * (1.0 - ov.v[i]);
                  t.accum(ia, ga.v.data());
                });
  }

  /// log(sigmoid(x)), numerically stable at both tails.
  Var log_sigmoid(Var a) {
    Tensor out = val(a);
    for (auto& x : out.v) x = detail::log_sigmoid_value(x);
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id](Tape& t, const Tensor& g, int) {
                  const Tensor& av = t.nodes_[ia].value;
                  Tensor ga = g;
                  for (std::size_t i = 0; i < g.v.size(); ++i)
                    ga.v[i] = g.v[i] * detail::sigmoid_value(-av.v[i]);
                  t.accum(ia, ga.v.data());
                });
  }

  // ---- softmax family (rowwise over the last dimension of a 2-D tensor) ----

  /// Softmax with max-subtraction. -inf entries come out exactly 0; a row of
  /// all -inf comes out all-zero (used for fully masked attention rows).
  Var softmax(Var a) {
    const Tensor& av = val(a);
    Tensor out = av;
    const int n = av.rows(), d = av.cols();
    for (int i = 0; i < n; ++i) {
      double m = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < d; ++j) m = std::max(m, av.at(i, j));
      if (m == -std::numeric_limits<double>::infinity()) {
        for (int j = 0; j < d; ++j) out.at(i, j) = 0.0;
        continue;
      }
      double z = 0.0;
      for (int j = 0; j < d; ++j) {
        double e = av.at(i, j) == -std::numeric_limits<double>::infinity()
                       ? 0.0
                       : std::exp(av.at(i, j) - m);
        out.at(i, j) = e;
        z += e;
      }
      for (int j = 0; j < d; ++j) out.at(i, j) /= z;
    }
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id, n, d](Tape& t, const Tensor& g, int self) {
                  const Tensor& y = t.nodes_[self].value;
                  Tensor ga = Tensor::zeros({n, d});
                  for (int i = 0; i < n; ++i) {
                    double dot = 0.0;
                    for (int j = 0; j < d; ++j) dot += g.at(i, j) * y.at(i, j);
                    for (int j = 0; j < d; ++j) ga.at(i, j) = (g.at(i, j) - dot) * y.at(i, j);
                  }
                  t.accum(ia, ga.v.data());
                });
  }

  /// softmax(x + bias): the additive-bias form used by attention. The bias
  /// carries ALiBi terms and -inf background masking.
  Var softmax_bias(Var x, Var bias) {
    same_shape(x, bias, "softmax_bias");
    return softmax(add_allow_inf(x, bias));
  }

  /// Stable rowwise log-softmax; inputs must be finite.
  Var log_softmax(Var a) {
    const Tensor& av = val(a);
    Tensor out = av;
    const int n = av.rows(), d = av.cols();
    for (int i = 0; i < n; ++i) {
      double m = av.at(i, 0);
      for (int j = 1; j < d; ++j) m = std::max(m, av.at(i, j));
      double z = 0.0;
      for (int j = 0; j < d; ++j) z += std::exp(av.at(i, j) - m);
      const double lse = m + std::log(z);
      for (int j = 0; j < d; ++j) out.at(i, j) = av.at(i, j) - lse;
    }
    return push(std::move(out), grad_any({a}), {a.id},
                [ia = a.id, n, d](Tape& t, const Tensor& g, int self) {
                  const Tensor& ls = t.nodes_[self].value;
                  Tensor ga = Tensor::zeros({n, d});
                  for (int i = 0; i < n; ++i) {
                    double gsum = 0.0;
                    for (int j = 0; j < d; ++j) gsum += g.at(i, j);
                    for (int j = 0; j < d; ++j)
                      ga.at(i, j) = g.at(i, j) - std::exp(ls.at(i, j)) * gsum;
                  }
                  t.accum(ia, ga.v.data());
                });
  }

  // ---- normalization ----

  Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-6) {
    const Tensor& xv = val(x);
    const int n = xv.rows(), d = xv.cols();
    if (static_cast<int>(val(gamma).numel()) != d || static_cast<int>(val(beta).numel()) != d)
      throw ShapeError("layer_norm: affine shape mismatch");
    Tensor out = Tensor::zeros({n, d});
    Tensor xhat = Tensor::zeros({n, d});
    std::vector<double> inv_std(n);
    const Tensor& gv = val(gamma);
    const Tensor& bv = val(beta);
    for (int i = 0; i < n; ++i) {
      double mean = 0.0;
      for (int j = 0; j < d; ++j) mean += xv.at(i, j);
      mean /= d;
      double var = 0.0;
      for (int j = 0; j < d; ++j) {
        double c = xv.at(i, j) - mean;
        var += c * c;
      }
      var /= d;
      inv_std[i] = 1.0 / std::sqrt(var + eps);
      for (int j = 0; j < d; ++j) {
        xhat.at(i, j) = (xv.at(i, j) - mean) * inv_std[i];
        out.at(i, j) = xhat.at(i, j) * gv.v[j] + bv.v[j];
      }
    }
    auto xhat_p = std::make_shared<Tensor>(std::move(xhat));
    auto inv_p = std::make_shared<std::vector<double>>(std::move(inv_std));
    return push(std::move(out), grad_any({x, gamma, beta}), {x.id, gamma.id, beta.id},
                [ix = x.id, ig = gamma.id, ib = beta.id, n, d, xhat_p, inv_p](
                    Tape& t, const Tensor& g, int) {
                  const Tensor& gv2 = t.nodes_[ig].value;
                  Tensor gx = Tensor::zeros({n, d});
                  Tensor ggamma = Tensor::zeros({d});
                  Tensor gbeta = Tensor::zeros({d});
                  for (int i = 0; i < n; ++i) {
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (int j = 0; j < d; ++j) {
                      const double dxhat = g.at(i, j) * gv2.v[j];
                      sum_dxhat += dxhat;
                      sum_dxhat_xhat += dxhat * xhat_p->at(i, j);
                      ggamma.v[j] += g.at(i, j) * xhat_p->at(i, j);
                      gbeta.v[j] += g.at(i, j);
                    }
                    for (int j = 0; j < d; ++j) {
                      const double dxhat = g.at(i, j) * gv2.v[j];
                      gx.at(i, j) = (*inv_p)[i] *
                                    (dxhat - sum_dxhat / d - xhat_p->at(i, j) * sum_dxhat_xhat / d);
                    }
                  }
                  t.accum(ix, gx.v.data());
                  t.accum(ig, ggamma.v.data());
                  t.accum(ib, gbeta.v.data());
                });
  }

  /// Rowwise L2 normalization with a zero guard: y = x / max(||x||, eps).
  Var l2_normalize(Var x, double eps = 1e-12) {
    const Tensor& xv = val(x);
    const int n = xv.rows(), d = xv.cols();
    Tensor out = Tensor::zeros({n, d});
    std::vector<double> norms(n);
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += xv.at(i, j) * xv.at(i, j);
      norms[i] = std::max(std::sqrt(s), eps);
      for (int j = 0; j < d; ++j) out.at(i, j) = xv.at(i, j) / norms[i];
    }
    auto norms_p = std::make_shared<std::vector<double>>(std::move(norms));
    return push(std::move(out), grad_any({x}), {x.id},
                [ix = x.id, n, d, eps, norms_p](Tape& t, const Tensor& g, int) {
                  const Tensor& xv2 = t.nodes_[ix].value;
                  Tensor gx = Tensor::zeros({n, d});
                  for (int i = 0; i < n; ++i) {
                    const double nn = (*norms_p)[i];
                    double raw = 0.0;
                    for (int j = 0; j < d; ++j) raw += xv2.at(i, j) * xv2.at(i, j);
                    raw = std::sqrt(raw);
                    if (raw <= eps) {
                      for (int j = 0; j < d; ++j) gx.at(i, j) = g.at(i, j) / eps;
                      continue;
                    }
                    double dot = 0.0;
                    for (int j = 0; j < d; ++j) dot += g.at(i, j) * xv2.at(i, j);
                    for (int j = 0; j < d; ++j)
                      gx.at(i, j) = g.at(i, j) / nn - xv2.at(i, j) * dot / (nn * nn * nn);
                  }
                  t.accum(ix, gx.v.data());
                });
  }

  // ---- reductions (full) ----

  Var sum(Var a) {
    const Tensor& av = val(a);
    double s = 0.0;
    for (double x : av.v) s += x;
    return push(Tensor::scalar(s), grad_any({a}), {a.id},
                [ia = a.id](Tape& t, const Tensor& g, int) {
                  const Tensor& av2 = t.nodes_[ia].value;
                  Tensor ga = Tensor::full(av2.shape, g.item());
                  t.accum(ia, ga.v.data());
                });
  }

  Var mean(Var a) {
    const Tensor& av = val(a);
    double s = 0.0;
    for (double x : av.v) s += x;
    const double inv = 1.0 / static_cast<double>(av.numel());
    return push(Tensor::scalar(s * inv), grad_any({a}), {a.id},
                [ia = a.id, inv](Tape& t, const Tensor& g, int) {
                  const Tensor& av2 = t.nodes_[ia].value;
                  Tensor ga = Tensor::full(av2.shape, g.item() * inv);
                  t.accum(ia, ga.v.data());
                });
  }

  /// Max over all elements. Subgradient routes to the first (lowest-index)
  /// maximal element.
  Var maxv(Var a) {
    const Tensor& av = val(a);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < av.numel(); ++i)
      if (av.v[i] > av.v[arg]) arg = i;
    return push(Tensor::scalar(av.v[arg]), grad_any({a}), {a.id},
                [ia = a.id, arg](Tape& t, const Tensor& g, int) {
                  const Tensor& av2 = t.nodes_[ia].value;
                  Tensor ga = Tensor::zeros(av2.shape);
                  ga.v[arg] = g.item();
                  t.accum(ia, ga.v.data());
                });
  }

  // ---- stochastic regularizers (train mode only) ----

  /// Inverted dropout: kept entries scale by 1/(1-p). Identity in eval mode.
  Var dropout(Var x, double p, RngStream& rng, bool train) {
    if (!train || p <= 0.0) return x;
    const Tensor& xv = val(x);
    auto mask = std::make_shared<std::vector<double>>(xv.numel());
    const double keep_scale = 1.0 / (1.0 - p);
    Tensor out = xv;
    for (std::size_t i = 0; i < xv.numel(); ++i) {
      (*mask)[i] = rng.bernoulli(p) ? 0.0 : keep_scale;
      out.v[i] *= (*mask)[i];
    }
    return push(std::move(out), grad_any({x}), {x.id},
                [ix = x.id, mask](Tape& t, const Tensor& g, int) {
                  Tensor gx = g;
                  for (std::size_t i = 0; i < g.v.size(); ++i) gx.v[i] *= (*mask)[i];
                  t.accum(ix, gx.v.data());
                });
  }

  /// Stochastic-depth gate for one residual branch of one sample. At train
  /// time the whole branch is dropped with probability p and scaled by
  /// 1/(1-p) when kept; identity at eval.
  Var depth_gate(Var x, double p, RngStream& rng, bool train) {
    if (!train || p <= 0.0) return x;
    const double factor = rng.bernoulli(p) ? 0.0 : 1.0 / (1.0 - p);
    return mul_scalar(x, factor);
  }

  // ---- backward ----

  /// Reverse-mode sweep from a scalar loss. After this call, gradients are
  /// available through grad()/named_grads() until the next backward().
  void backward(Var loss) {
    const Tensor& lv = val(loss);
    if (lv.numel() != 1) throw ShapeError("backward: loss must be scalar");
    grads_.assign(nodes_.size(), Tensor{});
    grads_[loss.id] = Tensor::scalar(1.0);
    for (int i = loss.id; i >= 0; --i) {
      if (!nodes_[i].needs_grad || grads_[i].v.empty() || !nodes_[i].backward) continue;
      nodes_[i].backward(*this, grads_[i], i);
    }
  }

  /// Gradient of the last backward() loss w.r.t. any node; zeros if the node
  /// is off the path.
  Tensor grad(Var v) const {
    if (v.id < static_cast<int>(grads_.size()) && !grads_[v.id].v.empty()) return grads_[v.id];
    return Tensor::zeros(nodes_[v.id].value.shape);
  }

  /// Gradients for all named leaves (zeros for leaves off the loss path).
  std::map<std::string, Tensor> named_grads() const {
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : named_ids_) out[name] = grad(Var{nullptr, id});
    return out;
  }

 private:
  struct Node {
    Tensor value;
    bool needs_grad = false;
    std::function<void(Tape&, const Tensor&, int)> backward;
  };

  Var push(Tensor value, bool needs_grad, const std::vector<int>& /*parents*/,
           std::function<void(Tape&, const Tensor&, int)> backward) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  bool grad_any(std::initializer_list<Var> vars) const {
    for (Var v : vars)
      if (nodes_[v.id].needs_grad) return true;
    return false;
  }

  bool wants_grad(int id) const { return nodes_[id].needs_grad; }

  void same_shape(Var a, Var b, const char* op) const {
    if (val(a).shape != val(b).shape)
      throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(val(a).shape) + " vs " +
                       shape_str(val(b).shape));
  }

  // add that tolerates -inf in either operand (for attention bias); gradient
  // flows as for plain add.
  Var add_allow_inf(Var a, Var b) {
    Tensor out = val(a);
    const Tensor& bv = val(b);
    for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += bv.v[i];
    return push(std::move(out), grad_any({a, b}), {a.id, b.id},
                [ia = a.id, ib = b.id](Tape& t, const Tensor& g, int) {
                  t.accum(ia, g.v.data());
                  t.accum(ib, g.v.data());
                });
  }

  void accum(int id, const double* g) {
    if (!nodes_[id].needs_grad) return;
    Tensor& slot = grads_[id];
    if (slot.v.empty()) slot = Tensor::zeros(nodes_[id].value.shape);
    for (std::size_t i = 0; i < slot.v.size(); ++i) slot.v[i] += g[i];
  }

  void accum_scaled(int id, const double* g, double scale) {
    if (!nodes_[id].needs_grad) return;
    Tensor& slot = grads_[id];
    if (slot.v.empty()) slot = Tensor::zeros(nodes_[id].value.shape);
    for (std::size_t i = 0; i < slot.v.size(); ++i) slot.v[i] += scale * g[i];
  }

  void accum_mul(int id, const Tensor& g, const Tensor& factor) {
    if (!nodes_[id].needs_grad) return;
    Tensor& slot = grads_[id];
    if (slot.v.empty()) slot = Tensor::zeros(nodes_[id].value.shape);
    for (std::size_t i = 0; i < slot.v.size(); ++i) slot.v[i] += g.v[i] * factor.v[i];
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::map<std::string, int> named_ids_;
};

/// x * W + b convenience for (N,in) x (in,out) affine layers.
inline Var affine(Tape& t, Var x, Var w, Var b) { return t.add_rowvec(t.matmul(x, w), b); }

}  // namespace mz::nn
