// Acceptance suite: runs every primary criterion at its stated tolerance and
// prints one pass/fail line per criterion. Exit status is the number of
// failures.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fd_check.hpp"
#include "mz/align.hpp"
#include "mz/cli.hpp"
#include "mz/diagnostics.hpp"
#include "mz/eval.hpp"
#include "mz/ssl.hpp"
#include "mz/synth.hpp"

using mz::RngStream;
using mz::nn::ParamStore;
using mz::nn::Tape;
using mz::nn::Tensor;
using mz::nn::Var;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Check {
  std::string claim;
  double rel_err;
  bool ok;
};

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

Outcome gradient_suite() {
  std::vector<Check> checks;
  auto primitive = [&](const char* name, std::vector<Tensor> inputs, const fd::BuildFn& build) {
    auto res = fd::check(std::move(inputs), build);
    checks.push_back({name, res.max_rel_err, res.max_rel_err < 1e-6});
  };

  auto a34 = fd::rand_tensor({3, 4}, 1);
  auto b34 = fd::rand_tensor({3, 4}, 2, 1.0, 2.5);
  auto row = fd::rand_tensor({4}, 3);
  auto col = fd::rand_tensor({3}, 4);
  auto one_row = fd::rand_tensor({1, 4}, 5);
  auto m42 = fd::rand_tensor({4, 2}, 6);
  auto m54 = fd::rand_tensor({5, 4}, 7);
  auto pos = fd::rand_tensor({3, 4}, 8, 0.3, 1.5);
  auto gamma = fd::rand_tensor({4}, 9, 0.5, 1.0);
  auto beta = fd::rand_tensor({4}, 10);
  auto sep = fd::rand_tensor({3, 4}, 11);
  sep.v[5] = 9.0;

  primitive("add", {a34, b34}, [](Tape& t, auto& v) { return t.add(v[0], v[1]); });
  primitive("sub", {a34, b34}, [](Tape& t, auto& v) { return t.sub(v[0], v[1]); });
  primitive("mul", {a34, b34}, [](Tape& t, auto& v) { return t.mul(v[0], v[1]); });
  primitive("div", {a34, b34}, [](Tape& t, auto& v) { return t.div(v[0], v[1]); });
  primitive("add_scalar", {a34}, [](Tape& t, auto& v) { return t.add_scalar(v[0], 0.3); });
  primitive("mul_scalar", {a34}, [](Tape& t, auto& v) { return t.mul_scalar(v[0], -1.7); });
  primitive("add_rowvec", {a34, row}, [](Tape& t, auto& v) { return t.add_rowvec(v[0], v[1]); });
  primitive("mul_rowvec", {a34, row}, [](Tape& t, auto& v) { return t.mul_rowvec(v[0], v[1]); });
  primitive("mul_colvec", {a34, col}, [](Tape& t, auto& v) { return t.mul_colvec(v[0], v[1]); });
  primitive("repeat_rows", {one_row}, [](Tape& t, auto& v) { return t.repeat_rows(v[0], 5); });
  primitive("matmul", {a34, m42}, [](Tape& t, auto& v) { return t.matmul(v[0], v[1]); });
  primitive("matmul_nt", {a34, m54}, [](Tape& t, auto& v) { return t.matmul_nt(v[0], v[1]); });
  primitive("transpose", {a34}, [](Tape& t, auto& v) { return t.transpose(v[0]); });
  primitive("reshape", {a34}, [](Tape& t, auto& v) { return t.reshape(v[0], {2, 6}); });
  primitive("concat_rows", {a34, m54},
            [](Tape& t, auto& v) { return t.concat_rows({v[0], v[1]}); });
  primitive("concat_cols", {a34, col},
            [](Tape& t, auto& v) { return t.concat_cols({v[0], t.reshape(v[1], {3, 1})}); });
  primitive("slice_rows", {m54}, [](Tape& t, auto& v) { return t.slice_rows(v[0], 1, 4); });
  primitive("slice_cols", {a34}, [](Tape& t, auto& v) { return t.slice_cols(v[0], 1, 3); });
  primitive("gather_rows", {m54},
            [](Tape& t, auto& v) { return t.gather_rows(v[0], {4, 0, 0, 2}); });
  primitive("exp", {a34}, [](Tape& t, auto& v) { return t.exp(v[0]); });
  primitive("log", {pos}, [](Tape& t, auto& v) { return t.log(v[0]); });
  primitive("sqrt", {pos}, [](Tape& t, auto& v) { return t.sqrt(v[0]); });
  primitive("gelu", {a34}, [](Tape& t, auto& v) { return t.gelu(v[0]); });
  primitive("sigmoid", {a34}, [](Tape& t, auto& v) { return t.sigmoid(v[0]); });
  primitive("log_sigmoid", {a34}, [](Tape& t, auto& v) { return t.log_sigmoid(v[0]); });
  primitive("softmax", {a34}, [](Tape& t, auto& v) { return t.softmax(v[0]); });
  primitive("softmax_bias", {a34, b34},
            [](Tape& t, auto& v) { return t.softmax_bias(v[0], v[1]); });
  primitive("log_softmax", {a34}, [](Tape& t, auto& v) { return t.log_softmax(v[0]); });
  primitive("layer_norm", {a34, gamma, beta},
            [](Tape& t, auto& v) { return t.layer_norm(v[0], v[1], v[2]); });
  primitive("l2_normalize", {a34}, [](Tape& t, auto& v) { return t.l2_normalize(v[0]); });
  primitive("sum", {a34}, [](Tape& t, auto& v) { return t.sum(v[0]); });
  primitive("mean", {a34}, [](Tape& t, auto& v) { return t.mean(v[0]); });
  primitive("max", {sep}, [](Tape& t, auto& v) { return t.maxv(v[0]); });
  primitive("dropout", {a34}, [](Tape& t, auto& v) {
    RngStream rng(5);
    return t.dropout(v[0], 0.4, rng, true);
  });
  primitive("depth_gate", {a34}, [](Tape& t, auto& v) {
    RngStream rng(9);
    return t.depth_gate(v[0], 0.5, rng, true);
  });

  // End-to-end objectives at sampled parameter entries, tolerance 1e-4.
  RngStream rng(30);
  mz::enc::SlideEncoderConfig enc_cfg;
  enc_cfg.d_patch = 4;
  enc_cfg.dim = 8;
  enc_cfg.heads = 2;
  enc_cfg.layers = 1;
  enc_cfg.ffn_dim = 16;
  enc_cfg.registers = 1;
  enc_cfg.mlp_dropout = 0.0;
  enc_cfg.stochastic_depth_max = 0.0;
  mz::enc::ProjectionConfig proj_cfg{.hidden = 12, .bottleneck = 6, .prototypes = 16};
  mz::enc::CaseTransformerConfig case_cfg;
  case_cfg.layers = 1;
  case_cfg.heads = 2;
  case_cfg.ffn_dim = 16;
  case_cfg.dropout = 0.0;
  ParamStore params;
  mz::enc::init_slide_encoder(params, "slide/", enc_cfg, rng);
  mz::enc::init_projection_head(params, "proj/", enc_cfg.dim, proj_cfg, rng);
  mz::enc::init_case_transformer(params, "case/", enc_cfg.dim, case_cfg, rng);
  mz::enc::TaskHeadConfig cls_head;
  cls_head.kind = mz::enc::HeadKind::Mlp;
  cls_head.out_dim = 3;
  mz::enc::init_task_head(params, "head/cls/", enc_cfg.dim, cls_head, rng);
  mz::enc::TaskHeadConfig surv_head;
  surv_head.kind = mz::enc::HeadKind::Mlp;
  surv_head.out_dim = 4;
  mz::enc::init_task_head(params, "head/surv/", enc_cfg.dim, surv_head, rng);
  for (const char* name : {"proj/l1.w", "proj/l2.w", "proj/l3.w"})
    for (auto& v : params.at(name).v) v *= 20.0;

  const int side = 3, n_tok = side * side;
  mz::enc::TokenSequence global;
  global.features = Tensor::randn({n_tok, enc_cfg.d_patch}, rng);
  global.validity.assign(n_tok, 1);
  global.masked.assign(n_tok, 0);
  global.masked[2] = global.masked[5] = 1;
  global.spacing = 224.0;
  for (int i = 0; i < n_tok; ++i) {
    global.coord_x.push_back((i % side) * 224.0);
    global.coord_y.push_back((i / side) * 224.0);
  }
  mz::enc::TokenSequence local = global;
  local.masked.clear();
  Tensor teacher_cls = Tensor::randn({1, proj_cfg.prototypes}, rng, 0.5);
  Tensor teacher_patch = Tensor::randn({2, proj_cfg.prototypes}, rng, 0.5);
  const Tensor zero_center = Tensor::zeros({proj_cfg.prototypes});

  auto stage1_loss = [&](Tape& t) {
    RngStream quiet(0);
    mz::enc::ParamCtx p{&t, &params, "slide/", true};
    mz::enc::ParamCtx pj{&t, &params, "proj/", true};
    auto g = mz::enc::encode_slide(t, p, enc_cfg, global, false, quiet);
    auto l = mz::enc::encode_slide(t, p, enc_cfg, local, false, quiet);
    std::vector<Var> student{mz::enc::project_prototypes(t, pj, g.cls),
                             mz::enc::project_prototypes(t, pj, l.cls)};
    std::vector<Tensor> probs{mz::ssl::centered_softmax(teacher_cls, zero_center, 1.0)};
    Var l_cls = mz::ssl::loss_cls(t, probs, student, 0.5);
    Var rows = t.gather_rows(g.patches, {2, 5});
    Var patch = mz::enc::project_prototypes(t, pj, rows);
    Var l_mim = mz::ssl::loss_mim(
        t, mz::ssl::centered_softmax(teacher_patch, zero_center, 1.0), patch, 0.5);
    return t.add(l_cls, l_mim);
  };

  auto stage2_loss = [&](Tape& t) {
    RngStream quiet(0);
    mz::enc::ParamCtx pe{&t, &params, "slide/", true};
    mz::enc::ParamCtx pc{&t, &params, "case/", true};
    auto s1 = mz::enc::encode_slide(t, pe, enc_cfg, local, false, quiet);
    auto s2 = mz::enc::encode_slide(t, pe, enc_cfg, global, false, quiet);
    Var slides = t.concat_rows({s1.cls, s2.cls});
    Var h = mz::enc::aggregate_case(t, pc, case_cfg, slides, false, quiet);
    mz::enc::ParamCtx ph{&t, &params, "head/cls/", true};
    Var logits = mz::enc::task_head_forward(t, ph, cls_head, h, false, quiet);
    Var ce = mz::align::smoothed_weighted_ce(t, logits, 1, {1.2, 0.8, 1.0}, 0.03);
    mz::enc::ParamCtx ps{&t, &params, "head/surv/", true};
    Var hz = mz::enc::task_head_forward(t, ps, surv_head, h, false, quiet);
    Var nll = mz::align::survival_nll(t, hz, 3, 1);
    auto total = mz::align::multitask_loss(t, {ce, nll});
    return *total;
  };

  auto end_to_end = [&](const char* name, const std::function<Var(Tape&)>& build) {
    Tape t;
    Var loss = build(t);
    t.backward(loss);
    auto grads = t.named_grads();
    RngStream pick(std::string_view(name).size() + 41);
    double worst = 0.0;
    const double h = 1e-5;
    for (const auto& [pname, g] : grads) {
      if (g.numel() == 0) continue;
      const std::size_t idx = pick.below(g.numel());
      Tensor& param = params.at(pname);
      const double orig = param.v[idx];
      param.v[idx] = orig + h;
      Tape tp;
      const double fp = tp.val(build(tp)).item();
      param.v[idx] = orig - h;
      Tape tm;
      const double fm = tm.val(build(tm)).item();
      param.v[idx] = orig;
      const double fd_grad = (fp - fm) / (2 * h);
      const double rel =
          std::fabs(g.v[idx] - fd_grad) / std::max(1.0, std::fabs(fd_grad));
      worst = std::max(worst, rel);
    }
    checks.push_back({name, worst, worst < 1e-4});
  };
  end_to_end("objective Eq.3+4", stage1_loss);
  end_to_end("objective Eq.7 + B.5 NLL", stage2_loss);

  Outcome out;
  out.pass = true;
  double worst = 0.0;
  std::string worst_name;
  for (const auto& c : checks) {
    out.pass = out.pass && c.ok;
    if (c.rel_err > worst) {
      worst = c.rel_err;
      worst_name = c.claim;
    }
  }
  std::ostringstream d;
  d << checks.size() << " checks, worst rel err " << worst << " (" << worst_name << ")";
  out.detail = d.str();
  return out;
}

// ---------------------------------------------------------------------------
// 2. Masking exactness
// ---------------------------------------------------------------------------

Outcome masking_exactness() {
  RngStream meta(100);
  for (int trial = 0; trial < 1000; ++trial) {
    const int s = 4 + static_cast<int>(meta.below(21));
    std::vector<std::uint8_t> validity(static_cast<std::size_t>(s) * s, 0);
    std::size_t n_valid = 0;
    for (auto& v : validity) {
      v = meta.bernoulli(0.6) ? 1 : 0;
      n_valid += v;
    }
    if (n_valid == 0) {
      validity[0] = 1;
      n_valid = 1;
    }
    const double gamma = meta.uniform(0.02, 1.0);
    RngStream rng(meta.next_u64());
    auto bm = mz::build_block_mask(validity, s, gamma, 0.3, 1.0 / 0.3, 4, rng);
    const std::size_t expected = static_cast<std::size_t>(std::floor(gamma * n_valid));
    if (bm.masked_count() != expected)
      return {false, "count mismatch at trial " + std::to_string(trial)};
    for (std::size_t k = 0; k < validity.size(); ++k)
      if (bm.mask[k] && !validity[k])
        return {false, "invalid cell masked at trial " + std::to_string(trial)};
  }
  return {true, "1000 random (validity, gamma, seed) triples exact"};
}

// ---------------------------------------------------------------------------
// 3. Capping stratification
// ---------------------------------------------------------------------------

Outcome capping_stratification() {
  RngStream meta(200);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t v = 1 + meta.below(6000);
    const std::size_t k = 1 + meta.below(400);
    RngStream rng(meta.next_u64());
    auto cap = mz::cap_tokens(v, k, rng);
    if (v <= k) {
      if (cap.ranks.size() != v) return {false, "identity branch wrong size"};
      continue;
    }
    if (cap.ranks.size() != k) return {false, "wrong retained count"};
    for (std::size_t b = 0; b < k; ++b) {
      const std::size_t s = b * v / k;
      const std::size_t e = (b + 1) * v / k - 1;
      if (cap.ranks[b] < s || cap.ranks[b] > e)
        return {false, "rank outside bin at trial " + std::to_string(trial)};
      if (b > 0 && cap.ranks[b - 1] >= cap.ranks[b]) return {false, "ranks not sorted"};
    }
  }
  return {true, "1000 random (V, K) pairs stratified"};
}

// ---------------------------------------------------------------------------
// 4. Survival oracles
// ---------------------------------------------------------------------------

Outcome survival_oracles() {
  for (int e = 1; e <= 200; ++e) {
    const int expected = e < 8 ? std::max(2, std::max(1, e)) : std::min(16, 8 + (e - 8) / 24);
    if (mz::align::survival_bin_count(e, 2, 8, 16) != expected)
      return {false, "bin count table mismatch at E=" + std::to_string(e)};
  }
  if (mz::align::survival_bin_count(3, 2, 8, 16) != 3) return {false, "spot value E=3"};
  if (mz::align::survival_bin_count(32, 2, 8, 16) != 9) return {false, "spot value E=32"};
  if (mz::align::survival_bin_count(1000, 2, 8, 16) != 16) return {false, "spot value E=1000"};

  Tape t;
  Var a = t.input(Tensor::zeros({1, 2}));
  const double ev = t.val(mz::align::survival_nll(t, a, 1, 1)).item();
  const double cens = t.val(mz::align::survival_nll(t, a, 2, 0)).item();
  if (std::fabs(ev - 0.6931471805599453) > 1e-9) return {false, "event NLL closed form"};
  if (std::fabs(cens - 1.3862943611198906) > 1e-9) return {false, "censored NLL closed form"};

  RngStream rng(300);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> logits{rng.normal(), rng.normal(), rng.normal()};
    const double base = mz::align::risk_score(logits);
    for (int j = 0; j < 3; ++j) {
      auto larger = logits;
      larger[j] += 0.25;
      if (!(mz::align::risk_score(larger) > base)) return {false, "risk not strictly monotone"};
    }
  }
  return {true, "bin table E=1..200, NLL closed forms, risk monotone"};
}

// ---------------------------------------------------------------------------
// 5. Schedule endpoints
// ---------------------------------------------------------------------------

Outcome schedule_endpoints() {
  if (mz::nn::momentum_at(0, 14400, 0.996, 1.0) != 0.996) return {false, "mu(0) != 0.996"};
  if (mz::nn::momentum_at(14400, 14400, 0.996, 1.0) != 1.0) return {false, "mu(T) != 1.0"};
  if (mz::nn::linear_warmup(30.0, 30.0, 0.04, 0.07) != 0.07)
    return {false, "teacher temp at epoch 30 != 0.07"};
  if (mz::nn::linear_warmup(200.0, 30.0, 0.04, 0.07) != 0.07)
    return {false, "teacher temp beyond warmup != 0.07"};
  const double peak = 5e-4, lo = 2e-6;
  if (mz::nn::cosine_schedule(720, 14400, 720, 0.0, peak, lo) != peak)
    return {false, "lr at warmup end != peak"};
  if (mz::nn::cosine_schedule(14400, 14400, 720, 0.0, peak, lo) != lo)
    return {false, "lr at T != min"};
  return {true, "mu/temperature/lr endpoints exact"};
}

// ---------------------------------------------------------------------------
// 6. Structural invariants
// ---------------------------------------------------------------------------

Outcome structural_invariants() {
  RngStream rng(400);
  // ALiBi symmetry, zero special-token bias, translation invariance.
  std::vector<double> xs, ys;
  for (int i = 0; i < 7; ++i) {
    xs.push_back(rng.below(12) * 224.0);
    ys.push_back(rng.below(12) * 224.0);
  }
  auto slopes = mz::enc::SlideEncoderConfig::default_slopes(4);
  auto bias = mz::enc::alibi_bias(xs, ys, 224.0, slopes, 3);
  for (const auto& b : bias)
    for (int i = 0; i < b.rows(); ++i)
      for (int j = 0; j < b.cols(); ++j) {
        if (b.at(i, j) != b.at(j, i)) return {false, "ALiBi asymmetric"};
        if ((i < 3 || j < 3) && b.at(i, j) != 0.0) return {false, "special-token bias nonzero"};
      }
  auto xs2 = xs, ys2 = ys;
  for (auto& x : xs2) x += 1.0e7;
  for (auto& y : ys2) y += 3.0e6;
  auto bias2 = mz::enc::alibi_bias(xs2, ys2, 224.0, slopes, 3);
  for (std::size_t h = 0; h < bias.size(); ++h)
    if (bias[h].v != bias2[h].v) return {false, "ALiBi not translation invariant"};

  // Case-embedding permutation invariance: bitwise at 64-bit, eval mode.
  mz::enc::CaseTransformerConfig case_cfg;
  case_cfg.layers = 2;
  case_cfg.heads = 4;
  case_cfg.ffn_dim = 32;
  ParamStore params;
  mz::enc::init_case_transformer(params, "case/", 16, case_cfg, rng);
  Tensor slides = Tensor::randn({5, 16}, rng);
  Tensor shuffled = Tensor::zeros({5, 16});
  const int perm[5] = {3, 0, 4, 2, 1};
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 16; ++j) shuffled.at(i, j) = slides.at(perm[i], j);
  auto agg = [&](const Tensor& s) {
    Tape t;
    RngStream quiet(0);
    mz::enc::ParamCtx p{&t, &params, "case/", false};
    return t.val(mz::enc::aggregate_case(t, p, case_cfg, t.input(s), false, quiet)).v;
  };
  if (agg(slides) != agg(shuffled)) return {false, "case embedding not bitwise order-invariant"};

  // Eq. 3 term count: the loss must equal the mean over exactly the
  // G*(G+L-1) teacher/student pairs with i != j, checked against a direct
  // double-loop oracle.
  const int g_views = 2, l_views = 4, k = 8;
  Tape t;
  std::vector<Tensor> teacher_probs;
  std::vector<Var> student;
  std::vector<Tensor> student_raw;
  for (int j = 0; j < g_views; ++j) {
    Tensor p = Tensor::zeros({1, k});
    p.v[j] = 1.0;  // one-hot teacher views at distinct classes
    teacher_probs.push_back(p);
  }
  for (int i = 0; i < g_views + l_views; ++i) {
    Tensor logits = Tensor::randn({1, k}, rng);
    student_raw.push_back(logits);
    student.push_back(t.input(logits));
  }
  const double tau_s = 0.7;
  Var loss = mz::ssl::loss_cls(t, teacher_probs, student, tau_s);
  double oracle = 0.0;
  int term_count = 0;
  for (int j = 0; j < g_views; ++j)
    for (int i = 0; i < g_views + l_views; ++i) {
      if (i == j) continue;
      double m = student_raw[i].v[0] / tau_s;
      for (int c = 1; c < k; ++c) m = std::max(m, student_raw[i].v[c] / tau_s);
      double z = 0.0;
      for (int c = 0; c < k; ++c) z += std::exp(student_raw[i].v[c] / tau_s - m);
      oracle -= student_raw[i].v[j] / tau_s - m - std::log(z);
      ++term_count;
    }
  if (term_count != g_views * (g_views + l_views - 1)) return {false, "oracle term count wrong"};
  oracle /= term_count;
  if (std::fabs(t.val(loss).item() - oracle) > 1e-12)
    return {false, "Eq.3 term count / normalization mismatch"};
  return {true, "ALiBi + case-permutation + Eq.3 term count"};
}

// ---------------------------------------------------------------------------
// 7. Collapse regression pair
// ---------------------------------------------------------------------------

Outcome collapse_pair() {
  RngStream grng(500);
  std::vector<mz::FeatureGrid> corpus;
  for (int s = 0; s < 8; ++s) {
    std::vector<mz::PatchRecord> patches;
    for (int r = 0; r < 8; ++r)
      for (int c = 0; c < 8; ++c) {
        std::vector<float> f(4);
        for (auto& v : f) v = static_cast<float>(grng.normal());
        patches.push_back({static_cast<std::int64_t>(c) * 224,
                           static_cast<std::int64_t>(r) * 224, std::move(f)});
      }
    corpus.push_back(mz::build_grid(patches, 224.0f, "20x"));
  }

  mz::ssl::SSLConfig cfg;
  cfg.epochs = 2000;
  cfg.micro_batch = 4;
  cfg.accum_steps = 1;
  cfg.global_crops = 2;
  cfg.local_crops = 0;
  cfg.global_size = 6;
  cfg.local_size = 3;
  cfg.mask_prob = 0.0;
  cfg.base_lr = 2e-3;
  cfg.warmup_epochs = 1.0;
  cfg.temp_warmup_epochs = 4.0;
  cfg.mu0 = 0.9;
  cfg.muT = 0.999;
  cfg.freeze_proto_epochs = 0;

  mz::enc::SlideEncoderConfig enc_cfg;
  enc_cfg.d_patch = 4;
  enc_cfg.dim = 8;
  enc_cfg.heads = 2;
  enc_cfg.layers = 1;
  enc_cfg.ffn_dim = 16;
  enc_cfg.registers = 1;
  mz::enc::ProjectionConfig proj_cfg{.hidden = 12, .bottleneck = 6, .prototypes = 16};

  const int steps = 2000;
  auto tail_entropy = [&](bool centering) {
    auto run_cfg = cfg;
    run_cfg.centering = centering;
    mz::ssl::Trainer tr(&corpus, run_cfg, enc_cfg, proj_cfg, 77);
    double acc = 0.0;
    int n = 0;
    for (int i = 0; i < steps; ++i) {
      auto m = tr.step();
      if (i >= steps - 50) {
        acc += m.teacher_entropy;
        ++n;
      }
    }
    return acc / n;
  };

  const double without = tail_entropy(false);
  const double with = tail_entropy(true);
  const double threshold = std::log(16.0) / 2.0;
  std::ostringstream d;
  d << "entropy uncentered " << without << " vs centered " << with << " (threshold "
    << threshold << ")";
  return {without < threshold && with > threshold, d.str()};
}

// ---------------------------------------------------------------------------
// 8. Synthetic end-to-end
// ---------------------------------------------------------------------------

double majority_baseline_f1(const std::vector<int>& labels) {
  std::map<int, int> counts;
  for (int y : labels) counts[y] += 1;
  int majority = counts.begin()->first;
  for (const auto& [c, n] : counts)
    if (n > counts[majority]) majority = c;
  std::vector<int> pred(labels.size(), majority);
  return mz::eval::compute_metrics(labels, pred, {}).weighted_f1;
}

mz::eval::MetricReport probe_features(const std::vector<std::vector<double>>& features,
                                      const std::vector<int>& labels,
                                      const std::vector<std::string>& ids, int folds,
                                      std::uint64_t seed) {
  std::vector<mz::eval::FoldItem> items;
  for (std::size_t i = 0; i < labels.size(); ++i) items.push_back({ids[i], ids[i], labels[i]});
  RngStream rng(seed);
  RngStream frng = rng.child("folds");
  auto plan = mz::eval::make_folds(items, folds, frng);
  mz::eval::MlpProbeConfig cfg;  // protocol defaults: 200 epochs, batch 64
  RngStream prng = rng.child("probe");
  return mz::eval::mlp_probe(features, labels, plan, cfg, prng);
}

Outcome synthetic_end_to_end() {
  // Desk-scale corpus: >= 500 slides, 3 planted classification tasks, 2
  // planted survival tasks.
  mz::cli::SynthSpec spec;
  spec.slides = 520;
  spec.grid_min = 16;
  spec.grid_max = 22;
  spec.d_patch = 16;
  spec.clusters = 4;
  spec.cluster_scale = 1.2;
  spec.class_task_counts = {3, 2, 4};
  spec.class_shift = 0.9;
  spec.survival_tasks = 2;
  spec.noise = 0.6;
  auto data = mz::cli::synth_dataset(spec, 2026);

  // Stage 1: >= 200 optimizer steps.
  mz::enc::SlideEncoderConfig enc_cfg;
  enc_cfg.d_patch = 16;
  enc_cfg.dim = 32;
  enc_cfg.heads = 4;
  enc_cfg.layers = 2;
  enc_cfg.ffn_dim = 64;
  enc_cfg.registers = 2;
  mz::enc::ProjectionConfig proj_cfg{.hidden = 64, .bottleneck = 16, .prototypes = 64};
  mz::ssl::SSLConfig ssl_cfg;
  ssl_cfg.epochs = 7;
  ssl_cfg.micro_batch = 8;
  ssl_cfg.accum_steps = 2;
  ssl_cfg.global_size = 10;
  ssl_cfg.local_size = 5;
  ssl_cfg.max_attempts = 50;
  ssl_cfg.base_lr = 1.6e-2;  // peak 1e-3 after the batch-ratio scaling
  ssl_cfg.min_lr = 1e-5;
  ssl_cfg.warmup_epochs = 1.0;
  ssl_cfg.temp_warmup_epochs = 3.0;
  ssl_cfg.freeze_proto_epochs = 1;

  mz::ssl::Trainer stage1(&data.grids, ssl_cfg, enc_cfg, proj_cfg, 41);
  const long long s1_steps = stage1.total_steps();
  if (s1_steps < 200) return {false, "stage-1 plan below 200 steps"};
  for (long long s = 0; s < s1_steps; ++s) stage1.step();

  // Stage 2: 12 epochs from the stage-1 teacher.
  std::vector<mz::align::ResolvedCase> cases;
  std::size_t at = 0;
  for (const auto& c : data.cases) {
    mz::align::ResolvedCase rc;
    rc.id = c.id;
    rc.labels = c.labels;
    for (std::size_t s = 0; s < c.slide_files.size(); ++s) rc.grids.push_back(&data.grids[at++]);
    cases.push_back(std::move(rc));
  }
  mz::enc::CaseTransformerConfig case_cfg;
  case_cfg.layers = 2;
  case_cfg.heads = 4;
  case_cfg.ffn_dim = 64;
  mz::align::AlignConfig align_cfg;
  align_cfg.epochs = 12;
  align_cfg.accum_steps = 16;
  align_cfg.base_lr = 1e-3;
  align_cfg.min_lr = 1e-5;
  align_cfg.k_max = 256;
  mz::align::Stage2Trainer stage2(cases, data.tasks, stage1.teacher().params, enc_cfg, case_cfg,
                                  align_cfg, 43);
  for (int e = 0; e < align_cfg.epochs; ++e) stage2.run_epoch();

  // Embeddings from the selected snapshot.
  mz::align::Stage2Trainer embedder(cases, data.tasks, stage2.best_params(), enc_cfg, case_cfg,
                                    align_cfg, 43);
  embedder.load_params(stage2.best_params());
  std::vector<std::vector<double>> stage2_emb;
  std::vector<std::string> ids;
  for (const auto& rc : cases) {
    stage2_emb.push_back(embedder.embed_case(rc).v);
    ids.push_back(rc.id);
  }

  // Raw mean-pooled patch features, the baseline representation.
  std::vector<std::vector<double>> raw_mean;
  for (const auto& rc : cases) {
    std::vector<double> mean(spec.d_patch, 0.0);
    std::size_t n = 0;
    for (const auto* g : rc.grids)
      for (std::size_t k = 0; k < g->cells(); ++k) {
        if (!g->validity[k]) continue;
        for (int j = 0; j < g->d_patch; ++j) mean[j] += g->features[k * g->d_patch + j];
        ++n;
      }
    for (auto& v : mean) v /= static_cast<double>(n);
    raw_mean.push_back(std::move(mean));
  }

  std::ostringstream detail;
  bool pass = true;
  int beats = 0;
  for (std::size_t t = 0; t < data.case_class.size(); ++t) {
    const std::string task_id = "cls" + std::to_string(t);
    const std::vector<int>& labels = data.case_class[t];
    const double prior = majority_baseline_f1(labels);
    auto ours = probe_features(stage2_emb, labels, ids, 5, 1000 + t);
    auto raw = probe_features(raw_mean, labels, ids, 5, 1000 + t);
    const bool above_prior = ours.mean_f1() >= prior + 0.2;
    if (ours.mean_f1() > raw.mean_f1()) ++beats;
    pass = pass && above_prior;
    detail << task_id << ": ours " << ours.mean_f1() << " raw " << raw.mean_f1() << " prior "
           << prior << (above_prior ? "" : " [below prior+0.2]") << "; ";
  }
  pass = pass && beats >= 2;
  detail << "beats raw on " << beats << "/3";
  return {pass, detail.str()};
}

// ---------------------------------------------------------------------------
// 9. Metric oracles
// ---------------------------------------------------------------------------

Outcome metric_oracles() {
  {
    auto m = mz::eval::compute_metrics({0, 0, 1}, {0, 1, 1}, {});
    if (std::fabs(m.weighted_f1 - 2.0 / 3.0) > 1e-12) return {false, "weighted F1 2/3 case"};
  }
  {
    std::vector<std::vector<double>> scores{{0.9, 0.1}, {0.6, 0.4}, {0.65, 0.35}, {0.2, 0.8}};
    auto m = mz::eval::compute_metrics({0, 0, 1, 1}, {0, 0, 1, 1}, scores);
    if (std::fabs(m.weighted_auc - 0.75) > 1e-12) return {false, "AUC 0.75 case"};
  }
  {
    std::vector<int> y{0, 1, 2, 0, 1, 2};
    std::vector<std::vector<double>> scores;
    for (int v : y) {
      std::vector<double> s(3, 0.0);
      s[v] = 1.0;
      scores.push_back(s);
    }
    auto m = mz::eval::compute_metrics(y, y, scores);
    if (std::fabs(m.weighted_f1 - 1.0) > 1e-12 || std::fabs(m.weighted_auc - 1.0) > 1e-12 ||
        std::fabs(m.balanced_accuracy - 1.0) > 1e-12)
      return {false, "perfect-prediction case"};
  }

  // Linear probe vs dense grid-search oracle on an N=20, D=2 instance.
  const int n = 20;
  RngStream rng(600);
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  for (int i = 0; i < n; ++i) {
    const int c = i % 2;
    x.push_back({rng.normal() + (c ? 1.2 : -1.2), rng.normal() + (c ? -0.4 : 0.4)});
    y.push_back(c);
  }
  std::vector<std::size_t> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = i;
  auto objective = [&](double a, double b, double c0, double lambda) {
    double loss = 0.0;
    for (int i = 0; i < n; ++i) {
      const double z0 = a * x[i][0] + b * x[i][1] + c0;
      const double m = std::max(z0, -z0);
      const double lse = m + std::log(std::exp(z0 - m) + std::exp(-z0 - m));
      loss += (lse - (y[i] == 0 ? z0 : -z0)) / n;
    }
    return loss + 0.5 * lambda * 2.0 * (a * a + b * b + c0 * c0);
  };
  for (double lambda : {0.05, 0.5}) {
    double best[3] = {0, 0, 0};
    double span = 6.0;
    for (int level = 0; level < 10; ++level) {
      double local_best = std::numeric_limits<double>::infinity();
      double local[3] = {best[0], best[1], best[2]};
      const int steps = 14;
      for (int ia = -steps; ia <= steps; ++ia)
        for (int ib = -steps; ib <= steps; ++ib)
          for (int ic = -steps; ic <= steps; ++ic) {
            const double av = best[0] + span * ia / steps;
            const double bv = best[1] + span * ib / steps;
            const double cv = best[2] + span * ic / steps;
            const double v = objective(av, bv, cv, lambda);
            if (v < local_best) {
              local_best = v;
              local[0] = av;
              local[1] = bv;
              local[2] = cv;
            }
          }
      best[0] = local[0];
      best[1] = local[1];
      best[2] = local[2];
      span /= steps * 0.5;
    }
    auto fit = mz::eval::fit_logistic(x, y, ids, 2, lambda, 500, 1e-8);
    const double expected[6] = {best[0], best[1], best[2], -best[0], -best[1], -best[2]};
    for (int i = 0; i < 6; ++i)
      if (std::fabs(fit.coefficients[i] - expected[i]) > 1e-3)
        return {false, "linear probe coefficients deviate from grid oracle"};
  }
  return {true, "hand metric examples exact, logistic fit within 1e-3 of grid oracle"};
}

// ---------------------------------------------------------------------------
// 10. Diagnostics oracles
// ---------------------------------------------------------------------------

Outcome diagnostics_oracles() {
  // Rank-5 equal-variance data.
  RngStream rng(700);
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 3000; ++i) {
    std::vector<double> row(8, 0.0);
    for (int k = 0; k < 5; ++k) row[k] = rng.bernoulli(0.5) ? 1.0 : -1.0;
    rows.push_back(row);
  }
  auto report = mz::diag::pca_compactness(rows);
  if (report.rank_at_threshold[0.80] != 4) return {false, "r(0.80) != 4"};
  if (report.rank_at_threshold[0.95] != 5) return {false, "r(0.95) != 5"};

  // rho = 1.0 stability is exactly 1.
  std::vector<std::vector<double>> emb;
  for (int i = 0; i < 25; ++i) {
    std::vector<double> row(5);
    for (auto& v : row) v = rng.normal();
    emb.push_back(row);
  }
  RngStream srng(701);
  auto curve = mz::diag::neighborhood_stability(emb, {3, 7}, 1.0, 3, srng);
  for (const auto& pt : curve)
    if (pt.mean != 1.0) return {false, "rho=1 stability not exactly 1"};

  // Attribution finite differences on a small real encoder.
  mz::enc::SlideEncoderConfig cfg;
  cfg.d_patch = 3;
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.ffn_dim = 12;
  cfg.registers = 1;
  ParamStore params;
  RngStream prng(702);
  mz::enc::init_slide_encoder(params, "slide/", cfg, prng);
  std::vector<mz::PatchRecord> patches;
  RngStream grng(703);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) {
      std::vector<float> f(3);
      for (auto& v : f) v = static_cast<float>(grng.normal());
      patches.push_back({static_cast<std::int64_t>(c) * 224, static_cast<std::int64_t>(r) * 224,
                         std::move(f)});
    }
  auto grid = mz::build_grid(patches, 224.0f);

  auto phi_of = [&](const mz::FeatureGrid& g) {
    RngStream quiet(0);
    Tape t;
    mz::enc::ParamCtx p{&t, &params, "slide/", false};
    auto seq = mz::align::grid_tokens(g, SIZE_MAX, quiet);
    auto out = mz::enc::encode_slide(t, p, cfg, seq, false, quiet);
    return 0.5 * t.val(t.sum(t.mul(out.cls, out.cls))).item();
  };
  auto map = mz::diag::gradxinput_map(grid, params, cfg);
  const double h = 1e-5;
  RngStream pick(704);
  for (int trial = 0; trial < 8; ++trial) {
    const std::size_t cell = pick.below(grid.cells());
    // FD of phi against each feature of the cell; compare the aggregated
    // grad-x-input score for that cell.
    double fd_score = 0.0;
    for (int j = 0; j < cfg.d_patch; ++j) {
      auto plus = grid, minus = grid;
      plus.features[cell * cfg.d_patch + j] += static_cast<float>(h);
      minus.features[cell * cfg.d_patch + j] -= static_cast<float>(h);
      const double grad = (phi_of(plus) - phi_of(minus)) / (2 * h);
      fd_score += std::fabs(grid.features[cell * cfg.d_patch + j] * grad);
    }
    const double rel =
        std::fabs(map.raw[cell] - fd_score) / std::max(1.0, std::fabs(fd_score));
    if (rel > 1e-4) return {false, "attribution FD mismatch"};
  }
  return {true, "rank-5 exact, rho=1 exact, attribution FD within 1e-4"};
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    double budget_seconds;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"gradient suite", 120.0, gradient_suite},
      {"masking exactness", 10.0, masking_exactness},
      {"capping stratification", 10.0, capping_stratification},
      {"survival oracles", 5.0, survival_oracles},
      {"schedule endpoints", 1.0, schedule_endpoints},
      {"structural invariants", 30.0, structural_invariants},
      {"collapse regression pair", 600.0, collapse_pair},
      {"synthetic end-to-end", 3600.0, synthetic_end_to_end},
      {"metric oracles", 60.0, metric_oracles},
      {"diagnostics oracles", 120.0, diagnostics_oracles},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome out;
    try {
      out = c.run();
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_budget = seconds <= c.budget_seconds;
    const bool pass = out.pass && in_budget;
    failures += pass ? 0 : 1;
    std::printf("%s  %-26s (%.1f s%s)  %s\n", pass ? "PASS" : "FAIL", c.name, seconds,
                in_budget ? "" : ", over budget", out.detail.c_str());
    std::fflush(stdout);
  }
  return failures;
}
