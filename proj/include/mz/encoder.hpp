#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mz/optim.hpp"
#include "mz/tensor.hpp"

namespace mz::enc {

using nn::ParamStore;
using nn::Tape;
using nn::Tensor;
using nn::Var;

class EncoderError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Grid transformer configuration. Defaults mirror the full-scale recipe;
/// desk runs shrink every dimension through the config file.
struct SlideEncoderConfig {
  int d_patch = 384;
  int dim = 768;
  int heads = 12;
  int layers = 6;
  int ffn_dim = 3072;
  int registers = 4;
  double mlp_dropout = 0.1;
  double attn_dropout = 0.0;
  double stochastic_depth_max = 0.1;
  std::vector<double> alibi_slopes;  // filled by default_slopes() when empty

  /// Fixed geometric slopes s_h = 2^(-8h/H), h = 1..H.
  static std::vector<double> default_slopes(int heads) {
    std::vector<double> s(heads);
    for (int h = 0; h < heads; ++h)
      s[h] = std::pow(2.0, -8.0 * static_cast<double>(h + 1) / heads);
    return s;
  }

  std::vector<double> slopes() const {
    return alibi_slopes.empty() ? default_slopes(heads) : alibi_slopes;
  }

  void validate() const {
    if (dim % heads != 0) throw EncoderError("encoder dim must divide by heads");
    for (double s : slopes())
      if (!(s > 0.0)) throw EncoderError("ALiBi slopes must be positive");
  }
};

struct ProjectionConfig {
  int hidden = 2048;      // d_h
  int bottleneck = 256;   // d_b
  int prototypes = 8192;  // K
};

struct CaseTransformerConfig {
  int layers = 3;
  int heads = 12;
  int ffn_dim = 3072;
  double dropout = 0.1;
  double layerscale_init = 1e-5;
  double token_init_std = 0.02;
};

enum class HeadKind { Linear, Mlp };

struct TaskHeadConfig {
  HeadKind kind = HeadKind::Mlp;
  int out_dim = 2;          // o_t: classes or survival bins
  int hidden = 0;           // MLP hidden width; 0 means the model dim
  double head_dropout = 0.1;  // linear-head input dropout p_head
};

/// One view's worth of tokens. Patch rows are dense over the crop/grid cells
/// that the caller chose to pass; CLS and registers are implicit and always
/// valid, never masked.
struct TokenSequence {
  Tensor features;                    // N x d_patch
  std::vector<std::uint8_t> validity; // N
  std::vector<std::uint8_t> masked;   // N; student-side corruption flags
  std::vector<double> coord_x;        // N
  std::vector<double> coord_y;        // N
  double spacing = 1.0;

  int count() const { return features.rows(); }

  void check() const {
    const std::size_t n = static_cast<std::size_t>(count());
    if (validity.size() != n || coord_x.size() != n || coord_y.size() != n)
      throw EncoderError("token sequence: field lengths disagree");
    if (!masked.empty() && masked.size() != n)
      throw EncoderError("token sequence: mask length disagrees");
    for (std::size_t i = 0; i < n; ++i)
      if (!masked.empty() && masked[i] && !validity[i])
        throw EncoderError("token sequence: masked token must be valid");
  }
};

/// Per-head additive ALiBi bias over the full token sequence (CLS + registers
/// + patches): -s_h * dist/spacing for patch pairs, exactly 0 for any pair
/// involving CLS or a register.
inline std::vector<Tensor> alibi_bias(const std::vector<double>& coord_x,
                                      const std::vector<double>& coord_y, double spacing,
                                      const std::vector<double>& slopes, int special_tokens) {
  const int n_patch = static_cast<int>(coord_x.size());
  const int total = special_tokens + n_patch;
  std::vector<Tensor> bias;
  bias.reserve(slopes.size());
  Tensor dist = Tensor::zeros({total, total});
  for (int i = 0; i < n_patch; ++i)
    for (int j = 0; j < n_patch; ++j) {
      const double dx = coord_x[i] - coord_x[j];
      const double dy = coord_y[i] - coord_y[j];
      dist.at(special_tokens + i, special_tokens + j) = std::sqrt(dx * dx + dy * dy) / spacing;
    }
  for (double s : slopes) {
    Tensor b = dist;
    for (auto& x : b.v) x *= -s;
    bias.push_back(std::move(b));
  }
  return bias;
}

/// Additive attention mask: -inf wherever either participant is an invalid
/// patch token (including the invalid token's own diagonal entry); 0
/// elsewhere. CLS and registers count as valid.
inline Tensor background_mask(const std::vector<std::uint8_t>& validity, int special_tokens) {
  const int n_patch = static_cast<int>(validity.size());
  const int total = special_tokens + n_patch;
  bool any_valid = false;
  for (auto v : validity) any_valid = any_valid || v != 0;
  if (!any_valid) throw EncoderError("background_mask: no valid patch tokens");
  constexpr double kInf = std::numeric_limits<double>::infinity();
  Tensor m = Tensor::zeros({total, total});
  for (int i = 0; i < n_patch; ++i) {
    if (validity[i]) continue;
    for (int j = 0; j < total; ++j) {
      m.at(special_tokens + i, j) = -kInf;
      m.at(j, special_tokens + i) = -kInf;
    }
  }
  return m;
}

/// Parameter access for one forward pass. Trainable passes register leaves by
/// name (gradients retrievable afterwards); frozen passes insert constants,
/// so no gradient can ever reach them.
struct ParamCtx {
  Tape* tape;
  const ParamStore* store;
  std::string prefix;
  bool trainable;

  Var operator()(const std::string& name) const {
    const Tensor& t = store->at(prefix + name);
    return trainable ? tape->leaf(t, prefix + name) : tape->input(t);
  }
};

namespace detail {

inline void init_affine(ParamStore& s, const std::string& prefix, int in, int out, RngStream& rng,
                        double std_dev = 0.02) {
  s.set(prefix + ".w", Tensor::trunc_normal({in, out}, rng, std_dev));
  s.set(prefix + ".b", Tensor::zeros({out}));
}

inline void init_layer_norm(ParamStore& s, const std::string& prefix, int dim) {
  s.set(prefix + ".g", Tensor::full({dim}, 1.0));
  s.set(prefix + ".b", Tensor::zeros({dim}));
}

inline void init_block(ParamStore& s, const std::string& prefix, int dim, int ffn_dim,
                       RngStream& rng, std::optional<double> layerscale) {
  init_layer_norm(s, prefix + ".ln1", dim);
  init_affine(s, prefix + ".attn.q", dim, dim, rng);
  init_affine(s, prefix + ".attn.k", dim, dim, rng);
  init_affine(s, prefix + ".attn.v", dim, dim, rng);
  init_affine(s, prefix + ".attn.o", dim, dim, rng);
  init_layer_norm(s, prefix + ".ln2", dim);
  init_affine(s, prefix + ".ffn.1", dim, ffn_dim, rng);
  init_affine(s, prefix + ".ffn.2", ffn_dim, dim, rng);
  if (layerscale) {
    s.set(prefix + ".ls1", Tensor::full({dim}, *layerscale));
    s.set(prefix + ".ls2", Tensor::full({dim}, *layerscale));
  }
}

/// Multi-head self-attention with an optional shared additive bias per head.
/// `bias` tensors are constants (ALiBi + background mask).
inline Var attention(Tape& t, const ParamCtx& p, const std::string& prefix, Var x, int heads,
                     const std::vector<Tensor>* bias, double attn_dropout, RngStream& rng,
                     bool train) {
  const int dim = t.val(x).cols();
  const int head_dim = dim / heads;
  Var q = nn::affine(t, x, p(prefix + ".q.w"), p(prefix + ".q.b"));
  Var k = nn::affine(t, x, p(prefix + ".k.w"), p(prefix + ".k.b"));
  Var v = nn::affine(t, x, p(prefix + ".v.w"), p(prefix + ".v.b"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  std::vector<Var> heads_out;
  heads_out.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    Var qh = t.slice_cols(q, h * head_dim, (h + 1) * head_dim);
    Var kh = t.slice_cols(k, h * head_dim, (h + 1) * head_dim);
    Var vh = t.slice_cols(v, h * head_dim, (h + 1) * head_dim);
    Var logits = t.mul_scalar(t.matmul_nt(qh, kh), scale);
    Var probs = bias ? t.softmax_bias(logits, t.input((*bias)[h])) : t.softmax(logits);
    if (attn_dropout > 0.0) probs = t.dropout(probs, attn_dropout, rng, train);
    heads_out.push_back(t.matmul(probs, vh));
  }
  Var merged = heads > 1 ? t.concat_cols(heads_out) : heads_out[0];
  return nn::affine(t, merged, p(prefix + ".o.w"), p(prefix + ".o.b"));
}

inline Var ffn(Tape& t, const ParamCtx& p, const std::string& prefix, Var x, double dropout,
               RngStream& rng, bool train) {
  Var h = t.gelu(nn::affine(t, x, p(prefix + ".1.w"), p(prefix + ".1.b")));
  h = t.dropout(h, dropout, rng, train);
  h = nn::affine(t, h, p(prefix + ".2.w"), p(prefix + ".2.b"));
  return t.dropout(h, dropout, rng, train);
}

}  // namespace detail

/// Fresh slide-encoder parameters under `prefix` (e.g. "slide/").
inline void init_slide_encoder(ParamStore& s, const std::string& prefix,
                               const SlideEncoderConfig& cfg, RngStream& rng) {
  cfg.validate();
  detail::init_affine(s, prefix + "embed", cfg.d_patch, cfg.dim, rng);
  s.set(prefix + "cls", Tensor::trunc_normal({1, cfg.dim}, rng, 0.02));
  if (cfg.registers > 0)
    s.set(prefix + "reg", Tensor::trunc_normal({cfg.registers, cfg.dim}, rng, 0.02));
  s.set(prefix + "mask", Tensor::trunc_normal({1, cfg.dim}, rng, 0.02));
  for (int l = 0; l < cfg.layers; ++l)
    detail::init_block(s, prefix + "blocks." + std::to_string(l), cfg.dim, cfg.ffn_dim, rng,
                       std::nullopt);  // LayerScale disabled in the slide encoder
  detail::init_layer_norm(s, prefix + "norm", cfg.dim);
}

struct SlideEncodeOut {
  Var cls;     // 1 x d
  Var patches; // N x d (invalid rows zeroed)
};

/// Grid transformer forward: project + GELU, swap masked student positions
/// for the mask embedding, prepend CLS and registers, run pre-norm blocks
/// with ALiBi and background masking, final LayerNorm. Stochastic depth rates
/// rise linearly with depth up to the configured max (train mode only).
inline SlideEncodeOut encode_slide(Tape& t, const ParamCtx& p, const SlideEncoderConfig& cfg,
                                   const TokenSequence& tokens, bool train, RngStream& rng) {
  cfg.validate();
  tokens.check();
  const int n_patch = tokens.count();
  const int special = 1 + cfg.registers;

  Var x = t.gelu(nn::affine(t, t.input(tokens.features), p("embed.w"), p("embed.b")));

  if (!tokens.masked.empty()) {
    bool any = false;
    for (auto m : tokens.masked) any = any || m != 0;
    if (any) {
      Tensor keep = Tensor::zeros({n_patch});
      Tensor swap = Tensor::zeros({n_patch});
      for (int i = 0; i < n_patch; ++i) {
        keep.v[i] = tokens.masked[i] ? 0.0 : 1.0;
        swap.v[i] = tokens.masked[i] ? 1.0 : 0.0;
      }
      Var mask_rows = t.repeat_rows(p("mask"), n_patch);
      x = t.add(t.mul_colvec(x, t.input(keep)), t.mul_colvec(mask_rows, t.input(swap)));
    }
  }

  std::vector<Var> parts{p("cls")};
  if (cfg.registers > 0) parts.push_back(p("reg"));
  parts.push_back(x);
  Var seq = t.concat_rows(parts);

  std::vector<Tensor> bias =
      alibi_bias(tokens.coord_x, tokens.coord_y, tokens.spacing, cfg.slopes(), special);
  const Tensor bg = background_mask(tokens.validity, special);
  for (auto& b : bias)
    for (std::size_t i = 0; i < b.v.size(); ++i) b.v[i] += bg.v[i];

  for (int l = 0; l < cfg.layers; ++l) {
    const std::string blk = "blocks." + std::to_string(l);
    const double sd_rate =
        cfg.layers > 1 ? cfg.stochastic_depth_max * l / (cfg.layers - 1) : 0.0;
    Var h = t.layer_norm(seq, p(blk + ".ln1.g"), p(blk + ".ln1.b"));
    Var attn = detail::attention(t, p, blk + ".attn", h, cfg.heads, &bias, cfg.attn_dropout, rng,
                                 train);
    seq = t.add(seq, t.depth_gate(attn, sd_rate, rng, train));
    Var h2 = t.layer_norm(seq, p(blk + ".ln2.g"), p(blk + ".ln2.b"));
    Var f = detail::ffn(t, p, blk + ".ffn", h2, cfg.mlp_dropout, rng, train);
    seq = t.add(seq, t.depth_gate(f, sd_rate, rng, train));
  }

  Var out = t.layer_norm(seq, p("norm.g"), p("norm.b"));
  SlideEncodeOut res;
  res.cls = t.slice_rows(out, 0, 1);
  Var patch_rows = t.slice_rows(out, special, special + n_patch);
  // Invalid rows are never read downstream; zero them anyway.
  Tensor valid_col = Tensor::zeros({n_patch});
  for (int i = 0; i < n_patch; ++i) valid_col.v[i] = tokens.validity[i] ? 1.0 : 0.0;
  res.patches = t.mul_colvec(patch_rows, t.input(valid_col));
  return res;
}

/// Renormalizes prototype rows to unit norm (weight normalization with the
/// gain frozen at 1). Called after every optimizer step.
inline void renormalize_prototypes(ParamStore& s, const std::string& name) {
  Tensor& proto = s.at(name);
  const int k = proto.rows(), d = proto.cols();
  for (int i = 0; i < k; ++i) {
    double norm = 0.0;
    for (int j = 0; j < d; ++j) norm += proto.at(i, j) * proto.at(i, j);
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      proto.at(i, 0) = 1.0;  // dead row: reset to a unit basis vector
      for (int j = 1; j < d; ++j) proto.at(i, j) = 0.0;
      continue;
    }
    for (int j = 0; j < d; ++j) proto.at(i, j) /= norm;
  }
}

/// Fresh projection-head parameters under `prefix` (e.g. "proj/").
inline void init_projection_head(ParamStore& s, const std::string& prefix, int dim,
                                 const ProjectionConfig& cfg, RngStream& rng) {
  detail::init_affine(s, prefix + "l1", dim, cfg.hidden, rng);
  detail::init_affine(s, prefix + "l2", cfg.hidden, cfg.hidden, rng);
  detail::init_affine(s, prefix + "l3", cfg.hidden, cfg.bottleneck, rng);
  s.set(prefix + "proto", Tensor::trunc_normal({cfg.prototypes, cfg.bottleneck}, rng, 0.02));
  renormalize_prototypes(s, prefix + "proto");
}

/// Two GELU hidden layers, an L2-normalized bottleneck, then logits against
/// the weight-normalized prototype rows. Shared between CLS and patch tokens.
inline Var project_prototypes(Tape& t, const ParamCtx& p, Var embeddings) {
  Var u1 = t.gelu(nn::affine(t, embeddings, p("l1.w"), p("l1.b")));
  Var u2 = t.gelu(nn::affine(t, u1, p("l2.w"), p("l2.b")));
  Var u3 = t.l2_normalize(nn::affine(t, u2, p("l3.w"), p("l3.b")));
  return t.matmul_nt(u3, p("proto"));
}

/// Fresh case-transformer parameters under `prefix` (e.g. "case/").
inline void init_case_transformer(ParamStore& s, const std::string& prefix, int dim,
                                  const CaseTransformerConfig& cfg, RngStream& rng) {
  if (dim % cfg.heads != 0) throw EncoderError("case transformer dim must divide by heads");
  s.set(prefix + "token", Tensor::trunc_normal({1, dim}, rng, cfg.token_init_std));
  for (int l = 0; l < cfg.layers; ++l)
    detail::init_block(s, prefix + "blocks." + std::to_string(l), dim, cfg.ffn_dim, rng,
                       cfg.layerscale_init);
  detail::init_layer_norm(s, prefix + "norm", dim);
}

/// Case transformer: [CASE] token prepended to the slide embeddings, pre-norm
/// blocks with LayerScale and no DropPath, output = LN(final)[0]. There is no
/// positional encoding over slides; rows are canonicalized (lexicographic
/// order) before the forward pass so the result is bitwise order-invariant.
inline Var aggregate_case(Tape& t, const ParamCtx& p, const CaseTransformerConfig& cfg,
                          Var slide_embeddings, bool train, RngStream& rng) {
  const Tensor& emb = t.val(slide_embeddings);
  const int n_slides = emb.rows();
  if (n_slides < 1) throw EncoderError("aggregate_case: need at least one slide embedding");
  std::vector<int> order(n_slides);
  for (int i = 0; i < n_slides; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    for (int j = 0; j < emb.cols(); ++j) {
      if (emb.at(a, j) != emb.at(b, j)) return emb.at(a, j) < emb.at(b, j);
    }
    return false;
  });
  Var canonical = t.gather_rows(slide_embeddings, order);
  Var seq = t.concat_rows({p("token"), canonical});
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string blk = "blocks." + std::to_string(l);
    Var h = t.layer_norm(seq, p(blk + ".ln1.g"), p(blk + ".ln1.b"));
    Var attn =
        detail::attention(t, p, blk + ".attn", h, cfg.heads, nullptr, 0.0, rng, train);
    seq = t.add(seq, t.mul_rowvec(attn, p(blk + ".ls1")));
    Var h2 = t.layer_norm(seq, p(blk + ".ln2.g"), p(blk + ".ln2.b"));
    Var f = detail::ffn(t, p, blk + ".ffn", h2, cfg.dropout, rng, train);
    seq = t.add(seq, t.mul_rowvec(f, p(blk + ".ls2")));
  }
  Var out = t.layer_norm(seq, p("norm.g"), p("norm.b"));
  return t.slice_rows(out, 0, 1);
}

/// Fresh task-head parameters under `prefix` (e.g. "head/<task>/"). Heads use
/// fan-in scaled init: at the transformer's 0.02 the stacked affines leave
/// logits orders of magnitude too small to train in a short schedule.
inline void init_task_head(ParamStore& s, const std::string& prefix, int dim,
                           const TaskHeadConfig& cfg, RngStream& rng) {
  if (cfg.kind == HeadKind::Linear) {
    detail::init_affine(s, prefix + "out", dim, cfg.out_dim, rng, 1.0 / std::sqrt(dim));
    return;
  }
  const int hidden = cfg.hidden > 0 ? cfg.hidden : dim;
  detail::init_layer_norm(s, prefix + "ln", dim);
  detail::init_affine(s, prefix + "l1", dim, hidden, rng, 1.0 / std::sqrt(dim));
  detail::init_affine(s, prefix + "l2", hidden, hidden, rng, 1.0 / std::sqrt(hidden));
  detail::init_affine(s, prefix + "out", hidden, cfg.out_dim, rng, 1.0 / std::sqrt(hidden));
}

/// Linear head: dropout(p_head) then affine. MLP head: LayerNorm, two hidden
/// affine+GELU+dropout(0.25) blocks, output affine. Dropout only in train.
inline Var task_head_forward(Tape& t, const ParamCtx& p, const TaskHeadConfig& cfg, Var h,
                             bool train, RngStream& rng) {
  if (cfg.kind == HeadKind::Linear) {
    Var x = t.dropout(h, cfg.head_dropout, rng, train);
    return nn::affine(t, x, p("out.w"), p("out.b"));
  }
  Var x = t.layer_norm(h, p("ln.g"), p("ln.b"));
  x = t.dropout(t.gelu(nn::affine(t, x, p("l1.w"), p("l1.b"))), 0.25, rng, train);
  x = t.dropout(t.gelu(nn::affine(t, x, p("l2.w"), p("l2.b"))), 0.25, rng, train);
  return nn::affine(t, x, p("out.w"), p("out.b"));
}

}  // namespace mz::enc
