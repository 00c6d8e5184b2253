#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mz/align.hpp"
#include "mz/encoder.hpp"
#include "mz/eval.hpp"
#include "mz/ssl.hpp"

namespace mz::cli {

class ConfigError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Flat namespaced key-value configuration. The embedded schema doubles as
/// the default profile; unknown keys, type mismatches and duplicates are
/// rejected with line numbers.
class Config {
 public:
  enum class Kind { Bool, Int, Real, Str };

  struct Value {
    Kind kind = Kind::Real;
    bool b = false;
    long long i = 0;
    double r = 0.0;
    std::string s;
  };

  static Config defaults() {
    Config c;
    auto B = [&](const char* k, bool v) { c.values_[k] = {Kind::Bool, v, 0, 0.0, {}}; };
    auto I = [&](const char* k, long long v) { c.values_[k] = {Kind::Int, false, v, 0.0, {}}; };
    auto R = [&](const char* k, double v) { c.values_[k] = {Kind::Real, false, 0, v, {}}; };
    auto S = [&](const char* k, std::string v) {
      c.values_[k] = {Kind::Str, false, 0, 0.0, std::move(v)};
    };

    // Slide encoder architecture.
    I("enc.d_patch", 384);
    I("enc.dim", 768);
    I("enc.heads", 12);
    I("enc.layers", 6);
    I("enc.ffn", 3072);
    I("enc.registers", 4);
    R("enc.mlp_dropout", 0.1);
    R("enc.attn_dropout", 0.0);
    R("enc.stochastic_depth", 0.1);
    I("enc.proj_hidden", 2048);
    I("enc.proj_bottleneck", 256);
    I("enc.prototypes", 8192);

    // Case transformer.
    I("case.layers", 3);
    I("case.heads", 12);
    I("case.ffn", 3072);
    R("case.dropout", 0.1);
    R("case.layerscale", 1e-5);
    R("case.token_init_std", 0.02);

    // Stage-1 self-distillation.
    R("ssl.student_temp", 0.1);
    R("ssl.teacher_temp_start", 0.04);
    R("ssl.teacher_temp_end", 0.07);
    R("ssl.teacher_patch_temp_start", 0.04);
    R("ssl.teacher_patch_temp_end", 0.07);
    R("ssl.temp_warmup_epochs", 30.0);
    R("ssl.mu0", 0.996);
    R("ssl.muT", 1.0);
    R("ssl.center_momentum", 0.9);
    B("ssl.centering", true);
    B("ssl.separate_patch_center", true);
    I("ssl.freeze_proto_epochs", 3);
    R("ssl.base_lr", 5e-4);
    R("ssl.min_lr", 2e-6);
    R("ssl.warmup_epochs", 5.0);
    R("ssl.wd_start", 0.04);
    R("ssl.wd_end", 0.4);
    R("ssl.clip_norm", 0.3);
    I("ssl.ref_batch", 256);
    I("ssl.epochs", 200);
    I("ssl.micro_batch", 64);
    I("ssl.accum_steps", 2);
    I("ssl.global_crops", 2);
    I("ssl.local_crops", 4);
    I("ssl.global_crop", 20);
    I("ssl.local_crop", 12);
    R("ssl.min_valid_ratio", 0.25);
    I("ssl.max_attempts", 3);
    R("ssl.mask_prob", 0.5);
    R("ssl.mask_ratio_min", 0.1);
    R("ssl.mask_ratio_max", 0.5);
    I("ssl.min_block", 4);
    R("ssl.aspect_min", 0.3);
    R("ssl.flip_h", 0.5);
    R("ssl.flip_v", 0.5);
    R("ssl.rot_prob", 0.5);

    // Stage-2 alignment.
    R("align.base_lr", 5e-5);
    R("align.min_lr", 2e-7);
    I("align.warmup_steps", 0);
    R("align.weight_decay", 0.4);
    R("align.clip_norm", 0.3);
    I("align.epochs", 12);
    I("align.micro_batch", 1);
    I("align.accum_steps", 128);
    R("align.label_smoothing", 0.03);
    I("align.bins_min", 2);
    I("align.bins_target", 8);
    I("align.bins_max", 16);
    R("align.token_dropout_max", 0.1);
    I("align.k_max", 1024);
    R("align.flip_h", 0.5);
    R("align.flip_v", 0.5);
    R("align.rot_prob", 0.5);
    R("align.holdout", 0.05);
    S("align.head_kind", "mlp");
    R("align.head_dropout", 0.1);

    // Probe evaluation.
    I("eval.folds", 5);
    I("eval.mlp_epochs", 200);
    I("eval.mlp_batch", 64);
    R("eval.mlp_lr", 1e-3);
    R("eval.mlp_wd", 1e-2);
    R("eval.mlp_dropout", 0.25);
    I("eval.linear_grid", 45);
    R("eval.linear_min", 1e-6);
    R("eval.linear_max", 1e5);
    I("eval.linear_max_iters", 500);
    R("eval.linear_tol", 1e-6);

    // Embedding diagnostics.
    R("diag.subsample_ratio", 0.8);
    I("diag.repeats", 20);
    S("diag.k_list", "5,10,30");
    I("diag.attrib_slides", 2);
    I("diag.pixels_per_patch", 8);

    // Synthetic corpus generator.
    I("synth.slides", 520);
    I("synth.grid_min", 16);
    I("synth.grid_max", 22);
    I("synth.d_patch", 16);
    I("synth.clusters", 4);
    R("synth.cluster_scale", 1.0);
    S("synth.class_counts", "3,2,4");
    R("synth.class_shift", 2.5);
    R("synth.pattern_amp", 0.0);
    I("synth.survival_tasks", 2);
    R("synth.censor_rate", 0.3);
    R("synth.noise", 0.6);
    R("synth.base_rate", 0.08);
    R("synth.risk_beta", 1.2);
    R("synth.p_two_slides", 0.23);
    R("synth.p_three_slides", 0.05);
    R("synth.label_density", 1.0);
    S("synth.magnification", "20x");
    R("synth.spacing", 224.0);

    return c;
  }

  /// Parses `key = value` lines over the defaults; "#" starts a comment.
  void parse(std::istream& in) {
    std::string line;
    int line_no = 0;
    std::map<std::string, int> seen;
    while (std::getline(in, line)) {
      ++line_no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const auto strip = [](std::string s) {
        const auto a = s.find_first_not_of(" \t\r");
        if (a == std::string::npos) return std::string{};
        const auto b = s.find_last_not_of(" \t\r");
        return s.substr(a, b - a + 1);
      };
      if (strip(line).empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos)
        throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
      const std::string key = strip(line.substr(0, eq));
      const std::string raw = strip(line.substr(eq + 1));
      auto it = values_.find(key);
      if (it == values_.end())
        throw ConfigError("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
      if (seen.count(key))
        throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key +
                          "' (first at line " + std::to_string(seen[key]) + ")");
      seen[key] = line_no;
      Value& v = it->second;
      try {
        switch (v.kind) {
          case Kind::Bool:
            if (raw == "true")
              v.b = true;
            else if (raw == "false")
              v.b = false;
            else
              throw ConfigError("expected true/false");
            break;
          case Kind::Int: {
            std::size_t used = 0;
            v.i = std::stoll(raw, &used);
            if (used != raw.size()) throw ConfigError("expected integer");
            break;
          }
          case Kind::Real: {
            std::size_t used = 0;
            v.r = std::stod(raw, &used);
            if (used != raw.size()) throw ConfigError("expected number");
            break;
          }
          case Kind::Str:
            v.s = raw;
            break;
        }
      } catch (const ConfigError&) {
        throw ConfigError("line " + std::to_string(line_no) + ": type mismatch for '" + key +
                          "' (value '" + raw + "')");
      } catch (const std::exception&) {
        throw ConfigError("line " + std::to_string(line_no) + ": type mismatch for '" + key +
                          "' (value '" + raw + "')");
      }
    }
  }

  bool get_bool(const std::string& key) const { return at(key, Kind::Bool).b; }
  long long get_int(const std::string& key) const { return at(key, Kind::Int).i; }
  double get_real(const std::string& key) const {
    const Value& v = values_.at(key);
    if (v.kind == Kind::Int) return static_cast<double>(v.i);
    if (v.kind != Kind::Real) throw ConfigError("'" + key + "' is not numeric");
    return v.r;
  }
  const std::string& get_str(const std::string& key) const { return at(key, Kind::Str).s; }

 private:
  const Value& at(const std::string& key, Kind kind) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    if (it->second.kind != kind) throw ConfigError("wrong type for '" + key + "'");
    return it->second;
  }

  std::map<std::string, Value> values_;
};

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
  return out;
}

inline enc::SlideEncoderConfig encoder_config(const Config& c) {
  enc::SlideEncoderConfig e;
  e.d_patch = static_cast<int>(c.get_int("enc.d_patch"));
  e.dim = static_cast<int>(c.get_int("enc.dim"));
  e.heads = static_cast<int>(c.get_int("enc.heads"));
  e.layers = static_cast<int>(c.get_int("enc.layers"));
  e.ffn_dim = static_cast<int>(c.get_int("enc.ffn"));
  e.registers = static_cast<int>(c.get_int("enc.registers"));
  e.mlp_dropout = c.get_real("enc.mlp_dropout");
  e.attn_dropout = c.get_real("enc.attn_dropout");
  e.stochastic_depth_max = c.get_real("enc.stochastic_depth");
  return e;
}

inline enc::ProjectionConfig projection_config(const Config& c) {
  enc::ProjectionConfig p;
  p.hidden = static_cast<int>(c.get_int("enc.proj_hidden"));
  p.bottleneck = static_cast<int>(c.get_int("enc.proj_bottleneck"));
  p.prototypes = static_cast<int>(c.get_int("enc.prototypes"));
  return p;
}

inline enc::CaseTransformerConfig case_config(const Config& c) {
  enc::CaseTransformerConfig k;
  k.layers = static_cast<int>(c.get_int("case.layers"));
  k.heads = static_cast<int>(c.get_int("case.heads"));
  k.ffn_dim = static_cast<int>(c.get_int("case.ffn"));
  k.dropout = c.get_real("case.dropout");
  k.layerscale_init = c.get_real("case.layerscale");
  k.token_init_std = c.get_real("case.token_init_std");
  return k;
}

inline ssl::SSLConfig ssl_config(const Config& c) {
  ssl::SSLConfig s;
  s.student_temp = c.get_real("ssl.student_temp");
  s.teacher_temp_start = c.get_real("ssl.teacher_temp_start");
  s.teacher_temp_end = c.get_real("ssl.teacher_temp_end");
  s.teacher_patch_temp_start = c.get_real("ssl.teacher_patch_temp_start");
  s.teacher_patch_temp_end = c.get_real("ssl.teacher_patch_temp_end");
  s.temp_warmup_epochs = c.get_real("ssl.temp_warmup_epochs");
  s.mu0 = c.get_real("ssl.mu0");
  s.muT = c.get_real("ssl.muT");
  s.center_momentum = c.get_real("ssl.center_momentum");
  s.centering = c.get_bool("ssl.centering");
  s.separate_patch_center = c.get_bool("ssl.separate_patch_center");
  s.freeze_proto_epochs = static_cast<int>(c.get_int("ssl.freeze_proto_epochs"));
  s.base_lr = c.get_real("ssl.base_lr");
  s.min_lr = c.get_real("ssl.min_lr");
  s.warmup_epochs = c.get_real("ssl.warmup_epochs");
  s.wd_start = c.get_real("ssl.wd_start");
  s.wd_end = c.get_real("ssl.wd_end");
  s.clip_norm = c.get_real("ssl.clip_norm");
  s.ref_batch = static_cast<int>(c.get_int("ssl.ref_batch"));
  s.epochs = static_cast<int>(c.get_int("ssl.epochs"));
  s.micro_batch = static_cast<int>(c.get_int("ssl.micro_batch"));
  s.accum_steps = static_cast<int>(c.get_int("ssl.accum_steps"));
  s.global_crops = static_cast<int>(c.get_int("ssl.global_crops"));
  s.local_crops = static_cast<int>(c.get_int("ssl.local_crops"));
  s.global_size = static_cast<int>(c.get_int("ssl.global_crop"));
  s.local_size = static_cast<int>(c.get_int("ssl.local_crop"));
  s.min_valid_ratio = c.get_real("ssl.min_valid_ratio");
  s.max_attempts = static_cast<int>(c.get_int("ssl.max_attempts"));
  s.mask_prob = c.get_real("ssl.mask_prob");
  s.mask_ratio_min = c.get_real("ssl.mask_ratio_min");
  s.mask_ratio_max = c.get_real("ssl.mask_ratio_max");
  s.min_block = static_cast<int>(c.get_int("ssl.min_block"));
  s.aspect_min = c.get_real("ssl.aspect_min");
  s.flip_h = c.get_real("ssl.flip_h");
  s.flip_v = c.get_real("ssl.flip_v");
  s.rot_prob = c.get_real("ssl.rot_prob");
  return s;
}

inline align::AlignConfig align_config(const Config& c) {
  align::AlignConfig a;
  a.base_lr = c.get_real("align.base_lr");
  a.min_lr = c.get_real("align.min_lr");
  a.warmup_steps = c.get_int("align.warmup_steps");
  a.weight_decay = c.get_real("align.weight_decay");
  a.clip_norm = c.get_real("align.clip_norm");
  a.epochs = static_cast<int>(c.get_int("align.epochs"));
  a.micro_batch = static_cast<int>(c.get_int("align.micro_batch"));
  a.accum_steps = static_cast<int>(c.get_int("align.accum_steps"));
  a.label_smoothing = c.get_real("align.label_smoothing");
  a.bins_min = static_cast<int>(c.get_int("align.bins_min"));
  a.bins_target = static_cast<int>(c.get_int("align.bins_target"));
  a.bins_max = static_cast<int>(c.get_int("align.bins_max"));
  a.token_dropout_max = c.get_real("align.token_dropout_max");
  a.k_max = static_cast<std::size_t>(c.get_int("align.k_max"));
  a.flip_h = c.get_real("align.flip_h");
  a.flip_v = c.get_real("align.flip_v");
  a.rot_prob = c.get_real("align.rot_prob");
  a.holdout_fraction = c.get_real("align.holdout");
  const std::string kind = c.get_str("align.head_kind");
  if (kind == "mlp")
    a.head_kind = enc::HeadKind::Mlp;
  else if (kind == "linear")
    a.head_kind = enc::HeadKind::Linear;
  else
    throw ConfigError("align.head_kind must be 'mlp' or 'linear'");
  a.head_dropout = c.get_real("align.head_dropout");
  return a;
}

inline eval::MlpProbeConfig mlp_probe_config(const Config& c, int threads = 1) {
  eval::MlpProbeConfig m;
  m.epochs = static_cast<int>(c.get_int("eval.mlp_epochs"));
  m.batch = static_cast<int>(c.get_int("eval.mlp_batch"));
  m.lr = c.get_real("eval.mlp_lr");
  m.weight_decay = c.get_real("eval.mlp_wd");
  m.dropout = c.get_real("eval.mlp_dropout");
  m.threads = threads;
  return m;
}

inline eval::LinearProbeConfig linear_probe_config(const Config& c, int threads = 1) {
  eval::LinearProbeConfig l;
  l.grid_points = static_cast<int>(c.get_int("eval.linear_grid"));
  l.strength_min = c.get_real("eval.linear_min");
  l.strength_max = c.get_real("eval.linear_max");
  l.max_iterations = static_cast<int>(c.get_int("eval.linear_max_iters"));
  l.gradient_tolerance = c.get_real("eval.linear_tol");
  l.threads = threads;
  return l;
}

}  // namespace mz::cli
