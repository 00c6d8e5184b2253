#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mz/align.hpp"
#include "mz/checkpoint.hpp"
#include "mz/config.hpp"
#include "mz/diagnostics.hpp"
#include "mz/eval.hpp"
#include "mz/manifest.hpp"
#include "mz/ssl.hpp"
#include "mz/synth.hpp"

namespace mz::cli {

namespace fs = std::filesystem;

inline Config load_config(const std::string& path) {
  Config c = Config::defaults();
  if (path.empty()) return c;
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  c.parse(in);
  return c;
}

struct Corpus {
  std::vector<align::TaskSpec> tasks;
  std::vector<align::CaseRecord> cases;
  std::vector<FeatureGrid> grids;              // unique grids, load order
  std::map<std::string, std::size_t> grid_of;  // file name -> index
  std::vector<align::ResolvedCase> resolved;
};

inline Corpus load_corpus(const fs::path& data_dir, bool need_grids = true) {
  Corpus corpus;
  {
    std::ifstream in(data_dir / "tasks.txt");
    if (!in) throw align::ManifestError("cannot open " + (data_dir / "tasks.txt").string());
    corpus.tasks = align::parse_tasks(in);
  }
  {
    std::ifstream in(data_dir / "cases.txt");
    if (!in) throw align::ManifestError("cannot open " + (data_dir / "cases.txt").string());
    corpus.cases = align::parse_cases(in);
  }
  align::check_labels(corpus.cases, corpus.tasks);
  if (!need_grids) return corpus;

  for (const auto& c : corpus.cases)
    for (const auto& file : c.slide_files)
      if (!corpus.grid_of.count(file)) {
        std::ifstream in(data_dir / file, std::ios::binary);
        if (!in) throw GridError(GridErrorKind::Truncated,
                                 "cannot open grid file " + (data_dir / file).string());
        corpus.grid_of[file] = corpus.grids.size();
        corpus.grids.push_back(read_grid(in));
      }
  for (const auto& c : corpus.cases) {
    align::ResolvedCase rc;
    rc.id = c.id;
    rc.labels = c.labels;
    for (const auto& file : c.slide_files) rc.grids.push_back(&corpus.grids[corpus.grid_of[file]]);
    corpus.resolved.push_back(std::move(rc));
  }
  return corpus;
}

inline void check_d_patch(const Corpus& corpus, const enc::SlideEncoderConfig& cfg) {
  for (const auto& g : corpus.grids)
    if (g.d_patch != cfg.d_patch)
      throw ConfigError("enc.d_patch = " + std::to_string(cfg.d_patch) +
                        " but grids carry d_patch = " + std::to_string(g.d_patch));
}

inline void write_text_atomic(const fs::path& path, const std::string& text) {
  nn::write_file_atomic(path, [&](std::ostream& out) { out << text; });
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline int cmd_synth(const std::string& spec_path, const fs::path& out_dir, std::uint64_t seed) {
  Config config = load_config(spec_path);
  SynthSpec spec = synth_spec(config);
  SynthOutput data = synth_dataset(spec, seed);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < data.grids.size(); ++i) {
    nn::write_file_atomic(out_dir / data.grid_names[i],
                          [&](std::ostream& out) { write_grid(data.grids[i], out); });
  }
  {
    std::ostringstream buf;
    align::write_tasks(buf, data.tasks);
    write_text_atomic(out_dir / "tasks.txt", buf.str());
  }
  {
    std::ostringstream buf;
    align::write_cases(buf, data.cases);
    write_text_atomic(out_dir / "cases.txt", buf.str());
  }
  std::cout << "synth: wrote " << data.grids.size() << " grids, " << data.cases.size()
            << " cases, " << data.tasks.size() << " tasks to " << out_dir.string() << "\n";
  return 0;
}

inline int cmd_pretrain(const std::string& config_path, const fs::path& data_dir,
                        const fs::path& out_dir, std::uint64_t seed, int threads) {
  Config config = load_config(config_path);
  Corpus corpus = load_corpus(data_dir);
  auto enc_cfg = encoder_config(config);
  check_d_patch(corpus, enc_cfg);
  auto proj_cfg = projection_config(config);
  auto cfg = ssl_config(config);

  ssl::Trainer trainer(&corpus.grids, cfg, enc_cfg, proj_cfg, seed, threads);
  fs::create_directories(out_dir);
  std::ostringstream metrics;
  metrics << "# step, L_cls, L_mim, lr, wd, mu, teacher_entropy\n";
  const long long total = trainer.total_steps();
  for (long long s = 0; s < total; ++s) {
    auto m = trainer.step();
    metrics << ssl::metrics_line(m) << '\n';
  }
  write_text_atomic(out_dir / "metrics.txt", metrics.str());

  std::map<std::string, double> clocks{{"step", static_cast<double>(total)},
                                       {"epoch", static_cast<double>(cfg.epochs)}};
  nn::save_checkpoint_file(out_dir / "teacher.mzck",
                           nn::checkpoint_records(trainer.teacher().params, nullptr, clocks));
  nn::save_checkpoint_file(
      out_dir / "student.mzck",
      nn::checkpoint_records(trainer.student(), &trainer.opt_state(), clocks));
  std::cout << "pretrain: " << total << " steps done, checkpoints in " << out_dir.string()
            << "\n";
  return 0;
}

inline int cmd_align(const std::string& config_path, const fs::path& data_dir,
                     const fs::path& init_path, const fs::path& out_dir, std::uint64_t seed,
                     int threads) {
  Config config = load_config(config_path);
  Corpus corpus = load_corpus(data_dir);
  auto enc_cfg = encoder_config(config);
  check_d_patch(corpus, enc_cfg);
  auto teacher = nn::params_from_records(nn::load_checkpoint_file(init_path));
  align::Stage2Trainer trainer(corpus.resolved, corpus.tasks, teacher, enc_cfg,
                               case_config(config), align_config(config), seed, threads);

  fs::create_directories(out_dir);
  std::ostringstream metrics;
  metrics << "# epoch, train_loss, selection_score\n";
  std::ostringstream validation;
  const int epochs = static_cast<int>(config.get_int("align.epochs"));
  for (int e = 0; e < epochs; ++e) {
    auto report = trainer.run_epoch();
    metrics << report.epoch << ", " << report.train_loss << ", " << report.selection_score
            << '\n';
    validation.str("");
    validation << "# task, score (weighted F1 for classification, -mean NLL for survival)\n";
    for (const auto& [task, score] : report.task_scores)
      validation << task << ", " << score << '\n';
  }
  write_text_atomic(out_dir / "metrics.txt", metrics.str());
  write_text_atomic(out_dir / "validation.txt", validation.str());
  std::map<std::string, double> clocks{{"step", static_cast<double>(trainer.total_steps())},
                                       {"epoch", static_cast<double>(epochs)}};
  nn::save_checkpoint_file(out_dir / "model.mzck",
                           nn::checkpoint_records(trainer.best_params(), nullptr, clocks));
  std::cout << "align: " << epochs << " epochs done, model in " << out_dir.string() << "\n";
  return 0;
}

inline int cmd_embed(const std::string& config_path, const fs::path& data_dir,
                     const fs::path& init_path, const fs::path& out_path, std::uint64_t seed,
                     int threads) {
  Config config = load_config(config_path);
  Corpus corpus = load_corpus(data_dir);
  auto enc_cfg = encoder_config(config);
  check_d_patch(corpus, enc_cfg);
  auto params = nn::params_from_records(nn::load_checkpoint_file(init_path));
  align::AlignConfig acfg = align_config(config);

  // The trainer only embeds here; checkpointed case/head parameters replace
  // the fresh initialization when present.
  align::Stage2Trainer embedder(corpus.resolved, corpus.tasks, params, enc_cfg,
                                case_config(config), acfg, seed, threads);
  embedder.load_params(params);

  std::map<std::string, nn::Tensor> records;
  for (const auto& rc : corpus.resolved) records["emb/" + rc.id] = embedder.embed_case(rc);
  nn::save_checkpoint_file(out_path, records);
  std::cout << "embed: wrote " << records.size() << " case embeddings to " << out_path.string()
            << "\n";
  return 0;
}

inline int cmd_probe(const std::string& config_path, const fs::path& embeddings_path,
                     const fs::path& labels_path, std::string tasks_path,
                     const std::string& protocol, const fs::path& out_dir, std::uint64_t seed,
                     int threads) {
  Config config = load_config(config_path);
  if (tasks_path.empty()) tasks_path = (labels_path.parent_path() / "tasks.txt").string();
  std::vector<align::TaskSpec> tasks;
  {
    std::ifstream in(tasks_path);
    if (!in) throw align::ManifestError("cannot open " + tasks_path);
    tasks = align::parse_tasks(in);
  }
  std::vector<align::CaseRecord> cases;
  {
    std::ifstream in(labels_path);
    if (!in) throw align::ManifestError("cannot open " + labels_path.string());
    cases = align::parse_cases(in);
  }
  auto records = nn::load_checkpoint_file(embeddings_path);

  fs::create_directories(out_dir);
  std::ostringstream table, csv;
  table << std::left;
  {
    char head[128];
    std::snprintf(head, sizeof(head), "%-12s %-22s %-22s %-22s\n", "task", "weighted_f1",
                  "weighted_auc", "balanced_acc");
    table << head;
  }

  const int folds = static_cast<int>(config.get_int("eval.folds"));
  for (const auto& task : tasks) {
    if (task.kind != align::TaskKind::Classification) continue;
    std::vector<std::vector<double>> features;
    std::vector<int> labels;
    std::vector<eval::FoldItem> items;
    for (const auto& c : cases) {
      auto rec = records.find("emb/" + c.id);
      if (rec == records.end()) continue;
      for (const auto& l : c.labels) {
        if (l.task_id != task.id) continue;
        features.push_back(rec->second.v);
        labels.push_back(l.class_index);
        items.push_back({c.id, c.id, l.class_index});
      }
    }
    if (items.size() < static_cast<std::size_t>(folds)) continue;
    RngStream rng(seed);
    RngStream fold_rng = rng.child("folds").child(task.id);
    auto plan = eval::make_folds(items, folds, fold_rng);
    eval::MetricReport report;
    if (protocol == "mlp") {
      RngStream prng = rng.child("probe").child(task.id);
      report = eval::mlp_probe(features, labels, plan, mlp_probe_config(config, threads), prng);
    } else if (protocol == "linear") {
      report = eval::linear_probe(features, labels, plan, linear_probe_config(config, threads));
    } else {
      throw ConfigError("unknown probe protocol '" + protocol + "'");
    }

    char row[256];
    std::snprintf(row, sizeof(row), "%-12s %.4f +/- %.4f      %.4f +/- %.4f      %.4f +/- %.4f\n",
                  task.id.c_str(), report.mean_f1(), report.std_f1(), report.mean_auc(),
                  report.std_auc(), report.mean_bal(), report.std_bal());
    table << row;
    auto csv_line = [&](const char* metric, double mean, double stddev, auto getter) {
      csv << task.id << ", " << metric << ", " << mean << ", " << stddev;
      for (const auto& fold : report.folds) csv << ", " << getter(fold);
      csv << '\n';
    };
    csv_line("weighted_f1", report.mean_f1(), report.std_f1(),
             [](const eval::MetricEntry& e) { return e.weighted_f1; });
    csv_line("weighted_auc", report.mean_auc(), report.std_auc(),
             [](const eval::MetricEntry& e) { return e.weighted_auc; });
    csv_line("balanced_acc", report.mean_bal(), report.std_bal(),
             [](const eval::MetricEntry& e) { return e.balanced_accuracy; });
    if (!report.converged) csv << task.id << ", convergence_flag, 0, 0\n";
  }
  write_text_atomic(out_dir / "report.txt", table.str());
  write_text_atomic(out_dir / "report.csv", csv.str());
  std::cout << table.str();
  return 0;
}

inline int cmd_diagnose(const std::string& config_path, const fs::path& embeddings_path,
                        const fs::path& out_dir, const std::string& init_path,
                        const std::string& data_dir, std::uint64_t seed, int threads) {
  Config config = load_config(config_path);
  auto records = nn::load_checkpoint_file(embeddings_path);
  std::vector<std::vector<double>> rows;
  for (const auto& [name, t] : records)
    if (name.rfind("emb/", 0) == 0) rows.push_back(t.v);
  if (rows.size() < 2) throw diag::DiagError("diagnose: need at least 2 embeddings");

  fs::create_directories(out_dir);
  {
    auto report = diag::pca_compactness(rows);
    std::ostringstream csv;
    csv << "threshold,rank\n";
    for (const auto& [tau, rank] : report.rank_at_threshold) csv << tau << ',' << rank << '\n';
    write_text_atomic(out_dir / "compactness.csv", csv.str());
  }
  {
    auto k_list = parse_int_list(config.get_str("diag.k_list"));
    const double rho = config.get_real("diag.subsample_ratio");
    const int repeats = static_cast<int>(config.get_int("diag.repeats"));
    // Skip k values the corpus cannot support.
    std::vector<int> usable;
    for (int k : k_list)
      if (rho * rows.size() > k + 1) usable.push_back(k);
    std::ostringstream csv;
    csv << "k,mean,std\n";
    if (!usable.empty()) {
      RngStream rng(seed);
      RngStream srng = rng.child("stability");
      auto curve = diag::neighborhood_stability(rows, usable, rho, repeats, srng, threads);
      for (const auto& pt : curve) csv << pt.k << ',' << pt.mean << ',' << pt.stddev << '\n';
    }
    write_text_atomic(out_dir / "stability.csv", csv.str());
  }

  if (!init_path.empty() && !data_dir.empty()) {
    Corpus corpus = load_corpus(data_dir);
    auto enc_cfg = encoder_config(config);
    check_d_patch(corpus, enc_cfg);
    auto params = nn::params_from_records(nn::load_checkpoint_file(init_path));
    const int n_attrib = static_cast<int>(config.get_int("diag.attrib_slides"));
    const int ppx = static_cast<int>(config.get_int("diag.pixels_per_patch"));
    int done = 0;
    for (const auto& [file, idx] : corpus.grid_of) {
      if (done >= n_attrib) break;
      auto map = diag::gradxinput_map(corpus.grids[idx], params, enc_cfg);
      const std::string stem = fs::path(file).stem().string();
      nn::write_file_atomic(out_dir / ("attrib_" + stem + ".pgm"), [&](std::ostream& out) {
        diag::write_attribution_pgm(out, map, ppx);
      });
      nn::write_file_atomic(out_dir / ("attrib_" + stem + ".csv"), [&](std::ostream& out) {
        diag::write_attribution_csv(out, map);
      });
      ++done;
    }
  }
  std::cout << "diagnose: reports in " << out_dir.string() << "\n";
  return 0;
}

/// Command-line entry point shared by the binary and the tests. Returns the
/// process exit status; usage errors exit with 2.
inline int run_command(std::vector<std::string> args) {
  CLI::App app{"patient-level representation learning on patch-feature grids"};
  app.require_subcommand(1);

  std::string config_path, spec_path, protocol = "mlp", init_path, tasks_path, data_str;
  std::string out_str, embeddings_str, labels_str;
  std::uint64_t seed = 0;
  int threads = 1;

  auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
  synth->add_option("--spec", spec_path, "generator config file");
  synth->add_option("--out", out_str, "output directory")->required();
  synth->add_option("--seed", seed, "random seed");
  synth->add_option("--threads", threads, "worker threads");

  auto* pretrain = app.add_subcommand("pretrain", "stage-1 masked self-distillation");
  pretrain->add_option("--config", config_path, "run config file");
  pretrain->add_option("--data", data_str, "corpus directory")->required();
  pretrain->add_option("--out", out_str, "checkpoint directory")->required();
  pretrain->add_option("--seed", seed, "random seed");
  pretrain->add_option("--threads", threads, "worker threads");

  auto* align_cmd = app.add_subcommand("align", "stage-2 patient-aware alignment");
  align_cmd->add_option("--config", config_path, "run config file");
  align_cmd->add_option("--data", data_str, "corpus directory")->required();
  align_cmd->add_option("--init", init_path, "stage-1 teacher checkpoint")->required();
  align_cmd->add_option("--out", out_str, "output directory")->required();
  align_cmd->add_option("--seed", seed, "random seed");
  align_cmd->add_option("--threads", threads, "worker threads");

  auto* embed = app.add_subcommand("embed", "export case embeddings");
  embed->add_option("--config", config_path, "run config file");
  embed->add_option("--data", data_str, "corpus directory")->required();
  embed->add_option("--init", init_path, "model checkpoint")->required();
  embed->add_option("--out", out_str, "output embeddings file")->required();
  embed->add_option("--seed", seed, "random seed");
  embed->add_option("--threads", threads, "worker threads");

  auto* probe = app.add_subcommand("probe", "frozen-feature probe evaluation");
  probe->add_option("--config", config_path, "run config file");
  probe->add_option("--embeddings", embeddings_str, "embeddings file")->required();
  probe->add_option("--labels", labels_str, "case manifest with labels")->required();
  probe->add_option("--tasks", tasks_path, "task manifest (default: tasks.txt next to labels)");
  probe->add_option("--protocol", protocol, "mlp or linear");
  probe->add_option("--out", out_str, "report directory")->required();
  probe->add_option("--seed", seed, "random seed");
  probe->add_option("--threads", threads, "worker threads");

  auto* diagnose = app.add_subcommand("diagnose", "embedding geometry and attribution maps");
  diagnose->add_option("--config", config_path, "run config file");
  diagnose->add_option("--embeddings", embeddings_str, "embeddings file")->required();
  diagnose->add_option("--out", out_str, "output directory")->required();
  diagnose->add_option("--init", init_path, "model checkpoint (for attribution)");
  diagnose->add_option("--data", data_str, "corpus directory (for attribution)");
  diagnose->add_option("--seed", seed, "random seed");
  diagnose->add_option("--threads", threads, "worker threads");

  std::vector<const char*> argv;
  argv.push_back("mz");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help();
    return 2;
  }

  try {
    if (synth->parsed()) return cmd_synth(spec_path, out_str, seed);
    if (pretrain->parsed()) return cmd_pretrain(config_path, data_str, out_str, seed, threads);
    if (align_cmd->parsed())
      return cmd_align(config_path, data_str, init_path, out_str, seed, threads);
    if (embed->parsed())
      return cmd_embed(config_path, data_str, init_path, out_str, seed, threads);
    if (probe->parsed())
      return cmd_probe(config_path, embeddings_str, labels_str, tasks_path, protocol, out_str,
                       seed, threads);
    if (diagnose->parsed())
      return cmd_diagnose(config_path, embeddings_str, out_str, init_path, data_str, seed,
                          threads);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace mz::cli
