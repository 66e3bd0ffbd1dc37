// SPDX-License-Identifier: Apache-2.0
#include "dimple/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>

#include <CLI11.hpp>

#include "dimple/config.hpp"
#include "dimple/errors.hpp"
#include "dimple/gradcheck.hpp"
#include "dimple/serialize.hpp"

namespace dimple {

namespace {

namespace fs = std::filesystem;

constexpr const char* kResolvedConfig = "resolved_config.cfg";

struct CommonOptions {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = ".";
  std::optional<std::uint64_t> seed;
  bool paper_regime = false;
  std::string data_path;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_data) {
  cmd->add_option("--config", o.config_path, "Configuration file ([task], [encoder], [loss], [train] sections)");
  cmd->add_option("--set", o.overrides, "Override a key: section.key=value (repeatable)");
  cmd->add_option("--out", o.out_dir, "Output directory, created if absent")->capture_default_str();
  cmd->add_option("--seed", o.seed, "Root seed; overrides train.seed");
  cmd->add_flag("--paper-regime", o.paper_regime, "16 shots per class, batch 4, 5 epochs, lr 0.0035");
  if (with_data) cmd->add_option("--data", o.data_path, "Dataset file from gen-data; generated from the config if omitted");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw IoError("write to '" + path.string() + "' failed");
}

struct Prepared {
  ExperimentConfig cfg;
  fs::path out;
};

Prepared prepare(const CommonOptions& o) {
  Prepared p;
  if (!o.config_path.empty()) p.cfg = load_config(o.config_path);
  for (const auto& s : o.overrides) apply_override(p.cfg, s);
  if (o.seed) p.cfg.train.seed = *o.seed;
  if (o.paper_regime) p.cfg.paper_regime = true;
  p.cfg.resolve();
  p.out = o.out_dir;
  std::error_code ec;
  fs::create_directories(p.out, ec);
  if (ec) throw IoError("cannot create output directory '" + p.out.string() + "': " + ec.message());
  return p;
}

void echo_config(const Prepared& p) { write_text(p.out / kResolvedConfig, format_config(p.cfg)); }

SyntheticTask obtain_task(Prepared& p, const CommonOptions& o) {
  if (o.data_path.empty()) return generate(p.cfg.task);
  SyntheticTask task = load_dataset(o.data_path);
  const std::uint64_t seed = p.cfg.task.seed;
  p.cfg.task = task.spec;
  p.cfg.resolve();
  p.cfg.task.seed = seed;
  return task;
}

void print_metrics(std::ostream& out, const RunMetrics& m) {
  out << "base_acc " << format_double(m.base_acc) << "\nnovel_acc " << format_double(m.novel_acc) << "\nhm "
      << format_double(m.hm) << "\navg_group_acc " << format_double(m.avg_group_acc) << "\nworst_group_acc "
      << format_double(m.worst_group_acc) << '\n';
  for (const auto& w : m.warnings) out << "warning: " << w << '\n';
}

int cmd_gen_data(const CommonOptions& o, std::ostream& out) {
  Prepared p = prepare(o);
  echo_config(p);
  SyntheticTask task = generate(p.cfg.task);
  const fs::path path = p.out / "dataset.bin";
  save_dataset(task, path.string());
  out << "wrote " << path.string() << " (train " << task.train.size() << ", test_id " << task.test_id.size()
      << ", test_shift " << task.test_shift.size() << ")\n";
  return kExitOk;
}

int cmd_train(const CommonOptions& o, std::ostream& out) {
  Prepared p = prepare(o);
  SyntheticTask task = obtain_task(p, o);
  echo_config(p);
  RunMetrics metrics;
  Model model = train(p.cfg.train, task, metrics);
  evaluate(model, task, metrics);
  save_checkpoint(model, (p.out / "checkpoint.bin").string());
  write_run_json((p.out / "run.json").string(), p.cfg.train, task.spec, metrics);
  write_steps_csv((p.out / "steps.csv").string(), metrics);
  for (const auto& e : metrics.epochs) {
    out << "epoch " << e.epoch << " ce_u " << format_double(e.ce) << " sp_r " << format_double(e.spurious) << " cmi "
        << format_double(e.cmi) << " total " << format_double(e.total) << '\n';
  }
  print_metrics(out, metrics);
  return kExitOk;
}

int cmd_eval(const CommonOptions& o, const std::string& checkpoint, std::ostream& out) {
  Prepared p = prepare(o);
  SyntheticTask task = obtain_task(p, o);
  echo_config(p);
  Model model = load_checkpoint(checkpoint);
  RunMetrics metrics;
  evaluate(model, task, metrics);
  nlohmann::json j = {{"checkpoint", checkpoint}, {"task", to_json(task.spec)}, {"metrics", to_json(metrics)}};
  write_text(p.out / "eval.json", j.dump(2) + "\n");
  print_metrics(out, metrics);
  return kExitOk;
}

int cmd_gridsearch(const CommonOptions& o, const GridRanges& ranges, std::size_t threads, std::ostream& out) {
  Prepared p = prepare(o);
  SyntheticTask task = obtain_task(p, o);
  echo_config(p);
  auto rows = gridsearch(p.cfg.train, task, ranges, threads ? threads : eval_threads());
  const fs::path path = p.out / "grid.csv";
  write_grid_csv(path.string(), rows);
  std::size_t ok = 0;
  for (const auto& r : rows) ok += r.status == "ok";
  out << "wrote " << path.string() << " (" << rows.size() << " cells, " << ok << " ran)\n";
  for (const auto& r : rows)
    if (r.status.rfind("diverged", 0) == 0) out << "warning: cell alpha=" << r.alpha << " beta=" << r.beta << ' ' << r.status << '\n';
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& out_dir, std::ostream& out, std::ostream& err) {
  auto reports = run_gradcheck(seed);
  bool ok = true;
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : reports) {
    out << r.label << (r.passed ? " pass" : " FAIL") << '\n';
    for (const auto& [group, e] : r.group_worst) out << "  " << group << " max_rel_err " << format_double(e) << '\n';
    if (!r.passed) {
      ok = false;
      for (const auto& t : r.tensors)
        if (!(t.max_rel_error < r.threshold)) err << r.label << ": tensor " << t.name << " rel err " << format_double(t.max_rel_error) << '\n';
    }
    j.push_back({{"objective", r.label}, {"passed", r.passed}, {"groups", r.group_worst},
                 {"worst_tensor", r.worst_tensor}, {"worst_error", r.worst_error}});
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text(fs::path(out_dir) / "gradcheck.json", j.dump(2) + "\n");
  }
  return ok ? kExitOk : kExitError;
}

int cmd_export(const CommonOptions& o, const std::string& checkpoint, const std::string& split, std::ostream& out) {
  Prepared p = prepare(o);
  SyntheticTask task = obtain_task(p, o);
  echo_config(p);
  Model model = load_checkpoint(checkpoint);
  const Environment env = parse_environment(split);
  const LabeledBatch& batch = env == Environment::train ? task.train : env == Environment::test_id ? task.test_id : task.test_shift;
  std::vector<int> classes(task.spec.num_classes);
  std::iota(classes.begin(), classes.end(), 0);
  const fs::path path = p.out / "embeddings.csv";
  export_embeddings(model, batch, classes, path.string());
  out << "wrote " << path.string() << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Disentangled multi-modal prompt learning on synthetic tasks"};
  app.require_subcommand(1);

  CommonOptions gen_opts, train_opts, eval_opts, grid_opts, export_opts;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  add_common(gen, gen_opts, false);

  auto* tr = app.add_subcommand("train", "Train a model, evaluate it, and write run.json, steps.csv and checkpoint.bin");
  add_common(tr, train_opts, true);

  std::string eval_ckpt;
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint and write eval.json");
  add_common(ev, eval_opts, true);
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint written by train")->required();

  GridRanges ranges{{0.1, 0.5, 1.0, 2.0}, {0.1, 0.5, 1.0, 2.0}, {}, {}};
  std::size_t grid_threads = 0;
  auto* gs = app.add_subcommand("gridsearch", "Train and evaluate every cell of a hyperparameter grid; write grid.csv");
  add_common(gs, grid_opts, true);
  gs->add_option("--alpha", ranges.alpha, "Spurious-term weights")->delimiter(',')->capture_default_str();
  gs->add_option("--beta", ranges.beta, "Independence-term weights")->delimiter(',')->capture_default_str();
  gs->add_option("--prompt-len", ranges.prompt_len, "Prompt lengths (default: config value)")->delimiter(',');
  gs->add_option("--prompt-depth", ranges.prompt_depth, "Prompt depths (default: config value)")->delimiter(',');
  gs->add_option("--threads", grid_threads, "Parallel cells (default: DIMPLE_THREADS or all cores)");

  std::uint64_t gc_seed = 0;
  std::string gc_out;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic gradients with finite differences on a micro model");
  gc->add_option("--seed", gc_seed, "Seed for the micro model")->capture_default_str();
  gc->add_option("--out", gc_out, "Directory for gradcheck.json");

  std::string export_ckpt, export_split = "test_id";
  auto* ex = app.add_subcommand("export-embeddings", "Write invariant and spurious embeddings to embeddings.csv");
  add_common(ex, export_opts, true);
  ex->add_option("--checkpoint", export_ckpt, "Checkpoint written by train")->required();
  ex->add_option("--split", export_split, "train, test_id or test_shift")->capture_default_str();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n' << "run with --help for usage\n";
    return kExitError;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_opts, out);
    if (tr->parsed()) return cmd_train(train_opts, out);
    if (ev->parsed()) return cmd_eval(eval_opts, eval_ckpt, out);
    if (gs->parsed()) return cmd_gridsearch(grid_opts, ranges, grid_threads, out);
    if (gc->parsed()) return cmd_gradcheck(gc_seed, gc_out, out, err);
    if (ex->parsed()) return cmd_export(export_opts, export_ckpt, export_split, out);
  } catch (const DivergedRunError& e) {
    err << "diverged: " << e.what() << '\n';
    return kExitDiverged;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitError;
  }
  return kExitError;
}

int run_cli(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run_cli(args, std::cout, std::cerr);
}

}  // namespace dimple
