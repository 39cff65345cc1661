// SPDX-License-Identifier: Apache-2.0
//
// legoflow command line: train, finetune, extract-path, cka, report.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "legoflow/legoflow.hpp"

namespace fs = std::filesystem;
using namespace legoflow;

namespace {

std::size_t thread_cap() {
  const char* env = std::getenv("LEGOFLOW_THREADS");
  if (!env || !*env) return 0;
  char* end = nullptr;
  const unsigned long v = std::strtoul(env, &end, 10);
  if (*end != '\0' || v == 0) throw ConfigError(std::string("LEGOFLOW_THREADS must be a positive integer, got '") + env + "'");
  return v;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw Error("cannot write '" + p.string() + "'");
  out << text;
}

void write_json(const fs::path& p, const nlohmann::json& j) { write_text(p, j.dump(2) + "\n"); }

MultiTaskModel<float> fresh_model(const ExperimentConfig& cfg, const std::vector<TaskSpec>& suite) {
  MultiTaskModel<float> model(cfg.model, cfg.simt.seed);
  for (const auto& t : suite) model.add_task(TaskDescriptor::of(t));
  return model;
}

ExperimentConfig config_from_checkpoint(const Checkpoint& ck, const std::string& override_path) {
  if (!override_path.empty()) return ExperimentConfig::load(override_path);
  if (ck.config_text.empty()) throw ConfigError("checkpoint carries no config; pass --config");
  return ExperimentConfig::parse(ck.config_text);
}

void write_paths(const fs::path& dir, const MultiTaskModel<float>& model) {
  fs::create_directories(dir);
  for (std::size_t t = 0; t < model.num_tasks(); ++t) {
    std::ofstream out(dir / (model.tasks()[t].desc.name + ".path"));
    write_path(out, model.path(t), model.config().units);
  }
}

// ---- train ---------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers, steps;
  std::optional<std::string> mode, routing;
  bool no_syncbn = false;
  std::string out_dir = "run";
  std::size_t checkpoint_every = 0;
  std::string resume;
  bool sequential = false;
};

int cmd_train(const TrainArgs& a) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(a.config);
  if (a.seed) {
    cfg.simt.seed = *a.seed;
    cfg.suite_seed = *a.seed;
  }
  if (a.workers) cfg.simt.num_workers = *a.workers;
  if (a.steps) cfg.simt.total_steps = *a.steps;
  if (a.mode) cfg.simt.sampling = sampling_mode_from_string(*a.mode);
  if (a.routing) cfg.simt.routing = routing_mode_from_string(*a.routing);
  if (a.no_syncbn) cfg.simt.syncbn = false;
  if (cfg.simt.warmup_steps > cfg.simt.total_steps) cfg.simt.warmup_steps = cfg.simt.total_steps;
  cfg.validate();
  const std::string effective = cfg.to_ini();

  const fs::path out(a.out_dir);
  fs::create_directories(out);
  write_text(out / "config.ini", effective);

  const auto suite = cfg.make_suite();
  MultiTaskModel<float> model = fresh_model(cfg, suite);
  std::size_t start = 0;
  if (!a.resume.empty()) {
    Checkpoint ck = load_checkpoint(a.resume);
    if (ck.config_text != effective) {
      throw ConfigError("cannot resume: the checkpoint was written with a different effective config");
    }
    model = std::move(ck.model);
    start = ck.step;
  }

  SimtConfig sc = cfg.simt;
  sc.max_threads = thread_cap();
  if (a.sequential) sc.execution = Execution::sequential;
  SimtEngine engine(model, suite, sc);
  engine.set_step(start);

  std::ofstream metrics(out / "metrics.jsonl", start > 0 ? std::ios::app : std::ios::trunc);
  double deviation = 0.0;
  std::size_t iterations = 0;
  try {
    while (engine.step() < sc.total_steps) {
      const IterationMetrics m = engine.run_iteration();
      write_jsonl(metrics, m);
      deviation += m.bn_mean_deviation;
      ++iterations;
      if (a.checkpoint_every && engine.step() % a.checkpoint_every == 0 && engine.step() < sc.total_steps) {
        save_checkpoint((out / ("checkpoint-" + std::to_string(engine.step()) + ".bin")).string(), model, engine.step(),
                        sc.seed, effective);
      }
    }
  } catch (const NonFiniteError& e) {
    metrics.flush();
    std::cerr << "error: non-finite value: " << e.what() << "\n";
    return 2;
  }
  save_checkpoint((out / "checkpoint.bin").string(), model, engine.step(), sc.seed, effective);
  write_paths(out / "paths", model);

  RunSummary s;
  s.run = out.filename().string();
  s.mode = mode_label(sc);
  s.steps = engine.step();
  for (const auto& t : suite) {
    s.val_loss[t.name] = split_loss(model, t, Split::val);
    s.paths[t.name] = model.path(model.task_index(t.name));
  }
  s.mean_bn_mean_deviation = iterations ? deviation / static_cast<double>(iterations) : 0.0;
  write_json(out / "summary.json", to_json(s));
  std::cout << "trained " << s.steps << " steps (" << s.mode << "), outputs in " << out.string() << "\n";
  for (const auto& [task, loss] : s.val_loss) std::cout << "  " << task << " val loss " << loss << "\n";
  return 0;
}

// ---- finetune ------------------------------------------------------------

struct FinetuneArgs {
  std::string checkpoint, config, path_file, out_dir = "finetune";
  bool dynamic = false;
  std::optional<std::size_t> steps;
  std::optional<std::uint64_t> seed;
};

int cmd_finetune(const FinetuneArgs& a) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  ExperimentConfig cfg = config_from_checkpoint(ck, a.config);
  if (a.steps) {
    cfg.finetune.steps = *a.steps;
    cfg.finetune.warmup_steps = std::min(cfg.finetune.warmup_steps, *a.steps);
  }
  if (a.seed) cfg.simt.seed = *a.seed;
  cfg.validate();
  const auto suite = cfg.make_suite();
  const TaskSpec task = cfg.make_finetune_task(suite);
  FinetuneOptions opt = FinetuneOptions::from(cfg.finetune_simt());

  const fs::path out(a.out_dir);
  fs::create_directories(out);
  std::ofstream metrics(out / "metrics.jsonl");
  nlohmann::json summary;
  summary["task"] = task.name;
  summary["steps"] = opt.steps;
  try {
    if (a.dynamic) {
      DynamicFinetuneResult r = dynamic_finetune(ck.model, task, opt);
      for (const auto& m : r.metrics) write_jsonl(metrics, m);
      std::ofstream p(out / (task.name + ".path"));
      write_path(p, r.path, r.model.config().units);
      save_checkpoint((out / "checkpoint.bin").string(), r.model, opt.steps, opt.seed, cfg.to_ini());
      summary["mode"] = "dynamic";
      summary["path"] = r.path.selections;
      summary["val_loss"] = r.val_loss;
      std::cout << "dynamic finetune of '" << task.name << "': val loss " << r.val_loss << ", path written to "
                << (out / (task.name + ".path")).string() << "\n";
    } else {
      std::ifstream in(a.path_file);
      if (!in) throw Error("cannot open path file '" + a.path_file + "'");
      const PathFile pf = read_path(in);
      const std::size_t L = ck.model.config().layers, N = ck.model.config().units;
      if (pf.path.layers() != L) {
        throw ValueError("path file '" + a.path_file + "' has " + std::to_string(pf.path.layers()) +
                         " layers; the checkpoint expects L=" + std::to_string(L));
      }
      if (pf.units != N) {
        throw ValueError("path file '" + a.path_file + "' declares N=" + std::to_string(pf.units) +
                         "; the checkpoint has N=" + std::to_string(N));
      }
      FixedPathFinetuneResult r = fixed_path_finetune(ck.model, pf.path, task, opt);
      for (const auto& m : r.metrics) write_jsonl(metrics, m);
      save_checkpoint((out / "checkpoint.bin").string(), r.model, opt.steps, opt.seed, cfg.to_ini());
      summary["mode"] = "fixed_path";
      summary["path"] = pf.path.selections;
      summary["val_loss"] = r.val_loss;
      std::cout << "fixed-path finetune of '" << task.name << "': val loss " << r.val_loss << "\n";
    }
  } catch (const NonFiniteError& e) {
    std::cerr << "error: non-finite value: " << e.what() << "\n";
    return 2;
  }
  write_json(out / "summary.json", summary);
  return 0;
}

// ---- extract-path --------------------------------------------------------

int cmd_extract_path(const std::string& checkpoint, const std::string& task, const std::string& out_file) {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const Path p = extract_path(ck.model, task);
  if (out_file.empty()) {
    write_path(std::cout, p, ck.model.config().units);
  } else {
    std::ofstream out(out_file);
    if (!out) throw Error("cannot write '" + out_file + "'");
    write_path(out, p, ck.model.config().units);
  }
  return 0;
}

// ---- cka -----------------------------------------------------------------

struct CkaArgs {
  std::string checkpoint_a, checkpoint_b, config, task, out_dir = "cka";
  std::size_t minibatches = 10, batch_size = 256;
  double threshold = 0.8;
};

int cmd_cka(const CkaArgs& a) {
  const Checkpoint ca = load_checkpoint(a.checkpoint_a);
  const ExperimentConfig cfg = config_from_checkpoint(ca, a.config);
  const auto suite = cfg.make_suite();
  const std::string task_name = a.task.empty() ? suite.front().name : a.task;
  const TaskSpec* task = nullptr;
  for (const auto& t : suite)
    if (t.name == task_name) task = &t;
  if (!task) throw ValueError("unknown task '" + task_name + "'");

  std::optional<Checkpoint> cb;
  if (!a.checkpoint_b.empty()) cb = load_checkpoint(a.checkpoint_b);
  const MultiTaskModel<float>& ma = ca.model;
  const MultiTaskModel<float>& mb = cb ? cb->model : ca.model;

  EpochStream stream(*task, Split::train, cfg.simt.seed, a.batch_size);
  std::vector<std::vector<FeatureMatrix>> fa, fb;
  for (std::size_t m = 0; m < a.minibatches; ++m) {
    const Batch batch = stream.next();
    fa.push_back(layer_features(ma, ma.task_index(task_name), batch, cb ? "a.layer" : "layer"));
    if (cb) fb.push_back(layer_features(mb, mb.task_index(task_name), batch, "b.layer"));
  }
  const SimilarityMatrix s = cb ? batched_cka(fa, fb) : batched_cka(fa);

  const fs::path out(a.out_dir);
  fs::create_directories(out);
  std::ofstream csv(out / "similarity.csv");
  write_similarity_csv(csv, s);
  write_json(out / "summary.json", similarity_summary(s, a.threshold));
  write_similarity_csv(std::cout, s);
  return 0;
}

// ---- report --------------------------------------------------------------

int cmd_report(const std::vector<std::string>& runs, const std::string& csv_path) {
  std::vector<RunSummary> summaries;
  for (const auto& dir : runs) {
    const fs::path p = fs::path(dir) / "summary.json";
    std::ifstream in(p);
    if (!in) throw Error("no summary.json in '" + dir + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("cannot parse '" + p.string() + "': " + e.what());
    }
    RunSummary s = run_summary_from_json(j);
    s.run = fs::path(dir).filename().string();
    summaries.push_back(std::move(s));
  }
  const ReportTable table = comparison_table(summaries);
  write_aligned(std::cout, table);
  if (!csv_path.empty()) {
    std::ofstream csv(csv_path);
    if (!csv) throw Error("cannot write '" + csv_path + "'");
    write_csv(csv, table);
  }
  for (const auto& s : summaries) {
    std::vector<std::string> names;
    std::vector<Path> paths;
    for (const auto& [task, p] : s.paths) {
      names.push_back(task);
      paths.push_back(p);
    }
    if (paths.size() < 2) continue;
    std::cout << "\npath agreement (" << s.run << ")\n";
    ReportTable m;
    m.header.push_back("task");
    m.header.insert(m.header.end(), names.begin(), names.end());
    const auto agree = path_agreement_matrix(paths);
    for (std::size_t i = 0; i < names.size(); ++i) {
      std::vector<std::string> row{names[i]};
      for (double v : agree[i]) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%.2f", v);
        row.emplace_back(buf);
      }
      m.rows.push_back(std::move(row));
    }
    write_aligned(std::cout, m);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"legoflow: multi-task lego networks trained with SIMT"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train on a task suite");
  t->add_option("--config", train.config, "Experiment config (INI)")->check(CLI::ExistingFile);
  t->add_option("--seed", train.seed, "Seed for data, initialization and sampling");
  t->add_option("--workers", train.workers, "Number of virtual workers");
  t->add_option("--mode", train.mode, "Task sampling: simt or per_batch")->check(CLI::IsMember({"simt", "per_batch"}));
  t->add_flag("--no-syncbn", train.no_syncbn, "Normalize with each worker's local BN statistics");
  t->add_option("--routing", train.routing, "Routing: soft or hard")->check(CLI::IsMember({"soft", "hard"}));
  t->add_option("--steps", train.steps, "Total training steps");
  t->add_option("--out-dir", train.out_dir, "Output directory");
  t->add_option("--checkpoint-every", train.checkpoint_every, "Also checkpoint every N steps");
  t->add_option("--resume", train.resume, "Resume from a checkpoint written with the same config")->check(CLI::ExistingFile);
  t->add_flag("--sequential", train.sequential, "Run workers one after another instead of on threads");

  FinetuneArgs ft;
  auto* f = app.add_subcommand("finetune", "Transfer a checkpoint to the configured new task");
  f->add_option("--checkpoint", ft.checkpoint, "Pre-trained checkpoint")->required()->check(CLI::ExistingFile);
  f->add_option("--config", ft.config, "Config overriding the one stored in the checkpoint")->check(CLI::ExistingFile);
  auto* dyn = f->add_flag("--dynamic", ft.dynamic, "Learn a new route for the task");
  auto* pth = f->add_option("--path", ft.path_file, "Train a plain network on this path file");
  dyn->excludes(pth);
  f->add_option("--steps", ft.steps, "Finetuning steps");
  f->add_option("--seed", ft.seed, "Sampling seed");
  f->add_option("--out-dir", ft.out_dir, "Output directory");

  std::string ep_ckpt, ep_task, ep_out;
  auto* e = app.add_subcommand("extract-path", "Write a task's argmax path");
  e->add_option("--checkpoint", ep_ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  e->add_option("--task", ep_task, "Task name")->required();
  e->add_option("--out", ep_out, "Output file (default: stdout)");

  CkaArgs ck;
  auto* c = app.add_subcommand("cka", "Layer-by-layer CKA similarity");
  c->add_option("--checkpoint", ck.checkpoint_a, "Checkpoint")->required()->check(CLI::ExistingFile);
  c->add_option("--against", ck.checkpoint_b, "Second checkpoint for cross-model similarity")->check(CLI::ExistingFile);
  c->add_option("--config", ck.config, "Config overriding the one stored in the checkpoint")->check(CLI::ExistingFile);
  c->add_option("--task", ck.task, "Task whose data and route are used (default: first task)");
  c->add_option("--minibatches", ck.minibatches, "Number of minibatches")->check(CLI::PositiveNumber);
  c->add_option("--batch-size", ck.batch_size, "Examples per minibatch")->check(CLI::PositiveNumber);
  c->add_option("--threshold", ck.threshold, "Block-structure threshold");
  c->add_option("--out-dir", ck.out_dir, "Output directory");

  std::vector<std::string> report_runs;
  std::string report_csv;
  auto* r = app.add_subcommand("report", "Compare finished training runs");
  r->add_option("runs", report_runs, "Run directories")->required()->check(CLI::ExistingDirectory);
  r->add_option("--csv", report_csv, "Also write the table as CSV");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*t) return cmd_train(train);
    if (*f) {
      if (!ft.dynamic && ft.path_file.empty()) throw ConfigError("finetune needs --dynamic or --path <file>");
      return cmd_finetune(ft);
    }
    if (*e) return cmd_extract_path(ep_ckpt, ep_task, ep_out);
    if (*c) return cmd_cka(ck);
    if (*r) return cmd_report(report_runs, report_csv);
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return 1;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return 1;
  }
  return 0;
}
