#include "cli/commands.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>

#include "flowdpt/datagen.hpp"
#include "flowdpt/evalkit.hpp"
#include "flowdpt/log.hpp"
#include "flowdpt/runtime.hpp"

namespace flowdpt::cli {
namespace {

std::string fmt(double x, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, x);
  return buf;
}

std::vector<env::TaskInstance> registry_or_throw(const RunConfig& cfg) {
  if (!std::filesystem::exists(cfg.registry)) {
    throw ConfigError("task registry " + cfg.registry.string() + " does not exist");
  }
  return env::load_registry(cfg.registry);
}

void write_resolved_config(const RunConfig& cfg, const std::string& command) {
  std::filesystem::create_directories(cfg.output_dir);
  std::ofstream f(cfg.output_dir / (command + ".config.json"));
  f << to_json(cfg).dump(2) << "\n";
}

data::Dataset train_split(data::Dataset ds) {
  data::Dataset out;
  for (auto& s : ds.shards) {
    const auto& task = s.manifest.task;
    const std::string split = task.is_object() ? task.value("split", std::string("train")) : "train";
    if (split == "train") out.shards.push_back(std::move(s));
  }
  return out;
}

bool split_selected(const RunConfig& cfg, env::Split split) {
  const std::string name = env::to_string(split);
  return std::find(cfg.eval.splits.begin(), cfg.eval.splits.end(), name) != cfg.eval.splits.end();
}

runtime::LoadedModel checkpoint_or_throw(const RunConfig& cfg) {
  if (!std::filesystem::exists(cfg.checkpoint)) {
    throw std::runtime_error("checkpoint " + cfg.checkpoint.string() + " does not exist; run train first");
  }
  return runtime::load_model(cfg.checkpoint);
}

}  // namespace

int cmd_collect(const RunConfig& cfg) {
  const auto tasks = registry_or_throw(cfg);
  write_resolved_config(cfg, "collect");
  if (tasks.empty()) {
    log_warning("registry " + cfg.registry.string() + " lists no tasks; nothing collected");
    return kExitOk;
  }
  std::filesystem::create_directories(cfg.dataset_dir);
  const Rng root = cfg.stream("collect");
  std::vector<std::string> lines(tasks.size());
  std::vector<bool> failed(tasks.size(), false);
  runtime::parallel_for(tasks.size(), cfg.jobs, [&](std::size_t i) {
    const auto& task = tasks[i];
    try {
      const data::Shard shard = data::collect_cnd(task, cfg.collect, root.stream(task.id));
      data::write_shard(cfg.dataset_dir / (task.id + ".shard"), shard);
      lines[i] = "collected " + task.id + ": " + std::to_string(shard.records.size()) + " transitions";
    } catch (const std::exception& ex) {
      failed[i] = true;
      lines[i] = std::string("collect failed for ") + task.id + ": " + ex.what();
    }
  });
  int rc = kExitOk;
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    if (failed[i]) {
      log_error(lines[i]);
      rc = kExitFailure;
    } else {
      std::printf("%s\n", lines[i].c_str());
    }
  }
  return rc;
}

int cmd_train(const RunConfig& cfg, bool resume) {
  if (!std::filesystem::is_directory(cfg.dataset_dir)) {
    throw ConfigError("dataset directory " + cfg.dataset_dir.string() + " does not exist; run collect first");
  }
  const data::Dataset ds = train_split(data::load_dataset(cfg.dataset_dir));
  if (ds.shards.empty()) throw std::runtime_error("no train-split shards in " + cfg.dataset_dir.string());
  write_resolved_config(cfg, "train");

  std::unique_ptr<runtime::Model> model;
  nd::AdamState adam;
  if (resume && std::filesystem::exists(cfg.checkpoint)) {
    runtime::LoadedModel loaded = runtime::load_model(cfg.checkpoint);
    model = std::move(loaded.model);
    adam = std::move(loaded.adam);
    log_info("resuming from step " + std::to_string(adam.step));
  } else {
    runtime::ModelConfig mc = cfg.model;
    mc.groups = runtime::groups_from_dataset(ds, mc.backbone.d_model);
    model = std::make_unique<runtime::Model>(mc, cfg.stream("init").key());
    adam = nd::AdamState(model->params());
  }
  const auto loss_csv = cfg.output_dir / "loss.csv";
  const bool append = resume && adam.step > 0;
  if (!append) std::filesystem::remove(loss_csv);

  const nlohmann::json meta = {{"trainer", cfg.train}};
  std::vector<runtime::LossRecord> pending;
  runtime::TrainHooks hooks;
  hooks.on_step = [&](const runtime::LossRecord& r) {
    pending.push_back(r);
    if (r.step % 100 == 0) log_info("step " + std::to_string(r.step) + " loss " + fmt(r.loss));
  };
  hooks.on_checkpoint = [&](std::int64_t step) {
    runtime::save_model(cfg.checkpoint, *model, &adam, meta);
    eval::write_loss_csv(loss_csv, pending, true);
    pending.clear();
    log_info("checkpoint at step " + std::to_string(step));
  };

  int rc = kExitOk;
  try {
    runtime::train(*model, adam, cfg.train, ds, hooks);
  } catch (const runtime::TrainingDiverged& ex) {
    log_error(std::string(ex.what()) + "; keeping the last good step " + std::to_string(adam.step));
    rc = kExitFailure;
  }
  runtime::save_model(cfg.checkpoint, *model, &adam, meta);
  eval::write_loss_csv(loss_csv, pending, true);

  // Re-read the whole curve for the plot so resumed runs show all steps.
  std::vector<double> xs, ys;
  std::ifstream f(loss_csv);
  std::string line;
  std::getline(f, line);
  while (std::getline(f, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    xs.push_back(std::stod(line.substr(0, comma)));
    ys.push_back(std::stod(line.substr(comma + 1)));
  }
  eval::write_line_svg(cfg.output_dir / "loss.svg", "training loss", "step", "loss", xs, ys);
  std::printf("trained to step %lld; checkpoint %s\n", static_cast<long long>(adam.step),
              cfg.checkpoint.string().c_str());
  return rc;
}

int cmd_eval(const RunConfig& cfg, runtime::Mode mode, std::optional<std::size_t> prompt_size) {
  const auto all_tasks = registry_or_throw(cfg);
  const runtime::LoadedModel loaded = checkpoint_or_throw(cfg);
  const runtime::Model& model = *loaded.model;
  write_resolved_config(cfg, "eval");

  std::vector<env::TaskInstance> tasks;
  for (const auto& t : all_tasks) {
    if (split_selected(cfg, t.split)) tasks.push_back(t);
  }
  const std::size_t n_prompt = prompt_size.value_or(cfg.eval.prompt_size);
  if (mode == runtime::Mode::online && prompt_size) {
    log_warning("online evaluation ignores --prompt-size");
  }
  if (mode == runtime::Mode::offline && n_prompt > model.max_context()) {
    throw ConfigError("prompt size " + std::to_string(n_prompt) + " exceeds the model context limit " +
                      std::to_string(model.max_context()));
  }
  if (mode == runtime::Mode::online && cfg.eval.final_window > cfg.eval.episodes) {
    throw ConfigError("eval.final_window exceeds eval.episodes");
  }

  runtime::InferenceConfig ic;
  ic.mode = mode;
  ic.episodes = cfg.eval.episodes;
  ic.flow = cfg.eval.flow;
  ic.context_len = cfg.eval.context_len;
  ic.reset_context = cfg.eval.reset_context;

  const Rng root = cfg.stream("eval");
  std::vector<eval::Baselines> base(tasks.size());
  runtime::parallel_for(tasks.size(), cfg.jobs, [&](std::size_t t) {
    base[t] = eval::task_baselines(tasks[t], cfg.eval.baseline_episodes, root.stream("baselines").stream(tasks[t].id));
  });

  const std::size_t n_seeds = cfg.eval.seeds.size();
  std::vector<std::vector<double>> returns(tasks.size() * n_seeds);
  runtime::parallel_for(returns.size(), cfg.jobs, [&](std::size_t job) {
    const auto& task = tasks[job / n_seeds];
    const std::uint64_t seed = cfg.eval.seeds[job % n_seeds];
    const Rng r = root.stream("seed", seed).stream(task.id);
    if (mode == runtime::Mode::online) {
      returns[job] = runtime::rollout_online(model, task, ic, r.stream("rollout"));
    } else {
      const auto prompt = runtime::demonstrator_prompt(task, n_prompt, r.stream("prompt"));
      returns[job] = runtime::rollout_offline(model, task, prompt, ic, r.stream("rollout"));
    }
  });

  std::vector<eval::ScoreRecord> scores;
  std::vector<eval::EpisodeReturn> episodes;
  std::map<std::string, std::vector<double>> by_split;
  for (std::size_t job = 0; job < returns.size(); ++job) {
    const std::size_t t = job / n_seeds;
    const auto& task = tasks[t];
    const std::uint64_t seed = cfg.eval.seeds[job % n_seeds];
    const auto& ret = returns[job];
    const std::size_t from = mode == runtime::Mode::online ? ret.size() - cfg.eval.final_window : 0;
    const double raw = eval::mean(std::span<const double>(ret).subspan(from));
    scores.push_back(eval::make_score(task.id, env::to_string(task.split), seed, raw, base[t].random, base[t].expert));
    by_split[scores.back().split].push_back(scores.back().normalized);
    for (std::size_t e = 0; e < ret.size(); ++e) episodes.push_back({e + 1, ret[e], seed, task.id});
  }
  eval::write_scores_csv(cfg.output_dir / "scores.csv", scores);
  eval::write_returns_csv(cfg.output_dir / "returns.csv", episodes);

  if (!returns.empty()) {
    std::vector<double> xs, ys;
    for (std::size_t e = 0; e < cfg.eval.episodes; ++e) {
      double s = 0.0;
      for (const auto& r : returns) s += r[e];
      xs.push_back(static_cast<double>(e + 1));
      ys.push_back(s / static_cast<double>(returns.size()));
    }
    eval::write_line_svg(cfg.output_dir / "returns.svg", "mean return per episode (" + runtime::to_string(mode) + ")",
                         "episode", "return", xs, ys);
  } else {
    log_warning("no tasks in the selected splits; scores.csv has only its header");
  }
  for (const auto& [split, values] : by_split) {
    std::printf("%s %s: IQM normalized score %s over %zu runs\n", runtime::to_string(mode).c_str(), split.c_str(),
                fmt(eval::iqm(values)).c_str(), values.size());
  }
  return kExitOk;
}

int cmd_analyze(const RunConfig& cfg) {
  const auto all_tasks = registry_or_throw(cfg);
  const runtime::LoadedModel loaded = checkpoint_or_throw(cfg);
  const runtime::Model& model = *loaded.model;
  write_resolved_config(cfg, "analyze");

  std::vector<env::TaskInstance> tasks;
  for (const auto& t : all_tasks) {
    if (t.split == env::Split::test) tasks.push_back(t);
  }
  if (tasks.empty()) {
    log_warning("registry has no test tasks; analyzing train tasks");
    tasks = all_tasks;
  }
  if (tasks.empty()) {
    log_warning("registry lists no tasks; nothing to analyze");
    return kExitOk;
  }
  const Rng root = cfg.stream("analyze");

  eval::SweepConfig sc;
  sc.prompt_sizes = eval::clip_sizes(cfg.analyze.prompt_sizes, model.max_context());
  sc.seeds = cfg.analyze.seeds;
  sc.episodes = cfg.analyze.episodes;
  sc.baseline_episodes = cfg.eval.baseline_episodes;
  sc.flow = cfg.eval.flow;
  sc.jobs = cfg.jobs;
  const auto cells = eval::demo_sweep(model, tasks, sc, root.stream("sweep"));
  eval::write_sweep_csv(cfg.output_dir / "sweep.csv", cells, sc.seeds);
  std::vector<double> xs, ys;
  for (std::size_t s : sc.prompt_sizes) {
    const double v = eval::sweep_iqm(cells, s);
    xs.push_back(static_cast<double>(s));
    ys.push_back(v);
    std::printf("prompt size %zu: IQM normalized score %s\n", s, fmt(v).c_str());
  }
  eval::write_line_svg(cfg.output_dir / "sweep.svg", "normalized score vs prompt size", "prompt size",
                       "IQM normalized score", xs, ys);

  const env::TaskInstance* target = &tasks.front();
  if (!cfg.analyze.task.empty()) {
    auto it = std::find_if(all_tasks.begin(), all_tasks.end(),
                           [&](const env::TaskInstance& t) { return t.id == cfg.analyze.task; });
    if (it == all_tasks.end()) throw ConfigError("analyze.task '" + cfg.analyze.task + "' is not in the registry");
    target = &*it;
  }
  std::vector<std::size_t> sizes = cfg.analyze.contraction_sizes;
  std::sort(sizes.begin(), sizes.end());
  sizes = eval::clip_sizes(sizes, model.max_context());
  Rng r_query = root.stream("query");
  const auto query = env::observe(*target, env::reset(*target, r_query));
  const auto report = eval::contraction_analysis(model, *target, query, sizes, cfg.analyze.n_samples, cfg.eval.flow,
                                                 root.stream("contraction"));
  eval::write_contraction_csv(cfg.output_dir / "contraction.csv", report);
  eval::write_contraction_svg(cfg.output_dir / "contraction.svg", report);
  for (const auto& e : report.entries) {
    std::printf("context %zu: entropy proxy %s nats\n", e.context_size, fmt(e.entropy).c_str());
  }
  return kExitOk;
}

int cmd_registry(const std::filesystem::path& out, const RegistrySpec& spec) {
  const std::string group = spec.group.empty() ? env::to_string(spec.kind) : spec.group;
  const Rng root(spec.seed);
  std::vector<env::TaskInstance> tasks;
  if (spec.kind == env::TaskKind::linear_control) {
    for (int s = 0; s < 2; ++s) {
      const env::Split split = s == 0 ? env::Split::train : env::Split::test;
      const std::size_t n = s == 0 ? spec.n_train : spec.n_test;
      Rng r = root.stream(env::to_string(split));
      for (std::size_t i = 0; i < n;) {
        // Lightly damped rotations with random input directions; draws whose
        // Riccati iteration stalls or whose gain does not stabilize are skipped.
        const double rho = r.uniform(0.9, 1.05), th = r.uniform(-0.5, 0.5);
        nd::Array A = nd::Array::matrix(2, 2, {rho * std::cos(th), -rho * std::sin(th), rho * std::sin(th),
                                               rho * std::cos(th)});
        nd::Array B = nd::Array::matrix(2, 1, {r.uniform(-1.0, 1.0), r.uniform(0.5, 1.0)});
        try {
          tasks.push_back(env::make_linear_control((s == 0 ? "lin_train_" : "lin_test_") + std::to_string(i), A, B,
                                                   nd::Array::matrix(2, 2, {1, 0, 0, 1}),
                                                   nd::Array::matrix(1, 1, {0.1}), group, split));
          ++i;
        } catch (const std::invalid_argument&) {
        } catch (const env::LqrNotConverged&) {
        }
      }
    }
  } else {
    Rng r_train = root.stream("train"), r_test = root.stream("test");
    const std::string prefix = spec.kind == env::TaskKind::goal_bandit ? "goal" : "bimodal";
    tasks = env::generate_bandit_tasks(spec.kind, spec.n_train, env::Split::train, spec.act_dim, group,
                                       prefix + "_train_", r_train);
    auto test = env::generate_bandit_tasks(spec.kind, spec.n_test, env::Split::test, spec.act_dim, group,
                                           prefix + "_test_", r_test);
    tasks.insert(tasks.end(), test.begin(), test.end());
  }
  env::save_registry(out, tasks);
  std::printf("wrote %zu tasks to %s\n", tasks.size(), out.string().c_str());
  return kExitOk;
}

}  // namespace flowdpt::cli
