#include "cli/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>

namespace flowdpt::cli {
namespace {

using nlohmann::json;

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError("config section '" + where + "' must be an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

std::filesystem::path resolve(const std::filesystem::path& p, const std::filesystem::path& base) {
  if (p.empty() || p.is_absolute()) return p;
  return (base / p).lexically_normal();
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set expects key=value, got '" + assignment + "'");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("--set: empty path component in '" + key + "'");
    if (!node->is_object()) {
      if (!node->is_null()) throw ConfigError("--set: '" + key + "' descends into a non-object");
      *node = json::object();
    }
    if (dot == std::string::npos) {
      (*node)[part] = std::move(value);
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

RunConfig parse_run_config(const json& doc, const std::filesystem::path& base_dir) {
  RunConfig cfg;
  try {
    check_keys(doc, {"registry", "dataset_dir", "checkpoint", "output_dir", "seed", "jobs", "collect",
                     "model", "train", "eval", "analyze"},
               "");
    std::string registry = "registry.json", dataset, checkpoint, output = "out";
    read(doc, "registry", registry);
    read(doc, "dataset_dir", dataset);
    read(doc, "checkpoint", checkpoint);
    read(doc, "output_dir", output);
    read(doc, "seed", cfg.seed);
    read(doc, "jobs", cfg.jobs);
    if (cfg.jobs == 0) throw ConfigError("jobs must be at least 1");
    if (const char* env = std::getenv("FLOWDPT_OUT"); env && *env) output = env;

    cfg.registry = resolve(registry, base_dir);
    cfg.output_dir = resolve(output, base_dir);
    cfg.dataset_dir = dataset.empty() ? cfg.output_dir / "data" : resolve(dataset, base_dir);
    cfg.checkpoint =
        checkpoint.empty() ? cfg.output_dir / "model" / "checkpoint.json" : resolve(checkpoint, base_dir);

    if (doc.contains("collect")) {
      const json& c = doc.at("collect");
      check_keys(c, {"noise_levels", "episodes_per_level"}, "collect");
      cfg.collect = c.get<data::NoiseSchedule>();
    }
    cfg.collect.validate();

    if (doc.contains("model")) {
      const json& m = doc.at("model");
      check_keys(m, {"n_layers", "n_heads", "d_model", "d_ff", "max_context", "activation", "head", "d_gamma",
                     "f_min", "f_max"},
                 "model");
      cfg.model.backbone = m.get<backbone::BackboneConfig>();
      if (m.contains("head")) cfg.model.head = runtime::parse_head(m.at("head").get<std::string>());
      read(m, "d_gamma", cfg.model.d_gamma);
      read(m, "f_min", cfg.model.f_min);
      read(m, "f_max", cfg.model.f_max);
    }
    cfg.model.backbone.validate();

    if (doc.contains("train")) {
      const json& t = doc.at("train");
      check_keys(t, {"lr", "betas", "clip_norm", "batch_size", "steps", "context_len", "checkpoint_every",
                     "sampler"},
                 "train");
      if (t.contains("sampler")) check_keys(t.at("sampler"), {"exclude_query", "mix_noise_levels"}, "train.sampler");
      cfg.train = t.get<runtime::TrainerConfig>();
    }
    cfg.train.seed = cfg.stream("train").key();
    cfg.train.validate();

    if (doc.contains("eval")) {
      const json& e = doc.at("eval");
      check_keys(e, {"mode", "episodes", "final_window", "prompt_size", "context_len", "reset_context", "seeds",
                     "splits", "baseline_episodes", "steps", "solver"},
                 "eval");
      auto& ev = cfg.eval;
      if (e.contains("mode")) ev.mode = runtime::parse_mode(e.at("mode").get<std::string>());
      read(e, "episodes", ev.episodes);
      read(e, "final_window", ev.final_window);
      read(e, "prompt_size", ev.prompt_size);
      read(e, "context_len", ev.context_len);
      read(e, "reset_context", ev.reset_context);
      read(e, "seeds", ev.seeds);
      read(e, "splits", ev.splits);
      read(e, "baseline_episodes", ev.baseline_episodes);
      read(e, "steps", ev.flow.steps);
      if (e.contains("solver")) ev.flow.solver = flow::parse_solver(e.at("solver").get<std::string>());
    }
    if (cfg.eval.episodes == 0 || cfg.eval.final_window == 0 || cfg.eval.baseline_episodes == 0 ||
        cfg.eval.flow.steps == 0) {
      throw ConfigError("eval.episodes, eval.final_window, eval.baseline_episodes and eval.steps must be positive");
    }
    if (cfg.eval.seeds.empty()) throw ConfigError("eval.seeds must not be empty");
    for (const auto& s : cfg.eval.splits) env::parse_split(s);

    if (doc.contains("analyze")) {
      const json& a = doc.at("analyze");
      check_keys(a, {"prompt_sizes", "contraction_sizes", "n_samples", "episodes", "seeds", "task"}, "analyze");
      auto& an = cfg.analyze;
      read(a, "prompt_sizes", an.prompt_sizes);
      read(a, "contraction_sizes", an.contraction_sizes);
      read(a, "n_samples", an.n_samples);
      read(a, "episodes", an.episodes);
      read(a, "seeds", an.seeds);
      read(a, "task", an.task);
    }
    if (cfg.analyze.n_samples == 0 || cfg.analyze.episodes == 0 || cfg.analyze.seeds.empty()) {
      throw ConfigError("analyze.n_samples, analyze.episodes and analyze.seeds must be non-empty/positive");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& ex) {
    throw ConfigError(std::string("invalid config: ") + ex.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed) {
  json doc = json::object();
  std::filesystem::path base = std::filesystem::current_path();
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path.string());
    try {
      doc = json::parse(f);
    } catch (const json::parse_error& ex) {
      throw ConfigError("config " + path.string() + " is not valid JSON: " + ex.what());
    }
    base = std::filesystem::absolute(path).parent_path();
  }
  for (const auto& o : overrides) apply_override(doc, o);
  if (seed) doc["seed"] = *seed;
  return parse_run_config(doc, base);
}

nlohmann::json to_json(const RunConfig& cfg) {
  json model = cfg.model.backbone;
  model["head"] = runtime::to_string(cfg.model.head);
  model["d_gamma"] = cfg.model.d_gamma;
  model["f_min"] = cfg.model.f_min;
  model["f_max"] = cfg.model.f_max;
  json train = cfg.train;
  train.erase("seed");
  const auto& e = cfg.eval;
  const auto& a = cfg.analyze;
  return {{"registry", cfg.registry.string()},
          {"dataset_dir", cfg.dataset_dir.string()},
          {"checkpoint", cfg.checkpoint.string()},
          {"output_dir", cfg.output_dir.string()},
          {"seed", cfg.seed},
          {"jobs", cfg.jobs},
          {"collect", cfg.collect},
          {"model", model},
          {"train", train},
          {"eval",
           {{"mode", runtime::to_string(e.mode)},
            {"episodes", e.episodes},
            {"final_window", e.final_window},
            {"prompt_size", e.prompt_size},
            {"context_len", e.context_len},
            {"reset_context", e.reset_context},
            {"seeds", e.seeds},
            {"splits", e.splits},
            {"baseline_episodes", e.baseline_episodes},
            {"steps", e.flow.steps},
            {"solver", flow::to_string(e.flow.solver)}}},
          {"analyze",
           {{"prompt_sizes", a.prompt_sizes},
            {"contraction_sizes", a.contraction_sizes},
            {"n_samples", a.n_samples},
            {"episodes", a.episodes},
            {"seeds", a.seeds},
            {"task", a.task}}}};
}

}  // namespace flowdpt::cli
