// flowdpt: collect -> train -> eval -> analyze.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "cli/commands.hpp"
#include "flowdpt/log.hpp"

namespace {

using flowdpt::cli::kExitFailure;
using flowdpt::cli::kExitUsage;

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "JSON run config; relative paths inside resolve against its directory");
  cmd->add_option("--set", c.sets, "Override a config value, e.g. --set train.steps=500 (repeatable)");
  cmd->add_option("--seed", c.seed, "Run seed, expanded into the collect/init/train/eval/analyze streams");
  cmd->add_option("-j,--jobs", c.jobs, "Maximum worker threads (results do not depend on it)");
  cmd->add_flag("-q,--quiet", c.quiet, "Only print warnings and errors");
}

flowdpt::cli::RunConfig load(const Common& c) {
  std::vector<std::string> sets = c.sets;
  if (c.jobs) sets.push_back("jobs=" + std::to_string(*c.jobs));
  if (c.quiet) flowdpt::set_log_level(flowdpt::LogLevel::warning);
  return flowdpt::cli::load_run_config(c.config, sets, c.seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowdpt: in-context decision transformer with a rectified-flow action head.\n"
               "Environment: FLOWDPT_OUT overrides the configured output directory.\n"
               "Exit codes: 0 success, 1 usage or config error, 2 runtime failure."};
  app.require_subcommand(1);

  Common common;
  auto* collect = app.add_subcommand("collect", "Collect noise-distilled demonstrator data for every registry task");
  add_common(collect, common);

  bool resume = false;
  auto* train = app.add_subcommand("train", "Train the model on the train-split shards");
  add_common(train, common);
  train->add_flag("--resume", resume, "Continue from the existing checkpoint and its step counter");

  std::string mode = "online";
  std::optional<std::size_t> prompt_size;
  auto* evalc = app.add_subcommand("eval", "Evaluate online (empty FIFO context) or offline (fixed prompt)");
  add_common(evalc, common);
  evalc->add_option("--mode", mode, "online or offline")->check(CLI::IsMember({"online", "offline"}));
  evalc->add_option("--prompt-size", prompt_size, "Offline prompt length in transitions");

  auto* analyze = app.add_subcommand("analyze", "Demonstration sweep and posterior-contraction analysis");
  add_common(analyze, common);

  flowdpt::cli::RegistrySpec reg;
  std::string kind = "goal_bandit";
  std::string reg_out = "registry.json";
  auto* registry = app.add_subcommand("registry", "Generate a task registry file");
  registry->add_option("-o,--out", reg_out, "Output path")->required();
  registry->add_option("--kind", kind, "goal_bandit, bimodal_reach or linear_control")
      ->check(CLI::IsMember({"goal_bandit", "bimodal_reach", "linear_control"}));
  registry->add_option("--train", reg.n_train, "Number of train tasks");
  registry->add_option("--test", reg.n_test, "Number of held-out test tasks");
  registry->add_option("--act-dim", reg.act_dim, "Action dimension of bandit tasks");
  registry->add_option("--group", reg.group, "Task group id (default: the kind)");
  registry->add_option("--seed", reg.seed, "Seed for the random goals or systems");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*registry) {
      reg.kind = flowdpt::env::parse_kind(kind);
      return flowdpt::cli::cmd_registry(reg_out, reg);
    }
    const auto cfg = load(common);
    if (*collect) return flowdpt::cli::cmd_collect(cfg);
    if (*train) return flowdpt::cli::cmd_train(cfg, resume);
    if (*evalc) return flowdpt::cli::cmd_eval(cfg, flowdpt::runtime::parse_mode(mode), prompt_size);
    if (*analyze) return flowdpt::cli::cmd_analyze(cfg);
  } catch (const flowdpt::cli::ConfigError& e) {
    flowdpt::log_error(e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    flowdpt::log_error(e.what());
    return kExitFailure;
  }
  return kExitUsage;
}
