#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "cli/commands.hpp"
#include "cli/run_config.hpp"
#include "support/test_support.hpp"

namespace flowdpt::cli {
namespace {

using env::Split;
using nlohmann::json;

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

json tiny_doc() {
  return json::parse(R"({
    "registry": "registry.json", "output_dir": "out", "seed": 3,
    "collect": {"noise_levels": [0.0, 1.0], "episodes_per_level": 6},
    "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "max_context": 8, "d_gamma": 8},
    "train": {"lr": 1e-3, "batch_size": 4, "steps": 4, "context_len": 3, "checkpoint_every": 2},
    "eval": {"episodes": 3, "final_window": 2, "prompt_size": 4, "seeds": [0, 1], "baseline_episodes": 20, "steps": 4},
    "analyze": {"prompt_sizes": [0, 3], "contraction_sizes": [0, 3, 50], "n_samples": 10, "episodes": 2, "seeds": [0]}
  })");
}

// Scratch directory holding config.json and a registry of the given tasks.
std::filesystem::path make_run(const std::string& name, const std::vector<env::TaskInstance>& tasks,
                               const json& doc = tiny_doc()) {
  const auto dir = flowdpt::testing::scratch_dir("cli_" + name);
  env::save_registry(dir / "registry.json", tasks);
  std::ofstream(dir / "config.json") << doc.dump(2);
  return dir;
}

std::vector<env::TaskInstance> three_tasks() {
  return {env::make_goal_bandit("a", {0.5, 0.1}, "g", Split::train),
          env::make_goal_bandit("b", {-0.3, 0.8}, "g", Split::train),
          env::make_goal_bandit("c", {0.2, -0.6}, "g", Split::test)};
}

RunConfig config_in(const std::filesystem::path& dir, const std::vector<std::string>& sets = {}) {
  return load_run_config(dir / "config.json", sets, std::nullopt);
}

int run_binary(const std::string& args) {
  const std::string cmd = std::string(FLOWDPT_BIN) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

TEST(ConfigTest, OverridesParseJsonOrFallBackToString) {
  json doc = {{"train", {{"lr", 0.1}}}};
  apply_override(doc, "train.lr=0.5");
  apply_override(doc, "eval.splits=[\"test\"]");
  apply_override(doc, "analyze.task=abc");
  EXPECT_EQ(doc["train"]["lr"], 0.5);
  EXPECT_EQ(doc["eval"]["splits"], json::array({"test"}));
  EXPECT_EQ(doc["analyze"]["task"], "abc");
  EXPECT_THROW(apply_override(doc, "novalue"), ConfigError);
  EXPECT_THROW(apply_override(doc, "train.lr.x=1"), ConfigError);
  EXPECT_THROW(apply_override(doc, "a..b=1"), ConfigError);
}

TEST(ConfigTest, UnknownKeysAndBadValuesAreConfigErrors) {
  const std::filesystem::path base = "/tmp";
  json doc = tiny_doc();
  doc["modle"] = json::object();
  EXPECT_THROW(parse_run_config(doc, base), ConfigError);
  doc = tiny_doc();
  doc["train"]["lerning_rate"] = 1;
  EXPECT_THROW(parse_run_config(doc, base), ConfigError);
  doc = tiny_doc();
  doc["model"]["head"] = "mixture";
  EXPECT_THROW(parse_run_config(doc, base), ConfigError);
  doc = tiny_doc();
  doc["eval"]["splits"] = {"validation"};
  EXPECT_THROW(parse_run_config(doc, base), ConfigError);
  doc = tiny_doc();
  doc["collect"]["noise_levels"] = {0.5};
  EXPECT_THROW(parse_run_config(doc, base), ConfigError);
  doc = tiny_doc();
  doc["train"]["lr"] = "fast";
  EXPECT_THROW(parse_run_config(doc, base), ConfigError);
}

TEST(ConfigTest, PathsResolveAgainstTheConfigDirectory) {
  const RunConfig cfg = parse_run_config(tiny_doc(), "/base");
  EXPECT_EQ(cfg.registry, std::filesystem::path("/base/registry.json"));
  EXPECT_EQ(cfg.dataset_dir, std::filesystem::path("/base/out/data"));
  EXPECT_EQ(cfg.checkpoint, std::filesystem::path("/base/out/model/checkpoint.json"));
  EXPECT_EQ(cfg.model.backbone.d_model, 16u);
  EXPECT_EQ(cfg.eval.seeds, (std::vector<std::uint64_t>{0, 1}));
}

TEST(ConfigTest, SeedFlagReplacesConfigSeed) {
  const auto dir = make_run("seed", {});
  EXPECT_EQ(load_run_config(dir / "config.json", {}, 11).seed, 11u);
  EXPECT_EQ(config_in(dir).seed, 3u);
  EXPECT_EQ(config_in(dir, {"seed=5"}).seed, 5u);
  EXPECT_THROW(load_run_config(dir / "missing.json", {}, std::nullopt), ConfigError);
}

TEST(CollectTest, EmptyRegistryWarnsAndSucceeds) {
  const auto dir = make_run("empty", {});
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_collect(config_in(dir)), kExitOk);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("[warning]"), std::string::npos);
}

TEST(CollectTest, OneShardPerTaskAndBitwiseRepeatable) {
  const auto dir = make_run("collect", three_tasks());
  const RunConfig cfg = config_in(dir);
  ASSERT_EQ(cmd_collect(cfg), kExitOk);
  std::vector<std::string> first;
  for (const char* id : {"a", "b", "c"}) {
    const auto shard = cfg.dataset_dir / (std::string(id) + ".shard");
    ASSERT_TRUE(std::filesystem::exists(shard)) << id;
    EXPECT_TRUE(std::filesystem::exists(data::manifest_path(shard))) << id;
    first.push_back(slurp(shard));
  }
  EXPECT_EQ(data::load_dataset(cfg.dataset_dir).shards.size(), 3u);
  ASSERT_EQ(cmd_collect(cfg), kExitOk);
  std::size_t i = 0;
  for (const char* id : {"a", "b", "c"}) EXPECT_EQ(slurp(cfg.dataset_dir / (std::string(id) + ".shard")), first[i++]);
}

TEST(CollectTest, MissingRegistryIsAConfigError) {
  const auto dir = make_run("noreg", {});
  std::filesystem::remove(dir / "registry.json");
  EXPECT_THROW(cmd_collect(config_in(dir)), ConfigError);
}

TEST(TrainTest, ZeroStepsWritesTheInitialization) {
  const auto dir = make_run("train0", three_tasks());
  const RunConfig cfg = config_in(dir, {"train.steps=0"});
  ASSERT_EQ(cmd_collect(cfg), kExitOk);
  ASSERT_EQ(cmd_train(cfg, false), kExitOk);
  const auto loaded = runtime::load_model(cfg.checkpoint);
  EXPECT_EQ(loaded.adam.step, 0);
  runtime::ModelConfig mc = cfg.model;
  mc.groups = loaded.model->config().groups;
  const runtime::Model fresh(mc, cfg.stream("init").key());
  for (std::size_t i = 0; i < fresh.params().size(); ++i) {
    EXPECT_TRUE(fresh.params().at(i).value == loaded.model->params().at(i).value);
  }
  EXPECT_EQ(count_lines(slurp(cfg.output_dir / "loss.csv")), 1u);
}

TEST(TrainTest, WithoutDatasetIsAConfigError) {
  const auto dir = make_run("nodata", three_tasks());
  EXPECT_THROW(cmd_train(config_in(dir), false), ConfigError);
}

TEST(TrainTest, ResumeMatchesUninterruptedRunAndIsRepeatable) {
  const auto dir = make_run("resume", three_tasks());
  const RunConfig cfg = config_in(dir);
  ASSERT_EQ(cmd_collect(cfg), kExitOk);
  ASSERT_EQ(cmd_train(cfg, false), kExitOk);
  const std::string full_ckpt = slurp(cfg.checkpoint.parent_path() / "checkpoint.bin");
  const std::string full_loss = slurp(cfg.output_dir / "loss.csv");
  EXPECT_EQ(count_lines(full_loss), 5u);

  ASSERT_EQ(cmd_train(cfg, false), kExitOk);
  EXPECT_EQ(slurp(cfg.output_dir / "loss.csv"), full_loss);

  ASSERT_EQ(cmd_train(config_in(dir, {"train.steps=2"}), false), kExitOk);
  ASSERT_EQ(cmd_train(cfg, true), kExitOk);
  EXPECT_EQ(slurp(cfg.output_dir / "loss.csv"), full_loss);
  const auto a = runtime::load_model(cfg.checkpoint);
  EXPECT_EQ(a.adam.step, 4);
  EXPECT_EQ(slurp(cfg.checkpoint.parent_path() / "checkpoint.bin"), full_ckpt);
  EXPECT_TRUE(std::filesystem::exists(cfg.output_dir / "loss.svg"));
}

class TrainedRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = make_run("trained", three_tasks());
    const RunConfig cfg = config_in(dir_);
    ASSERT_EQ(cmd_collect(cfg), kExitOk);
    ASSERT_EQ(cmd_train(cfg, false), kExitOk);
  }
  static std::filesystem::path dir_;
};
std::filesystem::path TrainedRun::dir_;

TEST_F(TrainedRun, OnlineEvalWritesScoresPerTaskAndSeed) {
  const RunConfig cfg = config_in(dir_);
  ASSERT_EQ(cmd_eval(cfg, runtime::Mode::online, std::nullopt), kExitOk);
  const std::string scores = slurp(cfg.output_dir / "scores.csv");
  EXPECT_EQ(count_lines(scores), 1u + 3u * 2u);
  EXPECT_EQ(count_lines(slurp(cfg.output_dir / "returns.csv")), 1u + 3u * 2u * 3u);
  ASSERT_EQ(cmd_eval(cfg, runtime::Mode::online, std::nullopt), kExitOk);
  EXPECT_EQ(slurp(cfg.output_dir / "scores.csv"), scores);
}

TEST_F(TrainedRun, OnlineEvalWarnsAboutPromptSize) {
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_eval(config_in(dir_), runtime::Mode::online, 3), kExitOk);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("ignores --prompt-size"), std::string::npos);
}

TEST_F(TrainedRun, OfflineEvalChecksPromptAgainstContextLimit) {
  const RunConfig cfg = config_in(dir_);
  EXPECT_EQ(cmd_eval(cfg, runtime::Mode::offline, 8), kExitOk);
  EXPECT_THROW(cmd_eval(cfg, runtime::Mode::offline, 9), ConfigError);
}

TEST_F(TrainedRun, EmptySplitGivesHeaderOnlyScores) {
  const auto dir = make_run("trainonly", {env::make_goal_bandit("a", {0.5, 0.1}, "g", Split::train)});
  RunConfig cfg = config_in(dir, {"eval.splits=[\"test\"]"});
  cfg.checkpoint = config_in(dir_).checkpoint;
  ::testing::internal::CaptureStderr();
  EXPECT_EQ(cmd_eval(cfg, runtime::Mode::offline, std::nullopt), kExitOk);
  EXPECT_NE(::testing::internal::GetCapturedStderr().find("only its header"), std::string::npos);
  EXPECT_EQ(slurp(cfg.output_dir / "scores.csv"), "task,split,seed,raw,random,expert,normalized\n");
}

TEST_F(TrainedRun, AnalyzeWritesSweepAndContraction) {
  const RunConfig cfg = config_in(dir_);
  ASSERT_EQ(cmd_analyze(cfg), kExitOk);
  // One test task, two prompt sizes.
  EXPECT_EQ(count_lines(slurp(cfg.output_dir / "sweep.csv")), 3u);
  // Sizes 0, 3 and 50 clipped to 8, ten samples each.
  EXPECT_EQ(count_lines(slurp(cfg.output_dir / "contraction.csv")), 1u + 3u * 10u);
  EXPECT_TRUE(std::filesystem::exists(cfg.output_dir / "contraction.svg"));
  EXPECT_THROW(cmd_analyze(config_in(dir_, {"analyze.task=zzz"})), ConfigError);
}

TEST(ExitCodeTest, BinaryMapsFailuresToCodes) {
  const auto dir = make_run("exit", three_tasks());
  const std::string cfg = " --config " + (dir / "config.json").string();
  EXPECT_EQ(run_binary("--help"), 0);
  EXPECT_EQ(run_binary("frobnicate"), 1);
  EXPECT_EQ(run_binary("collect --config " + (dir / "nope.json").string()), 1);
  EXPECT_EQ(run_binary("collect" + cfg + " --set model.bogus=1"), 1);
  EXPECT_EQ(run_binary("eval" + cfg), 2);
  EXPECT_EQ(run_binary("analyze" + cfg), 2);
  EXPECT_EQ(run_binary("collect" + cfg), 0);
}

}  // namespace
}  // namespace flowdpt::cli
