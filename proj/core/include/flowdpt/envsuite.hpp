#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowdpt/ndgrad/array.hpp"
#include "flowdpt/rng.hpp"

// Analytic continuous-control tasks with exact demonstrators.
//
//   goal_bandit    r = -||a - g||^2, observation is a constant zero vector
//   bimodal_reach  r = -min(||a - g||^2, ||a + g||^2); demonstrator picks
//                  +g or -g with equal probability
//   linear_control s' = A s + B a + noise, r = -s'^T Q s' - a^T R a,
//                  demonstrator a = -K s from the discrete Riccati equation
namespace flowdpt::env {

enum class TaskKind { goal_bandit, bimodal_reach, linear_control };
enum class Split { train, test };

TaskKind parse_kind(const std::string& s);
std::string to_string(TaskKind k);
Split parse_split(const std::string& s);
std::string to_string(Split s);

struct LinearSystem {
  nd::Array A, B, Q, R;
  nd::Array K;  // solved gain, [act_dim, state_dim]
  double noise_std = 0.1;
};

struct TaskInstance {
  std::string id;
  TaskKind kind = TaskKind::goal_bandit;
  std::vector<double> goal;  // bandit kinds
  LinearSystem lin;          // linear_control
  std::size_t horizon = 1;
  std::string group_id;
  Split split = Split::train;
  double action_bound = 1.0;  // actions are clipped to [-bound, bound]
  double reward_scale = 1.0;

  std::size_t obs_dim() const;
  std::size_t act_dim() const;
};

TaskInstance make_goal_bandit(std::string id, std::vector<double> goal, std::string group_id,
                              Split split, std::size_t horizon = 1);
TaskInstance make_bimodal_reach(std::string id, std::vector<double> goal, std::string group_id,
                                Split split, std::size_t horizon = 1);
// Solves the Riccati equation; throws if (A, B) is not stabilized by the gain.
TaskInstance make_linear_control(std::string id, nd::Array A, nd::Array B, nd::Array Q,
                                 nd::Array R, std::string group_id, Split split,
                                 std::size_t horizon = 20, double noise_std = 0.1,
                                 double action_bound = 5.0);

void to_json(nlohmann::json& j, const TaskInstance& t);
void from_json(const nlohmann::json& j, TaskInstance& t);

std::vector<TaskInstance> load_registry(const std::filesystem::path& path);
void save_registry(const std::filesystem::path& path, const std::vector<TaskInstance>& tasks);

// Goals uniform in [-1, 1]^act_dim; ids are "<prefix><index>".
std::vector<TaskInstance> generate_bandit_tasks(TaskKind kind, std::size_t count, Split split,
                                                std::size_t act_dim, const std::string& group_id,
                                                const std::string& prefix, Rng& rng);

struct EnvState {
  std::vector<double> state;  // linear_control only
  std::size_t t = 0;
};

std::vector<double> observe(const TaskInstance& task, const EnvState& s);

// Bandits start at the zero observation; linear_control draws s ~ N(0, 0.5 I).
EnvState reset(const TaskInstance& task, Rng& rng);

struct StepResult {
  std::vector<double> obs;
  double reward = 0.0;
  bool done = false;
};

StepResult step(const TaskInstance& task, EnvState& s, std::span<const double> action, Rng& rng);

std::vector<double> demonstrator_action(const TaskInstance& task, std::span<const double> obs,
                                        Rng& rng);

class LqrNotConverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LqrSolution {
  nd::Array K;  // [m, n]
  nd::Array P;  // [n, n]
  std::size_t iterations = 0;
};

// Fixed-point iteration P <- Q + A'PA - A'PB (R + B'PB)^-1 B'PA from P = Q
// until max |P_next - P| < tol; K = (R + B'PB)^-1 B'PA.
LqrSolution solve_lqr(const nd::Array& A, const nd::Array& B, const nd::Array& Q,
                      const nd::Array& R, std::size_t max_iters = 10000, double tol = 1e-10);

// max |P - (Q + A'PA - A'PB (R + B'PB)^-1 B'PA)|
double riccati_residual(const nd::Array& A, const nd::Array& B, const nd::Array& Q,
                        const nd::Array& R, const nd::Array& P);

struct Transition {
  std::vector<double> obs;
  std::vector<double> action;
  double reward = 0.0;
};

struct EpisodeResult {
  double total_return = 0.0;
  std::vector<Transition> transitions;
};

using Policy = std::function<std::vector<double>(std::span<const double> obs, Rng& rng)>;

EpisodeResult run_episode(const TaskInstance& task, const Policy& policy, Rng& rng);

// Monte-Carlo mean episode return of actions uniform in [-1, 1]^act_dim.
double random_policy_score(const TaskInstance& task, std::size_t n_episodes, Rng& rng);
// Monte-Carlo mean episode return of the demonstrator.
double expert_score(const TaskInstance& task, std::size_t n_episodes, Rng& rng);

}  // namespace flowdpt::env
