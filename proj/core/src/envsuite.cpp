#include "flowdpt/envsuite.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>

namespace flowdpt::env {
namespace {

using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat to_eigen(const nd::Array& a) {
  return Eigen::Map<const RowMat>(a.ptr(), static_cast<Eigen::Index>(a.rows()),
                                  static_cast<Eigen::Index>(a.cols()));
}

nd::Array from_eigen(const Mat& m) {
  nd::Array a({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  Eigen::Map<RowMat>(a.ptr(), m.rows(), m.cols()) = m;
  return a;
}

nlohmann::json matrix_json(const nd::Array& a) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < a.rows(); ++r) rows.push_back(a.row_vector(r));
  return rows;
}

nd::Array matrix_from_json(const nlohmann::json& j, const char* name) {
  const auto rows = j.get<std::vector<std::vector<double>>>();
  if (rows.empty() || rows[0].empty()) throw std::invalid_argument(std::string("empty matrix ") + name);
  nd::Array a({rows.size(), rows[0].size()});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != a.cols()) throw std::invalid_argument(std::string("ragged matrix ") + name);
    std::copy(rows[r].begin(), rows[r].end(), a.row_span(r).begin());
  }
  return a;
}

double sq_dist(std::span<const double> a, std::span<const double> b, double sign) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - sign * b[i];
    s += d * d;
  }
  return s;
}

void check_goal(const std::vector<double>& goal) {
  if (goal.empty()) throw std::invalid_argument("bandit task needs a non-empty goal");
}

}  // namespace

TaskKind parse_kind(const std::string& s) {
  if (s == "goal_bandit") return TaskKind::goal_bandit;
  if (s == "bimodal_reach") return TaskKind::bimodal_reach;
  if (s == "linear_control") return TaskKind::linear_control;
  throw std::invalid_argument("unknown task kind '" + s + "'");
}

std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::goal_bandit: return "goal_bandit";
    case TaskKind::bimodal_reach: return "bimodal_reach";
    case TaskKind::linear_control: return "linear_control";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train or test)");
}

std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

std::size_t TaskInstance::obs_dim() const {
  return kind == TaskKind::linear_control ? lin.A.rows() : goal.size();
}

std::size_t TaskInstance::act_dim() const {
  return kind == TaskKind::linear_control ? lin.B.cols() : goal.size();
}

TaskInstance make_goal_bandit(std::string id, std::vector<double> goal, std::string group_id,
                              Split split, std::size_t horizon) {
  check_goal(goal);
  TaskInstance t;
  t.id = std::move(id);
  t.kind = TaskKind::goal_bandit;
  t.goal = std::move(goal);
  t.horizon = horizon;
  t.group_id = std::move(group_id);
  t.split = split;
  return t;
}

TaskInstance make_bimodal_reach(std::string id, std::vector<double> goal, std::string group_id,
                                Split split, std::size_t horizon) {
  TaskInstance t = make_goal_bandit(std::move(id), std::move(goal), std::move(group_id), split, horizon);
  t.kind = TaskKind::bimodal_reach;
  return t;
}

TaskInstance make_linear_control(std::string id, nd::Array A, nd::Array B, nd::Array Q,
                                 nd::Array R, std::string group_id, Split split,
                                 std::size_t horizon, double noise_std, double action_bound) {
  TaskInstance t;
  t.id = std::move(id);
  t.kind = TaskKind::linear_control;
  t.horizon = horizon;
  t.group_id = std::move(group_id);
  t.split = split;
  t.action_bound = action_bound;
  t.lin.K = solve_lqr(A, B, Q, R).K;
  const Mat closed = to_eigen(A) - to_eigen(B) * to_eigen(t.lin.K);
  const double radius = closed.eigenvalues().cwiseAbs().maxCoeff();
  if (!(radius < 1.0)) {
    throw std::invalid_argument("linear_control task '" + t.id +
                                "': (A, B) is not stabilized by the LQR gain");
  }
  t.lin.A = std::move(A);
  t.lin.B = std::move(B);
  t.lin.Q = std::move(Q);
  t.lin.R = std::move(R);
  t.lin.noise_std = noise_std;
  return t;
}

void to_json(nlohmann::json& j, const TaskInstance& t) {
  nlohmann::json params;
  if (t.kind == TaskKind::linear_control) {
    params = {{"A", matrix_json(t.lin.A)}, {"B", matrix_json(t.lin.B)},
              {"Q", matrix_json(t.lin.Q)}, {"R", matrix_json(t.lin.R)},
              {"noise_std", t.lin.noise_std}};
  } else {
    params = {{"goal", t.goal}};
  }
  params["action_bound"] = t.action_bound;
  params["reward_scale"] = t.reward_scale;
  j = {{"id", t.id},         {"kind", to_string(t.kind)},         {"params", params},
       {"horizon", t.horizon}, {"group_id", t.group_id}, {"split", to_string(t.split)}};
}

void from_json(const nlohmann::json& j, TaskInstance& t) {
  const TaskKind kind = parse_kind(j.at("kind").get<std::string>());
  const auto& p = j.at("params");
  const std::string id = j.at("id").get<std::string>();
  const std::string group = j.at("group_id").get<std::string>();
  const Split split = parse_split(j.value("split", std::string("train")));
  if (kind == TaskKind::linear_control) {
    t = make_linear_control(id, matrix_from_json(p.at("A"), "A"), matrix_from_json(p.at("B"), "B"),
                            matrix_from_json(p.at("Q"), "Q"), matrix_from_json(p.at("R"), "R"),
                            group, split, j.value("horizon", std::size_t{20}),
                            p.value("noise_std", 0.1), p.value("action_bound", 5.0));
  } else {
    auto goal = p.at("goal").get<std::vector<double>>();
    const std::size_t horizon = j.value("horizon", std::size_t{1});
    t = kind == TaskKind::goal_bandit ? make_goal_bandit(id, std::move(goal), group, split, horizon)
                                      : make_bimodal_reach(id, std::move(goal), group, split, horizon);
    t.action_bound = p.value("action_bound", 1.0);
  }
  t.reward_scale = p.value("reward_scale", 1.0);
}

std::vector<TaskInstance> load_registry(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open task registry " + path.string());
  const auto doc = nlohmann::json::parse(f);
  const auto& list = doc.is_object() ? doc.at("tasks") : doc;
  std::vector<TaskInstance> tasks = list.get<std::vector<TaskInstance>>();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      if (tasks[k].id == tasks[i].id) throw std::invalid_argument("duplicate task id '" + tasks[i].id + "'");
      if (tasks[k].group_id == tasks[i].group_id &&
          (tasks[k].obs_dim() != tasks[i].obs_dim() || tasks[k].act_dim() != tasks[i].act_dim())) {
        throw std::invalid_argument("group '" + tasks[i].group_id + "' mixes task dimensions");
      }
    }
  }
  return tasks;
}

void save_registry(const std::filesystem::path& path, const std::vector<TaskInstance>& tasks) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write task registry " + path.string());
  f << nlohmann::json{{"tasks", tasks}}.dump(2) << "\n";
}

std::vector<TaskInstance> generate_bandit_tasks(TaskKind kind, std::size_t count, Split split,
                                                std::size_t act_dim, const std::string& group_id,
                                                const std::string& prefix, Rng& rng) {
  if (kind == TaskKind::linear_control) {
    throw std::invalid_argument("generate_bandit_tasks: linear_control is not a bandit kind");
  }
  std::vector<TaskInstance> out;
  for (std::size_t i = 0; i < count; ++i) {
    std::vector<double> goal(act_dim);
    for (double& g : goal) g = rng.uniform(-1.0, 1.0);
    const std::string id = prefix + std::to_string(i);
    out.push_back(kind == TaskKind::goal_bandit ? make_goal_bandit(id, goal, group_id, split)
                                                : make_bimodal_reach(id, goal, group_id, split));
  }
  return out;
}

std::vector<double> observe(const TaskInstance& task, const EnvState& s) {
  if (task.kind == TaskKind::linear_control) return s.state;
  return std::vector<double>(task.obs_dim(), 0.0);
}

EnvState reset(const TaskInstance& task, Rng& rng) {
  EnvState s;
  if (task.kind == TaskKind::linear_control) {
    s.state.resize(task.obs_dim());
    const double sd = std::sqrt(0.5);
    for (double& x : s.state) x = sd * rng.normal();
  }
  return s;
}

StepResult step(const TaskInstance& task, EnvState& s, std::span<const double> action, Rng& rng) {
  if (action.size() != task.act_dim()) {
    throw nd::ShapeError("env::step(action)", {1, task.act_dim()}, {1, action.size()});
  }
  if (s.t >= task.horizon) throw std::logic_error("env::step: episode already finished");
  std::vector<double> a(action.begin(), action.end());
  for (double& x : a) x = std::clamp(x, -task.action_bound, task.action_bound);

  StepResult out;
  switch (task.kind) {
    case TaskKind::goal_bandit:
      out.reward = -sq_dist(a, task.goal, 1.0);
      break;
    case TaskKind::bimodal_reach:
      out.reward = -std::min(sq_dist(a, task.goal, 1.0), sq_dist(a, task.goal, -1.0));
      break;
    case TaskKind::linear_control: {
      const auto& L = task.lin;
      const std::size_t n = L.A.rows();
      const std::size_t m = L.B.cols();
      std::vector<double> next(n, 0.0);
      for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (std::size_t k = 0; k < n; ++k) v += L.A.at(i, k) * s.state[k];
        for (std::size_t k = 0; k < m; ++k) v += L.B.at(i, k) * a[k];
        next[i] = v + L.noise_std * rng.normal();
      }
      double cost = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < n; ++k) cost += next[i] * L.Q.at(i, k) * next[k];
      }
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t k = 0; k < m; ++k) cost += a[i] * L.R.at(i, k) * a[k];
      }
      out.reward = -cost;
      s.state = std::move(next);
      break;
    }
  }
  ++s.t;
  out.done = s.t >= task.horizon;
  out.obs = observe(task, s);
  return out;
}

std::vector<double> demonstrator_action(const TaskInstance& task, std::span<const double> obs,
                                        Rng& rng) {
  if (obs.size() != task.obs_dim()) {
    throw nd::ShapeError("demonstrator_action(obs)", {1, task.obs_dim()}, {1, obs.size()});
  }
  switch (task.kind) {
    case TaskKind::goal_bandit:
      return task.goal;
    case TaskKind::bimodal_reach: {
      std::vector<double> a = task.goal;
      if (rng.uniform() < 0.5) {
        for (double& x : a) x = -x;
      }
      return a;
    }
    case TaskKind::linear_control: {
      const auto& K = task.lin.K;
      std::vector<double> a(K.rows(), 0.0);
      for (std::size_t i = 0; i < K.rows(); ++i) {
        for (std::size_t k = 0; k < K.cols(); ++k) a[i] -= K.at(i, k) * obs[k];
      }
      return a;
    }
  }
  return {};
}

LqrSolution solve_lqr(const nd::Array& A_, const nd::Array& B_, const nd::Array& Q_,
                      const nd::Array& R_, std::size_t max_iters, double tol) {
  const Mat A = to_eigen(A_), B = to_eigen(B_), Q = to_eigen(Q_), R = to_eigen(R_);
  const auto n = A.rows();
  const auto m = B.cols();
  if (A.cols() != n || B.rows() != n || Q.rows() != n || Q.cols() != n || R.rows() != m || R.cols() != m) {
    throw std::invalid_argument("solve_lqr: inconsistent dimensions A " + nd::shape_string(A_.shape()) +
                                ", B " + nd::shape_string(B_.shape()) + ", Q " +
                                nd::shape_string(Q_.shape()) + ", R " + nd::shape_string(R_.shape()));
  }
  if (!Q.isApprox(Q.transpose(), 1e-12) && !(Q - Q.transpose()).isZero(1e-12)) {
    throw std::invalid_argument("solve_lqr: Q must be symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Mat> qe(Q);
  if (qe.eigenvalues().minCoeff() < -1e-12) throw std::invalid_argument("solve_lqr: Q must be positive semidefinite");
  Eigen::LLT<Mat> rl(R);
  if (rl.info() != Eigen::Success) throw std::invalid_argument("solve_lqr: R must be positive definite");

  Mat P = Q;
  for (std::size_t it = 1; it <= max_iters; ++it) {
    const Mat S = R + B.transpose() * P * B;
    const Mat BtPA = B.transpose() * P * A;
    const Mat next = Q + A.transpose() * P * A - BtPA.transpose() * S.ldlt().solve(BtPA);
    const double diff = (next - P).cwiseAbs().maxCoeff();
    P = next;
    if (!std::isfinite(diff)) break;
    if (diff < tol) {
      const Mat S2 = R + B.transpose() * P * B;
      const Mat K = S2.ldlt().solve(B.transpose() * P * A);
      return {from_eigen(K), from_eigen(P), it};
    }
  }
  throw LqrNotConverged("solve_lqr: Riccati iteration did not converge within " +
                        std::to_string(max_iters) + " iterations");
}

double riccati_residual(const nd::Array& A_, const nd::Array& B_, const nd::Array& Q_,
                        const nd::Array& R_, const nd::Array& P_) {
  const Mat A = to_eigen(A_), B = to_eigen(B_), Q = to_eigen(Q_), R = to_eigen(R_), P = to_eigen(P_);
  const Mat S = R + B.transpose() * P * B;
  const Mat BtPA = B.transpose() * P * A;
  const Mat rhs = Q + A.transpose() * P * A - BtPA.transpose() * S.ldlt().solve(BtPA);
  return (P - rhs).cwiseAbs().maxCoeff();
}

EpisodeResult run_episode(const TaskInstance& task, const Policy& policy, Rng& rng) {
  EpisodeResult out;
  EnvState s = reset(task, rng);
  std::vector<double> obs = observe(task, s);
  for (std::size_t k = 0; k < task.horizon; ++k) {
    std::vector<double> a = policy(obs, rng);
    StepResult r = step(task, s, a, rng);
    out.total_return += r.reward;
    out.transitions.push_back({obs, std::move(a), r.reward});
    obs = std::move(r.obs);
    if (r.done) break;
  }
  return out;
}

double random_policy_score(const TaskInstance& task, std::size_t n_episodes, Rng& rng) {
  if (n_episodes == 0) throw std::invalid_argument("random_policy_score: n_episodes must be positive");
  const std::size_t m = task.act_dim();
  Policy uniform = [m](std::span<const double>, Rng& r) {
    std::vector<double> a(m);
    for (double& x : a) x = r.uniform(-1.0, 1.0);
    return a;
  };
  double total = 0.0;
  for (std::size_t e = 0; e < n_episodes; ++e) total += run_episode(task, uniform, rng).total_return;
  return total / static_cast<double>(n_episodes);
}

double expert_score(const TaskInstance& task, std::size_t n_episodes, Rng& rng) {
  if (n_episodes == 0) throw std::invalid_argument("expert_score: n_episodes must be positive");
  Policy demo = [&task](std::span<const double> obs, Rng& r) { return demonstrator_action(task, obs, r); };
  double total = 0.0;
  for (std::size_t e = 0; e < n_episodes; ++e) total += run_episode(task, demo, rng).total_return;
  return total / static_cast<double>(n_episodes);
}

}  // namespace flowdpt::env
