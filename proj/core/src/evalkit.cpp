#include "flowdpt/evalkit.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>

namespace flowdpt::eval {
namespace {

using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat as_matrix(const nd::Array& a) {
  return Eigen::Map<const RowMat>(a.ptr(), static_cast<Eigen::Index>(a.rows()),
                                  static_cast<Eigen::Index>(a.cols()));
}

// Biased sample covariance of the rows.
Mat covariance(const Mat& x) {
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Mat c = x.rowwise() - mu;
  return (c.transpose() * c) / static_cast<double>(x.rows());
}

// Shortest decimal that round-trips, so CSVs are stable byte for byte.
std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

std::ofstream open_out(const std::filesystem::path& path, bool append = false) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, append ? std::ios::app : std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  return f;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

struct Frame {
  double x0, x1, y0, y1;
  static constexpr double kW = 640, kH = 420, kLeft = 70, kRight = 20, kTop = 40, kBottom = 50;
  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kW - kLeft - kRight); }
  double py(double y) const { return kH - kBottom - (y - y0) / (y1 - y0) * (kH - kTop - kBottom); }
};

Frame frame_for(const std::vector<double>& xs, const std::vector<double>& ys) {
  Frame f{0, 1, 0, 1};
  if (!xs.empty()) {
    auto [xl, xh] = std::minmax_element(xs.begin(), xs.end());
    auto [yl, yh] = std::minmax_element(ys.begin(), ys.end());
    f = {*xl, *xh, *yl, *yh};
  }
  if (!(f.x1 > f.x0)) f.x1 = f.x0 + 1.0;
  if (!(f.y1 > f.y0)) f.y1 = f.y0 + 1.0;
  const double pad = 0.05 * (f.y1 - f.y0);
  f.y0 -= pad;
  f.y1 += pad;
  return f;
}

void svg_axes(std::ostream& out, const Frame& f, const std::string& title, const std::string& xl,
              const std::string& yl) {
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Frame::kW << "\" height=\"" << Frame::kH
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<text x=\"" << Frame::kW / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
      << xml_escape(title) << "</text>\n";
  const double bx = f.px(f.x0), by = f.py(f.y0), tx = f.px(f.x1), ty = f.py(f.y1);
  out << "<polyline fill=\"none\" stroke=\"black\" points=\"" << bx << "," << ty << " " << bx << "," << by
      << " " << tx << "," << by << "\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = f.x0 + (f.x1 - f.x0) * i / 4.0, yv = f.y0 + (f.y1 - f.y0) * i / 4.0;
    out << "<text x=\"" << f.px(xv) << "\" y=\"" << by + 16 << "\" text-anchor=\"middle\">" << num(std::round(xv * 1000) / 1000)
        << "</text>\n";
    out << "<text x=\"" << bx - 6 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << num(std::round(yv * 1000) / 1000)
        << "</text>\n";
  }
  out << "<text x=\"" << (bx + tx) / 2 << "\" y=\"" << Frame::kH - 12 << "\" text-anchor=\"middle\">"
      << xml_escape(xl) << "</text>\n";
  out << "<text x=\"16\" y=\"" << (by + ty) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << (by + ty) / 2 << ")\">" << xml_escape(yl) << "</text>\n";
}

}  // namespace

double normalized_score(double raw, double random, double expert) {
  if (expert == random) {
    throw DegenerateBaseline("normalized_score: expert and random scores are both " + num(expert));
  }
  return (raw - random) / (expert - random);
}

double iqm(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("iqm: no values");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const std::size_t drop = v.size() / 4;
  double s = 0.0;
  for (std::size_t i = drop; i < v.size() - drop; ++i) s += v[i];
  return s / static_cast<double>(v.size() - 2 * drop);
}

double mean(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean: no values");
  double s = 0.0;
  for (double x : values) s += x;
  return s / static_cast<double>(values.size());
}

ScoreRecord make_score(std::string task_id, std::string split, std::uint64_t seed, double raw,
                       double random, double expert) {
  return {std::move(task_id), std::move(split), seed, raw, random, expert,
          normalized_score(raw, random, expert)};
}

Baselines task_baselines(const env::TaskInstance& task, std::size_t n_episodes, const Rng& rng) {
  Rng rr = rng.stream("random");
  Rng re = rng.stream("expert");
  return {env::random_policy_score(task, n_episodes, rr), env::expert_score(task, n_episodes, re)};
}

double entropy_proxy(const nd::Array& samples, double eps) {
  if (samples.rows() == 0 || samples.cols() == 0) throw std::invalid_argument("entropy_proxy: no samples");
  if (!(eps > 0.0)) throw std::invalid_argument("entropy_proxy: eps must be positive");
  const Mat x = as_matrix(samples);
  const auto d = x.cols();
  const Mat c = covariance(x) + eps * Mat::Identity(d, d);
  const Eigen::SelfAdjointEigenSolver<Mat> es(c, Eigen::EigenvaluesOnly);
  const double logdet = es.eigenvalues().array().max(eps).log().sum();
  return 0.5 * logdet + 0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi * std::numbers::e);
}

nd::Array tsvd_2d(const nd::Array& samples) {
  if (samples.rows() < 2) throw std::invalid_argument("tsvd_2d: need at least two samples");
  const Mat x = as_matrix(samples);
  const Eigen::RowVectorXd mu = x.colwise().mean();
  const Mat c = x.rowwise() - mu;
  const auto d = x.cols();
  const Eigen::SelfAdjointEigenSolver<Mat> es(covariance(x));
  // Eigenvalues come in ascending order; take the last two columns.
  const Eigen::Index k = std::min<Eigen::Index>(2, d);
  Mat basis(d, k);
  for (Eigen::Index j = 0; j < k; ++j) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - j);
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    basis.col(j) = v;
  }
  const Mat proj = c * basis;
  nd::Array out({samples.rows(), 2}, 0.0);
  for (std::size_t i = 0; i < samples.rows(); ++i) {
    for (Eigen::Index j = 0; j < k; ++j) out.at(i, j) = proj(static_cast<Eigen::Index>(i), j);
  }
  return out;
}

std::vector<SweepCell> demo_sweep(const runtime::Model& model,
                                  const std::vector<env::TaskInstance>& tasks,
                                  const SweepConfig& cfg, const Rng& rng) {
  for (std::size_t s : cfg.prompt_sizes) {
    if (s > model.max_context()) {
      throw std::invalid_argument("demo_sweep: prompt size " + std::to_string(s) +
                                  " exceeds the model limit " + std::to_string(model.max_context()));
    }
  }
  if (cfg.seeds.empty()) throw std::invalid_argument("demo_sweep: no seeds");
  std::vector<Baselines> base(tasks.size());
  runtime::parallel_for(tasks.size(), cfg.jobs, [&](std::size_t t) {
    base[t] = task_baselines(tasks[t], cfg.baseline_episodes, rng.stream("baselines").stream(tasks[t].id));
  });

  const std::size_t n_sizes = cfg.prompt_sizes.size();
  const std::size_t n_seeds = cfg.seeds.size();
  std::vector<SweepCell> cells(tasks.size() * n_sizes);
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    for (std::size_t s = 0; s < n_sizes; ++s) {
      cells[t * n_sizes + s] = {tasks[t].id, cfg.prompt_sizes[s], std::vector<double>(n_seeds), 0.0};
    }
  }
  runtime::InferenceConfig ic;
  ic.mode = runtime::Mode::offline;
  ic.episodes = cfg.episodes;
  ic.flow = cfg.flow;
  runtime::parallel_for(cells.size() * n_seeds, cfg.jobs, [&](std::size_t job) {
    const std::size_t cell = job / n_seeds, k = job % n_seeds;
    const std::size_t t = cell / n_sizes;
    const env::TaskInstance& task = tasks[t];
    const Rng seed_rng = rng.stream("seed", cfg.seeds[k]).stream(task.id);
    const auto prompt = runtime::demonstrator_prompt(task, cells[cell].prompt_size, seed_rng.stream("prompt"));
    const auto returns = runtime::rollout_offline(model, task, prompt, ic, seed_rng.stream("rollout"));
    cells[cell].normalized[k] = normalized_score(mean(returns), base[t].random, base[t].expert);
  });
  for (auto& c : cells) c.iqm = iqm(c.normalized);
  return cells;
}

double sweep_iqm(const std::vector<SweepCell>& cells, std::size_t prompt_size) {
  std::vector<double> v;
  for (const auto& c : cells) {
    if (c.prompt_size == prompt_size) v.push_back(c.iqm);
  }
  if (v.empty()) throw std::invalid_argument("sweep_iqm: no cells of prompt size " + std::to_string(prompt_size));
  return iqm(v);
}

std::vector<std::size_t> clip_sizes(std::span<const std::size_t> sizes, std::size_t max_context) {
  std::vector<std::size_t> out;
  for (std::size_t s : sizes) {
    const std::size_t c = std::min(s, max_context);
    if (out.empty() || out.back() != c) out.push_back(c);
  }
  return out;
}

ContractionReport contraction_analysis(const runtime::Model& model, const env::TaskInstance& task,
                                       std::span<const double> query_obs,
                                       std::span<const std::size_t> sizes, std::size_t n_samples,
                                       const flow::FlowConfig& flow, const Rng& rng) {
  if (sizes.empty()) throw std::invalid_argument("contraction_analysis: no context sizes");
  if (n_samples == 0) throw std::invalid_argument("contraction_analysis: n_samples must be positive");
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] <= sizes[i - 1]) throw std::invalid_argument("contraction_analysis: sizes must be ascending");
  }
  if (sizes.back() > model.max_context()) {
    throw std::invalid_argument("contraction_analysis: size " + std::to_string(sizes.back()) +
                                " exceeds the model limit " + std::to_string(model.max_context()));
  }
  ContractionReport report;
  report.task_id = task.id;
  report.query_obs.assign(query_obs.begin(), query_obs.end());
  const auto prompt = runtime::demonstrator_prompt(task, sizes.back(), rng.stream("prompt"));
  for (std::size_t i = 0; i < sizes.size(); ++i) {
    Rng r = rng.stream("samples", i);
    ContractionEntry e;
    e.context_size = sizes[i];
    e.samples = model.sample_actions(task.group_id, query_obs,
                                     std::span<const env::Transition>(prompt.data(), sizes[i]), n_samples,
                                     flow, r);
    e.projection = n_samples >= 2 ? tsvd_2d(e.samples) : nd::Array({n_samples, 2}, 0.0);
    e.entropy = entropy_proxy(e.samples);
    report.entries.push_back(std::move(e));
  }
  return report;
}

void write_scores_csv(const std::filesystem::path& path, const std::vector<ScoreRecord>& rows) {
  auto f = open_out(path);
  f << "task,split,seed,raw,random,expert,normalized\n";
  for (const auto& r : rows) {
    f << r.task_id << "," << r.split << "," << r.seed << "," << num(r.raw) << "," << num(r.random) << ","
      << num(r.expert) << "," << num(r.normalized) << "\n";
  }
}

void write_returns_csv(const std::filesystem::path& path, const std::vector<EpisodeReturn>& rows) {
  auto f = open_out(path);
  f << "episode,return,seed,task\n";
  for (const auto& r : rows) f << r.episode << "," << num(r.ret) << "," << r.seed << "," << r.task_id << "\n";
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<runtime::LossRecord>& rows,
                    bool append) {
  const bool header = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
  auto f = open_out(path, append);
  if (header) f << "step,loss\n";
  for (const auto& r : rows) f << r.step << "," << num(r.loss) << "\n";
}

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepCell>& cells,
                     std::span<const std::uint64_t> seeds) {
  auto f = open_out(path);
  f << "task,prompt_size";
  for (auto s : seeds) f << ",seed_" << s;
  f << ",iqm\n";
  for (const auto& c : cells) {
    f << c.task_id << "," << c.prompt_size;
    for (double v : c.normalized) f << "," << num(v);
    f << "," << num(c.iqm) << "\n";
  }
}

void write_contraction_csv(const std::filesystem::path& path, const ContractionReport& report) {
  auto f = open_out(path);
  f << "task,context_size,sample,pc1,pc2,entropy\n";
  for (const auto& e : report.entries) {
    for (std::size_t i = 0; i < e.projection.rows(); ++i) {
      f << report.task_id << "," << e.context_size << "," << i << "," << num(e.projection.at(i, 0)) << ","
        << num(e.projection.at(i, 1)) << "," << num(e.entropy) << "\n";
    }
  }
}

void write_line_svg(const std::filesystem::path& path, const std::string& title,
                    const std::string& x_label, const std::string& y_label,
                    const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("write_line_svg: x and y differ in length");
  const Frame fr = frame_for(x, y);
  auto f = open_out(path);
  svg_axes(f, fr, title, x_label, y_label);
  f << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"";
  for (std::size_t i = 0; i < x.size(); ++i) f << fr.px(x[i]) << "," << fr.py(y[i]) << " ";
  f << "\"/>\n</svg>\n";
}

void write_contraction_svg(const std::filesystem::path& path, const ContractionReport& report) {
  static constexpr const char* kColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"};
  std::vector<double> xs, ys;
  for (const auto& e : report.entries) {
    for (std::size_t i = 0; i < e.projection.rows(); ++i) {
      xs.push_back(e.projection.at(i, 0));
      ys.push_back(e.projection.at(i, 1));
    }
  }
  Frame fr = frame_for(xs, ys);
  auto f = open_out(path);
  svg_axes(f, fr, "action samples by context size (" + report.task_id + ")", "component 1", "component 2");
  for (std::size_t k = 0; k < report.entries.size(); ++k) {
    const auto& e = report.entries[k];
    const char* color = kColors[k % std::size(kColors)];
    for (std::size_t i = 0; i < e.projection.rows(); ++i) {
      f << "<circle cx=\"" << fr.px(e.projection.at(i, 0)) << "\" cy=\"" << fr.py(e.projection.at(i, 1))
        << "\" r=\"2.5\" fill=\"" << color << "\" fill-opacity=\"0.6\"/>\n";
    }
    f << "<text x=\"" << Frame::kW - 150 << "\" y=\"" << 50 + 16 * k << "\" fill=\"" << color << "\">context "
      << e.context_size << ", H=" << num(std::round(e.entropy * 100) / 100) << "</text>\n";
  }
  f << "</svg>\n";
}

}  // namespace flowdpt::eval
