#include "flowdpt/runtime.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "flowdpt/ndgrad/ops.hpp"

namespace flowdpt::runtime {

HeadKind parse_head(const std::string& s) {
  if (s == "flow") return HeadKind::flow;
  if (s == "gaussian") return HeadKind::gaussian;
  throw std::invalid_argument("unknown head '" + s + "' (expected flow or gaussian)");
}

std::string to_string(HeadKind h) { return h == HeadKind::flow ? "flow" : "gaussian"; }

Mode parse_mode(const std::string& s) {
  if (s == "online") return Mode::online;
  if (s == "offline") return Mode::offline;
  throw std::invalid_argument("unknown mode '" + s + "' (expected online or offline)");
}

std::string to_string(Mode m) { return m == Mode::online ? "online" : "offline"; }

void ModelConfig::validate() const {
  backbone.validate();
  if (d_gamma < 4 || d_gamma % 2 != 0) throw std::invalid_argument("ModelConfig: d_gamma must be even and >= 4");
  if (!(f_min > 0.0 && f_min < f_max)) throw std::invalid_argument("ModelConfig: need 0 < f_min < f_max");
  if (groups.empty()) throw std::invalid_argument("ModelConfig: no task groups");
  for (std::size_t i = 0; i < groups.size(); ++i) {
    groups[i].validate(backbone.d_model);
    for (std::size_t k = 0; k < i; ++k) {
      if (groups[k].id == groups[i].id) throw std::invalid_argument("ModelConfig: duplicate group '" + groups[i].id + "'");
    }
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"backbone", c.backbone}, {"head", to_string(c.head)}, {"d_gamma", c.d_gamma},
       {"f_min", c.f_min},       {"f_max", c.f_max},         {"groups", c.groups}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  if (j.contains("backbone")) c.backbone = j.at("backbone").get<backbone::BackboneConfig>();
  if (j.contains("head")) c.head = parse_head(j.at("head").get<std::string>());
  c.d_gamma = j.value("d_gamma", c.d_gamma);
  c.f_min = j.value("f_min", c.f_min);
  c.f_max = j.value("f_max", c.f_max);
  if (j.contains("groups")) c.groups = j.at("groups").get<std::vector<codec::TaskGroup>>();
}

std::vector<codec::TaskGroup> groups_from_dataset(const data::Dataset& ds, std::size_t d_model) {
  std::vector<codec::TaskGroup> out;
  for (const auto& id : ds.group_ids()) {
    const data::ShardManifest* first = nullptr;
    for (const auto& s : ds.shards) {
      if (s.manifest.group_id != id) continue;
      if (!first) {
        first = &s.manifest;
        continue;
      }
      if (s.manifest.obs_dim != first->obs_dim || s.manifest.act_dim != first->act_dim ||
          s.manifest.reward_scale != first->reward_scale) {
        throw std::invalid_argument("group '" + id + "': shards disagree on dimensions or reward scale");
      }
    }
    out.push_back({id, first->obs_dim, first->act_dim, codec::SliceWidths::defaults(d_model),
                   first->reward_scale});
  }
  return out;
}

Model::Model(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg), init_seed_(init_seed) {
  cfg_.validate();
  const Rng root(init_seed);
  Rng rb = root.stream("backbone");
  backbone_ = std::make_unique<backbone::Backbone>(store_, cfg_.backbone, rb);
  time_ = flow::TimeEmbedding(store_, cfg_.d_gamma, cfg_.f_min, cfg_.f_max);
  nd::Array bos({1, cfg_.backbone.d_model});
  Rng r_bos = root.stream("bos");
  for (double& x : bos.data()) x = 0.02 * r_bos.normal();
  bos_ = &store_.add("bos", std::move(bos));

  const std::size_t d = cfg_.backbone.d_model;
  const nd::Activation actv = cfg_.backbone.activation;
  for (const auto& grp : cfg_.groups) {
    Rng rc = root.stream("codec", 0).stream(grp.id);
    Rng rh = root.stream("head", 0).stream(grp.id);
    GroupHeads heads{codec::GroupCodec(store_, grp, d, actv, rc), {}, {}};
    if (cfg_.head == HeadKind::flow) {
      heads.field = flow::VectorField(store_, grp.id, cfg_.d_gamma, d, grp.act_dim, actv, rh);
    } else {
      heads.gaussian = flow::GaussianHead(store_, grp.id, d, grp.act_dim, actv, rh);
    }
    groups_.emplace(grp.id, std::move(heads));
  }
}

const Model::GroupHeads& Model::group(const std::string& id) const {
  auto it = groups_.find(id);
  if (it == groups_.end()) throw std::out_of_range("model has no task group '" + id + "'");
  return it->second;
}

nd::Var Model::supervised_hidden(nd::Graph& g, const std::string& group_id,
                                 std::span<const data::TrainingSample> samples) const {
  if (samples.empty()) throw std::invalid_argument("supervised_hidden: empty batch");
  const GroupHeads& heads = group(group_id);
  const codec::TaskGroup& grp = heads.codec.group();
  const std::size_t B = samples.size();
  const std::size_t L = samples[0].context.size();
  if (L > max_context()) {
    throw std::invalid_argument("context of " + std::to_string(L) + " transitions exceeds the model limit " +
                                std::to_string(max_context()));
  }

  // Context arrays keep one spare row so that L = 0 still has a valid shape.
  nd::Array q_obs({B, grp.obs_dim});
  const std::size_t n_ctx = std::max<std::size_t>(B * L, 1);
  nd::Array c_obs({n_ctx, grp.obs_dim}), c_act({n_ctx, grp.act_dim}), c_rew({n_ctx, 1});
  for (std::size_t b = 0; b < B; ++b) {
    const auto& s = samples[b];
    if (s.context.size() != L) throw std::invalid_argument("supervised_hidden: samples differ in context length");
    if (s.query_obs.size() != grp.obs_dim) {
      throw nd::ShapeError("supervised_hidden(query)", {1, grp.obs_dim}, {1, s.query_obs.size()});
    }
    std::copy(s.query_obs.begin(), s.query_obs.end(), q_obs.row_span(b).begin());
    for (std::size_t i = 0; i < L; ++i) {
      const env::Transition& t = s.context[i];
      if (t.obs.size() != grp.obs_dim || t.action.size() != grp.act_dim) {
        throw std::invalid_argument("supervised_hidden: context transition has wrong dimensions");
      }
      std::copy(t.obs.begin(), t.obs.end(), c_obs.row_span(b * L + i).begin());
      std::copy(t.action.begin(), t.action.end(), c_act.row_span(b * L + i).begin());
      c_rew.at(b * L + i, 0) = t.reward;
    }
  }

  std::vector<nd::Var> parts = {g.param(*bos_), heads.codec.encode_queries(g, q_obs)};
  if (L > 0) parts.push_back(heads.codec.encode_transitions(g, c_obs, c_act, c_rew));
  nd::Var table = nd::concat_rows(parts);

  // Row layout of the table: BOS, B queries, then B blocks of L context
  // tokens in the sampled order.
  const std::size_t T = L + 2;
  std::vector<std::size_t> order;
  order.reserve(B * T);
  for (std::size_t b = 0; b < B; ++b) {
    order.push_back(0);
    order.push_back(1 + b);
    for (std::size_t i = 0; i < L; ++i) order.push_back(1 + B + b * L + i);
  }
  nd::Var hidden = backbone_->forward(nd::gather_rows(table, order), T);

  std::vector<std::size_t> supervised;
  supervised.reserve(B * (L + 1));
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t j = 1; j < T; ++j) supervised.push_back(b * T + j);
  }
  return nd::gather_rows(hidden, supervised);
}

nd::Var Model::loss(nd::Graph& g, const data::Batch& batch, Rng& rng) const {
  const GroupHeads& heads = group(batch.group_id);
  nd::Var h = supervised_hidden(g, batch.group_id, batch.samples);
  const std::size_t per = h.rows() / batch.samples.size();
  const std::size_t ad = heads.codec.group().act_dim;
  nd::Array a_star({h.rows(), ad});
  for (std::size_t b = 0; b < batch.samples.size(); ++b) {
    const auto& a = batch.samples[b].a_star;
    if (a.size() != ad) throw nd::ShapeError("Model::loss(a_star)", {1, ad}, {1, a.size()});
    for (std::size_t j = 0; j < per; ++j) std::copy(a.begin(), a.end(), a_star.row_span(b * per + j).begin());
  }
  if (cfg_.head == HeadKind::flow) return flow::rf_loss(heads.field, time_, h, a_star, rng);
  return heads.gaussian.nll(h, a_star);
}

nd::Array Model::last_hidden(const std::string& group_id, std::span<const double> obs,
                             std::span<const env::Transition> context) const {
  if (context.size() > max_context()) {
    throw std::invalid_argument("context of " + std::to_string(context.size()) +
                                " transitions exceeds the model limit " + std::to_string(max_context()));
  }
  const GroupHeads& heads = group(group_id);
  const codec::TaskGroup& grp = heads.codec.group();
  nd::Graph g(nd::GradMode::disabled);
  std::vector<nd::Var> rows = {g.param(*bos_), heads.codec.encode_query(g, obs)};
  if (!context.empty()) {
    const std::size_t n = context.size();
    nd::Array c_obs({n, grp.obs_dim}), c_act({n, grp.act_dim}), c_rew({n, 1});
    for (std::size_t i = 0; i < n; ++i) {
      const env::Transition& t = context[i];
      if (t.obs.size() != grp.obs_dim || t.action.size() != grp.act_dim) {
        throw std::invalid_argument("context transition has wrong dimensions for group '" + grp.id + "'");
      }
      std::copy(t.obs.begin(), t.obs.end(), c_obs.row_span(i).begin());
      std::copy(t.action.begin(), t.action.end(), c_act.row_span(i).begin());
      c_rew.at(i, 0) = t.reward;
    }
    rows.push_back(heads.codec.encode_transitions(g, c_obs, c_act, c_rew));
  }
  nd::Var hidden = backbone_->forward(nd::concat_rows(rows));
  return nd::slice_rows(hidden, hidden.rows() - 1, hidden.rows()).value();
}

nd::Array Model::sample_actions(const std::string& group_id, std::span<const double> obs,
                                std::span<const env::Transition> context, std::size_t n,
                                const flow::FlowConfig& flow, Rng& rng) const {
  const GroupHeads& heads = group(group_id);
  nd::Array h = last_hidden(group_id, obs, context);
  if (cfg_.head == HeadKind::flow) {
    return flow::sample_actions(flow::conditioned_field(heads.field, time_, std::move(h)),
                                heads.codec.group().act_dim, n, flow, rng);
  }
  nd::Array hs({n, h.cols()});
  for (std::size_t i = 0; i < n; ++i) std::copy(h.data().begin(), h.data().end(), hs.row_span(i).begin());
  return heads.gaussian.sample(hs, rng);
}

std::vector<double> act(const Model& model, const std::string& group,
                        std::span<const env::Transition> context, std::span<const double> obs,
                        const flow::FlowConfig& flow, Rng& rng) {
  return model.sample_actions(group, obs, context, 1, flow, rng).row_vector(0);
}

void save_model(const std::filesystem::path& manifest, const Model& model, const nd::AdamState* adam,
                const nlohmann::json& extra) {
  nlohmann::json meta = extra.is_object() ? extra : nlohmann::json::object();
  meta["model"] = model.config();
  meta["init_seed"] = model.init_seed();
  nd::save_checkpoint(manifest, model.params(), adam, meta);
}

LoadedModel load_model(const std::filesystem::path& manifest) {
  const nd::CheckpointContents ckpt = nd::read_checkpoint(manifest);
  if (!ckpt.metadata.contains("model")) {
    throw nd::CheckpointError("checkpoint " + manifest.string() + " carries no model config");
  }
  LoadedModel out;
  out.model = std::make_unique<Model>(ckpt.metadata.at("model").get<ModelConfig>(),
                                      ckpt.metadata.value("init_seed", std::uint64_t{0}));
  nd::load_parameters(out.model->params(), ckpt);
  out.adam = nd::load_adam_state(out.model->params(), ckpt);
  out.metadata = ckpt.metadata;
  return out;
}

void TrainerConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("TrainerConfig: lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("TrainerConfig: betas must lie in [0, 1)");
  }
  if (!(clip_norm > 0.0)) throw std::invalid_argument("TrainerConfig: clip_norm must be positive");
  if (batch_size == 0) throw std::invalid_argument("TrainerConfig: batch_size must be positive");
}

void to_json(nlohmann::json& j, const TrainerConfig& c) {
  j = {{"lr", c.lr},
       {"betas", {c.beta1, c.beta2}},
       {"clip_norm", c.clip_norm},
       {"batch_size", c.batch_size},
       {"steps", c.steps},
       {"context_len", c.context_len},
       {"seed", c.seed},
       {"checkpoint_every", c.checkpoint_every},
       {"sampler", c.sampler}};
}

void from_json(const nlohmann::json& j, TrainerConfig& c) {
  c = TrainerConfig{};
  c.lr = j.value("lr", c.lr);
  if (j.contains("betas")) {
    const auto b = j.at("betas").get<std::vector<double>>();
    if (b.size() != 2) throw std::invalid_argument("TrainerConfig: betas needs two values");
    c.beta1 = b[0];
    c.beta2 = b[1];
  }
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.steps = j.value("steps", c.steps);
  c.context_len = j.value("context_len", c.context_len);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  if (j.contains("sampler")) c.sampler = j.at("sampler").get<data::SamplerOptions>();
}

std::vector<LossRecord> train(Model& model, nd::AdamState& adam, const TrainerConfig& cfg,
                              const data::Dataset& dataset, const TrainHooks& hooks) {
  cfg.validate();
  if (cfg.context_len > model.max_context()) {
    throw std::invalid_argument("TrainerConfig: context_len " + std::to_string(cfg.context_len) +
                                " exceeds the model limit " + std::to_string(model.max_context()));
  }
  nd::ParameterStore& store = model.params();
  if (adam.m.size() != store.size()) adam = nd::AdamState(store);
  std::vector<LossRecord> records;
  if (static_cast<std::size_t>(adam.step) >= cfg.steps) return records;

  const data::Sampler sampler(dataset, cfg.context_len, cfg.sampler);
  for (std::size_t s : sampler.eligible()) model.group(dataset.shards[s].manifest.group_id);

  const nd::AdamConfig ac{cfg.lr, cfg.beta1, cfg.beta2, 1e-8};
  nd::GradientSet grads(store);
  const Rng base = Rng(cfg.seed).stream("train");
  for (auto step = adam.step + 1; step <= static_cast<std::int64_t>(cfg.steps); ++step) {
    const std::vector<nd::Array> good_params = store.snapshot();
    const nd::AdamState good_adam = adam;
    const Rng r = base.stream(static_cast<std::uint64_t>(step));
    Rng r_batch = r.stream("batch");
    Rng r_noise = r.stream("noise");
    const data::Batch batch = sampler.sample(cfg.batch_size, r_batch);

    double loss_value = 0.0;
    try {
      nd::Graph g;
      nd::Var loss = model.loss(g, batch, r_noise);
      loss_value = loss.value().item();
      if (!std::isfinite(loss_value)) throw flow::NonFiniteLoss("loss is " + std::to_string(loss_value));
      g.backward(loss);
      grads.zero();
      g.accumulate_gradients(grads);
      nd::clip_global_norm(grads, cfg.clip_norm);
      nd::adam_step(store, grads, adam, ac);
      for (std::size_t i = 0; i < store.size(); ++i) {
        if (!store.at(i).value.all_finite()) {
          throw std::runtime_error("parameter '" + store.at(i).name + "' became non-finite");
        }
      }
    } catch (const std::runtime_error& ex) {
      store.restore(good_params);
      adam = good_adam;
      throw TrainingDiverged(step, ex.what());
    }
    records.push_back({step, loss_value});
    if (hooks.on_step) hooks.on_step(records.back());
    if (cfg.checkpoint_every > 0 && step % static_cast<std::int64_t>(cfg.checkpoint_every) == 0 &&
        hooks.on_checkpoint) {
      hooks.on_checkpoint(step);
    }
  }
  return records;
}

void ContextBuffer::push(env::Transition t) {
  ++pushes_;
  if (capacity_ == 0) return;
  if (entries_.size() == capacity_) entries_.erase(entries_.begin());
  entries_.push_back(std::move(t));
}

void InferenceConfig::validate(const Model& model) const {
  if (flow.steps == 0) throw std::invalid_argument("InferenceConfig: flow steps must be positive");
  if (episodes == 0) throw std::invalid_argument("InferenceConfig: episodes must be positive");
  if (context_len > model.max_context()) {
    throw std::invalid_argument("InferenceConfig: context_len " + std::to_string(context_len) +
                                " exceeds the model limit " + std::to_string(model.max_context()));
  }
}

namespace {

std::vector<double> clipped(std::vector<double> a, double bound) {
  for (double& x : a) x = std::clamp(x, -bound, bound);
  return a;
}

}  // namespace

std::vector<double> rollout_online(const Model& model, const env::TaskInstance& task,
                                   const InferenceConfig& cfg, const Rng& rng,
                                   const ContextObserver& observer) {
  cfg.validate(model);
  ContextBuffer buffer(cfg.context_len == 0 ? model.max_context() : cfg.context_len);
  std::vector<double> returns;
  returns.reserve(cfg.episodes);
  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    const Rng re = rng.stream("episode", e);
    Rng r_env = re.stream("env");
    Rng r_act = re.stream("act");
    if (cfg.reset_context) buffer.clear();
    env::EnvState state = env::reset(task, r_env);
    std::vector<double> obs = env::observe(task, state);
    double total = 0.0;
    for (std::size_t t = 0; t < task.horizon; ++t) {
      if (observer) observer(e, t, buffer.entries());
      std::vector<double> a =
          clipped(act(model, task.group_id, buffer.entries(), obs, cfg.flow, r_act), task.action_bound);
      env::StepResult res = env::step(task, state, a, r_env);
      total += res.reward;
      buffer.push({std::move(obs), std::move(a), res.reward});
      obs = std::move(res.obs);
      if (res.done) break;
    }
    returns.push_back(total);
  }
  return returns;
}

std::vector<double> rollout_offline(const Model& model, const env::TaskInstance& task,
                                    std::span<const env::Transition> prompt,
                                    const InferenceConfig& cfg, const Rng& rng,
                                    const ContextObserver& observer) {
  cfg.validate(model);
  if (prompt.size() > model.max_context()) {
    throw std::invalid_argument("offline prompt of " + std::to_string(prompt.size()) +
                                " transitions exceeds the model limit " + std::to_string(model.max_context()));
  }
  std::vector<double> returns;
  returns.reserve(cfg.episodes);
  for (std::size_t e = 0; e < cfg.episodes; ++e) {
    const Rng re = rng.stream("episode", e);
    Rng r_env = re.stream("env");
    Rng r_act = re.stream("act");
    env::EnvState state = env::reset(task, r_env);
    std::vector<double> obs = env::observe(task, state);
    double total = 0.0;
    for (std::size_t t = 0; t < task.horizon; ++t) {
      if (observer) observer(e, t, prompt);
      const std::vector<double> a = act(model, task.group_id, prompt, obs, cfg.flow, r_act);
      env::StepResult res = env::step(task, state, a, r_env);
      total += res.reward;
      obs = std::move(res.obs);
      if (res.done) break;
    }
    returns.push_back(total);
  }
  return returns;
}

std::vector<env::Transition> demonstrator_prompt(const env::TaskInstance& task, std::size_t n,
                                                 const Rng& rng) {
  std::vector<env::Transition> out;
  out.reserve(n);
  for (std::size_t e = 0; out.size() < n; ++e) {
    Rng r = rng.stream("episode", e);
    env::EnvState state = env::reset(task, r);
    std::vector<double> obs = env::observe(task, state);
    for (std::size_t t = 0; t < task.horizon && out.size() < n; ++t) {
      std::vector<double> a = clipped(env::demonstrator_action(task, obs, r), task.action_bound);
      env::StepResult res = env::step(task, state, a, r);
      out.push_back({std::move(obs), std::move(a), res.reward});
      obs = std::move(res.obs);
      if (res.done) break;
    }
  }
  return out;
}

void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(n, std::max<std::size_t>(jobs, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!error) error = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(work);
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace flowdpt::runtime
