#include "flowdpt/datagen.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include "flowdpt/log.hpp"

namespace flowdpt::data {
namespace {

constexpr char kMagic[8] = {'F', 'D', 'P', 'T', 'S', 'H', 'R', 'D'};

std::uint32_t crc(const std::uint8_t* p, std::size_t n) {
  uLong c = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    c = crc32(c, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(c);
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }
float get_f32(const std::uint8_t* p) { return std::bit_cast<float>(get_u32(p)); }

std::size_t record_floats(const ShardManifest& m) { return m.obs_dim + 2 * m.act_dim + 1; }

std::vector<float> to_float(std::span<const double> v) {
  return std::vector<float>(v.begin(), v.end());
}

std::vector<double> to_double(const std::vector<float>& v) {
  return std::vector<double>(v.begin(), v.end());
}

void write_file_atomic(const std::filesystem::path& path, const void* data, std::size_t n) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ShardError(ShardError::Kind::io, "cannot write " + tmp.string());
    f.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    if (!f) throw ShardError(ShardError::Kind::io, "short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

// Position k of a virtual array holding the candidate indices of
// [lo, hi) with `skip` removed (skip outside the range removes nothing).
struct CandidateRange {
  std::size_t lo, hi, skip;
  std::size_t size() const { return hi - lo - ((skip >= lo && skip < hi) ? 1 : 0); }
  std::size_t at(std::size_t k) const {
    std::size_t idx = lo + k;
    if (skip >= lo && skip < hi && idx >= skip) ++idx;
    return idx;
  }
};

}  // namespace

void NoiseSchedule::validate() const {
  if (levels.empty()) throw std::invalid_argument("NoiseSchedule: no noise levels");
  if (episodes_per_level == 0) throw std::invalid_argument("NoiseSchedule: episodes_per_level must be positive");
  bool has_zero = false;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (!std::isfinite(levels[i]) || levels[i] < 0.0) {
      throw std::invalid_argument("NoiseSchedule: noise levels must be finite and non-negative");
    }
    if (i > 0 && levels[i] <= levels[i - 1]) {
      throw std::invalid_argument("NoiseSchedule: noise levels must be strictly increasing");
    }
    has_zero = has_zero || levels[i] == 0.0;
  }
  if (!has_zero) throw std::invalid_argument("NoiseSchedule: levels must include sigma = 0");
}

void to_json(nlohmann::json& j, const NoiseSchedule& s) {
  j = {{"noise_levels", s.levels}, {"episodes_per_level", s.episodes_per_level}};
}

void from_json(const nlohmann::json& j, NoiseSchedule& s) {
  s = NoiseSchedule{};
  if (j.contains("noise_levels")) s.levels = j.at("noise_levels").get<std::vector<double>>();
  if (j.contains("episodes_per_level")) s.episodes_per_level = j.at("episodes_per_level").get<std::size_t>();
}

void to_json(nlohmann::json& j, const ShardManifest& m) {
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& l : m.levels) {
    levels.push_back({{"sigma", l.sigma}, {"begin", l.begin}, {"end", l.end},
                      {"episodes", l.episodes}, {"mean_return", l.mean_return}});
  }
  j = {{"format_version", m.format_version}, {"task_id", m.task_id}, {"group_id", m.group_id},
       {"obs_dim", m.obs_dim}, {"act_dim", m.act_dim}, {"reward_scale", m.reward_scale},
       {"n_transitions", m.n_transitions}, {"task", m.task}, {"levels", levels}};
}

void from_json(const nlohmann::json& j, ShardManifest& m) {
  m.format_version = j.at("format_version").get<std::uint32_t>();
  m.task_id = j.at("task_id").get<std::string>();
  m.group_id = j.at("group_id").get<std::string>();
  m.obs_dim = j.at("obs_dim").get<std::size_t>();
  m.act_dim = j.at("act_dim").get<std::size_t>();
  m.reward_scale = j.at("reward_scale").get<double>();
  m.n_transitions = j.at("n_transitions").get<std::size_t>();
  m.task = j.value("task", nlohmann::json());
  m.levels.clear();
  for (const auto& l : j.at("levels")) {
    m.levels.push_back({l.at("sigma").get<double>(), l.at("begin").get<std::size_t>(),
                        l.at("end").get<std::size_t>(), l.at("episodes").get<std::size_t>(),
                        l.at("mean_return").get<double>()});
  }
}

void Shard::validate() const {
  const auto& m = manifest;
  if (m.n_transitions != records.size()) {
    throw std::invalid_argument("shard '" + m.task_id + "': manifest counts " +
                                std::to_string(m.n_transitions) + " transitions, shard holds " +
                                std::to_string(records.size()));
  }
  for (const auto& r : records) {
    if (r.obs.size() != m.obs_dim || r.action.size() != m.act_dim || r.a_star.size() != m.act_dim) {
      throw std::invalid_argument("shard '" + m.task_id + "': record dimensions disagree with manifest");
    }
  }
  std::size_t expect = 0;
  for (const auto& l : m.levels) {
    if (l.begin != expect || l.end < l.begin || l.end > records.size()) {
      throw std::invalid_argument("shard '" + m.task_id + "': noise level ranges are not contiguous");
    }
    expect = l.end;
  }
  if (!m.levels.empty() && expect != records.size()) {
    throw std::invalid_argument("shard '" + m.task_id + "': noise level ranges do not cover the shard");
  }
}

CollectError::CollectError(std::string task_id, std::size_t episode, const std::string& what)
    : std::runtime_error("collect '" + task_id + "' episode " + std::to_string(episode) + ": " + what),
      task_id_(std::move(task_id)),
      episode_(episode) {}

Shard collect_cnd(const env::TaskInstance& task, const NoiseSchedule& schedule, const Rng& rng) {
  schedule.validate();
  Shard shard;
  auto& m = shard.manifest;
  m.task_id = task.id;
  m.group_id = task.group_id;
  m.obs_dim = task.obs_dim();
  m.act_dim = task.act_dim();
  m.reward_scale = task.reward_scale;
  m.task = task;

  std::size_t episode = 0;
  for (double sigma : schedule.levels) {
    LevelStats level;
    level.sigma = sigma;
    level.begin = shard.records.size();
    double total = 0.0;
    for (std::size_t e = 0; e < schedule.episodes_per_level; ++e, ++episode) {
      Rng r = rng.stream("episode", episode);
      try {
        env::EnvState s = env::reset(task, r);
        std::vector<double> obs = env::observe(task, s);
        for (std::size_t t = 0; t < task.horizon; ++t) {
          std::vector<double> a_star = env::demonstrator_action(task, obs, r);
          std::vector<double> a = a_star;
          for (double& x : a) {
            x = std::clamp(x + sigma * r.normal(), -task.action_bound, task.action_bound);
          }
          env::StepResult step = env::step(task, s, a, r);
          total += step.reward;
          shard.records.push_back(
              {to_float(obs), to_float(a), static_cast<float>(step.reward), to_float(a_star)});
          obs = std::move(step.obs);
          if (step.done) break;
        }
      } catch (const std::exception& ex) {
        throw CollectError(task.id, episode, ex.what());
      }
    }
    level.end = shard.records.size();
    level.episodes = schedule.episodes_per_level;
    level.mean_return = total / static_cast<double>(schedule.episodes_per_level);
    m.levels.push_back(level);
  }
  m.n_transitions = shard.records.size();
  return shard;
}

const char* to_string(ShardError::Kind kind) {
  switch (kind) {
    case ShardError::Kind::io: return "io";
    case ShardError::Kind::version_mismatch: return "version_mismatch";
    case ShardError::Kind::truncated: return "truncated";
    case ShardError::Kind::checksum: return "checksum";
    case ShardError::Kind::malformed: return "malformed";
  }
  return "?";
}

std::filesystem::path manifest_path(const std::filesystem::path& shard_path) {
  auto p = shard_path;
  p.replace_extension(".json");
  return p;
}

void write_shard(const std::filesystem::path& path, const Shard& shard) {
  shard.validate();
  const auto& m = shard.manifest;
  if (m.format_version != kShardFormatVersion) {
    throw ShardError(ShardError::Kind::version_mismatch,
                     "write_shard: unsupported format_version " + std::to_string(m.format_version));
  }
  const std::string manifest = nlohmann::json(m).dump();

  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kShardFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(manifest.size()));
  out.insert(out.end(), manifest.begin(), manifest.end());
  put_u32(out, crc(out.data(), out.size()));

  out.reserve(out.size() + shard.records.size() * record_floats(m) * 4 +
              (shard.records.size() / kRecordsPerGroup + 1) * 4);
  for (std::size_t g = 0; g < shard.records.size(); g += kRecordsPerGroup) {
    const std::size_t start = out.size();
    const std::size_t end = std::min(shard.records.size(), g + kRecordsPerGroup);
    for (std::size_t i = g; i < end; ++i) {
      const Record& r = shard.records[i];
      for (float f : r.obs) put_f32(out, f);
      for (float f : r.action) put_f32(out, f);
      put_f32(out, r.reward);
      for (float f : r.a_star) put_f32(out, f);
    }
    put_u32(out, crc(out.data() + start, out.size() - start));
  }
  write_file_atomic(path, out.data(), out.size());
  const std::string pretty = nlohmann::json(m).dump(2) + "\n";
  write_file_atomic(manifest_path(path), pretty.data(), pretty.size());
}

Shard read_shard(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ShardError(ShardError::Kind::io, "cannot open shard " + path.string());
  const std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const std::string where = "shard " + path.string() + ": ";

  constexpr std::size_t kFixed = sizeof(kMagic) + 8;
  if (buf.size() < kFixed) throw ShardError(ShardError::Kind::truncated, where + "file shorter than header");
  if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw ShardError(ShardError::Kind::malformed, where + "bad magic");
  }
  const std::uint32_t version = get_u32(buf.data() + 8);
  if (version != kShardFormatVersion) {
    throw ShardError(ShardError::Kind::version_mismatch,
                     where + "format version " + std::to_string(version) + ", expected " +
                         std::to_string(kShardFormatVersion));
  }
  const std::size_t mlen = get_u32(buf.data() + 12);
  if (buf.size() < kFixed + mlen + 4) throw ShardError(ShardError::Kind::truncated, where + "manifest cut short");
  if (crc(buf.data(), kFixed + mlen) != get_u32(buf.data() + kFixed + mlen)) {
    throw ShardError(ShardError::Kind::checksum, where + "header checksum mismatch");
  }

  Shard shard;
  try {
    shard.manifest = nlohmann::json::parse(buf.begin() + kFixed, buf.begin() + kFixed + mlen)
                         .get<ShardManifest>();
  } catch (const nlohmann::json::exception& ex) {
    throw ShardError(ShardError::Kind::malformed, where + "bad manifest: " + ex.what());
  }
  const auto& m = shard.manifest;
  if (m.format_version != kShardFormatVersion) {
    throw ShardError(ShardError::Kind::version_mismatch, where + "manifest format version mismatch");
  }

  const std::size_t rf = record_floats(m);
  const std::size_t n = m.n_transitions;
  const std::size_t groups = (n + kRecordsPerGroup - 1) / kRecordsPerGroup;
  const std::size_t expected = kFixed + mlen + 4 + n * rf * 4 + groups * 4;
  if (buf.size() < expected) {
    throw ShardError(ShardError::Kind::truncated, where + "expected " + std::to_string(expected) +
                                                      " bytes, found " + std::to_string(buf.size()));
  }
  if (buf.size() > expected) throw ShardError(ShardError::Kind::malformed, where + "trailing bytes");

  std::size_t pos = kFixed + mlen + 4;
  shard.records.reserve(n);
  for (std::size_t g = 0; g < n; g += kRecordsPerGroup) {
    const std::size_t count = std::min(n, g + kRecordsPerGroup) - g;
    const std::size_t bytes = count * rf * 4;
    if (crc(buf.data() + pos, bytes) != get_u32(buf.data() + pos + bytes)) {
      throw ShardError(ShardError::Kind::checksum,
                       where + "checksum mismatch in record group " + std::to_string(g / kRecordsPerGroup));
    }
    const std::uint8_t* p = buf.data() + pos;
    auto take = [&p](std::size_t k) {
      std::vector<float> v(k);
      for (float& x : v) {
        x = get_f32(p);
        p += 4;
      }
      return v;
    };
    for (std::size_t i = 0; i < count; ++i) {
      Record r;
      r.obs = take(m.obs_dim);
      r.action = take(m.act_dim);
      r.reward = take(1)[0];
      r.a_star = take(m.act_dim);
      shard.records.push_back(std::move(r));
    }
    pos += bytes + 4;
  }
  try {
    shard.validate();
  } catch (const std::invalid_argument& ex) {
    throw ShardError(ShardError::Kind::malformed, where + ex.what());
  }
  return shard;
}

std::size_t Dataset::n_transitions() const {
  std::size_t n = 0;
  for (const auto& s : shards) n += s.records.size();
  return n;
}

std::vector<std::string> Dataset::group_ids() const {
  std::vector<std::string> ids;
  for (const auto& s : shards) ids.push_back(s.manifest.group_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw std::runtime_error("dataset directory " + dir.string() + " does not exist");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".shard") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  Dataset ds;
  for (const auto& p : files) ds.shards.push_back(read_shard(p));
  return ds;
}

void to_json(nlohmann::json& j, const SamplerOptions& o) {
  j = {{"exclude_query", o.exclude_query}, {"mix_noise_levels", o.mix_noise_levels}};
}

void from_json(const nlohmann::json& j, SamplerOptions& o) {
  o = SamplerOptions{};
  o.exclude_query = j.value("exclude_query", o.exclude_query);
  o.mix_noise_levels = j.value("mix_noise_levels", o.mix_noise_levels);
}

Sampler::Sampler(const Dataset& dataset, std::size_t context_len, SamplerOptions options)
    : dataset_(dataset), context_len_(context_len), options_(options) {
  const std::size_t need = context_len + 1;
  for (std::size_t i = 0; i < dataset.shards.size(); ++i) {
    const auto& s = dataset.shards[i];
    bool ok = s.records.size() >= need;
    if (ok && !options.mix_noise_levels) {
      ok = std::any_of(s.manifest.levels.begin(), s.manifest.levels.end(),
                       [need](const LevelStats& l) { return l.end - l.begin >= need; });
    }
    if (!ok) {
      log_warning("task '" + s.manifest.task_id + "' has too few transitions for context length " +
                  std::to_string(context_len) + "; skipped");
      continue;
    }
    eligible_.push_back(i);
    auto it = std::find_if(groups_.begin(), groups_.end(),
                           [&](const GroupPool& g) { return g.id == s.manifest.group_id; });
    if (it == groups_.end()) {
      groups_.push_back({s.manifest.group_id, {}, {}});
      it = groups_.end() - 1;
    }
    const double prev = it->cumulative.empty() ? 0.0 : it->cumulative.back();
    it->shards.push_back(i);
    it->cumulative.push_back(prev + static_cast<double>(s.records.size()));
  }
  if (eligible_.empty()) {
    throw std::runtime_error("Sampler: no task has at least " + std::to_string(need) + " transitions");
  }
  for (const auto& g : groups_) {
    const double prev = group_cumulative_.empty() ? 0.0 : group_cumulative_.back();
    group_cumulative_.push_back(prev + g.cumulative.back());
  }
}

namespace {

std::size_t pick_weighted(const std::vector<double>& cumulative, Rng& rng) {
  const double u = rng.uniform() * cumulative.back();
  const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
  return std::min<std::size_t>(static_cast<std::size_t>(it - cumulative.begin()), cumulative.size() - 1);
}

}  // namespace

TrainingSample Sampler::sample_from(std::size_t shard_index, Rng& rng) const {
  const Shard& shard = dataset_.shards.at(shard_index);
  const std::size_t need = context_len_ + 1;

  std::size_t lo = 0, hi = shard.records.size();
  std::size_t query;
  if (options_.mix_noise_levels) {
    query = rng.uniform_index(hi);
  } else {
    std::vector<double> cumulative;
    std::vector<const LevelStats*> levels;
    for (const auto& l : shard.manifest.levels) {
      if (l.end - l.begin < need) continue;
      levels.push_back(&l);
      cumulative.push_back((cumulative.empty() ? 0.0 : cumulative.back()) + double(l.end - l.begin));
    }
    const std::size_t total = static_cast<std::size_t>(cumulative.back());
    std::size_t k = rng.uniform_index(total);
    std::size_t li = 0;
    while (k >= levels[li]->end - levels[li]->begin) {
      k -= levels[li]->end - levels[li]->begin;
      ++li;
    }
    lo = levels[li]->begin;
    hi = levels[li]->end;
    query = lo + k;
  }

  // Partial Fisher-Yates over the candidates: an ordered uniform draw of L
  // distinct transitions, so the result is already uniformly permuted.
  const CandidateRange cand{lo, hi, options_.exclude_query ? query : hi};
  std::unordered_map<std::size_t, std::size_t> swapped;
  auto slot = [&](std::size_t k) {
    auto it = swapped.find(k);
    return it == swapped.end() ? k : it->second;
  };

  TrainingSample out;
  out.shard = shard_index;
  const Record& q = shard.records[query];
  out.query_obs = to_double(q.obs);
  out.a_star = to_double(q.a_star);
  out.context.reserve(context_len_);
  const std::size_t m = cand.size();
  for (std::size_t i = 0; i < context_len_; ++i) {
    const std::size_t j = i + rng.uniform_index(m - i);
    const std::size_t vi = slot(i), vj = slot(j);
    swapped[i] = vj;
    swapped[j] = vi;
    const Record& r = shard.records[cand.at(vj)];
    out.context.push_back({to_double(r.obs), to_double(r.action), static_cast<double>(r.reward)});
  }
  return out;
}

Batch Sampler::sample(std::size_t batch_size, Rng& rng) const {
  const GroupPool& group = groups_[pick_weighted(group_cumulative_, rng)];
  Batch batch;
  batch.group_id = group.id;
  batch.samples.reserve(batch_size);
  for (std::size_t b = 0; b < batch_size; ++b) {
    const std::size_t shard = group.shards[pick_weighted(group.cumulative, rng)];
    batch.samples.push_back(sample_from(shard, rng));
  }
  return batch;
}

Batch sample_batch(const Dataset& dataset, std::size_t context_len, std::size_t batch_size,
                   Rng& rng, SamplerOptions options) {
  return Sampler(dataset, context_len, options).sample(batch_size, rng);
}

}  // namespace flowdpt::data
