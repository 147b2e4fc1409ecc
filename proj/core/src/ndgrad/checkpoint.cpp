#include "flowdpt/ndgrad/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <unordered_map>

namespace flowdpt::nd {
namespace {

constexpr int kFormatVersion = 1;

void put_f64(std::vector<char>& out, double x) {
  auto bits = std::bit_cast<std::uint64_t>(x);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return std::bit_cast<double>(bits);
}

void write_file_atomic(const std::filesystem::path& path, const char* data, std::size_t n) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw CheckpointError("cannot open " + tmp.string() + " for writing");
    f.write(data, static_cast<std::streamsize>(n));
    if (!f) throw CheckpointError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace

std::filesystem::path checkpoint_blob_path(const std::filesystem::path& manifest) {
  auto p = manifest;
  p.replace_extension(".bin");
  return p;
}

void save_checkpoint(const std::filesystem::path& manifest, const ParameterStore& params,
                     const AdamState* adam, const nlohmann::json& metadata) {
  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  std::vector<char> blob;
  blob.reserve(8 * params.total_elements() * (adam ? 3 : 1));
  nlohmann::json tensors = nlohmann::json::array();
  auto emit = [&](const std::string& name, const std::string& role, const Array& a) {
    tensors.push_back({{"name", name},
                       {"role", role},
                       {"shape", a.shape()},
                       {"dtype", "f64"},
                       {"offset", blob.size()}});
    for (double x : a.data()) put_f64(blob, x);
  };
  for (std::size_t i = 0; i < params.size(); ++i) emit(params.at(i).name, "param", params.at(i).value);
  if (adam) {
    if (adam->m.size() != params.size()) {
      throw CheckpointError("save_checkpoint: optimizer state does not match parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) emit(params.at(i).name, "adam_m", adam->m[i]);
    for (std::size_t i = 0; i < params.size(); ++i) emit(params.at(i).name, "adam_v", adam->v[i]);
  }
  const auto blob_path = checkpoint_blob_path(manifest);
  nlohmann::json doc = {
      {"format", "flowdpt-checkpoint"},
      {"format_version", kFormatVersion},
      {"byte_order", "little"},
      {"blob", blob_path.filename().string()},
      {"blob_bytes", blob.size()},
      {"tensors", tensors},
      {"optimizer", adam ? nlohmann::json{{"type", "adam"}, {"step", adam->step}}
                         : nlohmann::json(nullptr)},
      {"metadata", metadata},
  };
  write_file_atomic(blob_path, blob.data(), blob.size());
  const std::string text = doc.dump(2) + "\n";
  write_file_atomic(manifest, text.data(), text.size());
}

CheckpointContents read_checkpoint(const std::filesystem::path& manifest) {
  std::ifstream mf(manifest);
  if (!mf) throw CheckpointError("cannot open checkpoint manifest " + manifest.string());
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(mf);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError("malformed checkpoint manifest " + manifest.string() + ": " + e.what());
  }
  if (doc.value("format", "") != "flowdpt-checkpoint") {
    throw CheckpointError(manifest.string() + " is not a flowdpt checkpoint manifest");
  }
  if (doc.value("format_version", 0) != kFormatVersion) {
    throw CheckpointError("unsupported checkpoint format_version in " + manifest.string());
  }
  const auto blob_path = manifest.parent_path() / doc.at("blob").get<std::string>();
  std::ifstream bf(blob_path, std::ios::binary);
  if (!bf) throw CheckpointError("cannot open checkpoint blob " + blob_path.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(bf)), std::istreambuf_iterator<char>());
  if (blob.size() != doc.at("blob_bytes").get<std::size_t>()) {
    throw CheckpointError("checkpoint blob " + blob_path.string() + " has unexpected size");
  }

  CheckpointContents out;
  out.metadata = doc.value("metadata", nlohmann::json::object());
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& t : doc.at("tensors")) {
    if (t.at("dtype") != "f64") throw CheckpointError("unsupported tensor dtype in checkpoint");
    Shape shape = t.at("shape").get<Shape>();
    const std::size_t off = t.at("offset").get<std::size_t>();
    const std::size_t n = shape_size(shape);
    if (off + 8 * n > blob.size()) throw CheckpointError("tensor extends past end of blob");
    std::vector<double> data(n);
    for (std::size_t i = 0; i < n; ++i) data[i] = get_f64(blob.data() + off + 8 * i);
    Array a(std::move(shape), std::move(data));
    const std::string name = t.at("name").get<std::string>();
    const std::string role = t.at("role").get<std::string>();
    if (role == "param") {
      index.emplace(name, out.params.size());
      out.params.push_back({name, std::move(a)});
    } else if (role == "adam_m") {
      out.adam_m.push_back(std::move(a));
    } else if (role == "adam_v") {
      out.adam_v.push_back(std::move(a));
    } else {
      throw CheckpointError("unknown tensor role '" + role + "'");
    }
  }
  if (!doc.at("optimizer").is_null()) {
    out.adam_step = doc.at("optimizer").at("step").get<std::int64_t>();
    if (out.adam_m.size() != out.params.size() || out.adam_v.size() != out.params.size()) {
      throw CheckpointError("optimizer moments do not match parameter count");
    }
  }
  return out;
}

void load_parameters(ParameterStore& params, const CheckpointContents& ckpt) {
  if (ckpt.params.size() != params.size()) {
    throw CheckpointError("checkpoint has " + std::to_string(ckpt.params.size()) +
                          " parameters, model expects " + std::to_string(params.size()));
  }
  for (const auto& [name, value] : ckpt.params) {
    if (!params.contains(name)) throw CheckpointError("checkpoint parameter '" + name + "' unknown to model");
    Parameter& p = params.get(name);
    if (p.value.shape() != value.shape()) throw ShapeError("load_parameters(" + name + ")", p.value.shape(), value.shape());
    p.value = value;
  }
}

AdamState load_adam_state(const ParameterStore& params, const CheckpointContents& ckpt) {
  AdamState st(params);
  if (!ckpt.adam_step) return st;
  for (std::size_t k = 0; k < ckpt.params.size(); ++k) {
    const std::size_t i = params.get(ckpt.params[k].name).index;
    st.m[i] = ckpt.adam_m[k];
    st.v[i] = ckpt.adam_v[k];
  }
  st.step = *ckpt.adam_step;
  return st;
}

}  // namespace flowdpt::nd
