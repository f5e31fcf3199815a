#include "distilseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <mutex>

#include "distilseg/error.hpp"

namespace distilseg {

namespace {

constexpr char kMagic[8] = {'D', 'S', 'C', 'K', 'P', 'T', '0', '1'};

std::mutex g_open_mu;
std::vector<std::filesystem::path> g_opened;

}  // namespace

Checkpoint to_checkpoint(const nlohmann::json& meta, const nn::ParamStore& params) {
  Checkpoint c;
  c.meta = meta;
  for (const auto& p : params) c.tensors.emplace_back(p.name, p.value);
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const nlohmann::json& meta, const nn::ParamStore& params) {
  save_checkpoint(path, to_checkpoint(meta, params));
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  nlohmann::json head;
  head["meta"] = ckpt.meta;
  head["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    head["tensors"].push_back({{"name", name}, {"dims", t.dims}, {"offset", offset}, {"count", t.data.size()}});
    offset += t.data.size();
  }
  const std::string text = head.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out.write(kMagic, 8);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : ckpt.tensors) {
      out.write(reinterpret_cast<const char*>(t.data.data()), static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    }
    if (!out) throw IoError("short write on checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  {
    std::lock_guard lock(g_open_mu);
    g_opened.push_back(path);
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, 8);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw IoError(path.string() + " is not a checkpoint");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw IoError("truncated checkpoint header in " + path.string());
  nlohmann::json head;
  try {
    head = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  Checkpoint c;
  c.meta = head.at("meta");
  const auto payload_start = in.tellg();
  for (const auto& e : head.at("tensors")) {
    nn::Tensor t(e.at("dims").get<nn::Dims>());
    const auto count = e.at("count").get<std::uint64_t>();
    if (count != t.data.size()) throw IoError("tensor size mismatch in " + path.string());
    in.seekg(payload_start + static_cast<std::streamoff>(e.at("offset").get<std::uint64_t>() * sizeof(float)));
    in.read(reinterpret_cast<char*>(t.data.data()), static_cast<std::streamsize>(count * sizeof(float)));
    if (!in) throw IoError("truncated checkpoint payload in " + path.string());
    c.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
  }
  return c;
}

void load_into(const Checkpoint& ckpt, nn::ParamStore& params) {
  if (ckpt.tensors.size() != params.size()) {
    throw ConfigError("checkpoint has " + std::to_string(ckpt.tensors.size()) + " tensors, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = ckpt.tensors[i];
    if (name != params[i].name || t.dims != params[i].value.dims) {
      throw ConfigError("checkpoint tensor " + name + " " + nn::dims_str(t.dims) + " does not match model tensor " +
                        params[i].name + " " + nn::dims_str(params[i].value.dims));
    }
    params[i].value = t;
  }
}

std::vector<std::filesystem::path> opened_checkpoints() {
  std::lock_guard lock(g_open_mu);
  return g_opened;
}

void clear_opened_checkpoints() {
  std::lock_guard lock(g_open_mu);
  g_opened.clear();
}

}  // namespace distilseg
