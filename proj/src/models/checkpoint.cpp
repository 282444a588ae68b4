#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"
#include "mrt/models.hpp"

namespace mrt {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in host byte order");

namespace {

constexpr char kMagic[8] = {'M', 'R', 'T', 'C', 'K', 'P', 'T', '1'};

using nlohmann::json;

json hyper_json(const HyperParams& h) {
  return {{"channels", h.channels},
          {"latent_dim", h.latent_dim},
          {"frames", h.frames},
          {"variant", to_string(h.variant)}};
}

HyperParams hyper_from(const json& j) {
  HyperParams h;
  h.channels = j.at("channels").get<std::array<std::size_t, 3>>();
  h.latent_dim = j.at("latent_dim").get<std::size_t>();
  h.frames = j.at("frames").get<std::size_t>();
  h.variant = parse_up_variant(j.at("variant").get<std::string>());
  return h;
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  json header;
  header["hyper"] = hyper_json(ckpt.hyper);
  header["parent"] = ckpt.parent;
  header["meta"] = ckpt.meta;
  json list = json::array();
  for (const NamedTensor& t : ckpt.tensors) list.push_back({{"name", t.name}, {"shape", t.value.shape()}});
  header["tensors"] = std::move(list);
  const std::string text = header.dump();

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot create " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const NamedTensor& t : ckpt.tensors) {
      out.write(reinterpret_cast<const char*>(t.value.ptr()), static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    }
    out.close();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const auto corrupt = [&](const std::string& why) { return IoError(path.string() + ": corrupt checkpoint: " + why); };

  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw corrupt("bad magic");
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof len)) throw corrupt("missing header length");
  const auto file_size = std::filesystem::file_size(path);
  if (len > file_size) throw corrupt("header length exceeds file size");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) throw corrupt("truncated header");

  Checkpoint ckpt;
  try {
    const json header = json::parse(text);
    ckpt.hyper = hyper_from(header.at("hyper"));
    ckpt.parent = header.at("parent").get<std::vector<int>>();
    ckpt.meta = header.at("meta").get<std::map<std::string, std::string>>();
    for (const json& t : header.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      Tensor value(shape);
      if (!in.read(reinterpret_cast<char*>(value.ptr()), static_cast<std::streamsize>(value.size() * sizeof(double)))) {
        throw corrupt("truncated payload at tensor " + t.at("name").get<std::string>());
      }
      ckpt.tensors.push_back({t.at("name").get<std::string>(), std::move(value)});
    }
  } catch (const json::exception& e) {
    throw corrupt(e.what());
  } catch (const ShapeError& e) {
    throw corrupt(e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw corrupt("trailing bytes");
  return ckpt;
}

void append_params(std::vector<NamedTensor>& out, const std::string& prefix, const ModelParams<Tensor>& params) {
  ModelParams<Tensor>::visit(params, [&](const std::string& name, const Tensor& t) { out.push_back({prefix + "." + name, t}); });
}

ModelParams<Tensor> extract_params(const Checkpoint& ckpt, const std::string& prefix) {
  std::map<std::string, const Tensor*> by_name;
  for (const NamedTensor& t : ckpt.tensors) by_name[t.name] = &t.value;
  ModelParams<Tensor> p;
  ModelParams<Tensor>::visit(p, [&](const std::string& name, Tensor& t) {
    auto it = by_name.find(prefix + "." + name);
    if (it == by_name.end()) throw Error("checkpoint is missing tensor " + prefix + "." + name);
    t = *it->second;
  });
  return p;
}

}  // namespace mrt
