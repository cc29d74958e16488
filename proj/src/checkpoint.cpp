#include "qgn/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

using nlohmann::json;

namespace qgn {

namespace {

constexpr char kMagic[8] = {'Q', 'G', 'N', 'C', 'K', '0', '0', '1'};

json meta_to_json(const CheckpointMeta& m) {
  return {{"schema", m.schema}, {"kind", m.kind},       {"arch", m.arch},
          {"embed_dim", m.embed_dim}, {"qsse", m.qsse}, {"qrpn", m.qrpn},
          {"qsimnet", m.qsimnet},     {"step", m.step}, {"extra", m.extra}};
}

CheckpointMeta meta_from_json(const json& j) {
  CheckpointMeta m;
  m.schema = j.at("schema").get<int>();
  m.kind = j.at("kind").get<std::string>();
  m.arch = j.at("arch").get<std::string>();
  m.embed_dim = j.at("embed_dim").get<int>();
  m.qsse = j.at("qsse").get<bool>();
  m.qrpn = j.at("qrpn").get<bool>();
  m.qsimnet = j.at("qsimnet").get<bool>();
  m.step = j.at("step").get<long long>();
  m.extra = j.value("extra", json::object());
  return m;
}

void write_u64(std::ofstream& f, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  f.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::ifstream& f) {
  unsigned char b[8];
  f.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

json open_header(std::ifstream& f, const std::string& path) {
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error(path + ": not a checkpoint file");
  }
  std::uint64_t hlen = read_u64(f);
  std::string hdr(hlen, '\0');
  f.read(hdr.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw std::runtime_error(path + ": truncated header");
  return json::parse(hdr);
}

}  // namespace

void save_checkpoint(const std::string& path, const CheckpointMeta& meta,
                     const ParamStore& params,
                     const std::map<std::string, Tensor>& buffers) {
  json dir = json::array();
  for (const auto& [name, t] : params.all()) {
    dir.push_back({{"name", name}, {"shape", t.shape()}, {"param", true}});
  }
  for (const auto& [name, t] : buffers) {
    dir.push_back({{"name", name}, {"shape", t.shape()}, {"param", false}});
  }
  json header = meta_to_json(meta);
  header["tensors"] = dir;
  std::string hdr = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f.write(kMagic, 8);
  write_u64(f, hdr.size());
  f.write(hdr.data(), static_cast<std::streamsize>(hdr.size()));
  auto dump = [&f](const Tensor& t) {
    f.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
  };
  for (const auto& [name, t] : params.all()) dump(t);
  for (const auto& [name, t] : buffers) dump(t);
  if (!f) throw std::runtime_error("write failed: " + path);
}

CheckpointMeta peek_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  return meta_from_json(open_header(f, path));
}

CheckpointMeta load_checkpoint(const std::string& path, ParamStore* params,
                               std::map<std::string, Tensor>* buffers) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  json header = open_header(f, path);
  CheckpointMeta meta = meta_from_json(header);

  if (params) params->all_mut().clear();
  if (buffers) buffers->clear();
  for (const auto& entry : header.at("tensors")) {
    std::string name = entry.at("name").get<std::string>();
    std::vector<int> shape = entry.at("shape").get<std::vector<int>>();
    bool is_param = entry.at("param").get<bool>();
    Tensor t(shape);
    f.read(reinterpret_cast<char*>(t.data()),
           static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(t.numel())));
    if (!f) throw std::runtime_error(path + ": truncated tensor " + name);
    if (is_param) {
      if (params) params->all_mut().emplace(name, std::move(t));
    } else {
      if (buffers) buffers->emplace(name, std::move(t));
    }
  }
  return meta;
}

void require_compatible(const CheckpointMeta& got, const CheckpointMeta& expected) {
  std::string err;
  auto check = [&err](const std::string& field, const std::string& a, const std::string& b) {
    if (a != b) err += " " + field + " (checkpoint " + a + ", expected " + b + ")";
  };
  check("schema", std::to_string(got.schema), std::to_string(expected.schema));
  check("kind", got.kind, expected.kind);
  check("arch", got.arch, expected.arch);
  check("embed_dim", std::to_string(got.embed_dim), std::to_string(expected.embed_dim));
  check("qsse", got.qsse ? "on" : "off", expected.qsse ? "on" : "off");
  check("qrpn", got.qrpn ? "on" : "off", expected.qrpn ? "on" : "off");
  check("qsimnet", got.qsimnet ? "on" : "off", expected.qsimnet ? "on" : "off");
  if (!err.empty()) throw std::runtime_error("incompatible checkpoint:" + err);
}

}  // namespace qgn
