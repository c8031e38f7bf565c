#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "transmix/harness.hpp"

namespace transmix {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'T', 'M', 'X', 'C', 'K', 'P', 'T', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

void put_f64(std::ostream& os, double d) { put_u64(os, std::bit_cast<std::uint64_t>(d)); }

double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  json header;
  header["format"] = 1;
  header["digest"] = ckpt.digest;
  header["config"] = ckpt.config;
  header["counters"] = ckpt.counters;
  header["text"] = ckpt.text;
  header["tensors"] = json::array();
  for (const auto& [name, t] : ckpt.tensors) header["tensors"].push_back(json{{"name", name}, {"shape", t.shape()}});
  const std::string h = header.dump();

  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot write " + tmp);
    os.write(kMagic, sizeof kMagic);
    put_u64(os, h.size());
    os.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (const auto& [name, t] : ckpt.tensors)
      for (Index i = 0; i < t.numel(); ++i) put_f64(os, t[i]);
    if (!os) throw std::runtime_error("checkpoint: write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path, const std::optional<std::string>& expected_digest) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("checkpoint: cannot open " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("checkpoint: " + path + " is not a checkpoint file");
  }
  const std::uint64_t len = get_u64(is);
  if (len > (std::uint64_t(1) << 32)) throw std::runtime_error("checkpoint: implausible header length");
  std::string h(len, '\0');
  if (!is.read(h.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("checkpoint: truncated header");
  const json header = json::parse(h);

  Checkpoint ck;
  ck.digest = header.at("digest").get<std::string>();
  ck.config = header.at("config");
  ck.counters = header.at("counters").get<std::map<std::string, std::int64_t>>();
  ck.text = header.at("text").get<std::map<std::string, std::string>>();

  const std::string recomputed = config_digest(config_from_json(ck.config));
  if (recomputed != ck.digest) {
    throw DigestMismatch("checkpoint " + path + ": stored digest " + ck.digest +
                         " does not match its configuration (digest " + recomputed + ")");
  }
  if (expected_digest && *expected_digest != ck.digest) {
    throw DigestMismatch("checkpoint " + path + ": digest " + ck.digest + " differs from expected " +
                         *expected_digest);
  }
  for (const auto& entry : header.at("tensors")) {
    TensorD t(entry.at("shape").get<Shape>());
    for (Index i = 0; i < t.numel(); ++i) t[i] = get_f64(is);
    ck.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: trailing bytes in " + path);
  return ck;
}

}  // namespace transmix
