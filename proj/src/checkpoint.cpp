#include "convsr/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace convsr {

static_assert(std::endian::native == std::endian::little);

namespace {

constexpr char kMagic[8] = {'C', 'V', 'S', 'R', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint64_t kMaxName = 4096;

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T get(std::istream& in, const std::string& path, const char* what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v))
    throw Error(ErrorKind::kParse, path + ": truncated checkpoint while reading " + what);
  return v;
}

}  // namespace

void Checkpoint::add(const std::string& name, std::span<const double> values) {
  if (has(name)) throw Error(ErrorKind::kConfiguration, "duplicate checkpoint tensor: " + name);
  tensors.emplace_back(name, std::vector<double>(values.begin(), values.end()));
}

void Checkpoint::add(const ParameterList& params) {
  for (const auto& p : params) add(p.name, p.values);
}

bool Checkpoint::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& t) { return t.first == name; });
}

const std::vector<double>& Checkpoint::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.first == name) return t.second;
  throw Error(ErrorKind::kParse, "checkpoint has no tensor '" + name + "'");
}

void Checkpoint::restore(const ParameterList& params) const {
  for (const auto& p : params) {
    const auto& v = tensor(p.name);
    if (v.size() != p.values.size())
      throw Error(ErrorKind::kDimension, "checkpoint tensor '" + p.name + "' has " +
                                             std::to_string(v.size()) + " values, model expects " +
                                             std::to_string(p.values.size()));
    std::copy(v.begin(), v.end(), p.values.begin());
  }
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot write checkpoint: " + path);
  out.write(kMagic, sizeof kMagic);
  put<std::uint32_t>(out, kVersion);
  const std::string meta = ckpt.meta.dump();
  put<std::uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put<std::uint64_t>(out, ckpt.tensors.size());
  for (const auto& [name, values] : ckpt.tensors) {
    put<std::uint64_t>(out, name.size());
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint64_t>(out, values.size());
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size() * sizeof(double)));
  }
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open checkpoint: " + path);
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw Error(ErrorKind::kParse, path + ": not a checkpoint file");
  const auto version = get<std::uint32_t>(in, path, "version");
  if (version != kVersion)
    throw Error(ErrorKind::kParse, path + ": unsupported checkpoint version " + std::to_string(version));

  in.seekg(0, std::ios::end);
  const auto file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(sizeof kMagic + sizeof(std::uint32_t));
  auto check_len = [&](std::uint64_t n, const char* what) {
    const auto pos = static_cast<std::uint64_t>(in.tellg());
    if (n > file_size - pos)
      throw Error(ErrorKind::kParse, path + ": " + what + " length exceeds file size");
  };

  Checkpoint c;
  const auto meta_len = get<std::uint64_t>(in, path, "metadata length");
  check_len(meta_len, "metadata");
  std::string meta(meta_len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta_len));
  try {
    c.meta = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kParse, path + ": bad checkpoint metadata: " + e.what());
  }
  const auto count = get<std::uint64_t>(in, path, "tensor count");
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint64_t>(in, path, "tensor name length");
    if (name_len > kMaxName) throw Error(ErrorKind::kParse, path + ": tensor name too long");
    check_len(name_len, "tensor name");
    std::string name(name_len, '\0');
    in.read(name.data(), static_cast<std::streamsize>(name_len));
    const auto n = get<std::uint64_t>(in, path, "tensor size");
    if (n > (file_size / sizeof(double))) throw Error(ErrorKind::kParse, path + ": tensor '" + name + "' too large");
    check_len(n * sizeof(double), "tensor data");
    std::vector<double> values(n);
    if (!in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(n * sizeof(double))))
      throw Error(ErrorKind::kParse, path + ": truncated tensor '" + name + "'");
    c.tensors.emplace_back(std::move(name), std::move(values));
  }
  return c;
}

}  // namespace convsr
