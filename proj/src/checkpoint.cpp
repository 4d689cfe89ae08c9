#include "terra/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "terra/common.hpp"

namespace terra::core {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are unsupported");

namespace {

template <class T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) raise_io("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise_io("checkpoint: cannot open for writing: " + path);
  out.write(kCheckpointMagic, 4);
  write_pod<uint32_t>(out, kCheckpointVersion);
  write_pod<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    check_input(name.size() <= 65535, "checkpoint: tensor name too long");
    write_pod<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_pod<uint8_t>(out, static_cast<uint8_t>(tensor.ndim()));
    for (int64_t e : tensor.shape) write_pod<int64_t>(out, e);
  }
  for (const auto& [name, tensor] : tensors) {
    out.write(reinterpret_cast<const char*>(tensor.data.data()),
              static_cast<std::streamsize>(tensor.data.size() * sizeof(float)));
  }
  if (!out) raise_io("checkpoint: write failed: " + path);
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise_io("checkpoint: cannot open: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    raise_io("checkpoint: bad magic in " + path);
  }
  auto version = read_pod<uint32_t>(in);
  if (version != kCheckpointVersion) {
    raise_io("checkpoint: unsupported schema version " + std::to_string(version));
  }
  auto count = read_pod<uint32_t>(in);
  std::vector<std::pair<std::string, std::vector<int64_t>>> table;
  table.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    auto name_len = read_pod<uint16_t>(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    auto ndim = read_pod<uint8_t>(in);
    std::vector<int64_t> shape(ndim);
    for (auto& e : shape) e = read_pod<int64_t>(in);
    table.emplace_back(std::move(name), std::move(shape));
  }
  std::map<std::string, Tensor> out;
  for (auto& [name, shape] : table) {
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
    if (!in) raise_io("checkpoint: truncated payload in " + path);
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace terra::core
