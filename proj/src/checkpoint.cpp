#include "hydramix/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>

#include "hydramix/errors.hpp"

namespace hydramix {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'H', 'M', 'X', 'W'};
constexpr uint32_t kVersion = 1;

void write_bytes(std::ofstream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), std::streamsize(n));
  if (!out) throw IoError("checkpoint: write failed");
}

void read_bytes(std::ifstream& in, void* p, size_t n, const std::string& path) {
  in.read(static_cast<char*>(p), std::streamsize(n));
  if (in.gcount() != std::streamsize(n)) {
    throw IoError("checkpoint: truncated file " + path + " at byte offset " +
                  std::to_string(int64_t(in.tellg()) < 0 ? 0 : int64_t(in.tellg())));
  }
}

}  // namespace

void save_checkpoint(const std::string& path, const TensorMap& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");

  write_bytes(out, kMagic, 4);
  write_bytes(out, &kVersion, 4);
  uint32_t count = uint32_t(tensors.size());
  write_bytes(out, &count, 4);

  for (const auto& [name, tensor] : tensors) {
    if (!tensor.defined()) throw ArgumentError("checkpoint: undefined tensor '" + name + "'");
    if (name.size() > std::numeric_limits<uint16_t>::max()) {
      throw ArgumentError("checkpoint: tensor name too long: " + name.substr(0, 64) + "...");
    }
    uint16_t name_len = uint16_t(name.size());
    write_bytes(out, &name_len, 2);
    write_bytes(out, name.data(), name.size());
    uint8_t rank = uint8_t(tensor.rank());
    write_bytes(out, &rank, 1);
    for (int64_t e : tensor.shape()) {
      uint32_t extent = uint32_t(e);
      write_bytes(out, &extent, 4);
    }
    auto v = tensor.values();
    write_bytes(out, v.data(), v.size() * sizeof(float));
  }
  out.close();
  if (!out) throw IoError("checkpoint: failed to finalize " + path);
}

TensorMap load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + path);

  char magic[4];
  read_bytes(in, magic, 4, path);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw IoError("checkpoint: " + path + " is not a weight archive (bad magic)");
  }
  uint32_t version = 0;
  read_bytes(in, &version, 4, path);
  if (version != kVersion) {
    throw IoError("checkpoint: " + path + " has unsupported version " + std::to_string(version));
  }
  uint32_t count = 0;
  read_bytes(in, &count, 4, path);

  TensorMap result;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t name_len = 0;
    read_bytes(in, &name_len, 2, path);
    std::string name(name_len, '\0');
    read_bytes(in, name.data(), name_len, path);
    uint8_t rank = 0;
    read_bytes(in, &rank, 1, path);
    Shape shape(rank);
    for (uint8_t d = 0; d < rank; ++d) {
      uint32_t extent = 0;
      read_bytes(in, &extent, 4, path);
      shape[d] = extent;
    }
    int64_t numel = shape_numel(shape);
    std::vector<float> data(size_t(numel), 0.0f);
    read_bytes(in, data.data(), size_t(numel) * sizeof(float), path);
    if (result.count(name)) {
      throw IoError("checkpoint: duplicate tensor '" + name + "' in " + path);
    }
    result.emplace(name, Tensor::from_data(std::move(shape), std::move(data)));
  }
  // Trailing bytes mean the writer and reader disagree about the format.
  char extra;
  in.read(&extra, 1);
  if (in.gcount() != 0) {
    throw IoError("checkpoint: trailing bytes in " + path + " after " + std::to_string(count) +
                  " tensors");
  }
  return result;
}

}  // namespace hydramix
