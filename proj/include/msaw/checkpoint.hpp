#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "msaw/data/pgm.hpp"
#include "msaw/errors.hpp"
#include "msaw/model.hpp"

// Binary layout, all integers little-endian:
//   "MSAW01"
//   u64 epoch
//   u32 config length, config JSON bytes
//   u32 tensor count
//   per tensor: u32 name length, name, u32 rank, u32 extents[rank], u64 payload byte offset
//   payload: float32 values, tensors back to back

namespace msaw {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[] = "MSAW01";

struct CheckpointTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::uint64_t epoch = 0;
  std::string config;  // JSON echo of the run configuration
  std::vector<CheckpointTensor> tensors;

  const CheckpointTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

template <typename T>
Checkpoint make_checkpoint(Model<T>& model, std::string config, std::uint64_t epoch) {
  Checkpoint ck{epoch, std::move(config), {}};
  for (auto& nt : model.named_tensors()) {
    CheckpointTensor ct{nt.name, nt.tensor.shape(), {}};
    ct.values.reserve(nt.tensor.size());
    for (T v : nt.tensor.data()) ct.values.push_back(static_cast<float>(v));
    ck.tensors.push_back(std::move(ct));
  }
  return ck;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out(kCheckpointMagic, 6);
  auto put = [&](auto value) {
    char buf[sizeof(value)];
    std::memcpy(buf, &value, sizeof(value));
    out.append(buf, sizeof(value));
  };
  put(ck.epoch);
  put(static_cast<std::uint32_t>(ck.config.size()));
  out += ck.config;
  put(static_cast<std::uint32_t>(ck.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& t : ck.tensors) {
    if (numel(t.shape) != t.values.size()) throw ContractError("checkpoint tensor " + t.name + " has inconsistent size");
    put(static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put(static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t e : t.shape) put(static_cast<std::uint32_t>(e));
    put(offset);
    offset += t.values.size() * sizeof(float);
  }
  for (const auto& t : ck.tensors)
    out.append(reinterpret_cast<const char*>(t.values.data()), t.values.size() * sizeof(float));
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint") {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (bytes.size() - pos < n) throw TruncationError(origin + ": file is truncated at byte " + std::to_string(bytes.size()));
  };
  auto get = [&]<typename U>(U) {
    need(sizeof(U));
    U value;
    std::memcpy(&value, bytes.data() + pos, sizeof(U));
    pos += sizeof(U);
    return value;
  };
  auto get_string = [&](std::size_t n) {
    need(n);
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  };
  if (bytes.size() < 6 || bytes.compare(0, 6, kCheckpointMagic) != 0)
    throw CheckpointError(origin + ": bad magic, not an MSAW01 checkpoint");
  pos = 6;
  Checkpoint ck;
  ck.epoch = get(std::uint64_t{});
  ck.config = get_string(get(std::uint32_t{}));
  const std::uint32_t count = get(std::uint32_t{});
  std::vector<std::uint64_t> offsets;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = get_string(get(std::uint32_t{}));
    const std::uint32_t rank = get(std::uint32_t{});
    if (rank == 0 || rank > 8) throw CheckpointError(origin + ": tensor " + t.name + " has invalid rank");
    for (std::uint32_t r = 0; r < rank; ++r) t.shape.push_back(get(std::uint32_t{}));
    offsets.push_back(get(std::uint64_t{}));
    ck.tensors.push_back(std::move(t));
  }
  const std::size_t payload = pos;
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    auto& t = ck.tensors[i];
    if (offsets[i] != expected) throw CheckpointError(origin + ": tensor " + t.name + " has an unexpected offset");
    const std::size_t n = numel(t.shape);
    pos = payload + offsets[i];
    need(n * sizeof(float));
    t.values.resize(n);
    std::memcpy(t.values.data(), bytes.data() + pos, n * sizeof(float));
    expected += n * sizeof(float);
  }
  if (payload + expected != bytes.size()) throw CheckpointError(origin + ": trailing bytes after payload");
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  data::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(data::read_file(path), path.string());
}

/// Copies checkpoint values into a model; every model tensor must be present
/// with the same shape.
template <typename T>
void apply_checkpoint(const Checkpoint& ck, Model<T>& model) {
  auto named = model.named_tensors();
  if (named.size() != ck.tensors.size())
    throw CheckpointError("checkpoint holds " + std::to_string(ck.tensors.size()) + " tensors, model has " +
                          std::to_string(named.size()));
  for (auto& nt : named) {
    const CheckpointTensor* src = ck.find(nt.name);
    if (!src) throw CheckpointError("checkpoint is missing tensor " + nt.name);
    if (src->shape != nt.tensor.shape())
      throw CheckpointError("shape mismatch for tensor " + nt.name + ": checkpoint " + to_string(src->shape) +
                            ", model " + to_string(nt.tensor.shape()));
    auto dst = nt.tensor.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(src->values[i]);
  }
}

}  // namespace msaw
