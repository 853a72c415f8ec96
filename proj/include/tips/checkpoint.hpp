#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tips/model.hpp"
#include "tips/tensor.hpp"

namespace tips {

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, version_mismatch, truncated, malformed, architecture_mismatch };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

inline constexpr char kCheckpointMagic[8] = {'T', 'I', 'P', 'S', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/**
 * Layout (little-endian): magic[8], u32 version, u64 epoch, u32 config length,
 * config bytes, u32 tensor count, then per tensor: u32 name length, name
 * bytes (UTF-8), u32 rank, u64 dims[rank], f32 payload.
 */
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::uint64_t epoch = 0;
  std::string config_text;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

class ByteWriter {
 public:
  template <typename U>
  void put(U v) {
    static_assert(std::is_integral_v<U> || std::is_same_v<U, float>);
    if constexpr (std::is_same_v<U, float>) {
      put(std::bit_cast<std::uint32_t>(v));
    } else {
      for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
    }
  }
  void bytes(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class ByteReader {
 public:
  explicit ByteReader(const std::string& in) : in_(in) {}

  template <typename U>
  U get(const char* what) {
    if constexpr (std::is_same_v<U, float>) {
      return std::bit_cast<float>(get<std::uint32_t>(what));
    } else {
      need(sizeof(U), what);
      std::uint64_t v = 0;
      for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in_[pos_ + i])) << (8 * i);
      pos_ += sizeof(U);
      return static_cast<U>(v);
    }
  }
  std::string bytes(const char* what) {
    const auto n = get<std::uint32_t>(what);
    need(n, what);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void need(std::size_t n, const char* what) const {
    if (in_.size() - pos_ < n) throw CheckpointError(CheckpointError::Kind::truncated, std::string("checkpoint truncated while reading ") + what);
  }
  bool done() const { return pos_ == in_.size(); }
  std::size_t remaining() const { return in_.size() - pos_; }

 private:
  const std::string& in_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const Checkpoint& c) {
  detail::ByteWriter w;
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  w.put(c.version);
  w.put(c.epoch);
  w.bytes(c.config_text);
  w.put(static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    w.bytes(name);
    w.put(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) w.put(static_cast<std::uint64_t>(d));
    for (float v : t.data()) w.put(v);
  }
  return out + w.take();
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  using Kind = CheckpointError::Kind;
  if (bytes.size() < sizeof kCheckpointMagic) throw CheckpointError(Kind::truncated, "checkpoint truncated while reading magic");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof kCheckpointMagic) != 0) {
    throw CheckpointError(Kind::bad_magic, "not a checkpoint: bad magic");
  }
  const std::string body = bytes.substr(sizeof kCheckpointMagic);
  detail::ByteReader r(body);
  Checkpoint c;
  c.version = r.get<std::uint32_t>("version");
  if (c.version != kCheckpointVersion) {
    throw CheckpointError(Kind::version_mismatch, "checkpoint version " + std::to_string(c.version) + ", expected " +
                                                      std::to_string(kCheckpointVersion));
  }
  c.epoch = r.get<std::uint64_t>("epoch");
  c.config_text = r.bytes("config");
  const auto count = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.bytes("tensor name");
    const auto rank = r.get<std::uint32_t>("tensor rank");
    if (rank == 0) throw CheckpointError(Kind::malformed, "tensor '" + name + "' has rank 0");
    Shape shape;
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      const auto e = r.get<std::uint64_t>("tensor dims");
      if (e == 0) throw CheckpointError(Kind::malformed, "tensor '" + name + "' has a zero extent");
      shape.push_back(static_cast<std::size_t>(e));
      n *= e;
    }
    if (n > r.remaining() / 4) throw CheckpointError(Kind::truncated, "checkpoint truncated in payload of '" + name + "'");
    std::vector<float> data(n);
    for (auto& v : data) v = r.get<float>("tensor payload");
    c.tensors.emplace_back(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  if (!r.done()) throw CheckpointError(Kind::malformed, "trailing bytes after checkpoint");
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "cannot write " + path);
  const std::string bytes = encode_checkpoint(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError(CheckpointError::Kind::io, "write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::io, "cannot read " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
Checkpoint make_checkpoint(const Model<T>& model, const std::string& config_text, std::uint64_t epoch) {
  Checkpoint c;
  c.epoch = epoch;
  c.config_text = config_text;
  for (const auto& [name, v] : model.named_state()) c.tensors.emplace_back(name, cast<float>(v));
  return c;
}

/// Loads parameters into a model; any name or shape disagreement names the tensor.
template <typename T>
void apply_checkpoint(Model<T>& model, const Checkpoint& c) {
  using Kind = CheckpointError::Kind;
  const auto params = model.named_state();
  std::vector<Tensor<T>> values;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params[i].first;
    if (i >= c.tensors.size()) throw CheckpointError(Kind::architecture_mismatch, "checkpoint lacks tensor '" + name + "'");
    if (c.tensors[i].first != name) {
      throw CheckpointError(Kind::architecture_mismatch,
                            "checkpoint tensor '" + c.tensors[i].first + "' where model expects '" + name + "'");
    }
    if (c.tensors[i].second.shape() != params[i].second.shape()) {
      throw CheckpointError(Kind::architecture_mismatch, "tensor '" + name + "': checkpoint shape " +
                                                             to_string(c.tensors[i].second.shape()) + ", model shape " +
                                                             to_string(params[i].second.shape()));
    }
    values.push_back(cast<T>(c.tensors[i].second));
  }
  if (c.tensors.size() > params.size()) {
    throw CheckpointError(Kind::architecture_mismatch, "checkpoint has extra tensor '" + c.tensors[params.size()].first + "'");
  }
  model.restore(values);
}

}  // namespace tips
