#include "mcsad/checkpoint.hpp"

#include <limits>

#include "mcsad/bytes.hpp"

namespace mcsad {

std::vector<std::uint8_t> Checkpoint::serialize() const {
  ByteWriter w;
  w.bytes().reserve(byte_size());
  w.raw(kMagic);
  w.u16(kVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    if (p.name.size() > std::numeric_limits<std::uint16_t>::max() || p.shape.size() > 255) {
      throw FormatError("parameter '" + p.name + "' cannot be encoded");
    }
    if (shape_numel(p.shape) != static_cast<Index>(p.values.size())) {
      throw ShapeError("parameter '" + p.name + "' has " + std::to_string(p.values.size()) +
                       " values for shape " + shape_string(p.shape));
    }
    w.u16(static_cast<std::uint16_t>(p.name.size()));
    w.raw(p.name);
    w.u8(static_cast<std::uint8_t>(p.shape.size()));
    for (Index d : p.shape) w.u32(static_cast<std::uint32_t>(d));
    for (float v : p.values) w.f32(v);
  }
  return w.take();
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < kMagic.size() || r.string(kMagic.size()) != kMagic) {
    throw CheckpointError(CheckpointError::Kind::BadMagic, "checkpoint magic mismatch");
  }
  const std::uint16_t version = r.u16();
  if (version != kVersion) {
    throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                          "checkpoint version " + std::to_string(version) + ", expected " +
                              std::to_string(kVersion));
  }
  Checkpoint ckpt;
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor p;
    p.name = r.string(r.u16());
    const std::uint8_t rank = r.u8();
    p.shape.resize(rank);
    for (auto& d : p.shape) d = static_cast<Index>(r.u32());
    const Index n = shape_numel(p.shape);
    if (static_cast<std::size_t>(n) > r.remaining() / 4) {
      throw CheckpointError(CheckpointError::Kind::Truncated,
                            "truncated payload for parameter '" + p.name + "'");
    }
    p.values.resize(static_cast<std::size_t>(n));
    for (auto& v : p.values) v = r.f32();
    ckpt.params.push_back(std::move(p));
  }
  if (r.remaining() != 0) {
    throw CheckpointError(CheckpointError::Kind::Truncated,
                          std::to_string(r.remaining()) + " trailing bytes after checkpoint");
  }
  return ckpt;
}

std::size_t Checkpoint::byte_size() const {
  std::size_t n = kMagic.size() + 2 + 4;
  for (const auto& p : params) n += 2 + p.name.size() + 1 + 4 * p.shape.size() + 4 * p.values.size();
  return n;
}

const NamedTensor* Checkpoint::find(std::string_view name) const {
  for (const auto& p : params) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

Checkpoint Checkpoint::subset(std::string_view prefix) const {
  Checkpoint out;
  for (const auto& p : params) {
    if (std::string_view(p.name).starts_with(prefix)) out.params.push_back(p);
  }
  return out;
}

}  // namespace mcsad
