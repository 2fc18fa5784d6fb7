#pragma once

// Binary checkpoint format (all integers little-endian):
//
//   "MCSD"                  4-byte magic
//   u16 version             currently 1
//   u32 parameter count
//   per parameter, in canonical model order:
//     u16 name length, UTF-8 name bytes
//     u8 rank, u32 dims[rank]
//     f32 payload[product(dims)]
//
// Canonical order: stem.weight, stem.bias, then for b = 1..3
// block<b>.conv1.weight, block<b>.conv1.bias, block<b>.conv2.weight,
// block<b>.conv2.bias, and finally head.weight, head.bias.

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mcsad/tensor.hpp"

namespace mcsad {

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  bool operator==(const NamedTensor&) const = default;
};

struct Checkpoint {
  static constexpr std::string_view kMagic = "MCSD";
  static constexpr std::uint16_t kVersion = 1;

  std::vector<NamedTensor> params;

  std::vector<std::uint8_t> serialize() const;
  static Checkpoint deserialize(std::span<const std::uint8_t> bytes);

  /// Exact serialized length: header + per-parameter records.
  std::size_t byte_size() const;

  const NamedTensor* find(std::string_view name) const;
  /// Parameters whose names start with `prefix`, in order.
  Checkpoint subset(std::string_view prefix) const;

  bool operator==(const Checkpoint&) const = default;
};

}  // namespace mcsad
