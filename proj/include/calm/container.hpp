#pragma once

// "CALM1" binary container: model checkpoints, EWC task penalties and
// optimizer state. Layout, all integers and floats little-endian:
//
//   "CALM1"                         5 bytes
//   u32 format version              currently 1
//   u32 metadata count, then per entry: u32 key length, key bytes,
//                                       u32 value length, value bytes
//   u64 tensor count, then per tensor:  u32 name length, name bytes,
//                                       u32 rank, u64 extent per axis,
//                                       f64 values (IEEE-754 binary64)

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "calm/tensor.hpp"

namespace calm {

inline constexpr std::string_view kContainerMagic = "CALM1";
inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(std::string_view name) const;
  /// Metadata value; throws CheckpointError if absent.
  const std::string& meta(const std::string& key) const;

  friend bool operator==(const Container&, const Container&) = default;
};

std::string encode_container(const Container& c);
/// Throws CheckpointError on a bad magic, unknown version or truncation.
Container decode_container(std::string_view bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

}  // namespace calm
