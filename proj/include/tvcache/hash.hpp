// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace tvcache {

/// 64-bit FNV-1a. Stable across processes and platforms; used for shard
/// routing, file naming and logging, never for key equality.
constexpr std::uint64_t fnv1a64(std::string_view data) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string to_hex(std::uint64_t value);

inline std::size_t shard_for(std::string_view task_id, std::size_t shard_count) {
  return shard_count == 0 ? 0 : static_cast<std::size_t>(fnv1a64(task_id) % shard_count);
}

}  // namespace tvcache
