// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace tvcache {

inline constexpr char kUnitSeparator = '\x1f';
inline constexpr char kRecordSeparator = '\x1e';

/// One tool invocation: the cache key element.
struct ToolDescriptor {
  std::string tool_name;
  std::string args_canonical;
  bool mutates_state = true;

  /// Builds a descriptor from structured arguments, canonicalizing them.
  static ToolDescriptor make(std::string tool_name, const nlohmann::json& args, bool mutates_state);

  /// tool_name US args_canonical US ("M" | "P"). Injective over valid descriptors.
  std::string key() const;

  /// Parses args_canonical back into JSON (throws MalformedArgs).
  nlohmann::json args() const;

  friend bool operator==(const ToolDescriptor&, const ToolDescriptor&) = default;
};

using Trajectory = std::vector<ToolDescriptor>;
using TrajectoryView = std::span<const ToolDescriptor>;

/// Sorted keys, no insignificant whitespace, shortest round-trip numbers.
std::string canonicalize_args(const nlohmann::json& args);

/// Throws InvalidDescriptor when the name is empty or either field carries a separator.
void validate(const ToolDescriptor& descriptor);

/// Descriptor keys joined by the record separator.
std::string encode_trajectory(TrajectoryView trajectory);

/// Inverse of encode_trajectory; throws InvalidDescriptor on malformed input.
Trajectory decode_trajectory(std::string_view encoded);

std::uint64_t trajectory_hash(TrajectoryView trajectory);

/// The state-mutating subsequence, order preserved.
Trajectory filter_stateful(TrajectoryView trajectory);

nlohmann::json to_json(const ToolDescriptor& descriptor);
ToolDescriptor descriptor_from_json(const nlohmann::json& j);

}  // namespace tvcache
