// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <json.hpp>

#include <string>
#include <string_view>

namespace tvcache {

enum class ToolStatus { ok, tool_error };

std::string_view to_string(ToolStatus status);
ToolStatus parse_tool_status(std::string_view text);

struct ToolResult {
  std::string payload;
  ToolStatus status = ToolStatus::ok;
  double exec_ms = 0.0;

  // Bitwise identity of what a tool returned; exec_ms is a measurement, not content.
  bool same_value(const ToolResult& other) const {
    return payload == other.payload && status == other.status;
  }
};

nlohmann::json to_json(const ToolResult& result);
ToolResult result_from_json(const nlohmann::json& j);

}  // namespace tvcache
