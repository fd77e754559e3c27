// SPDX-License-Identifier: Apache-2.0
#include "tvcache/descriptor.hpp"

#include "tvcache/base64.hpp"
#include "tvcache/errors.hpp"
#include "tvcache/hash.hpp"
#include "tvcache/result.hpp"

namespace tvcache {

std::string canonicalize_args(const nlohmann::json& args) {
  // nlohmann::json keeps object keys in a std::map, so dump() is already
  // key-sorted; compact dump has no whitespace and doubles use shortest
  // round-trip formatting.
  return args.dump(-1, ' ', false, nlohmann::json::error_handler_t::strict);
}

ToolDescriptor ToolDescriptor::make(std::string tool_name, const nlohmann::json& args, bool mutates_state) {
  ToolDescriptor d{std::move(tool_name), canonicalize_args(args), mutates_state};
  validate(d);
  return d;
}

std::string ToolDescriptor::key() const {
  std::string k;
  k.reserve(tool_name.size() + args_canonical.size() + 3);
  k += tool_name;
  k += kUnitSeparator;
  k += args_canonical;
  k += kUnitSeparator;
  k += mutates_state ? 'M' : 'P';
  return k;
}

nlohmann::json ToolDescriptor::args() const {
  if (args_canonical.empty()) return nlohmann::json::object();
  try {
    return nlohmann::json::parse(args_canonical);
  } catch (const nlohmann::json::exception& e) {
    throw MalformedArgs("arguments of '" + tool_name + "' are not valid JSON: " + e.what());
  }
}

void validate(const ToolDescriptor& d) {
  if (d.tool_name.empty()) throw InvalidDescriptor("tool name must not be empty");
  auto has_separator = [](const std::string& s) {
    return s.find(kUnitSeparator) != std::string::npos || s.find(kRecordSeparator) != std::string::npos;
  };
  if (has_separator(d.tool_name)) throw InvalidDescriptor("tool name contains a separator character");
  if (has_separator(d.args_canonical))
    throw InvalidDescriptor("canonical arguments contain a separator character");
}

std::string encode_trajectory(TrajectoryView trajectory) {
  std::string out;
  for (std::size_t i = 0; i < trajectory.size(); ++i) {
    if (i != 0) out += kRecordSeparator;
    out += trajectory[i].key();
  }
  return out;
}

Trajectory decode_trajectory(std::string_view encoded) {
  Trajectory out;
  if (encoded.empty()) return out;
  std::size_t start = 0;
  while (true) {
    const std::size_t end = encoded.find(kRecordSeparator, start);
    const std::string_view key = encoded.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    const std::size_t a = key.find(kUnitSeparator);
    const std::size_t b = a == std::string_view::npos ? a : key.find(kUnitSeparator, a + 1);
    if (b == std::string_view::npos || b + 2 != key.size() || key.find(kUnitSeparator, b + 1) != std::string_view::npos)
      throw InvalidDescriptor("malformed descriptor key in encoded trajectory");
    const char flag = key[b + 1];
    if (flag != 'M' && flag != 'P') throw InvalidDescriptor("descriptor key has an unknown statefulness flag");
    ToolDescriptor d{std::string(key.substr(0, a)), std::string(key.substr(a + 1, b - a - 1)), flag == 'M'};
    validate(d);
    out.push_back(std::move(d));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return out;
}

std::uint64_t trajectory_hash(TrajectoryView trajectory) { return fnv1a64(encode_trajectory(trajectory)); }

Trajectory filter_stateful(TrajectoryView trajectory) {
  Trajectory out;
  for (const auto& d : trajectory)
    if (d.mutates_state) out.push_back(d);
  return out;
}

nlohmann::json to_json(const ToolDescriptor& d) {
  return {{"tool", d.tool_name}, {"args_canonical", d.args_canonical}, {"mutates_state", d.mutates_state}};
}

ToolDescriptor descriptor_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InvalidDescriptor("descriptor must be a JSON object");
  const auto tool = j.find("tool");
  if (tool == j.end() || !tool->is_string()) throw InvalidDescriptor("descriptor.tool must be a string");
  ToolDescriptor d;
  d.tool_name = tool->get<std::string>();
  if (auto a = j.find("args_canonical"); a != j.end()) {
    if (!a->is_string()) throw InvalidDescriptor("descriptor.args_canonical must be a string");
    d.args_canonical = a->get<std::string>();
  }
  if (auto m = j.find("mutates_state"); m != j.end()) {
    if (!m->is_boolean()) throw InvalidDescriptor("descriptor.mutates_state must be a boolean");
    d.mutates_state = m->get<bool>();
  }
  validate(d);
  return d;
}

std::string_view to_string(ToolStatus status) { return status == ToolStatus::ok ? "ok" : "tool_error"; }

ToolStatus parse_tool_status(std::string_view text) {
  if (text == "ok") return ToolStatus::ok;
  if (text == "tool_error") return ToolStatus::tool_error;
  throw MalformedArgs("unknown tool status '" + std::string(text) + "'");
}

nlohmann::json to_json(const ToolResult& r) {
  return {{"payload_b64", base64::encode(r.payload)}, {"status", to_string(r.status)}, {"exec_ms", r.exec_ms}};
}

ToolResult result_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw MalformedArgs("result must be a JSON object");
  ToolResult r;
  const auto p = j.find("payload_b64");
  if (p == j.end() || !p->is_string()) throw MalformedArgs("result.payload_b64 must be a string");
  auto bytes = base64::decode(p->get<std::string>());
  if (!bytes) throw MalformedArgs("result.payload_b64 is not valid base64");
  r.payload = std::move(*bytes);
  if (auto s = j.find("status"); s != j.end()) {
    if (!s->is_string()) throw MalformedArgs("result.status must be a string");
    r.status = parse_tool_status(s->get<std::string>());
  }
  if (auto e = j.find("exec_ms"); e != j.end()) {
    if (!e->is_number()) throw MalformedArgs("result.exec_ms must be a number");
    r.exec_ms = e->get<double>();
    if (r.exec_ms < 0) throw MalformedArgs("result.exec_ms must be non-negative");
  }
  return r;
}

}  // namespace tvcache
