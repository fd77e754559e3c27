// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <string_view>

namespace tvcache::base64 {

std::string encode(std::string_view bytes);

// Standard alphabet with padding. Returns nullopt on any malformed input.
std::optional<std::string> decode(std::string_view text);

}  // namespace tvcache::base64
