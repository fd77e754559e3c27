// SPDX-License-Identifier: Apache-2.0
#include "tvcache/base64.hpp"
#include "tvcache/descriptor.hpp"
#include "tvcache/errors.hpp"
#include "tvcache/hash.hpp"
#include "tvcache/result.hpp"

#include <doctest.h>

#include <random>
#include <set>

using namespace tvcache;

TEST_CASE("canonical args ignore key order and whitespace") {
  auto a = nlohmann::json::parse(R"({"b": 1, "a": {"y": [1, 2.5], "x": "s"}})");
  auto b = nlohmann::json::parse(R"({"a":{"x":"s","y":[1,2.5]},"b":1})");
  CHECK(canonicalize_args(a) == canonicalize_args(b));
  CHECK(canonicalize_args(a) == R"({"a":{"x":"s","y":[1,2.5]},"b":1})");
  CHECK(canonicalize_args(nlohmann::json::parse("0.1")) == "0.1");
}

TEST_CASE("descriptor validation rejects empty names and separators") {
  CHECK_THROWS_AS(ToolDescriptor::make("", {}, true), InvalidDescriptor);
  CHECK_THROWS_AS(ToolDescriptor::make(std::string("a\x1f"), {}, true), InvalidDescriptor);
  CHECK_THROWS_AS(ToolDescriptor::make(std::string("a\x1e"), {}, true), InvalidDescriptor);
  CHECK_THROWS_AS(validate(ToolDescriptor{"ok", std::string("\"\x1e\""), true}), InvalidDescriptor);
}

TEST_CASE("statefulness flag is part of the key") {
  auto m = ToolDescriptor::make("read", {{"path", "a"}}, true);
  auto p = ToolDescriptor::make("read", {{"path", "a"}}, false);
  CHECK(m.key() != p.key());
  CHECK(m.key().back() == 'M');
  CHECK(p.key().back() == 'P');
}

TEST_CASE("trajectory encoding round-trips and is injective on random inputs") {
  std::mt19937_64 rng(7);
  const std::vector<std::string> names{"a", "b", "ab", "write", "read"};
  const std::vector<std::string> args{"", "{}", "{\"p\":\"a\"}", "{\"p\":\"ab\"}", "[1]"};
  std::set<std::string> seen_enc;
  std::set<std::vector<std::tuple<std::string, std::string, bool>>> seen_seq;
  for (int i = 0; i < 3000; ++i) {
    Trajectory t;
    const int len = static_cast<int>(rng() % 5);
    for (int j = 0; j < len; ++j)
      t.push_back(ToolDescriptor{names[rng() % names.size()], args[rng() % args.size()], (rng() & 1) != 0});
    const std::string enc = encode_trajectory(t);
    CHECK(decode_trajectory(enc) == t);
    std::vector<std::tuple<std::string, std::string, bool>> seq;
    for (const auto& d : t) seq.emplace_back(d.tool_name, d.args_canonical, d.mutates_state);
    const bool new_seq = seen_seq.insert(seq).second;
    const bool new_enc = seen_enc.insert(enc).second;
    CHECK(new_seq == new_enc);
  }
}

TEST_CASE("decode rejects malformed keys") {
  CHECK_THROWS_AS(decode_trajectory("abc"), InvalidDescriptor);
  CHECK_THROWS_AS(decode_trajectory(std::string("a\x1f{}\x1fX")), InvalidDescriptor);
  CHECK_THROWS_AS(decode_trajectory(std::string("a\x1f{}\x1fM\x1e")), InvalidDescriptor);
  CHECK(decode_trajectory("").empty());
}

TEST_CASE("filter_stateful keeps mutating steps in order") {
  auto F1 = ToolDescriptor::make("f1", {}, true), F2 = ToolDescriptor::make("f2", {}, true);
  auto S1 = ToolDescriptor::make("s1", {}, false), S2 = ToolDescriptor::make("s2", {}, false);
  CHECK(filter_stateful(Trajectory{F1, S1, F2, S2}) == Trajectory{F1, F2});
  CHECK(filter_stateful(Trajectory{S1, S2}).empty());
  auto t1 = ToolDescriptor::make("t1", {}, true), t2 = ToolDescriptor::make("t2", {}, true);
  auto t3 = ToolDescriptor::make("t3", {}, false), t4 = ToolDescriptor::make("t4", {}, false);
  CHECK(filter_stateful(Trajectory{t1, t2, t3, t4}) == Trajectory{t1, t2});
  CHECK(filter_stateful(Trajectory{t1, t2, t4, t3}) == Trajectory{t1, t2});
}

TEST_CASE("fnv1a64 matches published vectors") {
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
  CHECK(fnv1a64("foobar") == 0x85944171f73967e8ULL);
  CHECK(to_hex(0xabcULL) == "0000000000000abc");
}

TEST_CASE("base64 round-trips arbitrary bytes and rejects bad padding") {
  std::mt19937 rng(3);
  for (int n = 0; n < 64; ++n) {
    std::string s(static_cast<std::size_t>(n), '\0');
    for (auto& c : s) c = static_cast<char>(rng());
    auto d = base64::decode(base64::encode(s));
    REQUIRE(d.has_value());
    CHECK(*d == s);
  }
  CHECK(base64::encode("foob") == "Zm9vYg==");
  CHECK_FALSE(base64::decode("Zm9vYg=").has_value());
  CHECK_FALSE(base64::decode("Zm9v!g==").has_value());
}

TEST_CASE("descriptor and result JSON round-trip") {
  auto d = ToolDescriptor::make("write", {{"path", "x"}, {"content", "é"}}, true);
  CHECK(descriptor_from_json(to_json(d)) == d);
  ToolResult r{std::string("a\0b", 3), ToolStatus::tool_error, 12.5};
  auto back = result_from_json(to_json(r));
  CHECK(back.same_value(r));
  CHECK(back.exec_ms == 12.5);
  CHECK_THROWS_AS(result_from_json({{"payload_b64", ""}, {"exec_ms", -1}}), MalformedArgs);
  CHECK_THROWS_AS(descriptor_from_json({{"tool", 3}}), InvalidDescriptor);
}
