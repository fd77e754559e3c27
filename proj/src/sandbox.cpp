// SPDX-License-Identifier: Apache-2.0
#include "tvcache/sandbox.hpp"

#include "tvcache/clock.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <optional>

namespace tvcache {

ToolDescriptor Environment::describe(std::string tool_name, const nlohmann::json& args) const {
  ToolDescriptor d{std::move(tool_name), canonicalize_args(args), true};
  d.mutates_state = will_mutate_state(d);
  validate(d);
  return d;
}

namespace detail {

void sleep_ms(double ms) {
  if (ms > 0) std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(ms));
}

}  // namespace detail

namespace {

const std::string& string_arg(const nlohmann::json& args, const char* name, const std::string& tool) {
  auto it = args.find(name);
  if (it == args.end() || !it->is_string())
    throw MalformedArgs(fmt::format("{}: argument '{}' must be a string", tool, name));
  return it->get_ref<const std::string&>();
}

nlohmann::json parse_args(const ToolDescriptor& d) {
  nlohmann::json args = d.args();
  if (!args.is_object()) throw MalformedArgs(d.tool_name + ": arguments must be a JSON object");
  return args;
}

ToolResult ok(std::string payload = {}) { return {std::move(payload), ToolStatus::ok, 0}; }
ToolResult fail(std::string payload) { return {std::move(payload), ToolStatus::tool_error, 0}; }

}  // namespace

// ---------------------------------------------------------------------------
// FileTreeSandbox

FileTreeSandbox::FileTreeSandbox(FileTreeOptions options)
    : options_(std::move(options)), table_(std::string(options_.leaky_reads ? "leaky-read" : "filetree")) {}

SandboxHandle FileTreeSandbox::start() {
  detail::sleep_ms(options_.latency.start_ms);
  return table_.add(State{options_.seed, 0});
}

void FileTreeSandbox::stop(const SandboxHandle& handle) { table_.remove(handle); }

SandboxHandle FileTreeSandbox::fork(const SandboxHandle& handle) {
  State copy = table_.with(handle, [](State& s) { return s; });
  detail::sleep_ms(options_.latency.fork_ms);
  return table_.add(std::move(copy));
}

bool FileTreeSandbox::will_mutate_state(const ToolDescriptor& d) const {
  return d.tool_name == "write" || d.tool_name == "append" || d.tool_name == "rm";
}

ToolResult FileTreeSandbox::execute(const SandboxHandle& handle, const ToolDescriptor& d) {
  const auto start = SteadyClock::now();
  const nlohmann::json args = parse_args(d);
  std::optional<double> sleep;
  if (d.tool_name == "sleep_ms") {
    auto it = args.find("ms");
    if (it == args.end() || !it->is_number() || it->get<double>() < 0 || it->get<double>() > 600000)
      throw MalformedArgs("sleep_ms: argument 'ms' must be a number in [0, 600000]");
    sleep = it->get<double>();
  }
  if (auto it = args.find("cost_ms"); it != args.end()) {
    if (!it->is_number() || it->get<double>() < 0 || it->get<double>() > 600000)
      throw MalformedArgs(d.tool_name + ": argument 'cost_ms' must be a number in [0, 600000]");
    detail::sleep_ms(it->get<double>() * options_.cost_scale);
  }
  ToolResult r = table_.with(handle, [&](State& s) -> ToolResult {
    detail::sleep_ms(options_.latency.execute_ms);
    const std::string& tool = d.tool_name;
    if (tool == "write") {
      s.files[string_arg(args, "path", tool)] = string_arg(args, "content", tool);
      return ok();
    }
    if (tool == "append") {
      s.files[string_arg(args, "path", tool)] += string_arg(args, "content", tool);
      return ok();
    }
    if (tool == "read") {
      const std::string& path = string_arg(args, "path", tool);
      if (options_.leaky_reads) ++s.reads;
      auto it = s.files.find(path);
      if (it == s.files.end()) return fail("no such file: " + path);
      return ok(it->second);
    }
    if (tool == "ls") {
      std::string out;
      for (const auto& [path, content] : s.files) {
        if (!out.empty()) out += '\n';
        out += path;
      }
      return ok(std::move(out));
    }
    if (tool == "rm") {
      const std::string& path = string_arg(args, "path", tool);
      if (s.files.erase(path) == 0) return fail("no such file: " + path);
      return ok();
    }
    if (sleep) {
      detail::sleep_ms(*sleep);
      return ok();
    }
    return fail("unknown tool: " + tool);
  });
  r.exec_ms = elapsed_ms(start);
  return r;
}

std::string FileTreeSandbox::encode(const State& s) const {
  std::string out = "FTS1\n";
  if (options_.leaky_reads) out += "reads=" + std::to_string(s.reads) + "\n";
  for (const auto& [path, content] : s.files) {
    out += std::to_string(path.size());
    out += ':';
    out += path;
    out += std::to_string(content.size());
    out += ':';
    out += content;
  }
  return out;
}

FileTreeSandbox::State FileTreeSandbox::decode(std::string_view bytes) const {
  if (bytes.substr(0, 5) != "FTS1\n") throw CorruptFile("not a file-tree snapshot", 0);
  State s;
  std::size_t pos = 5;
  auto number = [&](char terminator) {
    const std::size_t end = bytes.find(terminator, pos);
    if (end == std::string_view::npos || end == pos || end - pos > 19) throw CorruptFile("bad length field", pos);
    std::uint64_t n = 0;
    for (std::size_t i = pos; i < end; ++i) {
      if (!std::isdigit(static_cast<unsigned char>(bytes[i]))) throw CorruptFile("bad length field", pos);
      n = n * 10 + static_cast<std::uint64_t>(bytes[i] - '0');
    }
    pos = end + 1;
    return n;
  };
  auto field = [&] {
    const std::uint64_t n = number(':');
    if (n > bytes.size() - pos) throw CorruptFile("field overruns snapshot", pos);
    std::string out(bytes.substr(pos, n));
    pos += n;
    return out;
  };
  if (options_.leaky_reads) {
    if (bytes.substr(pos, 6) != "reads=") throw CorruptFile("missing read counter", pos);
    pos += 6;
    s.reads = number('\n');
  }
  while (pos < bytes.size()) {
    std::string path = field();
    std::string content = field();
    s.files.emplace(std::move(path), std::move(content));
  }
  return s;
}

std::string FileTreeSandbox::snapshot(const SandboxHandle& handle) {
  std::string bytes = table_.with(handle, [&](State& s) { return encode(s); });
  detail::sleep_ms(options_.latency.snapshot_ms);
  return bytes;
}

SandboxHandle FileTreeSandbox::restore(std::string_view bytes) {
  State s = decode(bytes);
  detail::sleep_ms(options_.latency.restore_ms);
  return table_.add(std::move(s));
}

ToolDescriptor FileTreeSandbox::sample_call(std::mt19937_64& rng) const {
  static const char* paths[] = {"a", "b", "c", "d/e"};
  static const char* contents[] = {"x", "y", "zz", ""};
  const std::string path = paths[rng() % 4];
  const std::string content = contents[rng() % 4];
  switch (rng() % 10) {
    case 0:
    case 1:
    case 2:
      return describe("write", {{"path", path}, {"content", content}});
    case 3:
    case 4:
      return describe("append", {{"path", path}, {"content", content}});
    case 5:
      return describe("rm", {{"path", path}});
    case 6:
      return describe("ls", nlohmann::json::object());
    case 7:
      return describe("sleep_ms", {{"ms", 0}});
    default:
      return describe("read", {{"path", path}});
  }
}

std::map<std::string, std::string> FileTreeSandbox::load_seed(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open seed file " + file.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw MalformedArgs("seed file " + file.string() + " is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw MalformedArgs("seed file must hold a JSON object of path -> content");
  std::map<std::string, std::string> files;
  for (const auto& [path, content] : j.items()) {
    if (!content.is_string()) throw MalformedArgs("seed entry '" + path + "' must be a string");
    files.emplace(path, content.get<std::string>());
  }
  return files;
}

// ---------------------------------------------------------------------------
// Query evaluation

namespace {

struct Token {
  enum Kind { ident, number, text, symbol, end } kind;
  std::string value;
  std::size_t pos;
};

std::vector<Token> tokenize(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < s.size()) {
    const char c = s[i];
    if (std::isspace(static_cast<unsigned char>(c))) {
      ++i;
    } else if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = i;
      while (j < s.size() && (std::isalnum(static_cast<unsigned char>(s[j])) || s[j] == '_')) ++j;
      out.push_back({Token::ident, std::string(s.substr(i, j - i)), i});
      i = j;
    } else if (std::isdigit(static_cast<unsigned char>(c)) ||
               (c == '-' && i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i + 1])))) {
      std::size_t j = i + 1;
      while (j < s.size() && (std::isdigit(static_cast<unsigned char>(s[j])) || s[j] == '.')) ++j;
      out.push_back({Token::number, std::string(s.substr(i, j - i)), i});
      i = j;
    } else if (c == '\'') {
      std::string v;
      std::size_t j = i + 1;
      while (true) {
        if (j >= s.size()) throw QueryParseError(fmt::format("unterminated string at {}", i));
        if (s[j] == '\'') {
          if (j + 1 < s.size() && s[j + 1] == '\'') {
            v += '\'';
            j += 2;
            continue;
          }
          break;
        }
        v += s[j++];
      }
      out.push_back({Token::text, std::move(v), i});
      i = j + 1;
    } else {
      static const char* two[] = {"!=", "<>", "<=", ">="};
      std::string sym(1, c);
      for (const char* t : two)
        if (s.substr(i, 2) == t) sym = t;
      if (sym.size() == 1 && std::string_view("()*=<>,;").find(c) == std::string_view::npos)
        throw QueryParseError(fmt::format("unexpected character '{}' at {}", c, i));
      out.push_back({Token::symbol, sym, i});
      i += sym.size();
    }
  }
  out.push_back({Token::end, "", s.size()});
  return out;
}

std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

class QueryParser {
 public:
  explicit QueryParser(std::string_view expr) : tokens_(tokenize(expr)) {}

  const Token& peek() const { return tokens_[i_]; }
  const Token& next() { return tokens_[i_ < tokens_.size() - 1 ? i_++ : i_]; }

  bool accept_keyword(const char* kw) {
    if (peek().kind == Token::ident && upper(peek().value) == kw) {
      ++i_;
      return true;
    }
    return false;
  }
  void keyword(const char* kw) {
    if (!accept_keyword(kw)) throw QueryParseError(fmt::format("expected {} at {}", kw, peek().pos));
  }
  void symbol(const char* s) {
    if (peek().kind != Token::symbol || peek().value != s)
      throw QueryParseError(fmt::format("expected '{}' at {}", s, peek().pos));
    ++i_;
  }
  std::string ident() {
    if (peek().kind != Token::ident) throw QueryParseError(fmt::format("expected a name at {}", peek().pos));
    return next().value;
  }

 private:
  std::vector<Token> tokens_;
  std::size_t i_ = 0;
};

struct Condition {
  std::size_t column;
  std::string op;
  Value literal;
};

std::optional<double> numeric(const Value& v) {
  if (auto* i = std::get_if<std::int64_t>(&v)) return static_cast<double>(*i);
  if (auto* d = std::get_if<double>(&v)) return *d;
  return std::nullopt;
}

bool compare(const Value& cell, const std::string& op, const Value& lit) {
  int cmp;
  auto a = numeric(cell), b = numeric(lit);
  if (a && b) {
    // exact comparison for integers, which may exceed double precision
    if (std::holds_alternative<std::int64_t>(cell) && std::holds_alternative<std::int64_t>(lit)) {
      const auto x = std::get<std::int64_t>(cell), y = std::get<std::int64_t>(lit);
      cmp = x < y ? -1 : (x > y ? 1 : 0);
    } else {
      cmp = *a < *b ? -1 : (*a > *b ? 1 : 0);
    }
  } else if (!a && !b) {
    const int c = std::get<std::string>(cell).compare(std::get<std::string>(lit));
    cmp = c < 0 ? -1 : (c > 0 ? 1 : 0);
  } else {
    return false;  // text never equals or orders against numbers
  }
  if (op == "=") return cmp == 0;
  if (op == "!=" || op == "<>") return cmp != 0;
  if (op == "<") return cmp < 0;
  if (op == "<=") return cmp <= 0;
  if (op == ">") return cmp > 0;
  return cmp >= 0;
}

Value parse_number(const Token& t) {
  if (t.value.find('.') == std::string::npos) {
    try {
      return static_cast<std::int64_t>(std::stoll(t.value));
    } catch (const std::exception&) {
      throw QueryParseError(fmt::format("bad integer '{}' at {}", t.value, t.pos));
    }
  }
  try {
    std::size_t used = 0;
    double d = std::stod(t.value, &used);
    if (used != t.value.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw QueryParseError(fmt::format("bad number '{}' at {}", t.value, t.pos));
  }
}

}  // namespace

std::string evaluate_query(const std::map<std::string, Table>& tables, std::string_view expr) {
  QueryParser p(expr);
  p.keyword("SELECT");
  const bool is_count = p.accept_keyword("COUNT");
  std::string sum_column;
  if (is_count) {
    p.symbol("(");
    p.symbol("*");
    p.symbol(")");
  } else {
    p.keyword("SUM");
    p.symbol("(");
    sum_column = p.ident();
    p.symbol(")");
  }
  p.keyword("FROM");
  const std::string table_name = p.ident();
  auto t = tables.find(table_name);
  if (t == tables.end()) throw QueryParseError("no such table: " + table_name);
  const Table& table = t->second;
  auto column_index = [&](const std::string& name) {
    auto it = std::find(table.columns.begin(), table.columns.end(), name);
    if (it == table.columns.end()) throw QueryParseError("no such column: " + name);
    return static_cast<std::size_t>(it - table.columns.begin());
  };
  std::vector<Condition> conditions;
  if (p.accept_keyword("WHERE")) {
    do {
      Condition c;
      c.column = column_index(p.ident());
      const Token& op = p.next();
      static const std::vector<std::string> ops{"=", "!=", "<>", "<", "<=", ">", ">="};
      if (op.kind != Token::symbol || std::find(ops.begin(), ops.end(), op.value) == ops.end())
        throw QueryParseError(fmt::format("expected a comparison operator at {}", op.pos));
      c.op = op.value;
      const Token& lit = p.next();
      if (lit.kind == Token::number) c.literal = parse_number(lit);
      else if (lit.kind == Token::text) c.literal = lit.value;
      else throw QueryParseError(fmt::format("expected a literal at {}", lit.pos));
      conditions.push_back(std::move(c));
    } while (p.accept_keyword("AND"));
  }
  if (p.peek().kind == Token::symbol && p.peek().value == ";") p.next();
  if (p.peek().kind != Token::end) throw QueryParseError(fmt::format("unexpected input at {}", p.peek().pos));

  const std::size_t sum_index = is_count ? 0 : column_index(sum_column);
  std::int64_t count = 0;
  std::int64_t int_sum = 0;
  double real_sum = 0;
  bool any_real = false;
  for (const auto& row : table.rows) {
    bool match = true;
    for (const auto& c : conditions)
      if (!compare(row.at(c.column), c.op, c.literal)) {
        match = false;
        break;
      }
    if (!match) continue;
    ++count;
    if (!is_count) {
      const Value& v = row.at(sum_index);
      if (auto* i = std::get_if<std::int64_t>(&v)) {
        int_sum += *i;
      } else if (auto* d = std::get_if<double>(&v)) {
        real_sum += *d;
        any_real = true;
      }
    }
  }
  if (is_count) return std::to_string(count);
  if (any_real) return fmt::format("{}", static_cast<double>(int_sum) + real_sum);
  return std::to_string(int_sum);
}

std::map<std::string, Table> example_database() {
  Table animals;
  animals.columns = {"id", "name", "species", "age", "weight"};
  const std::vector<std::pair<std::string, int>> herd = {{"pig", 12}, {"cow", 7}, {"sheep", 9}, {"goat", 4}, {"hen", 15}};
  std::int64_t id = 1;
  for (const auto& [species, n] : herd) {
    for (int i = 0; i < n; ++i, ++id) {
      animals.rows.push_back({id, species + "-" + std::to_string(i + 1), species,
                              static_cast<std::int64_t>(1 + (id * 7) % 13), 10.5 * static_cast<double>(1 + id % 9)});
    }
  }
  return {{"animals", std::move(animals)}};
}

namespace {

nlohmann::json tables_to_json(const std::map<std::string, Table>& tables) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, t] : tables) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& row : t.rows) {
      nlohmann::json r = nlohmann::json::array();
      for (const auto& v : row) std::visit([&](const auto& x) { r.push_back(x); }, v);
      rows.push_back(std::move(r));
    }
    j[name] = {{"columns", t.columns}, {"rows", std::move(rows)}};
  }
  return j;
}

std::map<std::string, Table> tables_from_json(const nlohmann::json& j) {
  std::map<std::string, Table> out;
  for (const auto& [name, tj] : j.items()) {
    Table t;
    t.columns = tj.at("columns").get<std::vector<std::string>>();
    for (const auto& rj : tj.at("rows")) {
      std::vector<Value> row;
      for (const auto& v : rj) {
        if (v.is_number_integer()) row.emplace_back(v.get<std::int64_t>());
        else if (v.is_number()) row.emplace_back(v.get<double>());
        else row.emplace_back(v.get<std::string>());
      }
      if (row.size() != t.columns.size()) throw CorruptFile("row width does not match columns in table " + name, 0);
      t.rows.push_back(std::move(row));
    }
    out.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace

ReadOnlyQuerySandbox::ReadOnlyQuerySandbox(QueryOptions options)
    : options_(std::move(options)),
      initial_(std::make_shared<const std::map<std::string, Table>>(options_.tables.empty() ? example_database()
                                                                                            : options_.tables)),
      table_("query") {}

SandboxHandle ReadOnlyQuerySandbox::start() {
  detail::sleep_ms(options_.latency.start_ms);
  return table_.add(initial_);
}

void ReadOnlyQuerySandbox::stop(const SandboxHandle& handle) { table_.remove(handle); }

SandboxHandle ReadOnlyQuerySandbox::fork(const SandboxHandle& handle) {
  // The tables are immutable, so sharing them is a copy.
  State s = table_.with(handle, [](State& st) { return st; });
  detail::sleep_ms(options_.latency.fork_ms);
  return table_.add(std::move(s));
}

ToolResult ReadOnlyQuerySandbox::execute(const SandboxHandle& handle, const ToolDescriptor& d) {
  const auto start = SteadyClock::now();
  ToolResult r = table_.with(handle, [&](State& s) -> ToolResult {
    detail::sleep_ms(options_.latency.execute_ms);
    if (d.tool_name != "query") return fail("unknown tool: " + d.tool_name);
    const nlohmann::json args = parse_args(d);
    return ok(evaluate_query(*s, string_arg(args, "expr", d.tool_name)));
  });
  r.exec_ms = elapsed_ms(start);
  return r;
}

std::string ReadOnlyQuerySandbox::snapshot(const SandboxHandle& handle) {
  std::string bytes = table_.with(handle, [](State& s) { return "QRY1\n" + tables_to_json(*s).dump(); });
  detail::sleep_ms(options_.latency.snapshot_ms);
  return bytes;
}

SandboxHandle ReadOnlyQuerySandbox::restore(std::string_view bytes) {
  if (bytes.substr(0, 5) != "QRY1\n") throw CorruptFile("not a query snapshot", 0);
  std::map<std::string, Table> tables;
  try {
    tables = tables_from_json(nlohmann::json::parse(bytes.substr(5)));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFile(std::string("query snapshot is not valid: ") + e.what(), 5);
  }
  detail::sleep_ms(options_.latency.restore_ms);
  return table_.add(std::make_shared<const std::map<std::string, Table>>(std::move(tables)));
}

ToolDescriptor ReadOnlyQuerySandbox::sample_call(std::mt19937_64& rng) const {
  static const char* species[] = {"pig", "cow", "sheep", "goat", "hen", "yak"};
  const std::string sp = species[rng() % 6];
  const int age = static_cast<int>(rng() % 14);
  switch (rng() % 4) {
    case 0:
      return describe("query", {{"expr", "SELECT COUNT(*) FROM animals WHERE species = '" + sp + "'"}});
    case 1:
      return describe("query", {{"expr", fmt::format("SELECT SUM(age) FROM animals WHERE age >= {}", age)}});
    case 2:
      return describe("query", {{"expr", fmt::format("SELECT SUM(weight) FROM animals WHERE species = '{}' AND age < {}",
                                                     sp, age)}});
    default:
      return describe("query", {{"expr", "SELECT COUNT(*) FROM animals"}});
  }
}

// ---------------------------------------------------------------------------
// Registry

namespace {

EnvironmentLatency latency_from(const nlohmann::json& o, EnvironmentLatency base) {
  auto get = [&](const char* key, double& field) {
    if (auto it = o.find(key); it != o.end()) {
      if (!it->is_number() || it->get<double>() < 0) throw std::invalid_argument(std::string(key) + " must be >= 0");
      field = it->get<double>();
    }
  };
  get("start_ms", base.start_ms);
  get("fork_ms", base.fork_ms);
  get("snapshot_ms", base.snapshot_ms);
  get("restore_ms", base.restore_ms);
  get("execute_ms", base.execute_ms);
  return base;
}

}  // namespace

std::unique_ptr<Environment> make_environment(std::string_view kind, const nlohmann::json& options) {
  const nlohmann::json o = options.is_null() ? nlohmann::json::object() : options;
  if (kind == "filetree" || kind == "leaky-read") {
    FileTreeOptions fo;
    fo.latency = latency_from(o, fo.latency);
    fo.leaky_reads = kind == "leaky-read";
    if (auto it = o.find("seed_file"); it != o.end()) fo.seed = FileTreeSandbox::load_seed(it->get<std::string>());
    if (auto it = o.find("cost_scale"); it != o.end()) fo.cost_scale = it->get<double>();
    return std::make_unique<FileTreeSandbox>(std::move(fo));
  }
  if (kind == "query") {
    QueryOptions qo;
    qo.latency = latency_from(o, qo.latency);
    return std::make_unique<ReadOnlyQuerySandbox>(std::move(qo));
  }
  throw BackendUnavailable("unknown backend kind '" + std::string(kind) + "'");
}

std::vector<std::string> environment_kinds() { return {"filetree", "query", "leaky-read"}; }

// ---------------------------------------------------------------------------
// Contract suite

bool ContractReport::passed() const {
  return std::all_of(properties.begin(), properties.end(), [](const PropertyResult& p) { return p.passed; });
}

nlohmann::json ContractReport::to_json() const {
  nlohmann::json props = nlohmann::json::array();
  for (const auto& p : properties)
    props.push_back({{"name", p.name},
                     {"passed", p.passed},
                     {"checks", p.checks},
                     {"violations", p.violations},
                     {"first_violation", p.first_violation}});
  return {{"backend", backend_kind}, {"passed", passed()}, {"properties", std::move(props)}};
}

namespace {

class Property {
 public:
  explicit Property(std::string name) { r_.name = std::move(name); }
  void check(bool ok, const std::string& what) {
    ++r_.checks;
    if (ok) return;
    ++r_.violations;
    r_.passed = false;
    if (r_.first_violation.empty()) r_.first_violation = what;
  }
  PropertyResult result() const { return r_; }

 private:
  PropertyResult r_;
};

bool same(const ToolResult& a, const ToolResult& b) { return a.same_value(b); }

std::string describe_call(const ToolDescriptor& d) { return d.tool_name + " " + d.args_canonical; }

}  // namespace

ContractReport contract_suite(Environment& env, const ContractOptions& options) {
  Property isolation("fork_isolation"), determinism("determinism"), equivalence("snapshot_restore_equivalence"),
      truthful("stateless_truthfulness"), filter("stateful_filter_equivalence"), dead("dead_handle_rejected");

  auto run = [&](const SandboxHandle& h, const Trajectory& calls) {
    std::vector<ToolResult> out;
    for (const auto& d : calls) out.push_back(env.execute(h, d));
    return out;
  };

  for (std::size_t w = 0; w < options.workloads; ++w) {
    std::mt19937_64 rng(options.seed * 1000003 + w);
    auto sample = [&](std::size_t n) {
      Trajectory t;
      for (std::size_t i = 0; i < n; ++i) t.push_back(env.sample_call(rng));
      return t;
    };
    const SandboxHandle h = env.start();
    Trajectory history;
    for (std::size_t op = 0; op < options.ops_per_workload; ++op) {
      const ToolDescriptor d = env.sample_call(rng);
      history.push_back(d);
      if (!env.will_mutate_state(d)) {
        const std::string before = env.snapshot(h);
        env.execute(h, d);
        truthful.check(env.snapshot(h) == before, "state changed by " + describe_call(d));
      } else {
        env.execute(h, d);
      }
      if (op % 20 != 19) continue;

      // determinism: the same call on two copies of one state
      {
        const ToolDescriptor probe = env.sample_call(rng);
        const SandboxHandle a = env.fork(h), b = env.fork(h);
        determinism.check(same(env.execute(a, probe), env.execute(b, probe)),
                          "results differ for " + describe_call(probe));
        env.stop(a);
        env.stop(b);
      }
      // isolation in both directions
      {
        const std::string base = env.snapshot(h);
        const SandboxHandle f = env.fork(h);
        run(f, sample(5));
        isolation.check(env.snapshot(h) == base, "child writes leaked into the parent");
        const std::string child = env.snapshot(f);
        const ToolDescriptor m = env.sample_call(rng);
        const SandboxHandle g = env.fork(h);
        env.execute(g, m);
        isolation.check(env.snapshot(f) == child, "sibling writes leaked into a fork");
        env.stop(f);
        env.stop(g);
      }
      // restore(snapshot(h)) behaves like fork(h)
      {
        const SandboxHandle r = env.restore(env.snapshot(h));
        const SandboxHandle f = env.fork(h);
        const Trajectory cont = sample(6);
        const auto rr = run(r, cont), fr = run(f, cont);
        bool all = true;
        for (std::size_t i = 0; i < rr.size(); ++i) all = all && same(rr[i], fr[i]);
        equivalence.check(all, "restored sandbox diverged from a fork");
        equivalence.check(env.snapshot(r) == env.snapshot(f), "restored sandbox ended in a different state");
        env.stop(r);
        env.stop(f);
      }
    }
    // executing P and its stateful subsequence from a clean start ends in the same state
    {
      const std::size_t n = std::min<std::size_t>(history.size(), 40);
      const Trajectory p(history.begin(), history.begin() + static_cast<std::ptrdiff_t>(n));
      const SandboxHandle full = env.start(), filtered = env.start();
      run(full, p);
      run(filtered, filter_stateful(p));
      filter.check(env.snapshot(full) == env.snapshot(filtered), "stateful subsequence reached a different state");
      env.stop(full);
      env.stop(filtered);
    }
    env.stop(h);
    auto expect_dead = [&](auto&& fn, const char* what) {
      try {
        fn();
        dead.check(false, std::string(what) + " succeeded on a stopped sandbox");
      } catch (const SandboxDead&) {
        dead.check(true, "");
      }
    };
    expect_dead([&] { env.execute(h, env.sample_call(rng)); }, "execute");
    expect_dead([&] { env.fork(h); }, "fork");
    expect_dead([&] { env.snapshot(h); }, "snapshot");
    expect_dead([&] { env.stop(h); }, "stop");
  }

  ContractReport report;
  report.backend_kind = std::string(env.kind());
  for (const Property* p : {&isolation, &determinism, &equivalence, &truthful, &filter, &dead})
    report.properties.push_back(p->result());
  return report;
}

}  // namespace tvcache
