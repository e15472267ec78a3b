#include "vil/toml_lite.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

namespace vil::toml {
namespace {

struct Cursor {
  const std::string& s;
  std::size_t i = 0;
  int line = 1;

  bool done() const { return i >= s.size(); }
  char peek() const { return s[i]; }
  char take() {
    const char c = s[i++];
    if (c == '\n') ++line;
    return c;
  }
  void skip_ws() {
    while (!done() && (peek() == ' ' || peek() == '\t')) take();
  }
  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError("toml line " + std::to_string(line) + ": " + msg);
  }
};

std::string parse_basic_string(Cursor& c) {
  c.take();  // opening quote
  std::string out;
  while (true) {
    if (c.done()) c.fail("unterminated string");
    char ch = c.take();
    if (ch == '"') break;
    if (ch == '\\') {
      if (c.done()) c.fail("unterminated escape");
      const char e = c.take();
      switch (e) {
        case '"': out.push_back('"'); break;
        case '\\': out.push_back('\\'); break;
        case 'n': out.push_back('\n'); break;
        case 't': out.push_back('\t'); break;
        case 'r': out.push_back('\r'); break;
        default: c.fail("unsupported escape");
      }
    } else if (ch == '\n') {
      c.fail("newline in string");
    } else {
      out.push_back(ch);
    }
  }
  return out;
}

std::string parse_key(Cursor& c) {
  c.skip_ws();
  if (c.done()) c.fail("expected a key");
  if (c.peek() == '"') return parse_basic_string(c);
  std::string out;
  while (!c.done() && (std::isalnum(static_cast<unsigned char>(c.peek())) ||
                       c.peek() == '_' || c.peek() == '-')) {
    out.push_back(c.take());
  }
  if (out.empty()) c.fail("expected a key");
  return out;
}

nlohmann::json parse_scalar(Cursor& c);

nlohmann::json parse_value(Cursor& c) {
  c.skip_ws();
  if (c.done()) c.fail("expected a value");
  if (c.peek() == '[') {
    c.take();
    nlohmann::json arr = nlohmann::json::array();
    c.skip_ws();
    if (!c.done() && c.peek() == ']') {
      c.take();
      return arr;
    }
    while (true) {
      arr.push_back(parse_value(c));
      c.skip_ws();
      if (c.done()) c.fail("unterminated array");
      const char ch = c.take();
      if (ch == ']') break;
      if (ch != ',') c.fail("expected ',' or ']' in array");
      c.skip_ws();
      if (!c.done() && c.peek() == ']') {  // trailing comma
        c.take();
        break;
      }
    }
    return arr;
  }
  return parse_scalar(c);
}

nlohmann::json parse_scalar(Cursor& c) {
  if (c.peek() == '"') return parse_basic_string(c);
  std::string tok;
  while (!c.done() && c.peek() != ' ' && c.peek() != '\t' &&
         c.peek() != '\n' && c.peek() != '#' && c.peek() != ',' &&
         c.peek() != ']') {
    tok.push_back(c.take());
  }
  if (tok == "true") return true;
  if (tok == "false") return false;
  if (tok == "inf") return std::numeric_limits<double>::infinity();
  if (tok.empty()) c.fail("expected a value");
  // Integer if it parses cleanly without '.', 'e' or 'E'.
  const bool looks_int =
      tok.find('.') == std::string::npos &&
      tok.find('e') == std::string::npos && tok.find('E') == std::string::npos;
  try {
    std::size_t used = 0;
    if (looks_int) {
      const long long v = std::stoll(tok, &used);
      if (used == tok.size()) return v;
    }
    const double v = std::stod(tok, &used);
    if (used == tok.size()) return v;
  } catch (const std::exception&) {
    // fall through
  }
  c.fail("cannot parse value '" + tok + "'");
}

void skip_to_eol(Cursor& c) {
  c.skip_ws();
  if (!c.done() && c.peek() == '#') {
    while (!c.done() && c.peek() != '\n') c.take();
  }
  if (!c.done()) {
    if (c.peek() != '\n') c.fail("unexpected trailing content");
    c.take();
  }
}

std::vector<std::string> parse_table_path(Cursor& c) {
  std::vector<std::string> path;
  c.take();  // '['
  while (true) {
    path.push_back(parse_key(c));
    c.skip_ws();
    if (c.done()) c.fail("unterminated table header");
    const char ch = c.take();
    if (ch == ']') break;
    if (ch != '.') c.fail("expected '.' or ']' in table header");
  }
  return path;
}

}  // namespace

nlohmann::json parse(const std::string& text) {
  Cursor c{text};
  nlohmann::json root = nlohmann::json::object();
  nlohmann::json* table = &root;

  while (!c.done()) {
    c.skip_ws();
    if (c.done()) break;
    const char ch = c.peek();
    if (ch == '\n') {
      c.take();
      continue;
    }
    if (ch == '#') {
      skip_to_eol(c);
      continue;
    }
    if (ch == '[') {
      const auto path = parse_table_path(c);
      table = &root;
      for (const std::string& key : path) {
        if (!table->contains(key)) (*table)[key] = nlohmann::json::object();
        table = &(*table)[key];
        if (!table->is_object()) c.fail("table path collides with a value");
      }
      skip_to_eol(c);
      continue;
    }
    const std::string key = parse_key(c);
    c.skip_ws();
    if (c.done() || c.take() != '=') c.fail("expected '=' after key");
    (*table)[key] = parse_value(c);
    skip_to_eol(c);
  }
  return root;
}

nlohmann::json parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

}  // namespace vil::toml
