#pragma once

// Minimal line-oriented config format shared by setup and experiment files:
//
//   # comment
//   key = value
//   [section]
//   key = value
//
// Keys before the first [section] header belong to the root section.
// Sections may repeat (e.g. one [cluster] block per mixture component).

#include "flexem/format.hpp"
#include "flexem/types.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace flexem::config {

struct Entry {
  std::string value;
  int line = 0;
};

struct Section {
  std::string name;
  int line = 0;
  std::map<std::string, Entry> entries;

  bool has(const std::string& key) const { return entries.count(key) != 0; }

  [[noreturn]] void fail(const std::string& key, const std::string& what) const {
    const auto it = entries.find(key);
    const int at = it == entries.end() ? line : it->second.line;
    throw Error("line " + std::to_string(at) + ": " + key + ": " + what);
  }

  const std::string& str(const std::string& key) const {
    const auto it = entries.find(key);
    if (it == entries.end()) {
      throw Error("line " + std::to_string(line) + ": missing key '" + key + "'" +
                  (name.empty() ? std::string() : " in [" + name + "]"));
    }
    return it->second.value;
  }

  double num(const std::string& key) const {
    const auto v = parse_double(str(key));
    if (!v) fail(key, "expected a number, got '" + str(key) + "'");
    return *v;
  }
  double num(const std::string& key, double fallback) const {
    return has(key) ? num(key) : fallback;
  }

  long long integer(const std::string& key) const {
    const auto v = parse_int(str(key));
    if (!v) fail(key, "expected an integer, got '" + str(key) + "'");
    return *v;
  }
  long long integer(const std::string& key, long long fallback) const {
    return has(key) ? integer(key) : fallback;
  }

  std::vector<double> numbers(const std::string& key) const {
    std::vector<double> out;
    for (auto part : split(str(key), ',')) {
      const auto v = parse_double(part);
      if (!v) fail(key, "expected a comma-separated list of numbers");
      out.push_back(*v);
    }
    return out;
  }

  /// Rejects keys outside `allowed` with the offending line number.
  void only(const std::set<std::string>& allowed) const {
    for (const auto& [k, e] : entries) {
      if (!allowed.count(k)) {
        throw Error("line " + std::to_string(e.line) + ": unknown key '" + k + "'");
      }
    }
  }
};

struct Document {
  Section root;
  std::vector<Section> sections;

  std::vector<const Section*> all(const std::string& name) const {
    std::vector<const Section*> out;
    for (const auto& s : sections)
      if (s.name == name) out.push_back(&s);
    return out;
  }
};

inline Document parse(std::istream& in) {
  Document doc;
  Section* current = &doc.root;
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw Error("line " + std::to_string(lineno) + ": malformed section header");
      doc.sections.push_back(Section{std::string(trim(line.substr(1, line.size() - 2))), lineno, {}});
      current = &doc.sections.back();
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw Error("line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw Error("line " + std::to_string(lineno) + ": empty key");
    if (current->entries.count(key)) {
      throw Error("line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    current->entries[key] = Entry{std::string(trim(line.substr(eq + 1))), lineno};
  }
  return doc;
}

inline Document parse_string(const std::string& text) {
  std::istringstream in(text);
  return parse(in);
}

inline Document parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file '" + path + "'");
  return parse(in);
}

}  // namespace flexem::config
