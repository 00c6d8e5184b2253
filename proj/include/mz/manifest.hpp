#pragma once

#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mz/align.hpp"

namespace mz::align {

class ManifestError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream ss(line);
  std::string tok;
  while (ss >> tok) {
    if (tok[0] == '#') break;
    out.push_back(tok);
  }
  return out;
}

}  // namespace detail

/// Task manifest, line-oriented:
///   task <id> classification <K> <class names...>
///   task <id> survival <endpoint>
inline std::vector<TaskSpec> parse_tasks(std::istream& in) {
  std::vector<TaskSpec> tasks;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto f = detail::split_fields(line);
    if (f.empty()) continue;
    if (f[0] != "task")
      throw ManifestError("line " + std::to_string(line_no) + ": expected 'task', got '" + f[0] +
                          "'");
    if (f.size() < 3) throw ManifestError("line " + std::to_string(line_no) + ": short task line");
    TaskSpec t;
    t.id = f[1];
    if (f[2] == "classification") {
      if (f.size() < 4)
        throw ManifestError("line " + std::to_string(line_no) + ": missing class count");
      const int k = std::stoi(f[3]);
      if (k < 2 || static_cast<int>(f.size()) != 4 + k)
        throw ManifestError("line " + std::to_string(line_no) + ": expected " +
                            std::to_string(k) + " class names");
      t.kind = TaskKind::Classification;
      t.class_names.assign(f.begin() + 4, f.end());
    } else if (f[2] == "survival") {
      if (f.size() != 4)
        throw ManifestError("line " + std::to_string(line_no) + ": expected endpoint");
      t.kind = TaskKind::Survival;
      t.endpoint = f[3];
    } else {
      throw ManifestError("line " + std::to_string(line_no) + ": unknown task kind '" + f[2] +
                          "'");
    }
    tasks.push_back(std::move(t));
  }
  return tasks;
}

/// Case manifest, line-oriented:
///   case <id> slides <grid-file...>
///   label <case> <task> <class-index>
///   label <case> <task> <time> <event>
inline std::vector<CaseRecord> parse_cases(std::istream& in) {
  std::vector<CaseRecord> cases;
  std::map<std::string, std::size_t> index;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto f = detail::split_fields(line);
    if (f.empty()) continue;
    if (f[0] == "case") {
      if (f.size() < 4 || f[2] != "slides")
        throw ManifestError("line " + std::to_string(line_no) +
                            ": expected 'case <id> slides <files...>'");
      CaseRecord c;
      c.id = f[1];
      c.slide_files.assign(f.begin() + 3, f.end());
      if (index.count(c.id))
        throw ManifestError("line " + std::to_string(line_no) + ": duplicate case '" + c.id +
                            "'");
      index[c.id] = cases.size();
      cases.push_back(std::move(c));
    } else if (f[0] == "label") {
      if (f.size() != 4 && f.size() != 5)
        throw ManifestError("line " + std::to_string(line_no) + ": malformed label line");
      auto it = index.find(f[1]);
      if (it == index.end())
        throw ManifestError("line " + std::to_string(line_no) + ": unknown case '" + f[1] + "'");
      Label l;
      l.task_id = f[2];
      if (f.size() == 4) {
        l.class_index = std::stoi(f[3]);
      } else {
        l.time = std::stod(f[3]);
        l.event = std::stoi(f[4]);
        l.class_index = -1;
        if (l.time < 0)
          throw ManifestError("line " + std::to_string(line_no) + ": negative time");
        if (l.event != 0 && l.event != 1)
          throw ManifestError("line " + std::to_string(line_no) + ": event must be 0 or 1");
      }
      cases[it->second].labels.push_back(std::move(l));
    } else {
      throw ManifestError("line " + std::to_string(line_no) + ": expected 'case' or 'label'");
    }
  }
  return cases;
}

/// Validates that every label references a registered task and, for
/// classification, a class within range.
inline void check_labels(const std::vector<CaseRecord>& cases,
                         const std::vector<TaskSpec>& tasks) {
  std::map<std::string, const TaskSpec*> by_id;
  for (const auto& t : tasks) by_id[t.id] = &t;
  for (const auto& c : cases)
    for (const auto& l : c.labels) {
      auto it = by_id.find(l.task_id);
      if (it == by_id.end())
        throw ManifestError("case " + c.id + ": label for unregistered task '" + l.task_id + "'");
      if (it->second->kind == TaskKind::Classification &&
          (l.class_index < 0 || l.class_index >= it->second->classes()))
        throw ManifestError("case " + c.id + ": class index out of range for task '" + l.task_id +
                            "'");
    }
}

inline void write_tasks(std::ostream& out, const std::vector<TaskSpec>& tasks) {
  for (const auto& t : tasks) {
    if (t.kind == TaskKind::Classification) {
      out << "task " << t.id << " classification " << t.classes();
      for (const auto& name : t.class_names) out << ' ' << name;
      out << '\n';
    } else {
      out << "task " << t.id << " survival " << t.endpoint << '\n';
    }
  }
}

inline void write_cases(std::ostream& out, const std::vector<CaseRecord>& cases) {
  for (const auto& c : cases) {
    out << "case " << c.id << " slides";
    for (const auto& s : c.slide_files) out << ' ' << s;
    out << '\n';
  }
  for (const auto& c : cases)
    for (const auto& l : c.labels) {
      if (l.class_index >= 0) {
        out << "label " << c.id << ' ' << l.task_id << ' ' << l.class_index << '\n';
      } else {
        out << "label " << c.id << ' ' << l.task_id << ' ' << l.time << ' ' << l.event << '\n';
      }
    }
}

}  // namespace mz::align
