#include "hierpath/class_tree.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <sstream>
#include <unordered_map>

#include "hierpath/error.hpp"

namespace hierpath {

namespace {

std::string_view trim(std::string_view s) {
  const auto is_space = [](char c) { return c == ' ' || c == '\r' || c == '\n' || c == '\t'; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

}  // namespace

ClassTree ClassTree::parse(std::string_view text) {
  struct Line {
    std::string name;
    std::string parent;
    std::size_t number;
  };
  std::vector<Line> lines;
  std::size_t number = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view raw = text.substr(pos, end - pos);
    pos = end + 1;
    ++number;
    if (auto hash = raw.find('#'); hash != std::string_view::npos) raw = raw.substr(0, hash);
    if (trim(raw).empty()) continue;
    const auto tab = raw.find('\t');
    if (tab == std::string_view::npos) {
      throw ParseError("expected name<TAB>parent", number);
    }
    const auto name = trim(raw.substr(0, tab));
    const auto parent = trim(raw.substr(tab + 1));
    if (name.empty()) throw ParseError("empty node name", number);
    if (parent.empty()) throw ParseError("empty parent field for '" + std::string(name) + "'", number);
    lines.push_back({std::string(name), std::string(parent), number});
    if (end == text.size()) break;
  }

  const Line* root = nullptr;
  std::unordered_map<std::string, const Line*> by_name;
  for (const auto& line : lines) {
    if (!by_name.emplace(line.name, &line).second) {
      throw ParseError("duplicate node name '" + line.name + "'", line.number);
    }
    if (line.parent == "-") {
      if (root != nullptr) {
        throw ParseError("second root '" + line.name + "' (first root '" + root->name +
                             "' on line " + std::to_string(root->number) + ")",
                         line.number);
      }
      root = &line;
    }
  }
  if (root == nullptr) throw ParseError("tree has no root line (name<TAB>-)");
  for (const auto& line : lines) {
    if (line.parent != "-" && !by_name.contains(line.parent)) {
      throw ParseError("parent '" + line.parent + "' of '" + line.name + "' is not defined",
                       line.number);
    }
  }

  std::unordered_map<std::string, NodeId> ids;
  std::vector<std::string> names{root->name};
  ids.emplace(root->name, 0);
  for (const auto& line : lines) {
    if (&line == root) continue;
    ids.emplace(line.name, names.size());
    names.push_back(line.name);
  }
  std::vector<std::optional<NodeId>> parents(names.size());
  for (const auto& line : lines) {
    if (&line != root) parents[ids.at(line.name)] = ids.at(line.parent);
  }
  // Anything not reachable from the root sits on a parent cycle.
  std::vector<bool> reached(names.size(), false);
  reached[0] = true;
  bool grew = true;
  while (grew) {
    grew = false;
    for (NodeId id = 1; id < names.size(); ++id) {
      if (!reached[id] && reached[*parents[id]]) reached[id] = grew = true;
    }
  }
  for (const auto& line : lines) {
    if (!reached[ids.at(line.name)]) {
      throw ParseError("node '" + line.name + "' lies on a parent cycle", line.number);
    }
  }

  ClassTree tree;
  tree.names_ = std::move(names);
  tree.parents_ = std::move(parents);
  tree.finalize();
  return tree;
}

ClassTree ClassTree::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read tree file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

ClassTree ClassTree::from_parents(std::vector<std::string> names,
                                  const std::vector<std::optional<NodeId>>& parents) {
  if (names.empty() || names.size() != parents.size()) {
    throw UsageError("from_parents: names and parents must be non-empty and equal length");
  }
  if (parents[0].has_value()) throw UsageError("from_parents: node 0 must be the root");
  for (NodeId id = 1; id < parents.size(); ++id) {
    if (!parents[id] || *parents[id] >= id) {
      throw UsageError("from_parents: parent of node " + std::to_string(id) +
                       " must be an earlier node");
    }
  }
  ClassTree tree;
  tree.names_ = std::move(names);
  tree.parents_ = parents;
  tree.finalize();
  return tree;
}

void ClassTree::finalize() {
  const std::size_t n = names_.size();
  if (n < 2) throw ParseError("tree needs at least one class below the root");
  children_.assign(n, {});
  for (NodeId id = 1; id < n; ++id) children_[*parents_[id]].push_back(id);
  depths_.assign(n, 0);
  heights_.assign(n, 0);
  max_depth_ = 0;
  std::function<void(NodeId)> visit = [&](NodeId id) {
    for (NodeId c : children_[id]) {
      depths_[c] = depths_[id] + 1;
      max_depth_ = std::max(max_depth_, depths_[c]);
      visit(c);
      heights_[id] = std::max(heights_[id], heights_[c] + 1);
    }
  };
  visit(0);
}

std::string ClassTree::serialize() const {
  std::string out;
  for (NodeId id = 0; id < names_.size(); ++id) {
    out += names_[id];
    out += '\t';
    out += parents_[id] ? names_[*parents_[id]] : std::string("-");
    out += '\n';
  }
  return out;
}

std::optional<NodeId> ClassTree::find(std::string_view name) const {
  for (NodeId id = 0; id < names_.size(); ++id) {
    if (names_[id] == name) return id;
  }
  return std::nullopt;
}

std::vector<NodeId> ClassTree::leaves() const {
  std::vector<NodeId> out;
  for (const auto& p : enumerate_paths(*this, true)) out.push_back(p.back());
  return out;
}

LabelPath ClassTree::path_to(NodeId id) const {
  if (id == 0 || id >= names_.size()) {
    throw UsageError("no class with id " + std::to_string(id));
  }
  LabelPath path;
  for (std::optional<NodeId> cur = id; cur && *cur != 0; cur = parents_[*cur]) {
    path.push_back(*cur);
  }
  std::reverse(path.begin(), path.end());
  return path;
}

bool ClassTree::is_valid_path(std::span<const NodeId> path) const {
  if (path.empty()) return false;
  NodeId prev = 0;
  for (NodeId id : path) {
    if (id == 0 || id >= names_.size() || parents_[id] != prev) return false;
    prev = id;
  }
  return true;
}

std::string ClassTree::path_string(std::span<const NodeId> path) const {
  std::string out;
  for (std::size_t i = 0; i < path.size(); ++i) {
    if (i) out += '/';
    out += names_.at(path[i]);
  }
  return out;
}

LabelPath ClassTree::parse_path(std::string_view text) const {
  LabelPath path;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto end = text.find('/', pos);
    if (end == std::string_view::npos) end = text.size();
    const auto part = trim(text.substr(pos, end - pos));
    auto id = find(part);
    if (!id || *id == 0) throw UsageError("unknown class '" + std::string(part) + "'");
    path.push_back(*id);
    pos = end + 1;
  }
  if (!is_valid_path(path)) {
    throw UsageError("'" + std::string(text) + "' is not a root-to-node path");
  }
  return path;
}

std::size_t validate_fixed_depth(const ClassTree& tree) {
  const auto leaves = tree.leaves();
  const std::size_t T = tree.depth(leaves.front());
  std::string offenders;
  for (NodeId leaf : leaves) {
    if (tree.depth(leaf) != T) {
      if (!offenders.empty()) offenders += ", ";
      offenders += tree.name(leaf) + " (depth " + std::to_string(tree.depth(leaf)) + ")";
    }
  }
  if (!offenders.empty()) {
    throw FixedDepthError("leaves at unequal depths; expected " + std::to_string(T) +
                          " like '" + tree.name(leaves.front()) + "', got " + offenders);
  }
  return T;
}

Tensor one_hot(std::span<const NodeId> path, std::size_t level, std::size_t num_classes) {
  if (level < 1 || level > path.size()) {
    throw UsageError("level " + std::to_string(level) + " outside path of length " +
                     std::to_string(path.size()));
  }
  const NodeId id = path[level - 1];
  if (id == 0 || id > num_classes) {
    throw UsageError("node id " + std::to_string(id) + " outside 1.." +
                     std::to_string(num_classes));
  }
  Tensor out(Shape{num_classes});
  out[id - 1] = 1.0;
  return out;
}

Tensor paths_to_multilabel(std::span<const LabelPath> paths, const ClassTree& tree) {
  Tensor out(Shape{tree.num_classes()});
  for (const auto& path : paths) {
    if (!tree.is_valid_path(path)) {
      throw UsageError("invalid path '" + tree.path_string(path) + "'");
    }
    for (NodeId id : path) out[id - 1] = 1.0;
  }
  return out;
}

std::vector<LabelPath> enumerate_paths(const ClassTree& tree, bool leaves_only) {
  std::vector<LabelPath> out;
  LabelPath current;
  std::function<void(NodeId)> visit = [&](NodeId id) {
    for (NodeId c : tree.children(id)) {
      current.push_back(c);
      if (!leaves_only || tree.is_leaf(c)) out.push_back(current);
      visit(c);
      current.pop_back();
    }
  };
  visit(0);
  return out;
}

}  // namespace hierpath
