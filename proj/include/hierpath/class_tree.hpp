#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hierpath/tensor.hpp"

namespace hierpath {

using NodeId = std::size_t;

/// Node ids from a root child down to the final class; the root is never
/// part of a path.
using LabelPath = std::vector<NodeId>;

/// Rooted class taxonomy. Node 0 is the artificial root; the remaining N
/// nodes are the classes, and class index (id - 1) addresses the N-length
/// output vectors.
class ClassTree {
 public:
  /// Parses `name<TAB>parent` lines (`-` marks the root, `#` starts a
  /// comment). Ids follow file order, with the root forced to 0.
  static ClassTree parse(std::string_view text);
  static ClassTree load(const std::string& path);

  /// Builds a tree from explicit parent links; parents[0] must be empty.
  static ClassTree from_parents(std::vector<std::string> names,
                                const std::vector<std::optional<NodeId>>& parents);

  std::string serialize() const;

  std::size_t node_count() const noexcept { return names_.size(); }
  /// N, the number of non-root classes.
  std::size_t num_classes() const noexcept { return names_.size() - 1; }

  const std::string& name(NodeId id) const { return names_.at(id); }
  std::optional<NodeId> parent(NodeId id) const { return parents_.at(id); }
  const std::vector<NodeId>& children(NodeId id) const { return children_.at(id); }
  /// Root has depth 0, its children depth 1.
  std::size_t depth(NodeId id) const { return depths_.at(id); }
  bool is_leaf(NodeId id) const { return children_.at(id).empty(); }
  std::size_t max_depth() const noexcept { return max_depth_; }
  /// Longest distance from `id` down to a leaf below it.
  std::size_t height(NodeId id) const { return heights_.at(id); }

  std::optional<NodeId> find(std::string_view name) const;
  std::vector<NodeId> leaves() const;

  /// Unique root-to-node path ending at `id` (root excluded).
  LabelPath path_to(NodeId id) const;
  bool is_valid_path(std::span<const NodeId> path) const;

  std::string path_string(std::span<const NodeId> path) const;
  LabelPath parse_path(std::string_view text) const;

 private:
  ClassTree() = default;
  void finalize();

  std::vector<std::string> names_;
  std::vector<std::optional<NodeId>> parents_;
  std::vector<std::vector<NodeId>> children_;
  std::vector<std::size_t> depths_;
  std::vector<std::size_t> heights_;
  std::size_t max_depth_ = 0;
};

/// Returns T when every leaf sits at the same depth T (root at depth 0).
std::size_t validate_fixed_depth(const ClassTree& tree);

/// N-length indicator of path[level - 1], level counted from 1.
Tensor one_hot(std::span<const NodeId> path, std::size_t level, std::size_t num_classes);

/// Union of all nodes on all paths as an N-length {0,1} vector.
Tensor paths_to_multilabel(std::span<const LabelPath> paths, const ClassTree& tree);

/// Depth-first, children in id order. With leaves_only == false every class
/// node yields the path ending at it.
std::vector<LabelPath> enumerate_paths(const ClassTree& tree, bool leaves_only);

}  // namespace hierpath
