#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hierpath/class_tree.hpp"
#include "hierpath/config.hpp"
#include "hierpath/tensor.hpp"

namespace hierpath {

enum class BeamMode { fixed, general };

struct BeamHypothesis {
  LabelPath path;
  double score = 0.0;  // cumulative log-probability (plus stop score in general mode)
};

/// Per-step log-softmax rows; logits[t] scores depth t+1.
std::vector<std::vector<double>> log_softmax_rows(std::span<const Tensor> logits);

/// Summed log-probability of `path` under per-step log-softmax rows.
double path_log_prob(const std::vector<std::vector<double>>& lsm, std::span<const NodeId> path);

/// General-mode stop score at `node` (depth d): log of the probability mass
/// that step d+1 assigns outside node's children; 0 at leaves and at the last
/// step.
double stop_log_prob(const std::vector<std::vector<double>>& lsm, const ClassTree& tree,
                     NodeId node);

/// Tree-constrained beam search. Ties prefer the lexicographically smaller
/// node-id sequence.
BeamHypothesis beam_search(std::span<const Tensor> logits, const ClassTree& tree,
                           std::size_t beam_width, BeamMode mode);

/// Maximal root-to-node paths whose nodes all have sigmoid(o_t)[node] ≥ τ.
std::vector<LabelPath> select_paths_by_threshold(std::span<const Tensor> logits,
                                                 const ClassTree& tree, double tau);

struct LevelCount {
  std::size_t correct = 0;
  std::size_t total = 0;
};

struct MetricsReport {
  std::string kind;  // path_accuracy, node_accuracy, path_f1, node_f1
  std::size_t numerator = 0;
  std::size_t denominator = 0;
  double score = 0.0;
  // F1 only
  std::size_t true_positives = 0;
  std::size_t predicted = 0;
  std::size_t actual = 0;
  double precision = 0.0;
  double recall = 0.0;
  std::optional<double> threshold;
  std::vector<LevelCount> per_level;
};

Json to_json(const MetricsReport& report);

/// 2PR/(P+R), 0 when P+R = 0.
double f1_score(double precision, double recall);

MetricsReport path_accuracy(std::span<const LabelPath> preds, std::span<const LabelPath> truths);
MetricsReport node_accuracy(std::span<const LabelPath> preds, std::span<const LabelPath> truths);

using PathSet = std::vector<LabelPath>;

MetricsReport path_f1(std::span<const PathSet> preds, std::span<const PathSet> truths);
MetricsReport node_f1(std::span<const PathSet> preds, std::span<const PathSet> truths);

struct ThresholdChoice {
  double tau = 0.0;
  double f1 = 0.0;
};

/// Scans τ ∈ {0, step, 2·step, …, 1} for the best path F1; ties take the
/// smallest τ.
ThresholdChoice tune_threshold(std::span<const std::vector<Tensor>> logits,
                               std::span<const PathSet> truths, const ClassTree& tree,
                               double grid_step);

/// The root-to-node path ending at `node`.
LabelPath lift_to_path(NodeId node, const ClassTree& tree);

/// `sample_id<TAB>path1|path2` lines, paths as '/'-joined names.
void write_predictions(std::ostream& out, std::span<const std::string> ids,
                       std::span<const PathSet> preds, const ClassTree& tree);

}  // namespace hierpath
