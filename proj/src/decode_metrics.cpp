#include "hierpath/decode_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <ostream>
#include <set>

#include "hierpath/error.hpp"

namespace hierpath {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

bool better(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.path < b.path;
}

double sigmoid_value(double z) {
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

void check_logits(std::span<const Tensor> logits, const ClassTree& tree) {
  if (logits.empty()) throw UsageError("decoding needs at least one step of logits");
  for (const auto& row : logits) {
    if (row.size() != tree.num_classes()) {
      throw DimensionError("logit row of length " + std::to_string(row.size()) + " for " +
                           std::to_string(tree.num_classes()) + " classes");
    }
  }
}

}  // namespace

std::vector<std::vector<double>> log_softmax_rows(std::span<const Tensor> logits) {
  std::vector<std::vector<double>> out;
  for (const auto& row : logits) {
    const auto z = row.data();
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double v : z) s += std::exp(v - m);
    const double lse = m + std::log(s);
    std::vector<double> r(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) r[i] = z[i] - lse;
    out.push_back(std::move(r));
  }
  return out;
}

double path_log_prob(const std::vector<std::vector<double>>& lsm, std::span<const NodeId> path) {
  if (path.size() > lsm.size()) throw UsageError("path longer than the logit sequence");
  double s = 0.0;
  for (std::size_t t = 0; t < path.size(); ++t) s += lsm[t].at(path[t] - 1);
  return s;
}

double stop_log_prob(const std::vector<std::vector<double>>& lsm, const ClassTree& tree,
                     NodeId node) {
  const std::size_t d = tree.depth(node);
  if (tree.is_leaf(node) || d >= lsm.size()) return 0.0;
  const auto& next = lsm[d];
  std::vector<bool> child(next.size(), false);
  for (NodeId c : tree.children(node)) child[c - 1] = true;
  double m = kNegInf;
  for (std::size_t i = 0; i < next.size(); ++i) {
    if (!child[i]) m = std::max(m, next[i]);
  }
  if (m == kNegInf) return kNegInf;
  double s = 0.0;
  for (std::size_t i = 0; i < next.size(); ++i) {
    if (!child[i]) s += std::exp(next[i] - m);
  }
  return m + std::log(s);
}

BeamHypothesis beam_search(std::span<const Tensor> logits, const ClassTree& tree,
                           std::size_t beam_width, BeamMode mode) {
  if (beam_width < 1) throw UsageError("beam width must be at least 1");
  check_logits(logits, tree);
  const auto lsm = log_softmax_rows(logits);
  const std::size_t steps = lsm.size();

  std::vector<BeamHypothesis> beam{{{}, 0.0}};
  std::optional<BeamHypothesis> best;
  for (std::size_t t = 0; t < steps && !beam.empty(); ++t) {
    std::vector<BeamHypothesis> candidates;
    for (const auto& hyp : beam) {
      const NodeId last = hyp.path.empty() ? 0 : hyp.path.back();
      for (NodeId c : tree.children(last)) {
        // Fixed mode only follows children that can still reach the last step.
        if (mode == BeamMode::fixed && t + 1 + tree.height(c) < steps) continue;
        BeamHypothesis next{hyp.path, hyp.score + lsm[t][c - 1]};
        next.path.push_back(c);
        candidates.push_back(std::move(next));
      }
    }
    std::vector<BeamHypothesis> live;
    for (auto& cand : candidates) {
      const NodeId v = cand.path.back();
      if (mode == BeamMode::general || t + 1 == steps) {
        BeamHypothesis final{cand.path, cand.score};
        if (mode == BeamMode::general) final.score += stop_log_prob(lsm, tree, v);
        if (!best || better(final, *best)) best = final;
      }
      if (t + 1 < steps && !tree.is_leaf(v)) live.push_back(std::move(cand));
    }
    std::sort(live.begin(), live.end(), better);
    if (live.size() > beam_width) live.resize(beam_width);
    beam = std::move(live);
  }
  if (!best) {
    throw UsageError("no tree path reaches depth " + std::to_string(steps) +
                     " (fixed-mode beam search)");
  }
  return *best;
}

std::vector<LabelPath> select_paths_by_threshold(std::span<const Tensor> logits,
                                                 const ClassTree& tree, double tau) {
  check_logits(logits, tree);
  std::vector<LabelPath> out;
  LabelPath current;
  const auto on = [&](NodeId v) {
    const std::size_t d = tree.depth(v);
    return d <= logits.size() && sigmoid_value(logits[d - 1][v - 1]) >= tau;
  };
  std::function<void(NodeId)> visit = [&](NodeId v) {
    bool extended = false;
    for (NodeId c : tree.children(v)) {
      if (!on(c)) continue;
      extended = true;
      current.push_back(c);
      visit(c);
      current.pop_back();
    }
    if (!extended && v != 0) out.push_back(current);
  };
  visit(0);
  return out;
}

Json to_json(const MetricsReport& r) {
  Json j = {{"kind", r.kind}, {"score", r.score}};
  if (r.kind.ends_with("f1")) {
    j["true_positives"] = r.true_positives;
    j["predicted"] = r.predicted;
    j["actual"] = r.actual;
    j["precision"] = r.precision;
    j["recall"] = r.recall;
    if (r.threshold) j["threshold"] = *r.threshold;
  } else {
    j["numerator"] = r.numerator;
    j["denominator"] = r.denominator;
  }
  Json levels = Json::array();
  for (std::size_t t = 0; t < r.per_level.size(); ++t) {
    const auto& l = r.per_level[t];
    levels.push_back({{"level", t + 1},
                      {"correct", l.correct},
                      {"total", l.total},
                      {"score", l.total ? static_cast<double>(l.correct) / static_cast<double>(l.total) : 0.0}});
  }
  j["per_level"] = levels;
  return j;
}

double f1_score(double precision, double recall) {
  return precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
}

namespace {

void require_same_count(std::size_t a, std::size_t b) {
  if (a != b) {
    throw UsageError("metric needs equal sample counts, got " + std::to_string(a) +
                     " predictions and " + std::to_string(b) + " truths");
  }
}

void bump(std::vector<LevelCount>& levels, std::size_t t, bool correct) {
  if (levels.size() <= t) levels.resize(t + 1);
  levels[t].total += 1;
  if (correct) levels[t].correct += 1;
}

double ratio(std::size_t a, std::size_t b) {
  return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b);
}

MetricsReport f1_report(std::string kind, std::size_t tp, std::size_t predicted,
                        std::size_t actual) {
  MetricsReport r;
  r.kind = std::move(kind);
  r.true_positives = tp;
  r.predicted = predicted;
  r.actual = actual;
  r.precision = ratio(tp, predicted);
  r.recall = ratio(tp, actual);
  r.score = f1_score(r.precision, r.recall);
  r.numerator = tp;
  r.denominator = predicted + actual;
  return r;
}

}  // namespace

MetricsReport path_accuracy(std::span<const LabelPath> preds, std::span<const LabelPath> truths) {
  require_same_count(preds.size(), truths.size());
  MetricsReport r;
  r.kind = "path_accuracy";
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == truths[i]) ++r.numerator;
    bool prefix = true;
    for (std::size_t t = 0; t < truths[i].size(); ++t) {
      prefix = prefix && t < preds[i].size() && preds[i][t] == truths[i][t];
      bump(r.per_level, t, prefix);
    }
  }
  r.denominator = preds.size();
  r.score = ratio(r.numerator, r.denominator);
  return r;
}

MetricsReport node_accuracy(std::span<const LabelPath> preds, std::span<const LabelPath> truths) {
  require_same_count(preds.size(), truths.size());
  MetricsReport r;
  r.kind = "node_accuracy";
  for (std::size_t i = 0; i < preds.size(); ++i) {
    for (std::size_t t = 0; t < truths[i].size(); ++t) {
      const bool ok = t < preds[i].size() && preds[i][t] == truths[i][t];
      if (ok) ++r.numerator;
      ++r.denominator;
      bump(r.per_level, t, ok);
    }
  }
  r.score = ratio(r.numerator, r.denominator);
  return r;
}

MetricsReport path_f1(std::span<const PathSet> preds, std::span<const PathSet> truths) {
  require_same_count(preds.size(), truths.size());
  std::size_t tp = 0, predicted = 0, actual = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const std::set<LabelPath> p(preds[i].begin(), preds[i].end());
    const std::set<LabelPath> t(truths[i].begin(), truths[i].end());
    predicted += p.size();
    actual += t.size();
    for (const auto& path : p) tp += t.count(path);
  }
  return f1_report("path_f1", tp, predicted, actual);
}

MetricsReport node_f1(std::span<const PathSet> preds, std::span<const PathSet> truths) {
  require_same_count(preds.size(), truths.size());
  using Positioned = std::pair<std::size_t, NodeId>;
  const auto nodes = [](const PathSet& set) {
    std::set<Positioned> out;
    for (const auto& path : set) {
      for (std::size_t t = 0; t < path.size(); ++t) out.insert({t, path[t]});
    }
    return out;
  };
  std::size_t tp = 0, predicted = 0, actual = 0;
  std::vector<LevelCount> levels;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto p = nodes(preds[i]);
    const auto t = nodes(truths[i]);
    predicted += p.size();
    actual += t.size();
    for (const auto& n : t) bump(levels, n.first, p.contains(n));
    for (const auto& n : p) tp += t.count(n);
  }
  auto r = f1_report("node_f1", tp, predicted, actual);
  r.per_level = std::move(levels);
  return r;
}

ThresholdChoice tune_threshold(std::span<const std::vector<Tensor>> logits,
                               std::span<const PathSet> truths, const ClassTree& tree,
                               double grid_step) {
  if (logits.empty()) throw UsageError("tune_threshold needs a non-empty validation set");
  require_same_count(logits.size(), truths.size());
  if (!(grid_step > 0.0 && grid_step < 1.0)) {
    throw UsageError("threshold grid step must lie in (0, 1)");
  }
  const auto points = static_cast<std::size_t>(std::floor(1.0 / grid_step + 1e-9));
  ThresholdChoice best{0.0, -1.0};
  std::vector<PathSet> preds(logits.size());
  for (std::size_t k = 0; k <= points; ++k) {
    const double tau = std::min(1.0, static_cast<double>(k) * grid_step);
    for (std::size_t i = 0; i < logits.size(); ++i) {
      preds[i] = select_paths_by_threshold(logits[i], tree, tau);
    }
    const double f1 = path_f1(preds, truths).score;
    if (f1 > best.f1) best = {tau, f1};
  }
  return best;
}

LabelPath lift_to_path(NodeId node, const ClassTree& tree) { return tree.path_to(node); }

void write_predictions(std::ostream& out, std::span<const std::string> ids,
                       std::span<const PathSet> preds, const ClassTree& tree) {
  require_same_count(ids.size(), preds.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out << ids[i] << '\t';
    for (std::size_t k = 0; k < preds[i].size(); ++k) {
      if (k) out << '|';
      out << tree.path_string(preds[i][k]);
    }
    out << '\n';
  }
}

}  // namespace hierpath
