#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hierpath/config.hpp"
#include "hierpath/data.hpp"
#include "hierpath/decode_metrics.hpp"
#include "hierpath/model.hpp"

namespace hierpath {

/// Phases 1:1:2: head trains with the CNN frozen, then the CNN with the head
/// frozen, then everything.
std::vector<Phase> default_alternating_schedule(std::size_t total_epochs);

/// Explicit phases, the alternating default, or one unfrozen phase.
std::vector<Phase> resolve_phases(const TrainingConfig& config);

/// Throws ConfigError when a phase freezes everything or has no epochs.
void validate_phases(std::span<const Phase> phases);

/// Index of the phase that owns 0-based `epoch`.
std::size_t phase_for_epoch(std::span<const Phase> phases, std::size_t epoch);

/// Sets requires_grad on every parameter according to the phase.
void apply_freeze(ModelBundle& bundle, const Phase& phase);

/// FNV-1a over the raw bytes of every parameter in `component`.
std::uint64_t component_hash(ModelBundle& bundle, Component component);

struct TrainState {
  std::size_t epoch = 0;
  std::size_t step = 0;
  std::vector<std::vector<double>> slot1;  // momentum or Adam first moment, per parameter
  std::vector<std::vector<double>> slot2;  // Adam second moment
};

/// Worker count: config value capped by HIERPATH_THREADS when set.
std::size_t resolve_threads(std::size_t requested);

/// One epoch over `train` in a seeded order. Frozen parameters are untouched.
/// Returns the mean per-sample loss.
double train_epoch(ModelBundle& bundle, std::span<const Sample> train,
                   std::span<const Phase> phases, TrainState& state, std::uint64_t seed);

enum class EvalMode { fpl, general, multilabel, flat };

std::string to_string(EvalMode mode);
EvalMode eval_mode_from_string(const std::string& s);
EvalMode default_eval_mode(const ModelBundle& bundle);

struct EvalResult {
  MetricsReport path;
  MetricsReport node;
  std::optional<ThresholdChoice> threshold;
  std::vector<std::string> ids;
  std::vector<PathSet> predictions;
};

/// Inference plus path/node reports. Multi-label mode tunes τ on `validation`
/// and applies it to `test`.
EvalResult evaluate(const ModelBundle& bundle, std::span<const Sample> test, EvalMode mode,
                    std::span<const Sample> validation = {});

Json to_json(const EvalResult& result);

struct EpochLog {
  std::size_t epoch = 0;
  std::size_t phase = 0;
  double loss = 0.0;
  std::optional<double> validation;
  double seconds = 0.0;
};

struct FitResult {
  std::vector<EpochLog> history;
  std::size_t best_epoch = 0;
  std::optional<double> best_validation;
};

/// Full training run: phases, per-epoch validation, best-snapshot restore.
FitResult fit(ModelBundle& bundle, std::span<const Sample> train,
              std::span<const Sample> validation, std::uint64_t seed,
              const std::function<void(const EpochLog&)>& on_epoch = {});

struct GradCheckGroup {
  std::string name;
  std::size_t size = 0;
  double max_relative_error = 0.0;
};

/// Reverse-mode gradients of the summed training loss against central
/// differences, one entry per trainable parameter tensor.
std::vector<GradCheckGroup> gradient_check(ModelBundle& bundle, std::span<const Sample> samples,
                                           double step = 1e-5);

}  // namespace hierpath
