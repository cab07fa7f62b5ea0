#include "hierpath/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "hierpath/error.hpp"
#include "hierpath/random.hpp"

namespace hierpath {

std::vector<Phase> default_alternating_schedule(std::size_t total_epochs) {
  if (total_epochs < 3) {
    throw ConfigError("alternating schedule needs at least 3 epochs, got " +
                      std::to_string(total_epochs));
  }
  const std::size_t quarter = std::max<std::size_t>(1, total_epochs / 4);
  return {{quarter, true, false}, {quarter, false, true}, {total_epochs - 2 * quarter, false, false}};
}

std::vector<Phase> resolve_phases(const TrainingConfig& config) {
  std::vector<Phase> phases;
  if (!config.phases.empty()) phases = config.phases;
  else if (config.alternating) phases = default_alternating_schedule(config.epochs);
  else phases = {{config.epochs, false, false}};
  validate_phases(phases);
  return phases;
}

void validate_phases(std::span<const Phase> phases) {
  if (phases.empty()) throw ConfigError("training needs at least one phase");
  for (std::size_t i = 0; i < phases.size(); ++i) {
    if (phases[i].epochs == 0) throw ConfigError("phase " + std::to_string(i + 1) + " has no epochs");
    if (phases[i].freeze_cnn && phases[i].freeze_head) {
      throw ConfigError("phase " + std::to_string(i + 1) + " freezes every parameter");
    }
  }
}

std::size_t phase_for_epoch(std::span<const Phase> phases, std::size_t epoch) {
  std::size_t end = 0;
  for (std::size_t i = 0; i < phases.size(); ++i) {
    end += phases[i].epochs;
    if (epoch < end) return i;
  }
  return phases.size() - 1;
}

void apply_freeze(ModelBundle& bundle, const Phase& phase) {
  for (auto& p : bundle.parameters()) {
    const bool frozen = p.component == Component::cnn ? phase.freeze_cnn : phase.freeze_head;
    p.tensor->set_requires_grad(p.trainable && !frozen);
  }
}

std::uint64_t component_hash(ModelBundle& bundle, Component component) {
  std::string bytes;
  for (const auto& p : bundle.parameters()) {
    if (p.component != component) continue;
    const auto data = p.tensor->data();
    bytes.append(reinterpret_cast<const char*>(data.data()), data.size_bytes());
  }
  return fnv1a(bytes);
}

std::size_t resolve_threads(std::size_t requested) {
  std::size_t n = std::max<std::size_t>(1, requested);
  if (const char* env = std::getenv("HIERPATH_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
  }
  return n;
}

namespace {

/// Runs body(i) for i in [0, n) on up to `threads` workers with a static
/// partition. Results are written by index, so order never depends on timing.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& body) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) body(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

struct SampleGrad {
  double loss = 0.0;
  std::vector<std::vector<double>> grads;  // per active parameter
};

}  // namespace

double train_epoch(ModelBundle& bundle, std::span<const Sample> train,
                   std::span<const Phase> phases, TrainState& state, std::uint64_t seed) {
  if (train.empty()) throw UsageError("training split is empty");
  const auto& tc = bundle.config.training;
  const Phase& phase = phases[phase_for_epoch(phases, state.epoch)];
  apply_freeze(bundle, phase);
  auto params = bundle.parameters();
  if (state.slot1.size() != params.size()) {
    state.slot1.assign(params.size(), {});
    state.slot2.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.slot1[i].assign(params[i].tensor->size(), 0.0);
      state.slot2[i].assign(params[i].tensor->size(), 0.0);
    }
  }
  std::vector<std::size_t> active;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].tensor->requires_grad()) active.push_back(i);
  }

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0xe90c0000 + state.epoch));
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t batch = std::max<std::size_t>(1, tc.batch_size);
  const std::size_t threads = resolve_threads(tc.threads);
  double total_loss = 0.0;
  for (std::size_t start = 0, batch_id = 0; start < order.size(); start += batch, ++batch_id) {
    const std::size_t count = std::min(batch, order.size() - start);
    std::vector<SampleGrad> results(count);
    parallel_for(count, threads, [&](std::size_t k) {
      const Sample& s = train[order[start + k]];
      Tape tape;
      Var loss = sample_loss(tape, bundle, s.image, s.paths);
      tape.backward(loss);
      results[k].loss = loss.value().item();
      results[k].grads.reserve(active.size());
      for (std::size_t i : active) results[k].grads.push_back(tape.parameter_grad(*params[i].tensor));
    });

    double batch_loss = 0.0;
    for (const auto& r : results) batch_loss += r.loss;
    batch_loss /= static_cast<double>(count);
    if (!std::isfinite(batch_loss)) {
      std::ostringstream msg;
      msg << "non-finite loss " << batch_loss << " in batch " << batch_id << " of epoch "
          << state.epoch + 1;
      throw NumericError(msg.str());
    }
    total_loss += batch_loss * static_cast<double>(count);

    std::vector<std::vector<double>> grads(active.size());
    double norm2 = 0.0;
    for (std::size_t a = 0; a < active.size(); ++a) {
      auto& g = grads[a];
      g.assign(params[active[a]].tensor->size(), 0.0);
      for (const auto& r : results) {
        for (std::size_t j = 0; j < g.size(); ++j) g[j] += r.grads[a][j];
      }
      for (double& v : g) {
        v /= static_cast<double>(count);
        norm2 += v * v;
      }
    }
    const double norm = std::sqrt(norm2);
    const double clip = tc.clip_norm > 0 && norm > tc.clip_norm ? tc.clip_norm / norm : 1.0;

    ++state.step;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      auto& w = params[i].tensor->values();
      auto& m = state.slot1[i];
      auto& v = state.slot2[i];
      const auto& g = grads[a];
      if (tc.optimizer == OptimizerKind::sgd) {
        for (std::size_t j = 0; j < w.size(); ++j) {
          m[j] = tc.momentum * m[j] + clip * g[j];
          w[j] -= tc.lr * m[j];
        }
      } else {
        const double t = static_cast<double>(state.step);
        const double c1 = 1.0 - std::pow(tc.beta1, t);
        const double c2 = 1.0 - std::pow(tc.beta2, t);
        for (std::size_t j = 0; j < w.size(); ++j) {
          const double gj = clip * g[j];
          m[j] = tc.beta1 * m[j] + (1.0 - tc.beta1) * gj;
          v[j] = tc.beta2 * v[j] + (1.0 - tc.beta2) * gj * gj;
          w[j] -= tc.lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + 1e-8);
        }
      }
    }
  }
  ++state.epoch;
  return total_loss / static_cast<double>(train.size());
}

std::string to_string(EvalMode mode) {
  switch (mode) {
    case EvalMode::fpl: return "fpl";
    case EvalMode::general: return "general";
    case EvalMode::multilabel: return "multilabel";
    case EvalMode::flat: return "flat";
  }
  return "?";
}

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "fpl") return EvalMode::fpl;
  if (s == "general") return EvalMode::general;
  if (s == "multilabel") return EvalMode::multilabel;
  if (s == "flat") return EvalMode::flat;
  throw UsageError("unknown eval mode '" + s + "' (fpl, general, multilabel, flat)");
}

EvalMode default_eval_mode(const ModelBundle& bundle) {
  switch (bundle.head()) {
    case HeadKind::fpl: return EvalMode::fpl;
    case HeadKind::flat: return EvalMode::flat;
    case HeadKind::general: return bundle.multilabel() ? EvalMode::multilabel : EvalMode::general;
  }
  return EvalMode::fpl;
}

namespace {

std::vector<std::vector<Tensor>> all_logits(const ModelBundle& bundle, std::span<const Sample> samples) {
  std::vector<std::vector<Tensor>> out(samples.size());
  parallel_for(samples.size(), resolve_threads(bundle.config.training.threads),
               [&](std::size_t i) { out[i] = infer_logits(bundle, samples[i].image); });
  return out;
}

}  // namespace

EvalResult evaluate(const ModelBundle& bundle, std::span<const Sample> test, EvalMode mode,
                    std::span<const Sample> validation) {
  if (mode != default_eval_mode(bundle)) {
    throw ConfigError("eval mode " + to_string(mode) + " does not match a " +
                      to_string(default_eval_mode(bundle)) + " model");
  }
  EvalResult result;
  const auto logits = all_logits(bundle, test);
  std::vector<PathSet> truths;
  for (const auto& s : test) {
    result.ids.push_back(s.id);
    truths.push_back(s.paths);
  }
  const std::size_t width = std::max<std::size_t>(1, bundle.config.training.beam_width);
  if (mode == EvalMode::multilabel) {
    if (validation.empty()) throw UsageError("multilabel evaluation needs a validation split to tune τ");
    const auto val_logits = all_logits(bundle, validation);
    std::vector<PathSet> val_truths;
    for (const auto& s : validation) val_truths.push_back(s.paths);
    result.threshold = tune_threshold(val_logits, val_truths, bundle.tree,
                                      bundle.config.training.threshold_step);
    for (const auto& l : logits) {
      result.predictions.push_back(select_paths_by_threshold(l, bundle.tree, result.threshold->tau));
    }
    result.path = path_f1(result.predictions, truths);
    result.node = node_f1(result.predictions, truths);
    result.path.threshold = result.node.threshold = result.threshold->tau;
    return result;
  }
  std::vector<LabelPath> preds, single;
  for (std::size_t i = 0; i < test.size(); ++i) {
    LabelPath p;
    if (mode == EvalMode::flat) {
      const auto z = logits[i].front().data();
      const auto best = static_cast<NodeId>(std::max_element(z.begin(), z.end()) - z.begin()) + 1;
      p = lift_to_path(best, bundle.tree);
    } else {
      p = beam_search(logits[i], bundle.tree, width,
                      mode == EvalMode::fpl ? BeamMode::fixed : BeamMode::general)
              .path;
    }
    preds.push_back(p);
    single.push_back(test[i].paths.front());
    result.predictions.push_back({p});
  }
  result.path = path_accuracy(preds, single);
  result.node = node_accuracy(preds, single);
  return result;
}

Json to_json(const EvalResult& r) {
  Json j = {{"path", to_json(r.path)}, {"node", to_json(r.node)}, {"samples", r.ids.size()}};
  if (r.threshold) j["threshold"] = {{"tau", r.threshold->tau}, {"validation_path_f1", r.threshold->f1}};
  return j;
}

FitResult fit(ModelBundle& bundle, std::span<const Sample> train,
              std::span<const Sample> validation, std::uint64_t seed,
              const std::function<void(const EpochLog&)>& on_epoch) {
  const auto phases = resolve_phases(bundle.config.training);
  std::size_t total = 0;
  for (const auto& p : phases) total += p.epochs;
  const EvalMode mode = default_eval_mode(bundle);
  const bool can_validate = !validation.empty();

  TrainState state;
  FitResult fit;
  std::vector<std::vector<double>> best;
  for (std::size_t e = 0; e < total; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochLog log;
    log.epoch = e + 1;
    log.phase = phase_for_epoch(phases, e) + 1;
    log.loss = train_epoch(bundle, train, phases, state, seed);
    if (can_validate) {
      log.validation = mode == EvalMode::multilabel
                           ? evaluate(bundle, validation, mode, validation).path.score
                           : evaluate(bundle, validation, mode).path.score;
      if (!fit.best_validation || *log.validation > *fit.best_validation) {
        fit.best_validation = log.validation;
        fit.best_epoch = e + 1;
        best.clear();
        for (const auto& p : bundle.parameters()) best.push_back(p.tensor->values());
      }
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fit.history.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  if (!best.empty()) {
    auto params = bundle.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor->values() = best[i];
  } else {
    fit.best_epoch = total;
  }
  return fit;
}



std::vector<GradCheckGroup> gradient_check(ModelBundle& bundle, std::span<const Sample> samples,
                                           double step) {
  if (samples.empty()) throw UsageError("gradient check needs at least one sample");
  auto params = bundle.parameters();
  for (auto& p : params) p.tensor->set_requires_grad(p.trainable);
  const auto total_loss = [&]() {
    double s = 0.0;
    for (const auto& sample : samples) {
      Tape tape;
      s += sample_loss(tape, bundle, sample.image, sample.paths).value().item();
    }
    return s;
  };

  std::vector<std::vector<double>> analytic(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) analytic[i].assign(params[i].tensor->size(), 0.0);
  for (const auto& sample : samples) {
    Tape tape;
    tape.backward(sample_loss(tape, bundle, sample.image, sample.paths));
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto g = tape.parameter_grad(*params[i].tensor);
      for (std::size_t k = 0; k < g.size(); ++k) analytic[i][k] += g[k];
    }
  }

  std::vector<GradCheckGroup> out;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i].trainable) continue;
    Tensor& target = *params[i].tensor;
    const Tensor original = target;
    const Tensor numeric = finite_diff_grad([&](const Tensor& x) {
      target.values() = x.values();
      return total_loss();
    }, original, step);
    target.values() = original.values();
    out.push_back({params[i].name, target.size(), relative_error(analytic[i], numeric.data())});
  }
  return out;
}

}  // namespace hierpath
