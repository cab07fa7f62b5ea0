// hierpath command line: solve-dims, gen-data, train, eval, decode, gradcheck.
// Results go to stdout (JSON or tables), logs to stderr.
// Exit codes: 0 ok, 1 usage/config, 2 data, 3 numeric.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "hierpath/config.hpp"
#include "hierpath/conversion.hpp"
#include "hierpath/data.hpp"
#include "hierpath/decode_metrics.hpp"
#include "hierpath/error.hpp"
#include "hierpath/model.hpp"
#include "hierpath/training.hpp"

using namespace hierpath;
namespace fs = std::filesystem;

namespace {

constexpr const char* kToyTree = "r\t-\nA\tr\nB\tr\na\tA\nb\tB\n";

void emit(const Json& j) { std::cout << j.dump() << std::endl; }

Json stamped(Json j) {
  j["schema_version"] = kSchemaVersion;
  return j;
}

void log_line(const std::string& msg) { std::cerr << "[hierpath] " << msg << std::endl; }

/// Config file contents with flag overrides applied on top (flags win).
struct ConfigSource {
  std::string path;
  std::vector<std::string> sets;  // section.key=value
  std::optional<std::size_t> epochs, batch_size, threads, beam_width;
  std::optional<double> lr;
  std::optional<std::string> optimizer;

  ModelConfig resolve() const {
    Json j = Json::object();
    if (!path.empty()) {
      std::ifstream in(path);
      if (!in) throw ConfigError("cannot read config " + path);
      try {
        j = Json::parse(in);
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
      }
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      const auto dot = s.find('.');
      if (eq == std::string::npos || dot == std::string::npos || dot > eq) {
        throw UsageError("--set expects section.key=value, got '" + s + "'");
      }
      const std::string section = s.substr(0, dot), key = s.substr(dot + 1, eq - dot - 1);
      const std::string raw = s.substr(eq + 1);
      Json value;
      try {
        value = Json::parse(raw);
      } catch (const nlohmann::json::exception&) {
        value = raw;
      }
      j[section][key] = value;
    }
    if (epochs) j["training"]["epochs"] = *epochs;
    if (batch_size) j["training"]["batch_size"] = *batch_size;
    if (threads) j["training"]["threads"] = *threads;
    if (beam_width) j["training"]["beam_width"] = *beam_width;
    if (lr) j["training"]["lr"] = *lr;
    if (optimizer) j["training"]["optimizer"] = *optimizer;
    j.erase("schema_version");
    return config_from_json(j);
  }

  void bind(CLI::App* cmd, bool required) {
    auto* c = cmd->add_option("--config", path, "JSON config file");
    if (required) c->required()->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "Override one config key, e.g. training.lr=0.05 (repeatable)");
    cmd->add_option("--epochs", epochs, "Override training.epochs");
    cmd->add_option("--batch-size", batch_size, "Override training.batch_size");
    cmd->add_option("--lr", lr, "Override training.lr");
    cmd->add_option("--optimizer", optimizer, "Override training.optimizer (sgd, adam)");
    cmd->add_option("--threads", threads, "Worker threads (capped by HIERPATH_THREADS)");
  }
};

std::string pad(const std::string& s, std::size_t w) {
  return s.size() >= w ? s : s + std::string(w - s.size(), ' ');
}

// ---------------------------------------------------------------------------

struct SolveArgs {
  std::size_t depth = 0, width = 0, height = 0, p = 0;
  std::string kind = "pool", format = "table";
};

int run_solve(const SolveArgs& a) {
  Json rows = Json::array();
  std::ostringstream table;
  if (a.kind == "conv") {
    const auto sols = solve_conv_dims(a.depth, a.width, a.height, a.p);
    table << "   case  F    K     G   Z   out\n";
    for (std::size_t i = 0; i < sols.size(); ++i) {
      const auto& s = sols[i];
      const std::size_t out = conv_output_extent(a.width, s.filter, s.stride, s.padding);
      rows.push_back({{"case", s.case_id}, {"F", s.filter}, {"K", s.filters}, {"G", s.stride},
                      {"Z", s.padding}, {"output_width", out}});
      table << (i == 0 ? " * " : "   ") << pad(std::to_string(s.case_id), 6) << pad(std::to_string(s.filter), 5)
            << pad(std::to_string(s.filters), 6) << pad(std::to_string(s.stride), 4)
            << pad(std::to_string(s.padding), 4) << out << "\n";
    }
  } else {
    const auto sols = solve_pool_dims(a.depth, a.width, a.height, a.p);
    table << "   case  F    G    out\n";
    for (std::size_t i = 0; i < sols.size(); ++i) {
      const auto& s = sols[i];
      const std::size_t out = pool_output_extent(a.width, s.window, s.stride);
      rows.push_back({{"case", s.case_id}, {"F", s.window}, {"G", s.stride}, {"output_width", out}});
      table << (i == 0 ? " * " : "   ") << pad(std::to_string(s.case_id), 6)
            << pad(std::to_string(s.window), 5) << pad(std::to_string(s.stride), 5) << out << "\n";
    }
  }
  if (a.format == "json") {
    Json j = {{"kind", a.kind}, {"depth", a.depth}, {"width", a.width}, {"height", a.height},
              {"target_p", a.p}, {"solutions", rows}};
    if (!rows.empty()) j["chosen"] = rows[0];
    emit(stamped(j));
  } else {
    std::cout << a.kind << " D=" << a.depth << " W=" << a.width << " H=" << a.height
              << " p=" << a.p << "  (* = chosen)\n";
    if (rows.empty()) std::cout << "   no valid tuple\n";
    else std::cout << table.str();
  }
  return 0;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string tree, out, split = "0.7,0.15,0.15";
  SyntheticRecipe recipe;
};

SplitFractions parse_split(const std::string& s) {
  SplitFractions f{};
  std::stringstream ss(s);
  std::string part;
  std::size_t k = 0;
  while (std::getline(ss, part, ',')) {
    if (k == 3) break;
    try {
      f[k++] = std::stod(part);
    } catch (const std::exception&) {
      throw UsageError("--split expects three comma-separated numbers, got '" + s + "'");
    }
  }
  if (k != 3 || ss.rdbuf()->in_avail() > 0) {
    throw UsageError("--split expects three comma-separated numbers, got '" + s + "'");
  }
  return f;
}

int run_gen(const GenArgs& a) {
  const ClassTree tree = ClassTree::load(a.tree);
  const auto sizes = generate_dataset(tree, a.recipe, parse_split(a.split), a.out);
  emit(stamped({{"out", a.out}, {"classes", tree.num_classes()}, {"leaves", tree.leaves().size()},
                {"train", sizes.train}, {"val", sizes.val}, {"test", sizes.test},
                {"image_size", a.recipe.image_size}, {"sigma", a.recipe.sigma},
                {"seed", a.recipe.seed}, {"multilabel", a.recipe.multilabel}}));
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  ConfigSource config;
  std::string data, out;
  std::uint64_t seed = 0;
  LoadOptions load;
};

int run_train(TrainArgs a) {
  const ModelConfig cfg = a.config.resolve();
  log_line("resolved config: " + config_to_json(cfg).dump());
  a.load.train = true;
  a.load.seed = a.seed;
  Dataset train = load_split(a.data, "train", a.load);
  LoadOptions eval_load = a.load;
  eval_load.train = false;
  eval_load.resize_min = eval_load.resize_max = a.load.resize_min;
  const Dataset val = load_split(a.data, "val", eval_load);
  if (train.samples.empty()) throw LoadError("dataset " + a.data + " has no training samples");
  if (cfg.training.max_train > 0 && train.samples.size() > cfg.training.max_train) {
    train.samples.resize(cfg.training.max_train);
  }
  log_line("train " + std::to_string(train.samples.size()) + " samples, val " +
           std::to_string(val.samples.size()));

  ModelBundle bundle = build_model(cfg, train.tree, a.seed);
  const auto t0 = std::chrono::steady_clock::now();
  const FitResult fr = fit(bundle, train.samples, val.samples, a.seed, [](const EpochLog& l) {
    Json j = {{"event", "epoch"}, {"epoch", l.epoch}, {"phase", l.phase}, {"loss", l.loss},
              {"seconds", l.seconds}};
    if (l.validation) j["validation"] = *l.validation;
    emit(stamped(j));
  });
  std::size_t steps = 0;
  const std::size_t batch = std::max<std::size_t>(1, cfg.training.batch_size);
  steps = fr.history.size() * ((train.samples.size() + batch - 1) / batch);
  save_checkpoint(bundle, a.out, steps);
  Json done = {{"event", "done"}, {"checkpoint", a.out}, {"epochs", fr.history.size()},
               {"best_epoch", fr.best_epoch},
               {"seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()},
               {"parameters", bundle.parameter_count()}};
  if (fr.best_validation) done["best_validation"] = *fr.best_validation;
  emit(stamped(done));
  return 0;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint, data, split = "test", val_split = "val", mode, predictions;
  std::vector<std::string> compare;  // LABEL=CHECKPOINT
  std::optional<std::size_t> beam_width, threads;
  std::size_t crop = 0;
};

EvalResult evaluate_checkpoint(ModelBundle& bundle, const EvalArgs& a, const Dataset& test,
                               const Dataset& val, EvalMode& mode) {
  if (a.beam_width) bundle.config.training.beam_width = *a.beam_width;
  if (a.threads) bundle.config.training.threads = *a.threads;
  mode = a.mode.empty() ? default_eval_mode(bundle) : eval_mode_from_string(a.mode);
  if (bundle.tree.serialize() != test.tree.serialize()) {
    throw LoadError("dataset " + a.data + " uses a different class tree than the checkpoint");
  }
  return evaluate(bundle, test.samples, mode, val.samples);
}

int run_eval(const EvalArgs& a) {
  LoadOptions load;
  load.crop = a.crop;
  const Dataset test = load_split(a.data, a.split, load);
  const Dataset val = load_split(a.data, a.val_split, load);
  if (test.samples.empty()) throw LoadError("split '" + a.split + "' of " + a.data + " is empty");

  if (!a.compare.empty()) {
    if (!a.checkpoint.empty()) throw UsageError("use either --checkpoint or --compare");
    std::vector<std::string> order;
    std::map<std::string, std::vector<std::pair<std::string, EvalResult>>> groups;
    std::string mode_name;
    for (const auto& spec : a.compare) {
      const auto eq = spec.find('=');
      if (eq == std::string::npos || eq == 0) {
        throw UsageError("--compare expects LABEL=CHECKPOINT, got '" + spec + "'");
      }
      const std::string label = spec.substr(0, eq), dir = spec.substr(eq + 1);
      ModelBundle bundle = load_checkpoint(dir);
      EvalMode mode;
      EvalResult r = evaluate_checkpoint(bundle, a, test, val, mode);
      if (!mode_name.empty() && mode_name != to_string(mode)) {
        throw UsageError("--compare checkpoints use different eval modes");
      }
      mode_name = to_string(mode);
      if (!groups.count(label)) order.push_back(label);
      log_line(label + " " + dir + ": path " + std::to_string(r.path.score));
      groups[label].emplace_back(dir, std::move(r));
    }
    Json jg = Json::array();
    std::vector<double> means;
    for (const auto& label : order) {
      Json runs = Json::array();
      double path = 0, node = 0;
      for (const auto& [dir, r] : groups[label]) {
        runs.push_back({{"checkpoint", dir}, {"path", r.path.score}, {"node", r.node.score}});
        path += r.path.score;
        node += r.node.score;
      }
      const double n = static_cast<double>(groups[label].size());
      means.push_back(path / n);
      jg.push_back({{"label", label}, {"runs", runs}, {"mean_path", path / n}, {"mean_node", node / n}});
    }
    Json diffs = Json::array();
    for (std::size_t i = 1; i < order.size(); ++i) {
      diffs.push_back({{"label", order[i]}, {"baseline", order[0]}, {"mean_path_difference", means[i] - means[0]}});
    }
    emit(stamped({{"command", "eval --compare"}, {"mode", mode_name}, {"split", a.split},
                  {"groups", jg}, {"differences", diffs}}));
    return 0;
  }

  if (a.checkpoint.empty()) throw UsageError("eval needs --checkpoint or --compare");
  ModelBundle bundle = load_checkpoint(a.checkpoint);
  EvalMode mode;
  const EvalResult r = evaluate_checkpoint(bundle, a, test, val, mode);
  if (!a.predictions.empty()) {
    std::ofstream out(a.predictions);
    if (!out) throw LoadError("cannot write predictions to " + a.predictions);
    write_predictions(out, r.ids, r.predictions, bundle.tree);
  }
  Json j = to_json(r);
  j["mode"] = to_string(mode);
  j["split"] = a.split;
  j["checkpoint"] = a.checkpoint;
  emit(stamped(j));
  return 0;
}

// ---------------------------------------------------------------------------

struct DecodeArgs {
  std::string checkpoint, mode;
  std::vector<std::string> images;
  std::optional<std::size_t> beam_width;
  double tau = 0.5;
  std::size_t crop = 0;
};

int run_decode(const DecodeArgs& a) {
  ModelBundle bundle = load_checkpoint(a.checkpoint);
  const EvalMode mode = a.mode.empty() ? default_eval_mode(bundle) : eval_mode_from_string(a.mode);
  if (mode != default_eval_mode(bundle)) {
    throw ConfigError("decode mode " + to_string(mode) + " does not match a " +
                      to_string(default_eval_mode(bundle)) + " model");
  }
  const std::size_t width = a.beam_width.value_or(std::max<std::size_t>(1, bundle.config.training.beam_width));
  LoadOptions load;
  load.crop = a.crop;
  Json preds = Json::array();
  for (const auto& file : a.images) {
    const Tensor image = preprocess(read_png(file), load, 0);
    const auto logits = infer_logits(bundle, image);
    Json paths = Json::array();
    Json rec = {{"image", file}};
    if (mode == EvalMode::multilabel) {
      for (const auto& p : select_paths_by_threshold(logits, bundle.tree, a.tau)) {
        paths.push_back(bundle.tree.path_string(p));
      }
      rec["tau"] = a.tau;
    } else if (mode == EvalMode::flat) {
      const auto z = logits.front().data();
      const auto best = static_cast<NodeId>(std::max_element(z.begin(), z.end()) - z.begin()) + 1;
      paths.push_back(bundle.tree.path_string(lift_to_path(best, bundle.tree)));
    } else {
      const auto h = beam_search(logits, bundle.tree, width,
                                 mode == EvalMode::fpl ? BeamMode::fixed : BeamMode::general);
      paths.push_back(bundle.tree.path_string(h.path));
      rec["score"] = h.score;
      rec["beam_width"] = width;
    }
    rec["paths"] = paths;
    preds.push_back(rec);
  }
  emit(stamped({{"mode", to_string(mode)}, {"predictions", preds}}));
  return 0;
}

// ---------------------------------------------------------------------------

struct GradArgs {
  ConfigSource config;
  std::string tree, format = "table";
  std::size_t samples = 2;
  std::uint64_t seed = 0;
  double step = 1e-5, tolerance = 1e-4;
};

int run_gradcheck(const GradArgs& a) {
  const ModelConfig cfg = a.config.resolve();
  log_line("resolved config: " + config_to_json(cfg).dump());
  const ClassTree tree = a.tree.empty() ? ClassTree::parse(kToyTree) : ClassTree::load(a.tree);
  ModelBundle bundle = build_model(cfg, tree, a.seed);
  std::mt19937_64 rng(a.seed);
  std::uniform_real_distribution<double> pixel(0.0, 1.0);
  const auto leaves = tree.leaves();
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < a.samples; ++i) {
    Sample s;
    s.id = "g" + std::to_string(i);
    s.image = Tensor(bundle.backbone.input_shape());
    for (auto& v : s.image.values()) v = pixel(rng);
    s.paths.push_back(tree.path_to(leaves[i % leaves.size()]));
    samples.push_back(std::move(s));
  }
  const auto groups = gradient_check(bundle, samples, a.step);
  bool all = true;
  Json jg = Json::array();
  std::ostringstream table;
  table << pad("group", 28) << pad("size", 8) << pad("max_rel_err", 14) << "result\n";
  for (const auto& g : groups) {
    const bool ok = g.max_relative_error < a.tolerance;
    all = all && ok;
    jg.push_back({{"name", g.name}, {"size", g.size}, {"max_relative_error", g.max_relative_error}, {"pass", ok}});
    std::ostringstream err;
    err << std::scientific << std::setprecision(3) << g.max_relative_error;
    table << pad(g.name, 28) << pad(std::to_string(g.size), 8) << pad(err.str(), 14) << (ok ? "PASS" : "FAIL") << "\n";
  }
  if (a.format == "json") {
    emit(stamped({{"head", to_string(cfg.head.kind)}, {"tolerance", a.tolerance}, {"groups", jg}, {"pass", all}}));
  } else {
    std::cout << table.str() << (all ? "all groups pass" : "some groups FAIL") << "\n";
  }
  return all ? 0 : 3;
}

template <typename F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const NumericError& e) {
    log_line(std::string("numeric error: ") + e.what());
    return 3;
  } catch (const LoadError& e) {
    log_line(std::string("data error: ") + e.what());
    return 2;
  } catch (const ParseError& e) {
    log_line(std::string("data error: ") + e.what());
    return 2;
  } catch (const Error& e) {
    log_line(std::string("usage error: ") + e.what());
    return 1;
  } catch (const std::exception& e) {
    log_line(std::string("error: ") + e.what());
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierpath: hierarchical path classification with CNN-RNN heads"};
  app.require_subcommand(1);
  std::function<int()> action;

  SolveArgs solve;
  auto* s = app.add_subcommand("solve-dims", "Enumerate conv or pool dimensions that produce p outputs");
  s->add_option("--depth", solve.depth, "Feature map depth D")->required();
  s->add_option("--width", solve.width, "Feature map width W")->required();
  s->add_option("--height", solve.height, "Feature map height H (must equal W)")->required();
  s->add_option("--target-p", solve.p, "Target output size p")->required();
  s->add_option("--kind", solve.kind, "conv or pool")->check(CLI::IsMember({"conv", "pool"}));
  s->add_option("--format", solve.format, "table or json")->check(CLI::IsMember({"table", "json"}));
  s->callback([&] { action = [&] { return run_solve(solve); }; });

  GenArgs gen;
  auto* g = app.add_subcommand("gen-data", "Render a synthetic hierarchical image dataset");
  g->add_option("--tree", gen.tree, "Class tree file")->required()->check(CLI::ExistingFile);
  g->add_option("--out", gen.out, "Output directory")->required();
  g->add_option("--per-leaf", gen.recipe.per_leaf, "Images per leaf class");
  g->add_option("--size", gen.recipe.image_size, "Image side in pixels");
  g->add_option("--sigma", gen.recipe.sigma, "Pixel noise standard deviation");
  g->add_option("--seed", gen.recipe.seed, "Generation seed");
  g->add_option("--jitter", gen.recipe.jitter, "Position jitter in pixels at 32x32");
  g->add_flag("--multilabel", gen.recipe.multilabel, "Draw 1-3 paths per image");
  g->add_option("--split", gen.split, "train,val,test fractions");
  g->callback([&] { action = [&] { return run_gen(gen); }; });

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train a model and write a checkpoint");
  train.config.bind(t, true);
  t->add_option("--data", train.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  t->add_option("--out", train.out, "Checkpoint directory")->required();
  t->add_option("--seed", train.seed, "Initialization and shuffling seed");
  t->add_option("--resize-min", train.load.resize_min, "Shorter-side resize lower bound (0 skips)");
  t->add_option("--resize-max", train.load.resize_max, "Shorter-side resize upper bound");
  t->add_option("--crop", train.load.crop, "Random crop size (0 skips)");
  t->add_flag("--flip", train.load.flip, "Random horizontal flips");
  t->callback([&] { action = [&] { return run_train(train); }; });

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Score a checkpoint, or compare groups of checkpoints");
  e->add_option("--checkpoint", ev.checkpoint, "Checkpoint directory");
  e->add_option("--data", ev.data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  e->add_option("--split", ev.split, "Split to score");
  e->add_option("--val-split", ev.val_split, "Split used to tune the multi-label threshold");
  e->add_option("--mode", ev.mode, "fpl, general, multilabel or flat (default: from the model)");
  e->add_option("--predictions", ev.predictions, "Write predictions to this file");
  e->add_option("--compare", ev.compare, "LABEL=CHECKPOINT, repeatable; reports group means");
  e->add_option("--beam-width", ev.beam_width, "Beam width override");
  e->add_option("--threads", ev.threads, "Worker threads (capped by HIERPATH_THREADS)");
  e->add_option("--crop", ev.crop, "Centre crop size (0 skips)");
  e->callback([&] { action = [&] { return run_eval(ev); }; });

  DecodeArgs dec;
  auto* d = app.add_subcommand("decode", "Predict label paths for PNG images");
  d->add_option("--checkpoint", dec.checkpoint, "Checkpoint directory")->required();
  d->add_option("--image", dec.images, "PNG file, repeatable")->required();
  d->add_option("--mode", dec.mode, "fpl, general, multilabel or flat (default: from the model)");
  d->add_option("--beam-width", dec.beam_width, "Beam width override");
  d->add_option("--tau", dec.tau, "Multi-label threshold");
  d->add_option("--crop", dec.crop, "Centre crop size (0 skips)");
  d->callback([&] { action = [&] { return run_decode(dec); }; });

  GradArgs grad;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  grad.config.bind(gc, false);
  gc->add_option("--tree", grad.tree, "Class tree file (default: a two-level toy tree)");
  gc->add_option("--samples", grad.samples, "Random samples in the loss");
  gc->add_option("--seed", grad.seed, "Initialization and sample seed");
  gc->add_option("--step", grad.step, "Central difference step");
  gc->add_option("--tolerance", grad.tolerance, "Pass threshold on relative error");
  gc->add_option("--format", grad.format, "table or json")->check(CLI::IsMember({"table", "json"}));
  gc->callback([&] { action = [&] { return run_gradcheck(grad); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? 0 : 1;
  }
  return guarded(action);
}
