#include "hierpath/model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "hierpath/error.hpp"
#include "hierpath/random.hpp"

namespace hierpath {

namespace fs = std::filesystem;

CnnBackbone CnnBackbone::create(const BackboneConfig& config, std::uint64_t seed) {
  if (config.channels.empty()) throw ConfigError("backbone needs at least one block");
  CnnBackbone b;
  b.config = config;
  std::size_t depth = config.in_channels;
  std::size_t extent = config.image_size;
  for (std::size_t l = 0; l < config.channels.size(); ++l) {
    const std::size_t k = config.channels[l];
    try {
      extent = conv_output_extent(extent, config.kernel, 1, config.padding);
      if (config.pool > 0) extent = pool_output_extent(extent, config.pool, config.pool);
    } catch (const DimensionError& e) {
      throw ConfigError("backbone block " + std::to_string(l + 1) + ": " + e.what());
    }
    const double fan_in = static_cast<double>(depth * config.kernel * config.kernel);
    Tensor w = gaussian_tensor(Shape{k, depth, config.kernel, config.kernel},
                               std::sqrt(2.0 / fan_in), mix_seed(seed, l));
    Tensor bias(Shape{k});
    w.set_requires_grad(true);
    bias.set_requires_grad(true);
    b.weights.push_back(std::move(w));
    b.biases.push_back(std::move(bias));
    b.shapes.push_back({k, extent, extent});
    depth = k;
  }
  return b;
}

std::vector<Var> cnn_forward(Tape& tape, const CnnBackbone& backbone, Var x) {
  if (x.shape() != backbone.input_shape()) {
    throw DimensionError("image " + shape_string(x.shape()) + ", backbone expects " +
                         shape_string(backbone.input_shape()));
  }
  std::vector<Var> maps;
  Var a = x;
  for (std::size_t l = 0; l < backbone.num_layers(); ++l) {
    a = conv2d(a, tape.parameter(backbone.weights[l]), 1, backbone.config.padding);
    a = relu(add_channel_bias(a, tape.parameter(backbone.biases[l])));
    if (backbone.config.pool > 0) {
      a = pool2d(a, backbone.config.pool, backbone.config.pool, PoolKind::max);
    }
    maps.push_back(a);
  }
  return maps;
}

ModelBundle build_model(const ModelConfig& config, const ClassTree& tree, std::uint64_t seed) {
  ModelBundle m(tree);
  m.config = config;
  m.seed = seed;
  m.backbone = CnnBackbone::create(config.backbone, mix_seed(seed, 1));
  const std::size_t L = m.backbone.num_layers();
  const std::size_t N = tree.num_classes();
  const auto& head = config.head;

  if (head.kind == HeadKind::flat) {
    const std::size_t D = m.backbone.shapes.back()[0];
    m.flat_w = gaussian_tensor(Shape{N, D}, 1.0 / std::sqrt(static_cast<double>(D)),
                               mix_seed(seed, 2));
    m.flat_b = Tensor(Shape{N});
    m.flat_w.set_requires_grad(true);
    m.flat_b.set_requires_grad(true);
    return m;
  }

  if (head.kind == HeadKind::fpl) {
    try {
      m.steps = validate_fixed_depth(tree);
    } catch (const FixedDepthError& e) {
      throw ConfigError(std::string("fpl head needs a fixed-depth tree: ") + e.what());
    }
  } else {
    m.steps = std::min(L, tree.max_depth());
  }
  if (!config.schedule.steps.empty()) {
    m.schedule.steps = config.schedule.steps;
    if (m.schedule.steps.size() != m.steps && head.kind == HeadKind::fpl) {
      throw ConfigError("schedule has " + std::to_string(m.schedule.steps.size()) +
                        " steps but the tree has T = " + std::to_string(m.steps));
    }
    m.steps = m.schedule.steps.size();
  } else {
    if (m.steps > L) {
      throw ConfigError("tree needs T = " + std::to_string(m.steps) + " steps but the backbone has " +
                        std::to_string(L) + " layers");
    }
    m.schedule = default_schedule(L, m.steps, config.schedule.reverse);
  }
  try {
    validate_schedule(m.schedule, L, m.steps,
                      config.schedule.reverse ? ScheduleOrder::decreasing : ScheduleOrder::increasing);
  } catch (const ScheduleError& e) {
    throw ConfigError(std::string("schedule: ") + e.what());
  }

  const std::size_t p = config.conversion.p;
  m.converters.resize(L);
  for (const auto& step : m.schedule.steps) {
    for (std::size_t layer : step) {
      if (m.converters[layer - 1]) continue;
      const auto spec = make_conversion_spec(config.conversion.kind, m.backbone.shapes[layer - 1],
                                             p, config.conversion.pool_kind);
      m.converters[layer - 1] = Converter::create(spec, mix_seed(seed, 100 + layer));
    }
  }
  if (head.kind == HeadKind::fpl) {
    m.rnn = RnnStack::create(p, head.hidden, head.resolved_layers(), N, head.residual,
                             mix_seed(seed, 3));
  } else {
    m.s2s = Seq2SeqParams::create(p, head.hidden, head.resolved_layers(), head.decoder_hidden,
                                  head.embedding, N, mix_seed(seed, 4));
  }
  return m;
}

std::vector<ParamRef> ModelBundle::parameters() {
  std::vector<ParamRef> out;
  for (std::size_t l = 0; l < backbone.num_layers(); ++l) {
    out.push_back({"cnn.block" + std::to_string(l + 1) + ".w", &backbone.weights[l], Component::cnn});
    out.push_back({"cnn.block" + std::to_string(l + 1) + ".b", &backbone.biases[l], Component::cnn});
  }
  if (head() == HeadKind::flat) {
    out.push_back({"flat.w", &flat_w, Component::head});
    out.push_back({"flat.b", &flat_b, Component::head});
    return out;
  }
  for (std::size_t l = 0; l < converters.size(); ++l) {
    if (!converters[l]) continue;
    for (auto& [name, t] : converters[l]->parameters()) {
      out.push_back({"convert.layer" + std::to_string(l + 1) + "." + name, t, Component::head});
    }
  }
  NamedParams named;
  if (head() == HeadKind::fpl) rnn.append_parameters("rnn", named);
  else s2s.append_parameters("s2s", named);
  for (auto& [name, t] : named) {
    out.push_back({name, t, Component::head, name != "rnn.align"});
  }
  return out;
}

std::size_t ModelBundle::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : parameters()) {
    if (p.trainable) n += p.tensor->size();
  }
  return n;
}

std::vector<Var> step_inputs(Tape& tape, const ModelBundle& bundle, std::span<const Var> maps) {
  std::vector<Var> cache(maps.size(), Var{});
  std::vector<bool> done(maps.size(), false);
  std::vector<Var> inputs;
  for (const auto& step : bundle.schedule.steps) {
    std::vector<Var> parts;
    for (std::size_t layer : step) {
      if (!done[layer - 1]) {
        cache[layer - 1] = bundle.converters[layer - 1]->forward(tape, maps[layer - 1]);
        done[layer - 1] = true;
      }
      parts.push_back(cache[layer - 1]);
    }
    inputs.push_back(aggregate_step(parts));
  }
  return inputs;
}

std::vector<Var> fpl_forward(Tape& tape, const ModelBundle& bundle, Var x) {
  if (bundle.head() != HeadKind::fpl) throw ConfigError("fpl_forward on a " + to_string(bundle.head()) + " model");
  const auto maps = cnn_forward(tape, bundle.backbone, x);
  const auto inputs = step_inputs(tape, bundle, maps);
  return rnn_forward(tape, bundle.rnn, inputs).outputs;
}

std::vector<Var> general_forward(Tape& tape, const ModelBundle& bundle, Var x, std::size_t steps,
                                 std::span<const Tensor> feedback) {
  if (bundle.head() != HeadKind::general) {
    throw ConfigError("general_forward on a " + to_string(bundle.head()) + " model");
  }
  if (steps == 0 || steps > bundle.tree.max_depth()) {
    throw UsageError("decoder steps " + std::to_string(steps) + " outside 1.." +
                     std::to_string(bundle.tree.max_depth()));
  }
  if (!feedback.empty() && feedback.size() + 1 < steps) {
    throw UsageError("teacher forcing needs " + std::to_string(steps - 1) + " feedback vectors");
  }
  const auto maps = cnn_forward(tape, bundle.backbone, x);
  const auto inputs = step_inputs(tape, bundle, maps);
  LstmState state = s2s_encode(tape, bundle.s2s, inputs);
  const std::size_t N = bundle.tree.num_classes();
  Var prev = tape.constant(Tensor(Shape{N}));
  std::vector<Var> outputs;
  for (std::size_t t = 0; t < steps; ++t) {
    if (t > 0) {
      if (!feedback.empty()) prev = tape.constant(feedback[t - 1]);
      else prev = bundle.multilabel() ? sigmoid(outputs.back()) : softmax(outputs.back());
    }
    auto step = s2s_decode_step(tape, bundle.s2s, prev, state);
    outputs.push_back(step.output);
    state = step.state;
  }
  return outputs;
}

Var flat_baseline_forward(Tape& tape, const ModelBundle& bundle, Var x) {
  if (bundle.head() != HeadKind::flat) {
    throw ConfigError("flat_baseline_forward on a " + to_string(bundle.head()) + " model");
  }
  const auto maps = cnn_forward(tape, bundle.backbone, x);
  Var b = tape.parameter(bundle.flat_b);
  return linear(tape.parameter(bundle.flat_w), global_avg_pool(maps.back()), &b);
}

Var path_loss(std::span<const Var> outputs, const LabelPath& path, std::span<const double> weights) {
  if (outputs.size() != path.size()) {
    throw UsageError("path_loss: " + std::to_string(outputs.size()) + " outputs for a path of length " +
                     std::to_string(path.size()));
  }
  if (!weights.empty() && weights.size() < path.size()) {
    throw UsageError("path_loss: " + std::to_string(weights.size()) + " level weights for " +
                     std::to_string(path.size()) + " levels");
  }
  std::vector<Var> terms;
  std::vector<double> w;
  for (std::size_t t = 0; t < outputs.size(); ++t) {
    if (path[t] == 0 || path[t] > outputs[t].size()) {
      throw UsageError("path node " + std::to_string(path[t]) + " outside 1.." +
                       std::to_string(outputs[t].size()));
    }
    terms.push_back(cross_entropy(outputs[t], path[t] - 1));
    w.push_back(weights.empty() ? 1.0 : weights[t]);
  }
  return weighted_sum(terms, w);
}

Var multilabel_loss(std::span<const Var> outputs, std::span<const Tensor> level_targets,
                    std::span<const Tensor> level_masks) {
  if (outputs.size() != level_targets.size()) {
    throw UsageError("multilabel_loss: " + std::to_string(outputs.size()) + " outputs, " +
                     std::to_string(level_targets.size()) + " level targets");
  }
  if (!level_masks.empty() && level_masks.size() != outputs.size()) {
    throw UsageError("multilabel_loss: " + std::to_string(outputs.size()) + " outputs, " +
                     std::to_string(level_masks.size()) + " level masks");
  }
  std::vector<Var> terms;
  for (std::size_t t = 0; t < outputs.size(); ++t) {
    std::span<const double> mask;
    if (!level_masks.empty()) mask = level_masks[t].data();
    terms.push_back(binary_cross_entropy(outputs[t], level_targets[t].data(), mask));
  }
  const std::vector<double> ones(terms.size(), 1.0);
  return weighted_sum(terms, ones);
}

std::vector<Tensor> level_targets(std::span<const LabelPath> paths, const ClassTree& tree,
                                  std::size_t levels) {
  std::vector<Tensor> out(levels, Tensor(Shape{tree.num_classes()}));
  for (const auto& path : paths) {
    if (!tree.is_valid_path(path)) throw UsageError("invalid path '" + tree.path_string(path) + "'");
    for (std::size_t t = 0; t < path.size() && t < levels; ++t) out[t][path[t] - 1] = 1.0;
  }
  return out;
}

std::vector<Tensor> level_masks(const ClassTree& tree, std::size_t levels) {
  std::vector<Tensor> out(levels, Tensor(Shape{tree.num_classes()}));
  for (NodeId v = 1; v < tree.node_count(); ++v) {
    const std::size_t d = tree.depth(v);
    if (d >= 1 && d <= levels) out[d - 1][v - 1] = 1.0;
  }
  return out;
}

Var sample_loss(Tape& tape, const ModelBundle& bundle, const Tensor& image,
                std::span<const LabelPath> paths) {
  if (paths.empty()) throw UsageError("sample has no label path");
  Var x = tape.constant(image);
  const auto& weights = bundle.config.loss.weights;
  switch (bundle.head()) {
    case HeadKind::fpl: {
      const auto outputs = fpl_forward(tape, bundle, x);
      return path_loss(outputs, paths.front(), weights);
    }
    case HeadKind::flat: {
      Var logits = flat_baseline_forward(tape, bundle, x);
      return cross_entropy(logits, paths.front().back() - 1);
    }
    case HeadKind::general: {
      const bool tf = bundle.config.head.teacher_forcing;
      if (bundle.multilabel()) {
        const std::size_t steps = bundle.tree.max_depth();
        const auto targets = level_targets(paths, bundle.tree, steps);
        std::span<const Tensor> feedback;
        if (tf) feedback = std::span<const Tensor>(targets).first(steps - 1);
        return multilabel_loss(general_forward(tape, bundle, x, steps, feedback), targets,
                               level_masks(bundle.tree, steps));
      }
      const auto& y = paths.front();
      std::vector<Tensor> feedback;
      if (tf) {
        for (std::size_t t = 1; t < y.size(); ++t) {
          feedback.push_back(one_hot(y, t, bundle.tree.num_classes()));
        }
      }
      const auto outputs = general_forward(tape, bundle, x, y.size(), feedback);
      return path_loss(outputs, y, weights);
    }
  }
  throw UsageError("unknown head");
}

std::vector<Tensor> infer_logits(const ModelBundle& bundle, const Tensor& image) {
  Tape tape;
  Var x = tape.constant(image);
  std::vector<Var> outputs;
  switch (bundle.head()) {
    case HeadKind::fpl: outputs = fpl_forward(tape, bundle, x); break;
    case HeadKind::general:
      outputs = general_forward(tape, bundle, x, bundle.tree.max_depth());
      break;
    case HeadKind::flat: outputs.push_back(flat_baseline_forward(tape, bundle, x)); break;
  }
  std::vector<Tensor> out;
  for (const Var& o : outputs) out.push_back(o.value());
  return out;
}

void save_checkpoint(ModelBundle& bundle, const std::string& dir, std::size_t step) {
  std::error_code ec;
  fs::create_directories(fs::path(dir) / "params", ec);
  if (ec) throw LoadError("cannot create checkpoint directory " + dir + ": " + ec.message());
  const std::string tree_text = bundle.tree.serialize();
  Json names = Json::array();
  for (const auto& p : bundle.parameters()) {
    save_tensor((fs::path(dir) / "params" / (p.name + ".hpt")).string(), *p.tensor);
    names.push_back(p.name);
  }
  {
    std::ofstream out(fs::path(dir) / "tree.txt");
    out << tree_text;
    if (!out) throw LoadError("cannot write " + (fs::path(dir) / "tree.txt").string());
  }
  Json manifest = {{"schema_version", kSchemaVersion},
                   {"config", config_to_json(bundle.config)},
                   {"tree_hash", fnv1a(tree_text)},
                   {"seed", bundle.seed},
                   {"step", step},
                   {"parameters", names}};
  std::ofstream out(fs::path(dir) / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw LoadError("cannot write manifest in " + dir);
}

ModelBundle load_checkpoint(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "manifest.json");
  if (!in) throw LoadError("no manifest.json in checkpoint " + dir);
  Json manifest;
  try {
    manifest = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("checkpoint manifest in " + dir + " is not valid JSON: " + e.what());
  }
  const ClassTree tree = ClassTree::load((fs::path(dir) / "tree.txt").string());
  if (fnv1a(tree.serialize()) != manifest.at("tree_hash").get<std::uint64_t>()) {
    throw LoadError("checkpoint " + dir + ": tree.txt does not match the manifest hash");
  }
  Json config = manifest.at("config");
  config.erase("schema_version");
  ModelBundle bundle =
      build_model(config_from_json(config), tree, manifest.at("seed").get<std::uint64_t>());
  for (auto& p : bundle.parameters()) {
    const auto path = fs::path(dir) / "params" / (p.name + ".hpt");
    Tensor t = load_tensor(path.string());
    if (t.shape() != p.tensor->shape()) {
      throw LoadError("parameter " + p.name + " has shape " + shape_string(t.shape()) +
                      ", model expects " + shape_string(p.tensor->shape()));
    }
    p.tensor->values() = t.values();
  }
  return bundle;
}

}  // namespace hierpath
