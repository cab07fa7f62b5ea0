#pragma once

// Composite models: CNN backbone, FPL head (CNN → conversion → RNN), general
// tree head (CNN → conversion → encoder/decoder) and the flat baseline.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hierpath/autodiff.hpp"
#include "hierpath/class_tree.hpp"
#include "hierpath/config.hpp"
#include "hierpath/conversion.hpp"
#include "hierpath/recurrent.hpp"

namespace hierpath {

enum class Component { cnn, head };

struct ParamRef {
  std::string name;
  Tensor* tensor = nullptr;
  Component component = Component::head;
  bool trainable = true;
};

struct CnnBackbone {
  BackboneConfig config;
  std::vector<Tensor> weights;  // K×D×F×F per block
  std::vector<Tensor> biases;
  std::vector<Shape> shapes;    // a_1..a_L

  static CnnBackbone create(const BackboneConfig& config, std::uint64_t seed);
  std::size_t num_layers() const { return weights.size(); }
  Shape input_shape() const {
    return {config.in_channels, config.image_size, config.image_size};
  }
};

/// a_1..a_L; block l is conv → bias → ReLU → optional disjoint max pool.
std::vector<Var> cnn_forward(Tape& tape, const CnnBackbone& backbone, Var x);

struct ModelBundle {
  explicit ModelBundle(ClassTree t) : tree(std::move(t)) {}

  ModelConfig config;
  ClassTree tree;
  std::uint64_t seed = 0;
  CnnBackbone backbone;
  LayerSchedule schedule;
  std::size_t steps = 0;  // T: recurrent input steps
  std::vector<std::optional<Converter>> converters;  // indexed by layer − 1
  RnnStack rnn;
  Seq2SeqParams s2s;
  Tensor flat_w, flat_b;

  HeadKind head() const { return config.head.kind; }
  bool multilabel() const { return config.head.kind == HeadKind::general && config.head.multilabel; }
  std::vector<ParamRef> parameters();
  std::size_t parameter_count();
};

ModelBundle build_model(const ModelConfig& config, const ClassTree& tree, std::uint64_t seed);

/// u_1..u_T from the backbone's feature maps.
std::vector<Var> step_inputs(Tape& tape, const ModelBundle& bundle, std::span<const Var> maps);

std::vector<Var> fpl_forward(Tape& tape, const ModelBundle& bundle, Var x);

/// Decoder outputs for `steps` steps. `feedback` supplies the teacher-forced
/// previous-output vectors for steps 2..steps; when empty the model's own
/// softmax (sigmoid for multi-label) output is fed back.
std::vector<Var> general_forward(Tape& tape, const ModelBundle& bundle, Var x, std::size_t steps,
                                 std::span<const Tensor> feedback = {});

Var flat_baseline_forward(Tape& tape, const ModelBundle& bundle, Var x);

/// Σ_t w_t · CE(one_hot(y_t), softmax(o_t)); empty weights mean w_t = 1.
Var path_loss(std::span<const Var> outputs, const LabelPath& path,
              std::span<const double> weights = {});

/// Σ_t BCE(sigmoid(o_t), target_t). With masks, level t only scores the entries
/// where level_masks[t] is 1 (the nodes at depth t); without, all N entries count.
Var multilabel_loss(std::span<const Var> outputs, std::span<const Tensor> level_targets,
                    std::span<const Tensor> level_masks = {});

/// Indicator of the nodes at depth t, for t = 1..levels.
std::vector<Tensor> level_masks(const ClassTree& tree, std::size_t levels);

/// Multi-hot of the nodes at depth t across `paths`, for t = 1..levels.
std::vector<Tensor> level_targets(std::span<const LabelPath> paths, const ClassTree& tree,
                                  std::size_t levels);

/// Training loss of one sample for the bundle's head.
Var sample_loss(Tape& tape, const ModelBundle& bundle, const Tensor& image,
                std::span<const LabelPath> paths);

/// Inference logits: T vectors (fpl), max-depth vectors (general), or one
/// vector (flat).
std::vector<Tensor> infer_logits(const ModelBundle& bundle, const Tensor& image);

void save_checkpoint(ModelBundle& bundle, const std::string& dir, std::size_t step);
ModelBundle load_checkpoint(const std::string& dir);

}  // namespace hierpath
