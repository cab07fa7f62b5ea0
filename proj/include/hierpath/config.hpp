#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "hierpath/autodiff.hpp"
#include "hierpath/conversion.hpp"

namespace hierpath {

using Json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;

enum class HeadKind { fpl, general, flat };

std::string to_string(HeadKind kind);
HeadKind head_kind_from_string(const std::string& s);

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t image_size = 32;
  std::vector<std::size_t> channels{8, 16, 32, 64};
  std::size_t kernel = 3;
  std::size_t padding = 1;
  std::size_t pool = 2;  // disjoint max-pool window after each block; 0 disables
};

struct ScheduleConfig {
  bool reverse = false;
  std::vector<std::vector<std::size_t>> steps;  // empty: default_schedule
};

struct ConversionConfig {
  ConversionKind kind = ConversionKind::linear;
  std::size_t p = 64;
  PoolKind pool_kind = PoolKind::avg;
};

struct HeadConfig {
  HeadKind kind = HeadKind::fpl;
  std::size_t hidden = 32;
  std::size_t layers = 0;  // 0: 3 for fpl, 1 for general
  bool residual = true;
  std::size_t decoder_hidden = 32;
  std::size_t embedding = 16;
  bool teacher_forcing = true;
  bool multilabel = false;

  std::size_t resolved_layers() const { return layers != 0 ? layers : (kind == HeadKind::fpl ? 3 : 1); }
};

struct LossConfig {
  std::vector<double> weights;  // empty: w_t = 1
};

enum class OptimizerKind { sgd, adam };

struct Phase {
  std::size_t epochs = 1;
  bool freeze_cnn = false;
  bool freeze_head = false;
};

struct TrainingConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double clip_norm = 5.0;
  bool alternating = true;
  std::vector<Phase> phases;  // empty: derived from epochs
  std::size_t beam_width = 5;
  double threshold_step = 0.01;
  std::size_t max_train = 0;  // 0: use every record
  std::size_t threads = 1;
};

struct ModelConfig {
  BackboneConfig backbone;
  ScheduleConfig schedule;
  ConversionConfig conversion;
  HeadConfig head;
  LossConfig loss;
  TrainingConfig training;
};

/// Missing keys keep their defaults; unknown keys are rejected.
ModelConfig config_from_json(const Json& j);
Json config_to_json(const ModelConfig& config);
ModelConfig load_config(const std::string& path);

}  // namespace hierpath
