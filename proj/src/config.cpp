#include "hierpath/config.hpp"

#include <fstream>
#include <set>

#include "hierpath/error.hpp"

namespace hierpath {

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::fpl: return "fpl";
    case HeadKind::general: return "general";
    case HeadKind::flat: return "flat";
  }
  return "?";
}

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "fpl") return HeadKind::fpl;
  if (s == "general") return HeadKind::general;
  if (s == "flat") return HeadKind::flat;
  throw ConfigError("unknown head kind '" + s + "' (fpl, general, flat)");
}

namespace {

void check_keys(const Json& j, const std::string& section, std::set<std::string> allowed) {
  if (!j.is_object()) throw ConfigError("config section '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!allowed.contains(key)) {
      throw ConfigError("unknown key '" + key + "' in config section '" + section + "'");
    }
  }
}

template <typename T>
void read(const Json& j, const char* key, T& field, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    field = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + section + "." + key + ": " + e.what());
  }
}

PoolKind pool_kind_from_string(const std::string& s) {
  if (s == "avg") return PoolKind::avg;
  if (s == "max") return PoolKind::max;
  throw ConfigError("unknown pool kind '" + s + "' (avg, max)");
}

}  // namespace

ModelConfig config_from_json(const Json& j) {
  ModelConfig c;
  check_keys(j, "<root>", {"backbone", "schedule", "conversion", "head", "loss", "training",
                           "schema_version"});
  if (j.contains("backbone")) {
    const auto& b = j["backbone"];
    check_keys(b, "backbone", {"in_channels", "image_size", "channels", "kernel", "padding", "pool"});
    read(b, "in_channels", c.backbone.in_channels, "backbone");
    read(b, "image_size", c.backbone.image_size, "backbone");
    read(b, "channels", c.backbone.channels, "backbone");
    read(b, "kernel", c.backbone.kernel, "backbone");
    read(b, "padding", c.backbone.padding, "backbone");
    read(b, "pool", c.backbone.pool, "backbone");
  }
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    check_keys(s, "schedule", {"reverse", "steps"});
    read(s, "reverse", c.schedule.reverse, "schedule");
    read(s, "steps", c.schedule.steps, "schedule");
  }
  if (j.contains("conversion")) {
    const auto& s = j["conversion"];
    check_keys(s, "conversion", {"kind", "p", "pool_kind"});
    std::string kind = to_string(c.conversion.kind);
    read(s, "kind", kind, "conversion");
    try {
      c.conversion.kind = conversion_kind_from_string(kind);
    } catch (const Error& e) {
      throw ConfigError(e.what());
    }
    read(s, "p", c.conversion.p, "conversion");
    std::string pool = c.conversion.pool_kind == PoolKind::avg ? "avg" : "max";
    read(s, "pool_kind", pool, "conversion");
    c.conversion.pool_kind = pool_kind_from_string(pool);
  }
  if (j.contains("head")) {
    const auto& h = j["head"];
    check_keys(h, "head", {"kind", "hidden", "layers", "residual", "decoder_hidden", "embedding",
                           "teacher_forcing", "multilabel"});
    std::string kind = to_string(c.head.kind);
    read(h, "kind", kind, "head");
    c.head.kind = head_kind_from_string(kind);
    read(h, "hidden", c.head.hidden, "head");
    read(h, "layers", c.head.layers, "head");
    read(h, "residual", c.head.residual, "head");
    read(h, "decoder_hidden", c.head.decoder_hidden, "head");
    read(h, "embedding", c.head.embedding, "head");
    read(h, "teacher_forcing", c.head.teacher_forcing, "head");
    read(h, "multilabel", c.head.multilabel, "head");
  }
  if (j.contains("loss")) {
    check_keys(j["loss"], "loss", {"weights"});
    read(j["loss"], "weights", c.loss.weights, "loss");
  }
  if (j.contains("training")) {
    const auto& t = j["training"];
    check_keys(t, "training", {"epochs", "batch_size", "optimizer", "lr", "momentum", "beta1",
                               "beta2", "clip_norm", "alternating", "phases", "beam_width",
                               "threshold_step", "max_train", "threads"});
    auto& tc = c.training;
    read(t, "epochs", tc.epochs, "training");
    read(t, "batch_size", tc.batch_size, "training");
    std::string opt = tc.optimizer == OptimizerKind::sgd ? "sgd" : "adam";
    read(t, "optimizer", opt, "training");
    if (opt == "sgd") tc.optimizer = OptimizerKind::sgd;
    else if (opt == "adam") tc.optimizer = OptimizerKind::adam;
    else throw ConfigError("unknown optimizer '" + opt + "' (sgd, adam)");
    read(t, "lr", tc.lr, "training");
    read(t, "momentum", tc.momentum, "training");
    read(t, "beta1", tc.beta1, "training");
    read(t, "beta2", tc.beta2, "training");
    read(t, "clip_norm", tc.clip_norm, "training");
    read(t, "alternating", tc.alternating, "training");
    read(t, "beam_width", tc.beam_width, "training");
    read(t, "threshold_step", tc.threshold_step, "training");
    read(t, "max_train", tc.max_train, "training");
    read(t, "threads", tc.threads, "training");
    if (t.contains("phases")) {
      for (const auto& p : t["phases"]) {
        check_keys(p, "training.phases[]", {"epochs", "frozen"});
        Phase phase;
        read(p, "epochs", phase.epochs, "training.phases[]");
        std::vector<std::string> frozen;
        read(p, "frozen", frozen, "training.phases[]");
        for (const auto& f : frozen) {
          if (f == "cnn") phase.freeze_cnn = true;
          else if (f == "head") phase.freeze_head = true;
          else throw ConfigError("unknown component '" + f + "' in phase (cnn, head)");
        }
        tc.phases.push_back(phase);
      }
    }
  }
  return c;
}

Json config_to_json(const ModelConfig& c) {
  Json phases = Json::array();
  for (const auto& p : c.training.phases) {
    Json frozen = Json::array();
    if (p.freeze_cnn) frozen.push_back("cnn");
    if (p.freeze_head) frozen.push_back("head");
    phases.push_back({{"epochs", p.epochs}, {"frozen", frozen}});
  }
  return {
      {"schema_version", kSchemaVersion},
      {"backbone",
       {{"in_channels", c.backbone.in_channels},
        {"image_size", c.backbone.image_size},
        {"channels", c.backbone.channels},
        {"kernel", c.backbone.kernel},
        {"padding", c.backbone.padding},
        {"pool", c.backbone.pool}}},
      {"schedule", {{"reverse", c.schedule.reverse}, {"steps", c.schedule.steps}}},
      {"conversion",
       {{"kind", to_string(c.conversion.kind)},
        {"p", c.conversion.p},
        {"pool_kind", c.conversion.pool_kind == PoolKind::avg ? "avg" : "max"}}},
      {"head",
       {{"kind", to_string(c.head.kind)},
        {"hidden", c.head.hidden},
        {"layers", c.head.layers},
        {"residual", c.head.residual},
        {"decoder_hidden", c.head.decoder_hidden},
        {"embedding", c.head.embedding},
        {"teacher_forcing", c.head.teacher_forcing},
        {"multilabel", c.head.multilabel}}},
      {"loss", {{"weights", c.loss.weights}}},
      {"training",
       {{"epochs", c.training.epochs},
        {"batch_size", c.training.batch_size},
        {"optimizer", c.training.optimizer == OptimizerKind::sgd ? "sgd" : "adam"},
        {"lr", c.training.lr},
        {"momentum", c.training.momentum},
        {"beta1", c.training.beta1},
        {"beta2", c.training.beta2},
        {"clip_norm", c.training.clip_norm},
        {"alternating", c.training.alternating},
        {"phases", phases},
        {"beam_width", c.training.beam_width},
        {"threshold_step", c.training.threshold_step},
        {"max_train", c.training.max_train},
        {"threads", c.training.threads}}},
  };
}

ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read config file " + path);
  Json j;
  try {
    j = Json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

}  // namespace hierpath
