#include "config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mmcl/errors.hpp"
#include "mmcl/stream.hpp"

namespace mmcl::cli {

namespace {

using json = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError("config: " + path + ": " + what);
}

/// Wraps one JSON object; every accessor marks its key as consumed and
/// finish() rejects whatever was never asked for. That turns typos into
/// hard errors instead of silently-ignored settings.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(path_, "expected an object");
  }

  const std::string& path() const { return path_; }

  const json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void get(const char* key, bool& out) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(path_ + "." + key, "expected a boolean");
      out = v->get<bool>();
    }
  }
  void get(const char* key, int& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(path_ + "." + key, "expected an integer");
      out = v->get<int>();
    }
  }
  void get(const char* key, std::uint64_t& out) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<long long>() < 0))
        fail(path_ + "." + key, "expected a non-negative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void get(const char* key, float& out) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(path_ + "." + key, "expected a number");
      out = v->get<float>();
    }
  }
  void get(const char* key, std::string& out) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(path_ + "." + key, "expected a string");
      out = v->get<std::string>();
    }
  }

  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) fail(path_ + "." + it.key(), "unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void parse_world(Section& s, WorldConfig& w) {
  s.get("seed", w.seed);
  s.get("d_model", w.d_model);
  if (const json* v = s.find("modalities")) {
    if (!v->is_array()) fail(s.path() + ".modalities", "expected an array");
    w.modalities.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      Section m((*v)[i], s.path() + ".modalities[" + std::to_string(i) + "]");
      ModalityGeometry g;
      m.get("name", g.name);
      m.get("slices", g.slices);
      m.get("tokens", g.tokens);
      m.finish();
      if (g.name.empty()) fail(m.path(), "modality name must not be empty");
      w.modalities.push_back(std::move(g));
    }
  }
  s.get("cl_classes_per_modality", w.cl_classes_per_modality);
  s.get("pretrain_classes_per_modality", w.pretrain_classes_per_modality);
  s.get("train_per_class", w.train_per_class);
  s.get("test_per_class", w.test_per_class);
  s.get("pretrain_train_per_class", w.pretrain_train_per_class);
  s.get("pretrain_held_per_class", w.pretrain_held_per_class);
  s.get("noise", w.noise);
  s.get("slice_jitter", w.slice_jitter);
  s.get("signature_scale", w.signature_scale);
  s.get("subsets", w.subsets);
  s.get("vocab_size", w.vocab_size);
  s.get("text_len", w.text_len);
  s.finish();
}

void parse_backbone(Section& s, ExperimentConfig& cfg) {
  BackboneConfig& b = cfg.backbone;
  s.get("init_seed", cfg.backbone_init_seed);
  s.get("d_model", b.encoder.d_model);
  s.get("num_layers", b.encoder.num_layers);
  s.get("num_heads", b.encoder.num_heads);
  s.get("mlp_hidden", b.encoder.mlp_hidden);
  s.get("prompt_len", b.encoder.prompt_len);
  s.get("prompt_depth", b.encoder.prompt_depth);
  s.get("tokens_per_slice", b.tokens_per_slice);
  s.get("vocab_size", b.vocab_size);
  s.get("text_len", b.text_len);
  s.get("d_joint", b.d_joint);
  s.get("temperature", b.temperature);
  if (const json* v = s.find("modalities")) {
    if (!v->is_array()) fail(s.path() + ".modalities", "expected an array of strings");
    b.modalities.clear();
    for (std::size_t i = 0; i < v->size(); ++i) {
      if (!(*v)[i].is_string())
        fail(s.path() + ".modalities[" + std::to_string(i) + "]", "expected a string");
      b.modalities.push_back((*v)[i].get<std::string>());
    }
  }
  s.finish();
}

void parse_method(Section& s, RunConfig& r) {
  s.get("name", r.method);
  s.get("cross", r.cross);
  s.get("self_reg", r.self_reg);
  s.get("realign", r.realign);
  s.get("lambda_self", r.lambda_self);
  s.get("head_rank", r.head_rank);
  s.finish();
}

void parse_train(Section& s, ExperimentConfig& cfg) {
  RunConfig& r = cfg.run;
  s.get("scenario", cfg.scenario);
  s.get("seed", r.seed);
  s.get("reversed", cfg.reversed);
  s.get("epochs", r.epochs);
  s.get("batch_size", r.batch_size);
  s.get("prompt_lr", r.prompt_lr);
  s.get("gate_lr", r.gate_lr);
  s.get("realign_lr", r.realign_lr);
  s.get("gate_samples", r.gate_samples);
  s.get("gate_steps", r.gate_steps);
  s.get("realign_samples", r.realign_samples);
  s.get("realign_steps", r.realign_steps);
  if (const json* v = s.find("pretrain")) {
    Section p(*v, s.path() + ".pretrain");
    p.get("seed", cfg.pretrain.seed);
    p.get("lr", cfg.pretrain.lr);
    p.get("max_steps", cfg.pretrain.max_steps);
    p.get("target", cfg.pretrain.target);
    p.get("floor", cfg.pretrain.floor);
    p.get("eval_every", cfg.pretrain.eval_every);
    p.finish();
  }
  s.finish();
}

void parse_eval(Section& s, RunConfig& r) {
  s.get("mode", r.eval_mode);
  s.get("gate_weights_in_specific", r.gate_weights_in_specific);
  s.finish();
}

void parse_output(Section& s, ExperimentConfig& cfg) {
  s.get("dir", cfg.out_dir);
  s.get("backbone_checkpoint", cfg.backbone_checkpoint);
  s.finish();
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json root;
  try {
    root = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config: top level must be an object");

  ExperimentConfig cfg;
  Section top(root, "");
  std::set<std::string> allowed{"world", "backbone", "method", "train", "eval", "output"};
  for (auto it = root.begin(); it != root.end(); ++it)
    if (!allowed.count(it.key())) throw ConfigError("config: " + it.key() + ": unknown section");

  if (const json* v = top.find("world")) {
    Section s(*v, "world");
    parse_world(s, cfg.world);
  }
  if (const json* v = top.find("backbone")) {
    Section s(*v, "backbone");
    parse_backbone(s, cfg);
  }
  if (const json* v = top.find("method")) {
    Section s(*v, "method");
    parse_method(s, cfg.run);
  }
  if (const json* v = top.find("train")) {
    Section s(*v, "train");
    parse_train(s, cfg);
  }
  if (const json* v = top.find("eval")) {
    Section s(*v, "eval");
    parse_eval(s, cfg.run);
  }
  if (const json* v = top.find("output")) {
    Section s(*v, "output");
    parse_output(s, cfg);
  }

  validate_experiment_config(cfg);
  return cfg;
}

void validate_experiment_config(const ExperimentConfig& cfg) {
  const WorldConfig& w = cfg.world;
  const BackboneConfig& b = cfg.backbone;
  if (w.d_model != b.encoder.d_model)
    throw ConfigError("config: world.d_model (" + std::to_string(w.d_model) +
                      ") and backbone.d_model (" + std::to_string(b.encoder.d_model) +
                      ") must match");
  if (w.vocab_size != b.vocab_size)
    throw ConfigError("config: world.vocab_size and backbone.vocab_size must match");
  if (w.text_len != b.text_len)
    throw ConfigError("config: world.text_len and backbone.text_len must match");
  if (w.modalities.size() != b.modalities.size())
    throw ConfigError("config: world and backbone declare different modality counts");
  for (std::size_t i = 0; i < w.modalities.size(); ++i) {
    if (w.modalities[i].name != b.modalities[i])
      throw ConfigError("config: modality #" + std::to_string(i) + " differs between world ('" +
                        w.modalities[i].name + "') and backbone ('" + b.modalities[i] + "')");
    if (w.modalities[i].tokens != b.tokens_per_slice)
      throw ConfigError("config: world.modalities['" + w.modalities[i].name +
                        "'].tokens must equal backbone.tokens_per_slice");
  }

  try {
    parse_scenario(cfg.scenario);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("config: train.scenario: ") + e.what());
  }
  validate_config(cfg.run);

  const PretrainConfig& p = cfg.pretrain;
  if (p.lr <= 0.0f) throw ConfigError("config: train.pretrain.lr must be positive");
  if (p.max_steps <= 0) throw ConfigError("config: train.pretrain.max_steps must be positive");
  if (p.eval_every <= 0) throw ConfigError("config: train.pretrain.eval_every must be positive");
  if (!(p.target > 0.0f && p.target <= 1.0f))
    throw ConfigError("config: train.pretrain.target must lie in (0, 1]");
  if (!(p.floor > 0.0f && p.floor <= 1.0f))
    throw ConfigError("config: train.pretrain.floor must lie in (0, 1]");
  if (p.floor > p.target)
    throw ConfigError("config: train.pretrain.floor must not exceed the early-stop target");

  if (cfg.out_dir.empty()) throw ConfigError("config: output.dir must not be empty");
  if (cfg.backbone_checkpoint.empty())
    throw ConfigError("config: output.backbone_checkpoint must not be empty");
}

std::string emit_config(const ExperimentConfig& cfg) {
  json root;

  json world;
  world["seed"] = cfg.world.seed;
  world["d_model"] = cfg.world.d_model;
  json mods = json::array();
  for (const ModalityGeometry& g : cfg.world.modalities) {
    json m;
    m["name"] = g.name;
    m["slices"] = g.slices;
    m["tokens"] = g.tokens;
    mods.push_back(std::move(m));
  }
  world["modalities"] = std::move(mods);
  world["cl_classes_per_modality"] = cfg.world.cl_classes_per_modality;
  world["pretrain_classes_per_modality"] = cfg.world.pretrain_classes_per_modality;
  world["train_per_class"] = cfg.world.train_per_class;
  world["test_per_class"] = cfg.world.test_per_class;
  world["pretrain_train_per_class"] = cfg.world.pretrain_train_per_class;
  world["pretrain_held_per_class"] = cfg.world.pretrain_held_per_class;
  world["noise"] = cfg.world.noise;
  world["slice_jitter"] = cfg.world.slice_jitter;
  world["signature_scale"] = cfg.world.signature_scale;
  world["subsets"] = cfg.world.subsets;
  world["vocab_size"] = cfg.world.vocab_size;
  world["text_len"] = cfg.world.text_len;
  root["world"] = std::move(world);

  json backbone;
  backbone["init_seed"] = cfg.backbone_init_seed;
  backbone["d_model"] = cfg.backbone.encoder.d_model;
  backbone["num_layers"] = cfg.backbone.encoder.num_layers;
  backbone["num_heads"] = cfg.backbone.encoder.num_heads;
  backbone["mlp_hidden"] = cfg.backbone.encoder.mlp_hidden;
  backbone["prompt_len"] = cfg.backbone.encoder.prompt_len;
  backbone["prompt_depth"] = cfg.backbone.encoder.prompt_depth;
  backbone["tokens_per_slice"] = cfg.backbone.tokens_per_slice;
  backbone["vocab_size"] = cfg.backbone.vocab_size;
  backbone["text_len"] = cfg.backbone.text_len;
  backbone["d_joint"] = cfg.backbone.d_joint;
  backbone["temperature"] = cfg.backbone.temperature;
  backbone["modalities"] = cfg.backbone.modalities;
  root["backbone"] = std::move(backbone);

  json method;
  method["name"] = cfg.run.method;
  method["cross"] = cfg.run.cross;
  method["self_reg"] = cfg.run.self_reg;
  method["realign"] = cfg.run.realign;
  method["lambda_self"] = cfg.run.lambda_self;
  method["head_rank"] = cfg.run.head_rank;
  root["method"] = std::move(method);

  json train;
  train["scenario"] = cfg.scenario;
  train["seed"] = cfg.run.seed;
  train["reversed"] = cfg.reversed;
  train["epochs"] = cfg.run.epochs;
  train["batch_size"] = cfg.run.batch_size;
  train["prompt_lr"] = cfg.run.prompt_lr;
  train["gate_lr"] = cfg.run.gate_lr;
  train["realign_lr"] = cfg.run.realign_lr;
  train["gate_samples"] = cfg.run.gate_samples;
  train["gate_steps"] = cfg.run.gate_steps;
  train["realign_samples"] = cfg.run.realign_samples;
  train["realign_steps"] = cfg.run.realign_steps;
  json pre;
  pre["seed"] = cfg.pretrain.seed;
  pre["lr"] = cfg.pretrain.lr;
  pre["max_steps"] = cfg.pretrain.max_steps;
  pre["target"] = cfg.pretrain.target;
  pre["floor"] = cfg.pretrain.floor;
  pre["eval_every"] = cfg.pretrain.eval_every;
  train["pretrain"] = std::move(pre);
  root["train"] = std::move(train);

  json eval;
  eval["mode"] = cfg.run.eval_mode;
  eval["gate_weights_in_specific"] = cfg.run.gate_weights_in_specific;
  root["eval"] = std::move(eval);

  json output;
  output["dir"] = cfg.out_dir;
  output["backbone_checkpoint"] = cfg.backbone_checkpoint;
  root["output"] = std::move(output);

  return root.dump(2) + "\n";
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("config: cannot read '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

}  // namespace mmcl::cli
