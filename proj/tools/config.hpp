#pragma once

#include <string>

#include "mmcl/backbone.hpp"
#include "mmcl/pretrain.hpp"
#include "mmcl/runner.hpp"
#include "mmcl/world.hpp"

namespace mmcl::cli {

/// Everything one experiment needs, grouped the way the JSON file is:
/// {world, backbone, method, train, eval, output}. Field defaults are the
/// library defaults, so an empty JSON object is a complete configuration.
struct ExperimentConfig {
  WorldConfig world;
  BackboneConfig backbone;
  /// Seed for the backbone's random initialization (pretraining then shapes
  /// the weights from this starting point).
  std::uint64_t backbone_init_seed = 99;
  PretrainConfig pretrain;
  /// Method, ablation switches, training recipe, eval mode, and run seed.
  RunConfig run;
  std::string scenario = "random";
  bool reversed = false;
  /// Parent directory for run outputs and the pretrain artifacts.
  std::string out_dir = "runs";
  /// Backbone checkpoint path; bare names are placed inside `out_dir`.
  std::string backbone_checkpoint = "backbone.ckpt";
};

/// Parses a strict JSON configuration: unknown keys anywhere are a hard
/// error naming the offending path, as are type mismatches and
/// cross-section inconsistencies (for example differing d_model between
/// world and backbone). Throws ConfigError.
ExperimentConfig parse_config(const std::string& json_text);

/// Canonical JSON emission: every field, fixed order, two-space indent,
/// trailing newline. parse(emit(parse(x))) is value-identical to parse(x)
/// and emit is a fixed point (emit(parse(emit(c))) == emit(c)).
std::string emit_config(const ExperimentConfig& cfg);

/// Reads and parses `path`. Throws ConfigError on missing/unreadable files.
ExperimentConfig load_config_file(const std::string& path);

/// Cross-field checks shared by parse_config and the command layer:
/// geometry agreement between world and backbone, matching modality lists,
/// and the run/pretrain recipe ranges. Throws ConfigError.
void validate_experiment_config(const ExperimentConfig& cfg);

}  // namespace mmcl::cli
