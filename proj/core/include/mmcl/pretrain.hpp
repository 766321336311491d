#pragma once

#include <string>

#include "mmcl/backbone.hpp"
#include "mmcl/world.hpp"

namespace mmcl {

struct PretrainConfig {
  std::uint64_t seed = 7;
  float lr = 1e-3f;
  int max_steps = 3000;
  /// Early-stop once held-out retrieval reaches this level...
  float target = 0.92f;
  /// ...and fail the whole run if the budget ends below this one.
  float floor = 0.9f;
  int eval_every = 50;
};

struct PretrainReport {
  int steps_run = 0;
  float final_loss = 0.0f;
  /// Top-1 held-out retrieval over the union of all pretraining classes.
  float retrieval = 0.0f;
  bool reached_target = false;
};

/// Trains both towers jointly with a symmetric contrastive loss on the
/// world's pretraining classes (one sample per modality/class pair per step),
/// then freezes every backbone weight. Throws NumericFault if held-out
/// retrieval ends below `floor`.
PretrainReport pretrain_backbone(Backbone& backbone, const World& world,
                                 const PretrainConfig& cfg);

/// Held-out top-1 retrieval accuracy: each held-out sample must rank its own
/// class text first among the texts of every pretraining class (all
/// modalities pooled).
float pretrain_retrieval(const Backbone& backbone, const World& world);

/// Stable hex digest of everything that determines the pretrained weights:
/// world content, the backbone's initial (pre-training) weights — which
/// fold in its geometry and construction seed — and the pretraining recipe.
/// Used to cache/reuse backbone checkpoints across runs. Must be taken
/// before pretraining mutates the weights.
std::string pretrain_cache_key(const World& world, Backbone& backbone,
                               const PretrainConfig& cfg);

/// Loads `cache_dir/backbone_<key>.ckpt` if present, otherwise pretrains and
/// writes it. Returns the checkpoint path.
std::string ensure_pretrained(Backbone& backbone, const World& world,
                              const PretrainConfig& cfg, const std::string& cache_dir,
                              PretrainReport* report = nullptr);

}  // namespace mmcl
