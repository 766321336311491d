#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmcl/comm.hpp"

namespace mmcl {

struct FtConfig {
  std::uint64_t seed = 0;
  float lr = 5e-3f;
};

/// Sequential fine-tuning baseline: one shared prompt pair and one shared
/// full projection head serve every modality, trained directly on each
/// arriving task. Nothing is snapshotted, accumulated, gated, or re-aligned,
/// so later tasks overwrite what earlier tasks learned.
class FtModel {
 public:
  FtModel(Backbone* backbone, const FtConfig& cfg);

  const FtConfig& config() const { return cfg_; }
  const Backbone& backbone() const { return *backbone_; }
  int current_step() const { return step_; }
  bool task_active() const { return active_.has_value(); }

  /// Modalities in first-encounter order.
  const std::vector<std::string>& modalities() const { return order_; }
  const std::vector<RegisteredClass>& registry(const std::string& modality) const;

  void begin_task(int t, const TaskSpec& spec);
  /// One optimizer update on the shared prompts and head; only the task
  /// classification term exists for this method.
  LossBreakdown task_step(const Tensor& tokens, const std::vector<int>& labels);
  void end_task();

  /// Current shared modality / text prompt stacks sliced per layer.
  std::vector<Tensor> prompt_layers_modality() const;
  std::vector<Tensor> prompt_layers_text() const;
  const Tensor& head() const { return head_.value; }

  /// Text embeddings of the modality's registered classes under the current
  /// shared text prompts, one row per registry entry.
  Tensor registered_text_embeddings(const std::string& modality) const;

  /// Both totals equal the one shared parameter set; neither changes as
  /// tasks or modalities arrive.
  ParameterCount parameter_count() const;

 private:
  struct ActiveTask {
    int step = 0;
    TaskSpec spec;
    std::vector<int> flat_text;
  };

  Backbone* backbone_;
  FtConfig cfg_;
  Parameter P_;     // [prompt_depth, prompt_len, d_model]
  Parameter Q_;     // [prompt_depth, prompt_len, d_model]
  Parameter head_;  // [d_model, d_joint], seeded from the mean of the bases
  std::map<std::string, std::vector<RegisteredClass>> registries_;
  std::vector<std::string> order_;
  int step_ = 0;
  std::optional<ActiveTask> active_;
  std::optional<AdamOptimizer> opt_;
};

}  // namespace mmcl
