#pragma once

#include <string>
#include <vector>

#include "mmcl/tensor.hpp"

namespace mmcl {

struct ModalityGeometry {
  std::string name;
  int slices = 1;  // temporal slices per sample
  int tokens = 16; // spatial tokens per slice
};

struct WorldConfig {
  std::uint64_t seed = 1234;
  int d_model = 32;
  std::vector<ModalityGeometry> modalities{
      {"image", 1, 16}, {"video", 3, 16}, {"depth", 1, 16}, {"audio", 3, 16}};
  int cl_classes_per_modality = 20;
  int pretrain_classes_per_modality = 8;
  int train_per_class = 40;
  int test_per_class = 10;
  int pretrain_train_per_class = 64;
  int pretrain_held_per_class = 16;
  float noise = 0.3f;
  float slice_jitter = 0.1f;
  /// Norm of the per-modality output bias; drives modality separability.
  float signature_scale = 1.5f;
  /// Continual classes per modality are split into this many task subsets.
  int subsets = 5;
  int vocab_size = 64;
  int text_len = 4;
};

struct ClassInfo {
  int id = -1;
  std::string name;
  std::string modality;
  int modality_index = -1;
  int local_index = -1;  // position within its modality's class list
  bool pretrain = false;
  std::vector<int> text;  // text_len token ids, globally unique per class
};

/// Deterministic synthetic multimodal dataset. Every class has per-token
/// prototypes; samples pass prototype + per-slice jitter + Gaussian noise
/// through a fixed orthogonal per-modality signature transform plus bias.
/// Everything is generated eagerly at construction from the world seed.
class World {
 public:
  explicit World(const WorldConfig& cfg);

  const WorldConfig& config() const { return cfg_; }
  int num_modalities() const { return static_cast<int>(cfg_.modalities.size()); }
  const ModalityGeometry& geometry(int modality_index) const;
  int modality_index(const std::string& name) const;

  const std::vector<ClassInfo>& classes() const { return classes_; }
  const ClassInfo& class_info(int id) const;
  /// Continual-learning class ids of one modality, in local order.
  const std::vector<int>& cl_classes(const std::string& modality) const;
  const std::vector<int>& pretrain_classes(const std::string& modality) const;

  /// train: [train_n, S, T, d]; test: [test_n, S, T, d]. For pretrain classes
  /// these hold the pretraining corpus and its held-out split.
  struct ClassData {
    Tensor train;
    Tensor test;
  };
  const ClassData& data(int class_id) const;

  /// Flattened text token ids for the given classes, row-major C x text_len.
  std::vector<int> text_tokens(const std::vector<int>& class_ids) const;

  /// FNV-1a over every generated sample and text, for determinism checks.
  std::uint64_t content_hash() const;

 private:
  WorldConfig cfg_;
  std::vector<ClassInfo> classes_;
  std::vector<ClassData> data_;
  std::vector<std::vector<int>> cl_by_modality_;
  std::vector<std::vector<int>> pretrain_by_modality_;
};

}  // namespace mmcl
