#pragma once

#include <map>
#include <string>
#include <vector>

#include "mmcl/encoder.hpp"

namespace mmcl {

struct BackboneConfig {
  EncoderConfig encoder;
  /// Spatial tokens per temporal slice fed to the modality tower.
  int tokens_per_slice = 16;
  int vocab_size = 64;
  int text_len = 4;
  int d_joint = 32;
  float temperature = 0.07f;
  std::vector<std::string> modalities{"image", "video", "depth", "audio"};
};

/// Frozen two-tower contrastive backbone: one transformer encoder shared by
/// all modalities, one language encoder, a frozen per-modality projection
/// base into the joint space, and cosine/temperature scoring.
class Backbone {
 public:
  Backbone(const BackboneConfig& cfg, std::uint64_t seed);

  /// tokens: [B, S, T, d_model] (S temporal slices of T spatial tokens).
  /// Slices are folded into the batch, encoded with the same prompts and
  /// positions, and the per-slice readout features are mean-pooled.
  /// Returns pre-projection features [B, d_model].
  Tensor encode_modality(const Tensor& tokens, const std::vector<Tensor>* prompts,
                         PromptMode mode) const;

  /// ids: row-major B x text_len token ids. Returns joint features [B, d_joint]
  /// (readout feature through the frozen output projection).
  Tensor encode_text(const std::vector<int>& ids, int batch,
                     const std::vector<Tensor>* prompts, PromptMode mode) const;

  /// Frozen projection base [d_model, d_joint] for one modality.
  Parameter& head_base(const std::string& modality);
  const Parameter& head_base(const std::string& modality) const;
  /// features [B, d_model] through the modality's base projection.
  Tensor project_base(const Tensor& features, const std::string& modality) const;

  /// Cosine similarity of joint features scaled by 1/temperature: [B, C].
  Tensor similarity_logits(const Tensor& v_joint, const Tensor& l_joint) const;
  /// Row-wise softmax over similarity logits.
  Tensor class_probabilities(const Tensor& v_joint, const Tensor& l_joint) const;

  const BackboneConfig& config() const { return cfg_; }
  std::vector<std::pair<std::string, Parameter*>> named_parameters();
  std::vector<Parameter*> parameters();
  void freeze_all();
  bool frozen() const { return frozen_; }
  /// Order-sensitive FNV-1a hash over parameter names and raw float bytes.
  std::uint64_t weight_hash();

  void save(const std::string& path, const std::string& meta = "");
  /// Loads weights by name; shapes and tower geometry must match.
  void load(const std::string& path);

 private:
  BackboneConfig cfg_;
  TransformerEncoder vision_enc_;
  Parameter vision_pos_;  // [tokens_per_slice, d_model]
  TransformerEncoder text_enc_;
  Parameter token_embed_;  // [vocab_size, d_model]
  Parameter text_pos_;     // [text_len, d_model]
  Parameter text_out_;     // [d_model, d_joint]
  std::map<std::string, Parameter> heads_;
  bool frozen_ = false;
};

}  // namespace mmcl
