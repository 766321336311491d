#pragma once

#include <vector>

#include "mmcl/optim.hpp"
#include "mmcl/tensor.hpp"

namespace mmcl {

struct EncoderConfig {
  int d_model = 32;
  int num_layers = 4;
  int num_heads = 4;
  int mlp_hidden = 64;
  int prompt_len = 4;
  /// Layers [0, prompt_depth) accept a fresh prompt block as extra keys and
  /// values; deeper layers run unprompted.
  int prompt_depth = 2;
};

/// How prompt rows participate in attention.
///
/// Train: every prompt row is an ordinary key/value position, so zero-valued
/// prompts still receive gradient through the key/value projections.
/// Eval: rows that are exactly zero are masked out of attention entirely,
/// making an all-zero prompt bit-identical to running without prompts.
enum class PromptMode { Train, Eval };

/// Pre-norm transformer encoder with a learned readout token and deep
/// prefix-style prompting. Prompt rows act only as attention keys/values at
/// the first `prompt_depth` layers; the residual stream holds just the
/// readout and data positions.
class TransformerEncoder {
 public:
  TransformerEncoder(const EncoderConfig& cfg, RngStream& init);

  /// tokens: [B, T, d_model], already embedded and position-coded.
  /// prompts: one [rows, d_model] block per prompted layer (stack size must
  /// equal prompt_depth; rows may vary), or nullptr for promptless encoding.
  /// Returns the readout feature [B, d_model].
  Tensor forward(const Tensor& tokens, const std::vector<Tensor>* prompts,
                 PromptMode mode) const;

  const EncoderConfig& config() const { return cfg_; }
  std::vector<Parameter*> parameters();
  void freeze();

 private:
  struct Layer {
    Parameter ln1_gain, ln1_bias;
    Parameter wq, bq, wk, bk, wv, bv, wo, bo;
    Parameter ln2_gain, ln2_bias;
    Parameter w1, b1, w2, b2;
  };

  EncoderConfig cfg_;
  Parameter readout_;  // [1, d_model]
  std::vector<Layer> layers_;
  Parameter lnf_gain_, lnf_bias_;
};

/// Rows of `t` ([R, d]) tiled along a new leading batch axis -> [B, R, d].
/// Differentiable; gradients sum over the batch copies.
Tensor tile_rows(const Tensor& t, int batch);

}  // namespace mmcl
