#include "mmcl/encoder.hpp"

#include <cmath>

namespace mmcl {

namespace {

Tensor init_weight(Shape shape, RngStream& rng, float fan_in) {
  return Tensor::randn(std::move(shape), rng, 1.0f / std::sqrt(fan_in));
}

bool row_is_zero(const std::vector<float>& data, int row, int width) {
  for (int j = 0; j < width; ++j) {
    if (data[static_cast<std::size_t>(row) * width + j] != 0.0f) return false;
  }
  return true;
}

}  // namespace

Tensor tile_rows(const Tensor& t, int batch) {
  if (t.ndim() != 2) throw UsageError("tile_rows expects a rank-2 tensor");
  int rows = t.dim(0), d = t.dim(1);
  Tensor ones = Tensor::full({batch, 1}, 1.0f);
  Tensor flat = ops::reshape(t, {1, rows * d});
  return ops::reshape(ops::matmul(ones, flat), {batch, rows, d});
}

TransformerEncoder::TransformerEncoder(const EncoderConfig& cfg, RngStream& init) : cfg_(cfg) {
  if (cfg.d_model <= 0 || cfg.num_layers <= 0 || cfg.num_heads <= 0 || cfg.mlp_hidden <= 0) {
    throw ConfigError("encoder dims must be positive");
  }
  if (cfg.d_model % cfg.num_heads != 0) {
    throw ConfigError("encoder d_model must be divisible by num_heads");
  }
  if (cfg.prompt_depth < 0 || cfg.prompt_depth > cfg.num_layers) {
    throw ConfigError("encoder prompt_depth must lie in [0, num_layers]");
  }
  int d = cfg.d_model;
  float fd = static_cast<float>(d);
  readout_ = Parameter("readout", Tensor::randn({1, d}, init, 0.02f));
  layers_.reserve(static_cast<std::size_t>(cfg.num_layers));
  for (int l = 0; l < cfg.num_layers; ++l) {
    std::string p = "layer" + std::to_string(l) + ".";
    Layer lay;
    lay.ln1_gain = Parameter(p + "ln1_gain", Tensor::full({d}, 1.0f));
    lay.ln1_bias = Parameter(p + "ln1_bias", Tensor::zeros({d}));
    lay.wq = Parameter(p + "wq", init_weight({d, d}, init, fd));
    lay.bq = Parameter(p + "bq", Tensor::zeros({d}));
    lay.wk = Parameter(p + "wk", init_weight({d, d}, init, fd));
    lay.bk = Parameter(p + "bk", Tensor::zeros({d}));
    lay.wv = Parameter(p + "wv", init_weight({d, d}, init, fd));
    lay.bv = Parameter(p + "bv", Tensor::zeros({d}));
    lay.wo = Parameter(p + "wo", init_weight({d, d}, init, fd));
    lay.bo = Parameter(p + "bo", Tensor::zeros({d}));
    lay.ln2_gain = Parameter(p + "ln2_gain", Tensor::full({d}, 1.0f));
    lay.ln2_bias = Parameter(p + "ln2_bias", Tensor::zeros({d}));
    lay.w1 = Parameter(p + "w1", init_weight({d, cfg.mlp_hidden}, init, fd));
    lay.b1 = Parameter(p + "b1", Tensor::zeros({cfg.mlp_hidden}));
    lay.w2 = Parameter(p + "w2", init_weight({cfg.mlp_hidden, d}, init,
                                             static_cast<float>(cfg.mlp_hidden)));
    lay.b2 = Parameter(p + "b2", Tensor::zeros({d}));
    layers_.push_back(std::move(lay));
  }
  lnf_gain_ = Parameter("lnf_gain", Tensor::full({d}, 1.0f));
  lnf_bias_ = Parameter("lnf_bias", Tensor::zeros({d}));
}

Tensor TransformerEncoder::forward(const Tensor& tokens, const std::vector<Tensor>* prompts,
                                   PromptMode mode) const {
  if (tokens.ndim() != 3 || tokens.dim(2) != cfg_.d_model) {
    throw UsageError("encoder expects tokens of shape [B, T, d_model], got " +
                     shape_str(tokens.shape()));
  }
  int B = tokens.dim(0);
  if (prompts) {
    if (static_cast<int>(prompts->size()) != cfg_.prompt_depth) {
      throw UsageError("prompt stack size must equal prompt_depth");
    }
    for (const Tensor& p : *prompts) {
      bool shared = p.ndim() == 2 && p.dim(1) == cfg_.d_model;
      bool per_sample = p.ndim() == 3 && p.dim(0) == B && p.dim(2) == cfg_.d_model;
      if (!shared && !per_sample) {
        throw UsageError(
            "each prompt block must be [rows, d_model] or [batch, rows, d_model], got " +
            shape_str(p.shape()));
      }
    }
  }
  int T = tokens.dim(1);
  Tensor x = ops::concat({tile_rows(readout_.value, B), tokens}, 1);  // [B, 1+T, d]
  int Td = 1 + T;
  for (int l = 0; l < cfg_.num_layers; ++l) {
    const Layer& lay = layers_[l];
    Tensor h = ops::layer_norm(x, lay.ln1_gain.value, lay.ln1_bias.value);
    ops::AttentionWeights w{lay.wq.value, lay.bq.value, lay.wk.value, lay.bk.value,
                            lay.wv.value, lay.bv.value, lay.wo.value, lay.bo.value};
    Tensor kv = h;
    std::vector<std::uint8_t> mask;
    if (prompts && l < cfg_.prompt_depth) {
      const Tensor& block = (*prompts)[static_cast<std::size_t>(l)];
      bool per_sample = block.ndim() == 3;
      int P = per_sample ? block.dim(1) : block.dim(0);
      bool use_block = true;
      if (mode == PromptMode::Eval) {
        const auto& pd = block.data();
        int copies = per_sample ? B : 1;
        std::vector<std::uint8_t> row_mask(static_cast<std::size_t>(copies) * P, 0);
        bool any_masked = false;
        bool all_masked = true;
        for (int r = 0; r < copies * P; ++r) {
          bool z = row_is_zero(pd, r, cfg_.d_model);
          row_mask[static_cast<std::size_t>(r)] = z ? 1 : 0;
          any_masked = any_masked || z;
          all_masked = all_masked && z;
        }
        // A fully zero block is equivalent to no prompts at all; dropping it
        // gives the same arithmetic without the concat.
        use_block = !all_masked;
        if (use_block && any_masked) {
          mask.assign(static_cast<std::size_t>(B) * (P + Td), 0);
          for (int b = 0; b < B; ++b) {
            for (int r = 0; r < P; ++r) {
              mask[static_cast<std::size_t>(b) * (P + Td) + r] =
                  row_mask[static_cast<std::size_t>(per_sample ? b * P + r : r)];
            }
          }
        }
      }
      if (use_block) {
        Tensor tiled = per_sample ? block : tile_rows(block, B);
        kv = ops::concat({tiled, h}, 1);  // [B, P+1+T, d]
      }
    }
    Tensor attn = ops::multi_head_attention(h, kv, cfg_.num_heads, w,
                                            mask.empty() ? nullptr : &mask);
    x = ops::add(x, attn);
    Tensor h2 = ops::layer_norm(x, lay.ln2_gain.value, lay.ln2_bias.value);
    Tensor mlp = ops::add(
        ops::matmul(ops::gelu(ops::add(ops::matmul(h2, lay.w1.value), lay.b1.value)),
                    lay.w2.value),
        lay.b2.value);
    x = ops::add(x, mlp);
  }
  x = ops::layer_norm(x, lnf_gain_.value, lnf_bias_.value);
  Tensor head = ops::slice(x, 1, 0, 1);  // [B, 1, d]
  return ops::reshape(head, {B, cfg_.d_model});
}

std::vector<Parameter*> TransformerEncoder::parameters() {
  std::vector<Parameter*> out;
  out.push_back(&readout_);
  for (Layer& l : layers_) {
    for (Parameter* p : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv,
                         &l.wo, &l.bo, &l.ln2_gain, &l.ln2_bias, &l.w1, &l.b1, &l.w2, &l.b2}) {
      out.push_back(p);
    }
  }
  out.push_back(&lnf_gain_);
  out.push_back(&lnf_bias_);
  return out;
}

void TransformerEncoder::freeze() {
  for (Parameter* p : parameters()) p->freeze();
}

}  // namespace mmcl
