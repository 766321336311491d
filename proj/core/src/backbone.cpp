#include "mmcl/backbone.hpp"

#include <cmath>

#include "mmcl/checkpoint.hpp"

namespace mmcl {

namespace {

TransformerEncoder build_encoder(const BackboneConfig& cfg, std::uint64_t seed,
                                 std::string_view label) {
  RngStream init(seed, label);
  return TransformerEncoder(cfg.encoder, init);
}

std::uint64_t fnv1a_bytes(std::uint64_t h, const void* data, std::size_t n) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

Backbone::Backbone(const BackboneConfig& cfg, std::uint64_t seed)
    : cfg_(cfg),
      vision_enc_(build_encoder(cfg, seed, "backbone/vision")),
      text_enc_(build_encoder(cfg, seed, "backbone/text")) {
  if (cfg.tokens_per_slice <= 0 || cfg.vocab_size <= 0 || cfg.text_len <= 0 ||
      cfg.d_joint <= 0) {
    throw ConfigError("backbone dims must be positive");
  }
  if (cfg.temperature <= 0.0f) throw ConfigError("backbone temperature must be positive");
  if (cfg.modalities.empty()) throw ConfigError("backbone needs at least one modality");
  int d = cfg.encoder.d_model;
  RngStream init(seed, "backbone/aux");
  vision_pos_ = Parameter("vision.pos", Tensor::randn({cfg.tokens_per_slice, d}, init, 0.02f));
  token_embed_ = Parameter("text.token_embed", Tensor::randn({cfg.vocab_size, d}, init, 0.02f));
  text_pos_ = Parameter("text.pos", Tensor::randn({cfg.text_len, d}, init, 0.02f));
  text_out_ = Parameter("text.out",
                        Tensor::randn({d, cfg.d_joint}, init, 1.0f / std::sqrt(static_cast<float>(d))));
  for (const std::string& m : cfg.modalities) {
    heads_.emplace(m, Parameter("head." + m, Tensor::randn({d, cfg.d_joint}, init,
                                                           1.0f / std::sqrt(static_cast<float>(d)))));
  }
}

Tensor Backbone::encode_modality(const Tensor& tokens, const std::vector<Tensor>* prompts,
                                 PromptMode mode) const {
  if (tokens.ndim() != 4 || tokens.dim(2) != cfg_.tokens_per_slice ||
      tokens.dim(3) != cfg_.encoder.d_model) {
    throw UsageError("encode_modality expects [B, S, T, d_model], got " +
                     shape_str(tokens.shape()));
  }
  int B = tokens.dim(0), S = tokens.dim(1), T = tokens.dim(2), d = tokens.dim(3);
  Tensor folded = ops::reshape(tokens, {B * S, T, d});
  folded = ops::add(folded, vision_pos_.value);
  // Per-sample prompt blocks ([B, rows, d]) must follow the slice fold: each
  // sample's block is repeated for its S slices.
  std::vector<Tensor> expanded;
  const std::vector<Tensor>* effective = prompts;
  if (prompts && S > 1) {
    bool any_per_sample = false;
    for (const Tensor& p : *prompts) any_per_sample = any_per_sample || p.ndim() == 3;
    if (any_per_sample) {
      expanded.reserve(prompts->size());
      for (const Tensor& p : *prompts) {
        if (p.ndim() != 3) {
          expanded.push_back(p);
          continue;
        }
        int rows = p.dim(1);
        Tensor flat = ops::reshape(p, {B, 1, rows * d});
        std::vector<Tensor> copies(static_cast<std::size_t>(S), flat);
        expanded.push_back(ops::reshape(ops::concat(copies, 1), {B * S, rows, d}));
      }
      effective = &expanded;
    }
  }
  Tensor feats = vision_enc_.forward(folded, effective, mode);  // [B*S, d]
  if (S == 1) return feats;
  return ops::mean(ops::reshape(feats, {B, S, d}), 1);
}

Tensor Backbone::encode_text(const std::vector<int>& ids, int batch,
                             const std::vector<Tensor>* prompts, PromptMode mode) const {
  Tensor emb = ops::embedding(token_embed_.value, ids, batch, cfg_.text_len);
  emb = ops::add(emb, text_pos_.value);
  Tensor feats = text_enc_.forward(emb, prompts, mode);  // [B, d]
  return ops::matmul(feats, text_out_.value);
}

Parameter& Backbone::head_base(const std::string& modality) {
  auto it = heads_.find(modality);
  if (it == heads_.end()) throw UsageError("unknown modality '" + modality + "'");
  return it->second;
}

const Parameter& Backbone::head_base(const std::string& modality) const {
  auto it = heads_.find(modality);
  if (it == heads_.end()) throw UsageError("unknown modality '" + modality + "'");
  return it->second;
}

Tensor Backbone::project_base(const Tensor& features, const std::string& modality) const {
  return ops::matmul(features, head_base(modality).value);
}

Tensor Backbone::similarity_logits(const Tensor& v_joint, const Tensor& l_joint) const {
  return ops::scale(ops::cosine_similarity(v_joint, l_joint), 1.0f / cfg_.temperature);
}

Tensor Backbone::class_probabilities(const Tensor& v_joint, const Tensor& l_joint) const {
  return ops::softmax(similarity_logits(v_joint, l_joint));
}

std::vector<std::pair<std::string, Parameter*>> Backbone::named_parameters() {
  std::vector<std::pair<std::string, Parameter*>> out;
  for (Parameter* p : vision_enc_.parameters()) out.emplace_back("vision." + p->name, p);
  out.emplace_back("vision.pos", &vision_pos_);
  for (Parameter* p : text_enc_.parameters()) out.emplace_back("text." + p->name, p);
  out.emplace_back("text.token_embed", &token_embed_);
  out.emplace_back("text.pos", &text_pos_);
  out.emplace_back("text.out", &text_out_);
  for (auto& [m, p] : heads_) out.emplace_back("head." + m, &p);
  return out;
}

std::vector<Parameter*> Backbone::parameters() {
  std::vector<Parameter*> out;
  for (auto& [name, p] : named_parameters()) out.push_back(p);
  return out;
}

void Backbone::freeze_all() {
  for (Parameter* p : parameters()) p->freeze();
  frozen_ = true;
}

std::uint64_t Backbone::weight_hash() {
  std::uint64_t h = 1469598103934665603ull;
  for (auto& [name, p] : named_parameters()) {
    h = fnv1a_bytes(h, name.data(), name.size());
    const auto& d = p->value.data();
    h = fnv1a_bytes(h, d.data(), d.size() * sizeof(float));
  }
  return h;
}

void Backbone::save(const std::string& path, const std::string& meta) {
  CheckpointWriter w;
  for (auto& [name, p] : named_parameters()) w.add(name, p->value);
  w.set_meta(meta);
  w.write(path);
}

void Backbone::load(const std::string& path) {
  CheckpointReader r(path);
  for (auto& [name, p] : named_parameters()) {
    Tensor t = r.tensor(name);
    if (t.shape() != p->value.shape()) {
      throw DataError("backbone load: shape mismatch for '" + name + "': file " +
                      shape_str(t.shape()) + " vs model " + shape_str(p->value.shape()));
    }
    p->value.raw_data() = t.data();
  }
}

}  // namespace mmcl
