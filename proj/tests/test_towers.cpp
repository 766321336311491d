#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>

#include "mmcl/backbone.hpp"
#include "mmcl/checkpoint.hpp"
#include "mmcl/grad_check.hpp"

using namespace mmcl;

namespace {

EncoderConfig small_encoder() {
  EncoderConfig cfg;
  cfg.d_model = 16;
  cfg.num_layers = 3;
  cfg.num_heads = 2;
  cfg.mlp_hidden = 24;
  cfg.prompt_len = 2;
  cfg.prompt_depth = 2;
  return cfg;
}

BackboneConfig small_backbone() {
  BackboneConfig cfg;
  cfg.encoder = small_encoder();
  cfg.tokens_per_slice = 4;
  cfg.vocab_size = 16;
  cfg.text_len = 3;
  cfg.d_joint = 8;
  return cfg;
}

std::vector<Tensor> zero_prompts(const EncoderConfig& cfg) {
  std::vector<Tensor> ps;
  for (int l = 0; l < cfg.prompt_depth; ++l) {
    ps.push_back(Tensor::zeros({cfg.prompt_len, cfg.d_model}));
  }
  return ps;
}

bool same_bits(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("all-zero prompts in eval mode are bit-identical to no prompts") {
  EncoderConfig cfg = small_encoder();
  RngStream init(3, "enc");
  TransformerEncoder enc(cfg, init);
  RngStream data(4, "tok");
  Tensor tokens = Tensor::randn({3, 5, cfg.d_model}, data);

  Tensor bare = enc.forward(tokens, nullptr, PromptMode::Eval);
  auto prompts = zero_prompts(cfg);
  Tensor masked = enc.forward(tokens, &prompts, PromptMode::Eval);
  CHECK(same_bits(bare.data(), masked.data()));

  // Train/eval agree when no prompts are involved.
  Tensor train_mode = enc.forward(tokens, nullptr, PromptMode::Train);
  CHECK(same_bits(bare.data(), train_mode.data()));
}

TEST_CASE("masked zero rows ignore whatever values the unmasked path would see") {
  EncoderConfig cfg = small_encoder();
  RngStream init(5, "enc");
  TransformerEncoder enc(cfg, init);
  RngStream data(6, "tok");
  Tensor tokens = Tensor::randn({2, 4, cfg.d_model}, data);

  // One live row followed by one zero row per block; the zero row must be
  // equivalent to a stack holding only the live row.
  RngStream pr(7, "prompt");
  std::vector<Tensor> partial;
  std::vector<Tensor> live_only;
  for (int l = 0; l < cfg.prompt_depth; ++l) {
    std::vector<float> rows(static_cast<std::size_t>(cfg.prompt_len) * cfg.d_model, 0.0f);
    auto live = pr.normals(static_cast<std::size_t>(cfg.d_model));
    std::copy(live.begin(), live.end(), rows.begin());
    partial.push_back(Tensor::from_data({cfg.prompt_len, cfg.d_model}, rows));
    live_only.push_back(Tensor::from_data({1, cfg.d_model},
                                          std::vector<float>(live.begin(), live.end())));
  }
  Tensor out = enc.forward(tokens, &partial, PromptMode::Eval);
  Tensor out2 = enc.forward(tokens, &live_only, PromptMode::Eval);
  // The masked column only adds exact-zero terms, but the wider GEMM may
  // regroup the float accumulation, so compare to tight tolerance.
  for (std::size_t i = 0; i < out.data().size(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(out2.data()[i]).epsilon(1e-6));
  }

  // And the live row must actually matter.
  Tensor bare = enc.forward(tokens, nullptr, PromptMode::Eval);
  bool differs = false;
  for (std::size_t i = 0; i < bare.data().size(); ++i) {
    differs = differs || bare.data()[i] != out.data()[i];
  }
  CHECK(differs);
}

TEST_CASE("zero prompts receive gradient in train mode") {
  EncoderConfig cfg = small_encoder();
  RngStream init(8, "enc");
  TransformerEncoder enc(cfg, init);
  enc.freeze();
  RngStream data(9, "tok");
  Tensor tokens = Tensor::randn({2, 4, cfg.d_model}, data);

  std::vector<Parameter> blocks;
  std::vector<Tensor> prompts;
  for (int l = 0; l < cfg.prompt_depth; ++l) {
    blocks.emplace_back("p" + std::to_string(l), Tensor::zeros({cfg.prompt_len, cfg.d_model}));
    prompts.push_back(blocks.back().value);
  }
  Tensor loss = ops::sum_all(enc.forward(tokens, &prompts, PromptMode::Train));
  loss.backward();
  for (auto& b : blocks) {
    float max_abs = 0.0f;
    for (float g : b.value.grad()) max_abs = std::max(max_abs, std::abs(g));
    CHECK(max_abs > 0.0f);
  }
}

TEST_CASE("prompt gradients pass the finite-difference check") {
  EncoderConfig cfg = small_encoder();
  cfg.num_layers = 2;
  RngStream init(10, "enc");
  TransformerEncoder enc(cfg, init);
  enc.freeze();
  RngStream data(11, "tok");
  Tensor tokens = Tensor::randn({2, 3, cfg.d_model}, data, 0.5f);

  RngStream pr(12, "prompt");
  std::vector<Parameter> blocks;
  for (int l = 0; l < cfg.prompt_depth; ++l) {
    blocks.emplace_back("p" + std::to_string(l),
                        Tensor::randn({cfg.prompt_len, cfg.d_model}, pr, 0.2f));
  }
  RngStream wr(13, "w");
  Tensor w = Tensor::randn({2, cfg.d_model}, wr);
  auto loss = [&] {
    std::vector<Tensor> prompts;
    for (auto& b : blocks) prompts.push_back(b.value);
    return ops::sum_all(ops::mul(enc.forward(tokens, &prompts, PromptMode::Train), w));
  };
  std::vector<Parameter*> ps;
  for (auto& b : blocks) ps.push_back(&b);
  // The wider step keeps float32 loss quantization out of the quotient on
  // this deep graph; the loss is smooth so truncation stays negligible.
  CHECK(grad_check(loss, ps, 1e-2).max_rel_error < 1e-3);
}

TEST_CASE("temporal slices pool by averaging") {
  BackboneConfig cfg = small_backbone();
  Backbone bb(cfg, 21);
  RngStream data(22, "tok");
  int d = cfg.encoder.d_model;
  Tensor one_slice = Tensor::randn({2, 1, cfg.tokens_per_slice, d}, data);
  Tensor single = bb.encode_modality(one_slice, nullptr, PromptMode::Eval);

  // Three identical slices must pool back to the single-slice feature.
  std::vector<float> rep;
  const auto& src = one_slice.data();
  std::size_t per_b = static_cast<std::size_t>(cfg.tokens_per_slice) * d;
  for (int b = 0; b < 2; ++b) {
    for (int s = 0; s < 3; ++s) {
      rep.insert(rep.end(), src.begin() + b * per_b, src.begin() + (b + 1) * per_b);
    }
  }
  Tensor tri = Tensor::from_data({2, 3, cfg.tokens_per_slice, d}, rep);
  Tensor pooled = bb.encode_modality(tri, nullptr, PromptMode::Eval);
  for (std::size_t i = 0; i < single.data().size(); ++i) {
    CHECK(pooled.data()[i] == doctest::Approx(single.data()[i]).epsilon(1e-5));
  }

  // Distinct slices must not collapse to either slice's feature.
  Tensor mixed = Tensor::randn({2, 3, cfg.tokens_per_slice, d}, data);
  Tensor mixed_feat = bb.encode_modality(mixed, nullptr, PromptMode::Eval);
  CHECK(mixed_feat.shape() == Shape{2, d});
}

TEST_CASE("text tower shapes, determinism and vocabulary bounds") {
  BackboneConfig cfg = small_backbone();
  Backbone bb(cfg, 31);
  std::vector<int> ids{1, 2, 3, 7, 0, 4};
  Tensor a = bb.encode_text(ids, 2, nullptr, PromptMode::Eval);
  CHECK(a.shape() == Shape{2, cfg.d_joint});
  Tensor b = bb.encode_text(ids, 2, nullptr, PromptMode::Eval);
  CHECK(same_bits(a.data(), b.data()));
  CHECK_THROWS_AS(bb.encode_text({1, 2, 99, 0, 1, 2}, 2, nullptr, PromptMode::Eval), DataError);
}

TEST_CASE("cosine/temperature scoring matches the closed form") {
  BackboneConfig cfg = small_backbone();
  Backbone bb(cfg, 41);
  Tensor v = Tensor::from_data({1, 2}, {1, 0});
  Tensor l = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  Tensor logits = bb.similarity_logits(v, l);
  CHECK(logits.data()[0] == doctest::Approx(1.0 / 0.07).epsilon(1e-6));
  CHECK(logits.data()[1] == doctest::Approx(0.0).epsilon(1e-6));
  Tensor p = bb.class_probabilities(v, l);
  double expected = 1.0 / (1.0 + std::exp(-1.0 / 0.07));
  CHECK(p.data()[0] == doctest::Approx(expected).epsilon(1e-6));
  CHECK(p.data()[0] + p.data()[1] == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("projection base is linear and modality-specific") {
  BackboneConfig cfg = small_backbone();
  Backbone bb(cfg, 51);
  RngStream data(52, "f");
  Tensor f1 = Tensor::randn({3, cfg.encoder.d_model}, data);
  Tensor f2 = Tensor::randn({3, cfg.encoder.d_model}, data);
  Tensor lhs = bb.project_base(ops::add(f1, f2), "image");
  Tensor rhs = ops::add(bb.project_base(f1, "image"), bb.project_base(f2, "image"));
  for (std::size_t i = 0; i < lhs.data().size(); ++i) {
    CHECK(lhs.data()[i] == doctest::Approx(rhs.data()[i]).epsilon(1e-5));
  }
  Tensor other = bb.project_base(f1, "audio");
  CHECK_FALSE(same_bits(bb.project_base(f1, "image").data(), other.data()));
  CHECK_THROWS_AS(bb.project_base(f1, "lidar"), UsageError);
}

TEST_CASE("freezing stops updates and fixes the weight hash") {
  BackboneConfig cfg = small_backbone();
  Backbone bb(cfg, 61);
  bb.freeze_all();
  CHECK(bb.frozen());
  std::uint64_t h0 = bb.weight_hash();

  AdamState st = make_adam_state(0.01f);
  CHECK_THROWS_AS(adam_update(*bb.parameters().front(), st), UsageError);

  RngStream data(62, "tok");
  Tensor tokens = Tensor::randn({2, 1, cfg.tokens_per_slice, cfg.encoder.d_model}, data);
  Tensor out = bb.encode_modality(tokens, nullptr, PromptMode::Eval);
  CHECK_FALSE(out.requires_grad());
  CHECK(bb.weight_hash() == h0);
}

TEST_CASE("two backbones with one seed agree, different seeds differ") {
  BackboneConfig cfg = small_backbone();
  Backbone a(cfg, 71), b(cfg, 71), c(cfg, 72);
  CHECK(a.weight_hash() == b.weight_hash());
  CHECK(a.weight_hash() != c.weight_hash());
}

TEST_CASE("checkpoint round trip preserves bytes, meta and shapes") {
  const char* path = "towers_roundtrip.ckpt";
  RngStream rng(81, "ck");
  Tensor t1 = Tensor::randn({3, 4}, rng);
  Tensor t2 = Tensor::randn({2, 2, 2}, rng);
  CheckpointWriter w;
  w.add("alpha", t1);
  w.add("beta/gamma", t2);
  w.set_meta("{\"note\":42}");
  CHECK_THROWS_AS(w.add("alpha", t2), UsageError);
  w.write(path);

  CheckpointReader r(path);
  CHECK(r.meta() == "{\"note\":42}");
  CHECK(r.names() == std::vector<std::string>{"alpha", "beta/gamma"});
  CHECK(r.shape("beta/gamma") == Shape{2, 2, 2});
  CHECK(same_bits(r.tensor("alpha").data(), t1.data()));
  CHECK(same_bits(r.tensor("beta/gamma").data(), t2.data()));
  CHECK_FALSE(r.tensor("alpha").requires_grad());
  CHECK_THROWS_AS(r.tensor("missing"), DataError);
  std::remove(path);
}

TEST_CASE("checkpoint reader rejects garbage and truncation") {
  const char* path = "towers_garbage.ckpt";
  {
    FILE* f = std::fopen(path, "wb");
    std::fputs("definitely not a checkpoint", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(CheckpointReader{path}, DataError);
  std::remove(path);
  CHECK_THROWS_AS(CheckpointReader{"no_such_file.ckpt"}, DataError);
}

TEST_CASE("backbone save/load restores exact weights") {
  const char* path = "towers_backbone.ckpt";
  BackboneConfig cfg = small_backbone();
  Backbone a(cfg, 91), b(cfg, 92);
  CHECK(a.weight_hash() != b.weight_hash());
  a.save(path, "{\"kind\":\"test\"}");
  b.load(path);
  CHECK(a.weight_hash() == b.weight_hash());

  RngStream data(93, "tok");
  Tensor tokens = Tensor::randn({1, 1, cfg.tokens_per_slice, cfg.encoder.d_model}, data);
  CHECK(same_bits(a.encode_modality(tokens, nullptr, PromptMode::Eval).data(),
                  b.encode_modality(tokens, nullptr, PromptMode::Eval).data()));

  BackboneConfig other = cfg;
  other.d_joint = 4;
  Backbone c(other, 94);
  CHECK_THROWS_AS(c.load(path), DataError);
  std::remove(path);
}
