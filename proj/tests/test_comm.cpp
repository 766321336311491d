#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "mmcl/comm.hpp"
#include "mmcl/grad_check.hpp"

using namespace mmcl;

namespace {

BackboneConfig small_backbone_config() {
  BackboneConfig cfg;
  cfg.encoder.d_model = 16;
  cfg.encoder.num_layers = 2;
  cfg.encoder.num_heads = 2;
  cfg.encoder.mlp_hidden = 24;
  cfg.encoder.prompt_len = 2;
  cfg.encoder.prompt_depth = 2;
  cfg.tokens_per_slice = 4;
  cfg.vocab_size = 24;
  cfg.text_len = 3;
  cfg.d_joint = 8;
  cfg.modalities = {"image", "audio"};
  return cfg;
}

Backbone& shared_backbone() {
  static Backbone bb = [] {
    Backbone b(small_backbone_config(), 77);
    b.freeze_all();
    return b;
  }();
  return bb;
}

/// Class-coherent synthetic batch: a fixed per-class anchor plus small noise.
Tensor class_batch(const std::string& modality, int cls, int n, std::uint64_t salt = 0) {
  const auto& cfg = small_backbone_config();
  int S = modality == "audio" ? 2 : 1;
  int T = cfg.tokens_per_slice, d = cfg.encoder.d_model;
  RngStream anchor_rng(900 + cls, "anchor/" + modality);
  Tensor anchor = Tensor::randn({S, T, d}, anchor_rng, 1.0f);
  RngStream noise_rng(7000 + cls * 131 + static_cast<int>(salt), "noise/" + modality);
  std::vector<float> data(static_cast<std::size_t>(n) * S * T * d);
  for (int i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < anchor.data().size(); ++j) {
      data[static_cast<std::size_t>(i) * anchor.data().size() + j] =
          anchor.data()[j] + 0.15f * static_cast<float>(noise_rng.normal());
    }
  }
  return Tensor::from_data({n, S, T, d}, std::move(data));
}

std::vector<int> text_of(int cls) { return {cls % 24, (cls * 7 + 1) % 24, (cls * 5 + 2) % 24}; }

TaskSpec make_spec(const std::string& modality, std::vector<int> classes) {
  TaskSpec spec;
  spec.modality = modality;
  spec.class_ids = classes;
  for (int c : classes) spec.class_text.push_back(text_of(c));
  return spec;
}

/// Mixed batch over the spec's classes: `per` samples each, labels attached.
std::pair<Tensor, std::vector<int>> task_batch(const TaskSpec& spec, int per,
                                               std::uint64_t salt = 0) {
  std::vector<Tensor> parts;
  std::vector<int> labels;
  for (std::size_t c = 0; c < spec.class_ids.size(); ++c) {
    parts.push_back(class_batch(spec.modality, spec.class_ids[c], per, salt));
    labels.insert(labels.end(), static_cast<std::size_t>(per), static_cast<int>(c));
  }
  return {ops::concat(parts, 0).detach(), labels};
}

CommConfig fast_config(bool use_gate) {
  CommConfig cfg;
  cfg.seed = 5;
  cfg.gate_steps = 60;
  cfg.gate_samples = 32;
  cfg.realign_steps = 40;
  cfg.realign_samples = 8;
  cfg.use_gate = use_gate;
  return cfg;
}

/// observe + (gate) + begin/steps/end for one task unit.
void run_mini_task(CommModel& model, int t, const TaskSpec& spec, int steps,
                   std::uint64_t rng_seed) {
  auto [obs, obs_labels] = task_batch(spec, 4, 50 + t);
  model.observe_raw_features(spec.modality, obs);
  if (model.config().use_gate) {
    RngStream gate_rng(rng_seed, "gate/" + std::to_string(t));
    model.train_gate(gate_rng);
  }
  model.begin_task(t, spec);
  for (int s = 0; s < steps; ++s) {
    auto [batch, labels] = task_batch(spec, 3, 100 + t * 10 + s);
    model.task_step(batch, labels);
  }
  std::vector<Tensor> class_batches;
  for (int c : spec.class_ids) class_batches.push_back(class_batch(spec.modality, c, 5, 999));
  model.end_task(class_batches);
}

bool same_bytes(const std::vector<float>& a, const std::vector<float>& b) {
  return a.size() == b.size() &&
         std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

}  // namespace

TEST_CASE("ledger accumulation is element-wise sum with identity cases") {
  Tensor prev = Tensor::from_data({2}, {1.0f, 2.0f});
  Tensor comp = Tensor::from_data({2}, {0.5f, -1.0f});
  Tensor out = accumulate(std::optional<Tensor>(prev), comp);
  CHECK(out.data()[0] == doctest::Approx(1.5));
  CHECK(out.data()[1] == doctest::Approx(1.0));

  Tensor first = accumulate(std::nullopt, comp);
  CHECK(same_bytes(first.data(), comp.data()));

  Tensor zero = Tensor::zeros({2});
  Tensor kept = accumulate(std::optional<Tensor>(prev), zero);
  CHECK(same_bytes(kept.data(), prev.data()));

  Tensor bad = Tensor::zeros({3});
  CHECK_THROWS_AS(accumulate(std::optional<Tensor>(prev), bad), ConfigError);

  // Order-free over three components: both groupings give the same floats
  // because the ledger always folds left to right.
  RngStream rng(3, "acc");
  Tensor c1 = Tensor::randn({4}, rng), c2 = Tensor::randn({4}, rng), c3 = Tensor::randn({4}, rng);
  Tensor led = accumulate(std::optional<Tensor>(accumulate(std::optional<Tensor>(c1), c2)), c3);
  for (int i = 0; i < 4; ++i) {
    CHECK(led.data()[static_cast<std::size_t>(i)] ==
          doctest::Approx(c1.data()[static_cast<std::size_t>(i)] +
                          c2.data()[static_cast<std::size_t>(i)] +
                          c3.data()[static_cast<std::size_t>(i)]).epsilon(1e-6));
  }
}

TEST_CASE("projection head: fresh correction is the base map, and full rank matches least squares") {
  RngStream rng(11, "head");
  Tensor base = Tensor::randn({4, 4}, rng);
  Tensor X = Tensor::randn({32, 4}, rng);
  ProjectionHead fresh{base, Tensor::zeros({4, 3}), Tensor::zeros({3, 4})};
  Tensor via_head = project(fresh, X);
  Tensor via_base = ops::matmul(X, base);
  CHECK(same_bytes(via_head.data(), via_base.data()));

  // Linearity in the features.
  ProjectionHead some{base, Tensor::randn({4, 3}, rng), Tensor::randn({3, 4}, rng)};
  Tensor doubled = project(some, ops::scale(X, 2.0f));
  Tensor scaled = ops::scale(project(some, X), 2.0f);
  for (std::size_t i = 0; i < doubled.data().size(); ++i) {
    CHECK(doubled.data()[i] == doctest::Approx(scaled.data()[i]).epsilon(1e-5));
  }

  // With rank = d the correction can express any additive delta. The
  // unconstrained least-squares solution for mapping X through `target`
  // is delta* = target - base (X has full column rank), fit exactly.
  Tensor target = Tensor::randn({4, 4}, rng);
  Parameter A("A", Tensor::randn({4, 4}, rng, 0.5f));
  Parameter B("B", Tensor::zeros({4, 4}));
  AdamOptimizer opt({&A, &B}, 0.02f);
  Tensor want = ops::matmul(X, target);
  for (int s = 0; s < 4000; ++s) {
    opt.zero_grad();
    ProjectionHead h{base, A.value, B.value};
    Tensor diff = ops::sub(project(h, X), want);
    Tensor loss = ops::sum_all(ops::mul(diff, diff));
    if (loss.item() < 1e-11f) break;
    loss.backward();
    opt.step();
  }
  Tensor fitted = ops::matmul(A.value, B.value);
  Tensor exact = ops::sub(target, base);
  for (std::size_t i = 0; i < fitted.data().size(); ++i) {
    CHECK(fitted.data()[i] == doctest::Approx(exact.data()[i]).epsilon(2e-4));
  }
}

TEST_CASE("gate trainer separates synthetic Gaussians and starts at uniform loss") {
  int d = 16, n = 64;
  GaussianModel a, b;
  a.dim = b.dim = d;
  a.count = b.count = 100;
  a.mean.assign(static_cast<std::size_t>(d), 0.0);
  b.mean.assign(static_cast<std::size_t>(d), 0.0);
  a.mean[0] = 10.0;
  b.mean[0] = -10.0;
  a.cov.assign(static_cast<std::size_t>(d) * d, 0.0);
  b.cov.assign(static_cast<std::size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) {
    a.cov[static_cast<std::size_t>(i) * d + i] = 1.0;
    b.cov[static_cast<std::size_t>(i) * d + i] = 1.0;
  }

  RelevanceGate gate;
  gate.modalities = {"left", "right"};
  RngStream rng(42, "gate");
  GateTrainReport report = train_relevance_gate(gate, {&a, &b}, n, 120, 0.05f, rng);
  CHECK(report.initial_loss == doctest::Approx(n * 2 * std::log(2.0)).epsilon(1e-4));
  CHECK(report.train_accuracy >= 0.99f);

  // Held-out draws from the same Gaussians classify almost perfectly.
  RngStream held(43, "held");
  int correct = 0, total = 0;
  for (int side = 0; side < 2; ++side) {
    const GaussianModel& g = side == 0 ? a : b;
    RngStream draw = held.child("side" + std::to_string(side));
    Tensor feats = Tensor::from_data({50, d}, g.sample(50, draw));
    auto w = gate.softmax_weights(feats);
    for (int i = 0; i < 50; ++i) {
      int pick = w[static_cast<std::size_t>(i) * 2] > w[static_cast<std::size_t>(i) * 2 + 1] ? 0 : 1;
      correct += (pick == side) ? 1 : 0;
      ++total;
    }
  }
  CHECK(static_cast<float>(correct) / total >= 0.99f);

  // A single known modality is scored with probability one.
  GaussianModel solo = a;
  RelevanceGate only;
  only.modalities = {"only"};
  RngStream rng2(44, "solo");
  GateTrainReport solo_report = train_relevance_gate(only, {&solo}, 16, 10, 0.05f, rng2);
  CHECK(solo_report.train_accuracy == doctest::Approx(1.0));
  CHECK(solo_report.final_loss == doctest::Approx(0.0).epsilon(1e-6));
  Tensor f = Tensor::from_data({1, d}, std::vector<float>(static_cast<std::size_t>(d), 0.3f));
  CHECK(only.softmax_weights(f)[0] == doctest::Approx(1.0));
}

TEST_CASE("fresh task components leave behavior identical before any step") {
  CommModel model(&shared_backbone(), fast_config(false));
  TaskSpec spec = make_spec("image", {0, 1});
  Tensor probe = class_batch("image", 0, 3);

  Tensor before = shared_backbone().encode_modality(probe, nullptr, PromptMode::Eval);
  model.begin_task(1, spec);
  std::vector<Tensor> live = model.live_prompt_layers();
  Tensor after = shared_backbone().encode_modality(probe, &live, PromptMode::Eval);
  CHECK(same_bytes(before.data(), after.data()));

  Tensor head_eff = model.effective_head("image");
  CHECK(same_bytes(head_eff.data(), shared_backbone().head_base("image").value.data()));
  CHECK(model.task_B().value.data() ==
        std::vector<float>(model.task_B().value.data().size(), 0.0f));
}

TEST_CASE("task lifecycle guards misuse") {
  CommModel model(&shared_backbone(), fast_config(false));
  TaskSpec spec = make_spec("image", {0, 1});
  CHECK_THROWS_AS(model.end_task({}), UsageError);
  CHECK_THROWS_AS(model.task_P(), UsageError);
  model.begin_task(1, spec);
  CHECK_THROWS_AS(model.begin_task(1, spec), UsageError);  // still active
  auto [batch, labels] = task_batch(spec, 2);
  std::vector<int> bad_labels(labels.size(), 7);
  CHECK_THROWS_AS(model.task_step(batch, bad_labels), UsageError);
  std::vector<Tensor> cb{class_batch("image", 0, 2), class_batch("image", 1, 2)};
  model.end_task(cb);
  CHECK_THROWS_AS(model.begin_task(1, spec), UsageError);  // duplicate (t, modality)
  CHECK_THROWS_AS(model.begin_task(0, spec), UsageError);
}

TEST_CASE("first task accumulation stores exactly the trained components") {
  CommModel model(&shared_backbone(), fast_config(false));
  TaskSpec spec = make_spec("image", {2, 3});
  model.begin_task(1, spec);
  for (int s = 0; s < 4; ++s) {
    auto [batch, labels] = task_batch(spec, 3, 200 + s);
    LossBreakdown lb = model.task_step(batch, labels);
    CHECK(lb.self == 0.0f);  // first task: no history, no drift penalty
    CHECK(lb.total == lb.task);
  }
  std::vector<float> trained_P = model.task_P().value.data();
  std::vector<float> trained_Q = model.task_Q().value.data();
  Tensor product = ops::matmul(model.task_A().value.detach(), model.task_B().value.detach());
  bool moved = false;
  for (float v : trained_P) moved = moved || v != 0.0f;
  CHECK(moved);

  std::vector<Tensor> cb{class_batch("image", 2, 3), class_batch("image", 3, 3)};
  model.end_task(cb);
  const ModalityState& st = model.state("image");
  REQUIRE(st.P_bar.has_value());
  CHECK(same_bytes(st.P_bar->data(), trained_P));
  CHECK(same_bytes(st.Q_bar->data(), trained_Q));
  CHECK(same_bytes(st.head_delta.data(), product.data()));
  CHECK(st.registry.size() == 2);
  CHECK(st.registry[0].class_id == 2);
  CHECK(st.registry[1].step == 1);
}

TEST_CASE("ledger equals the running sum of per-task components") {
  CommModel model(&shared_backbone(), fast_config(false));
  std::optional<Tensor> replayed;
  for (int t = 1; t <= 3; ++t) {
    TaskSpec spec = make_spec("image", {2 * t, 2 * t + 1});
    model.begin_task(t, spec);
    for (int s = 0; s < 3; ++s) {
      auto [batch, labels] = task_batch(spec, 2, 300 + t * 10 + s);
      model.task_step(batch, labels);
    }
    Tensor component = model.task_P().value.detach();
    std::vector<Tensor> cb{class_batch("image", 2 * t, 2, 77),
                           class_batch("image", 2 * t + 1, 2, 77)};
    model.end_task(cb);
    replayed = accumulate(replayed, component);
  }
  CHECK(same_bytes(model.state("image").P_bar->data(), replayed->data()));
}

TEST_CASE("self-regularization is zero at a task start and isolates its terms") {
  CommModel model(&shared_backbone(), fast_config(false));
  run_mini_task(model, 1, make_spec("image", {0, 1}), 4, 1);

  TaskSpec spec2 = make_spec("image", {4, 5});
  model.begin_task(2, spec2);
  auto [batch, labels] = task_batch(spec2, 3);

  SelfRegTerms at_start = model.self_reg_terms(batch, labels);
  CHECK(at_start.total.item() == 0.0f);

  // Only the modality branch reacts to a modality-prompt change.
  auto perturb = [](Parameter& p, float delta) {
    for (float& v : p.value.raw_data()) v += delta;
  };
  perturb(model.task_P(), 0.05f);
  SelfRegTerms p_only = model.self_reg_terms(batch, labels);
  CHECK(p_only.modality.item() > 1e-3f);
  CHECK(p_only.text.item() == 0.0f);
  CHECK(p_only.head.item() == 0.0f);
  perturb(model.task_P(), -0.05f);

  perturb(model.task_Q(), 0.05f);
  SelfRegTerms q_only = model.self_reg_terms(batch, labels);
  CHECK(q_only.modality.item() <= 1e-6f);
  CHECK(q_only.text.item() > 1e-3f);
  CHECK(q_only.head.item() <= 1e-6f);
  perturb(model.task_Q(), -0.05f);

  perturb(model.task_B(), 0.05f);
  SelfRegTerms b_only = model.self_reg_terms(batch, labels);
  CHECK(b_only.modality.item() <= 1e-6f);
  CHECK(b_only.text.item() <= 1e-6f);
  CHECK(b_only.head.item() > 1e-3f);
}

TEST_CASE("self-regularization drives gradient only into live components") {
  CommModel model(&shared_backbone(), fast_config(false));
  run_mini_task(model, 1, make_spec("image", {0, 1}), 3, 2);
  TaskSpec spec2 = make_spec("image", {4, 5});
  model.begin_task(2, spec2);
  auto [batch, labels] = task_batch(spec2, 2);

  // Finite-difference agreement for the drift penalty with respect to the
  // live prompt stack. A larger step keeps float32 loss quantization small
  // relative to the signal on this deep composite graph.
  for (float& v : model.task_P().value.raw_data()) v += 0.03f;  // leave zero, smooth norm
  std::vector<Parameter*> params{&model.task_P()};
  auto loss_fn = [&]() { return model.self_reg_loss(batch, labels); };
  GradCheckReport rep = grad_check(loss_fn, params, 1e-2);
  CHECK(rep.max_rel_error < 1e-2);

  // The snapshot ledger itself carries no gradient tracking.
  CHECK_FALSE(model.state("image").P_bar->requires_grad());
}

TEST_CASE("raw feature statistics pool exactly and stay isolated per modality") {
  CommModel model(&shared_backbone(), fast_config(true));
  Tensor b1 = class_batch("image", 0, 4);
  Tensor b2 = class_batch("image", 1, 5);
  model.observe_raw_features("image", b1);
  model.observe_raw_features("image", b2);

  Tensor union_batch = ops::concat({b1, b2}, 0);
  Tensor union_feats = shared_backbone().encode_modality(union_batch, nullptr, PromptMode::Eval);
  GaussianModel direct = GaussianModel::fit(union_feats.data(), union_feats.dim(-1));

  const GaussianModel& pooled = model.state("image").raw_stats;
  CHECK(pooled.count == 9);
  for (int i = 0; i < pooled.dim; ++i) {
    CHECK(pooled.mean[static_cast<std::size_t>(i)] ==
          doctest::Approx(direct.mean[static_cast<std::size_t>(i)]).epsilon(1e-9));
  }
  for (std::size_t i = 0; i < pooled.cov.size(); ++i) {
    CHECK(pooled.cov[i] == doctest::Approx(direct.cov[i]).epsilon(1e-5));
  }
  CHECK_FALSE(model.has_state("audio"));

  Tensor single = class_batch("audio", 9, 1);
  model.observe_raw_features("audio", single);
  Tensor single_feat = shared_backbone().encode_modality(single, nullptr, PromptMode::Eval);
  CHECK(model.state("audio").raw_stats.count == 1);
  CHECK(model.state("audio").raw_stats.mean[0] ==
        doctest::Approx(static_cast<double>(single_feat.data()[0])));
  CHECK(model.state("image").raw_stats.count == 9);
}

TEST_CASE("composition weights are a convex mix over the known ledgers") {
  CommConfig cfg = fast_config(true);
  CommModel model(&shared_backbone(), cfg);
  run_mini_task(model, 1, make_spec("image", {0, 1}), 3, 3);
  run_mini_task(model, 2, make_spec("audio", {8, 9}), 3, 3);

  Tensor probe = class_batch("image", 0, 4);
  ComposedPrompts composed = model.compose_prompts(probe, "");
  int k = static_cast<int>(composed.order.size());
  REQUIRE(k == 2);
  for (int i = 0; i < 4; ++i) {
    float sum = 0.0f;
    for (int j = 0; j < k; ++j) {
      float w = composed.weights[static_cast<std::size_t>(i) * k + j];
      CHECK(w >= 0.0f);
      sum += w;
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }

  // Coordinate-wise convex-hull bounds over the two ledgers.
  const auto& p_img = model.state("image").P_bar->data();
  const auto& p_aud = model.state("audio").P_bar->data();
  const auto& ec = shared_backbone().config().encoder;
  int len = ec.prompt_len, d = ec.d_model;
  for (int l = 0; l < ec.prompt_depth; ++l) {
    const auto& layer = composed.layers[static_cast<std::size_t>(l)].data();
    for (int i = 0; i < 4; ++i) {
      for (int j = 0; j < len * d; ++j) {
        std::size_t flat = static_cast<std::size_t>(l) * len * d + j;
        float lo = std::min(p_img[flat], p_aud[flat]);
        float hi = std::max(p_img[flat], p_aud[flat]);
        float got = layer[static_cast<std::size_t>(i) * len * d + j];
        CHECK(got >= lo - 1e-6f);
        CHECK(got <= hi + 1e-6f);
      }
    }
  }

  // With explicit weights the mix is plain linear algebra.
  const auto& w = composed.weights;
  for (int j = 0; j < len * d; ++j) {
    float expect = w[0] * p_img[static_cast<std::size_t>(j)] +
                   w[1] * p_aud[static_cast<std::size_t>(j)];
    CHECK(composed.layers[0].data()[static_cast<std::size_t>(j)] ==
          doctest::Approx(expect).epsilon(1e-5));
  }
}

TEST_CASE("single-modality composition returns that ledger bit-exactly") {
  CommModel model(&shared_backbone(), fast_config(true));
  run_mini_task(model, 1, make_spec("image", {0, 1}), 3, 4);
  Tensor probe = class_batch("image", 0, 2);
  ComposedPrompts composed = model.compose_prompts(probe, "");
  REQUIRE(composed.order.size() == 1);
  const auto& ledger = model.state("image").P_bar->data();
  const auto& ec = shared_backbone().config().encoder;
  int len = ec.prompt_len, d = ec.d_model;
  for (int l = 0; l < ec.prompt_depth; ++l) {
    const auto& got = composed.layers[static_cast<std::size_t>(l)].data();
    for (int i = 0; i < 2; ++i) {
      for (int j = 0; j < len * d; ++j) {
        CHECK(got[static_cast<std::size_t>(i) * len * d + j] ==
              ledger[static_cast<std::size_t>(l) * len * d + j]);
      }
    }
  }
}

TEST_CASE("training one modality leaves every other modality bit-unchanged") {
  CommModel model(&shared_backbone(), fast_config(true));
  run_mini_task(model, 1, make_spec("image", {0, 1}), 3, 5);

  const ModalityState& img = model.state("image");
  std::vector<float> p_before = img.P_bar->data();
  std::vector<float> q_before = img.Q_bar->data();
  std::vector<float> h_before = img.head_delta.data();
  std::uint64_t backbone_before = shared_backbone().weight_hash();

  run_mini_task(model, 2, make_spec("audio", {8, 9}), 4, 5);

  CHECK(same_bytes(model.state("image").P_bar->data(), p_before));
  CHECK(same_bytes(model.state("image").Q_bar->data(), q_before));
  CHECK(same_bytes(model.state("image").head_delta.data(), h_before));
  CHECK(shared_backbone().weight_hash() == backbone_before);
  CHECK(model.state("audio").P_bar.has_value());
}

TEST_CASE("a single-candidate task has zero task loss") {
  CommModel model(&shared_backbone(), fast_config(false));
  TaskSpec spec = make_spec("image", {3});
  model.begin_task(1, spec);
  auto [batch, labels] = task_batch(spec, 3);
  LossBreakdown lb = model.task_step(batch, labels);
  CHECK(lb.task == doctest::Approx(0.0).epsilon(1e-7));
}

TEST_CASE("end_task stores class statistics from prompted features") {
  CommModel model(&shared_backbone(), fast_config(false));
  TaskSpec spec = make_spec("image", {0, 1});
  model.begin_task(1, spec);
  auto [batch, labels] = task_batch(spec, 3);
  model.task_step(batch, labels);

  Tensor lone = class_batch("image", 1, 1, 1234);
  model.end_task({class_batch("image", 0, 3, 1234), lone});

  const ModalityState& st = model.state("image");
  const GaussianModel& stats = st.class_stats.at(1);
  CHECK(stats.count == 1);
  std::vector<Tensor> layers = prompt_layers(*st.P_bar);
  Tensor feat = shared_backbone().encode_modality(lone, &layers, PromptMode::Eval);
  for (int i = 0; i < stats.dim; ++i) {
    CHECK(stats.mean[static_cast<std::size_t>(i)] ==
          doctest::Approx(static_cast<double>(feat.data()[static_cast<std::size_t>(i)])));
  }
  for (double c : stats.cov) CHECK(c == 0.0);
}

TEST_CASE("head re-alignment is a no-op until a modality has older classes") {
  CommModel model(&shared_backbone(), fast_config(false));
  run_mini_task(model, 1, make_spec("image", {0, 1}), 3, 6);
  std::vector<float> head_before = model.state("image").head_delta.data();
  RngStream rng(6, "realign");
  RealignReport rep = model.realign_heads("image", rng);
  CHECK_FALSE(rep.applicable);
  CHECK_FALSE(rep.applied);
  CHECK(same_bytes(model.state("image").head_delta.data(), head_before));
}

TEST_CASE("head re-alignment never lowers accuracy on its sampled features") {
  CommModel model(&shared_backbone(), fast_config(false));
  run_mini_task(model, 1, make_spec("image", {0, 1}), 4, 7);
  run_mini_task(model, 2, make_spec("audio", {8, 9}), 3, 7);
  run_mini_task(model, 3, make_spec("image", {4, 5}), 4, 7);

  std::vector<float> audio_head = model.state("audio").head_delta.data();
  std::vector<float> image_head = model.state("image").head_delta.data();
  RngStream rng(7, "realign");
  RealignReport rep = model.realign_heads("image", rng);
  CHECK(rep.applicable);
  CHECK(rep.class_count == 4);
  if (rep.applied) {
    CHECK(rep.accuracy_after >= rep.accuracy_before);
    CHECK_FALSE(same_bytes(model.state("image").head_delta.data(), image_head));
  } else {
    CHECK(same_bytes(model.state("image").head_delta.data(), image_head));
  }
  CHECK(same_bytes(model.state("audio").head_delta.data(), audio_head));

  // Determinism: an identical model replays to the identical decision.
  CommModel twin(&shared_backbone(), fast_config(false));
  run_mini_task(twin, 1, make_spec("image", {0, 1}), 4, 7);
  run_mini_task(twin, 2, make_spec("audio", {8, 9}), 3, 7);
  run_mini_task(twin, 3, make_spec("image", {4, 5}), 4, 7);
  RngStream rng_twin(7, "realign");
  RealignReport rep_twin = twin.realign_heads("image", rng_twin);
  CHECK(rep_twin.applied == rep.applied);
  CHECK(rep_twin.accuracy_after == doctest::Approx(rep.accuracy_after));
  CHECK(same_bytes(twin.state("image").head_delta.data(),
                   model.state("image").head_delta.data()));
}

TEST_CASE("class statistics survive a save/load cycle per registered class") {
  CommModel model(&shared_backbone(), fast_config(false));
  run_mini_task(model, 1, make_spec("image", {0, 1}), 2, 8);
  run_mini_task(model, 2, make_spec("image", {4, 5}), 2, 8);
  std::string path = (std::filesystem::temp_directory_path() / "comm_missing.ckpt").string();
  model.save(path);
  CommModel loaded(&shared_backbone(), fast_config(false));
  loaded.load(path);
  std::filesystem::remove(path);
  CHECK(loaded.state("image").class_stats.size() == 4);

  // A reloaded model can run head re-alignment off those statistics alone.
  RngStream rng(8, "realign");
  RealignReport rep = loaded.realign_heads("image", rng);
  CHECK(rep.applicable);
  CHECK(rep.class_count == 4);
}

TEST_CASE("gate determinism: same statistics and seed give identical weights") {
  CommModel a(&shared_backbone(), fast_config(true));
  CommModel b(&shared_backbone(), fast_config(true));
  for (CommModel* m : {&a, &b}) {
    m->observe_raw_features("image", class_batch("image", 0, 6));
    m->observe_raw_features("audio", class_batch("audio", 8, 6));
    RngStream rng(99, "gate");
    m->train_gate(rng);
  }
  CHECK(same_bytes(a.gate().weight.value.data(), b.gate().weight.value.data()));
  CHECK(same_bytes(a.gate().bias.value.data(), b.gate().bias.value.data()));
}

TEST_CASE("parameter accounting grows only with new modalities") {
  CommModel model(&shared_backbone(), fast_config(false));
  CHECK(model.parameter_count().trainable == 0);
  CHECK(model.parameter_count().accumulated == 0);

  run_mini_task(model, 1, make_spec("image", {0, 1}), 2, 9);
  long long after_one = model.parameter_count().accumulated;
  CHECK(after_one > 0);

  run_mini_task(model, 2, make_spec("image", {4, 5}), 2, 9);
  CHECK(model.parameter_count().accumulated == after_one);  // same modality

  run_mini_task(model, 3, make_spec("audio", {8, 9}), 2, 9);
  long long after_two = model.parameter_count().accumulated;
  CHECK(after_two == 2 * after_one);  // one more ledger + stats + gate column

  const auto& ec = shared_backbone().config().encoder;
  const auto& bc = shared_backbone().config();
  TaskSpec spec = make_spec("image", {6});
  model.begin_task(4, spec);
  long long prompt = static_cast<long long>(ec.prompt_depth) * ec.prompt_len * ec.d_model;
  long long expect = 2 * prompt + static_cast<long long>(ec.d_model) * 4 + 4LL * bc.d_joint;
  CHECK(model.parameter_count().trainable == expect);
}

TEST_CASE("checkpoint round trip restores the learner state exactly") {
  CommModel model(&shared_backbone(), fast_config(true));
  run_mini_task(model, 1, make_spec("image", {0, 1}), 3, 10);
  run_mini_task(model, 2, make_spec("audio", {8, 9}), 3, 10);
  run_mini_task(model, 3, make_spec("image", {4, 5}), 3, 10);
  RngStream rng(10, "realign");
  model.realign_heads("image", rng);

  std::string path = (std::filesystem::temp_directory_path() / "comm_roundtrip.ckpt").string();
  model.save(path);
  CommModel loaded(&shared_backbone(), fast_config(true));
  loaded.load(path);
  std::filesystem::remove(path);

  CHECK(loaded.modalities() == model.modalities());
  for (const std::string& m : model.modalities()) {
    const ModalityState& src = model.state(m);
    const ModalityState& dst = loaded.state(m);
    CHECK(same_bytes(src.P_bar->data(), dst.P_bar->data()));
    CHECK(same_bytes(src.Q_bar->data(), dst.Q_bar->data()));
    CHECK(same_bytes(src.head_delta.data(), dst.head_delta.data()));
    CHECK(src.raw_stats.count == dst.raw_stats.count);
    CHECK(src.raw_stats.mean == dst.raw_stats.mean);  // exact doubles
    CHECK(src.raw_stats.cov == dst.raw_stats.cov);
    CHECK(src.registry.size() == dst.registry.size());
    for (std::size_t i = 0; i < src.registry.size(); ++i) {
      CHECK(src.registry[i].class_id == dst.registry[i].class_id);
      CHECK(src.registry[i].text == dst.registry[i].text);
      CHECK(src.registry[i].step == dst.registry[i].step);
    }
    for (const auto& [cid, gm] : src.class_stats) {
      const GaussianModel& lg = dst.class_stats.at(cid);
      CHECK(gm.count == lg.count);
      CHECK(gm.mean == lg.mean);
      CHECK(gm.cov == lg.cov);
    }
  }
  CHECK(same_bytes(model.gate().weight.value.data(), loaded.gate().weight.value.data()));

  Tensor src_text = model.registered_text_embeddings("image");
  Tensor dst_text = loaded.registered_text_embeddings("image");
  CHECK(same_bytes(src_text.data(), dst_text.data()));
}

TEST_CASE("statistics routing picks the modality whose cloud fits best") {
  CommModel model(&shared_backbone(), fast_config(true));
  Tensor xi = class_batch("image", 0, 8);
  Tensor xa = class_batch("audio", 8, 8);
  model.observe_raw_features("image", xi);
  model.observe_raw_features("audio", xa);

  Tensor fi = shared_backbone().encode_modality(xi, nullptr, PromptMode::Eval);
  auto routes = model.nearest_modality_by_stats(fi);
  REQUIRE(routes.size() == 8);
  int hits = 0;
  for (const auto& r : routes) hits += (r == "image") ? 1 : 0;
  CHECK(hits >= 6);
}
