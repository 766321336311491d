#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "mmcl/pretrain.hpp"
#include "mmcl/runner.hpp"

using namespace mmcl;

namespace {

AccuracyMatrix oracle_matrix() {
  AccuracyMatrix m;
  m.tasks = {TaskRecord{0, 1, "image", {0, 1}},
             TaskRecord{1, 2, "audio", {8, 9}},
             TaskRecord{2, 3, "depth", {16, 17}}};
  m.rows = {{0.9f}, {0.8f, 0.7f}, {0.6f, 0.5f, 0.9f}};
  return m;
}

WorldConfig runner_world_config() {
  WorldConfig wc;
  wc.seed = 4242;
  wc.d_model = 16;
  wc.modalities = {{"image", 1, 4}, {"audio", 2, 4}};
  wc.cl_classes_per_modality = 4;
  wc.pretrain_classes_per_modality = 4;
  wc.train_per_class = 24;
  wc.test_per_class = 6;
  wc.pretrain_train_per_class = 24;
  wc.pretrain_held_per_class = 8;
  wc.subsets = 2;
  wc.vocab_size = 24;
  wc.text_len = 3;
  return wc;
}

BackboneConfig runner_backbone_config() {
  BackboneConfig bc;
  bc.encoder.d_model = 16;
  bc.encoder.num_layers = 2;
  bc.encoder.num_heads = 2;
  bc.encoder.mlp_hidden = 24;
  bc.encoder.prompt_len = 2;
  bc.encoder.prompt_depth = 2;
  bc.tokens_per_slice = 4;
  bc.vocab_size = 24;
  bc.text_len = 3;
  bc.d_joint = 16;
  bc.modalities = {"image", "audio"};
  return bc;
}

const World& fixture_world() {
  static World world(runner_world_config());
  return world;
}

/// Pretrained frozen backbone, cached on disk across test runs.
Backbone& fixture_backbone() {
  static Backbone backbone = [] {
    Backbone bb(runner_backbone_config(), 2024);
    PretrainConfig pc;
    pc.seed = 11;
    pc.max_steps = 1500;
    pc.eval_every = 25;
    PretrainReport report;
    ensure_pretrained(bb, fixture_world(), pc, "pretrain_cache", &report);
    REQUIRE(report.retrieval >= 0.9f);
    return bb;
  }();
  return backbone;
}

RunConfig small_run_config(const std::string& method) {
  RunConfig cfg;
  cfg.method = method;
  cfg.epochs = 4;
  cfg.batch_size = 8;
  cfg.gate_steps = 60;
  cfg.gate_samples = 24;
  cfg.realign_steps = 30;
  cfg.realign_samples = 6;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST_CASE("metric formulas reproduce the hand-worked three-task example") {
  MetricsReport rep = compute_metrics(oracle_matrix());
  CHECK(rep.global.aia == doctest::Approx(0.7722).epsilon(1e-4));
  CHECK(rep.global.faa == doctest::Approx(0.6667).epsilon(1e-4));
  CHECK(rep.global.forgetting == doctest::Approx(0.25).epsilon(1e-4));
  CHECK(rep.global.forgetting_defined);
  REQUIRE(rep.step_average.size() == 3);
  CHECK(rep.step_average[0] == doctest::Approx(0.9));
  CHECK(rep.step_average[1] == doctest::Approx(0.75));
  CHECK(rep.step_average[2] == doctest::Approx(0.6667).epsilon(1e-4));

  // Per-modality windows start at each modality's first task.
  REQUIRE(rep.per_modality.size() == 3);
  const ModalityMetrics& first = rep.per_modality[0];
  CHECK(first.modality == "image");
  CHECK(first.first_step == 1);
  CHECK(first.metrics.aia == doctest::Approx((0.9 + 0.8 + 0.6) / 3).epsilon(1e-5));
  CHECK(first.metrics.faa == doctest::Approx(0.6));
  CHECK(first.metrics.forgetting == doctest::Approx(0.3));
  const ModalityMetrics& second = rep.per_modality[1];
  CHECK(second.metrics.aia == doctest::Approx(0.6));
  CHECK(second.metrics.forgetting == doctest::Approx(0.2));
  const ModalityMetrics& third = rep.per_modality[2];
  CHECK(third.metrics.aia == doctest::Approx(0.9));
  CHECK_FALSE(third.metrics.forgetting_defined);
  CHECK(third.metrics.forgetting == 0.0f);

  // Table-style overall: unweighted across modalities, forgetting only over
  // modalities where it exists.
  CHECK(rep.overall.aia == doctest::Approx((0.76667 + 0.6 + 0.9) / 3).epsilon(1e-4));
  CHECK(rep.overall.faa == doctest::Approx((0.6 + 0.5 + 0.9) / 3).epsilon(1e-5));
  CHECK(rep.overall.forgetting == doctest::Approx(0.25));
}

TEST_CASE("constant matrix gives flat metrics and zero forgetting") {
  AccuracyMatrix m;
  m.tasks = {TaskRecord{0, 1, "image", {0}}, TaskRecord{1, 2, "image", {1}},
             TaskRecord{2, 3, "image", {2}}};
  m.rows = {{0.42f}, {0.42f, 0.42f}, {0.42f, 0.42f, 0.42f}};
  MetricsReport rep = compute_metrics(m);
  CHECK(rep.global.aia == doctest::Approx(0.42));
  CHECK(rep.global.faa == doctest::Approx(0.42));
  CHECK(rep.global.forgetting == doctest::Approx(0.0));
  CHECK(rep.global.forgetting_defined);
  CHECK(rep.overall.aia == doctest::Approx(0.42));
}

TEST_CASE("a single task yields equal AIA and FAA with forgetting flagged off") {
  AccuracyMatrix m;
  m.tasks = {TaskRecord{0, 1, "audio", {3}}};
  m.rows = {{0.77f}};
  MetricsReport rep = compute_metrics(m);
  CHECK(rep.global.aia == doctest::Approx(0.77));
  CHECK(rep.global.faa == doctest::Approx(0.77));
  CHECK_FALSE(rep.global.forgetting_defined);
  CHECK(rep.global.forgetting == 0.0f);
  CHECK_FALSE(rep.overall.forgetting_defined);
}

TEST_CASE("simultaneous arrivals share a row and the formulas still apply") {
  AccuracyMatrix m;
  m.tasks = {TaskRecord{0, 1, "image", {0}}, TaskRecord{1, 1, "audio", {8}},
             TaskRecord{2, 2, "image", {1}}};
  m.rows = {{0.8f, 0.6f}, {0.7f, 0.5f, 0.9f}};
  MetricsReport rep = compute_metrics(m);
  CHECK(rep.global.aia == doctest::Approx(0.7));
  CHECK(rep.global.faa == doctest::Approx(0.7));
  CHECK(rep.global.forgetting == doctest::Approx(0.1));
}

TEST_CASE("malformed matrices are rejected") {
  AccuracyMatrix short_row = oracle_matrix();
  short_row.rows[2].pop_back();
  CHECK_THROWS_AS(compute_metrics(short_row), UsageError);

  AccuracyMatrix bad_value = oracle_matrix();
  bad_value.rows[0][0] = 1.5f;
  CHECK_THROWS_AS(compute_metrics(bad_value), UsageError);

  AccuracyMatrix out_of_order = oracle_matrix();
  std::swap(out_of_order.tasks[0], out_of_order.tasks[2]);
  CHECK_THROWS_AS(compute_metrics(out_of_order), UsageError);

  AccuracyMatrix empty;
  CHECK_THROWS_AS(compute_metrics(empty), UsageError);
}

TEST_CASE("run configuration bounds are enforced") {
  RunConfig cfg;
  cfg.method = "magic";
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = RunConfig{};
  cfg.eval_mode = "sometimes";
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = RunConfig{};
  cfg.prompt_lr = 0.0f;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = RunConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  cfg = RunConfig{};
  cfg.lambda_self = -0.1f;
  CHECK_THROWS_AS(validate_config(cfg), ConfigError);
  CHECK_NOTHROW(validate_config(RunConfig{}));
}

TEST_CASE("pretraining reaches the retrieval floor and caches deterministically") {
  Backbone& bb = fixture_backbone();
  CHECK(bb.frozen());
  CHECK(pretrain_retrieval(bb, fixture_world()) >= 0.9f);

  // Second resolution from the cache: no training steps, same weights.
  Backbone again(runner_backbone_config(), 2024);
  PretrainConfig pc;
  pc.seed = 11;
  pc.max_steps = 1500;
  pc.eval_every = 25;
  PretrainReport report;
  std::string path = ensure_pretrained(again, fixture_world(), pc, "pretrain_cache", &report);
  CHECK(report.steps_run == 0);
  CHECK(std::filesystem::exists(path));
  CHECK(again.weight_hash() == bb.weight_hash());
}

TEST_CASE("joint training on one modality's full class set is learnable") {
  // All continual classes of one modality in a single task: establishes the
  // data itself supports >= 0.9 accuracy, so later forgetting is caused by
  // the task sequence rather than the generator.
  Backbone& bb = fixture_backbone();
  const World& world = fixture_world();
  CommConfig cc;
  cc.seed = 9;
  cc.use_gate = false;
  CommModel model(&bb, cc);
  const std::vector<int>& classes = world.cl_classes("image");
  TaskSpec spec;
  spec.modality = "image";
  spec.class_ids = classes;
  for (int cid : classes) spec.class_text.push_back(world.class_info(cid).text);

  model.begin_task(1, spec);
  std::vector<Tensor> trains;
  std::vector<int> labels;
  for (std::size_t c = 0; c < classes.size(); ++c) {
    const Tensor& train = world.data(classes[c]).train;
    trains.push_back(train);
    labels.insert(labels.end(), static_cast<std::size_t>(train.dim(0)),
                  static_cast<int>(c));
  }
  Tensor pool = ops::concat(trains, 0);
  RngStream rng(9, "joint");
  int n = pool.dim(0);
  for (int e = 0; e < 10; ++e) {
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    rng.child("epoch" + std::to_string(e)).shuffle(order);
    for (int at = 0; at < n; at += 8) {
      int len = std::min(8, n - at);
      std::vector<int> ids(order.begin() + at, order.begin() + at + len);
      std::vector<float> rows;
      std::vector<int> batch_labels;
      int S = pool.dim(1), T = pool.dim(2), d = pool.dim(3);
      std::size_t stride = static_cast<std::size_t>(S) * T * d;
      for (int i : ids) {
        const float* src = pool.data().data() + static_cast<std::size_t>(i) * stride;
        rows.insert(rows.end(), src, src + stride);
        batch_labels.push_back(labels[static_cast<std::size_t>(i)]);
      }
      model.task_step(Tensor::from_data({len, S, T, d}, std::move(rows)), batch_labels);
    }
  }
  std::vector<Tensor> class_batches;
  for (int cid : classes) class_batches.push_back(world.data(cid).train);
  model.end_task(class_batches);

  TaskRecord everything{0, 1, "image", classes};
  std::vector<float> acc =
      evaluate_tasks(model, world, {everything}, EvalMode::Specific);
  REQUIRE(acc.size() == 1);
  CHECK(acc[0] >= 0.9f);
}

TEST_CASE("full accumulated-prompt run: shapes, freezing, growth, determinism") {
  Backbone& bb = fixture_backbone();
  const World& world = fixture_world();
  std::vector<TaskUnit> stream = build_stream(world, Scenario::Random, 3);
  RunConfig cfg = small_run_config("comm");

  RunResult result = run_experiment(bb, world, stream, cfg);
  REQUIRE(result.specific.has_value());
  REQUIRE(result.agnostic.has_value());
  const AccuracyMatrix& sm = result.specific->matrix;
  int T = stream_step_count(stream);
  REQUIRE(sm.step_count() == T);
  for (int t = 1; t <= T; ++t) {
    CHECK(static_cast<int>(sm.rows[static_cast<std::size_t>(t - 1)].size()) ==
          sm.tasks_through_step(t));
  }

  // Specific-mode freeze: a task of an untouched modality keeps its accuracy
  // bit-for-bit across the step.
  int frozen_checks = 0;
  for (int t = 2; t <= T; ++t) {
    std::vector<std::string> trained;
    for (const TaskUnit& u : stream) {
      if (u.step == t) trained.push_back(u.modality);
    }
    for (std::size_t j = 0; j < sm.rows[static_cast<std::size_t>(t - 2)].size(); ++j) {
      const std::string& m = sm.tasks[j].modality;
      if (std::find(trained.begin(), trained.end(), m) != trained.end()) continue;
      float prev = sm.rows[static_cast<std::size_t>(t - 2)][j];
      float now = sm.rows[static_cast<std::size_t>(t - 1)][j];
      CHECK(std::memcmp(&prev, &now, sizeof(float)) == 0);
      ++frozen_checks;
    }
  }
  CHECK(frozen_checks > 0);

  // Accumulated totals grow exactly at each modality's first step.
  std::map<std::string, int> first_step;
  for (const TaskUnit& u : stream) {
    if (first_step.count(u.modality) == 0) first_step[u.modality] = u.step;
  }
  for (std::size_t i = 1; i < result.params.size(); ++i) {
    bool new_modality = false;
    for (const auto& [m, s] : first_step) new_modality |= s == result.params[i].step;
    if (new_modality) {
      CHECK(result.params[i].accumulated > result.params[i - 1].accumulated);
    } else {
      CHECK(result.params[i].accumulated == result.params[i - 1].accumulated);
    }
    CHECK(result.params[i].trainable == result.params[0].trainable);
  }

  // With one modality and one task at step 1, identity adds nothing: the
  // agnostic and specific measurements coincide exactly.
  CHECK(result.specific->matrix.rows[0][0] == result.agnostic->matrix.rows[0][0]);

  // End-to-end determinism, byte-for-byte on the serialized report.
  RunResult replay = run_experiment(bb, world, stream, cfg);
  CHECK(metrics_json(result) == metrics_json(replay));
}

TEST_CASE("artifacts land on disk with consistent row counts") {
  Backbone& bb = fixture_backbone();
  const World& world = fixture_world();
  std::vector<TaskUnit> stream = build_stream(world, Scenario::Random, 5);
  RunConfig cfg = small_run_config("comm");
  cfg.epochs = 2;
  cfg.seed = 5;
  RunResult result = run_experiment(bb, world, stream, cfg);

  auto dir = std::filesystem::temp_directory_path() / "mmcl_artifacts_test";
  std::filesystem::remove_all(dir);
  write_artifacts(result, dir.string());
  for (const char* name :
       {"accuracy_matrix.csv", "accuracy_matrix_agnostic.csv", "metrics.json",
        "params.csv"}) {
    CHECK(std::filesystem::exists(dir / name));
  }
  std::ifstream in(dir / "accuracy_matrix.csv");
  int lines = 0;
  std::string line;
  while (std::getline(in, line)) ++lines;
  int expect = 1;  // header
  for (int t = 1; t <= result.specific->matrix.step_count(); ++t) {
    expect += result.specific->matrix.tasks_through_step(t);
  }
  CHECK(lines == expect);
  std::filesystem::remove_all(dir);
}

TEST_CASE("baseline run keeps one parameter set and still fills both modes") {
  Backbone& bb = fixture_backbone();
  const World& world = fixture_world();
  std::vector<TaskUnit> stream = build_stream(world, Scenario::Shift, 3);
  RunConfig cfg = small_run_config("ft");
  RunResult result = run_experiment(bb, world, stream, cfg);

  REQUIRE(result.specific.has_value());
  REQUIRE(result.agnostic.has_value());
  const auto& ec = runner_backbone_config().encoder;
  long long shared = 2LL * ec.prompt_depth * ec.prompt_len * ec.d_model +
                     static_cast<long long>(ec.d_model) * runner_backbone_config().d_joint;
  for (const ParamRow& row : result.params) {
    CHECK(row.trainable == shared);
    CHECK(row.accumulated == shared);
  }
  compute_metrics(result.specific->matrix);  // validates shape
}

TEST_CASE("ablation flags run end to end without a gate") {
  Backbone& bb = fixture_backbone();
  const World& world = fixture_world();
  std::vector<TaskUnit> stream = build_stream(world, Scenario::Random, 7);
  RunConfig cfg = small_run_config("comm");
  cfg.cross = false;
  cfg.self_reg = false;
  cfg.realign = false;
  cfg.epochs = 2;
  RunResult result = run_experiment(bb, world, stream, cfg);
  REQUIRE(result.agnostic.has_value());
  // The agnostic matrix is fully populated even though no gate was ever
  // trained (statistics routing takes over).
  compute_metrics(result.agnostic->matrix);
}

TEST_CASE("backbone weights never move during a continual run") {
  Backbone& bb = fixture_backbone();
  const World& world = fixture_world();
  std::uint64_t before = bb.weight_hash();
  std::vector<TaskUnit> stream = build_stream(world, Scenario::Simultaneous, 2);
  RunConfig cfg = small_run_config("comm");
  cfg.epochs = 2;
  run_experiment(bb, world, stream, cfg);
  CHECK(bb.weight_hash() == before);
}
