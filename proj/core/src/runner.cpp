#include "mmcl/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

namespace mmcl {

using ordered_json = nlohmann::ordered_json;

void validate_config(const RunConfig& cfg) {
  if (cfg.method != "comm" && cfg.method != "ft") {
    throw ConfigError("method must be 'comm' or 'ft', got '" + cfg.method + "'");
  }
  if (cfg.eval_mode != "specific" && cfg.eval_mode != "agnostic" &&
      cfg.eval_mode != "both") {
    throw ConfigError("eval_mode must be 'specific', 'agnostic', or 'both'");
  }
  if (cfg.epochs < 1 || cfg.batch_size < 1) {
    throw ConfigError("epochs and batch size must be at least 1");
  }
  if (cfg.prompt_lr <= 0.0f || cfg.gate_lr <= 0.0f || cfg.realign_lr <= 0.0f) {
    throw ConfigError("all learning rates must be positive");
  }
  if (cfg.lambda_self < 0.0f) throw ConfigError("lambda_self must be >= 0");
  if (cfg.gate_samples < 1 || cfg.gate_steps < 1) {
    throw ConfigError("gate replay size and steps must be at least 1");
  }
  if (cfg.realign_samples < 1 || cfg.realign_steps < 1) {
    throw ConfigError("re-alignment sample count and steps must be at least 1");
  }
  if (cfg.head_rank < 1) throw ConfigError("head rank must be at least 1");
}

namespace {

/// Rows `ids` of a [N, S, T, d] sample tensor as a new constant batch.
Tensor take_rows(const Tensor& pool, const std::vector<int>& ids) {
  int S = pool.dim(1), T = pool.dim(2), d = pool.dim(3);
  std::size_t stride = static_cast<std::size_t>(S) * T * d;
  std::vector<float> out;
  out.reserve(ids.size() * stride);
  for (int i : ids) {
    const float* src = pool.data().data() + static_cast<std::size_t>(i) * stride;
    out.insert(out.end(), src, src + stride);
  }
  return Tensor::from_data({static_cast<int>(ids.size()), S, T, d}, std::move(out));
}

int argmax_row(const std::vector<float>& logits, int cols, int row) {
  int best = 0;
  for (int j = 1; j < cols; ++j) {
    if (logits[static_cast<std::size_t>(row) * cols + j] >
        logits[static_cast<std::size_t>(row) * cols + best]) {
      best = j;
    }
  }
  return best;
}

/// Candidate bookkeeping shared by both eval modes: per-modality text
/// embeddings and heads, plus the pooled union for the agnostic mode.
/// Agnostic scoring runs one modality's whole pipeline per sample, so the
/// union candidate list is embedded once per modality under that modality's
/// accumulated text prompts (`union_by_pipeline`); for the ft baseline the
/// single shared text prompt makes the per-modality blocks reusable as-is.
struct EvalContext {
  std::vector<std::string> mods;                        // first-encounter order
  std::map<std::string, Tensor> texts;                  // [R_m, d_joint]
  std::map<std::string, Tensor> heads;                  // [d_model, d_joint]
  std::map<std::string, std::map<int, int>> local_row;  // class id -> registry row
  std::map<std::string, int> union_offset;              // modality -> first union row
  Tensor union_texts;                                   // [sum R_m, d_joint]
  std::map<std::string, Tensor> union_by_pipeline;      // [sum R_m, d_joint] each

  void finish_union() {
    std::vector<Tensor> blocks;
    int offset = 0;
    for (const std::string& m : mods) {
      union_offset[m] = offset;
      offset += texts.at(m).dim(0);
      blocks.push_back(texts.at(m));
    }
    union_texts = ops::concat(blocks, 0);
  }
};

EvalContext comm_context(const CommModel& model) {
  EvalContext ctx;
  std::vector<std::vector<int>> union_tokens;
  for (const std::string& m : model.modalities()) {
    if (model.state(m).registry.empty()) continue;
    ctx.mods.push_back(m);
    ctx.texts[m] = model.registered_text_embeddings(m);
    ctx.heads[m] = model.effective_head(m);
    auto& rows = ctx.local_row[m];
    const auto& reg = model.state(m).registry;
    for (std::size_t r = 0; r < reg.size(); ++r) {
      rows[reg[r].class_id] = static_cast<int>(r);
      union_tokens.push_back(reg[r].text);
    }
  }
  ctx.finish_union();
  for (const std::string& m : ctx.mods) {
    ctx.union_by_pipeline[m] = model.text_embeddings_under(m, union_tokens);
  }
  return ctx;
}

EvalContext ft_context(const FtModel& model) {
  EvalContext ctx;
  for (const std::string& m : model.modalities()) {
    ctx.mods.push_back(m);
    ctx.texts[m] = model.registered_text_embeddings(m);
    ctx.heads[m] = model.head();
    auto& rows = ctx.local_row[m];
    const auto& reg = model.registry(m);
    for (std::size_t r = 0; r < reg.size(); ++r) {
      rows[reg[r].class_id] = static_cast<int>(r);
    }
  }
  ctx.finish_union();
  return ctx;
}

/// Fraction of rows whose argmax equals their target.
float accuracy_of(const Tensor& logits, const std::vector<int>& targets) {
  int cols = logits.dim(1);
  int correct = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    correct += argmax_row(logits.data(), cols, static_cast<int>(i)) ==
                       targets[i]
                   ? 1
                   : 0;
  }
  return static_cast<float>(correct) / static_cast<float>(targets.size());
}

float comm_specific_task(const CommModel& model, const World& world,
                         const TaskRecord& task, bool gate_weights) {
  const Backbone& bb = model.backbone();
  const ModalityState& st = model.state(task.modality);
  std::vector<Tensor> layers = prompt_layers(*st.P_bar);
  const Tensor& texts = model.registered_text_embeddings(task.modality);
  Tensor head = model.effective_head(task.modality);
  std::map<int, int> rows;
  for (std::size_t r = 0; r < st.registry.size(); ++r) {
    rows[st.registry[r].class_id] = static_cast<int>(r);
  }
  int correct = 0, total = 0;
  for (int cid : task.class_ids) {
    const Tensor& batch = world.data(cid).test;
    Tensor feats;
    if (gate_weights && model.gate().trained) {
      ComposedPrompts comp = model.compose_prompts(batch, "");
      feats = bb.encode_modality(batch, &comp.layers, PromptMode::Eval);
    } else {
      feats = bb.encode_modality(batch, &layers, PromptMode::Eval);
    }
    Tensor logits = bb.similarity_logits(ops::matmul(feats, head), texts);
    int target = rows.at(cid);
    int cols = logits.dim(1);
    for (int i = 0; i < batch.dim(0); ++i) {
      correct += argmax_row(logits.data(), cols, i) == target ? 1 : 0;
      ++total;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(total);
}

float comm_agnostic_task(const CommModel& model, const World& world,
                         const TaskRecord& task, const EvalContext& ctx) {
  const Backbone& bb = model.backbone();
  int correct = 0, total = 0;
  for (int cid : task.class_ids) {
    const Tensor& batch = world.data(cid).test;
    int n = batch.dim(0);
    Tensor feats;
    std::vector<std::string> chosen(static_cast<std::size_t>(n));
    if (model.gate().trained) {
      ComposedPrompts comp = model.compose_prompts(batch, "");
      feats = bb.encode_modality(batch, &comp.layers, PromptMode::Eval);
      int k = static_cast<int>(comp.order.size());
      for (int i = 0; i < n; ++i) {
        chosen[static_cast<std::size_t>(i)] =
            comp.order[static_cast<std::size_t>(argmax_row(comp.weights, k, i))];
      }
    } else {
      // No gate was ever trained: route each sample to the modality whose
      // raw feature statistics it fits best, then use that exact ledger.
      Tensor raw = bb.encode_modality(batch, nullptr, PromptMode::Eval);
      chosen = model.nearest_modality_by_stats(raw);
      std::map<std::string, std::vector<int>> groups;
      for (int i = 0; i < n; ++i) groups[chosen[static_cast<std::size_t>(i)]].push_back(i);
      int d_model = bb.config().encoder.d_model;
      std::vector<float> assembled(static_cast<std::size_t>(n) * d_model);
      for (const auto& [m, idx] : groups) {
        const ModalityState& st = model.state(m);
        if (!st.P_bar.has_value()) {
          throw DataError("agnostic routing picked modality '" + m +
                          "' which has no accumulated prompts");
        }
        std::vector<Tensor> layers = prompt_layers(*st.P_bar);
        Tensor sub = bb.encode_modality(take_rows(batch, idx), &layers, PromptMode::Eval);
        for (std::size_t g = 0; g < idx.size(); ++g) {
          std::copy_n(sub.data().begin() + static_cast<std::ptrdiff_t>(g) * d_model,
                      d_model,
                      assembled.begin() +
                          static_cast<std::ptrdiff_t>(idx[g]) * d_model);
        }
      }
      feats = Tensor::from_data({n, d_model}, std::move(assembled));
    }

    // Logits against the union once per pipeline that any sample routed to:
    // the routed modality supplies both the head and the text embeddings of
    // every candidate name.
    std::map<std::string, Tensor> logits_by_head;
    for (int i = 0; i < n; ++i) {
      const std::string& m = chosen[static_cast<std::size_t>(i)];
      if (logits_by_head.count(m) == 0) {
        logits_by_head[m] = bb.similarity_logits(ops::matmul(feats, ctx.heads.at(m)),
                                                 ctx.union_by_pipeline.at(m));
      }
    }
    int target = ctx.union_offset.at(task.modality) +
                 ctx.local_row.at(task.modality).at(cid);
    int cols = ctx.union_texts.dim(0);
    for (int i = 0; i < n; ++i) {
      const Tensor& logits = logits_by_head.at(chosen[static_cast<std::size_t>(i)]);
      correct += argmax_row(logits.data(), cols, i) == target ? 1 : 0;
      ++total;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(total);
}

float ft_task(const FtModel& model, const World& world, const TaskRecord& task,
              const EvalContext& ctx, EvalMode mode) {
  const Backbone& bb = model.backbone();
  std::vector<Tensor> layers = model.prompt_layers_modality();
  const Tensor& texts = mode == EvalMode::Specific ? ctx.texts.at(task.modality)
                                                   : ctx.union_texts;
  int base = mode == EvalMode::Specific ? 0 : ctx.union_offset.at(task.modality);
  int correct = 0, total = 0;
  for (int cid : task.class_ids) {
    const Tensor& batch = world.data(cid).test;
    Tensor feats = bb.encode_modality(batch, &layers, PromptMode::Eval);
    Tensor logits = bb.similarity_logits(ops::matmul(feats, model.head()), texts);
    int target = base + ctx.local_row.at(task.modality).at(cid);
    int cols = logits.dim(1);
    for (int i = 0; i < batch.dim(0); ++i) {
      correct += argmax_row(logits.data(), cols, i) == target ? 1 : 0;
      ++total;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(total);
}

}  // namespace

std::vector<float> evaluate_tasks(const CommModel& model, const World& world,
                                  const std::vector<TaskRecord>& tasks, EvalMode mode,
                                  bool gate_weights_in_specific) {
  std::vector<float> out;
  out.reserve(tasks.size());
  if (mode == EvalMode::Specific) {
    for (const TaskRecord& task : tasks) {
      out.push_back(comm_specific_task(model, world, task, gate_weights_in_specific));
    }
  } else {
    EvalContext ctx = comm_context(model);
    for (const TaskRecord& task : tasks) {
      out.push_back(comm_agnostic_task(model, world, task, ctx));
    }
  }
  return out;
}

std::vector<float> evaluate_tasks(const FtModel& model, const World& world,
                                  const std::vector<TaskRecord>& tasks, EvalMode mode) {
  EvalContext ctx = ft_context(model);
  std::vector<float> out;
  out.reserve(tasks.size());
  for (const TaskRecord& task : tasks) {
    out.push_back(ft_task(model, world, task, ctx, mode));
  }
  return out;
}

RunResult run_experiment(Backbone& backbone, const World& world,
                         const std::vector<TaskUnit>& stream, const RunConfig& cfg) {
  return run_experiment(backbone, world, stream, cfg, nullptr);
}

RunResult run_experiment(Backbone& backbone, const World& world,
                         const std::vector<TaskUnit>& stream, const RunConfig& cfg,
                         std::string* fault_out) {
  validate_config(cfg);
  if (fault_out) fault_out->clear();
  if (!backbone.frozen()) {
    throw UsageError("the backbone must be pretrained and frozen before a run");
  }
  if (stream.empty()) throw UsageError("empty task stream");

  bool want_specific = cfg.eval_mode != "agnostic";
  bool want_agnostic = cfg.eval_mode != "specific";

  std::optional<CommModel> comm;
  std::optional<FtModel> ft;
  if (cfg.method == "comm") {
    CommConfig cc;
    cc.seed = cfg.seed;
    cc.lambda_self = cfg.self_reg ? cfg.lambda_self : 0.0f;
    cc.head_rank = cfg.head_rank;
    cc.prompt_lr = cfg.prompt_lr;
    cc.gate_steps = cfg.gate_steps;
    cc.gate_lr = cfg.gate_lr;
    cc.gate_samples = cfg.gate_samples;
    cc.realign_steps = cfg.realign_steps;
    cc.realign_lr = cfg.realign_lr;
    cc.realign_samples = cfg.realign_samples;
    cc.use_gate = cfg.cross;
    comm.emplace(&backbone, cc);
  } else {
    ft.emplace(&backbone, FtConfig{cfg.seed, cfg.prompt_lr});
  }

  int T = stream_step_count(stream);
  std::vector<std::vector<const TaskUnit*>> by_step(static_cast<std::size_t>(T) + 1);
  for (const TaskUnit& u : stream) {
    if (u.step < 1 || u.step > T) throw UsageError("stream step out of range");
    by_step[static_cast<std::size_t>(u.step)].push_back(&u);
  }

  RngStream rng(cfg.seed, "runner");
  RunResult result;
  result.method = cfg.method;
  result.seed = cfg.seed;
  AccuracyMatrix specific_m, agnostic_m;

  using clock = std::chrono::steady_clock;
  int steps_done = 0;
  for (int t = 1; t <= T; ++t) {
    const auto& units = by_step[static_cast<std::size_t>(t)];
    if (units.empty()) throw UsageError("stream skips step " + std::to_string(t));

    std::size_t tasks_before = result.tasks.size();
    try {
    auto train_start = clock::now();
    if (comm) {
      for (const TaskUnit* u : units) {
        std::vector<Tensor> trains;
        for (int cid : u->class_ids) trains.push_back(world.data(cid).train);
        comm->observe_raw_features(u->modality, ops::concat(trains, 0));
      }
      if (cfg.cross) {
        RngStream gate_rng = rng.child("gate/" + std::to_string(t));
        comm->train_gate(gate_rng);
      }
    }

    long long trainable = 0;
    for (const TaskUnit* u : units) {
      TaskSpec spec;
      spec.modality = u->modality;
      spec.class_ids = u->class_ids;
      for (int cid : u->class_ids) spec.class_text.push_back(world.class_info(cid).text);

      if (comm) {
        comm->begin_task(t, spec);
        trainable = comm->parameter_count().trainable;
      } else {
        ft->begin_task(t, spec);
        trainable = ft->parameter_count().trainable;
      }

      std::vector<Tensor> trains;
      std::vector<int> labels;
      for (std::size_t c = 0; c < u->class_ids.size(); ++c) {
        const Tensor& train = world.data(u->class_ids[c]).train;
        trains.push_back(train);
        labels.insert(labels.end(), static_cast<std::size_t>(train.dim(0)),
                      static_cast<int>(c));
      }
      Tensor pool = ops::concat(trains, 0);
      int n = pool.dim(0);

      for (int e = 0; e < cfg.epochs; ++e) {
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        RngStream shuffle_rng = rng.child("shuffle/" + std::to_string(t) + "/" +
                                          u->modality + "/" + std::to_string(e));
        shuffle_rng.shuffle(order);
        for (int at = 0; at < n; at += cfg.batch_size) {
          int len = std::min(cfg.batch_size, n - at);
          std::vector<int> ids(order.begin() + at, order.begin() + at + len);
          std::vector<int> batch_labels;
          batch_labels.reserve(ids.size());
          for (int i : ids) batch_labels.push_back(labels[static_cast<std::size_t>(i)]);
          Tensor batch = take_rows(pool, ids);
          try {
            if (comm) {
              comm->task_step(batch, batch_labels);
            } else {
              ft->task_step(batch, batch_labels);
            }
          } catch (const NumericFault& fault) {
            throw NumericFault("[t=" + std::to_string(t) + " modality=" + u->modality +
                               " epoch=" + std::to_string(e) + "] " + fault.what());
          }
        }
      }

      if (comm) {
        std::vector<Tensor> class_batches;
        for (int cid : u->class_ids) class_batches.push_back(world.data(cid).train);
        comm->end_task(class_batches);
        if (cfg.realign) {
          RngStream realign_rng =
              rng.child("realign/" + std::to_string(t) + "/" + u->modality);
          comm->realign_heads(u->modality, realign_rng);
        }
      } else {
        ft->end_task();
      }
      result.tasks.push_back(TaskRecord{static_cast<int>(result.tasks.size()), t,
                                        u->modality, u->class_ids});
    }

    ParamRow row;
    row.step = t;
    row.trainable = trainable;
    row.accumulated =
        comm ? comm->parameter_count().accumulated : ft->parameter_count().accumulated;
    result.params.push_back(row);
    result.train_seconds +=
        std::chrono::duration<double>(clock::now() - train_start).count();

    auto eval_start = clock::now();
    if (want_specific) {
      specific_m.rows.push_back(
          comm ? evaluate_tasks(*comm, world, result.tasks, EvalMode::Specific,
                                cfg.gate_weights_in_specific)
               : evaluate_tasks(*ft, world, result.tasks, EvalMode::Specific));
    }
    if (want_agnostic) {
      agnostic_m.rows.push_back(
          comm ? evaluate_tasks(*comm, world, result.tasks, EvalMode::Agnostic)
               : evaluate_tasks(*ft, world, result.tasks, EvalMode::Agnostic));
    }
    result.eval_seconds +=
        std::chrono::duration<double>(clock::now() - eval_start).count();
    steps_done = t;
    } catch (const NumericFault& fault) {
      // Fault-tolerant mode keeps everything measured before the faulting
      // step so callers can flush partial results.
      if (!fault_out) throw;
      *fault_out = fault.what();
      result.tasks.resize(tasks_before);
      result.params.resize(static_cast<std::size_t>(steps_done));
      specific_m.rows.resize(static_cast<std::size_t>(steps_done));
      agnostic_m.rows.resize(static_cast<std::size_t>(steps_done));
      break;
    }
  }

  if (want_specific && steps_done == 0) want_specific = false;
  if (want_agnostic && steps_done == 0) want_agnostic = false;
  if (want_specific) {
    specific_m.tasks = result.tasks;
    result.specific = EvalResult{specific_m, compute_metrics(specific_m)};
  }
  if (want_agnostic) {
    agnostic_m.tasks = result.tasks;
    result.agnostic = EvalResult{agnostic_m, compute_metrics(agnostic_m)};
  }
  return result;
}

std::string accuracy_matrix_csv(const AccuracyMatrix& matrix) {
  std::string out = "t,j,modality,accuracy\n";
  char buf[64];
  for (int t = 1; t <= matrix.step_count(); ++t) {
    const auto& row = matrix.rows[static_cast<std::size_t>(t - 1)];
    for (std::size_t j = 0; j < row.size(); ++j) {
      std::snprintf(buf, sizeof(buf), "%d,%zu,%s,%.9g\n", t, j + 1,
                    matrix.tasks[j].modality.c_str(), static_cast<double>(row[j]));
      out += buf;
    }
  }
  return out;
}

std::string params_csv(const std::vector<ParamRow>& params) {
  std::string out = "t,trainable,total\n";
  char buf[96];
  for (const ParamRow& row : params) {
    std::snprintf(buf, sizeof(buf), "%d,%lld,%lld\n", row.step, row.trainable,
                  row.accumulated);
    out += buf;
  }
  return out;
}

namespace {

ordered_json triple_json(const MetricTriple& m) {
  ordered_json out;
  out["aia"] = m.aia;
  out["faa"] = m.faa;
  out["forgetting"] = m.forgetting;
  out["forgetting_defined"] = m.forgetting_defined;
  return out;
}

ordered_json eval_json(const EvalResult& eval) {
  ordered_json out;
  out["step_average"] = eval.metrics.step_average;
  out["global"] = triple_json(eval.metrics.global);
  ordered_json mods = ordered_json::array();
  for (const ModalityMetrics& mm : eval.metrics.per_modality) {
    ordered_json one;
    one["modality"] = mm.modality;
    one["first_step"] = mm.first_step;
    one["task_count"] = mm.task_count;
    one["aia"] = mm.metrics.aia;
    one["faa"] = mm.metrics.faa;
    one["forgetting"] = mm.metrics.forgetting;
    one["forgetting_defined"] = mm.metrics.forgetting_defined;
    mods.push_back(one);
  }
  out["per_modality"] = mods;
  out["overall"] = triple_json(eval.metrics.overall);
  return out;
}

}  // namespace

std::string metrics_json(const RunResult& result) {
  ordered_json out;
  out["method"] = result.method;
  out["seed"] = result.seed;
  ordered_json tasks = ordered_json::array();
  for (const TaskRecord& task : result.tasks) {
    ordered_json one;
    one["index"] = task.index + 1;
    one["step"] = task.step;
    one["modality"] = task.modality;
    one["class_ids"] = task.class_ids;
    tasks.push_back(one);
  }
  out["tasks"] = tasks;
  ordered_json params = ordered_json::array();
  for (const ParamRow& row : result.params) {
    ordered_json one;
    one["step"] = row.step;
    one["trainable"] = row.trainable;
    one["total"] = row.accumulated;
    params.push_back(one);
  }
  out["params"] = params;
  out["specific"] = result.specific ? eval_json(*result.specific) : ordered_json();
  out["agnostic"] = result.agnostic ? eval_json(*result.agnostic) : ordered_json();
  return out.dump(2) + "\n";
}

void write_artifacts(const RunResult& result, const std::string& dir) {
  std::filesystem::create_directories(dir);
  auto write_text = [&](const std::string& name, const std::string& content) {
    std::ofstream out(std::filesystem::path(dir) / name, std::ios::binary);
    if (!out) throw DataError("cannot write artifact '" + name + "' in " + dir);
    out << content;
  };
  if (result.specific) {
    write_text("accuracy_matrix.csv", accuracy_matrix_csv(result.specific->matrix));
  }
  if (result.agnostic) {
    write_text("accuracy_matrix_agnostic.csv",
               accuracy_matrix_csv(result.agnostic->matrix));
  }
  write_text("params.csv", params_csv(result.params));
  write_text("metrics.json", metrics_json(result));
}

}  // namespace mmcl
