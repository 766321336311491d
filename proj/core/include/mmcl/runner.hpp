#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mmcl/baseline.hpp"
#include "mmcl/comm.hpp"
#include "mmcl/metrics.hpp"
#include "mmcl/stream.hpp"
#include "mmcl/world.hpp"

namespace mmcl {

/// Everything that defines one continual-learning experiment on a fixed
/// world and stream. `cross`, `self_reg`, and `realign` are the ablation
/// switches of the accumulated-prompt method; the ft baseline ignores them.
struct RunConfig {
  std::string method = "comm";  // "comm" | "ft"
  bool cross = true;
  bool self_reg = true;
  bool realign = true;
  float lambda_self = 1.0f;
  int epochs = 20;
  int batch_size = 16;
  float prompt_lr = 5e-3f;
  float gate_lr = 1e-2f;
  float realign_lr = 5e-3f;
  int gate_samples = 128;
  int gate_steps = 200;
  int realign_samples = 32;
  int realign_steps = 100;
  int head_rank = 4;
  std::string eval_mode = "both";  // "specific" | "agnostic" | "both"
  /// Use gate weights instead of a one-hot mix even when modality identity
  /// is given (off by default: identity given means the exact prompt).
  bool gate_weights_in_specific = false;
  std::uint64_t seed = 1;
};

/// Throws ConfigError on out-of-range fields.
void validate_config(const RunConfig& cfg);

enum class EvalMode { Specific, Agnostic };

struct ParamRow {
  int step = 0;
  long long trainable = 0;
  long long accumulated = 0;
};

struct EvalResult {
  AccuracyMatrix matrix;
  MetricsReport metrics;
};

struct RunResult {
  std::string method;
  std::uint64_t seed = 0;
  std::vector<TaskRecord> tasks;
  std::optional<EvalResult> specific;
  std::optional<EvalResult> agnostic;
  std::vector<ParamRow> params;
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
};

/// Accuracy on each listed task's test set at the model's current state.
/// Specific mode scores a sample against its own modality's seen classes
/// using that modality's exact accumulated prompts and head; agnostic mode
/// routes by the relevance gate (or nearest raw statistics when no gate was
/// ever trained) and scores against the union of all seen classes.
std::vector<float> evaluate_tasks(const CommModel& model, const World& world,
                                  const std::vector<TaskRecord>& tasks, EvalMode mode,
                                  bool gate_weights_in_specific = false);
std::vector<float> evaluate_tasks(const FtModel& model, const World& world,
                                  const std::vector<TaskRecord>& tasks, EvalMode mode);

/// Runs the full stream: per time step, every arriving unit is observed,
/// the gate is refreshed, each unit is trained and folded into its ledger,
/// heads are re-aligned, and both evaluation modes are measured. The
/// backbone must already be pretrained and frozen.
RunResult run_experiment(Backbone& backbone, const World& world,
                         const std::vector<TaskUnit>& stream, const RunConfig& cfg);

/// Fault-tolerant variant: a NumericFault mid-run stops training, stores the
/// fault context in `*fault_out`, and returns everything measured before the
/// faulting step (whole-step granularity) so partial results can still be
/// written. `*fault_out` is empty on clean completion. Passing nullptr
/// restores the throwing behaviour.
RunResult run_experiment(Backbone& backbone, const World& world,
                         const std::vector<TaskUnit>& stream, const RunConfig& cfg,
                         std::string* fault_out);

/// "t,j,modality,accuracy" rows, one line per matrix entry, t and j 1-based.
std::string accuracy_matrix_csv(const AccuracyMatrix& matrix);
/// "t,trainable,total" rows.
std::string params_csv(const std::vector<ParamRow>& params);
/// Full machine-readable report (method, tasks, both metric sets, parameter
/// counts). Deliberately excludes wall-clock times so identical runs produce
/// identical bytes.
std::string metrics_json(const RunResult& result);

/// Writes accuracy_matrix[_agnostic].csv, metrics.json, and params.csv into
/// `dir` (created if missing).
void write_artifacts(const RunResult& result, const std::string& dir);

}  // namespace mmcl
