#pragma once

#include <string>
#include <vector>

#include "mmcl/tensor.hpp"

namespace mmcl {

/// One training unit as it entered the evaluation matrix.
struct TaskRecord {
  int index = 0;  // 0-based arrival order
  int step = 0;   // 1-based time step at which it was trained
  std::string modality;
  std::vector<int> class_ids;
};

/// Lower-triangular accuracy record: rows[t-1][j] is the accuracy on task
/// j's test set measured after finishing time step t, defined for every task
/// trained at a step <= t. With one task per step this is the classic
/// triangle; simultaneous arrivals put several tasks into the same row.
struct AccuracyMatrix {
  std::vector<TaskRecord> tasks;
  std::vector<std::vector<float>> rows;

  int step_count() const { return static_cast<int>(rows.size()); }
  int tasks_through_step(int t) const;  // tasks trained at steps 1..t
  /// Throws UsageError unless every row covers exactly the tasks trained by
  /// its step and all entries sit in [0, 1].
  void validate() const;
};

struct MetricTriple {
  float aia = 0.0f;
  float faa = 0.0f;
  float forgetting = 0.0f;
  /// False when no task has both a pre-final and a final measurement
  /// (e.g. a single task, or a modality that only ever saw one step);
  /// `forgetting` is reported as 0 in that case.
  bool forgetting_defined = false;
};

struct ModalityMetrics {
  std::string modality;
  int first_step = 0;
  int task_count = 0;
  MetricTriple metrics;
};

struct MetricsReport {
  /// The three formulas over every task, windowed over all steps.
  MetricTriple global;
  /// Per-step average accuracy over the tasks seen so far (the series whose
  /// mean is global.aia and whose last entry is global.faa).
  std::vector<float> step_average;
  /// Restricted to one modality's tasks, windowed from its first task.
  std::vector<ModalityMetrics> per_modality;
  /// Unweighted mean of the per-modality numbers (table-style "overall");
  /// forgetting averages only modalities where it is defined.
  MetricTriple overall;
};

/// Derives average incremental accuracy, final average accuracy, and average
/// forgetting from a complete matrix. Throws UsageError on an incomplete or
/// out-of-range matrix.
MetricsReport compute_metrics(const AccuracyMatrix& matrix);

}  // namespace mmcl
