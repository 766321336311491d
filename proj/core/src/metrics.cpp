#include "mmcl/metrics.hpp"

#include <algorithm>

namespace mmcl {

int AccuracyMatrix::tasks_through_step(int t) const {
  int n = 0;
  for (const auto& task : tasks) n += task.step <= t ? 1 : 0;
  return n;
}

void AccuracyMatrix::validate() const {
  int T = step_count();
  if (T == 0 || tasks.empty()) throw UsageError("accuracy matrix is empty");
  for (std::size_t j = 0; j < tasks.size(); ++j) {
    const TaskRecord& task = tasks[j];
    if (task.step < 1 || task.step > T) {
      throw UsageError("task " + std::to_string(j) + " trained at step " +
                       std::to_string(task.step) + " outside 1.." + std::to_string(T));
    }
    if (j > 0 && task.step < tasks[j - 1].step) {
      throw UsageError("accuracy matrix tasks must be in arrival order");
    }
  }
  for (int t = 1; t <= T; ++t) {
    int expect = tasks_through_step(t);
    int got = static_cast<int>(rows[static_cast<std::size_t>(t - 1)].size());
    if (got != expect) {
      throw UsageError("row for step " + std::to_string(t) + " holds " +
                       std::to_string(got) + " entries, expected " +
                       std::to_string(expect));
    }
    for (float a : rows[static_cast<std::size_t>(t - 1)]) {
      if (!(a >= 0.0f && a <= 1.0f)) {
        throw UsageError("accuracy entries must lie in [0, 1]");
      }
    }
  }
}

namespace {

/// The three formulas over the tasks selected by `keep`, with the step
/// window starting at the earliest kept task. Assumes a validated matrix.
MetricTriple triple_over(const AccuracyMatrix& m, const std::vector<bool>& keep,
                         std::vector<float>* step_average) {
  int T = m.step_count();
  int start = T + 1;
  for (std::size_t j = 0; j < m.tasks.size(); ++j) {
    if (keep[j]) start = std::min(start, m.tasks[j].step);
  }
  if (start > T) throw UsageError("metric window selects no tasks");

  MetricTriple out;
  double aia_acc = 0.0;
  int windows = 0;
  for (int t = start; t <= T; ++t) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t j = 0; j < m.tasks.size(); ++j) {
      if (!keep[j] || m.tasks[j].step > t) continue;
      sum += m.rows[static_cast<std::size_t>(t - 1)][j];
      ++n;
    }
    float a_t = static_cast<float>(sum / n);
    if (step_average != nullptr) step_average->push_back(a_t);
    aia_acc += a_t;
    ++windows;
    if (t == T) out.faa = a_t;
  }
  out.aia = static_cast<float>(aia_acc / windows);

  // Forgetting: peak accuracy before the final step minus final accuracy,
  // averaged over tasks that have at least one pre-final measurement.
  double f_acc = 0.0;
  int f_n = 0;
  for (std::size_t j = 0; j < m.tasks.size(); ++j) {
    if (!keep[j] || m.tasks[j].step > T - 1) continue;
    float peak = 0.0f;
    for (int l = m.tasks[j].step; l <= T - 1; ++l) {
      peak = std::max(peak, m.rows[static_cast<std::size_t>(l - 1)][j]);
    }
    f_acc += peak - m.rows[static_cast<std::size_t>(T - 1)][j];
    ++f_n;
  }
  if (f_n > 0) {
    out.forgetting = static_cast<float>(f_acc / f_n);
    out.forgetting_defined = true;
  }
  return out;
}

}  // namespace

MetricsReport compute_metrics(const AccuracyMatrix& matrix) {
  matrix.validate();
  MetricsReport report;

  std::vector<bool> all(matrix.tasks.size(), true);
  report.global = triple_over(matrix, all, &report.step_average);

  std::vector<std::string> modality_order;
  for (const auto& task : matrix.tasks) {
    if (std::find(modality_order.begin(), modality_order.end(), task.modality) ==
        modality_order.end()) {
      modality_order.push_back(task.modality);
    }
  }
  double aia_sum = 0.0, faa_sum = 0.0, f_sum = 0.0;
  int f_defined = 0;
  for (const std::string& m : modality_order) {
    std::vector<bool> keep(matrix.tasks.size(), false);
    ModalityMetrics mm;
    mm.modality = m;
    mm.first_step = matrix.step_count() + 1;
    for (std::size_t j = 0; j < matrix.tasks.size(); ++j) {
      if (matrix.tasks[j].modality != m) continue;
      keep[j] = true;
      ++mm.task_count;
      mm.first_step = std::min(mm.first_step, matrix.tasks[j].step);
    }
    mm.metrics = triple_over(matrix, keep, nullptr);
    aia_sum += mm.metrics.aia;
    faa_sum += mm.metrics.faa;
    if (mm.metrics.forgetting_defined) {
      f_sum += mm.metrics.forgetting;
      ++f_defined;
    }
    report.per_modality.push_back(std::move(mm));
  }
  int k = static_cast<int>(modality_order.size());
  report.overall.aia = static_cast<float>(aia_sum / k);
  report.overall.faa = static_cast<float>(faa_sum / k);
  if (f_defined > 0) {
    report.overall.forgetting = static_cast<float>(f_sum / f_defined);
    report.overall.forgetting_defined = true;
  }
  return report;
}

}  // namespace mmcl
