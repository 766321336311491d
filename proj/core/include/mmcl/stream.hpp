#pragma once

#include <string>
#include <vector>

#include "mmcl/world.hpp"

namespace mmcl {

enum class Scenario { Random, Shift, Simultaneous };

Scenario parse_scenario(const std::string& name);
std::string scenario_name(Scenario s);

/// One training unit: a class subset of one modality arriving at a time step.
/// Random/shift streams hold one unit per step; the simultaneous stream holds
/// one unit per modality at each step.
struct TaskUnit {
  int step = 0;  // 1-based
  std::string modality;
  std::vector<int> class_ids;
};

/// Builds the task stream for a scenario. Each modality's continual classes
/// are shuffled by a run-seeded stream and cut into contiguous subsets;
/// scenarios only differ in how those subsets are scheduled. `reversed`
/// replays the same units with the step order inverted.
std::vector<TaskUnit> build_stream(const World& world, Scenario scenario,
                                   std::uint64_t run_seed, bool reversed = false);

int stream_step_count(const std::vector<TaskUnit>& units);

}  // namespace mmcl
