#include "mmcl/stream.hpp"

#include <algorithm>
#include <map>

#include "mmcl/errors.hpp"

namespace mmcl {

Scenario parse_scenario(const std::string& name) {
  if (name == "random") return Scenario::Random;
  if (name == "shift") return Scenario::Shift;
  if (name == "simultaneous") return Scenario::Simultaneous;
  throw ConfigError("unknown scenario '" + name + "' (expected random, shift or simultaneous)");
}

std::string scenario_name(Scenario s) {
  switch (s) {
    case Scenario::Random: return "random";
    case Scenario::Shift: return "shift";
    case Scenario::Simultaneous: return "simultaneous";
  }
  throw UsageError("invalid scenario value");
}

namespace {

// Shuffled continual classes of each modality, cut into contiguous subsets.
std::vector<std::vector<std::vector<int>>> make_subsets(const World& world,
                                                        std::uint64_t run_seed) {
  const WorldConfig& cfg = world.config();
  int per_subset = cfg.cl_classes_per_modality / cfg.subsets;
  std::vector<std::vector<std::vector<int>>> out;
  for (const auto& geom : cfg.modalities) {
    std::vector<int> ids = world.cl_classes(geom.name);
    RngStream rng(run_seed, "stream/" + geom.name);
    rng.shuffle(ids);
    std::vector<std::vector<int>> subsets;
    for (int k = 0; k < cfg.subsets; ++k) {
      subsets.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(k) * per_subset,
                           ids.begin() + static_cast<std::ptrdiff_t>(k + 1) * per_subset);
    }
    out.push_back(std::move(subsets));
  }
  return out;
}

std::vector<TaskUnit> reverse_steps(std::vector<TaskUnit> units) {
  // Group by step, reverse the group order, renumber from 1.
  std::vector<std::vector<TaskUnit>> groups;
  for (TaskUnit& u : units) {
    if (groups.empty() || groups.back().front().step != u.step) groups.emplace_back();
    groups.back().push_back(std::move(u));
  }
  std::reverse(groups.begin(), groups.end());
  std::vector<TaskUnit> out;
  int step = 1;
  for (auto& g : groups) {
    for (TaskUnit& u : g) {
      u.step = step;
      out.push_back(std::move(u));
    }
    ++step;
  }
  return out;
}

}  // namespace

std::vector<TaskUnit> build_stream(const World& world, Scenario scenario,
                                   std::uint64_t run_seed, bool reversed) {
  const WorldConfig& cfg = world.config();
  auto subsets = make_subsets(world, run_seed);
  std::vector<TaskUnit> units;

  switch (scenario) {
    case Scenario::Random: {
      std::vector<int> order;
      for (std::size_t mi = 0; mi < cfg.modalities.size(); ++mi) {
        for (int k = 0; k < cfg.subsets; ++k) order.push_back(static_cast<int>(mi));
      }
      RngStream rng(run_seed, "stream/order");
      rng.shuffle(order);
      std::vector<int> next(cfg.modalities.size(), 0);
      int step = 1;
      for (int mi : order) {
        TaskUnit u;
        u.step = step++;
        u.modality = cfg.modalities[static_cast<std::size_t>(mi)].name;
        u.class_ids = subsets[static_cast<std::size_t>(mi)]
                             [static_cast<std::size_t>(next[static_cast<std::size_t>(mi)]++)];
        units.push_back(std::move(u));
      }
      break;
    }
    case Scenario::Shift: {
      int step = 1;
      for (std::size_t mi = 0; mi < cfg.modalities.size(); ++mi) {
        for (int k = 0; k < cfg.subsets; ++k) {
          TaskUnit u;
          u.step = step++;
          u.modality = cfg.modalities[mi].name;
          u.class_ids = subsets[mi][static_cast<std::size_t>(k)];
          units.push_back(std::move(u));
        }
      }
      break;
    }
    case Scenario::Simultaneous: {
      for (int k = 0; k < cfg.subsets; ++k) {
        for (std::size_t mi = 0; mi < cfg.modalities.size(); ++mi) {
          TaskUnit u;
          u.step = k + 1;
          u.modality = cfg.modalities[mi].name;
          u.class_ids = subsets[mi][static_cast<std::size_t>(k)];
          units.push_back(std::move(u));
        }
      }
      break;
    }
  }
  if (reversed) units = reverse_steps(std::move(units));
  return units;
}

int stream_step_count(const std::vector<TaskUnit>& units) {
  int n = 0;
  for (const TaskUnit& u : units) n = std::max(n, u.step);
  return n;
}

}  // namespace mmcl
