#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "config.hpp"
#include "mmcl/checkpoint.hpp"
#include "mmcl/errors.hpp"
#include "mmcl/pretrain.hpp"
#include "mmcl/runner.hpp"

#ifndef MMCL_TOOL_VERSION
#define MMCL_TOOL_VERSION "0.0.0"
#endif

namespace mmcl::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point start) {
  return std::chrono::duration<double>(clock_type::now() - start).count();
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string format4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

/// Writes through a temp file and renames into place, so a crash can never
/// leave a truncated file under the final name.
void write_file_atomic(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
    out << content;
    if (!out.good()) throw DataError("failed writing '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : text) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  parts.push_back(cur);
  return parts;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  for (const std::string& part : split(text, ',')) {
    if (part.empty()) throw ConfigError("--seed: empty entry in '" + text + "'");
    try {
      std::size_t pos = 0;
      unsigned long long v = std::stoull(part, &pos);
      if (pos != part.size()) throw std::invalid_argument(part);
      seeds.push_back(v);
    } catch (const std::exception&) {
      throw ConfigError("--seed: '" + part + "' is not a non-negative integer");
    }
  }
  std::vector<std::uint64_t> unique;
  for (std::uint64_t s : seeds)
    if (std::find(unique.begin(), unique.end(), s) == unique.end()) unique.push_back(s);
  return unique;
}

/// One ablation variant: which method components to switch off.
struct AblationSet {
  bool no_cross = false;
  bool no_self = false;
  bool no_realign = false;

  std::string tag() const {
    std::string t;
    if (no_cross) t += "_no-cross";
    if (no_self) t += "_no-self";
    if (no_realign) t += "_no-realign";
    return t;
  }
};

AblationSet parse_ablation(const std::string& text) {
  AblationSet set;
  if (text == "none" || text.empty()) return set;
  for (const std::string& part : split(text, ',')) {
    if (part == "no-cross") {
      set.no_cross = true;
    } else if (part == "no-self") {
      set.no_self = true;
    } else if (part == "no-realign") {
      set.no_realign = true;
    } else {
      throw ConfigError("--ablate: unknown component '" + part +
                        "' (expected no-cross, no-self, no-realign or none)");
    }
  }
  return set;
}

/// Bare checkpoint names live inside the output directory; anything with a
/// directory component is taken as-is.
fs::path resolve_checkpoint(const ExperimentConfig& cfg) {
  fs::path p(cfg.backbone_checkpoint);
  if (p.has_parent_path()) return p;
  return fs::path(cfg.out_dir) / p;
}

json config_snapshot(const ExperimentConfig& cfg) { return json::parse(emit_config(cfg)); }

/// The checkpoint must have been produced by this config's world, backbone
/// initialization, and pretraining recipe; otherwise results would silently
/// mix incompatible artifacts. The content key is stored in the checkpoint
/// meta at save time and recomputed here from the (still untrained) backbone.
void verify_checkpoint_key(const fs::path& path, const std::string& expected_key) {
  CheckpointReader reader(path.string());
  std::string stored;
  try {
    json meta = json::parse(reader.meta());
    if (meta.contains("cache_key")) stored = meta["cache_key"].get<std::string>();
  } catch (const json::exception&) {
    // fall through with empty `stored`
  }
  if (stored.empty())
    throw ConfigError("checkpoint '" + path.string() +
                      "' carries no recipe key; it was not written by this tool");
  if (stored != expected_key)
    throw ConfigError("checkpoint '" + path.string() +
                      "' was built from a different world/backbone/pretrain recipe (key " +
                      stored + ", expected " + expected_key + "); re-run pretrain");
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

int run_pretrain(const std::string& config_path, const std::string& out_override,
                 std::ostream& out) {
  ExperimentConfig cfg = load_config_file(config_path);
  if (!out_override.empty()) cfg.out_dir = out_override;

  World world(cfg.world);
  Backbone backbone(cfg.backbone, cfg.backbone_init_seed);
  std::string key = pretrain_cache_key(world, backbone, cfg.pretrain);

  fs::path ckpt = resolve_checkpoint(cfg);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  fs::create_directories(cfg.out_dir);

  auto start = clock_type::now();
  PretrainReport report = pretrain_backbone(backbone, world, cfg.pretrain);
  double elapsed = seconds_since(start);

  json meta;
  meta["kind"] = "backbone";
  meta["cache_key"] = key;
  meta["tool_version"] = MMCL_TOOL_VERSION;
  backbone.save(ckpt.string(), meta.dump());

  json manifest;
  manifest["kind"] = "pretrain";
  manifest["tool_version"] = MMCL_TOOL_VERSION;
  manifest["status"] = "complete";
  manifest["config"] = config_snapshot(cfg);
  manifest["world_seed"] = cfg.world.seed;
  json bb;
  bb["checkpoint"] = ckpt.string();
  bb["weight_hash"] = hex64(backbone.weight_hash());
  bb["cache_key"] = key;
  manifest["backbone"] = bb;
  json pre;
  pre["steps_run"] = report.steps_run;
  pre["final_loss"] = report.final_loss;
  pre["retrieval"] = report.retrieval;
  pre["reached_target"] = report.reached_target;
  manifest["pretrain"] = pre;
  manifest["output_dir"] = cfg.out_dir;
  manifest["artifacts"] = json::array({ckpt.string()});
  json timings;
  timings["pretrain_seconds"] = elapsed;
  manifest["timings"] = timings;
  write_file_atomic(fs::path(cfg.out_dir) / "manifest.json", manifest.dump(2) + "\n");

  out << "pretrained backbone: " << report.steps_run << " steps, loss "
      << format4(report.final_loss) << "\n";
  out << "held-out retrieval " << format4(report.retrieval) << " (floor "
      << format4(cfg.pretrain.floor) << "): ok\n";
  out << "checkpoint -> " << ckpt.string() << "\n";
  out << "manifest -> " << (fs::path(cfg.out_dir) / "manifest.json").string() << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

struct RunFlags {
  std::string config_path;
  std::string method;
  std::string scenario;
  std::string seed_list;
  std::string eval_mode;
  std::string ablate;
  std::vector<std::string> variants;
  bool reversed = false;
  std::string out_dir;
  std::string backbone_path;
  int jobs = 1;
};

struct PlannedRun {
  RunConfig run;
  std::string name;
  fs::path dir;
};

struct RunOutcome {
  std::string line;
  std::string fault;   // numeric fault context, empty when clean
  std::string error;   // unexpected error text, empty when clean
};

void execute_run(const ExperimentConfig& base, const PlannedRun& plan, Scenario scenario,
                 bool reversed, const fs::path& ckpt, const std::string& key,
                 RunOutcome& outcome) {
  auto total_start = clock_type::now();
  World world(base.world);
  Backbone backbone(base.backbone, base.backbone_init_seed);
  backbone.load(ckpt.string());
  backbone.freeze_all();

  std::vector<TaskUnit> stream = build_stream(world, scenario, plan.run.seed, reversed);

  std::string fault;
  RunResult result = run_experiment(backbone, world, stream, plan.run, &fault);
  fs::create_directories(plan.dir);
  write_artifacts(result, plan.dir.string());

  std::vector<std::string> artifacts;
  if (result.specific) artifacts.push_back("accuracy_matrix.csv");
  if (result.agnostic) artifacts.push_back("accuracy_matrix_agnostic.csv");
  artifacts.push_back("params.csv");
  artifacts.push_back("metrics.json");

  ExperimentConfig snapshot = base;
  snapshot.run = plan.run;
  snapshot.scenario = scenario_name(scenario);
  snapshot.reversed = reversed;

  json manifest;
  manifest["kind"] = "run";
  manifest["tool_version"] = MMCL_TOOL_VERSION;
  manifest["status"] = fault.empty() ? "complete" : "fault";
  if (!fault.empty()) manifest["fault"] = fault;
  manifest["config"] = config_snapshot(snapshot);
  manifest["world_seed"] = base.world.seed;
  manifest["method"] = plan.run.method;
  manifest["scenario"] = scenario_name(scenario);
  manifest["reversed"] = reversed;
  manifest["seed"] = plan.run.seed;
  json bb;
  bb["checkpoint"] = ckpt.string();
  bb["weight_hash"] = hex64(backbone.weight_hash());
  bb["cache_key"] = key;
  manifest["backbone"] = bb;
  manifest["output_dir"] = plan.dir.string();
  manifest["completed_steps"] = result.params.size();
  manifest["artifacts"] = artifacts;
  json timings;
  timings["train_seconds"] = result.train_seconds;
  timings["eval_seconds"] = result.eval_seconds;
  timings["total_seconds"] = seconds_since(total_start);
  manifest["timings"] = timings;
  write_file_atomic(plan.dir / "manifest.json", manifest.dump(2) + "\n");

  std::ostringstream line;
  if (fault.empty()) {
    const EvalResult* shown =
        result.specific ? &*result.specific : (result.agnostic ? &*result.agnostic : nullptr);
    line << "run " << plan.name << ":";
    if (shown) {
      const MetricTriple& m = shown->metrics.overall;
      line << " AIA " << format4(m.aia) << "  FAA " << format4(m.faa) << "  F "
           << (m.forgetting_defined ? format4(m.forgetting) : std::string("n/a"));
    }
    line << " -> " << plan.dir.string();
  } else {
    line << "run " << plan.name << ": NUMERIC FAULT after " << result.params.size()
         << " completed steps: " << fault << " (partial results -> " << plan.dir.string()
         << ")";
    outcome.fault = fault;
  }
  outcome.line = line.str();
}

int run_run(const RunFlags& flags, std::ostream& out, std::ostream& err) {
  ExperimentConfig cfg = load_config_file(flags.config_path);
  if (!flags.method.empty()) cfg.run.method = flags.method;
  if (!flags.scenario.empty()) cfg.scenario = flags.scenario;
  if (!flags.eval_mode.empty()) cfg.run.eval_mode = flags.eval_mode;
  if (flags.reversed) cfg.reversed = true;
  if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
  if (!flags.backbone_path.empty()) cfg.backbone_checkpoint = flags.backbone_path;
  validate_experiment_config(cfg);
  if (flags.jobs < 1) throw ConfigError("--jobs must be at least 1");

  std::vector<std::uint64_t> seeds = flags.seed_list.empty()
                                         ? std::vector<std::uint64_t>{cfg.run.seed}
                                         : parse_seed_list(flags.seed_list);

  std::vector<AblationSet> variants;
  if (flags.variants.empty()) {
    // A single --ablate names the one variant (and its directory suffix);
    // without it the config's own switches run untagged.
    variants.push_back(parse_ablation(flags.ablate));
  } else {
    std::set<std::string> seen;
    for (const std::string& v : flags.variants) {
      AblationSet set = parse_ablation(v);
      if (seen.insert(set.tag()).second) variants.push_back(set);
    }
  }

  Scenario scenario = parse_scenario(cfg.scenario);
  fs::path ckpt = resolve_checkpoint(cfg);
  if (!fs::exists(ckpt))
    throw ConfigError("backbone checkpoint '" + ckpt.string() +
                      "' not found; run the pretrain subcommand first");
  // Verify once up front so a recipe mismatch is a config error before any
  // worker starts.
  std::string key;
  {
    World world(cfg.world);
    Backbone probe(cfg.backbone, cfg.backbone_init_seed);
    key = pretrain_cache_key(world, probe, cfg.pretrain);
  }
  verify_checkpoint_key(ckpt, key);

  std::vector<PlannedRun> plan;
  for (const AblationSet& variant : variants) {
    for (std::uint64_t seed : seeds) {
      PlannedRun p;
      p.run = cfg.run;
      p.run.seed = seed;
      if (variant.no_cross) p.run.cross = false;
      if (variant.no_self) p.run.self_reg = false;
      if (variant.no_realign) p.run.realign = false;
      p.name = p.run.method + "_" + scenario_name(scenario) + (cfg.reversed ? "_rev" : "") +
               variant.tag() + "_seed" + std::to_string(seed);
      p.dir = fs::path(cfg.out_dir) / p.name;
      plan.push_back(std::move(p));
    }
  }

  std::vector<RunOutcome> outcomes(plan.size());
  std::size_t next = 0;
  std::mutex mu;
  auto worker = [&]() {
    for (;;) {
      std::size_t mine;
      {
        std::lock_guard<std::mutex> lock(mu);
        if (next >= plan.size()) return;
        mine = next++;
      }
      try {
        execute_run(cfg, plan[mine], scenario, cfg.reversed, ckpt, key, outcomes[mine]);
      } catch (const std::exception& e) {
        outcomes[mine].error = e.what();
        outcomes[mine].line = "run " + plan[mine].name + ": ERROR: " + e.what();
      }
    }
  };
  int workers = std::min<int>(flags.jobs, static_cast<int>(plan.size()));
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();
  }

  bool any_fault = false, any_error = false;
  for (const RunOutcome& o : outcomes) {
    out << o.line << "\n";
    if (!o.fault.empty()) any_fault = true;
    if (!o.error.empty()) any_error = true;
  }
  if (any_error) {
    err << "error: at least one run failed\n";
    return 1;
  }
  if (any_fault) {
    err << "error: at least one run hit a numeric fault (partial results kept)\n";
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct LoadedRun {
  std::string label;
  std::string method = "?";
  std::string scenario = "?";
  std::string seed = "?";
  bool world_seed_known = false;
  std::uint64_t world_seed = 0;
  json eval;  // the chosen eval-mode object from metrics.json, or null
  /// step -> modality -> mean accuracy over that modality's seen tasks.
  std::map<int, std::map<std::string, double>> faa_by_step;
};

bool load_run_dir(const std::string& dir, const std::string& eval_mode, LoadedRun& run,
                  std::ostream& err) {
  fs::path metrics_path = fs::path(dir) / "metrics.json";
  std::ifstream metrics_in(metrics_path);
  if (!metrics_in) {
    err << "warning: skipping '" << dir << "': no metrics.json\n";
    return false;
  }
  json metrics;
  try {
    metrics = json::parse(metrics_in);
  } catch (const json::exception& e) {
    err << "warning: skipping '" << dir << "': bad metrics.json: " << e.what() << "\n";
    return false;
  }
  run.label = dir;
  if (metrics.contains("method")) run.method = metrics["method"].get<std::string>();
  if (metrics.contains("seed")) run.seed = std::to_string(metrics["seed"].get<std::uint64_t>());
  run.eval = metrics.contains(eval_mode) ? metrics[eval_mode] : json();

  fs::path manifest_path = fs::path(dir) / "manifest.json";
  std::ifstream manifest_in(manifest_path);
  if (manifest_in) {
    try {
      json manifest = json::parse(manifest_in);
      if (manifest.contains("scenario")) run.scenario = manifest["scenario"].get<std::string>();
      if (manifest.contains("world_seed")) {
        run.world_seed = manifest["world_seed"].get<std::uint64_t>();
        run.world_seed_known = true;
      }
    } catch (const json::exception&) {
      // manifest is advisory for the report; fall back to unknowns
    }
  }

  std::string matrix_name =
      eval_mode == "agnostic" ? "accuracy_matrix_agnostic.csv" : "accuracy_matrix.csv";
  std::ifstream matrix_in(fs::path(dir) / matrix_name);
  if (matrix_in) {
    std::string line;
    std::getline(matrix_in, line);  // header
    std::map<int, std::map<std::string, std::pair<double, int>>> sums;
    while (std::getline(matrix_in, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cells = split(line, ',');
      if (cells.size() != 4) continue;
      int t = std::atoi(cells[0].c_str());
      double acc = std::atof(cells[3].c_str());
      auto& cell = sums[t][cells[2]];
      cell.first += acc;
      cell.second += 1;
      auto& all = sums[t]["all"];
      all.first += acc;
      all.second += 1;
    }
    for (const auto& [t, mods] : sums)
      for (const auto& [mod, sum] : mods)
        run.faa_by_step[t][mod] = sum.first / std::max(1, sum.second);
  }
  return true;
}

int run_report(const std::vector<std::string>& dirs, const std::string& eval_mode,
               const std::string& out_dir, std::ostream& out, std::ostream& err) {
  if (eval_mode != "specific" && eval_mode != "agnostic")
    throw ConfigError("--eval-mode must be specific or agnostic for report");

  std::vector<LoadedRun> runs;
  for (const std::string& dir : dirs) {
    LoadedRun run;
    if (load_run_dir(dir, eval_mode, run, err)) runs.push_back(std::move(run));
  }
  if (runs.empty()) throw ConfigError("report: no readable runs among the given directories");

  std::set<std::uint64_t> world_seeds;
  bool any_unknown = false;
  for (const LoadedRun& r : runs) {
    if (r.world_seed_known) {
      world_seeds.insert(r.world_seed);
    } else {
      any_unknown = true;
    }
  }
  if (world_seeds.size() > 1) {
    out << "WARNING: runs use different world seeds (";
    bool first = true;
    for (std::uint64_t s : world_seeds) {
      if (!first) out << ", ";
      out << s;
      first = false;
    }
    out << "); their numbers are not comparable.\n\n";
  } else if (any_unknown) {
    out << "note: some runs lack a manifest; world-seed agreement was not verified.\n\n";
  }

  // Column layout: run label, method, scenario, seed, then AIA/FAA/F per
  // modality (order of first appearance) and the overall block last.
  std::vector<std::string> modalities;
  for (const LoadedRun& r : runs) {
    if (!r.eval.is_object()) continue;
    for (const json& mm : r.eval["per_modality"]) {
      std::string name = mm["modality"].get<std::string>();
      if (std::find(modalities.begin(), modalities.end(), name) == modalities.end())
        modalities.push_back(name);
    }
  }

  std::vector<std::string> headers{"run", "method", "scenario", "seed"};
  for (const std::string& m : modalities)
    for (const char* metric : {"AIA", "FAA", "F"}) headers.push_back(m + "." + metric);
  for (const char* metric : {"AIA", "FAA", "F"})
    headers.push_back(std::string("overall.") + metric);

  std::vector<std::vector<std::string>> table;
  table.push_back(headers);
  for (const LoadedRun& r : runs) {
    std::vector<std::string> row{r.label, r.method, r.scenario, r.seed};
    auto push_triple = [&row](const json& node) {
      if (!node.is_object()) {
        row.insert(row.end(), {"-", "-", "-"});
        return;
      }
      row.push_back(format4(node["aia"].get<double>()));
      row.push_back(format4(node["faa"].get<double>()));
      row.push_back(node["forgetting_defined"].get<bool>()
                        ? format4(node["forgetting"].get<double>())
                        : std::string("n/a"));
    };
    if (!r.eval.is_object()) {
      for (std::size_t i = 0; i < modalities.size() + 1; ++i)
        row.insert(row.end(), {"-", "-", "-"});
    } else {
      std::map<std::string, json> by_name;
      for (const json& mm : r.eval["per_modality"])
        by_name[mm["modality"].get<std::string>()] = mm;
      for (const std::string& m : modalities)
        push_triple(by_name.count(m) ? by_name[m] : json());
      push_triple(r.eval["overall"]);
    }
    table.push_back(std::move(row));
  }

  std::vector<std::size_t> widths(headers.size(), 0);
  for (const auto& row : table)
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  for (const auto& row : table) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      // first column left-aligned, the rest right-aligned
      if (c == 0) {
        out << row[c] << std::string(widths[c] - row[c].size(), ' ');
      } else {
        out << "  " << std::string(widths[c] - row[c].size(), ' ') << row[c];
      }
    }
    out << "\n";
  }

  fs::create_directories(out_dir);
  std::string csv = "run,step,modality,faa\n";
  char buf[64];
  for (const LoadedRun& r : runs) {
    for (const auto& [t, mods] : r.faa_by_step) {
      for (const auto& [mod, faa] : mods) {
        if (mod == "all") continue;
        std::snprintf(buf, sizeof(buf), ",%d,%s,%.9g\n", t, mod.c_str(), faa);
        csv += r.label + buf;
      }
      if (mods.count("all")) {
        std::snprintf(buf, sizeof(buf), ",%d,all,%.9g\n", t, mods.at("all"));
        csv += r.label + buf;
      }
    }
  }
  fs::path csv_path = fs::path(out_dir) / "faa_vs_time.csv";
  write_file_atomic(csv_path, csv);
  out << "\nplot data (" << eval_mode << " FAA per modality over time) -> " << csv_path.string()
      << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// dump-world
// ---------------------------------------------------------------------------

int run_dump_world(const std::string& config_path, const std::string& scenario_override,
                   const std::string& seed_override, bool reversed_flag,
                   const std::string& out_dir, std::ostream& out) {
  ExperimentConfig cfg = load_config_file(config_path);
  if (!scenario_override.empty()) cfg.scenario = scenario_override;
  if (reversed_flag) cfg.reversed = true;
  std::uint64_t stream_seed = cfg.run.seed;
  if (!seed_override.empty()) {
    std::vector<std::uint64_t> seeds = parse_seed_list(seed_override);
    if (seeds.size() != 1) throw ConfigError("dump-world takes a single --seed");
    stream_seed = seeds[0];
  }
  Scenario scenario = parse_scenario(cfg.scenario);

  World world(cfg.world);
  out << "world seed " << cfg.world.seed << "  content " << hex64(world.content_hash())
      << "  d_model " << cfg.world.d_model << "\n";
  out << "modality  slices  tokens  cl-classes  pretrain-classes  train/class  test/class\n";
  for (const ModalityGeometry& g : cfg.world.modalities) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-8s  %6d  %6d  %10d  %16d  %11d  %10d\n",
                  g.name.c_str(), g.slices, g.tokens, cfg.world.cl_classes_per_modality,
                  cfg.world.pretrain_classes_per_modality, cfg.world.train_per_class,
                  cfg.world.test_per_class);
    out << line;
  }

  std::vector<TaskUnit> stream = build_stream(world, scenario, stream_seed, cfg.reversed);
  out << "\nscenario " << scenario_name(scenario) << (cfg.reversed ? " (reversed)" : "")
      << "  stream seed " << stream_seed << "  steps " << stream_step_count(stream) << "\n";
  for (const TaskUnit& u : stream) {
    out << "  t=" << u.step << "  " << u.modality << "  classes";
    for (int cid : u.class_ids) out << " " << world.class_info(cid).name;
    out << "\n";
  }

  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    json doc;
    doc["seed"] = cfg.world.seed;
    doc["content_hash"] = hex64(world.content_hash());
    doc["d_model"] = cfg.world.d_model;
    json mods = json::array();
    for (const ModalityGeometry& g : cfg.world.modalities) {
      json m;
      m["name"] = g.name;
      m["slices"] = g.slices;
      m["tokens"] = g.tokens;
      mods.push_back(std::move(m));
    }
    doc["modalities"] = std::move(mods);
    json classes = json::array();
    for (const ClassInfo& info : world.classes()) {
      json c;
      c["id"] = info.id;
      c["name"] = info.name;
      c["modality"] = info.modality;
      c["pretrain"] = info.pretrain;
      c["text"] = info.text;
      classes.push_back(std::move(c));
    }
    doc["classes"] = std::move(classes);
    write_file_atomic(fs::path(out_dir) / "world.json", doc.dump(2) + "\n");

    std::string csv = "step,modality,class_ids\n";
    for (const TaskUnit& u : stream) {
      csv += std::to_string(u.step) + "," + u.modality + ",";
      for (std::size_t i = 0; i < u.class_ids.size(); ++i) {
        if (i) csv += ";";
        csv += std::to_string(u.class_ids[i]);
      }
      csv += "\n";
    }
    write_file_atomic(fs::path(out_dir) / "stream.csv", csv);
    out << "\nworld.json and stream.csv -> " << out_dir << "\n";
  }
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"continual multimodal learning experiments on a synthetic two-tower world"};
  app.set_version_flag("--version", std::string(MMCL_TOOL_VERSION));
  app.require_subcommand(1);

  int rc = 0;

  // pretrain
  std::string pre_config, pre_out;
  CLI::App* pre = app.add_subcommand(
      "pretrain", "contrastively pretrain the backbone and write its checkpoint");
  pre->add_option("config", pre_config, "experiment config (JSON)")->required();
  pre->add_option("--out", pre_out, "output directory (default: config output.dir)");
  pre->callback([&] { rc = run_pretrain(pre_config, pre_out, out); });

  // run
  RunFlags rf;
  CLI::App* run = app.add_subcommand("run", "train over a task stream and write metrics");
  run->add_option("config", rf.config_path, "experiment config (JSON)")->required();
  run->add_option("--method", rf.method, "comm | ft");
  run->add_option("--scenario", rf.scenario, "random | shift | simultaneous");
  run->add_option("--seed", rf.seed_list, "run seed, or comma list for a seed sweep");
  run->add_option("--eval-mode", rf.eval_mode, "specific | agnostic | both");
  run->add_option("--ablate", rf.ablate,
                  "comma list of components to switch off: no-cross,no-self,no-realign");
  run->add_option("--variant", rf.variants,
                  "repeatable ablation variant for sweeps ('none' or an --ablate-style list); "
                  "place after the config path")
      ->take_all();
  run->add_flag("--reversed", rf.reversed, "replay the stream in reverse step order");
  run->add_option("--out", rf.out_dir, "parent directory for run outputs");
  run->add_option("--backbone", rf.backbone_path, "backbone checkpoint path override");
  run->add_option("--jobs", rf.jobs, "worker threads for (seed, variant) sweeps")
      ->check(CLI::PositiveNumber);
  run->callback([&] { rc = run_run(rf, out, err); });

  // report
  std::vector<std::string> report_dirs;
  std::string report_mode = "specific", report_out = "report";
  CLI::App* rep = app.add_subcommand("report", "tabulate finished runs and export plot data");
  rep->add_option("dirs", report_dirs, "one or more run output directories")->required();
  rep->add_option("--eval-mode", report_mode, "specific | agnostic (default specific)");
  rep->add_option("--out", report_out, "directory for plot CSVs (default 'report')");
  rep->callback([&] { rc = run_report(report_dirs, report_mode, report_out, out, err); });

  // dump-world
  std::string dw_config, dw_scenario, dw_seed, dw_out;
  bool dw_reversed = false;
  CLI::App* dw = app.add_subcommand("dump-world", "describe the synthetic world and stream");
  dw->add_option("config", dw_config, "experiment config (JSON)")->required();
  dw->add_option("--scenario", dw_scenario, "random | shift | simultaneous");
  dw->add_option("--seed", dw_seed, "stream seed override");
  dw->add_flag("--reversed", dw_reversed, "reverse the stream");
  dw->add_option("--out", dw_out, "also write world.json and stream.csv here");
  dw->callback([&] { rc = run_dump_world(dw_config, dw_scenario, dw_seed, dw_reversed, dw_out, out); });

  std::vector<std::string> argv_store;
  argv_store.reserve(args.size() + 1);
  argv_store.push_back("mmcl");
  for (const std::string& a : args) argv_store.push_back(a);
  std::vector<char*> argv;
  for (std::string& a : argv_store) argv.push_back(a.data());

  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;  // help/version exit cleanly, parse errors are usage errors
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const NumericFault& e) {
    err << "numeric fault: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}

}  // namespace mmcl::cli
