#include "mmcl/pretrain.hpp"

#include <cstring>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "mmcl/optim.hpp"
#include "mmcl/random.hpp"

namespace mmcl {

namespace {

/// Copies sample row `idx` of a [N, S, T, d] pool into `out`.
void append_sample(const Tensor& pool, int idx, std::vector<float>& out) {
  std::size_t stride = pool.data().size() / static_cast<std::size_t>(pool.dim(0));
  const float* src = pool.data().data() + static_cast<std::size_t>(idx) * stride;
  out.insert(out.end(), src, src + stride);
}

struct PairIndex {
  std::string modality;
  std::vector<int> class_ids;  // that modality's pretraining classes
};

std::vector<PairIndex> pretrain_pairs(const World& world) {
  std::vector<PairIndex> out;
  for (const auto& geo : world.config().modalities) {
    out.push_back(PairIndex{geo.name, world.pretrain_classes(geo.name)});
  }
  return out;
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

/// Text embeddings for every pretraining class in pair order, prompt-free.
Tensor all_pretrain_texts(const Backbone& backbone, const World& world,
                          const std::vector<PairIndex>& pairs) {
  std::vector<int> ids;
  for (const auto& p : pairs) ids.insert(ids.end(), p.class_ids.begin(), p.class_ids.end());
  std::vector<int> flat = world.text_tokens(ids);
  return backbone.encode_text(flat, static_cast<int>(ids.size()), nullptr,
                              PromptMode::Eval);
}

}  // namespace

float pretrain_retrieval(const Backbone& backbone, const World& world) {
  std::vector<PairIndex> pairs = pretrain_pairs(world);
  Tensor texts = all_pretrain_texts(backbone, world, pairs);
  int correct = 0, total = 0;
  int global_row = 0;
  for (const auto& p : pairs) {
    // All held-out samples of this modality at once, with their target rows.
    std::vector<float> rows;
    std::vector<int> targets;
    int S = 0, T = 0, d = 0;
    for (int cid : p.class_ids) {
      const Tensor& held = world.data(cid).test;
      S = held.dim(1);
      T = held.dim(2);
      d = held.dim(3);
      for (int i = 0; i < held.dim(0); ++i) {
        append_sample(held, i, rows);
        targets.push_back(global_row);
      }
      ++global_row;
    }
    int n = static_cast<int>(targets.size());
    Tensor batch = Tensor::from_data({n, S, T, d}, std::move(rows));
    Tensor feats = backbone.encode_modality(batch, nullptr, PromptMode::Eval);
    Tensor v = backbone.project_base(feats, p.modality);
    Tensor logits = backbone.similarity_logits(v, texts);
    int cols = logits.dim(1);
    for (int i = 0; i < n; ++i) {
      correct += argmax_row(logits.data(), cols, i) == targets[static_cast<std::size_t>(i)];
      ++total;
    }
  }
  return total == 0 ? 0.0f : static_cast<float>(correct) / static_cast<float>(total);
}

PretrainReport pretrain_backbone(Backbone& backbone, const World& world,
                                 const PretrainConfig& cfg) {
  if (backbone.frozen()) throw UsageError("backbone is already frozen");
  if (cfg.lr <= 0.0f || cfg.max_steps <= 0 || cfg.eval_every <= 0) {
    throw ConfigError("pretraining needs a positive rate, budget, and eval period");
  }

  std::vector<PairIndex> pairs = pretrain_pairs(world);
  std::vector<int> all_ids;
  for (const auto& p : pairs) {
    all_ids.insert(all_ids.end(), p.class_ids.begin(), p.class_ids.end());
  }
  int K = static_cast<int>(all_ids.size());
  std::vector<int> flat_text = world.text_tokens(all_ids);
  std::vector<int> diagonal(static_cast<std::size_t>(K));
  std::iota(diagonal.begin(), diagonal.end(), 0);

  AdamOptimizer opt(backbone.parameters(), cfg.lr);
  RngStream rng(cfg.seed, "pretrain");

  PretrainReport report;
  for (int step = 0; step < cfg.max_steps; ++step) {
    // One fresh sample per (modality, class) pair.
    std::vector<Tensor> v_blocks;
    for (const auto& p : pairs) {
      std::vector<float> rows;
      int S = 0, T = 0, d = 0;
      RngStream pick = rng.child("pick/" + p.modality + "/" + std::to_string(step));
      for (int cid : p.class_ids) {
        const Tensor& train = world.data(cid).train;
        S = train.dim(1);
        T = train.dim(2);
        d = train.dim(3);
        append_sample(train, pick.uniform_int(0, train.dim(0) - 1), rows);
      }
      int n = static_cast<int>(p.class_ids.size());
      Tensor batch = Tensor::from_data({n, S, T, d}, std::move(rows));
      Tensor feats = backbone.encode_modality(batch, nullptr, PromptMode::Train);
      v_blocks.push_back(backbone.project_base(feats, p.modality));
    }
    Tensor v = ops::concat(v_blocks, 0);  // [K, d_joint]
    Tensor l = backbone.encode_text(flat_text, K, nullptr, PromptMode::Train);

    // Symmetric contrastive objective: each sample must score its own text
    // highest and each text its own sample, averaged over both directions.
    Tensor loss_v = ops::cross_entropy_logits(backbone.similarity_logits(v, l), diagonal);
    Tensor loss_l = ops::cross_entropy_logits(backbone.similarity_logits(l, v), diagonal);
    Tensor loss = ops::scale(ops::add(loss_v, loss_l), 0.5f / static_cast<float>(K));

    opt.zero_grad();
    loss.backward();
    opt.step();
    report.final_loss = loss.item();
    report.steps_run = step + 1;

    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.max_steps) {
      report.retrieval = pretrain_retrieval(backbone, world);
      if (report.retrieval >= cfg.target) {
        report.reached_target = true;
        break;
      }
    }
  }
  if (!report.reached_target) report.retrieval = pretrain_retrieval(backbone, world);
  backbone.freeze_all();
  if (report.retrieval < cfg.floor) {
    throw NumericFault("pretraining retrieval " + std::to_string(report.retrieval) +
                       " ended below the required floor " + std::to_string(cfg.floor) +
                       " after " + std::to_string(report.steps_run) +
                       " steps; re-seed or raise the budget");
  }
  return report;
}

std::string pretrain_cache_key(const World& world, Backbone& backbone,
                               const PretrainConfig& cfg) {
  auto mix = [](std::uint64_t h, std::uint64_t v) {
    h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
  };
  std::uint64_t h = world.content_hash();
  h = mix(h, backbone.weight_hash());
  h = mix(h, cfg.seed);
  std::uint64_t bits = 0;
  static_assert(sizeof(float) == 4, "float layout");
  std::memcpy(&bits, &cfg.lr, sizeof(float));
  h = mix(h, bits);
  std::memcpy(&bits, &cfg.target, sizeof(float));
  h = mix(h, bits);
  std::memcpy(&bits, &cfg.floor, sizeof(float));
  h = mix(h, bits);
  h = mix(h, static_cast<std::uint64_t>(cfg.max_steps));
  h = mix(h, static_cast<std::uint64_t>(cfg.eval_every));
  std::ostringstream out;
  out << std::hex;
  out.width(16);
  out.fill('0');
  out << h;
  return out.str();
}

std::string ensure_pretrained(Backbone& backbone, const World& world,
                              const PretrainConfig& cfg, const std::string& cache_dir,
                              PretrainReport* report) {
  std::filesystem::create_directories(cache_dir);
  std::string key = pretrain_cache_key(world, backbone, cfg);
  std::string path = (std::filesystem::path(cache_dir) / ("backbone_" + key + ".ckpt")).string();
  if (std::filesystem::exists(path)) {
    backbone.load(path);
    backbone.freeze_all();
    if (report != nullptr) {
      report->steps_run = 0;  // cache hit
      report->retrieval = pretrain_retrieval(backbone, world);
      report->reached_target = report->retrieval >= cfg.floor;
    }
    return path;
  }
  PretrainReport local = pretrain_backbone(backbone, world, cfg);
  backbone.save(path, "{\"kind\":\"backbone\",\"cache_key\":\"" + key + "\"}");
  if (report != nullptr) *report = local;
  return path;
}

}  // namespace mmcl
