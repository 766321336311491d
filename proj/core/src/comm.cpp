#include "mmcl/comm.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include <json.hpp>

#include "mmcl/checkpoint.hpp"

namespace mmcl {

namespace {

using ordered_json = nlohmann::ordered_json;

std::vector<float> doubles_to_floats(const std::vector<double>& v) {
  std::vector<float> out(v.size() * 2);
  std::memcpy(out.data(), v.data(), v.size() * sizeof(double));
  return out;
}

std::vector<double> floats_to_doubles(const std::vector<float>& v) {
  std::vector<double> out(v.size() / 2);
  std::memcpy(out.data(), v.data(), out.size() * sizeof(double));
  return out;
}

/// Row-wise argmax of B rows of k plain floats.
int argmax_row(const std::vector<float>& rows, int k, int row) {
  int best = 0;
  for (int j = 1; j < k; ++j) {
    if (rows[static_cast<std::size_t>(row) * k + j] >
        rows[static_cast<std::size_t>(row) * k + best]) {
      best = j;
    }
  }
  return best;
}

}  // namespace

// ---------------------------------------------------------------------------
// Adapters
// ---------------------------------------------------------------------------

PromptPair zero_prompts(const EncoderConfig& cfg) {
  Shape s{cfg.prompt_depth, cfg.prompt_len, cfg.d_model};
  return PromptPair{Tensor::zeros(s), Tensor::zeros(s)};
}

std::vector<Tensor> prompt_layers(const Tensor& stack) {
  if (stack.ndim() != 3) {
    throw UsageError("prompt_layers expects a [depth, len, d] stack, got " +
                     shape_str(stack.shape()));
  }
  int depth = stack.dim(0), len = stack.dim(1), d = stack.dim(2);
  std::vector<Tensor> out;
  out.reserve(static_cast<std::size_t>(depth));
  for (int l = 0; l < depth; ++l) {
    out.push_back(ops::reshape(ops::slice(stack, 0, l, 1), {len, d}));
  }
  return out;
}

Tensor project(const ProjectionHead& head, const Tensor& features) {
  Tensor base_part = ops::matmul(features, head.base);
  Tensor low_rank = ops::matmul(ops::matmul(features, head.delta_A), head.delta_B);
  return ops::add(base_part, low_rank);
}

Tensor accumulate(const std::optional<Tensor>& prev, const Tensor& component) {
  if (!prev.has_value()) return component.detach();
  if (prev->shape() != component.shape()) {
    throw ConfigError("accumulate: shape mismatch, " + shape_str(prev->shape()) +
                      " vs " + shape_str(component.shape()));
  }
  std::vector<float> sum = prev->data();
  const auto& add = component.data();
  for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += add[i];
  return Tensor::from_data(prev->shape(), std::move(sum));
}

// ---------------------------------------------------------------------------
// Relevance gate
// ---------------------------------------------------------------------------

std::vector<float> RelevanceGate::softmax_weights(const Tensor& features) const {
  if (!trained) throw UsageError("relevance gate has not been trained");
  int k = static_cast<int>(modalities.size());
  int d = features.dim(-1);
  int B = static_cast<int>(features.numel() / d);
  const auto& f = features.data();
  const auto& w = weight.value.data();
  const auto& b = bias.value.data();
  std::vector<float> out(static_cast<std::size_t>(B) * k);
  std::vector<double> logits(static_cast<std::size_t>(k));
  for (int i = 0; i < B; ++i) {
    double hi = -1e300;
    for (int j = 0; j < k; ++j) {
      double acc = b[static_cast<std::size_t>(j)];
      for (int c = 0; c < d; ++c) {
        acc += static_cast<double>(f[static_cast<std::size_t>(i) * d + c]) *
               w[static_cast<std::size_t>(c) * k + j];
      }
      logits[static_cast<std::size_t>(j)] = acc;
      hi = std::max(hi, acc);
    }
    double z = 0.0;
    for (int j = 0; j < k; ++j) {
      logits[static_cast<std::size_t>(j)] = std::exp(logits[static_cast<std::size_t>(j)] - hi);
      z += logits[static_cast<std::size_t>(j)];
    }
    for (int j = 0; j < k; ++j) {
      out[static_cast<std::size_t>(i) * k + j] =
          static_cast<float>(logits[static_cast<std::size_t>(j)] / z);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// CommModel basics
// ---------------------------------------------------------------------------

CommModel::CommModel(Backbone* backbone, const CommConfig& cfg)
    : backbone_(backbone), cfg_(cfg) {
  if (!backbone_) throw UsageError("CommModel needs a backbone");
  if (cfg.head_rank <= 0) throw ConfigError("head_rank must be positive");
  if (cfg.prompt_lr <= 0 || cfg.gate_lr <= 0 || cfg.realign_lr <= 0) {
    throw ConfigError("learning rates must be positive");
  }
  if (cfg.gate_samples < 1 || cfg.realign_samples < 1) {
    throw ConfigError("sample counts must be positive");
  }
}

bool CommModel::has_state(const std::string& modality) const {
  return states_.count(modality) != 0;
}

const ModalityState& CommModel::state(const std::string& modality) const {
  auto it = states_.find(modality);
  if (it == states_.end()) throw UsageError("no state for modality '" + modality + "'");
  return it->second;
}

ModalityState& CommModel::state_mut(const std::string& modality) {
  auto it = states_.find(modality);
  if (it == states_.end()) throw UsageError("no state for modality '" + modality + "'");
  return it->second;
}

ModalityState& CommModel::ensure_state(const std::string& modality) {
  auto it = states_.find(modality);
  if (it != states_.end()) return it->second;
  const auto& bc = backbone_->config();
  ModalityState st;
  st.modality = modality;
  st.head_delta = Tensor::zeros({bc.encoder.d_model, bc.d_joint});
  order_.push_back(modality);
  return states_.emplace(modality, std::move(st)).first->second;
}

const TaskSpec& CommModel::active_spec() const {
  if (!active_) throw UsageError("no task is active");
  return active_->spec;
}

Tensor CommModel::raw_features(const Tensor& tokens) const {
  return backbone_->encode_modality(tokens, nullptr, PromptMode::Eval);
}

// ---------------------------------------------------------------------------
// Raw statistics and the gate
// ---------------------------------------------------------------------------

void CommModel::observe_raw_features(const std::string& modality, const Tensor& tokens) {
  ModalityState& st = ensure_state(modality);
  Tensor feats = raw_features(tokens);
  GaussianModel batch_stats = GaussianModel::fit(feats.data(), feats.dim(-1));
  st.raw_stats = st.raw_stats.count == 0 ? batch_stats
                                         : GaussianModel::merged(st.raw_stats, batch_stats);
}

GateTrainReport train_relevance_gate(RelevanceGate& gate,
                                     const std::vector<const GaussianModel*>& stats,
                                     int samples_per_modality, int steps, float lr,
                                     RngStream& rng) {
  int k = static_cast<int>(gate.modalities.size());
  if (k == 0 || stats.size() != gate.modalities.size()) {
    throw UsageError("gate needs one statistics entry per modality");
  }
  int d = stats.front()->dim;
  int n = samples_per_modality;
  gate.weight = Parameter("gate.weight", Tensor::zeros({d, k}));
  gate.bias = Parameter("gate.bias", Tensor::zeros({k}));

  std::vector<float> rows;
  rows.reserve(static_cast<std::size_t>(k) * n * d);
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(k) * n);
  for (int j = 0; j < k; ++j) {
    RngStream draw = rng.child("replay/" + gate.modalities[static_cast<std::size_t>(j)]);
    std::vector<float> s = stats[static_cast<std::size_t>(j)]->sample(n, draw);
    rows.insert(rows.end(), s.begin(), s.end());
    labels.insert(labels.end(), static_cast<std::size_t>(n), j);
  }
  Tensor X = Tensor::from_data({k * n, d}, std::move(rows));

  auto loss_and_acc = [&]() {
    Tensor logits = ops::add(ops::matmul(X, gate.weight.value), gate.bias.value);
    Tensor loss = ops::cross_entropy_logits(logits, labels);
    int correct = 0;
    const auto& ld = logits.data();
    for (int i = 0; i < k * n; ++i) {
      if (argmax_row(ld, k, i) == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return std::pair<Tensor, float>(loss, static_cast<float>(correct) / (k * n));
  };

  GateTrainReport report;
  report.modality_count = k;
  report.samples_per_modality = n;
  report.initial_loss = loss_and_acc().first.item();

  AdamOptimizer opt({&gate.weight, &gate.bias}, lr);
  for (int s = 0; s < steps; ++s) {
    opt.zero_grad();
    Tensor loss = loss_and_acc().first;
    loss.backward();
    opt.step();
  }
  auto [final_loss, acc] = loss_and_acc();
  report.final_loss = final_loss.item();
  report.train_accuracy = acc;
  gate.trained = true;
  return report;
}

GateTrainReport CommModel::train_gate(RngStream& rng) {
  if (!cfg_.use_gate) throw UsageError("gate pathway is disabled in this configuration");
  std::vector<std::string> eligible;
  std::vector<const GaussianModel*> stats;
  for (const std::string& m : order_) {
    const ModalityState& st = states_.at(m);
    if (st.raw_stats.count >= 2) {
      eligible.push_back(m);
      stats.push_back(&st.raw_stats);
    } else if (!st.registry.empty() || st.has_history) {
      throw UsageError("modality '" + m + "' finished tasks but has under two raw observations");
    } else {
      std::fprintf(stderr,
                   "[comm] warning: modality '%s' has under two raw observations; "
                   "skipping it for this gate round\n",
                   m.c_str());
    }
  }
  if (eligible.empty()) throw UsageError("no modality has enough raw statistics for the gate");

  gate_ = RelevanceGate{};
  gate_.modalities = eligible;
  return train_relevance_gate(gate_, stats, cfg_.gate_samples, cfg_.gate_steps, cfg_.gate_lr,
                              rng);
}

Parameter& CommModel::task_P() {
  if (!active_) throw UsageError("no task is active");
  return active_->P;
}
Parameter& CommModel::task_Q() {
  if (!active_) throw UsageError("no task is active");
  return active_->Q;
}
Parameter& CommModel::task_A() {
  if (!active_) throw UsageError("no task is active");
  return active_->A;
}
Parameter& CommModel::task_B() {
  if (!active_) throw UsageError("no task is active");
  return active_->B;
}

void CommModel::check_gate_fresh() const {
  if (!gate_.trained) throw UsageError("relevance gate has not been trained");
  for (const std::string& m : order_) {
    const ModalityState& st = states_.at(m);
    bool in_gate = std::find(gate_.modalities.begin(), gate_.modalities.end(), m) !=
                   gate_.modalities.end();
    if (!in_gate && (st.has_history || !st.registry.empty() ||
                     (active_ && active_->spec.modality == m))) {
      throw UsageError("relevance gate is stale: modality '" + m + "' is missing");
    }
  }
}

// ---------------------------------------------------------------------------
// Task lifecycle
// ---------------------------------------------------------------------------

void CommModel::begin_task(int t, const TaskSpec& spec) {
  if (t < 1) throw UsageError("time steps start at 1");
  if (active_) throw UsageError("a task is already active; call end_task first");
  if (spec.modality.empty() || spec.class_ids.empty()) {
    throw UsageError("task spec needs a modality and at least one class");
  }
  if (spec.class_text.size() != spec.class_ids.size()) {
    throw UsageError("task spec class_text must align with class_ids");
  }
  if (t < last_begun_step_) throw UsageError("time steps must not go backwards");
  if (t > last_begun_step_) {
    last_begun_step_ = t;
    begun_this_step_.clear();
  } else if (std::find(begun_this_step_.begin(), begun_this_step_.end(), spec.modality) !=
             begun_this_step_.end()) {
    throw UsageError("duplicate begin_task for modality '" + spec.modality +
                     "' at step " + std::to_string(t));
  }
  begun_this_step_.push_back(spec.modality);
  step_ = t;

  const auto& bc = backbone_->config();
  const auto& ec = bc.encoder;
  int text_len = bc.text_len;

  ModalityState& st = ensure_state(spec.modality);
  if (st.registry.empty() && !st.P_bar.has_value()) st.first_step = t;

  Shape prompt_shape{ec.prompt_depth, ec.prompt_len, ec.d_model};
  st.has_history = st.P_bar.has_value();
  st.P_snap = st.P_bar ? st.P_bar->detach() : Tensor::zeros(prompt_shape);
  st.Q_snap = st.Q_bar ? st.Q_bar->detach() : Tensor::zeros(prompt_shape);
  st.head_delta_snap = st.head_delta.detach();

  ActiveTask task;
  task.step = t;
  task.spec = spec;
  task.P = Parameter("task.P", Tensor::zeros(prompt_shape));
  task.Q = Parameter("task.Q", Tensor::zeros(prompt_shape));
  RngStream head_init(cfg_.seed + static_cast<std::uint64_t>(t) * 1000003u,
                      "comm/head_init/" + spec.modality);
  task.A = Parameter("task.A",
                     Tensor::randn({ec.d_model, cfg_.head_rank}, head_init,
                                   1.0f / std::sqrt(static_cast<float>(ec.d_model))));
  task.B = Parameter("task.B", Tensor::zeros({cfg_.head_rank, bc.d_joint}));
  task.base_eff =
      accumulate(std::optional<Tensor>(backbone_->head_base(spec.modality).value.detach()),
                 st.head_delta);
  for (const auto& text : spec.class_text) {
    if (static_cast<int>(text.size()) != text_len) {
      throw UsageError("class text must hold exactly " + std::to_string(text_len) + " tokens");
    }
    task.flat_text.insert(task.flat_text.end(), text.begin(), text.end());
  }
  active_ = std::move(task);
  // The optimizer must point at the parameters' final home, so it is built
  // only after the task record has been moved into place.
  active_->opt.emplace(
      std::vector<Parameter*>{&active_->P, &active_->Q, &active_->A, &active_->B},
      cfg_.prompt_lr);
}

Tensor CommModel::live_stack(bool text) const {
  if (!active_) throw UsageError("no task is active");
  const ModalityState& st = states_.at(active_->spec.modality);
  const Tensor& snap = text ? st.Q_snap : st.P_snap;
  const Tensor& comp = text ? active_->Q.value : active_->P.value;
  return ops::add(snap, comp);
}

std::vector<Tensor> CommModel::live_prompt_layers() const {
  return prompt_layers(live_stack(false));
}

std::vector<Tensor> CommModel::live_text_prompt_layers() const {
  return prompt_layers(live_stack(true));
}

ComposedPrompts CommModel::compose_prompts(const Tensor& tokens,
                                           const std::string& live_modality) const {
  if (!cfg_.use_gate) {
    throw UsageError("compose_prompts requires the gate pathway to be enabled");
  }
  check_gate_fresh();
  const auto& ec = backbone_->config().encoder;
  int depth = ec.prompt_depth, len = ec.prompt_len, d = ec.d_model;
  int flat = depth * len * d;
  int k = static_cast<int>(gate_.modalities.size());

  Tensor feats = raw_features(tokens);
  int B = feats.dim(0);
  ComposedPrompts out;
  out.order = gate_.modalities;
  out.weights = gate_.softmax_weights(feats);

  std::vector<Tensor> stack_rows;
  stack_rows.reserve(static_cast<std::size_t>(k));
  for (const std::string& m : gate_.modalities) {
    if (!live_modality.empty() && m == live_modality) {
      stack_rows.push_back(ops::reshape(live_stack(false), {1, flat}));
      continue;
    }
    auto it = states_.find(m);
    if (it != states_.end() && it->second.P_bar.has_value()) {
      stack_rows.push_back(ops::reshape(*it->second.P_bar, {1, flat}));
    } else {
      // Modalities without a finished ledger contribute nothing: their
      // softmax mass maps to a zero stack rather than being renormalized.
      stack_rows.push_back(Tensor::zeros({1, flat}));
    }
  }
  Tensor stack = ops::concat(stack_rows, 0);  // [k, flat]
  Tensor w = Tensor::from_data({B, k}, out.weights);
  Tensor composed = ops::matmul(w, stack);  // [B, flat]
  out.layers.reserve(static_cast<std::size_t>(depth));
  for (int l = 0; l < depth; ++l) {
    out.layers.push_back(
        ops::reshape(ops::slice(composed, 1, l * len * d, len * d), {B, len, d}));
  }
  return out;
}

SelfRegTerms CommModel::self_reg_impl(const Tensor& tokens, const std::vector<int>& labels,
                                      const Tensor& own_features,
                                      const Tensor& live_text) const {
  const ModalityState& st = states_.at(active_->spec.modality);
  SelfRegTerms terms;
  if (!st.has_history) {
    terms.modality = Tensor::zeros({1});
    terms.text = Tensor::zeros({1});
    terms.head = Tensor::zeros({1});
    terms.total = Tensor::zeros({1});
    return terms;
  }
  int C = static_cast<int>(active_->spec.class_ids.size());

  // Modality drift: own-ledger features vs. snapshot-ledger features. The
  // drift penalty always runs the modality's own prompt stack, even when the
  // task loss runs gate-composed prompts.
  std::vector<Tensor> snap_layers = prompt_layers(st.P_snap);
  Tensor v_prev = backbone_->encode_modality(tokens, &snap_layers, PromptMode::Train);
  terms.modality = ops::sum_all(ops::l2_norm(ops::sub(own_features, v_prev)));

  // Text drift, weighted by how often each class appears in the batch.
  std::vector<Tensor> q_snap = prompt_layers(st.Q_snap);
  Tensor l_prev = backbone_->encode_text(active_->flat_text, C, &q_snap, PromptMode::Train);
  std::vector<float> counts(static_cast<std::size_t>(C), 0.0f);
  for (int lab : labels) {
    if (lab < 0 || lab >= C) throw UsageError("label out of range for the active task");
    counts[static_cast<std::size_t>(lab)] += 1.0f;
  }
  Tensor count_t = Tensor::from_data({C}, std::move(counts));
  terms.text = ops::sum_all(ops::mul(ops::l2_norm(ops::sub(live_text, l_prev)), count_t));

  // Head drift on the current own-ledger features through both head states.
  ProjectionHead live{active_->base_eff, active_->A.value, active_->B.value};
  Tensor base_snap = accumulate(
      std::optional<Tensor>(backbone_->head_base(active_->spec.modality).value.detach()),
      st.head_delta_snap);
  Tensor f_live = project(live, own_features);
  Tensor f_prev = ops::matmul(own_features, base_snap);
  terms.head = ops::sum_all(ops::l2_norm(ops::sub(f_live, f_prev)));

  terms.total = ops::add(ops::add(terms.modality, terms.text), terms.head);
  return terms;
}

SelfRegTerms CommModel::self_reg_terms(const Tensor& tokens, const std::vector<int>& labels) {
  if (!active_) throw UsageError("no task is active");
  int C = static_cast<int>(active_->spec.class_ids.size());
  std::vector<Tensor> own_layers = live_prompt_layers();
  Tensor v_own = backbone_->encode_modality(tokens, &own_layers, PromptMode::Train);
  std::vector<Tensor> q_layers = live_text_prompt_layers();
  Tensor l_live = backbone_->encode_text(active_->flat_text, C, &q_layers, PromptMode::Train);
  return self_reg_impl(tokens, labels, v_own, l_live);
}

Tensor CommModel::self_reg_loss(const Tensor& tokens, const std::vector<int>& labels) {
  return self_reg_terms(tokens, labels).total;
}

Tensor CommModel::task_loss(const Tensor& tokens, const std::vector<int>& labels,
                            LossBreakdown* breakdown) {
  if (!active_) throw UsageError("no task is active");
  int C = static_cast<int>(active_->spec.class_ids.size());
  int B = tokens.dim(0);
  if (static_cast<int>(labels.size()) != B) {
    throw UsageError("labels must cover the batch");
  }
  for (int lab : labels) {
    if (lab < 0 || lab >= C) throw UsageError("label out of range for the active task");
  }

  const std::string& m = active_->spec.modality;
  bool composing = cfg_.use_gate && cfg_.gate_composition_in_training && gate_.trained;
  bool need_self = cfg_.lambda_self > 0.0f && states_.at(m).has_history;
  std::vector<Tensor> own_layers = live_prompt_layers();
  Tensor v_own, v_task;
  if (composing) {
    ComposedPrompts composed = compose_prompts(tokens, m);
    v_task = backbone_->encode_modality(tokens, &composed.layers, PromptMode::Train);
    if (need_self) {
      v_own = backbone_->encode_modality(tokens, &own_layers, PromptMode::Train);
    }
  } else {
    v_task = backbone_->encode_modality(tokens, &own_layers, PromptMode::Train);
    v_own = v_task;
  }

  ProjectionHead head{active_->base_eff, active_->A.value, active_->B.value};
  Tensor v = project(head, v_task);
  std::vector<Tensor> q_layers = live_text_prompt_layers();
  Tensor l = backbone_->encode_text(active_->flat_text, C, &q_layers, PromptMode::Train);
  Tensor logits = backbone_->similarity_logits(v, l);
  Tensor task_loss =
      ops::scale(ops::cross_entropy_logits(logits, labels), 1.0f / static_cast<float>(B));

  LossBreakdown out;
  Tensor total = task_loss;
  out.task = task_loss.item();
  if (need_self) {
    Tensor self_loss = self_reg_impl(tokens, labels, v_own, l).total;
    out.self = self_loss.item();
    total = ops::add(task_loss, ops::scale(self_loss, cfg_.lambda_self));
  }
  out.total = total.item();
  if (breakdown) *breakdown = out;
  return total;
}

LossBreakdown CommModel::task_step(const Tensor& tokens, const std::vector<int>& labels) {
  if (!active_) throw UsageError("no task is active");
  const std::string& m = active_->spec.modality;
  try {
    LossBreakdown out;
    Tensor total = task_loss(tokens, labels, &out);

    active_->opt->zero_grad();
    total.backward();
    active_->opt->step();
    return out;
  } catch (const NumericFault& e) {
    throw NumericFault(std::string(e.what()) + " [task_step step=" + std::to_string(step_) +
                       " modality=" + m + "]");
  }
}

void CommModel::end_task(const std::vector<Tensor>& class_train_batches) {
  if (!active_) throw UsageError("no task is active");
  if (class_train_batches.size() != active_->spec.class_ids.size()) {
    throw UsageError("end_task needs one training batch per task class");
  }
  ModalityState& st = states_.at(active_->spec.modality);

  st.P_bar = accumulate(st.P_bar, active_->P.value);
  st.Q_bar = accumulate(st.Q_bar, active_->Q.value);
  Tensor correction =
      ops::matmul(active_->A.value.detach(), active_->B.value.detach());
  st.head_delta = accumulate(std::optional<Tensor>(st.head_delta), correction);

  // The task is folded into the ledger before the class statistics are
  // captured, so the stored features reflect the final prompt state.
  ActiveTask finished = std::move(*active_);
  active_.reset();

  bool composing = cfg_.use_gate && gate_.trained;
  for (std::size_t c = 0; c < class_train_batches.size(); ++c) {
    const Tensor& batch = class_train_batches[c];
    Tensor prompted;
    if (composing) {
      ComposedPrompts composed = compose_prompts(batch, "");
      prompted = backbone_->encode_modality(batch, &composed.layers, PromptMode::Eval);
    } else {
      std::vector<Tensor> layers = prompt_layers(*st.P_bar);
      prompted = backbone_->encode_modality(batch, &layers, PromptMode::Eval);
    }
    int cid = finished.spec.class_ids[c];
    st.class_stats[cid] = GaussianModel::fit(prompted.data(), prompted.dim(-1));
    st.registry.push_back(
        RegisteredClass{cid, finished.spec.class_text[c], finished.step});
  }
}

RealignReport CommModel::realign_heads(const std::string& modality, RngStream& rng) {
  ModalityState& st = state_mut(modality);
  RealignReport report;
  report.class_count = static_cast<int>(st.registry.size());
  if (st.registry.empty()) return report;
  int newest = 0;
  int oldest = st.registry.front().step;
  for (const auto& rc : st.registry) {
    newest = std::max(newest, rc.step);
    oldest = std::min(oldest, rc.step);
  }
  if (oldest == newest) return report;  // nothing learned before the latest task
  report.applicable = true;

  const auto& bc = backbone_->config();
  int d = bc.encoder.d_model;
  int C = static_cast<int>(st.registry.size());
  int n = cfg_.realign_samples;

  std::vector<float> rows;
  rows.reserve(static_cast<std::size_t>(C) * n * d);
  std::vector<int> labels(static_cast<std::size_t>(C) * n);
  for (int c = 0; c < C; ++c) {
    int cid = st.registry[static_cast<std::size_t>(c)].class_id;
    auto it = st.class_stats.find(cid);
    if (it == st.class_stats.end()) {
      throw DataError("missing class statistics for class " + std::to_string(cid) +
                      " of modality '" + modality + "'");
    }
    RngStream draw = rng.child("class/" + std::to_string(cid));
    std::vector<float> s = it->second.sample(n, draw);
    rows.insert(rows.end(), s.begin(), s.end());
    std::fill(labels.begin() + static_cast<std::ptrdiff_t>(c) * n,
              labels.begin() + static_cast<std::ptrdiff_t>(c + 1) * n, c);
  }
  Tensor X = Tensor::from_data({C * n, d}, std::move(rows));
  Tensor l_all = registered_text_embeddings(modality);

  Tensor base_eff = accumulate(
      std::optional<Tensor>(backbone_->head_base(modality).value.detach()), st.head_delta);

  auto accuracy = [&](const Tensor& v_joint) {
    Tensor logits = backbone_->similarity_logits(v_joint, l_all);
    const auto& ld = logits.data();
    int correct = 0;
    for (int i = 0; i < C * n; ++i) {
      if (argmax_row(ld, C, i) == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    return static_cast<float>(correct) / static_cast<float>(C * n);
  };
  report.accuracy_before = accuracy(ops::matmul(X, base_eff));

  RngStream init = rng.child("init");
  Parameter A("realign.A", Tensor::randn({d, cfg_.head_rank}, init,
                                         1.0f / std::sqrt(static_cast<float>(d))));
  Parameter B("realign.B", Tensor::zeros({cfg_.head_rank, bc.d_joint}));
  AdamOptimizer opt({&A, &B}, cfg_.realign_lr);
  for (int s = 0; s < cfg_.realign_steps; ++s) {
    opt.zero_grad();
    ProjectionHead head{base_eff, A.value, B.value};
    Tensor logits = backbone_->similarity_logits(project(head, X), l_all);
    Tensor loss = ops::scale(ops::cross_entropy_logits(logits, labels),
                             1.0f / static_cast<float>(C * n));
    loss.backward();
    opt.step();
  }
  ProjectionHead final_head{base_eff, A.value, B.value};
  report.accuracy_after = accuracy(project(final_head, X));

  // Fold the correction in only when the sampled-set accuracy does not drop;
  // a re-alignment that hurts its own training objective is discarded.
  if (report.accuracy_after >= report.accuracy_before) {
    Tensor correction = ops::matmul(A.value.detach(), B.value.detach());
    st.head_delta = accumulate(std::optional<Tensor>(st.head_delta), correction);
    report.applied = true;
  }
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

Tensor CommModel::effective_head(const std::string& modality) const {
  const ModalityState& st = state(modality);
  return accumulate(
      std::optional<Tensor>(backbone_->head_base(modality).value.detach()), st.head_delta);
}

Tensor CommModel::registered_text_embeddings(const std::string& modality) const {
  const ModalityState& st = state(modality);
  if (st.registry.empty()) throw UsageError("modality '" + modality + "' has no classes");
  std::vector<std::vector<int>> texts;
  texts.reserve(st.registry.size());
  for (const auto& rc : st.registry) texts.push_back(rc.text);
  return text_embeddings_under(modality, texts);
}

Tensor CommModel::text_embeddings_under(const std::string& modality,
                                        const std::vector<std::vector<int>>& texts) const {
  const ModalityState& st = state(modality);
  if (!st.Q_bar.has_value()) throw UsageError("modality '" + modality + "' has no text ledger");
  if (texts.empty()) throw UsageError("no texts to embed");
  std::vector<int> flat;
  for (const auto& tokens : texts) flat.insert(flat.end(), tokens.begin(), tokens.end());
  std::vector<Tensor> q_layers = prompt_layers(*st.Q_bar);
  Tensor l = backbone_->encode_text(flat, static_cast<int>(texts.size()), &q_layers,
                                    PromptMode::Eval);
  return l.detach();
}

std::vector<std::string> CommModel::nearest_modality_by_stats(const Tensor& features) const {
  int d = features.dim(-1);
  int B = static_cast<int>(features.numel() / d);
  std::vector<std::string> eligible;
  for (const std::string& m : order_) {
    if (states_.at(m).raw_stats.count > 0) eligible.push_back(m);
  }
  if (eligible.empty()) throw UsageError("no modality has raw statistics");
  std::vector<std::string> out;
  out.reserve(static_cast<std::size_t>(B));
  const auto& f = features.data();
  for (int i = 0; i < B; ++i) {
    const float* row = f.data() + static_cast<std::size_t>(i) * d;
    double best = 1e300;
    const std::string* pick = &eligible.front();
    for (const std::string& m : eligible) {
      double dist = states_.at(m).raw_stats.mahalanobis(row);
      if (dist < best) {
        best = dist;
        pick = &m;
      }
    }
    out.push_back(*pick);
  }
  return out;
}

ParameterCount CommModel::parameter_count() const {
  const auto& bc = backbone_->config();
  const auto& ec = bc.encoder;
  long long prompt = static_cast<long long>(ec.prompt_depth) * ec.prompt_len * ec.d_model;
  long long head = static_cast<long long>(ec.d_model) * bc.d_joint;
  long long low_rank = static_cast<long long>(ec.d_model) * cfg_.head_rank +
                       static_cast<long long>(cfg_.head_rank) * bc.d_joint;
  ParameterCount out;
  if (active_) out.trainable = 2 * prompt + low_rank;
  for (const std::string& m : order_) {
    (void)m;
    long long stats = static_cast<long long>(ec.d_model) +  // mean
                      static_cast<long long>(ec.d_model) * ec.d_model;  // covariance
    long long gate_column = ec.d_model + 1;
    out.accumulated += 2 * prompt + head + stats + gate_column;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

void CommModel::save(const std::string& path) const {
  if (active_) throw UsageError("cannot save while a task is active");
  CheckpointWriter writer;
  ordered_json meta;
  meta["kind"] = "comm";
  meta["step"] = step_;
  meta["modalities"] = order_;
  ordered_json states = ordered_json::object();
  for (const std::string& m : order_) {
    const ModalityState& st = states_.at(m);
    std::string prefix = "state/" + m + "/";
    ordered_json js;
    js["first_step"] = st.first_step;
    js["has_P_bar"] = st.P_bar.has_value();
    js["raw_count"] = st.raw_stats.count;
    ordered_json registry = ordered_json::array();
    for (const auto& rc : st.registry) {
      registry.push_back({{"id", rc.class_id}, {"text", rc.text}, {"step", rc.step}});
    }
    js["registry"] = registry;
    states[m] = js;

    if (st.P_bar) writer.add(prefix + "P_bar", *st.P_bar);
    if (st.Q_bar) writer.add(prefix + "Q_bar", *st.Q_bar);
    writer.add(prefix + "head_delta", st.head_delta);
    if (st.raw_stats.count > 0) {
      int d = st.raw_stats.dim;
      writer.add_raw(prefix + "raw_mean64", {d, 2}, doubles_to_floats(st.raw_stats.mean));
      writer.add_raw(prefix + "raw_cov64", {d, d, 2}, doubles_to_floats(st.raw_stats.cov));
    }
    for (const auto& [cid, gm] : st.class_stats) {
      std::string cp = prefix + "class/" + std::to_string(cid) + "/";
      writer.add_raw(cp + "mean64", {gm.dim, 2}, doubles_to_floats(gm.mean));
      writer.add_raw(cp + "cov64", {gm.dim, gm.dim, 2}, doubles_to_floats(gm.cov));
      states[m]["class_counts"][std::to_string(cid)] = gm.count;
    }
  }
  meta["states"] = states;
  meta["gate_trained"] = gate_.trained;
  if (gate_.trained) {
    meta["gate_modalities"] = gate_.modalities;
    writer.add("gate/weight", gate_.weight.value);
    writer.add("gate/bias", gate_.bias.value);
  }
  writer.set_meta(meta.dump());
  writer.write(path);
}

void CommModel::load(const std::string& path) {
  if (active_) throw UsageError("cannot load while a task is active");
  CheckpointReader reader(path);
  ordered_json meta;
  try {
    meta = ordered_json::parse(reader.meta());
  } catch (const std::exception& e) {
    throw DataError(std::string("unreadable checkpoint metadata: ") + e.what());
  }
  if (!meta.contains("kind") || meta["kind"] != "comm") {
    throw DataError("checkpoint does not hold a continual-learner state");
  }
  order_.clear();
  states_.clear();
  gate_ = RelevanceGate{};
  step_ = meta["step"].get<int>();
  last_begun_step_ = step_;

  auto read_gauss = [&](const std::string& mean_name, const std::string& cov_name,
                        std::int64_t count) {
    GaussianModel gm;
    gm.mean = floats_to_doubles(reader.raw(mean_name));
    gm.cov = floats_to_doubles(reader.raw(cov_name));
    gm.dim = static_cast<int>(gm.mean.size());
    gm.count = count;
    if (static_cast<std::int64_t>(gm.cov.size()) !=
        static_cast<std::int64_t>(gm.dim) * gm.dim) {
      throw DataError("corrupt Gaussian statistics in checkpoint");
    }
    return gm;
  };

  for (const auto& m : meta["modalities"].get<std::vector<std::string>>()) {
    const ordered_json& js = meta["states"][m];
    ModalityState& st = ensure_state(m);
    st.first_step = js["first_step"].get<int>();
    std::string prefix = "state/" + m + "/";
    if (js["has_P_bar"].get<bool>()) {
      st.P_bar = reader.tensor(prefix + "P_bar");
      st.Q_bar = reader.tensor(prefix + "Q_bar");
      st.has_history = true;
    }
    st.head_delta = reader.tensor(prefix + "head_delta");
    std::int64_t raw_count = js["raw_count"].get<std::int64_t>();
    if (raw_count > 0) {
      st.raw_stats = read_gauss(prefix + "raw_mean64", prefix + "raw_cov64", raw_count);
    }
    for (const auto& entry : js["registry"]) {
      st.registry.push_back(RegisteredClass{entry["id"].get<int>(),
                                            entry["text"].get<std::vector<int>>(),
                                            entry["step"].get<int>()});
    }
    if (js.contains("class_counts")) {
      for (const auto& [cid_str, count] : js["class_counts"].items()) {
        int cid = std::stoi(cid_str);
        std::string cp = prefix + "class/" + cid_str + "/";
        st.class_stats[cid] =
            read_gauss(cp + "mean64", cp + "cov64", count.get<std::int64_t>());
      }
    }
  }
  if (meta["gate_trained"].get<bool>()) {
    gate_.modalities = meta["gate_modalities"].get<std::vector<std::string>>();
    gate_.weight = Parameter("gate.weight", reader.tensor("gate/weight"));
    gate_.bias = Parameter("gate.bias", reader.tensor("gate/bias"));
    gate_.trained = true;
  }
}

}  // namespace mmcl
