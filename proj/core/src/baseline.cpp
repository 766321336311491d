#include "mmcl/baseline.hpp"

#include <algorithm>

namespace mmcl {

FtModel::FtModel(Backbone* backbone, const FtConfig& cfg)
    : backbone_(backbone), cfg_(cfg) {
  if (backbone_ == nullptr) throw UsageError("baseline needs a backbone");
  const auto& bc = backbone_->config();
  const auto& ec = bc.encoder;
  Shape prompt_shape{ec.prompt_depth, ec.prompt_len, ec.d_model};
  P_ = Parameter("ft.P", Tensor::zeros(prompt_shape));
  Q_ = Parameter("ft.Q", Tensor::zeros(prompt_shape));

  // One head for every modality: start from the average of the frozen
  // per-modality bases so no modality is preferred at step zero.
  std::vector<Tensor> bases;
  for (const std::string& m : bc.modalities) {
    bases.push_back(backbone_->head_base(m).value.detach());
  }
  Tensor sum = bases.front();
  for (std::size_t i = 1; i < bases.size(); ++i) sum = ops::add(sum, bases[i]);
  head_ = Parameter("ft.head",
                    ops::scale(sum, 1.0f / static_cast<float>(bases.size())).detach());
}

const std::vector<RegisteredClass>& FtModel::registry(const std::string& modality) const {
  auto it = registries_.find(modality);
  if (it == registries_.end()) {
    throw UsageError("no classes registered for modality '" + modality + "'");
  }
  return it->second;
}

void FtModel::begin_task(int t, const TaskSpec& spec) {
  if (t < 1) throw UsageError("time steps start at 1");
  if (active_) throw UsageError("a task is already active; call end_task first");
  if (t < step_) throw UsageError("time steps must not go backwards");
  if (spec.modality.empty() || spec.class_ids.empty()) {
    throw UsageError("task spec needs a modality and at least one class");
  }
  if (spec.class_text.size() != spec.class_ids.size()) {
    throw UsageError("task spec class_text must align with class_ids");
  }
  int text_len = backbone_->config().text_len;
  ActiveTask task;
  task.step = t;
  task.spec = spec;
  for (const auto& text : spec.class_text) {
    if (static_cast<int>(text.size()) != text_len) {
      throw UsageError("class text must hold exactly " + std::to_string(text_len) +
                       " tokens");
    }
    task.flat_text.insert(task.flat_text.end(), text.begin(), text.end());
  }
  step_ = t;
  active_ = std::move(task);
  // The optimizer restarts for every task; only the parameters persist.
  opt_.emplace(std::vector<Parameter*>{&P_, &Q_, &head_}, cfg_.lr);
}

LossBreakdown FtModel::task_step(const Tensor& tokens, const std::vector<int>& labels) {
  if (!active_) throw UsageError("no task is active");
  int B = tokens.dim(0);
  int C = static_cast<int>(active_->spec.class_ids.size());
  if (static_cast<int>(labels.size()) != B) {
    throw UsageError("one label per batch row required");
  }
  for (int l : labels) {
    if (l < 0 || l >= C) throw UsageError("label outside the task's class range");
  }

  std::vector<Tensor> p_layers = prompt_layers(P_.value);
  std::vector<Tensor> q_layers = prompt_layers(Q_.value);
  Tensor features = backbone_->encode_modality(tokens, &p_layers, PromptMode::Train);
  Tensor v = ops::matmul(features, head_.value);
  Tensor l = backbone_->encode_text(active_->flat_text, C, &q_layers, PromptMode::Train);
  Tensor logits = backbone_->similarity_logits(v, l);
  Tensor loss = ops::scale(ops::cross_entropy_logits(logits, labels),
                           1.0f / static_cast<float>(B));

  opt_->zero_grad();
  try {
    loss.backward();
  } catch (const NumericFault& e) {
    throw NumericFault(std::string("[ft task_step step=") + std::to_string(active_->step) +
                       " modality=" + active_->spec.modality + "] " + e.what());
  }
  opt_->step();

  LossBreakdown out;
  out.task = loss.item();
  out.total = out.task;
  return out;
}

void FtModel::end_task() {
  if (!active_) throw UsageError("no task is active");
  const TaskSpec& spec = active_->spec;
  if (std::find(order_.begin(), order_.end(), spec.modality) == order_.end()) {
    order_.push_back(spec.modality);
  }
  auto& reg = registries_[spec.modality];
  for (std::size_t c = 0; c < spec.class_ids.size(); ++c) {
    reg.push_back(RegisteredClass{spec.class_ids[c], spec.class_text[c], active_->step});
  }
  active_.reset();
  opt_.reset();
}

std::vector<Tensor> FtModel::prompt_layers_modality() const {
  return prompt_layers(P_.value.detach());
}

std::vector<Tensor> FtModel::prompt_layers_text() const {
  return prompt_layers(Q_.value.detach());
}

Tensor FtModel::registered_text_embeddings(const std::string& modality) const {
  const auto& reg = registry(modality);
  std::vector<int> flat;
  for (const auto& rc : reg) flat.insert(flat.end(), rc.text.begin(), rc.text.end());
  std::vector<Tensor> q_layers = prompt_layers_text();
  return backbone_->encode_text(flat, static_cast<int>(reg.size()), &q_layers,
                                PromptMode::Eval);
}

ParameterCount FtModel::parameter_count() const {
  ParameterCount out;
  long long shared = static_cast<long long>(P_.value.numel()) + Q_.value.numel() +
                     head_.value.numel();
  out.trainable = shared;
  out.accumulated = shared;
  return out;
}

}  // namespace mmcl
