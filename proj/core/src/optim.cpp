#include "mmcl/optim.hpp"

#include <cmath>

namespace mmcl {

AdamState make_adam_state(float learning_rate) {
  AdamState s;
  s.learning_rate = learning_rate;
  return s;
}

void adam_update(Parameter& param, AdamState& state) {
  if (!param.trainable) {
    throw UsageError("adam_update on frozen parameter '" + param.name + "'");
  }
  auto& w = param.value.raw_data();
  auto& g = param.value.raw_grad();
  if (state.m.empty()) {
    state.m.assign(w.size(), 0.0f);
    state.v.assign(w.size(), 0.0f);
  } else if (state.m.size() != w.size()) {
    throw UsageError("adam state size mismatch for parameter '" + param.name + "'");
  }
  state.step_count += 1;
  double b1t = 1.0 - std::pow(static_cast<double>(state.beta1), state.step_count);
  double b2t = 1.0 - std::pow(static_cast<double>(state.beta2), state.step_count);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(g[i])) {
      throw NumericFault("non-finite gradient in adam_update for '" + param.name + "'");
    }
    state.m[i] = state.beta1 * state.m[i] + (1.0f - state.beta1) * g[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0f - state.beta2) * g[i] * g[i];
    double mhat = state.m[i] / b1t;
    double vhat = state.v[i] / b2t;
    w[i] -= static_cast<float>(state.learning_rate * mhat /
                               (std::sqrt(vhat) + state.epsilon));
  }
}

AdamOptimizer::AdamOptimizer(std::vector<Parameter*> params, float learning_rate)
    : params_(std::move(params)) {
  states_.resize(params_.size());
  for (auto& s : states_) s.learning_rate = learning_rate;
}

void AdamOptimizer::step() {
  for (std::size_t i = 0; i < params_.size(); ++i) adam_update(*params_[i], states_[i]);
}

void AdamOptimizer::zero_grad() {
  for (Parameter* p : params_) p->value.zero_grad();
}

}  // namespace mmcl
